"""Command-line surface: synth-data, train, eval, predict, coverage."""

from __future__ import annotations

import argparse
import os
import sys

import numpy as np

from . import datasets, evaluation, reports
from .checkpoint import load_checkpoint, restore_network, save_checkpoint
from .datasets import Dataset
from .layers import RegressionHead
from .modelspec import (
    config_to_text,
    model_to_text,
    parse_config_file,
    parse_config_text,
    parse_model_file,
    parse_model_text,
)
from .network import Network
from .training import TrainConfig, Trainer

__all__ = ["main"]


def _parse_kv(spec: str) -> dict:
    out = {}
    for part in spec.split(","):
        part = part.strip()
        if not part:
            continue
        if "=" not in part:
            raise ValueError(f"expected key=value in data spec, got {part!r}")
        k, v = part.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def load_data(spec: str, seed: int = 0, normalization=None) -> Dataset:
    """Data specs: sine:..., csv:path, cifar:path[,split=...,limit=N]."""
    kind, _, rest = spec.partition(":")
    if kind == "sine":
        opts = _parse_kv(rest) if rest else {}
        X, y = datasets.synth_sine(
            n=int(opts.get("n", 200)),
            x_range=(float(opts.get("xmin", 0.0)), float(opts.get("xmax", 2.0))),
            noise_sigma=float(opts.get("noise", 0.05)),
            seed=int(opts.get("seed", seed)),
        )
        return Dataset(X, y)
    if kind == "csv":
        X, y = datasets.load_regression_csv(rest)
        return Dataset(X, y)
    if kind == "cifar":
        path, *opt_parts = rest.split(",")
        opts = _parse_kv(",".join(opt_parts)) if opt_parts else {}
        limit = int(opts["limit"]) if "limit" in opts else None
        return datasets.load_cifar10(path, split=opts.get("split", "train"), limit=limit, normalization=normalization)
    raise ValueError(f"unknown data spec kind {kind!r}")


def _shape_of(ds: Dataset):
    return tuple(ds.X.shape[1:]) if ds.X.ndim > 1 else (1,)


def cmd_synth_data(args):
    os.makedirs(args.out, exist_ok=True)
    kind, _, rest = args.data.partition(":")
    if kind == "sine":
        ds = load_data(args.data, seed=args.seed)
        path = os.path.join(args.out, "sine.csv")
        datasets.save_regression_csv(path, ds.X, ds.y)
        print(f"wrote {len(ds.y)} examples to {path}")
    elif kind == "cifar-synth":
        opts = _parse_kv(rest) if rest else {}
        out_dir = os.path.join(args.out, "cifar-synth")
        datasets.synth_cifar_like(
            out_dir,
            n_train=int(opts.get("n_train", 5000)),
            n_test=int(opts.get("n_test", 1000)),
            seed=int(opts.get("seed", args.seed)),
        )
        print(f"wrote synthetic CIFAR-format batches to {out_dir}")
    else:
        raise ValueError(f"synth-data supports sine:... and cifar-synth:..., got {args.data!r}")
    return 0


def _build_trainer(model_path, config_path, seed_override=None):
    specs = parse_model_file(model_path)
    cfg = parse_config_file(config_path) if config_path else TrainConfig()
    if seed_override is not None:
        cfg.seed = seed_override
    net = Network(specs)
    return net, Trainer(net, cfg), specs, cfg


def cmd_train(args):
    os.makedirs(args.out, exist_ok=True)
    net, trainer, specs, cfg = _build_trainer(args.model, args.config, args.seed)
    ds = load_data(args.data, seed=cfg.seed)
    if _shape_of(ds) != net.input_shape:
        print(f"error: data shape {_shape_of(ds)} does not match model input {net.input_shape}", file=sys.stderr)
        return 2
    log = trainer.fit(ds.X, ds.y)
    problems = net.validate_state()
    ckpt = os.path.join(args.out, "checkpoint.bnn")
    config_text = config_to_text(cfg)
    if ds.normalization is not None:
        mean, std = ds.normalization
        config_text += "# normalization handled via checkpoint header\n"
    header_model = model_to_text(specs)
    trainer.normalization = ds.normalization
    save_checkpoint(ckpt, trainer, header_model, config_text)
    if ds.normalization is not None:
        # store channel stats alongside for eval-time reuse
        mean, std = ds.normalization
        reports.write_csv(
            os.path.join(args.out, "normalization.csv"),
            ["channel", "mean", "std"],
            [(i, float(m), float(s)) for i, (m, s) in enumerate(zip(mean, std))],
        )
    reports.write_csv(
        os.path.join(args.out, "training_log.csv"),
        ["epoch", "iterations", "seconds", "incidents"],
        [(s.epoch, s.iterations, round(s.seconds, 3), sum(s.incidents.values())) for s in log],
    )
    reports.write_report(
        os.path.join(args.out, "train_report.txt"),
        {
            "epochs": cfg.epochs,
            "examples": len(ds.y),
            "parameters": net.n_params(),
            "guard_incidents_total": net.incidents.total(),
            "state_problems": len(problems),
            **{f"incident.{k}": v for k, v in sorted(net.incidents.counts.items())},
        },
    )
    for p in problems:
        print(f"state problem: {p}", file=sys.stderr)
    print(f"trained {cfg.epochs} epochs; checkpoint at {ckpt}")
    return 0 if not problems else 1


def _restore(checkpoint_path):
    header, arrays = load_checkpoint(checkpoint_path)
    specs = parse_model_text(header["model"])
    cfg = parse_config_text(header["config"])
    net = Network(specs)
    restore_network(net, arrays)
    return net, header, cfg


def cmd_eval(args):
    os.makedirs(args.out, exist_ok=True)
    net, header, cfg = _restore(args.checkpoint)
    norm = _normalization_from(args)
    ds = load_data(args.data, seed=cfg.seed, normalization=norm)
    if _shape_of(ds) != net.input_shape:
        print(f"error: data shape {_shape_of(ds)} does not match model input {net.input_shape}", file=sys.stderr)
        return 2
    if isinstance(net.head, RegressionHead):
        mu, var = net.predict(ds.X)
        mu, var = mu[:, 0], var[:, 0]
        rep = {
            "rmse": float(np.sqrt(np.mean((mu - ds.y) ** 2))),
            "nll": evaluation.regression_nll(mu, var, ds.y),
            "mean_sigma": float(np.mean(np.sqrt(var))),
        }
        reports.write_csv(
            os.path.join(args.out, "predictions.csv"),
            ["x0", "y", "mean", "variance"],
            np.column_stack([ds.X[:, 0], ds.y, mu, var]),
        )
    else:
        probs = net.predict(ds.X)
        rep = evaluation.classification_report(probs, ds.y)
        conf = np.max(probs, axis=1)
        correct = (np.argmax(probs, axis=1) == ds.y).astype(float)
        edges, _ = evaluation.variance_minimizing_bins(np.sort(conf), 20)
        rows = reports.calibration_table(conf, correct, edges)
        reports.write_csv(
            os.path.join(args.out, "calibration_bins.csv"),
            ["conf_lo", "conf_hi", "count", "mean_confidence", "accuracy"],
            rows,
        )
        reports.calibration_figure(os.path.join(args.out, "calibration.png"), rows)
        if args.ood_data:
            ood = load_data(args.ood_data, seed=cfg.seed, normalization=ds.normalization)
            ood_probs = net.predict(ood.X)
            rep["ood_auroc"] = evaluation.ood_auroc(probs, ood_probs)
            s_in = -evaluation.predictive_entropy(probs)
            s_ood = -evaluation.predictive_entropy(ood_probs)
            fpr, tpr = reports.roc_points(s_in, s_ood)
            reports.write_csv(os.path.join(args.out, "roc_points.csv"), ["fpr", "tpr"], np.column_stack([fpr, tpr]))
            reports.roc_figure(os.path.join(args.out, "roc.png"), fpr, tpr, rep["ood_auroc"])
    reports.write_report(os.path.join(args.out, "metrics.txt"), rep)
    for k in sorted(rep):
        print(f"{k}={rep[k]}")
    return 0


def _normalization_from(args):
    if getattr(args, "normalization", None):
        _, rows = reports.read_csv(args.normalization)
        return rows[:, 1], rows[:, 2]
    return None


def cmd_predict(args):
    os.makedirs(args.out, exist_ok=True)
    net, header, cfg = _restore(args.checkpoint)
    ds = load_data(args.data, seed=cfg.seed, normalization=_normalization_from(args))
    if isinstance(net.head, RegressionHead):
        mu, var = net.predict(ds.X)
        rows = np.column_stack([ds.X.reshape(len(mu), -1)[:, 0], mu[:, 0], var[:, 0]])
        reports.write_csv(os.path.join(args.out, "predictions.csv"), ["x0", "mean", "variance"], rows)
        if net.input_shape == (1,):
            order = np.argsort(ds.X[:, 0])
            reports.fit_figure(
                os.path.join(args.out, "fit.png"),
                ds.X[:, 0],
                ds.y,
                ds.X[order, 0],
                mu[order, 0],
                np.sqrt(var[order, 0]),
            )
    else:
        probs = net.predict(ds.X)
        header_cols = [f"p{c}" for c in range(probs.shape[1])]
        reports.write_csv(os.path.join(args.out, "predictions.csv"), header_cols, probs)
    print(f"wrote predictions for {len(ds.X)} inputs to {args.out}")
    return 0


def cmd_coverage(args):
    os.makedirs(args.out, exist_ok=True)
    specs = parse_model_file(args.model)
    cfg = parse_config_file(args.config) if args.config else TrainConfig(batch_size=512, epochs=500)
    ds = load_data(args.data, seed=args.seed)
    x_grid = np.round(np.arange(args.x_min, args.x_max + 1e-9, args.x_step), 10)
    mus = np.empty((args.seeds, x_grid.size))
    variances = np.empty((args.seeds, x_grid.size))
    for s in range(args.seeds):
        net = Network(specs)
        cfg_s = TrainConfig(
            batch_size=cfg.batch_size,
            epochs=cfg.epochs,
            damping_lambda=cfg.damping_lambda,
            seed=args.seed + 1000 * s,
            iteration_schedule=dict(cfg.iteration_schedule),
        )
        Trainer(net, cfg_s).fit(ds.X, ds.y)
        mu, var = net.predict(x_grid[:, None])
        mus[s] = mu[:, 0]
        variances[s] = var[:, 0]
        print(f"seed {s + 1}/{args.seeds} trained", flush=True)
    if args.include_noise:
        beta2 = float(net.head.beta2)
        variances = variances + beta2
    result = evaluation.coverage_from_predictions(
        mus, variances, x_grid, datasets.sine_function, x_threshold=args.x_threshold
    )
    rows = []
    for i, p in enumerate(result.p_grid):
        for j, x in enumerate(result.x_grid):
            rows.append((float(p), float(x), float(result.coverage[i, j])))
    reports.write_csv(os.path.join(args.out, "coverage_grid.csv"), ["p", "x", "coverage"], rows)
    reports.write_csv(
        os.path.join(args.out, "coverage_medians.csv"),
        ["p", "median_pos", "median_neg"],
        np.column_stack([result.p_grid, result.median_pos, result.median_neg]),
    )
    rep = {
        "seeds": args.seeds,
        "corr_pos": result.corr_pos,
        "corr_neg": result.corr_neg,
        "corr_combined": result.corr_combined,
        "include_noise": args.include_noise,
    }
    reports.write_report(os.path.join(args.out, "coverage_report.txt"), rep)
    reports.coverage_figure(
        os.path.join(args.out, "coverage.png"),
        result.p_grid,
        result.median_pos,
        result.median_neg,
        result.corr_combined,
    )
    for k in sorted(rep):
        print(f"{k}={rep[k]}")
    return 0


def main(argv=None):
    parser = argparse.ArgumentParser(prog="beliefnn", description="Gaussian message-passing Bayesian neural networks")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth-data", help="generate synthetic datasets")
    p.add_argument("--data", required=True, help="sine:n=...,xmin=...,xmax=...,noise=... or cifar-synth:n_train=...")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_synth_data)

    p = sub.add_parser("train", help="train a model")
    p.add_argument("--model", required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--data", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--ood-data", default=None)
    p.add_argument("--normalization", default=None, help="normalization.csv from training")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("predict", help="predictive posterior for inputs")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--normalization", default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("coverage", help="multi-seed credible-interval coverage experiment")
    p.add_argument("--model", required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--data", required=True)
    p.add_argument("--seeds", type=int, default=20)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--x-min", type=float, default=-20.0)
    p.add_argument("--x-max", type=float, default=20.0)
    p.add_argument("--x-step", type=float, default=0.05)
    p.add_argument("--x-threshold", type=float, default=10.0)
    p.add_argument("--include-noise", action="store_true", help="add observation noise to interval widths")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_coverage)

    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
