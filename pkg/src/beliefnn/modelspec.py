"""Text formats: model files (one layer per line) and flat key=value configs.

Model file example::

    # three-layer regression MLP
    input 1
    linear 16
    leakyrelu 0.1
    linear 16
    leakyrelu 0.1
    linear 1
    regression 0.0025

Config files are flat ``key=value`` lines; the iteration schedule uses
``epoch:iters`` pairs separated by commas, e.g. ``iteration_schedule=0:1,10:2``.
"""

from __future__ import annotations

from .layers import LayerSpec, shape_infer
from .training import TrainConfig

__all__ = ["parse_model_text", "parse_model_file", "model_to_text", "parse_config_text", "parse_config_file", "config_to_text"]


class SpecParseError(ValueError):
    pass


_KIND_ARGS = {
    "input": (int,),
    "linear": (int,),
    "conv": (int, int, int),
    "leakyrelu": (float,),
    "maxpool": (int,),
    "flatten": (),
    "regression": (float,),
    "argmax": (float,),
    "softmax": (),
}


def parse_model_text(text: str) -> list[LayerSpec]:
    specs = []
    for ln, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        kind = parts[0].lower()
        if kind not in _KIND_ARGS:
            raise SpecParseError(f"line {ln}: unknown layer kind {parts[0]!r}")
        raw_args = parts[1:]
        flags = tuple(a for a in raw_args if a in ("nobias",))
        raw_args = [a for a in raw_args if a not in flags]
        types = _KIND_ARGS[kind]
        if kind == "input":
            if not raw_args:
                raise SpecParseError(f"line {ln}: input needs at least one dimension")
            try:
                args = tuple(int(a) for a in raw_args)
            except ValueError as exc:
                raise SpecParseError(f"line {ln}: {exc}") from None
        elif kind == "argmax" and not raw_args:
            args = ()
        else:
            if len(raw_args) != len(types):
                raise SpecParseError(
                    f"line {ln}: {kind} expects {len(types)} argument(s), got {len(raw_args)}"
                )
            try:
                args = tuple(t(a) for t, a in zip(types, raw_args))
            except ValueError as exc:
                raise SpecParseError(f"line {ln}: {exc}") from None
        specs.append(LayerSpec(kind, args + flags))
    if not specs:
        raise SpecParseError("empty model file")
    shape_infer(specs)  # raises ShapeError with the layer index on misfit
    return specs


def parse_model_file(path) -> list[LayerSpec]:
    with open(path) as fh:
        return parse_model_text(fh.read())


def model_to_text(specs: list[LayerSpec]) -> str:
    return "\n".join(str(s) for s in specs) + "\n"


_CONFIG_FIELDS = {
    "batch_size": int,
    "epochs": int,
    "damping_lambda": float,
    "seed": int,
    "shuffle": lambda v: v.lower() in ("1", "true", "yes"),
    "prior_target_variance": float,
    "bias_prior_variance": float,
}


def _parse_schedule(value: str) -> dict[int, int]:
    out = {}
    for pair in value.split(","):
        pair = pair.strip()
        if not pair:
            continue
        epoch, iters = pair.split(":")
        out[int(epoch)] = int(iters)
    return out


def parse_config_text(text: str) -> TrainConfig:
    kwargs = {}
    for ln, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise SpecParseError(f"line {ln}: expected key=value, got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if key == "iteration_schedule":
            kwargs[key] = _parse_schedule(value)
        elif key in _CONFIG_FIELDS:
            try:
                kwargs[key] = _CONFIG_FIELDS[key](value)
            except ValueError as exc:
                raise SpecParseError(f"line {ln}: bad value for {key}: {exc}") from None
        else:
            raise SpecParseError(f"line {ln}: unknown config key {key!r}")
    return TrainConfig(**kwargs)


def parse_config_file(path) -> TrainConfig:
    with open(path) as fh:
        return parse_config_text(fh.read())


def config_to_text(cfg: TrainConfig) -> str:
    lines = [
        f"batch_size={cfg.batch_size}",
        f"epochs={cfg.epochs}",
        f"damping_lambda={cfg.damping_lambda!r}",
        f"seed={cfg.seed}",
        f"shuffle={str(cfg.shuffle).lower()}",
        f"prior_target_variance={cfg.prior_target_variance!r}",
        f"bias_prior_variance={cfg.bias_prior_variance!r}",
    ]
    if cfg.iteration_schedule:
        sched = ",".join(f"{e}:{i}" for e, i in sorted(cfg.iteration_schedule.items()))
        lines.append(f"iteration_schedule={sched}")
    return "\n".join(lines) + "\n"
