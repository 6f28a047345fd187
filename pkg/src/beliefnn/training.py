"""Batch-wise training: install/retire protocol, damping, iteration ramp.

While a batch is active, the weight marginal of every layer is

    marginal = prior * aggregated_other * prod_e per_example_message[e]

where aggregated_other is the product of the stored aggregates of all
inactive batches.  Retiring a batch collapses its per-example messages
into an aggregate (exponentially smoothed against the previous aggregate
of the same batch); installing one swaps its aggregate back out for the
retained per-example messages, so no datum is ever counted twice.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .gaussians import GaussianArray
from .layers import Incidents
from .network import Network
from .priors import init_priors
from .rng import stream

__all__ = ["TrainConfig", "Trainer", "EpochStats"]


@dataclass
class TrainConfig:
    batch_size: int = 128
    epochs: int = 1
    damping_lambda: float = 0.7
    seed: int = 0
    shuffle: bool = False
    prior_target_variance: float = 1.5
    bias_prior_variance: float = 0.5
    iteration_schedule: dict[int, int] = field(default_factory=dict)

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not (0.0 < self.damping_lambda <= 1.0):
            raise ValueError("damping_lambda must lie in (0, 1]")
        if any(v < 0 for v in self.iteration_schedule.values()):
            raise ValueError("iteration counts must be non-negative")

    def iterations_for_epoch(self, epoch: int) -> int:
        if self.iteration_schedule:
            applicable = [e for e in self.iteration_schedule if e <= epoch]
            if applicable:
                return self.iteration_schedule[max(applicable)]
            return 1
        # default ramp: 1 -> 4 over the run
        return 1 + int(epoch / max(1.0, self.epochs / 4.0))


@dataclass
class EpochStats:
    epoch: int
    iterations: int
    incidents: dict[str, int]
    seconds: float


def apply_damping(old: GaussianArray, new: GaussianArray, lam: float) -> GaussianArray:
    """Exponential moving average of aggregates in natural parameters."""
    if not (0.0 < lam <= 1.0):
        raise ValueError("lambda must lie in (0, 1]")
    return GaussianArray(lam * new.tau + (1.0 - lam) * old.tau, lam * new.rho + (1.0 - lam) * old.rho)


class Trainer:
    """Runs the loopy schedule over batches of a fixed dataset."""

    def __init__(self, net: Network, config: TrainConfig):
        self.net = net
        self.config = config
        init_priors(net, config.seed, config.prior_target_variance, config.bias_prior_variance)
        self.aggregates: dict[int, list[GaussianArray]] = {}
        self.stored_msgs: dict[int, list[GaussianArray]] = {}
        self.active_batch: int | None = None
        self.batches: list[np.ndarray] = []
        self.epoch_log: list[EpochStats] = []
        self._partition: list[np.ndarray] = []
        self._X = None
        self._y = None

    # ------------------------------------------------------------------
    def _make_batches(self, n: int, epoch: int) -> list[np.ndarray]:
        """Partition is fixed for the whole run (aggregates must not mix
        examples across batches); shuffling only permutes the visit order."""
        if not self._partition:
            order = stream(self.config.seed, 1).permutation(n) if self.config.shuffle else np.arange(n)
            b = self.config.batch_size
            self._partition = [order[i : i + b] for i in range(0, n, b)]
        batches = self._partition
        if self.config.shuffle and len(batches) > 1:
            visit = stream(self.config.seed, 1, 1 + epoch).permutation(len(batches))
            batches = [batches[i] for i in visit]
        return batches

    def _batch_id(self, idx: np.ndarray) -> int:
        # identity of a batch is its first example; the partition is fixed
        return int(idx[0])

    def _refresh_agg_other(self, exclude: int | None):
        for li, layer in enumerate(self.net.weighted_layers):
            layer.agg_other.fill_uniform_()
            for bid, aggs in self.aggregates.items():
                if bid == exclude:
                    continue
                layer.agg_other.imul(aggs[li])

    def install_batch(self, bid: int, idx: np.ndarray):
        net = self.net
        net.set_batch(self._X[idx], self._y[idx] if self._y is not None else None)
        self._refresh_agg_other(exclude=bid)
        stored = self.stored_msgs.get(bid)
        for li, layer in enumerate(net.weighted_layers):
            layer.alloc_batch(len(idx))
            if stored is not None:
                layer.per_example.tau[:] = stored[li].tau
                layer.per_example.rho[:] = stored[li].rho
            layer.recompute_marginal()
        self.active_batch = bid

    def retire_batch(self, bid: int):
        lam = self.config.damping_lambda
        new_aggs = []
        new_stored = []
        for layer in self.net.weighted_layers:
            fresh = GaussianArray(layer.per_example.tau.sum(axis=0), layer.per_example.rho.sum(axis=0))
            old = self.aggregates.get(bid)
            if old is None:
                # nothing to smooth against on the first visit
                agg = fresh
            else:
                agg = apply_damping(old[len(new_aggs)], fresh, lam)
            new_aggs.append(agg)
            new_stored.append(layer.per_example.copy())
        self.aggregates[bid] = new_aggs
        self.stored_msgs[bid] = new_stored
        self._refresh_agg_other(exclude=None)
        for layer in self.net.weighted_layers:
            layer.alloc_batch(0)
            layer.recompute_marginal()
        self.active_batch = None

    # ------------------------------------------------------------------
    def fit(self, X, y) -> list[EpochStats]:
        self._X = np.asarray(X, dtype=float)
        self._y = np.asarray(y)
        for epoch in range(self.config.epochs):
            self.run_epoch(epoch)
        return self.epoch_log

    def run_epoch(self, epoch: int, final: bool | None = None):
        t0 = time.perf_counter()
        before = dict(self.net.incidents.counts)
        iters = self.config.iterations_for_epoch(epoch)
        self.batches = self._make_batches(len(self._X), epoch)
        if final is None:
            final = epoch == self.config.epochs - 1
        for bi, idx in enumerate(self.batches):
            bid = self._batch_id(idx)
            if bid != self.active_batch:
                if self.active_batch is not None:
                    self.retire_batch(self.active_batch)
                self.install_batch(bid, idx)
            for _ in range(iters):
                self.net.iterate_batch()
            # keep a single-batch run live across epochs; retire otherwise
            last_of_run = final and bi == len(self.batches) - 1
            if len(self.batches) > 1 or last_of_run:
                self.retire_batch(bid)
        delta = {
            k: v - before.get(k, 0) for k, v in self.net.incidents.counts.items() if v - before.get(k, 0)
        }
        self.epoch_log.append(EpochStats(epoch, iters, delta, time.perf_counter() - t0))
