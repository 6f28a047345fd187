"""Network assembly and the per-example message schedule.

A network owns its layers and the retained inter-layer messages for the
active batch.  The schedule is the alternating sweep: one full forward
pass over an example's branch, then immediately a full backward pass,
examples strictly in sequence.  Prediction is a forward-only pass that
reads the weight marginals and never writes anything back.
"""

from __future__ import annotations

import numpy as np

from . import factors
from .factors import GuardPolicy
from .layers import (
    ArgmaxHead,
    Boundary,
    Incidents,
    Layer,
    LayerSpec,
    RegressionHead,
    SoftmaxHead,
    WeightedLayer,
    build_layer,
    shape_infer,
)

__all__ = ["Network"]


class Network:
    def __init__(self, specs: list[LayerSpec], policy: GuardPolicy | None = None):
        if not specs or specs[0].kind != "input":
            raise ValueError("model must begin with an input layer")
        shapes = shape_infer(specs)
        self.input_shape = shapes[0]
        self.specs = list(specs)
        self.layers: list[Layer] = []
        seen_weighted = False
        for spec, in_shape, out_shape in zip(specs[1:], shapes[:-1], shapes[1:]):
            if not seen_weighted and spec.kind in ("leakyrelu", "maxpool"):
                raise ValueError(f"{spec.kind} before the first weighted layer is not supported")
            first = not seen_weighted and spec.kind in ("linear", "conv")
            layer = build_layer(spec, in_shape, out_shape, first_weighted=first)
            if spec.kind == "flatten" and not seen_weighted:
                layer.observed = True
            if layer.has_weights:
                seen_weighted = True
            layer._index = len(self.layers)
            self.layers.append(layer)
        self.head = self.layers[-1]
        if not isinstance(self.head, (RegressionHead, ArgmaxHead, SoftmaxHead)):
            raise ValueError("model must end in a regression, argmax, or softmax head")
        self.boundaries = [Boundary(layer.n_out) for layer in self.layers[:-1]]
        self.policy = policy or GuardPolicy()
        self.incidents = Incidents()
        self.batch_inputs = None
        self.batch_labels = None
        self.batch_size = 0

    # ------------------------------------------------------------------
    @property
    def weighted_layers(self) -> list[WeightedLayer]:
        return [l for l in self.layers if l.has_weights]

    @property
    def is_classifier(self) -> bool:
        return isinstance(self.head, (ArgmaxHead, SoftmaxHead))

    @property
    def n_classes(self) -> int:
        return self.head.n_in

    def n_params(self) -> int:
        return sum(l.n_params for l in self.weighted_layers)

    def boundary_in(self, layer: Layer) -> Boundary:
        return self.boundaries[layer._index - 1]

    def boundary_out(self, layer: Layer) -> Boundary:
        return self.boundaries[layer._index]

    # ------------------------------------------------------------------
    def set_batch(self, inputs: np.ndarray, labels):
        """Install an active batch: observed inputs, targets, fresh boundaries."""
        self.batch_inputs = np.asarray(inputs, dtype=float)
        self.batch_labels = labels
        self.batch_size = len(inputs)
        for b in self.boundaries:
            b.reset(self.batch_size)
        for layer in self.weighted_layers:
            if layer.per_example.shape[0] != self.batch_size:
                layer.alloc_batch(self.batch_size)

    def forward_example(self, e: int):
        for layer in self.layers:
            layer.forward_example(e, self)

    def backward_example(self, e: int):
        for layer in reversed(self.layers):
            layer.backward_example(e, self)

    def sweep_example(self, e: int):
        self.forward_example(e)
        self.backward_example(e)

    def iterate_batch(self):
        """One iteration: sweep every active example, then refresh marginals."""
        for e in range(self.batch_size):
            self.sweep_example(e)
        self.recompute_marginals()

    def recompute_marginals(self):
        for layer in self.weighted_layers:
            layer.recompute_marginal()

    # ------------------------------------------------------------------
    def predict_moments(self, inputs: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Moments of the head's input variables on the prediction branch."""
        x = np.asarray(inputs, dtype=float).reshape(len(inputs), -1)
        mu, var = x, np.zeros_like(x)
        for layer in self.layers[:-1]:
            mu, var = layer.predict_forward(mu, var, self)
        return mu, var

    def predict(self, inputs: np.ndarray, class_probs: str = "softmax"):
        """Predictive posterior: (mean, variance) for regression heads,
        class-probability rows for classification heads."""
        mu, var = self.predict_moments(inputs)
        if isinstance(self.head, RegressionHead):
            out_mu, out_var = self.head.predict_forward(mu, var, self)
            return out_mu.reshape(len(inputs), -1), out_var.reshape(len(inputs), -1)
        probs = np.empty((len(inputs), self.n_classes))
        for e in range(len(inputs)):
            if class_probs == "softmax":
                probs[e] = factors.softmax_forward(mu[e], var[e])
            elif class_probs == "argmax":
                raw = np.array([factors.argmax_forward(mu[e], var[e], c) for c in range(self.n_classes)])
                probs[e] = raw / raw.sum()
            else:
                raise ValueError(f"unknown class_probs mode {class_probs!r}")
        return probs

    def validate_state(self) -> list[str]:
        """Return descriptions of any non-finite or improper stored state."""
        problems = []
        for i, layer in enumerate(self.weighted_layers):
            for name, arr in (("prior", layer.prior), ("marginal", layer.marginal), ("agg_other", layer.agg_other)):
                if not arr.is_finite():
                    problems.append(f"layer {i} {name} has non-finite entries")
            if np.any(layer.marginal.rho <= 0.0):
                problems.append(f"layer {i} marginal has non-positive precision")
            if not layer.per_example.is_finite():
                problems.append(f"layer {i} per-example messages non-finite")
            if np.any(layer.per_example.rho < 0.0):
                problems.append(f"layer {i} per-example messages with negative precision")
        return problems
