"""Weight-prior initialization: spectral means, width-aware variances.

Prior means are sampled N(0, l^2) with the spectral scale

    l = min(1, sqrt(d2 / d1)) / sqrt(d1)

(d1 = fan-in, d2 = fan-out; for convolutions d1 = C_in * k^2, d2 = C_out),
which lets messages break symmetry at any width.  Prior variances follow
the fitted width formula

    sigma2_p = (t - 0.8041 * min(1, d2 / d1)) / (0.8041 + 0.4496 * d1)

with target variance t = 1.5 by default; the two constants were fitted for
a leak of 0.1 at that target.  Bias priors are N(0, 0.5).
"""

from __future__ import annotations

import numpy as np

from .network import Network
from .rng import stream

__all__ = ["spectral_scale", "prior_variance", "init_priors"]

_SIGMA2_X = 0.8041
_SIGMA2_MU = 0.4496


def spectral_scale(d1: int, d2: int) -> float:
    return min(1.0, np.sqrt(d2 / d1)) / np.sqrt(d1)


def prior_variance(d1: int, d2: int, target: float = 1.5) -> float:
    v = (target - _SIGMA2_X * min(1.0, d2 / d1)) / (_SIGMA2_X + _SIGMA2_MU * d1)
    if v <= 0.0:
        raise ValueError(f"prior variance non-positive for d1={d1}, d2={d2}, target={target}")
    return v


def init_priors(net: Network, seed: int, target_variance: float = 1.5, bias_variance: float = 0.5):
    """Sample and install priors on every weighted layer; marginals start at the prior."""
    for i, layer in enumerate(net.weighted_layers):
        d1, d2 = layer.fan_in_out()
        l = spectral_scale(d1, d2)
        var_w = prior_variance(d1, d2, target_variance)
        rng = stream(seed, 0, i)
        means = rng.normal(0.0, l, size=layer.n_weights)
        rho_w = 1.0 / var_w
        layer.prior.tau[: layer.n_weights] = means * rho_w
        layer.prior.rho[: layer.n_weights] = rho_w
        if layer.n_bias:
            layer.prior.tau[layer.n_weights :] = 0.0
            layer.prior.rho[layer.n_weights :] = 1.0 / bias_variance
        layer.agg_other.fill_uniform_()
        layer.marginal.tau = layer.prior.tau.copy()
        layer.marginal.rho = layer.prior.rho.copy()
