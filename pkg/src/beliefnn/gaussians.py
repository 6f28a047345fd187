"""Scalar Gaussian algebra in natural parameters, plus analytic building blocks.

Every message and marginal in this library is a (scaled) one-dimensional
Gaussian stored as natural parameters

    rho = 1 / sigma^2        (precision)
    tau = mu / sigma^2       (precision-mean)

so that multiplying densities is pointwise addition of (tau, rho) and
division is subtraction.  The pair (0, 0) encodes the uniform
("no information") message, which acts as the multiplicative identity.

The building blocks implemented here are the pieces all message equations
are assembled from:

    relu_moment(k, mu, s2)      E[max(0, Z)^k],  Z ~ N(mu, s2),  k = 1, 2
    zeta(k, m1, s1, m2, s2)     int_0^inf z^k N(z; m1, s1) N(z; m2, s2) dz
    s_minus(k, m1, s1, m2, s2)  int_-inf^0 z^k N(z; m1, s1) N(0; m2, s2) dz

All functions accept scalars or numpy arrays and broadcast; everything is
computed in float64.  The Gaussian overlap scale inside ``zeta`` is taken
in log space and exponentiated once so widely separated inputs do not
underflow earlier than float64 itself forces.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import erfc, erfcx

__all__ = [
    "Gaussian1D",
    "UNIFORM",
    "GaussianArray",
    "multiply",
    "divide",
    "from_moments",
    "to_moments",
    "std_normal_pdf",
    "std_normal_cdf",
    "relu_moment",
    "zeta",
    "s_minus",
    "log_normal_pdf",
]

_LOG_2PI = math.log(2.0 * math.pi)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)
_SQRT_HALF = math.sqrt(0.5)


@dataclass(frozen=True)
class Gaussian1D:
    """One scalar Gaussian message/marginal in natural parameters.

    ``rho >= 0`` is required for anything stored as a message or marginal;
    ``divide`` may produce negative precision, which callers must guard
    before storing.  ``Gaussian1D(0.0, 0.0)`` is the uniform message.
    """

    tau: float
    rho: float

    def __post_init__(self):
        if not (math.isfinite(self.tau) and math.isfinite(self.rho)):
            raise ValueError(f"non-finite natural parameters ({self.tau}, {self.rho})")

    @property
    def is_uniform(self) -> bool:
        return self.tau == 0.0 and self.rho == 0.0

    @property
    def is_proper(self) -> bool:
        return self.rho > 0.0

    def mean_var(self) -> tuple[float, float]:
        return to_moments(self)


UNIFORM = Gaussian1D(0.0, 0.0)


def multiply(a: Gaussian1D, b: Gaussian1D) -> Gaussian1D:
    """Pointwise product of two Gaussian densities, normalization dropped."""
    return Gaussian1D(a.tau + b.tau, a.rho + b.rho)


def divide(num: Gaussian1D, den: Gaussian1D) -> Gaussian1D:
    """Pointwise quotient; the result may have negative precision."""
    return Gaussian1D(num.tau - den.tau, num.rho - den.rho)


def from_moments(mu: float, var: float) -> Gaussian1D:
    if not var > 0.0:
        raise ValueError(f"variance must be positive, got {var}")
    rho = 1.0 / var
    return Gaussian1D(mu * rho, rho)


def to_moments(g: Gaussian1D) -> tuple[float, float]:
    if not g.rho > 0.0:
        raise ValueError(f"cannot convert improper Gaussian (rho={g.rho}) to moments")
    var = 1.0 / g.rho
    return g.tau * var, var


def std_normal_pdf(x):
    x = np.asarray(x, dtype=float)
    out = _INV_SQRT_2PI * np.exp(-0.5 * x * x)
    return out if out.ndim else float(out)


def std_normal_cdf(x):
    # 0.5 * erfc(-x / sqrt(2)): accurate to ~1 ulp over the whole real line.
    x = np.asarray(x, dtype=float)
    out = 0.5 * erfc(-x * _SQRT_HALF)
    return out if out.ndim else float(out)


def log_normal_pdf(x, mu, var):
    """log N(x; mu, var) for var > 0."""
    x = np.asarray(x, dtype=float)
    d = x - mu
    out = -0.5 * (_LOG_2PI + np.log(var)) - 0.5 * d * d / var
    return out if out.ndim else float(out)


def _relu_h1(x):
    """h1(x) = pdf(x) + x * cdf(x), so E[ReLU(N(mu, s^2))] = sigma * h1(mu/sigma).

    For x << 0 the two terms cancel; rewrite through erfcx to keep the
    exponential factored out of the subtraction.
    """
    x = np.asarray(x, dtype=float)
    small = x < -4.0
    xs = np.where(small, -4.0, x)
    direct = std_normal_pdf(xs) + xs * std_normal_cdf(xs)
    xt = np.where(small, x, -4.0)
    bracket = _INV_SQRT_2PI + 0.5 * xt * erfcx(-xt * _SQRT_HALF)
    tail = np.exp(-0.5 * xt * xt) * bracket
    out = np.where(small, tail, direct)
    return np.maximum(out, 0.0)


def _relu_h2(x):
    """h2(x) = x*pdf(x) + (1+x^2)*cdf(x); E[ReLU^2] = sigma^2 * h2(mu/sigma)."""
    x = np.asarray(x, dtype=float)
    small = x < -4.0
    xs = np.where(small, -4.0, x)
    direct = xs * std_normal_pdf(xs) + (1.0 + xs * xs) * std_normal_cdf(xs)
    xt = np.where(small, x, -4.0)
    bracket = xt * _INV_SQRT_2PI + (1.0 + xt * xt) * 0.5 * erfcx(-xt * _SQRT_HALF)
    tail = np.exp(-0.5 * xt * xt) * bracket
    out = np.where(small, tail, direct)
    return np.maximum(out, 0.0)


def _relu_h12(x):
    """(h1, h2) together, sharing pdf/cdf/erfcx evaluations."""
    small = x < -4.0
    xs = np.where(small, -4.0, x)
    pdf = _INV_SQRT_2PI * np.exp(-0.5 * xs * xs)
    cdf = 0.5 * erfc(-xs * _SQRT_HALF)
    h1d = pdf + xs * cdf
    h2d = xs * pdf + (1.0 + xs * xs) * cdf
    if np.any(small):
        xt = np.where(small, x, -4.0)
        ef = 0.5 * erfcx(-xt * _SQRT_HALF)
        ex = np.exp(-0.5 * xt * xt)
        h1t = ex * (_INV_SQRT_2PI + xt * ef)
        h2t = ex * (xt * _INV_SQRT_2PI + (1.0 + xt * xt) * ef)
        h1d = np.where(small, h1t, h1d)
        h2d = np.where(small, h2t, h2d)
    return np.maximum(h1d, 0.0), np.maximum(h2d, 0.0)


def _zeta_all(mu1, sigma2_1, mu2, sigma2_2):
    """(zeta_0, zeta_1, zeta_2) in one pass; inputs assumed valid."""
    inv1 = 1.0 / sigma2_1
    inv2 = 1.0 / sigma2_2
    var_m = 1.0 / (inv1 + inv2)
    mu_m = (mu1 * inv1 + mu2 * inv2) * var_m
    sigma_m = np.sqrt(var_m)
    xm = mu_m / sigma_m
    h1, h2 = _relu_h12(xm)
    cdf = 0.5 * erfc(-xm * _SQRT_HALF)
    s = sigma2_1 + sigma2_2
    d = mu1 - mu2
    scale = np.exp(-0.5 * (_LOG_2PI + np.log(s)) - 0.5 * d * d / s)
    return scale * cdf, scale * sigma_m * h1, scale * var_m * h2


def _s_minus_all(mu1, sigma2_1, mu2, sigma2_2):
    """(S0, S1, S2) of the negative-half-line integral; inputs assumed valid."""
    sigma1 = np.sqrt(sigma2_1)
    xn = -mu1 / sigma1
    h1, h2 = _relu_h12(xn)
    cdf = 0.5 * erfc(-xn * _SQRT_HALF)
    d2 = mu2 * mu2 / sigma2_2
    scale = np.exp(-0.5 * (_LOG_2PI + np.log(sigma2_2)) - 0.5 * d2)
    return scale * cdf, -scale * sigma1 * h1, scale * sigma2_1 * h2


def relu_moment(k: int, mu, sigma2):
    """k-th raw moment of ReLU(Z) for Z ~ N(mu, sigma2), k in {1, 2}."""
    mu = np.asarray(mu, dtype=float)
    sigma2 = np.asarray(sigma2, dtype=float)
    if np.any(sigma2 <= 0.0):
        raise ValueError("relu_moment requires sigma2 > 0")
    sigma = np.sqrt(sigma2)
    x = mu / sigma
    if k == 1:
        out = sigma * _relu_h1(x)
    elif k == 2:
        out = sigma2 * _relu_h2(x)
    else:
        raise ValueError(f"k must be 1 or 2, got {k}")
    return out if out.ndim else float(out)


def _log_overlap(mu1, sigma2_1, mu2, sigma2_2):
    """log N(mu1; mu2, sigma2_1 + sigma2_2), the Gaussian product scale."""
    s = sigma2_1 + sigma2_2
    d = mu1 - mu2
    return -0.5 * (_LOG_2PI + np.log(s)) - 0.5 * d * d / s


def zeta(k: int, mu1, sigma2_1, mu2, sigma2_2):
    """Half-line Gaussian-product integral int_0^inf z^k N(z;mu1,s1) N(z;mu2,s2) dz.

    Equal to the overlap scale N(mu1; mu2, s1+s2) times the k-th ReLU moment
    (k = 1, 2) or the positive-mass probability (k = 0) of the merged
    Gaussian with natural parameters tau_m = mu1/s1 + mu2/s2 and
    rho_m = 1/s1 + 1/s2.
    """
    mu1 = np.asarray(mu1, dtype=float)
    mu2 = np.asarray(mu2, dtype=float)
    sigma2_1 = np.asarray(sigma2_1, dtype=float)
    sigma2_2 = np.asarray(sigma2_2, dtype=float)
    if np.any(sigma2_1 <= 0.0) or np.any(sigma2_2 <= 0.0):
        raise ValueError("zeta requires positive variances")
    rho_m = 1.0 / sigma2_1 + 1.0 / sigma2_2
    tau_m = mu1 / sigma2_1 + mu2 / sigma2_2
    var_m = 1.0 / rho_m
    mu_m = tau_m * var_m
    if k == 0:
        factor = std_normal_cdf(mu_m / np.sqrt(var_m))
    elif k in (1, 2):
        factor = relu_moment(k, mu_m, var_m)
    else:
        raise ValueError(f"k must be 0, 1 or 2, got {k}")
    log_scale = _log_overlap(mu1, sigma2_1, mu2, sigma2_2)
    factor = np.asarray(factor, dtype=float)
    with np.errstate(divide="ignore"):
        out = np.where(factor > 0.0, np.exp(log_scale + np.log(np.where(factor > 0.0, factor, 1.0))), 0.0)
    return out if out.ndim else float(out)


def s_minus(k: int, mu1, sigma2_1, mu2, sigma2_2):
    """Negative-half-line integral int_-inf^0 z^k N(z;mu1,s1) N(0;mu2,s2) dz."""
    mu1 = np.asarray(mu1, dtype=float)
    sigma2_1 = np.asarray(sigma2_1, dtype=float)
    if np.any(sigma2_1 <= 0.0) or np.any(np.asarray(sigma2_2, dtype=float) <= 0.0):
        raise ValueError("s_minus requires positive variances")
    log_scale = log_normal_pdf(0.0, mu2, sigma2_2)
    if k == 0:
        factor = std_normal_cdf(-mu1 / np.sqrt(sigma2_1))
        sign = 1.0
    elif k in (1, 2):
        factor = relu_moment(k, -mu1, sigma2_1)
        sign = -1.0 if k == 1 else 1.0
    else:
        raise ValueError(f"k must be 0, 1 or 2, got {k}")
    factor = np.asarray(factor, dtype=float)
    with np.errstate(divide="ignore"):
        mag = np.where(factor > 0.0, np.exp(log_scale + np.log(np.where(factor > 0.0, factor, 1.0))), 0.0)
    out = sign * mag
    return out if out.ndim else float(out)


class GaussianArray:
    """A shaped collection of scalar Gaussians stored as (tau, rho) arrays.

    This is the tensor workhorse behind layers and the trainer; the scalar
    Gaussian1D API above is the reference semantics.  Operations mutate in
    place where suffixed with ``_``; otherwise they allocate.
    """

    __slots__ = ("tau", "rho")

    def __init__(self, tau: np.ndarray, rho: np.ndarray):
        self.tau = tau
        self.rho = rho

    @classmethod
    def uniform(cls, shape) -> "GaussianArray":
        return cls(np.zeros(shape), np.zeros(shape))

    @classmethod
    def from_moments(cls, mu, var) -> "GaussianArray":
        mu = np.asarray(mu, dtype=float)
        var = np.asarray(var, dtype=float)
        rho = 1.0 / var
        return cls(mu * rho, rho)

    @property
    def shape(self):
        return self.tau.shape

    def copy(self) -> "GaussianArray":
        return GaussianArray(self.tau.copy(), self.rho.copy())

    def fill_uniform_(self):
        self.tau.fill(0.0)
        self.rho.fill(0.0)

    def times(self, other: "GaussianArray") -> "GaussianArray":
        return GaussianArray(self.tau + other.tau, self.rho + other.rho)

    def over(self, other: "GaussianArray") -> "GaussianArray":
        return GaussianArray(self.tau - other.tau, self.rho - other.rho)

    def imul(self, other: "GaussianArray") -> "GaussianArray":
        self.tau += other.tau
        self.rho += other.rho
        return self

    def idiv(self, other: "GaussianArray") -> "GaussianArray":
        self.tau -= other.tau
        self.rho -= other.rho
        return self

    def moments(self) -> tuple[np.ndarray, np.ndarray]:
        """(mean, variance); requires every rho > 0."""
        var = 1.0 / self.rho
        return self.tau * var, var

    def raw_moments(self) -> tuple[np.ndarray, np.ndarray]:
        """(E[x], E[x^2]); requires every rho > 0."""
        var = 1.0 / self.rho
        mean = self.tau * var
        return mean, var + mean * mean

    def is_finite(self) -> bool:
        return bool(np.all(np.isfinite(self.tau)) and np.all(np.isfinite(self.rho)))

    def __getitem__(self, idx) -> "GaussianArray":
        return GaussianArray(self.tau[idx], self.rho[idx])

    def set_(self, idx, other: "GaussianArray"):
        self.tau[idx] = other.tau
        self.rho[idx] = other.rho
