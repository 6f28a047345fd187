"""Stateless forward/backward message equations for every factor type.

Factors are pure functions from incoming messages to outgoing messages.
Exact factors (weighted sum, product, inner product, regression) need no
approximation; nonlinearities and classification heads are moment matched,
either directly (fit the message) or through the marginal (fit the updated
marginal, then divide the incoming message back out).

Numerical guards follow a single policy object: whenever a marginal
approximation produces non-finite output, negligible mass, or a message
that cannot be stored, the factor falls back to the direct approximation
(forward) or to the uniform message G(0,0) (backward) and flags it.  Guards
never raise; every result is storable (finite, rho >= 0).
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np
from numpy.polynomial.hermite import hermgauss

from . import gaussians
from .gaussians import (
    UNIFORM,
    Gaussian1D,
    from_moments,
    log_normal_pdf,
    relu_moment,
    s_minus,
    std_normal_cdf,
    std_normal_pdf,
    zeta,
)

__all__ = [
    "GuardPolicy",
    "Fallback",
    "FactorMessageResult",
    "weighted_sum_forward",
    "weighted_sum_backward",
    "product_forward",
    "product_backward",
    "inner_product_backward",
    "leakyrelu_forward_direct",
    "leakyrelu_forward_marginal",
    "leakyrelu_backward",
    "regression_forward",
    "regression_backward",
    "softmax_forward",
    "softmax_backward",
    "argmax_forward",
    "argmax_backward",
    "maxpool_messages",
    "max_pair_moments",
]


class Fallback(enum.Enum):
    NONE = "none"
    DIRECT = "direct"
    UNIFORM = "uniform"


@dataclass(frozen=True)
class GuardPolicy:
    """Thresholds for the stability guards on moment-matched messages."""

    min_mass: float = 1e-8
    min_backward_rho: float = 2e-8
    require_tau_positive_or_rho: bool = True
    enabled: bool = True

    def __post_init__(self):
        if self.min_mass <= 0.0 or self.min_backward_rho <= 0.0:
            raise ValueError("guard thresholds must be positive")


DEFAULT_POLICY = GuardPolicy()


@dataclass(frozen=True)
class FactorMessageResult:
    message: Gaussian1D
    fallback_used: Fallback = Fallback.NONE


# ---------------------------------------------------------------------------
# weighted sum:  s = c^T v


def weighted_sum_forward(c, means, variances) -> Gaussian1D:
    """Exact density of c^T v for independent Gaussian addends."""
    c = np.asarray(c, dtype=float)
    means = np.asarray(means, dtype=float)
    variances = np.asarray(variances, dtype=float)
    if not (c.shape == means.shape == variances.shape) or c.ndim != 1 or c.size < 1:
        raise ValueError("coefficient/mean/variance vectors must share one non-empty shape")
    if np.any(variances < 0.0):
        raise ValueError("variances must be non-negative")
    mu = float(c @ means)
    var = float((c * c) @ variances)
    if var <= 0.0:
        raise ValueError("forward variance is zero; all addends deterministic")
    return from_moments(mu, var)


def _ws_backward_nat(a_d, tau_z, rho_z, fwd_mu, fwd_var, mu_d, var_d):
    """Natural-parameter backward message through a weighted-sum factor.

    Vectorized; returns (tau, rho, ok) where ok=False marks a non-positive
    denominator (numerically inconsistent state -> uniform fallback).
    """
    a_d = np.asarray(a_d, dtype=float)
    denom = 1.0 + rho_z * (fwd_var - a_d * a_d * var_d)
    ok = denom > 1e-300
    safe = np.where(ok, denom, 1.0)
    tau = a_d * (tau_z - rho_z * (fwd_mu - a_d * mu_d)) / safe
    rho = a_d * a_d * rho_z / safe
    tau = np.where(ok, tau, 0.0)
    rho = np.where(ok, rho, 0.0)
    return tau, rho, ok


def weighted_sum_backward(a_d, tau_z, rho_z, fwd_mu, fwd_var, mu_d, var_d) -> FactorMessageResult:
    """Message to addend d given the downstream message (tau_z, rho_z) on the sum.

    fwd_mu/fwd_var are the full forward moments (including addend d);
    mu_d/var_d are addend d's own incoming moments.  Well defined for
    a_d = 0 and rho_z = 0 (both yield the uniform message).
    """
    tau, rho, ok = _ws_backward_nat(a_d, tau_z, rho_z, fwd_mu, fwd_var, mu_d, var_d)
    if not bool(ok):
        return FactorMessageResult(UNIFORM, Fallback.UNIFORM)
    return FactorMessageResult(Gaussian1D(float(tau), float(rho)))


# ---------------------------------------------------------------------------
# product:  c = a * b  (variational message passing)


def product_forward(Ea, Ea2, Eb, Eb2) -> Gaussian1D:
    """Moment-matched density of a*b for independent a, b given raw moments."""
    if Ea2 < Ea * Ea or Eb2 < Eb * Eb:
        raise ValueError("inconsistent moments: E[x^2] < E[x]^2")
    mu = Ea * Eb
    var = Ea2 * Eb2 - Ea * Ea * Eb * Eb
    if var <= 0.0:
        raise ValueError("product forward variance is zero; both factors deterministic")
    return from_moments(mu, var)


def product_backward(tau_z, rho_z, Ea, Ea2) -> Gaussian1D:
    """Message to b given downstream (tau_z, rho_z) and the other input's moments."""
    if Ea2 < Ea * Ea or Ea2 < 0.0:
        raise ValueError("inconsistent moments: E[a^2] < E[a]^2")
    return Gaussian1D(tau_z * Ea, rho_z * Ea2)


def _ip_backward_nat(Ea, Ea2, tau_z, rho_z, fwd_mu, fwd_var, mu_prod, var_prod):
    """Inner-product backward message to b_i, vectorized over addends.

    mu_prod/var_prod are addend i's own contribution to the forward moments
    (E[a_i]E[b_i] and E[a_i^2]E[b_i^2] - E[a_i]^2 E[b_i]^2).
    """
    rho_star = 1.0 + rho_z * (fwd_var - var_prod)
    ok = rho_star > 1e-300
    safe = np.where(ok, rho_star, 1.0)
    tau = Ea * (tau_z - rho_z * (fwd_mu - mu_prod)) / safe
    rho = rho_z * Ea2 / safe
    tau = np.where(ok, tau, 0.0)
    rho = np.where(ok, rho, 0.0)
    return tau, rho, ok


def inner_product_backward(i, Ea, Ea2, Eb, Eb2, tau_z, rho_z, fwd_mu, fwd_var) -> FactorMessageResult:
    """Message to b_i through the fused product + unit-coefficient sum factor."""
    Ea = np.asarray(Ea, dtype=float)
    Ea2 = np.asarray(Ea2, dtype=float)
    Eb = np.asarray(Eb, dtype=float)
    Eb2 = np.asarray(Eb2, dtype=float)
    mu_prod = Ea[i] * Eb[i]
    var_prod = Ea2[i] * Eb2[i] - mu_prod * mu_prod
    tau, rho, ok = _ip_backward_nat(Ea[i], Ea2[i], tau_z, rho_z, fwd_mu, fwd_var, mu_prod, var_prod)
    if not bool(ok):
        return FactorMessageResult(UNIFORM, Fallback.UNIFORM)
    return FactorMessageResult(Gaussian1D(float(tau), float(rho)))


# ---------------------------------------------------------------------------
# LeakyReLU:  a = max(z, alpha * z)


def _leaky_direct_moments(alpha, mu_z, var_z):
    """Mean and variance of LeakyReLU_alpha(N(mu_z, var_z)), any alpha >= 0."""
    m1 = (1.0 - alpha) * relu_moment(1, mu_z, var_z) + alpha * mu_z
    e2 = (1.0 - alpha * alpha) * relu_moment(2, mu_z, var_z) + alpha * alpha * (var_z + mu_z * mu_z)
    var = e2 - m1 * m1
    return m1, var


def leakyrelu_forward_direct(alpha, mu_z, var_z) -> Gaussian1D:
    """Direct moment match of the pushforward density; invalid for alpha = 0."""
    if alpha == 0.0:
        raise ValueError("direct forward matching is not defined for ReLU (alpha=0); use the marginal form")
    if alpha < 0.0:
        raise ValueError("alpha must be non-negative")
    if not var_z > 0.0:
        raise ValueError("var_z must be positive")
    mu, var = _leaky_direct_moments(alpha, mu_z, var_z)
    return from_moments(mu, max(var, 1e-300))


def _leaky_marginal_fwd_moments(alpha, mu_z, var_z, mu_a, var_a):
    """Raw moments m0, m1, m2 of the updated output marginal of LeakyReLU.

    The negative branch contributes through the reflected half-line integral
    with the input message rescaled by alpha; the positive branch is the
    plain Gaussian-product half-line integral.
    """
    if alpha == 0.0:
        m0 = zeta(0, mu_z, var_z, mu_a, var_a) + math.exp(log_normal_pdf(0.0, mu_a, var_a)) * std_normal_cdf(
            -mu_z / math.sqrt(var_z)
        )
        m1 = zeta(1, mu_z, var_z, mu_a, var_a)
        m2 = zeta(2, mu_z, var_z, mu_a, var_a)
        return m0, m1, m2
    a2 = alpha * alpha
    m0 = zeta(0, -mu_a, var_a, -alpha * mu_z, a2 * var_z) + zeta(0, mu_a, var_a, mu_z, var_z)
    m1 = -zeta(1, -mu_a, var_a, -alpha * mu_z, a2 * var_z) + zeta(1, mu_a, var_a, mu_z, var_z)
    m2 = zeta(2, -mu_a, var_a, -alpha * mu_z, a2 * var_z) + zeta(2, mu_a, var_a, mu_z, var_z)
    return m0, m1, m2


def _leaky_marginal_bwd_moments(alpha, mu_z, var_z, mu_a, var_a):
    """Raw moments of the updated *input* marginal of LeakyReLU.

    The backward message evaluates the downstream density at LeakyReLU(z);
    on the negative branch that is a Gaussian in z with parameters divided
    by alpha and carries a 1/alpha amplitude.  The alpha -> 0 limit is the
    ReLU decomposition into a half-line product plus a point-mass term.
    """
    if alpha == 0.0:
        m0 = zeta(0, mu_z, var_z, mu_a, var_a) + s_minus(0, mu_z, var_z, mu_a, var_a)
        m1 = zeta(1, mu_z, var_z, mu_a, var_a) + s_minus(1, mu_z, var_z, mu_a, var_a)
        m2 = zeta(2, mu_z, var_z, mu_a, var_a) + s_minus(2, mu_z, var_z, mu_a, var_a)
        return m0, m1, m2
    inv_a = 1.0 / alpha
    mu_n = -mu_a * inv_a
    var_n = var_a * inv_a * inv_a
    m0 = inv_a * zeta(0, -mu_z, var_z, mu_n, var_n) + zeta(0, mu_z, var_z, mu_a, var_a)
    m1 = -inv_a * zeta(1, -mu_z, var_z, mu_n, var_n) + zeta(1, mu_z, var_z, mu_a, var_a)
    m2 = inv_a * zeta(2, -mu_z, var_z, mu_n, var_n) + zeta(2, mu_z, var_z, mu_a, var_a)
    return m0, m1, m2


def _fit_from_mass_moments(m0, m1, m2):
    """Gaussian fit N(m1/m0, m2/m0 - (m1/m0)^2); None when unusable."""
    if not (math.isfinite(m0) and math.isfinite(m1) and math.isfinite(m2)) or m0 <= 0.0:
        return None
    mean = m1 / m0
    var = m2 / m0 - mean * mean
    if not math.isfinite(var) or var <= 0.0:
        return None
    return mean, var


def _direct_forward_any_alpha(alpha, mu_z, var_z) -> Gaussian1D:
    mu, var = _leaky_direct_moments(alpha, mu_z, var_z)
    return from_moments(mu, max(var, 1e-300))


def leakyrelu_forward_marginal(
    alpha, msg_z: Gaussian1D, msg_a_to_f: Gaussian1D, policy: GuardPolicy = DEFAULT_POLICY
) -> FactorMessageResult:
    """Marginal-approximated forward message through LeakyReLU_alpha.

    msg_z is the incoming message from the input variable (must be proper),
    msg_a_to_f the incoming message from the output variable, which is
    divided back out of the fitted marginal.  Guards fall back to the
    direct approximation.
    """
    if alpha < 0.0:
        raise ValueError("alpha must be non-negative")
    if not msg_z.is_proper:
        return FactorMessageResult(UNIFORM, Fallback.UNIFORM)
    mu_z, var_z = msg_z.mean_var()
    if not msg_a_to_f.is_proper:
        # Division by the uniform message: the marginal *is* the message.
        return FactorMessageResult(_direct_forward_any_alpha(alpha, mu_z, var_z))
    mu_a, var_a = msg_a_to_f.mean_var()
    direct = FactorMessageResult(_direct_forward_any_alpha(alpha, mu_z, var_z), Fallback.DIRECT)
    m0, m1, m2 = _leaky_marginal_fwd_moments(alpha, mu_z, var_z, mu_a, var_a)
    if policy.enabled and m0 <= policy.min_mass:
        return direct
    fit = _fit_from_mass_moments(m0, m1, m2)
    if fit is None:
        return direct
    marginal = from_moments(*fit)
    tau = marginal.tau - msg_a_to_f.tau
    rho = marginal.rho - msg_a_to_f.rho
    if not (math.isfinite(tau) and math.isfinite(rho)):
        return direct
    # forward messages must not widen through the factor (LeakyReLU contracts)
    if policy.enabled and rho < msg_z.rho:
        return direct
    if rho < 0.0:
        return direct
    return FactorMessageResult(Gaussian1D(tau, rho))


def leakyrelu_backward(
    alpha, msg_z_to_f: Gaussian1D, msg_a: Gaussian1D, policy: GuardPolicy = DEFAULT_POLICY
) -> FactorMessageResult:
    """Marginal-approximated backward message through LeakyReLU_alpha.

    msg_a is the downstream message from the output variable (must be
    proper for information to flow back); msg_z_to_f is the input
    variable's incoming message, divided back out of the fit.  Guards fall
    back to the uniform message.
    """
    if alpha < 0.0:
        raise ValueError("alpha must be non-negative")
    if not msg_a.is_proper:
        return FactorMessageResult(UNIFORM)
    mu_a, var_a = msg_a.mean_var()
    if not msg_z_to_f.is_proper:
        if alpha == 0.0:
            return FactorMessageResult(UNIFORM, Fallback.UNIFORM)
        # Uniform incoming: moment match the backward message itself.
        inv_a = 1.0 / alpha
        m0 = inv_a * std_normal_cdf(-mu_a / math.sqrt(var_a)) + std_normal_cdf(mu_a / math.sqrt(var_a))
        m1 = -inv_a * relu_moment(1, -mu_a * inv_a, var_a * inv_a * inv_a) + relu_moment(1, mu_a, var_a)
        m2 = inv_a * relu_moment(2, -mu_a * inv_a, var_a * inv_a * inv_a) + relu_moment(2, mu_a, var_a)
        fit = _fit_from_mass_moments(m0, m1, m2)
        if fit is None:
            return FactorMessageResult(UNIFORM, Fallback.UNIFORM)
        return FactorMessageResult(from_moments(*fit))
    mu_z, var_z = msg_z_to_f.mean_var()
    m0, m1, m2 = _leaky_marginal_bwd_moments(alpha, mu_z, var_z, mu_a, var_a)
    uniform = FactorMessageResult(UNIFORM, Fallback.UNIFORM)
    fit = _fit_from_mass_moments(m0, m1, m2)
    if fit is None:
        return uniform
    marginal = from_moments(*fit)
    tau = marginal.tau - msg_z_to_f.tau
    rho = marginal.rho - msg_z_to_f.rho
    if not (math.isfinite(tau) and math.isfinite(rho)) or rho < 0.0:
        return uniform
    if policy.enabled and policy.require_tau_positive_or_rho:
        if not (tau > 0.0 or rho > policy.min_backward_rho):
            return uniform
    return FactorMessageResult(Gaussian1D(tau, rho))


# ---------------------------------------------------------------------------
# regression head


def regression_forward(mu_a, var_a, beta2) -> Gaussian1D:
    """Predictive density with observation noise added."""
    if not beta2 > 0.0:
        raise ValueError("beta2 must be positive")
    return from_moments(mu_a, var_a + beta2)


def regression_backward(y, beta2) -> Gaussian1D:
    """Likelihood message N(y, beta2) when the target is observed.

    Pass ``y=None`` for the prediction branch, which yields the uniform
    message.
    """
    if not beta2 > 0.0:
        raise ValueError("beta2 must be positive")
    if y is None:
        return UNIFORM
    rho = 1.0 / beta2
    return Gaussian1D(y * rho, rho)


# ---------------------------------------------------------------------------
# softmax head


def _probit_logits(mus, variances):
    mus = np.asarray(mus, dtype=float)
    variances = np.asarray(variances, dtype=float)
    if mus.shape != variances.shape:
        raise ValueError("logit mean/variance shape mismatch")
    if np.any(variances < 0.0):
        raise ValueError("variances must be non-negative")
    return mus / (1.0 + (math.pi / 8.0) * variances)


def _stable_softmax(logits, axis=-1):
    z = logits - np.max(logits, axis=axis, keepdims=True)
    e = np.exp(z)
    return e / np.sum(e, axis=axis, keepdims=True)


def softmax_forward(mus, variances) -> np.ndarray:
    """Probit-approximated class probabilities E[softmax(a)] under the logit marginals."""
    return _stable_softmax(_probit_logits(mus, variances))


_GH_NODES, _GH_WEIGHTS = hermgauss(64)


def softmax_backward(c, d, mus, variances, incoming: Gaussian1D | None = None) -> FactorMessageResult:
    """Backward message to logit d when class c is observed.

    Moment matches the marginal of logit d against the probit-collapsed
    softmax likelihood using 64-point Gauss-Hermite quadrature, then
    divides out the logit's incoming message (when proper).
    """
    mus = np.asarray(mus, dtype=float)
    variances = np.asarray(variances, dtype=float)
    t = _probit_logits(mus, variances)
    mu_d = mus[d]
    sigma_d = math.sqrt(variances[d])
    nodes = mu_d + math.sqrt(2.0) * sigma_d * _GH_NODES
    # log softmax(t_1,...,a_d,...)_c with a_d inserted at position d
    logits = np.broadcast_to(t, (nodes.size, t.size)).copy()
    logits[:, d] = nodes
    lse = np.log(np.sum(np.exp(logits - logits.max(axis=1, keepdims=True)), axis=1)) + logits.max(axis=1)
    lik = np.exp(logits[:, c] - lse)
    w = _GH_WEIGHTS / math.sqrt(math.pi)
    m0 = float(w @ lik)
    m1 = float(w @ (lik * nodes))
    m2 = float(w @ (lik * nodes * nodes))
    if m0 <= 1e-12:
        return FactorMessageResult(UNIFORM, Fallback.UNIFORM)
    fit = _fit_from_mass_moments(m0, m1, m2)
    if fit is None:
        return FactorMessageResult(UNIFORM, Fallback.UNIFORM)
    marginal = from_moments(*fit)
    if incoming is None:
        incoming = from_moments(mu_d, variances[d])
    if not incoming.is_proper:
        return FactorMessageResult(marginal)
    tau = marginal.tau - incoming.tau
    rho = marginal.rho - incoming.rho
    if not (math.isfinite(tau) and math.isfinite(rho)) or rho < 0.0:
        return FactorMessageResult(UNIFORM, Fallback.UNIFORM)
    return FactorMessageResult(Gaussian1D(tau, rho))


# ---------------------------------------------------------------------------
# argmax head


def argmax_forward(mus, variances, c) -> float:
    """Factorized probability that class c attains the maximum logit."""
    mus = np.asarray(mus, dtype=float)
    variances = np.asarray(variances, dtype=float)
    diff_mu = mus[c] - mus
    diff_sd = np.sqrt(variances[c] + variances)
    probs = std_normal_cdf(diff_mu / diff_sd)
    probs = np.delete(probs, c)
    return float(np.prod(probs))


def argmax_backward(c, mus, variances, gamma=1.0) -> list[Gaussian1D]:
    """Messages to every logit when class c is observed.

    For each competitor i the pairwise difference z_i = a_c - a_i is
    truncated to z_i >= 0 and moment matched; the implied messages are
    pushed back through the difference factor, attenuated by the pairwise
    losing probability, and combined with a one-hot regression factor
    N(+1, gamma^2) for the winner and N(-1, gamma^2) for the others.
    """
    if not gamma > 0.0:
        raise ValueError("gamma must be positive")
    mus = np.asarray(mus, dtype=float)
    variances = np.asarray(variances, dtype=float)
    d = mus.size
    rho_onehot = 1.0 / (gamma * gamma)
    out_tau = np.full(d, -1.0 * rho_onehot)
    out_rho = np.full(d, rho_onehot)
    out_tau[c] = 1.0 * rho_onehot
    for i in range(d):
        if i == c:
            continue
        fwd_mu = mus[c] - mus[i]
        fwd_var = variances[c] + variances[i]
        m0 = std_normal_cdf(fwd_mu / math.sqrt(fwd_var))
        if m0 <= 1e-12:
            continue
        m1 = relu_moment(1, fwd_mu, fwd_var)
        m2 = relu_moment(2, fwd_mu, fwd_var)
        mean_t = m1 / m0
        var_t = m2 / m0 - mean_t * mean_t
        if not var_t > 0.0:
            continue
        fit = from_moments(mean_t, var_t)
        fwd = from_moments(fwd_mu, fwd_var)
        tau_z = fit.tau - fwd.tau
        rho_z = max(fit.rho - fwd.rho, 0.0)
        # Losing probability regularizes (widens) the pairwise correction.
        p_lose = float(std_normal_cdf(-fwd_mu / math.sqrt(fwd_var)))
        for target, coeff in ((c, 1.0), (i, -1.0)):
            tau_b, rho_b, ok = _ws_backward_nat(
                coeff, tau_z, rho_z, fwd_mu, fwd_var, mus[target], variances[target]
            )
            if not bool(ok):
                continue
            out_tau[target] += p_lose * float(tau_b)
            out_rho[target] += p_lose * float(rho_b)
    return [Gaussian1D(float(t), float(r)) for t, r in zip(out_tau, out_rho)]


# ---------------------------------------------------------------------------
# vectorized LeakyReLU kernels (the layer-level fast path)


def _leaky_direct_moments_arr(alpha, mu_z, var_z):
    sigma = np.sqrt(var_z)
    h1, h2 = gaussians._relu_h12(mu_z / sigma)
    m1 = (1.0 - alpha) * sigma * h1 + alpha * mu_z
    e2 = (1.0 - alpha * alpha) * var_z * h2 + alpha * alpha * (var_z + mu_z * mu_z)
    return m1, np.maximum(e2 - m1 * m1, 1e-300)


def leakyrelu_forward_arr(alpha, tau_z, rho_z, tau_a, rho_a, policy: GuardPolicy = DEFAULT_POLICY):
    """Vectorized forward pass through LeakyReLU; returns (tau, rho, n_direct).

    Incoming z messages must all be proper.  Elements whose downstream
    message is improper take the direct route without counting as a
    fallback (division by the uniform message is exact).
    """
    var_z = 1.0 / rho_z
    mu_z = tau_z * var_z
    mu_dir, var_dir = _leaky_direct_moments_arr(alpha, mu_z, var_z)
    rho_dir = 1.0 / var_dir
    tau_dir = mu_dir * rho_dir

    proper_a = rho_a > 0.0
    var_a = np.where(proper_a, 1.0 / np.where(proper_a, rho_a, 1.0), 1.0)
    mu_a = np.where(proper_a, tau_a * var_a, 0.0)

    if alpha == 0.0:
        extra = np.exp(log_normal_pdf(0.0, mu_a, var_a)) * std_normal_cdf(-mu_z * np.sqrt(rho_z))
        b0, b1, b2 = gaussians._zeta_all(mu_z, var_z, mu_a, var_a)
        m0 = b0 + extra
        m1, m2 = b1, b2
    else:
        a2 = alpha * alpha
        n0, n1, n2 = gaussians._zeta_all(-mu_a, var_a, -alpha * mu_z, a2 * var_z)
        p0, p1, p2 = gaussians._zeta_all(mu_a, var_a, mu_z, var_z)
        m0 = n0 + p0
        m1 = -n1 + p1
        m2 = n2 + p2

    with np.errstate(divide="ignore", invalid="ignore"):
        mean_fit = m1 / m0
        var_fit = m2 / m0 - mean_fit * mean_fit
        rho_fit = 1.0 / var_fit
        tau_fit = mean_fit * rho_fit
    tau_msg = tau_fit - tau_a
    rho_msg = rho_fit - rho_a
    valid = (
        proper_a
        & np.isfinite(tau_msg)
        & np.isfinite(rho_msg)
        & (var_fit > 0.0)
        & (rho_msg >= 0.0)
    )
    if policy.enabled:
        valid &= (m0 > policy.min_mass) & (rho_msg >= rho_z)
    tau_out = np.where(valid, tau_msg, tau_dir)
    rho_out = np.where(valid, rho_msg, rho_dir)
    n_direct = int(np.count_nonzero(proper_a & ~valid))
    return tau_out, rho_out, n_direct


def leakyrelu_backward_arr(alpha, tau_z, rho_z, tau_a, rho_a, policy: GuardPolicy = DEFAULT_POLICY):
    """Vectorized backward pass through LeakyReLU; returns (tau, rho, n_uniform).

    (tau_z, rho_z) is the incoming message from the input variable (proper),
    (tau_a, rho_a) the downstream message from the output variable.
    Improper downstream elements yield the uniform message silently.
    """
    var_z = 1.0 / rho_z
    mu_z = tau_z * var_z
    proper_a = rho_a > 0.0
    var_a = np.where(proper_a, 1.0 / np.where(proper_a, rho_a, 1.0), 1.0)
    mu_a = np.where(proper_a, tau_a * var_a, 0.0)

    if alpha == 0.0:
        p0, p1, p2 = gaussians._zeta_all(mu_z, var_z, mu_a, var_a)
        s0, s1, s2 = gaussians._s_minus_all(mu_z, var_z, mu_a, var_a)
        m0, m1, m2 = p0 + s0, p1 + s1, p2 + s2
    else:
        inv_a = 1.0 / alpha
        mu_n = -mu_a * inv_a
        var_n = var_a * inv_a * inv_a
        n0, n1, n2 = gaussians._zeta_all(-mu_z, var_z, mu_n, var_n)
        p0, p1, p2 = gaussians._zeta_all(mu_z, var_z, mu_a, var_a)
        m0 = inv_a * n0 + p0
        m1 = -inv_a * n1 + p1
        m2 = inv_a * n2 + p2

    with np.errstate(divide="ignore", invalid="ignore"):
        mean_fit = m1 / m0
        var_fit = m2 / m0 - mean_fit * mean_fit
        rho_fit = 1.0 / var_fit
        tau_fit = mean_fit * rho_fit
    tau_msg = tau_fit - tau_z
    rho_msg = rho_fit - rho_z
    valid = (
        proper_a
        & np.isfinite(tau_msg)
        & np.isfinite(rho_msg)
        & (var_fit > 0.0)
        & (rho_msg >= 0.0)
    )
    if policy.enabled and policy.require_tau_positive_or_rho:
        valid &= (tau_msg > 0.0) | (rho_msg > policy.min_backward_rho)
    tau_out = np.where(valid, tau_msg, 0.0)
    rho_out = np.where(valid, rho_msg, 0.0)
    n_uniform = int(np.count_nonzero(proper_a & ~valid))
    return tau_out, rho_out, n_uniform


def maxpool_forward_arr(mu, var):
    """Iterated pairwise max over the last axis of (mu, var) arrays."""
    m_acc = mu[..., 0]
    v_acc = var[..., 0]
    for j in range(1, mu.shape[-1]):
        m2j = mu[..., j]
        v2j = var[..., j]
        theta2 = np.maximum(v_acc + v2j, 1e-300)
        theta = np.sqrt(theta2)
        delta = (m_acc - m2j) / theta
        cdf = std_normal_cdf(delta)
        pdf = std_normal_pdf(delta)
        m1 = m_acc * cdf + m2j * (1.0 - cdf) + theta * pdf
        m2 = (m_acc * m_acc + v_acc) * cdf + (m2j * m2j + v2j) * (1.0 - cdf) + (m_acc + m2j) * theta * pdf
        m_acc = m1
        v_acc = np.maximum(m2 - m1 * m1, 1e-300)
    return m_acc, v_acc


# ---------------------------------------------------------------------------
# max pooling


def max_pair_moments(mu1, var1, mu2, var2):
    """Mean and raw second moment of max(X, Y) for independent Gaussians."""
    theta2 = var1 + var2
    if theta2 <= 1e-300:
        if mu1 >= mu2:
            return mu1, var1 + mu1 * mu1
        return mu2, var2 + mu2 * mu2
    theta = math.sqrt(theta2)
    delta = (mu1 - mu2) / theta
    cdf = std_normal_cdf(delta)
    pdf = std_normal_pdf(delta)
    m1 = mu1 * cdf + mu2 * (1.0 - cdf) + theta * pdf
    m2 = (mu1 * mu1 + var1) * cdf + (mu2 * mu2 + var2) * (1.0 - cdf) + (mu1 + mu2) * theta * pdf
    return m1, m2


def maxpool_messages(window, downstream: Gaussian1D) -> tuple[Gaussian1D, list[Gaussian1D]]:
    """Forward/backward messages for a max-pool window.

    Forward: iterated pairwise moment-matched max of the window's Gaussians.
    Backward: the downstream message is routed to the input with the largest
    mean; every other input receives the uniform message.
    """
    if len(window) == 0:
        raise ValueError("empty max-pool window")
    moments = [g.mean_var() for g in window]
    mu, var = moments[0]
    for m, v in moments[1:]:
        m1, m2 = max_pair_moments(mu, var, m, v)
        mu, var = m1, max(m2 - m1 * m1, 1e-300)
    forward = from_moments(mu, var)
    winner = int(np.argmax([m for m, _ in moments]))
    backward = [UNIFORM] * len(window)
    backward[winner] = downstream
    return forward, backward
