"""Layer-level message passing: weights, sweeps, and shape inference.

A network variable between two layers touches exactly two factors, so its
message into either layer is just the retained message from the other side
(the paper's marginal-divided-by-own-message rule collapses to that at
layer granularity).  Weight variables touch one factor per training
example plus the prior, and layers keep the running weight marginal
consistent with the per-example factor-to-weight messages they store.

Layers are single-writer during a pass; all element-level work inside one
pass reads an immutable snapshot and writes disjoint slots.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import factors
from .factors import GuardPolicy
from .gaussians import GaussianArray

__all__ = [
    "LayerSpec",
    "ShapeError",
    "shape_infer",
    "Incidents",
    "Boundary",
    "build_layer",
]

_CHUNK = 16384  # cap on pixels*channels*taps handled per conv-backward slice


class ShapeError(ValueError):
    pass


@dataclass(frozen=True)
class LayerSpec:
    """One line of a model description: a layer kind plus its arguments."""

    kind: str
    args: tuple = ()

    def __str__(self):
        return " ".join([self.kind] + [str(a) for a in self.args])


def _conv_out(shape, c_out, k, p, index):
    if len(shape) != 3:
        raise ShapeError(f"layer {index}: conv expects (C, H, W) input, got {shape}")
    c, h, w = shape
    ho, wo = h - k + 1 + 2 * p, w - k + 1 + 2 * p
    if ho <= 0 or wo <= 0:
        raise ShapeError(f"layer {index}: conv kernel {k} too large for input {shape}")
    return (c_out, ho, wo)


def shape_infer(specs: list[LayerSpec], input_shape=None):
    """Propagate shapes through a spec sequence; raises ShapeError on misfit.

    Returns the per-layer output shapes (same length as ``specs``).  The
    sequence must start with an ``input`` spec unless ``input_shape`` is
    given.
    """
    shapes = []
    offset = 0
    if input_shape is None:
        if not specs or specs[0].kind != "input":
            raise ShapeError("spec sequence must begin with an input layer")
        input_shape = tuple(specs[0].args)
        specs = specs[1:]
        offset = 1
        shapes.append(input_shape)
    cur = tuple(input_shape)
    for i, spec in enumerate(specs, start=offset):
        kind = spec.kind
        if kind == "linear":
            if len(cur) != 1:
                raise ShapeError(f"layer {i}: linear expects flat input, got {cur}")
            cur = (int(spec.args[0]),)
        elif kind == "conv":
            c_out, k, p = int(spec.args[0]), int(spec.args[1]), int(spec.args[2])
            cur = _conv_out(cur, c_out, k, p, i)
        elif kind == "leakyrelu":
            pass
        elif kind == "maxpool":
            s = int(spec.args[0])
            if len(cur) != 3:
                raise ShapeError(f"layer {i}: maxpool expects (C, H, W) input, got {cur}")
            c, h, w = cur
            if h % s or w % s:
                raise ShapeError(f"layer {i}: maxpool stride {s} does not divide {cur}")
            cur = (c, h // s, w // s)
        elif kind == "flatten":
            cur = (int(np.prod(cur)),)
        elif kind in ("regression", "argmax", "softmax"):
            if len(cur) != 1:
                raise ShapeError(f"layer {i}: head expects flat input, got {cur}")
            if i != len(specs) - 1 + offset:
                raise ShapeError(f"layer {i}: head must be the last layer")
        elif kind == "input":
            raise ShapeError(f"layer {i}: input may only appear first")
        else:
            raise ShapeError(f"layer {i}: unknown kind {kind!r}")
        shapes.append(cur)
    return shapes


class Incidents:
    """Non-fatal guard event counter."""

    def __init__(self):
        self.counts: dict[str, int] = {}

    def note(self, name: str, n: int = 1):
        if n:
            self.counts[name] = self.counts.get(name, 0) + n

    def total(self) -> int:
        return sum(self.counts.values())

    def merge(self, other: "Incidents"):
        for k, v in other.counts.items():
            self.note(k, v)


class Boundary:
    """Retained per-example messages at one layer interface."""

    def __init__(self, n_vars: int):
        self.n_vars = n_vars
        self.fwd = GaussianArray.uniform((0, n_vars))
        self.bwd = GaussianArray.uniform((0, n_vars))

    def reset(self, batch_size: int):
        self.fwd = GaussianArray.uniform((batch_size, self.n_vars))
        self.bwd = GaussianArray.uniform((batch_size, self.n_vars))


def _moments_from_nat(tau, rho):
    var = 1.0 / rho
    mu = tau * var
    return mu, var


def _raw_from_nat(tau, rho):
    var = 1.0 / rho
    mu = tau * var
    return mu, var + mu * mu


class Layer:
    """Base layer: knows its shapes and whether it carries weights."""

    has_weights = False

    def __init__(self, spec: LayerSpec, in_shape, out_shape):
        self.spec = spec
        self.in_shape = tuple(in_shape)
        self.out_shape = tuple(out_shape)
        self.n_in = int(np.prod(in_shape))
        self.n_out = int(np.prod(out_shape))

    def forward_example(self, e, net):
        raise NotImplementedError

    def backward_example(self, e, net):
        raise NotImplementedError

    def predict_forward(self, mu, var, net):
        """Batched moment propagation for the prediction branch."""
        raise NotImplementedError


class WeightedLayer(Layer):
    """Shared state/machinery for layers with weight variables.

    All parameters of the layer live in one flat vector (weights first,
    then biases) so that the trainer can aggregate, damp, and checkpoint
    them uniformly.
    """

    has_weights = True

    def __init__(self, spec, in_shape, out_shape, n_weights, n_bias):
        super().__init__(spec, in_shape, out_shape)
        self.n_weights = n_weights
        self.n_bias = n_bias
        self.n_params = n_weights + n_bias
        self.prior = GaussianArray.uniform(self.n_params)
        self.marginal = GaussianArray.uniform(self.n_params)
        self.agg_other = GaussianArray.uniform(self.n_params)
        self.per_example = GaussianArray.uniform((0, self.n_params))
        self._scratch = None

    # fan-in / fan-out used by the prior initializer
    def fan_in_out(self) -> tuple[int, int]:
        raise NotImplementedError

    def alloc_batch(self, batch_size: int):
        self.per_example = GaussianArray.uniform((batch_size, self.n_params))

    def recompute_marginal(self):
        self.marginal.tau = self.prior.tau + self.agg_other.tau + self.per_example.tau.sum(axis=0)
        self.marginal.rho = self.prior.rho + self.agg_other.rho + self.per_example.rho.sum(axis=0)

    def marginal_deviation(self) -> float:
        """Max |incremental - recomputed| natural-parameter drift."""
        tau = self.prior.tau + self.agg_other.tau + self.per_example.tau.sum(axis=0)
        rho = self.prior.rho + self.agg_other.rho + self.per_example.rho.sum(axis=0)
        return float(max(np.max(np.abs(tau - self.marginal.tau)), np.max(np.abs(rho - self.marginal.rho))))

    def _cavity(self, e, incidents: Incidents):
        """Weight message into example e's factor: marginal / own message."""
        tau = self.marginal.tau - self.per_example.tau[e]
        rho = self.marginal.rho - self.per_example.rho[e]
        bad = rho <= 0.0
        n_bad = int(np.count_nonzero(bad))
        if n_bad:
            incidents.note("weight_cavity_improper", n_bad)
            tau = np.where(bad, self.marginal.tau, tau)
            rho = np.where(bad, self.marginal.rho, rho)
        return tau, rho

    def _apply_update(self, e, new_tau, new_rho, incidents: Incidents):
        """Replace example e's weight message and keep the marginal in sync."""
        self.marginal.tau += new_tau - self.per_example.tau[e]
        self.marginal.rho += new_rho - self.per_example.rho[e]
        self.per_example.tau[e] = new_tau
        self.per_example.rho[e] = new_rho
        if np.any(self.marginal.rho <= 0.0):
            incidents.note("marginal_nonpositive_recompute")
            self.recompute_marginal()
            bad = self.marginal.rho <= 0.0
            if np.any(bad):
                # No paper rule here: reset the offending weights to the prior.
                incidents.note("marginal_clamped_to_prior", int(np.count_nonzero(bad)))
                self.marginal.tau[bad] = self.prior.tau[bad]
                self.marginal.rho[bad] = self.prior.rho[bad]


class LinearLayer(WeightedLayer):
    """Dense layer o = W x + b at scalar message granularity.

    ``first=True`` marks observed inputs: pixels enter as weighted-sum
    coefficients and no messages are sent back to them.
    """

    def __init__(self, spec, in_shape, out_shape, first: bool, bias: bool = True):
        d_in, d_out = int(np.prod(in_shape)), int(np.prod(out_shape))
        super().__init__(spec, in_shape, out_shape, d_in * d_out, d_out if bias else 0)
        self.d_in = d_in
        self.d_out = d_out
        self.first = first
        self.bias = bias

    def fan_in_out(self):
        return self.d_in, self.d_out

    def _w(self, arr):
        return arr[: self.n_weights].reshape(self.d_out, self.d_in)

    def _b(self, arr):
        return arr[self.n_weights :]

    def _weight_moments(self, e, net):
        tau, rho = self._cavity(e, net.incidents)
        var = 1.0 / rho
        mu = tau * var
        return mu, var

    def forward_example(self, e, net):
        mu_p, var_p = self._weight_moments(e, net)
        w_mu, w_var = self._w(mu_p), self._w(var_p)
        if self.first:
            x = net.batch_inputs[e].reshape(-1)
            mu_out = w_mu @ x + 0.0
            var_out = w_var @ (x * x)
            scratch = ("obs", x, w_mu, w_var)
        else:
            fwd = net.boundary_in(self).fwd
            ex, ex2 = _raw_from_nat(fwd.tau[e], fwd.rho[e])
            mu_out = w_mu @ ex
            var_out = (w_var + w_mu * w_mu) @ ex2 - (w_mu * w_mu) @ (ex * ex)
            scratch = ("lat", ex, ex2, w_mu, w_var)
        if self.bias:
            mu_out = mu_out + self._b(mu_p)
            var_out = var_out + self._b(var_p)
        var_out = np.maximum(var_out, 1e-300)
        out = net.boundary_out(self).fwd
        out.rho[e] = 1.0 / var_out
        out.tau[e] = mu_out * out.rho[e]
        self._scratch = scratch + (self._b(mu_p), self._b(var_p), mu_out, var_out)

    def backward_example(self, e, net):
        bnd_out = net.boundary_out(self)
        tau_z = bnd_out.bwd.tau[e]
        rho_z = bnd_out.bwd.rho[e]
        kind = self._scratch[0]
        b_mu, b_var, mu_out, var_out = self._scratch[-4:]
        new_tau = np.empty(self.n_params)
        new_rho = np.empty(self.n_params)
        if kind == "obs":
            _, x, w_mu, w_var = self._scratch[:4]
            denom = 1.0 + rho_z[:, None] * (var_out[:, None] - (x * x)[None, :] * w_var)
            ok = denom > 1e-300
            denom = np.where(ok, denom, 1.0)
            t = x[None, :] * (tau_z[:, None] - rho_z[:, None] * (mu_out[:, None] - x[None, :] * w_mu)) / denom
            r = (x * x)[None, :] * rho_z[:, None] / denom
            n_bad = int(ok.size - np.count_nonzero(ok))
            if n_bad:
                net.incidents.note("weighted_sum_denominator", n_bad)
                t = np.where(ok, t, 0.0)
                r = np.where(ok, r, 0.0)
            self._w(new_tau)[:] = t
            self._w(new_rho)[:] = r
        else:
            _, ex, ex2, w_mu, w_var = self._scratch[:5]
            w_e2 = w_var + w_mu * w_mu
            mu_prod = w_mu * ex[None, :]
            var_prod = w_e2 * ex2[None, :] - mu_prod * mu_prod
            rho_star = 1.0 + rho_z[:, None] * (var_out[:, None] - var_prod)
            ok = rho_star > 1e-300
            rho_star = np.where(ok, rho_star, 1.0)
            n_bad = int(ok.size - np.count_nonzero(ok))
            if n_bad:
                net.incidents.note("inner_product_rho_star", n_bad)
            excess = tau_z[:, None] - rho_z[:, None] * (mu_out[:, None] - mu_prod)
            t_w = ex[None, :] * excess / rho_star
            r_w = ex2[None, :] * rho_z[:, None] / rho_star
            t_x = w_mu * excess / rho_star
            r_x = w_e2 * rho_z[:, None] / rho_star
            if n_bad:
                t_w = np.where(ok, t_w, 0.0)
                r_w = np.where(ok, r_w, 0.0)
                t_x = np.where(ok, t_x, 0.0)
                r_x = np.where(ok, r_x, 0.0)
            self._w(new_tau)[:] = t_w
            self._w(new_rho)[:] = r_w
            bnd_in = net.boundary_in(self)
            bnd_in.bwd.tau[e] = t_x.sum(axis=0)
            bnd_in.bwd.rho[e] = r_x.sum(axis=0)
        if self.bias:
            denom_b = 1.0 + rho_z * (var_out - b_var)
            ok_b = denom_b > 1e-300
            denom_b = np.where(ok_b, denom_b, 1.0)
            t_b = (tau_z - rho_z * (mu_out - b_mu)) / denom_b
            r_b = rho_z / denom_b
            t_b = np.where(ok_b, t_b, 0.0)
            r_b = np.where(ok_b, r_b, 0.0)
            self._b(new_tau)[:] = t_b
            self._b(new_rho)[:] = r_b
        self._apply_update(e, new_tau, new_rho, net.incidents)

    def predict_forward(self, mu, var, net):
        m_p, v_p = self.marginal.moments()
        w_mu, w_var = self._w(m_p), self._w(v_p)
        if self.first:
            x = mu.reshape(mu.shape[0], -1)
            mu_out = x @ w_mu.T
            var_out = (x * x) @ w_var.T
        else:
            ex2 = var + mu * mu
            mu_out = mu @ w_mu.T
            var_out = ex2 @ (w_var + w_mu * w_mu).T - (mu * mu) @ (w_mu * w_mu).T
        if self.bias:
            mu_out = mu_out + self._b(m_p)[None, :]
            var_out = var_out + self._b(v_p)[None, :]
        return mu_out, np.maximum(var_out, 1e-300)


class ConvLayer(WeightedLayer):
    """Valid/zero-padded convolution as inner-product factors over patches.

    Every output pixel shares the same weight variables; backward messages
    from all spatial positions are summed in natural parameters into one
    factor-to-weight message per example before the marginal update.
    """

    def __init__(self, spec, in_shape, out_shape, first: bool, kernel: int, padding: int):
        c_in, h, w = in_shape
        c_out = out_shape[0]
        d = c_in * kernel * kernel
        super().__init__(spec, in_shape, out_shape, c_out * d, c_out)
        self.first = first
        self.kernel = kernel
        self.padding = padding
        self.c_in, self.c_out, self.d = c_in, c_out, d
        self.hp, self.wp = h + 2 * padding, w + 2 * padding
        self.n_pix = out_shape[1] * out_shape[2]
        self._idx = self._patch_indices()
        self._pad_mask = self._padded_valid_mask()

    def fan_in_out(self):
        return self.d, self.c_out

    def _patch_indices(self):
        k, hp, wp = self.kernel, self.hp, self.wp
        ho, wo = self.out_shape[1], self.out_shape[2]
        base = (np.arange(ho)[:, None] * wp + np.arange(wo)[None, :]).reshape(-1)
        off = (
            np.arange(self.c_in)[:, None, None] * hp * wp
            + np.arange(k)[None, :, None] * wp
            + np.arange(k)[None, None, :]
        ).reshape(-1)
        return base[:, None] + off[None, :]  # (n_pix, d)

    def _padded_valid_mask(self):
        m = np.zeros((self.c_in, self.hp, self.wp), dtype=bool)
        p = self.padding
        m[:, p : self.hp - p if p else self.hp, p : self.wp - p if p else self.wp] = True
        return m.reshape(-1)

    def _pad(self, flat_img):
        if self.padding == 0:
            return flat_img
        out = np.zeros(self.c_in * self.hp * self.wp)
        out[..., self._pad_mask] = flat_img
        return out

    def _crop(self, flat_pad):
        if self.padding == 0:
            return flat_pad
        return flat_pad[self._pad_mask]

    def _w(self, arr):
        return arr[: self.n_weights].reshape(self.c_out, self.d)

    def _b(self, arr):
        return arr[self.n_weights :]

    def forward_example(self, e, net):
        tau, rho = self._cavity(e, net.incidents)
        var_p = 1.0 / rho
        mu_p = tau * var_p
        w_mu, w_var = self._w(mu_p), self._w(var_p)
        if self.first:
            x = self._pad(net.batch_inputs[e].reshape(-1))[self._idx]
            mu_out = x @ w_mu.T
            var_out = (x * x) @ w_var.T
            scratch = ("obs", x, w_mu, w_var)
        else:
            fwd = net.boundary_in(self).fwd
            tau_in = self._pad(fwd.tau[e])
            rho_in = self._pad(fwd.rho[e])
            pos = rho_in > 0.0
            var_in = np.where(pos, 1.0 / np.where(pos, rho_in, 1.0), 0.0)
            mu_in = np.where(pos, tau_in * var_in, 0.0)
            ex = mu_in[self._idx]
            ex2 = (var_in + mu_in * mu_in)[self._idx]
            w_e2 = w_var + w_mu * w_mu
            mu_out = ex @ w_mu.T
            var_out = ex2 @ w_e2.T - (ex * ex) @ (w_mu * w_mu).T
            scratch = ("lat", ex, ex2, w_mu, w_var)
        mu_out = mu_out + self._b(mu_p)[None, :]
        var_out = np.maximum(var_out + self._b(var_p)[None, :], 1e-300)
        out = net.boundary_out(self).fwd
        r = 1.0 / var_out
        out.rho[e] = np.moveaxis(r.reshape(self.out_shape[1], self.out_shape[2], self.c_out), 2, 0).reshape(-1)
        out.tau[e] = np.moveaxis(
            (mu_out * r).reshape(self.out_shape[1], self.out_shape[2], self.c_out), 2, 0
        ).reshape(-1)
        self._scratch = scratch + (self._b(mu_p), self._b(var_p), mu_out, var_out)

    def backward_example(self, e, net):
        bnd_out = net.boundary_out(self)
        ho, wo = self.out_shape[1], self.out_shape[2]
        tau_z = np.moveaxis(bnd_out.bwd.tau[e].reshape(self.c_out, ho, wo), 0, 2).reshape(self.n_pix, self.c_out)
        rho_z = np.moveaxis(bnd_out.bwd.rho[e].reshape(self.c_out, ho, wo), 0, 2).reshape(self.n_pix, self.c_out)
        kind = self._scratch[0]
        w_tau = np.zeros((self.c_out, self.d))
        w_rho = np.zeros((self.c_out, self.d))
        in_tau = np.zeros(self.c_in * self.hp * self.wp) if kind == "lat" else None
        in_rho = np.zeros(self.c_in * self.hp * self.wp) if kind == "lat" else None
        # keep the (chunk, c_out, d) work tensors near 2M doubles
        chunk = max(1, 2_000_000 // (self.c_out * self.d))
        b_mu, b_var, mu_out_all, var_out_all = self._scratch[-4:]
        for lo in range(0, self.n_pix, chunk):
            hi = min(lo + chunk, self.n_pix)
            tz = tau_z[lo:hi, :, None]
            rz = rho_z[lo:hi, :, None]
            mu_out = mu_out_all[lo:hi, :, None]
            var_out = var_out_all[lo:hi, :, None]
            if kind == "obs":
                _, x_all, w_mu, w_var = self._scratch[:4]
                x = x_all[lo:hi, None, :]
                denom = 1.0 + rz * (var_out - x * x * w_var[None, :, :])
                ok = denom > 1e-300
                denom = np.where(ok, denom, 1.0)
                t = x * (tz - rz * (mu_out - x * w_mu[None, :, :])) / denom
                r = x * x * rz / denom
                n_bad = int(ok.size - np.count_nonzero(ok))
                if n_bad:
                    net.incidents.note("weighted_sum_denominator", n_bad)
                    t = np.where(ok, t, 0.0)
                    r = np.where(ok, r, 0.0)
                w_tau += t.sum(axis=0)
                w_rho += r.sum(axis=0)
            else:
                _, ex_all, ex2_all, w_mu, w_var = self._scratch[:5]
                ex = ex_all[lo:hi, None, :]
                ex2 = ex2_all[lo:hi, None, :]
                w_e2 = (w_var + w_mu * w_mu)[None, :, :]
                w_m = w_mu[None, :, :]
                mu_prod = w_m * ex
                var_prod = w_e2 * ex2 - mu_prod * mu_prod
                rho_star = 1.0 + rz * (var_out - var_prod)
                ok = rho_star > 1e-300
                rho_star = np.where(ok, rho_star, 1.0)
                n_bad = int(ok.size - np.count_nonzero(ok))
                if n_bad:
                    net.incidents.note("inner_product_rho_star", n_bad)
                excess = tz - rz * (mu_out - mu_prod)
                t_w = ex * excess / rho_star
                r_w = ex2 * rz / rho_star
                t_x = w_m * excess / rho_star
                r_x = w_e2 * rz / rho_star
                if n_bad:
                    t_w = np.where(ok, t_w, 0.0)
                    r_w = np.where(ok, r_w, 0.0)
                    t_x = np.where(ok, t_x, 0.0)
                    r_x = np.where(ok, r_x, 0.0)
                w_tau += t_w.sum(axis=0)
                w_rho += r_w.sum(axis=0)
                idx = self._idx[lo:hi]
                in_tau += np.bincount(idx.ravel(), weights=t_x.sum(axis=1).ravel(), minlength=in_tau.size)
                in_rho += np.bincount(idx.ravel(), weights=r_x.sum(axis=1).ravel(), minlength=in_rho.size)
        new_tau = np.empty(self.n_params)
        new_rho = np.empty(self.n_params)
        self._w(new_tau)[:] = w_tau
        self._w(new_rho)[:] = w_rho
        # bias: one weighted-sum addend per output pixel, aggregated like weights
        denom_b = 1.0 + rho_z * (var_out_all - b_var[None, :])
        ok_b = denom_b > 1e-300
        denom_b = np.where(ok_b, denom_b, 1.0)
        t_b = np.where(ok_b, (tau_z - rho_z * (mu_out_all - b_mu[None, :])) / denom_b, 0.0)
        r_b = np.where(ok_b, rho_z / denom_b, 0.0)
        self._b(new_tau)[:] = t_b.sum(axis=0)
        self._b(new_rho)[:] = r_b.sum(axis=0)
        if kind == "lat":
            bnd_in = net.boundary_in(self)
            bnd_in.bwd.tau[e] = self._crop(in_tau)
            bnd_in.bwd.rho[e] = self._crop(in_rho)
        self._apply_update(e, new_tau, new_rho, net.incidents)

    def predict_forward(self, mu, var, net):
        m_p, v_p = self.marginal.moments()
        w_mu, w_var = self._w(m_p), self._w(v_p)
        b = mu.shape[0]
        ho, wo = self.out_shape[1], self.out_shape[2]
        mu_out = np.empty((b, self.c_out, ho, wo))
        var_out = np.empty((b, self.c_out, ho, wo))
        for e in range(b):
            if self.first:
                x = self._pad(mu[e].reshape(-1))[self._idx]
                m = x @ w_mu.T
                v = (x * x) @ w_var.T
            else:
                mu_in = self._pad(mu[e])
                var_in = self._pad(var[e])
                ex = mu_in[self._idx]
                ex2 = (var_in + mu_in * mu_in)[self._idx]
                m = ex @ w_mu.T
                v = ex2 @ (w_var + w_mu * w_mu).T - (ex * ex) @ (w_mu * w_mu).T
            m = m + self._b(m_p)[None, :]
            v = v + self._b(v_p)[None, :]
            mu_out[e] = np.moveaxis(m.reshape(ho, wo, self.c_out), 2, 0)
            var_out[e] = np.moveaxis(v.reshape(ho, wo, self.c_out), 2, 0)
        return mu_out.reshape(b, -1), np.maximum(var_out.reshape(b, -1), 1e-300)


class LeakyReLULayer(Layer):
    def __init__(self, spec, in_shape, out_shape, alpha: float):
        super().__init__(spec, in_shape, out_shape)
        if alpha < 0.0:
            raise ValueError("leak must be non-negative")
        self.alpha = alpha

    def forward_example(self, e, net):
        bnd_in, bnd_out = net.boundary_in(self), net.boundary_out(self)
        tau, rho, n_direct = factors.leakyrelu_forward_arr(
            self.alpha, bnd_in.fwd.tau[e], bnd_in.fwd.rho[e], bnd_out.bwd.tau[e], bnd_out.bwd.rho[e], net.policy
        )
        net.incidents.note("leakyrelu_forward_direct_fallback", n_direct)
        bnd_out.fwd.tau[e] = tau
        bnd_out.fwd.rho[e] = rho

    def backward_example(self, e, net):
        bnd_in, bnd_out = net.boundary_in(self), net.boundary_out(self)
        tau, rho, n_uniform = factors.leakyrelu_backward_arr(
            self.alpha, bnd_in.fwd.tau[e], bnd_in.fwd.rho[e], bnd_out.bwd.tau[e], bnd_out.bwd.rho[e], net.policy
        )
        net.incidents.note("leakyrelu_backward_uniform_fallback", n_uniform)
        bnd_in.bwd.tau[e] = tau
        bnd_in.bwd.rho[e] = rho

    def predict_forward(self, mu, var, net):
        m, v = factors._leaky_direct_moments_arr(self.alpha, mu, var)
        return m, v


class MaxPoolLayer(Layer):
    def __init__(self, spec, in_shape, out_shape, stride: int):
        super().__init__(spec, in_shape, out_shape)
        self.stride = stride

    def _windows(self, flat):
        c, ho, wo = self.out_shape
        s = self.stride
        return flat.reshape(c, ho, s, wo, s).transpose(0, 1, 3, 2, 4).reshape(c, ho, wo, s * s)

    def _unwindow(self, win):
        c, ho, wo = self.out_shape
        s = self.stride
        return win.reshape(c, ho, wo, s, s).transpose(0, 1, 3, 2, 4).reshape(-1)

    def forward_example(self, e, net):
        bnd_in, bnd_out = net.boundary_in(self), net.boundary_out(self)
        rho = self._windows(bnd_in.fwd.rho[e])
        var = 1.0 / rho
        mu = self._windows(bnd_in.fwd.tau[e]) * var
        m, v = factors.maxpool_forward_arr(mu, var)
        r = 1.0 / v
        bnd_out.fwd.rho[e] = r.reshape(-1)
        bnd_out.fwd.tau[e] = (m * r).reshape(-1)
        self._scratch = np.argmax(mu, axis=-1)

    def backward_example(self, e, net):
        bnd_in, bnd_out = net.boundary_in(self), net.boundary_out(self)
        winner = self._scratch[..., None]
        c, ho, wo = self.out_shape
        s2 = self.stride * self.stride
        tau_w = np.zeros((c, ho, wo, s2))
        rho_w = np.zeros((c, ho, wo, s2))
        np.put_along_axis(tau_w, winner, bnd_out.bwd.tau[e].reshape(c, ho, wo, 1), axis=-1)
        np.put_along_axis(rho_w, winner, bnd_out.bwd.rho[e].reshape(c, ho, wo, 1), axis=-1)
        bnd_in.bwd.tau[e] = self._unwindow(tau_w)
        bnd_in.bwd.rho[e] = self._unwindow(rho_w)

    def predict_forward(self, mu, var, net):
        b = mu.shape[0]
        out_mu = np.empty((b, self.n_out))
        out_var = np.empty((b, self.n_out))
        for e in range(b):
            m, v = factors.maxpool_forward_arr(self._windows(mu[e]), self._windows(var[e]))
            out_mu[e] = m.reshape(-1)
            out_var[e] = v.reshape(-1)
        return out_mu, out_var


class FlattenLayer(Layer):
    """Pure reindexing; flat storage makes it the identity on messages.

    When it precedes the first weighted layer the inputs are observed and
    there is no boundary below it; both sweeps are then no-ops.
    """

    observed = False

    def forward_example(self, e, net):
        if self.observed:
            return
        bnd_in, bnd_out = net.boundary_in(self), net.boundary_out(self)
        bnd_out.fwd.tau[e] = bnd_in.fwd.tau[e]
        bnd_out.fwd.rho[e] = bnd_in.fwd.rho[e]

    def backward_example(self, e, net):
        if self.observed:
            return
        bnd_in, bnd_out = net.boundary_in(self), net.boundary_out(self)
        bnd_in.bwd.tau[e] = bnd_out.bwd.tau[e]
        bnd_in.bwd.rho[e] = bnd_out.bwd.rho[e]

    def predict_forward(self, mu, var, net):
        return mu, var


class RegressionHead(Layer):
    def __init__(self, spec, in_shape, out_shape, beta2: float):
        super().__init__(spec, in_shape, out_shape)
        if not beta2 > 0.0:
            raise ValueError("regression noise beta2 must be positive")
        self.beta2 = beta2

    def forward_example(self, e, net):
        pass

    def backward_example(self, e, net):
        bnd_in = net.boundary_in(self)
        y = np.asarray(net.batch_labels[e], dtype=float).reshape(-1)
        rho = 1.0 / self.beta2
        bnd_in.bwd.tau[e] = y * rho
        bnd_in.bwd.rho[e] = np.full(self.n_in, rho)

    def predict_forward(self, mu, var, net):
        return mu, var + self.beta2


class ArgmaxHead(Layer):
    def __init__(self, spec, in_shape, out_shape, gamma: float):
        super().__init__(spec, in_shape, out_shape)
        if not gamma > 0.0:
            raise ValueError("argmax regularization gamma must be positive")
        self.gamma = gamma

    def forward_example(self, e, net):
        pass

    def backward_example(self, e, net):
        bnd_in = net.boundary_in(self)
        var = 1.0 / bnd_in.fwd.rho[e]
        mu = bnd_in.fwd.tau[e] * var
        msgs = factors.argmax_backward(int(net.batch_labels[e]), mu, var, self.gamma)
        bnd_in.bwd.tau[e] = [m.tau for m in msgs]
        bnd_in.bwd.rho[e] = [m.rho for m in msgs]

    def predict_forward(self, mu, var, net):
        return mu, var


class SoftmaxHead(Layer):
    def forward_example(self, e, net):
        pass

    def backward_example(self, e, net):
        bnd_in = net.boundary_in(self)
        var = 1.0 / bnd_in.fwd.rho[e]
        mu = bnd_in.fwd.tau[e] * var
        c = int(net.batch_labels[e])
        for d in range(self.n_in):
            res = factors.softmax_backward(c, d, mu, var)
            if res.fallback_used is not factors.Fallback.NONE:
                net.incidents.note("softmax_backward_uniform", 1)
            bnd_in.bwd.tau[e, d] = res.message.tau
            bnd_in.bwd.rho[e, d] = res.message.rho

    def predict_forward(self, mu, var, net):
        return mu, var


def build_layer(spec: LayerSpec, in_shape, out_shape, first_weighted: bool) -> Layer:
    kind = spec.kind
    if kind == "linear":
        bias = "nobias" not in spec.args
        return LinearLayer(spec, in_shape, out_shape, first=first_weighted, bias=bias)
    if kind == "conv":
        return ConvLayer(spec, in_shape, out_shape, first=first_weighted, kernel=int(spec.args[1]), padding=int(spec.args[2]))
    if kind == "leakyrelu":
        return LeakyReLULayer(spec, in_shape, out_shape, alpha=float(spec.args[0]))
    if kind == "maxpool":
        return MaxPoolLayer(spec, in_shape, out_shape, stride=int(spec.args[0]))
    if kind == "flatten":
        return FlattenLayer(spec, in_shape, out_shape)
    if kind == "regression":
        return RegressionHead(spec, in_shape, out_shape, beta2=float(spec.args[0]))
    if kind == "argmax":
        gamma = float(spec.args[0]) if spec.args else 1.0
        return ArgmaxHead(spec, in_shape, out_shape, gamma=gamma)
    if kind == "softmax":
        return SoftmaxHead(spec, in_shape, out_shape)
    raise ShapeError(f"unknown layer kind {kind!r}")
