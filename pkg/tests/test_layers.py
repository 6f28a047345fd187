import math

import numpy as np
import pytest

from beliefnn import factors as F
from beliefnn.factors import GuardPolicy
from beliefnn.gaussians import GaussianArray, from_moments, multiply, to_moments
from beliefnn.layers import LayerSpec, ShapeError, shape_infer
from beliefnn.network import Network
from beliefnn.priors import init_priors

from conftest import normal_pdf


def specs_from(*lines):
    out = []
    for line in lines:
        parts = line.split()
        args = []
        for p in parts[1:]:
            if p == "nobias":
                args.append(p)
            elif "." in p:
                args.append(float(p))
            else:
                args.append(int(p))
        out.append(LayerSpec(parts[0], tuple(args)))
    return out


class TestShapeInfer:
    def test_cifar_conv_stack(self):
        specs = specs_from(
            "input 3 32 32",
            "conv 32 3 0",
            "leakyrelu 0.1",
            "conv 32 3 0",
            "leakyrelu 0.1",
            "maxpool 2",
            "conv 64 3 0",
            "leakyrelu 0.1",
            "conv 64 3 0",
            "leakyrelu 0.1",
            "maxpool 2",
            "flatten",
            "linear 512",
            "leakyrelu 0.1",
            "linear 10",
            "argmax 1.0",
        )
        shapes = shape_infer(specs)
        assert shapes[1] == (32, 30, 30)
        assert shapes[3] == (32, 28, 28)
        assert shapes[5] == (32, 14, 14)
        assert shapes[6] == (64, 12, 12)
        assert shapes[8] == (64, 10, 10)
        assert shapes[10] == (64, 5, 5)
        assert shapes[11] == (1600,)

    def test_errors_name_layer_index(self):
        with pytest.raises(ShapeError, match="layer 1"):
            shape_infer(specs_from("input 4", "maxpool 2"))
        with pytest.raises(ShapeError):
            shape_infer(specs_from("linear 4"), input_shape=None)

    def test_head_must_be_last(self):
        with pytest.raises(ShapeError, match="head"):
            shape_infer(specs_from("input 4", "regression 0.01", "linear 2"))


def deterministic_network(net, weights):
    """Force weight marginals to near-deterministic given values."""
    for layer, (w, b) in zip(net.weighted_layers, weights):
        flat = np.concatenate([w.reshape(-1), b.reshape(-1)]) if b is not None else w.reshape(-1)
        layer.marginal.rho = np.full(layer.n_params, 1e12)
        layer.marginal.tau = flat * layer.marginal.rho
        layer.prior.tau = layer.marginal.tau.copy()
        layer.prior.rho = layer.marginal.rho.copy()


class TestDegenerateLimit:
    def test_forward_pass_matches_deterministic_network(self, rng):
        specs = specs_from("input 6", "linear 5", "leakyrelu 0.1", "linear 3", "regression 0.01")
        net = Network(specs, policy=GuardPolicy(enabled=False))
        w1 = rng.normal(0, 1, (5, 6))
        b1 = rng.normal(0, 1, 5)
        w2 = rng.normal(0, 1, (3, 5))
        b2 = rng.normal(0, 1, 3)
        deterministic_network(net, [(w1, b1), (w2, b2)])
        x = rng.normal(0, 1, (4, 6))
        mu, _ = net.predict_moments(x)
        h = np.maximum(x @ w1.T + b1, 0.1 * (x @ w1.T + b1))
        ref = h @ w2.T + b2
        assert np.max(np.abs(mu - ref)) < 1e-4

    def test_maxpool_and_flatten_limit(self, rng):
        specs = specs_from(
            "input 1 4 4", "conv 1 1 0", "maxpool 2", "flatten", "linear 2", "regression 0.01"
        )
        net = Network(specs, policy=GuardPolicy(enabled=False))
        w = rng.normal(0, 1, (2, 4))
        b = rng.normal(0, 1, 2)
        # identity 1x1 conv in front, then the dense readout
        deterministic_network(net, [(np.ones((1, 1, 1, 1)), np.zeros(1)), (w, b)])
        x = rng.normal(0, 1, (3, 1, 4, 4))
        mu, _ = net.predict_moments(x)
        pooled = x.reshape(3, 1, 2, 2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(3, 4, 4).max(axis=2)
        ref = pooled @ w.T + b
        assert np.max(np.abs(mu - ref)) < 1e-4


def scalar_graph_linear_messages(x_moments, w_moments, b_moments, downstream):
    """Brute-force scalar factor-graph sweep for one linear layer.

    Builds explicit product intermediates p_jk = w_jk * x_k and sum factors
    o_j = sum_k p_jk + b_j, then runs the textbook message compositions.
    Returns forward moments and the messages to weights, biases and inputs.
    """
    (ex, ex2) = x_moments
    (ew, ew2) = w_moments
    (eb, eb2) = b_moments
    d_out, d_in = ew.shape
    mu_p = ew * ex[None, :]
    var_p = ew2 * ex2[None, :] - mu_p**2
    fwd_mu = mu_p.sum(axis=1) + eb
    fwd_var = var_p.sum(axis=1) + (eb2 - eb**2)
    msg_w = np.empty((d_out, d_in, 2))
    msg_x = np.zeros((d_in, 2))
    msg_b = np.empty((d_out, 2))
    for j in range(d_out):
        tau_z, rho_z = downstream[j]
        for k in range(d_in):
            step = F.weighted_sum_backward(1.0, tau_z, rho_z, fwd_mu[j], fwd_var[j], mu_p[j, k], var_p[j, k])
            to_w = F.product_backward(step.message.tau, step.message.rho, ex[k], ex2[k])
            to_x = F.product_backward(step.message.tau, step.message.rho, ew[j, k], ew2[j, k])
            msg_w[j, k] = (to_w.tau, to_w.rho)
            msg_x[k] += (to_x.tau, to_x.rho)
        step = F.weighted_sum_backward(1.0, tau_z, rho_z, fwd_mu[j], fwd_var[j], eb[j], eb2[j] - eb[j] ** 2)
        msg_b[j] = (step.message.tau, step.message.rho)
    return (fwd_mu, fwd_var), msg_w, msg_b, msg_x


class TestLinearLayerOracle:
    def test_latent_layer_matches_explicit_scalar_graph(self, rng):
        specs = specs_from("input 2", "linear 3", "leakyrelu 0.1", "linear 2", "regression 0.01")
        net = Network(specs)
        init_priors(net, seed=5)
        layer = net.weighted_layers[1]  # the 3 -> 2 latent layer
        net.set_batch(rng.normal(0, 1, (1, 2)), np.array([[0.3, -0.2]]))
        # forward sweep to populate boundaries, then one backward from the head
        net.forward_example(0)
        net.layers[-1].backward_example(0, net)
        bnd_in = net.boundary_in(layer)
        bnd_out = net.boundary_out(layer)
        ex, ex2 = GaussianArray(bnd_in.fwd.tau[0], bnd_in.fwd.rho[0]).raw_moments()
        tau_c = layer.marginal.tau - layer.per_example.tau[0]
        rho_c = layer.marginal.rho - layer.per_example.rho[0]
        var_c = 1.0 / rho_c
        mu_c = tau_c * var_c
        n_w = layer.n_weights
        ew = mu_c[:n_w].reshape(2, 3)
        ew2 = (var_c + mu_c**2)[:n_w].reshape(2, 3)
        eb = mu_c[n_w:]
        eb2 = (var_c + mu_c**2)[n_w:]
        downstream = [(bnd_out.bwd.tau[0][j], bnd_out.bwd.rho[0][j]) for j in range(2)]
        (fwd_mu, fwd_var), msg_w, msg_b, msg_x = scalar_graph_linear_messages(
            (ex, ex2), (ew, ew2), (eb, eb2), downstream
        )
        got_mu, got_var = GaussianArray(bnd_out.fwd.tau[0], bnd_out.fwd.rho[0]).moments()
        assert np.max(np.abs(got_mu - fwd_mu)) < 1e-10
        assert np.max(np.abs(got_var - fwd_var)) < 1e-10
        layer.backward_example(0, net)
        got_w_tau = layer.per_example.tau[0][:n_w].reshape(2, 3)
        got_w_rho = layer.per_example.rho[0][:n_w].reshape(2, 3)
        assert np.max(np.abs(got_w_tau - msg_w[:, :, 0])) < 1e-10
        assert np.max(np.abs(got_w_rho - msg_w[:, :, 1])) < 1e-10
        got_b_tau = layer.per_example.tau[0][n_w:]
        assert np.max(np.abs(got_b_tau - msg_b[:, 0])) < 1e-10
        assert np.max(np.abs(bnd_in.bwd.tau[0] - msg_x[:, 0])) < 1e-10
        assert np.max(np.abs(bnd_in.bwd.rho[0] - msg_x[:, 1])) < 1e-10

    def test_downstream_uniform_leaves_marginal_unchanged(self, rng):
        specs = specs_from("input 3", "linear 2", "regression 0.01")
        net = Network(specs)
        init_priors(net, seed=1)
        layer = net.weighted_layers[0]
        before_tau = layer.marginal.tau.copy()
        net.set_batch(rng.normal(0, 1, (1, 3)), None)
        net.forward_example(0)
        # skip the head backward: downstream message stays uniform
        layer.backward_example(0, net)
        assert np.array_equal(layer.per_example.tau[0], np.zeros(layer.n_params))
        assert np.max(np.abs(layer.marginal.tau - before_tau)) < 1e-12

    def test_one_by_one_conjugate_against_2d_quadrature(self):
        # y = w * x + b through the full layer machinery; the per-example
        # subgraph is a tree, so the weight marginal must match the true
        # w-marginal of the joint computed on a dense (w, b) grid.
        specs = specs_from("input 1", "linear 1", "regression 0.04")
        net = Network(specs)
        init_priors(net, seed=9)
        layer = net.weighted_layers[0]
        x_val, y_val = 1.3, 0.7
        net.set_batch(np.array([[x_val]]), np.array([y_val]))
        for _ in range(10):
            net.sweep_example(0)
        pw_mu, pw_var = to_moments(from_moments(*_nat_to_moments(layer.prior, 0)))
        pb_mu, pb_var = to_moments(from_moments(*_nat_to_moments(layer.prior, 1)))
        w = np.linspace(pw_mu - 10 * math.sqrt(pw_var), pw_mu + 10 * math.sqrt(pw_var), 1500)
        b = np.linspace(pb_mu - 10 * math.sqrt(pb_var), pb_mu + 10 * math.sqrt(pb_var), 1500)
        W, B = np.meshgrid(w, b, indexing="ij")
        joint = normal_pdf(W, pw_mu, pw_var) * normal_pdf(B, pb_mu, pb_var) * normal_pdf(
            y_val, W * x_val + B, 0.04
        )
        wd = joint.sum(axis=1)
        mass = np.trapezoid(wd, w)
        ref_mu = np.trapezoid(w * wd, w) / mass
        ref_var = np.trapezoid(w * w * wd, w) / mass - ref_mu**2
        got_mu = layer.marginal.tau[0] / layer.marginal.rho[0]
        got_var = 1.0 / layer.marginal.rho[0]
        assert abs(got_mu - ref_mu) < 1e-4
        assert abs(got_var - ref_var) < 1e-4

    def test_incremental_equals_recompute(self, rng):
        specs = specs_from("input 2", "linear 3", "leakyrelu 0.1", "linear 1", "regression 0.01")
        net = Network(specs)
        init_priors(net, seed=2)
        net.set_batch(rng.normal(0, 1, (6, 2)), rng.normal(0, 1, 6))
        for _ in range(3):
            for e in range(6):
                net.sweep_example(e)
        for layer in net.weighted_layers:
            assert layer.marginal_deviation() < 1e-9

    def test_drift_after_many_updates(self, rng):
        specs = specs_from("input 2", "linear 4", "regression 0.01")
        net = Network(specs)
        init_priors(net, seed=3)
        layer = net.weighted_layers[0]
        net.set_batch(rng.normal(0, 1, (4, 2)), rng.normal(0, 1, 4))
        # thousands of incremental update/downdate cycles, then compare
        for _ in range(2500):
            for e in range(4):
                net.sweep_example(e)
        dev = layer.marginal_deviation()
        assert dev < 1e-6


def _nat_to_moments(arr, i):
    var = 1.0 / arr.rho[i]
    return arr.tau[i] * var, var


class TestConvLayer:
    def _train_pair(self, net_conv, net_lin, X, y, iters=4):
        for net in (net_conv, net_lin):
            init_priors(net, seed=11)
        # identical priors: copy conv priors into the linear layer
        for lc, ll in zip(net_conv.weighted_layers, net_lin.weighted_layers):
            ll.prior.tau = lc.prior.tau.copy()
            ll.prior.rho = lc.prior.rho.copy()
            ll.marginal.tau = lc.marginal.tau.copy()
            ll.marginal.rho = lc.marginal.rho.copy()
        for net in (net_conv, net_lin):
            net.set_batch(X.reshape(len(X), *net.input_shape), y)
            for _ in range(iters):
                for e in range(len(X)):
                    net.sweep_example(e)

    def test_full_kernel_conv_equals_linear(self, rng):
        # a 2x2 kernel on a 2x2 input has one output pixel: exactly a linear layer
        specs_c = specs_from("input 1 2 2", "conv 1 2 0", "flatten", "regression 0.01")
        specs_l = specs_from("input 4", "linear 1", "regression 0.01")
        net_c, net_l = Network(specs_c), Network(specs_l)
        X = rng.normal(0, 1, (3, 4))
        y = rng.normal(0, 1, (3, 1))
        self._train_pair(net_c, net_l, X, y)
        cw = net_c.weighted_layers[0].marginal
        lw = net_l.weighted_layers[0].marginal
        assert np.max(np.abs(cw.tau - lw.tau)) < 1e-9
        assert np.max(np.abs(cw.rho - lw.rho)) < 1e-9

    def test_deterministic_conv_matches_direct_convolution(self, rng):
        specs = specs_from("input 2 5 5", "conv 3 3 0", "flatten", "regression 0.01")
        net = Network(specs, policy=GuardPolicy(enabled=False))
        w = rng.normal(0, 1, (3, 2, 3, 3))
        b = rng.normal(0, 1, 3)
        conv = net.weighted_layers[0]
        flat = np.concatenate([w.reshape(3, -1).reshape(-1), b])
        conv.marginal.rho = np.full(conv.n_params, 1e12)
        conv.marginal.tau = flat * conv.marginal.rho
        x = rng.normal(0, 1, (1, 2, 5, 5))
        mu, _ = net.predict_moments(x)
        ref = np.zeros((3, 3, 3))
        for c in range(3):
            for i in range(3):
                for j in range(3):
                    ref[c, i, j] = np.sum(w[c] * x[0][:, i : i + 3, j : j + 3]) + b[c]
        assert np.max(np.abs(mu.reshape(3, 3, 3) - ref)) < 1e-8

    def test_padding_matches_padded_direct_convolution(self, rng):
        specs = specs_from("input 1 4 4", "conv 2 3 1", "flatten", "regression 0.01")
        net = Network(specs, policy=GuardPolicy(enabled=False))
        w = rng.normal(0, 1, (2, 1, 3, 3))
        b = rng.normal(0, 1, 2)
        conv = net.weighted_layers[0]
        flat = np.concatenate([w.reshape(-1), b])
        conv.marginal.rho = np.full(conv.n_params, 1e12)
        conv.marginal.tau = flat * conv.marginal.rho
        x = rng.normal(0, 1, (1, 1, 4, 4))
        xp = np.zeros((1, 6, 6))
        xp[:, 1:5, 1:5] = x[0]
        mu, _ = net.predict_moments(x)
        ref = np.zeros((2, 4, 4))
        for c in range(2):
            for i in range(4):
                for j in range(4):
                    ref[c, i, j] = np.sum(w[c] * xp[:, i : i + 3, j : j + 3]) + b[c]
        assert np.max(np.abs(mu.reshape(2, 4, 4) - ref)) < 1e-8

    def test_shared_weight_messages_aggregate_over_positions(self, rng):
        # deep latent conv: the per-example weight message must be the
        # natural-parameter sum over spatial positions (checked against a
        # manual position-by-position evaluation)
        specs = specs_from("input 1 3 3", "conv 1 2 0", "leakyrelu 0.1", "flatten", "linear 1", "regression 0.01")
        net = Network(specs)
        init_priors(net, seed=4)
        X = rng.normal(0, 1, (1, 1, 3, 3))
        net.set_batch(X, np.array([0.5]))
        net.sweep_example(0)
        conv = net.weighted_layers[0]
        bnd_out = net.boundary_out(conv)
        tau_z = bnd_out.bwd.tau[0].reshape(1, 2, 2)
        rho_z = bnd_out.bwd.rho[0].reshape(1, 2, 2)
        x = X[0, 0]
        patches = np.array([x[i : i + 2, j : j + 2].reshape(-1) for i in range(2) for j in range(2)])
        tau_c = conv.marginal.tau - conv.per_example.tau[0]
        rho_c = conv.marginal.rho - conv.per_example.rho[0]
        # cavity == prior here apart from this example's message; recompute
        # forward moments per position and sum the weighted-sum messages
        var_c = 1.0 / rho_c
        mu_c = tau_c * var_c
        w_mu, w_var = mu_c[:4], var_c[:4]
        b_mu, b_var = mu_c[4], var_c[4]
        ref_tau = np.zeros(4)
        ref_rho = np.zeros(4)
        for p in range(4):
            fwd_mu = patches[p] @ w_mu + b_mu
            fwd_var = (patches[p] ** 2) @ w_var + b_var
            tz, rz = tau_z.reshape(-1)[p], rho_z.reshape(-1)[p]
            for d in range(4):
                res = F.weighted_sum_backward(patches[p][d], tz, rz, fwd_mu, fwd_var, w_mu[d], w_var[d])
                ref_tau[d] += res.message.tau
                ref_rho[d] += res.message.rho
        assert np.max(np.abs(conv.per_example.tau[0][:4] - ref_tau)) < 1e-9
        assert np.max(np.abs(conv.per_example.rho[0][:4] - ref_rho)) < 1e-9


class TestHeadsAndActivations:
    def test_identity_leakyrelu_layer(self, rng):
        specs = specs_from("input 3", "linear 3", "leakyrelu 1.0", "linear 1", "regression 0.01")
        net = Network(specs)
        init_priors(net, seed=6)
        net.set_batch(rng.normal(0, 1, (2, 3)), rng.normal(0, 1, 2))
        net.sweep_example(0)
        lrelu = net.layers[1]
        bnd_in = net.boundary_in(lrelu)
        bnd_out = net.boundary_out(lrelu)
        assert np.max(np.abs(bnd_in.fwd.tau[0] - bnd_out.fwd.tau[0])) < 1e-9
        assert np.max(np.abs(bnd_in.fwd.rho[0] - bnd_out.fwd.rho[0])) < 1e-9
        assert np.max(np.abs(bnd_in.bwd.tau[0] - bnd_out.bwd.tau[0])) < 1e-9

    def test_flatten_is_bit_identical(self, rng):
        specs = specs_from("input 1 2 2", "conv 2 1 0", "flatten", "linear 1", "regression 0.01")
        net = Network(specs)
        init_priors(net, seed=7)
        net.set_batch(rng.normal(0, 1, (1, 1, 2, 2)), np.array([0.1]))
        net.sweep_example(0)
        b_in, b_out = net.boundaries[0], net.boundaries[1]
        assert np.array_equal(b_in.fwd.tau[0], b_out.fwd.tau[0])
        assert np.array_equal(b_in.fwd.rho[0], b_out.fwd.rho[0])
        assert np.array_equal(b_in.bwd.tau[0], b_out.bwd.tau[0])

    def test_flatten_first_is_observed_passthrough(self, rng):
        specs = specs_from("input 2 2 2", "flatten", "linear 2", "regression 0.01")
        net = Network(specs)
        init_priors(net, seed=7)
        X = rng.normal(0, 1, (2, 2, 2, 2))
        net.set_batch(X, np.array([0.1, -0.2]))
        net.sweep_example(0)
        linear = net.weighted_layers[0]
        assert linear.first
        mu, _ = net.predict_moments(X)
        m_p, v_p = linear.marginal.moments()
        ref = X.reshape(2, -1) @ m_p[: linear.n_weights].reshape(2, 8).T + m_p[linear.n_weights :]
        assert np.max(np.abs(mu - ref)) < 1e-9

    def test_argmax_head_raises_winning_logit(self):
        specs = specs_from("input 2", "linear 2", "argmax 1.0")
        net = Network(specs)
        init_priors(net, seed=8)
        x = np.array([[1.0, -0.5]])
        net.set_batch(x, np.array([1]))
        bnd = net.boundaries[0]
        net.forward_example(0)
        marg_before, _ = GaussianArray(
            bnd.fwd.tau[0] + bnd.bwd.tau[0], bnd.fwd.rho[0] + bnd.bwd.rho[0]
        ).moments()
        probs_before = net.predict(x)[0]
        net.backward_example(0)
        marg_after, _ = GaussianArray(
            bnd.fwd.tau[0] + bnd.bwd.tau[0], bnd.fwd.rho[0] + bnd.bwd.rho[0]
        ).moments()
        assert marg_after[1] > marg_before[1]  # observed class pushed up
        probs_after = net.predict(x)[0]
        assert probs_after[1] > probs_before[1]

    def test_single_layer_object_scales_with_width(self):
        specs = specs_from("input 8", "linear 4096", "regression 0.01")
        net = Network(specs)
        assert len(net.layers) == 2
        assert net.weighted_layers[0].n_params == 8 * 4096 + 4096
