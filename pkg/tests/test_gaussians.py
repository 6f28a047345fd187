import math

import numpy as np
import pytest
from scipy import integrate

from beliefnn import gaussians as G
from beliefnn.gaussians import Gaussian1D, UNIFORM, divide, from_moments, multiply, to_moments

from conftest import gauss_quad, normal_pdf


class TestNaturalParameterAlgebra:
    def test_multiply_adds_natural_parameters(self):
        out = multiply(Gaussian1D(1, 1), Gaussian1D(2, 3))
        assert out == Gaussian1D(3, 4)

    def test_uniform_is_identity(self):
        g = Gaussian1D(5, 2)
        assert multiply(g, UNIFORM) == g
        assert multiply(UNIFORM, g) == g

    def test_divide_inverts_multiply(self):
        # exactly representable parameters: inversion is bit-exact
        a, b = Gaussian1D(0.25, 1.75), Gaussian1D(-1.5, 0.5)
        assert divide(multiply(a, b), b) == a

    def test_self_division_is_uniform(self):
        g = Gaussian1D(3, 4)
        assert divide(g, g) == UNIFORM

    def test_divide_may_go_improper(self):
        assert divide(Gaussian1D(1, 1), Gaussian1D(2, 3)) == Gaussian1D(-1, -2)

    def test_group_laws_fuzzed(self, rng):
        tau = rng.normal(0, 10, (1000, 2))
        rho = rng.uniform(0, 10, (1000, 2))
        for (t1, t2), (r1, r2) in zip(tau, rho):
            a, b = Gaussian1D(t1, r1), Gaussian1D(t2, r2)
            ab, ba = multiply(a, b), multiply(b, a)
            assert ab == ba
            back = divide(ab, a)
            assert abs(back.tau - b.tau) <= 1e-12 * max(1.0, abs(b.tau))
            assert abs(back.rho - b.rho) <= 1e-12 * max(1.0, abs(b.rho))

    def test_from_to_moments(self):
        assert from_moments(0.0, 1.0) == Gaussian1D(0.0, 1.0)
        assert from_moments(2.0, 0.5) == Gaussian1D(4.0, 2.0)

    def test_moment_round_trip(self, rng):
        mus = rng.normal(0, 5, 1000)
        variances = rng.uniform(1e-4, 1e4, 1000)
        for mu, var in zip(mus, variances):
            m, v = to_moments(from_moments(mu, var))
            assert abs(m - mu) <= 1e-12 * max(1.0, abs(mu))
            assert abs(v - var) <= 1e-12 * var

    def test_domain_errors(self):
        with pytest.raises(ValueError):
            from_moments(0.0, 0.0)
        with pytest.raises(ValueError):
            from_moments(0.0, -1.0)
        with pytest.raises(ValueError):
            to_moments(Gaussian1D(1.0, 0.0))
        with pytest.raises(ValueError):
            Gaussian1D(float("nan"), 1.0)

    def test_product_matches_grid_density(self, rng):
        # renormalized pointwise product on a grid vs natural-parameter product
        grid = np.linspace(-10, 10, 100_001)
        for _ in range(25):
            mu1, mu2 = rng.normal(0, 1.5, 2)
            v1, v2 = rng.uniform(0.3, 3.0, 2)
            dens = normal_pdf(grid, mu1, v1) * normal_pdf(grid, mu2, v2)
            mass = np.trapezoid(dens, grid)
            mean = np.trapezoid(grid * dens, grid) / mass
            var = np.trapezoid(grid * grid * dens, grid) / mass - mean * mean
            got_mean, got_var = to_moments(multiply(from_moments(mu1, v1), from_moments(mu2, v2)))
            assert abs(got_mean - mean) < 1e-8
            assert abs(got_var - var) < 1e-8


class TestStandardNormal:
    def test_pdf_at_zero(self):
        assert G.std_normal_pdf(0.0) == pytest.approx(1.0 / math.sqrt(2 * math.pi), abs=0)

    def test_cdf_at_zero(self):
        assert G.std_normal_cdf(0.0) == 0.5

    def test_cdf_symmetry(self, rng):
        x = rng.normal(0, 3, 1000)
        assert np.max(np.abs(G.std_normal_cdf(-x) - (1.0 - G.std_normal_cdf(x)))) < 1e-15

    def test_cdf_monotone(self):
        x = np.linspace(-8, 8, 2001)
        assert np.all(np.diff(G.std_normal_cdf(x)) >= 0)

    def test_cdf_against_pdf_quadrature(self):
        # 1e6-point trapezoid of the pdf from far left up to 1.0
        grid = np.linspace(-40.0, 1.0, 1_000_001)
        ref = np.trapezoid(G.std_normal_pdf(grid), grid)
        assert abs(G.std_normal_cdf(1.0) - ref) < 1e-10


class TestReluMoment:
    def test_trivial_values(self):
        assert G.relu_moment(1, 0.0, 1.0) == pytest.approx(1.0 / math.sqrt(2 * math.pi), rel=1e-14)
        assert G.relu_moment(2, 0.0, 1.0) == pytest.approx(0.5, rel=1e-14)

    def test_monte_carlo(self):
        r = np.random.default_rng(123)
        z = r.normal(1.3, 0.7, 10_000_000)
        relu = np.maximum(z, 0.0)
        for k in (1, 2):
            samples = relu**k
            se = samples.std() / math.sqrt(samples.size)
            assert abs(G.relu_moment(k, 1.3, 0.49) - samples.mean()) < 3 * se

    def test_domain_error(self):
        with pytest.raises(ValueError):
            G.relu_moment(1, 0.0, 0.0)

    def test_against_quadrature_grid(self, rng):
        for _ in range(150):
            mu = rng.uniform(-5, 5)
            var = rng.uniform(0.01, 25)
            hi = mu + 40 * math.sqrt(var)
            for k in (1, 2):
                ref = gauss_quad(lambda z: z**k * normal_pdf(z, mu, var), 0.0, max(hi, 1.0))
                assert abs(G.relu_moment(k, mu, var) - ref) < 1e-9


class TestZeta:
    def test_trivial_k0(self):
        expect = normal_pdf(0.0, 0.0, 2.0) * 0.5
        assert G.zeta(0, 0, 1, 0, 1) == pytest.approx(expect, rel=1e-13)
        assert G.zeta(0, 0, 1, 0, 1) == pytest.approx(0.14104739588693907, rel=1e-12)

    def test_trivial_k1(self):
        expect = normal_pdf(0.0, 0.0, 2.0) * G.std_normal_pdf(0.0) * math.sqrt(0.5)
        assert G.zeta(1, 0, 1, 0, 1) == pytest.approx(expect, rel=1e-13)

    def test_derived_quadrature(self):
        ref = gauss_quad(lambda z: z**2 * normal_pdf(z, 0.7, 1.1) * normal_pdf(z, -0.2, 0.6), 0.0, 40.0)
        assert abs(G.zeta(2, 0.7, 1.1, -0.2, 0.6) - ref) < 1e-9

    def test_against_quadrature_grid(self, rng):
        for _ in range(120):
            mu1, mu2 = rng.uniform(-5, 5, 2)
            v1, v2 = rng.uniform(0.01, 25, 2)
            hi = max(mu1, mu2, 0.0) + 40 * math.sqrt(max(v1, v2))
            for k in (0, 1, 2):
                ref = gauss_quad(lambda z: z**k * normal_pdf(z, mu1, v1) * normal_pdf(z, mu2, v2), 0.0, hi)
                assert abs(G.zeta(k, mu1, v1, mu2, v2) - ref) < 1e-9

    def test_separated_means_survive_in_log_space(self):
        # 60-sigma separation: the overlap is denormal but not artificially zero
        val = G.zeta(0, -30.0, 1.0, 30.0, 1.0)
        assert val >= 0.0
        assert math.isfinite(val)

    def test_domain_error(self):
        with pytest.raises(ValueError):
            G.zeta(0, 0.0, -1.0, 0.0, 1.0)


class TestSMinus:
    def test_trivial_values(self):
        assert G.s_minus(0, 0, 1, 0, 1) == pytest.approx(normal_pdf(0, 0, 1) * 0.5, rel=1e-13)
        assert G.s_minus(1, 0, 1, 0, 1) == pytest.approx(-normal_pdf(0, 0, 1) * G.std_normal_pdf(0.0), rel=1e-13)

    def test_derived_quadrature(self):
        scale = normal_pdf(0.0, 0.3, 1.2)
        ref = gauss_quad(lambda z: z**2 * normal_pdf(z, -0.4, 0.8) * scale, -40.0, 0.0)
        assert abs(G.s_minus(2, -0.4, 0.8, 0.3, 1.2) - ref) < 1e-9

    def test_against_quadrature_grid(self, rng):
        for _ in range(120):
            mu1, mu2 = rng.uniform(-5, 5, 2)
            v1, v2 = rng.uniform(0.01, 25, 2)
            lo = min(mu1, 0.0) - 40 * math.sqrt(v1)
            scale = normal_pdf(0.0, mu2, v2)
            for k in (0, 1, 2):
                ref = gauss_quad(lambda z: z**k * normal_pdf(z, mu1, v1) * scale, lo, 0.0)
                assert abs(G.s_minus(k, mu1, v1, mu2, v2) - ref) < 1e-9


class TestFusedKernels:
    def test_zeta_all_matches_scalar(self, rng):
        for _ in range(300):
            mu1, mu2 = rng.uniform(-6, 6, 2)
            v1, v2 = rng.uniform(0.01, 30, 2)
            z = G._zeta_all(mu1, v1, mu2, v2)
            for k in (0, 1, 2):
                assert abs(z[k] - G.zeta(k, mu1, v1, mu2, v2)) <= 1e-13 * (1 + abs(z[k]))

    def test_s_minus_all_matches_scalar(self, rng):
        for _ in range(300):
            mu1, mu2 = rng.uniform(-6, 6, 2)
            v1, v2 = rng.uniform(0.01, 30, 2)
            s = G._s_minus_all(mu1, v1, mu2, v2)
            for k in (0, 1, 2):
                assert abs(s[k] - G.s_minus(k, mu1, v1, mu2, v2)) <= 1e-13 * (1 + abs(s[k]))


def _mixture_moments(weights, mus, variances):
    weights = np.asarray(weights) / np.sum(weights)
    mean = float(np.sum(weights * mus))
    second = float(np.sum(weights * (np.asarray(variances) + np.asarray(mus) ** 2)))
    return mean, second - mean * mean


def _cross_entropy(weights, mus, variances, q_mu, q_var):
    weights = np.asarray(weights) / np.sum(weights)

    def p(x):
        return sum(w * normal_pdf(x, m, v) for w, m, v in zip(weights, mus, variances))

    lo = min(mus) - 12 * math.sqrt(max(variances))
    hi = max(mus) + 12 * math.sqrt(max(variances))
    val, _ = integrate.quad(
        lambda x: p(x) * (0.5 * math.log(2 * math.pi * q_var) + 0.5 * (x - q_mu) ** 2 / q_var),
        lo,
        hi,
        limit=300,
        epsabs=1e-12,
    )
    return val


class TestCrossEntropyMinimization:
    def test_moment_match_beats_perturbations(self, rng):
        # moment-matched Gaussians minimize H(p, q) over Gaussian q
        for _ in range(5):
            weights = rng.uniform(0.2, 1.0, 2)
            mus = rng.uniform(-2, 2, 2)
            variances = rng.uniform(0.2, 2.0, 2)
            q_mu, q_var = _mixture_moments(weights, mus, variances)
            h_star = _cross_entropy(weights, mus, variances, q_mu, q_var)
            for _ in range(100):
                d_mu = rng.normal(0, 0.25)
                d_var = rng.uniform(0.5, 2.0)
                if abs(d_mu) < 1e-6 and abs(d_var - 1.0) < 1e-6:
                    continue
                h = _cross_entropy(weights, mus, variances, q_mu + d_mu, q_var * d_var)
                assert h > h_star
