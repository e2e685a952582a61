import numpy as np
import pytest

from opbn.distributions import (LOG_STD_MAX, LOG_STD_MIN, DiagGaussian, js_mc_estimate,
                                kl_to_std_normal, kl_to_std_normal_grad, sample_reparam,
                                sym_kl_per_dim, sym_kl_per_dim_grad)
from opbn.errors import ShapeError
from opbn.numerics import grad_check


def random_gaussian(rng, h=4):
    return DiagGaussian(rng.normal(0, 1.5, h), rng.uniform(-1.5, 0.8, h))


def test_log_std_clamped_at_construction():
    q = DiagGaussian(np.zeros(3), np.array([-20.0, 0.0, 9.0]))
    assert q.log_std[0] == LOG_STD_MIN
    assert q.log_std[2] == LOG_STD_MAX


def test_sample_reparam_zero_eps_returns_mean():
    q = DiagGaussian(np.array([2.0, -1.0]), np.array([0.3, -0.7]))
    np.testing.assert_array_equal(sample_reparam(q, np.zeros(2)), q.mean)


def test_sample_reparam_unit_scale():
    q = DiagGaussian(np.zeros(2), np.zeros(2))
    np.testing.assert_array_equal(sample_reparam(q, np.array([1.0, -1.0])), [1.0, -1.0])


def test_sample_reparam_moments_match():
    # empirical mean/var of 1e5 draws within 3 standard errors
    rng = np.random.default_rng(10)
    q = DiagGaussian(np.array([0.7, -2.0, 0.0]), np.array([0.5, -0.3, 0.0]))
    n = 10**5
    z = sample_reparam(q, rng.standard_normal((n, 3)))
    var = np.exp(2 * q.log_std)
    se_mean = np.sqrt(var / n)
    assert np.all(np.abs(z.mean(axis=0) - q.mean) < 3 * se_mean)
    se_var = var * np.sqrt(2.0 / (n - 1))
    assert np.all(np.abs(z.var(axis=0) - var) < 3 * se_var)


def test_kl_standard_is_zero():
    assert kl_to_std_normal(DiagGaussian.standard(5)) == 0.0


def test_kl_unit_mean_shift():
    assert abs(kl_to_std_normal(DiagGaussian(np.array([1.0]), np.array([0.0]))) - 0.5) < 1e-15


def test_kl_matches_mc_oracle():
    # analytic KL within 3 SE of a 2e5-sample Monte-Carlo estimate
    rng = np.random.default_rng(11)
    n = 2 * 10**5
    for _ in range(20):
        q = random_gaussian(rng)
        z = sample_reparam(q, rng.standard_normal((n, q.dim)))
        logq = np.sum(-0.5 * np.log(2 * np.pi) - q.log_std
                      - (z - q.mean) ** 2 / (2 * np.exp(2 * q.log_std)), axis=1)
        logp = np.sum(-0.5 * np.log(2 * np.pi) - z**2 / 2, axis=1)
        stat = logq - logp
        mc, se = stat.mean(), stat.std(ddof=1) / np.sqrt(n)
        assert abs(kl_to_std_normal(q) - mc) < 3 * se


def test_kl_zero_only_at_standard_normal():
    rng = np.random.default_rng(12)
    for _ in range(2000):
        q = DiagGaussian(rng.normal(0, 1, 3), rng.uniform(-1, 1, 3))
        if kl_to_std_normal(q) < 1e-12:
            assert np.allclose(q.mean, 0, atol=1e-6) and np.allclose(q.log_std, 0, atol=1e-6)


def test_sym_kl_identical_is_zero():
    rng = np.random.default_rng(13)
    q = random_gaussian(rng)
    np.testing.assert_array_equal(sym_kl_per_dim(q, q), np.zeros(q.dim))


def test_sym_kl_unit_mean_shift():
    a = DiagGaussian(np.array([0.0]), np.array([0.0]))
    b = DiagGaussian(np.array([1.0]), np.array([0.0]))
    np.testing.assert_allclose(sym_kl_per_dim(a, b), [0.5], rtol=1e-14)


def test_sym_kl_variance_ratio():
    # N(0,1) vs N(0,4): halves of 0.31815 and 0.80685 sum to 0.5625
    a = DiagGaussian(np.array([0.0]), np.array([0.0]))
    b = DiagGaussian(np.array([0.0]), np.array([np.log(2.0)]))
    np.testing.assert_allclose(sym_kl_per_dim(a, b), [0.5625], rtol=1e-12)


def test_sym_kl_symmetric_and_nonnegative():
    rng = np.random.default_rng(14)
    for _ in range(100):
        a, b = random_gaussian(rng), random_gaussian(rng)
        dab = sym_kl_per_dim(a, b)
        dba = sym_kl_per_dim(b, a)
        np.testing.assert_array_equal(dab, dba)
        assert np.all(dab >= 0)
        assert np.all(np.isfinite(dab))


def test_sym_kl_matches_mc_oracle():
    # per-dim symmetric KL within 3 SE of its two-sided MC estimate
    rng = np.random.default_rng(15)
    n = 2 * 10**5
    for _ in range(20):
        a, b = random_gaussian(rng, h=2), random_gaussian(rng, h=2)
        za = sample_reparam(a, rng.standard_normal((n, 2)))
        zb = sample_reparam(b, rng.standard_normal((n, 2)))

        def logpdf(z, q):
            return -0.5 * np.log(2 * np.pi) - q.log_std - (z - q.mean) ** 2 / (2 * np.exp(2 * q.log_std))

        stat = 0.5 * (logpdf(za, a) - logpdf(za, b)) + 0.5 * (logpdf(zb, b) - logpdf(zb, a))
        mc = stat.mean(axis=0)
        se = stat.std(axis=0, ddof=1) / np.sqrt(n)
        assert np.all(np.abs(sym_kl_per_dim(a, b) - mc) < 3 * se)


def test_sym_kl_shape_mismatch():
    with pytest.raises(ShapeError):
        sym_kl_per_dim(DiagGaussian.standard(2), DiagGaussian.standard(3))


def test_kl_gradients_match_finite_differences():
    rng = np.random.default_rng(16)
    for _ in range(10):
        q0 = random_gaussian(rng)
        h = q0.dim

        def fn(flat):
            q = DiagGaussian(flat[:h], flat[h:])
            gm, gl = kl_to_std_normal_grad(q)
            return float(kl_to_std_normal(q)), np.concatenate([gm, gl])

        report = grad_check(fn, np.concatenate([q0.mean, q0.log_std]), tol=1e-6)
        assert report.ok, report.describe()


def test_sym_kl_gradients_match_finite_differences():
    rng = np.random.default_rng(17)
    for _ in range(10):
        a0, b0 = random_gaussian(rng), random_gaussian(rng)
        h = a0.dim
        w = rng.standard_normal(h)  # check d(sum w_h D^h) for generic weights

        def fn(flat):
            a = DiagGaussian(flat[:h], flat[h:2 * h])
            b = DiagGaussian(flat[2 * h:3 * h], flat[3 * h:])
            val = float(np.sum(w * sym_kl_per_dim(a, b)))
            gma, gla, gmb, glb = sym_kl_per_dim_grad(a, b)
            return val, np.concatenate([w * gma, w * gla, w * gmb, w * glb])

        flat0 = np.concatenate([a0.mean, a0.log_std, b0.mean, b0.log_std])
        report = grad_check(fn, flat0, tol=1e-6)
        assert report.ok, report.describe()


def test_js_mc_zero_for_identical():
    rng = np.random.default_rng(18)
    q = random_gaussian(rng)
    est, se = js_mc_estimate(q, q, 20000, rng)
    assert np.all(np.abs(est) <= 3 * se + 1e-12)


def test_js_mc_bounded_by_ln2():
    rng = np.random.default_rng(19)
    for _ in range(10):
        a, b = random_gaussian(rng), random_gaussian(rng)
        est, se = js_mc_estimate(a, b, 20000, rng)
        # 1e-12 absorbs summation rounding when the estimate saturates at ln 2
        assert np.all(est <= np.log(2.0) + 3 * se + 1e-12)
        assert np.all(est >= -3 * se)


def test_js_mc_symmetric():
    rng = np.random.default_rng(20)
    a, b = random_gaussian(rng), random_gaussian(rng)
    e1, s1 = js_mc_estimate(a, b, 50000, rng)
    e2, s2 = js_mc_estimate(b, a, 50000, rng)
    assert np.all(np.abs(e1 - e2) < 3 * np.sqrt(s1**2 + s2**2))


def test_js_mc_rejects_tiny_sample_counts():
    with pytest.raises(ValueError):
        js_mc_estimate(DiagGaussian.standard(2), DiagGaussian.standard(2), 100,
                       np.random.default_rng(0))
