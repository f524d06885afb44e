import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import integrate

from gnnbayes.baselines import (
    fit_results_csv,
    gp_loglikelihood,
    ml_estimate_gp,
    multistart_minimise,
    nelder_mead,
    pl_estimate_schlather,
    pl_loglikelihood,
    schlather_bivariate_cdf,
    schlather_pair_density,
    schlather_pair_logdensity,
)
from gnnbayes.data import SpatialDataset
from gnnbayes.simulate import (
    GPParams,
    SchlatherParams,
    make_rng,
    matern_covariance,
    simulate_gp,
    simulate_schlather,
)
from gnnbayes.special import matern_correlation

GP_BOUNDS = [(0.1, 1.0), (0.05, 0.3)]
SCH_BOUNDS = [(0.05, 0.3), (0.5, 2.5)]


# ---------------------------------------------------------------- Gaussian likelihood


def test_single_site_values():
    S = np.array([[0.5, 0.5]])
    p = GPParams(1.0, 0.1, 1.0, 0.0)
    assert gp_loglikelihood(p, np.array([0.0]), S) == pytest.approx(-0.9189385, abs=1e-7)
    assert gp_loglikelihood(p, np.array([1.0]), S) == pytest.approx(-1.4189385, abs=1e-7)


def _dense_oracle(p, Z, S):
    n = len(S)
    d = np.sqrt(((S[:, None] - S[None]) ** 2).sum(-1))
    C = p.sigma2 * np.where(d > 0, matern_correlation(np.maximum(d, 1e-300), p.rho, p.nu), 1.0)
    C[np.diag_indices(n)] = p.sigma2 + p.tau**2
    Ci = np.linalg.inv(C)
    _, logdet = np.linalg.slogdet(C)
    return sum(-0.5 * (n * math.log(2 * math.pi) + logdet + z @ Ci @ z) for z in np.atleast_2d(Z))


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 6), st.integers(1, 3), st.floats(0.05, 0.4), st.floats(0.5, 2.5),
       st.floats(0.05, 1.0), st.integers(0, 10_000))
def test_loglik_matches_dense_inverse(n, m, rho, nu, tau, seed):
    rng = make_rng(seed)
    S = rng.random((n, 2))
    p = GPParams(1.3, rho, nu, tau)
    Z = rng.standard_normal((m, n))
    assert gp_loglikelihood(p, Z, S) == pytest.approx(_dense_oracle(p, Z, S), rel=1e-10, abs=1e-10)


def test_cholesky_failure_is_minus_infinity():
    S = np.array([[0.1, 0.1], [0.1, 0.1], [0.6, 0.2]])
    with pytest.warns(RuntimeWarning):
        assert gp_loglikelihood(GPParams(1.0, 0.2, 1.0, 0.0), np.zeros(3), S) == -math.inf


def _gp_data(theta, n, seed):
    rng = make_rng(seed)
    S = rng.random((n, 2))
    Z = simulate_gp(S, GPParams(1.0, theta[1], 1.0, theta[0]), rng)
    return Z, S


def test_ml_dominates_truth():
    theta0 = (0.4, 0.15)
    for seed in range(10):
        Z, S = _gp_data(theta0, 60, seed)
        res = ml_estimate_gp(Z, S, GP_BOUNDS, rng=make_rng(seed, 1))
        truth = gp_loglikelihood(GPParams(1.0, theta0[1], 1.0, theta0[0]), Z, S)
        assert res.fun >= truth - 1e-9
        assert all(lo <= x <= hi for x, (lo, hi) in zip(res.x, GP_BOUNDS))


def test_ml_bound_binds_when_truth_outside():
    Z, S = _gp_data((0.2, 0.8), 150, 3)
    res = ml_estimate_gp(Z, S, GP_BOUNDS, rng=make_rng(0))
    assert res.x[1] == pytest.approx(0.3, abs=1e-6)


@pytest.mark.slow
def test_ml_consistency():
    # 200 datasets at n = 500; mean estimate within 3 Monte Carlo s.e.
    theta0 = np.array([0.5, 0.15])
    est = []
    for seed in range(200):
        Z, S = _gp_data(theta0, 500, 1000 + seed)
        est.append(ml_estimate_gp(Z, S, GP_BOUNDS, restarts=0).x)
    est = np.array(est)
    se = est.std(axis=0, ddof=1) / math.sqrt(len(est))
    assert np.all(np.abs(est.mean(axis=0) - theta0) < 3 * se), (est.mean(axis=0), se)


# ---------------------------------------------------------------- Schlather pair functions


def test_cdf_examples():
    for z in (0.3, 1.0, 7.0):
        assert schlather_bivariate_cdf(z, z, 1.0) == pytest.approx(math.exp(-1 / z), rel=1e-14)
        assert schlather_bivariate_cdf(z, 1e15, 0.3) == pytest.approx(math.exp(-1 / z), rel=1e-12)
    assert schlather_bivariate_cdf(1.0, 1.0, 0.0) == pytest.approx(math.exp(-1.7071068), rel=1e-7)


def test_cdf_matches_textbook_form():
    rng = make_rng(0)
    z1, z2 = rng.uniform(0.1, 10, 500), rng.uniform(0.1, 10, 500)
    r = rng.uniform(-0.99, 1.0, 500)
    G = np.exp(-0.5 * (1 / z1 + 1 / z2) * (1 + np.sqrt(1 - 2 * (r + 1) * z1 * z2 / (z1 + z2) ** 2)))
    assert np.allclose(schlather_bivariate_cdf(z1, z2, r), G, rtol=1e-10, atol=0)


@settings(max_examples=200, deadline=None)
@given(st.floats(0.01, 100), st.floats(-0.999, 1.0))
def test_diagonal_identity(z, r):
    theta2 = 1 + math.sqrt((1 - r) / 2)
    assert schlather_bivariate_cdf(z, z, r) == pytest.approx(math.exp(-theta2 / z), rel=1e-12, abs=1e-300)


@settings(max_examples=200, deadline=None)
@given(st.floats(0.05, 50), st.floats(0.05, 50), st.floats(1.0, 3.0), st.floats(-0.99, 1.0))
def test_cdf_monotone_and_below_margins(z1, z2, k, r):
    G = schlather_bivariate_cdf(z1, z2, r)
    assert G <= min(math.exp(-1 / z1), math.exp(-1 / z2)) * (1 + 1e-12)
    assert schlather_bivariate_cdf(k * z1, z2, r) >= G * (1 - 1e-12)
    assert schlather_bivariate_cdf(z1, k * z2, r) >= G * (1 - 1e-12)


def _mixed_partial(z1, z2, r, h):
    def D(h1, h2):
        G = lambda a, b: schlather_bivariate_cdf(a, b, r)
        return (G(z1 + h1, z2 + h2) - G(z1 + h1, z2 - h2) - G(z1 - h1, z2 + h2) + G(z1 - h1, z2 - h2)) / (4 * h1 * h2)
    d1 = D(h * z1, h * z2)
    d2 = D(h * z1 / 2, h * z2 / 2)
    return (4 * d2 - d1) / 3


def test_density_matches_finite_differences():
    worst = 0.0
    for z1 in (0.3, 1.0, 4.0):
        for z2 in (0.5, 1.0, 2.5):
            for r in (-0.6, 0.0, 0.5, 0.9, 0.99):
                num = _mixed_partial(z1, z2, r, 2e-3)
                worst = max(worst, abs(schlather_pair_density(z1, z2, r) / num - 1))
    assert worst <= 1e-6


def test_density_integrates_to_rectangle_mass():
    r = 0.45
    a1, b1, a2, b2 = 0.5, 2.0, 0.8, 3.0
    mass, _ = integrate.dblquad(lambda y, x: schlather_pair_density(x, y, r), a1, b1, a2, b2,
                                epsabs=1e-12, epsrel=1e-12)
    G = lambda x, y: schlather_bivariate_cdf(x, y, r)
    assert mass == pytest.approx(G(b1, b2) - G(a1, b2) - G(b1, a2) + G(a1, a2), abs=1e-6)


@settings(max_examples=200, deadline=None)
@given(st.floats(0.05, 50), st.floats(0.05, 50), st.floats(-0.99, 0.999))
def test_density_symmetric_and_positive(z1, z2, r):
    f = schlather_pair_density(z1, z2, r)
    assert f > 0
    assert f == pytest.approx(schlather_pair_density(z2, z1, r), rel=1e-12)


def test_pair_argument_errors():
    with pytest.raises(ValueError):
        schlather_bivariate_cdf(0.0, 1.0, 0.1)
    with pytest.raises(ValueError):
        schlather_pair_logdensity(1.0, 1.0, -1.0)
    with pytest.raises(ValueError):
        schlather_pair_density(1.0, 1.0, 1.2)


# ---------------------------------------------------------------- pairwise likelihood


def test_pl_no_pairs_is_zero():
    ds = SpatialDataset.shared(np.array([[0.0, 0.0], [0.9, 0.9]]), np.array([[1.0, 2.0]]))
    with pytest.warns(RuntimeWarning):
        assert pl_loglikelihood(SchlatherParams(0.1, 1.0), ds, cutoff=0.2) == 0.0


def test_pl_single_pair():
    S = np.array([[0.0, 0.0], [0.1, 0.05]])
    ds = SpatialDataset.shared(S, np.array([[0.7, 2.3]]))
    theta = SchlatherParams(0.15, 1.2)
    r = matern_correlation(math.dist(S[0], S[1]), 0.15, 1.2)
    assert pl_loglikelihood(theta, ds) == pytest.approx(math.log(schlather_pair_density(0.7, 2.3, r)), rel=1e-12)


def test_pl_additive_and_order_invariant():
    rng = make_rng(0)
    S = rng.random((40, 2))
    Z = simulate_schlather(S, SchlatherParams(0.1, 1.0), rng, m=4)
    theta = SchlatherParams(0.12, 1.3)
    one = pl_loglikelihood(theta, SpatialDataset.shared(S, Z))
    two = pl_loglikelihood(theta, SpatialDataset.shared(S, np.vstack((Z, Z))))
    assert two == pytest.approx(2 * one, rel=1e-12)
    rev = pl_loglikelihood(theta, SpatialDataset.shared(S, Z[::-1]))
    assert rev == pytest.approx(one, rel=1e-12)
    # replicates on separate coordinate arrays give the same value
    split = SpatialDataset([S.copy() for _ in range(4)], list(Z))
    assert pl_loglikelihood(theta, split) == pytest.approx(one, rel=1e-12)


def test_pl_dominates_truth():
    theta0 = SchlatherParams(0.15, 1.2)
    for seed in range(5):
        rng = make_rng(seed)
        S = rng.random((60, 2))
        ds = SpatialDataset.shared(S, simulate_schlather(S, theta0, rng, m=5))
        res = pl_estimate_schlather(ds, SCH_BOUNDS, rng=make_rng(seed, 1))
        assert res.fun >= pl_loglikelihood(theta0, ds) - 1e-9


@pytest.mark.slow
def test_pl_approximately_unbiased():
    theta0 = np.array([0.2, 1.5])
    est = []
    for seed in range(100):
        rng = make_rng(2000 + seed)
        S = rng.random((250, 2))
        Z = simulate_schlather(S, SchlatherParams(*theta0), rng, m=20)
        est.append(pl_estimate_schlather(SpatialDataset.shared(S, Z), SCH_BOUNDS, restarts=0).x)
    est = np.array(est)
    se = est.std(axis=0, ddof=1) / math.sqrt(len(est))
    assert np.all(np.abs(est.mean(axis=0) - theta0) < 3 * se), (est.mean(axis=0), se)


# ---------------------------------------------------------------- optimiser


def test_nelder_mead_interior_and_boundary():
    c = np.array([0.3, -0.2])
    res = nelder_mead(lambda x: float(np.sum((x - c) ** 2)), [0.0, 0.0], [(-1, 1), (-1, 1)])
    assert res.converged and np.allclose(res.x, c, atol=1e-6)
    c = np.array([2.0, 0.5])
    res = nelder_mead(lambda x: float(np.sum((x - c) ** 2)), [0.0, 0.0], [(-1, 1), (-1, 1)])
    assert res.x[0] == pytest.approx(1.0, abs=1e-6) and res.x[1] == pytest.approx(0.5, abs=1e-6)
    with pytest.raises(ValueError):
        nelder_mead(lambda x: 0.0, [3.0, 0.0], [(-1, 1), (-1, 1)])


def test_nelder_mead_random_quadratics():
    rng = make_rng(0)
    for _ in range(100):
        d = int(rng.integers(1, 5))
        A = rng.standard_normal((d, d))
        H = A @ A.T + 0.5 * np.eye(d)
        c = rng.uniform(-0.8, 0.8, d)
        res = nelder_mead(lambda x: float((x - c) @ H @ (x - c)), np.zeros(d), [(-1, 1)] * d)
        assert res.converged and np.allclose(res.x, c, atol=1e-4)


def test_nelder_mead_max_iterations():
    res = nelder_mead(lambda x: float(np.sum((x - 0.5) ** 2)), [0.0, 0.0, 0.0], [(-1, 1)] * 3, maxiter=3)
    assert not res.converged


def test_multistart_picks_global_minimum():
    f = lambda x: float(np.cos(8 * x[0]) + 0.1 * x[0] ** 2)
    res = multistart_minimise(f, [(-2.0, 2.0)], make_rng(1), restarts=10)
    grid = np.linspace(-2, 2, 40001)
    assert res.fun == pytest.approx(min(f([g]) for g in grid), abs=1e-6)


def test_fit_results_csv():
    res = nelder_mead(lambda x: float(np.sum(x**2)), [0.5], [(-1, 1)])
    text = fit_results_csv([(3, ("rho",), res)], ["seed=1"], with_timing=False)
    lines = text.splitlines()
    assert lines[:2] == ["# seed=1", "dataset_id,param,estimate,loglik,seconds,converged"]
    assert lines[2].startswith("3,rho,") and lines[2].endswith(",NA,true")
