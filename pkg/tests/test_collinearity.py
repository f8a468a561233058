import numpy as np
import pytest
import statsmodels.api as sm
from hypothesis import given, settings
from hypothesis import strategies as st

from clusterate.collinearity import (
    R2Sampler,
    between_within_gammas,
    icc_matrix,
    r2_approximations,
    r2_pair,
)
from clusterate.population import Population, observed_assignment
from clusterate.randomize import draw_matrix
from clusterate._rng import stream
from conftest import random_population


def _cluster_constant(pop, rng):
    X = rng.normal(size=(pop.m, pop.v))[pop.unit_cluster]
    return Population.from_arrays(
        np.asarray(pop.block_ids)[pop.unit_block], pop.unit_cluster, pop.weights, X,
        y0=pop.potential[:, 0], y1=pop.potential[:, 1],
    )


def test_icc_eigenvalues_in_unit_interval(rng):
    for _ in range(10):
        pop = random_population(rng, h=2, v=3, units=(2, 5))
        eig = np.linalg.eigvals(icc_matrix(pop).gamma_x).real
        assert np.all(eig > -1e-10) and np.all(eig < 1 + 1e-10)


def test_cluster_constant_covariates_identity(rng):
    pop = _cluster_constant(random_population(rng, h=2, v=2, units=(2, 4)), rng)
    np.testing.assert_allclose(icc_matrix(pop).gamma_x, np.eye(2), atol=1e-10)


def test_within_only_variation_zero():
    clusters = np.repeat(np.arange(4), 2)
    x = np.tile([1.0, -1.0], 4)[:, None]
    pop = Population.from_arrays(None, clusters, np.ones(8), x, y0=np.zeros(8), y1=np.ones(8))
    np.testing.assert_allclose(icc_matrix(pop).gamma_x, 0, atol=1e-12)


def test_half_between_share():
    # cluster offsets of +-1 plus within deviations of +-1, equal weights
    clusters = np.repeat(np.arange(4), 2)
    offsets = np.array([1.0, -1.0, 1.0, -1.0])[clusters]
    x = (offsets + np.tile([1.0, -1.0], 4))[:, None]
    pop = Population.from_arrays(None, clusters, np.ones(8), x, y0=np.zeros(8), y1=np.ones(8))
    assert icc_matrix(pop).gamma_x[0, 0] == pytest.approx(0.5, abs=1e-10)


def test_cluster_constant_gamma_equals_between(rng):
    pop = _cluster_constant(random_population(rng, h=1, m_range=(10, 10), v=2, units=(2, 4)), rng)
    bw = between_within_gammas(pop, 0.5)
    np.testing.assert_allclose(bw.gamma, bw.gamma_between, rtol=1e-10)
    assert np.all(np.isnan(bw.gamma_within))


def test_linear_outcomes_common_coefficient(rng):
    pop = random_population(rng, h=2, v=2, units=(2, 4))
    beta = np.array([0.7, -1.2])
    y0 = pop.covariates @ beta
    lin = Population.from_arrays(
        np.asarray(pop.block_ids)[pop.unit_block], pop.unit_cluster, pop.weights, pop.covariates, y0=y0, y1=y0 + 2.0
    )
    bw = between_within_gammas(lin, 0.5)
    for g in (bw.gamma, bw.gamma_between, bw.gamma_within):
        np.testing.assert_allclose(g, beta, rtol=1e-10)


@pytest.mark.parametrize("seed", range(5))
def test_recombination_identity(seed):
    pop = random_population(np.random.default_rng(seed), h=2, v=3, units=(2, 5))
    assert between_within_gammas(pop, 0.4).recombination_residual <= 1e-8


def _centered(pop, T):
    """Block-centered treatment and covariates at unit and cluster level."""
    agg = pop.clusters
    wj = agg.weight
    Tt = np.empty(pop.m)
    Xc = np.empty_like(agg.xbar)
    Xu = np.empty_like(pop.covariates)
    for b in range(pop.h):
        cs = pop.cluster_block == b
        us = pop.unit_block == b
        Tt[cs] = T[cs] - np.dot(wj[cs], T[cs]) / wj[cs].sum()
        xm = pop.weights[us] @ pop.covariates[us] / pop.weights[us].sum()
        Xc[cs] = agg.xbar[cs] - xm
        Xu[us] = pop.covariates[us] - xm
    return Tt, Xc, Xu


def test_r2_matches_statsmodels(rng):
    pop = random_population(rng, h=2, v=2, schedule=False, units=(2, 5))
    asg = observed_assignment(pop)
    Tt, Xc, Xu = _centered(pop, asg.treatment.astype(float))
    tx = sm.WLS(Tt[pop.unit_cluster], Xu, weights=pop.weights).fit().rsquared
    txb = sm.WLS(Tt, Xc, weights=pop.clusters.weight).fit().rsquared
    r = r2_pair(pop, asg)
    assert r.tx == pytest.approx(tx, rel=1e-10)
    assert r.txb == pytest.approx(txb, rel=1e-10)


def test_decomposition_pi_equals_gamma_lambda(rng):
    pop = random_population(rng, h=2, v=3, schedule=False, units=(2, 5))
    r = r2_pair(pop, observed_assignment(pop))
    np.testing.assert_allclose(r.pi, icc_matrix(pop).gamma_x @ r.lambda_b, atol=1e-8)


def test_orthogonal_design_zero_r2():
    clusters = np.arange(4)
    x = np.array([[1.0], [-1.0], [1.0], [-1.0]])
    pop = Population.from_arrays(None, clusters, np.ones(4), x, y=np.zeros(4), treatment=[1, 1, 0, 0])
    r = r2_pair(pop, observed_assignment(pop))
    assert r.tx == pytest.approx(0, abs=1e-15) and r.txb == pytest.approx(0, abs=1e-15)


def test_cluster_constant_r2_equal(rng):
    pop = _cluster_constant(random_population(rng, h=1, m_range=(12, 12), v=2, units=(2, 4)), rng)
    T = draw_matrix(pop, 0.5, stream(1), 50)
    tx, txb = R2Sampler(pop)(T)
    np.testing.assert_allclose(tx, txb, atol=1e-10)


def test_sampler_matches_pair_and_dominance():
    pop = random_population(np.random.default_rng(30), h=1, m_range=(30, 30), v=3, units=(2, 6))
    T = draw_matrix(pop, 0.5, stream(30), 10_000)
    tx, txb = R2Sampler(pop)(T)
    assert np.all(txb >= tx - 1e-12)
    for k in range(3):
        r = r2_pair(pop, T[k])
        assert (tx[k], txb[k]) == pytest.approx((r.tx, r.txb), rel=1e-10)


def test_approximation_reference_values():
    assert r2_approximations(2, 20, 1000, 0.0).txb == pytest.approx(0.10)
    assert r2_approximations(3, 20, 600, 0.0).tx == pytest.approx(3 / 600)
    assert r2_approximations(2, 20, 1000, 2.0).n_star == pytest.approx(20)


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 10), st.integers(2, 50), st.integers(1, 40), st.floats(0, 1))
def test_approximation_bounds(v, m, nbar, share):
    n = m * nbar
    a = r2_approximations(v, m, n, share * v)
    assert a.tx <= a.txb + 1e-12
    assert m - 1e-9 <= a.n_star <= n + 1e-9
