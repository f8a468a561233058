import numpy as np
import pytest

from clusterate.estimators import block_ate, pooled_ate, ratio_mean, schedule_estimands, schedule_gamma
from clusterate.population import Population, block_summary, observed_assignment, replicate
from clusterate.wls import build_design, fit_wls
from conftest import random_population


def _observed(rng, **kw):
    pop = random_population(rng, schedule=False, **kw)
    return pop, observed_assignment(pop)


def test_ratio_mean_hand_instance():
    pop = Population.from_arrays(None, ["a", "b", "c"], [1.0, 3.0, 2.0], y=[2.0, 4.0, 0.0], treatment=[1, 1, 0])
    assert ratio_mean(pop, [1, 1, 0], 0, 1) == 3.5


def test_ratio_mean_constant_outcome(rng):
    pop, asg = _observed(rng, h=1, v=0)
    const = Population.from_arrays(None, pop.unit_cluster, pop.weights, y=np.full(pop.n, 2.5), treatment=pop.treatment[pop.unit_cluster])
    assert ratio_mean(const, asg, 0, 1) == pytest.approx(2.5, rel=1e-14)


def test_ratio_mean_equal_weights(rng):
    pop, asg = _observed(rng, h=1, v=0, units=(1, 1), log_weights=False)
    sel = asg.treatment == 1
    assert ratio_mean(pop, asg, 0, 1) == pytest.approx(pop.clusters.ybar[sel].mean(), rel=1e-13)


def test_no_covariates_is_difference_of_means(rng):
    pop, asg = _observed(rng, h=3, v=0)
    bs = block_summary(pop, asg)
    est = block_ate(pop, asg, model="none")
    np.testing.assert_array_equal([e.beta1 for e in est], bs.ybar1 - bs.ybar0)


def test_zero_gamma_equals_no_covariates(rng):
    pop, asg = _observed(rng, h=2, v=2)
    a = [e.beta1 for e in block_ate(pop, asg, gamma=np.zeros(2))]
    b = [e.beta1 for e in block_ate(pop, asg, model="none")]
    np.testing.assert_array_equal(a, b)


@pytest.mark.parametrize("model", ["none", "interacted", "block-cov"])
@pytest.mark.parametrize("seed", range(5))
def test_block_closed_form_matches_wls(model, seed):
    rng = np.random.default_rng(seed)
    pop, asg = _observed(rng, h=2, m_range=(6, 6), v=2)
    fit = fit_wls(build_design(pop, asg, model))
    closed = [e.beta1 for e in block_ate(pop, asg, model=model)]
    np.testing.assert_allclose(closed, fit.tau, rtol=1e-10, atol=1e-12)


@pytest.mark.parametrize("seed", range(5))
def test_pooled_closed_form_matches_wls(seed):
    rng = np.random.default_rng(100 + seed)
    pop, asg = _observed(rng, h=2, v=2)
    fit = fit_wls(build_design(pop, asg, "pooled"))
    est = pooled_ate(pop, asg)
    assert est.beta1 == pytest.approx(fit["tau"], rel=1e-10)
    np.testing.assert_allclose(est.gamma, fit.gamma, rtol=1e-9, atol=1e-12)


def test_pooled_in_hull_of_adjusted_block_effects(rng):
    pop, asg = _observed(rng, h=3, v=2)
    est = pooled_ate(pop, asg)
    per_block = est.block_contrasts - est.covariate_shift @ est.gamma
    assert per_block.min() - 1e-12 <= est.beta1 <= per_block.max() + 1e-12


def test_pooled_single_block_equals_block_estimate(rng):
    pop, asg = _observed(rng, h=1, v=2)
    gamma = pooled_ate(pop, asg).gamma
    assert pooled_ate(pop, asg).beta1 == pytest.approx(block_ate(pop, asg, gamma=gamma)[0].beta1, rel=1e-13)


def test_pooled_of_identical_blocks(rng):
    pop, asg = _observed(rng, h=1, v=0)
    T = pop.treatment[pop.unit_cluster]
    blocks = np.r_[np.zeros(pop.n), np.ones(pop.n)]
    twin = Population.from_arrays(
        blocks, np.r_[pop.unit_cluster, pop.unit_cluster], np.r_[pop.weights, pop.weights],
        y=np.r_[pop.outcome, pop.outcome], treatment=np.r_[T, T],
    )
    single = block_ate(pop, asg, model="none")[0].beta1
    assert pooled_ate(twin, observed_assignment(twin)).beta1 == pytest.approx(single, rel=1e-13)


def test_schedule_estimand_hand_instance(four_cluster_schedule):
    est = schedule_estimands(four_cluster_schedule, 0.5)
    assert est.block[0] == pytest.approx(23 / 8, rel=1e-15)
    assert est.pooled == pytest.approx(23 / 8, rel=1e-15)


def test_constant_effect_estimands(rng):
    pop = random_population(rng, h=3, v=1)
    shifted = Population.from_arrays(
        np.asarray(pop.block_ids)[pop.unit_block], pop.unit_cluster, pop.weights, pop.covariates,
        y0=pop.potential[:, 0], y1=pop.potential[:, 0] + 0.75,
    )
    est = schedule_estimands(shifted, 0.5)
    np.testing.assert_allclose(est.block, 0.75, rtol=1e-13)
    assert est.pooled == pytest.approx(0.75, rel=1e-13)


def test_schedule_gamma_invariant_to_replication(rng):
    # even block sizes keep the realized treated share fixed under replication
    pop = random_population(rng, h=2, m_range=(6, 6), v=2)
    np.testing.assert_allclose(schedule_gamma(replicate(pop, 2), 0.5), schedule_gamma(pop, 0.5), rtol=1e-10)
