"""Finite-population regularity diagnostics and normality checks.

The ratios reported here are the finite-m quantities whose vanishing
drives the normal approximation for the ratio contrasts: they should be
small, and they shrink as a population is replicated.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import stats

from ._rng import stream
from ._validation import check_positive_int
from .bias_exact import evaluate
from .estimators import schedule_estimands
from .exceptions import InfeasibleError, InputError
from .population import Population
from .randomize import draw_matrix, treated_counts
from .variance import scaled_residuals, schedule_variance_block

_NORMALITY_STREAM = 0x4E4F524D


def _ratio(num, den):
    if den > 0:
        return float(num / den), False
    return (0.0 if num == 0 else float("inf")), True


@dataclass(frozen=True)
class BlockConditions:
    """Regularity ratios of one block; arm-indexed tuples are (treated, control).

    ``degenerate`` is set when a ratio has a zero denominator with a
    non-zero numerator (reported as ``inf``) or the outcome spread of an
    arm is zero.
    """

    block_id: str
    m: int
    m1: int
    g: tuple
    max_deviation_ratio: tuple
    weight_ratio: tuple
    standardized_max_ratio: float
    joint_ratio: float
    degenerate: bool


@dataclass(frozen=True)
class ConditionReport:
    blocks: tuple

    def rows(self):
        for b in self.blocks:
            yield {
                "block": b.block_id,
                "m": b.m,
                "m1": b.m1,
                "g_treated": b.g[0],
                "g_control": b.g[1],
                "max_dev_treated": b.max_deviation_ratio[0],
                "max_dev_control": b.max_deviation_ratio[1],
                "weight_treated": b.weight_ratio[0],
                "weight_control": b.weight_ratio[1],
                "standardized_max": b.standardized_max_ratio,
                "joint": b.joint_ratio,
                "degenerate": b.degenerate,
            }


def _spread(z):
    d = z - z.mean()
    return float(np.max(d**2)), float(d @ d / (z.shape[0] - 1))


def condition_report(pop: Population, p, gamma=None) -> ConditionReport:
    """Finite-m regularity ratios for every block of a schedule population.

    Per block and arm: ``g(t) = max_j D_j(t)^2``; the max-deviation ratio
    ``g(t) / (min(m1, m0) S_D(t))``; the weight ratio
    ``(1 - f_t) S(w) / (m_t wbar^2)``; the standardized ratio
    ``max_t g(t) / (m_t^2 Var)``; and the joint ratio
    ``max a_z(t) / (f (1 - f) m v_z(t))`` over ``z`` in weights and
    weighted adjusted outcomes, with ``a`` the largest squared deviation
    and ``v`` the (m - 1)-divisor variance.
    """
    pop.require_schedule("condition checks")
    m1s = treated_counts(pop, p)
    agg = pop.clusters
    out = []
    for b in range(pop.h):
        sl = pop.block_slice(b)
        m = sl.stop - sl.start
        m1 = int(m1s[b])
        m0 = m - m1
        f = m1 / m
        w = agg.weight[sl]
        r = scaled_residuals(pop, b, gamma)
        g = (float(np.max(r.D1**2)), float(np.max(r.D0**2)))
        flags = []
        lem1 = []
        for gt, S in zip(g, (r.S1, r.S0)):
            val, bad = _ratio(gt, min(m1, m0) * S)
            lem1.append(float("inf") if S == 0 else val)
            flags.append(bad or S == 0)
        Sw = float(np.var(w, ddof=1))
        wbar = float(w.mean())
        wr = ((1 - f) * Sw / (m1 * wbar**2), (1 - (1 - f)) * Sw / (m0 * wbar**2))
        var = schedule_variance_block(pop, b, p, gamma)
        lem2 = []
        for gt, mt in zip(g, (m1, m0)):
            val, bad = _ratio(gt, mt**2 * var)
            lem2.append(val)
            flags.append(bad)
        U1 = r.D1 * wbar
        U0 = r.D0 * wbar
        joint = []
        for z in (w, U1, U0):
            a, v = _spread(z)
            val, bad = _ratio(a, f * (1 - f) * m * v)
            joint.append(val)
            flags.append(bad)
        out.append(
            BlockConditions(
                block_id=pop.block_ids[b],
                m=m,
                m1=m1,
                g=g,
                max_deviation_ratio=tuple(lem1),
                weight_ratio=wr,
                standardized_max_ratio=max(lem2),
                joint_ratio=max(joint),
                degenerate=any(flags),
            )
        )
    return ConditionReport(tuple(out))


@dataclass(frozen=True)
class NormalityResult:
    """Kolmogorov-Smirnov distance of standardized draws to N(0, 1)."""

    statistic: float
    pvalue: float
    mean: float
    variance: float
    reps: int


def standardized_draws(pop: Population, p, *, block=0, gamma=None, reps=1000, seed=0, key=()) -> np.ndarray:
    """``(estimate - target) / sd`` for ``reps`` random assignments.

    The sd is the schedule variance of the block contrast; ``gamma``
    fixes the covariate adjustment.
    """
    pop.require_schedule("normality diagnostics")
    reps = check_positive_int(reps, "reps", 100)
    var = schedule_variance_block(pop, block, p, gamma)
    if not var > 0:
        raise InfeasibleError(f"schedule variance of block {pop.block_ids[block]!r} is zero")
    target = float(schedule_estimands(pop, p).block[block])
    T = draw_matrix(pop, p, stream(seed, _NORMALITY_STREAM, *key), reps)
    return (evaluate(pop, T, "block_ate", block, gamma) - target) / np.sqrt(var)


def normality_diagnostic(pop: Population, p, *, block=0, gamma=None, reps=1000, seed=0, key=()) -> NormalityResult:
    """KS distance between standardized randomization draws and N(0, 1)."""
    z = standardized_draws(pop, p, block=block, gamma=gamma, reps=reps, seed=seed, key=key)
    res = stats.kstest(z, "norm")
    return NormalityResult(float(res.statistic), float(res.pvalue), float(z.mean()), float(z.var(ddof=1)), z.shape[0])


def ks_critical(reps: int, alpha: float = 0.05) -> float:
    """Asymptotic one-sample KS critical value ``c(alpha) / sqrt(reps)``."""
    if not 0 < alpha < 1:
        raise InputError("alpha must lie in (0, 1)")
    return float(stats.kstwobign.isf(alpha) / np.sqrt(reps))
