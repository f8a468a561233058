"""Closed-form weighted ratio estimators of the average treatment effect.

Every estimator here is computed from block and arm summaries directly,
without calling the regression solver; :mod:`clusterate.wls` gives the
same numbers by least squares.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .exceptions import EmptyArmError, InputError, RankDeficiencyError
from .population import Population, block_summary, unit_outcomes
from .randomize import realized_proportions
from .wls import ModelSpec


@dataclass(frozen=True)
class BlockEstimate:
    block_id: str
    beta1: float
    arm_means: tuple
    covariate_shift: np.ndarray

    def as_record(self) -> dict:
        return {
            "block": self.block_id,
            "estimate": self.beta1,
            "mean_treated": self.arm_means[0],
            "mean_control": self.arm_means[1],
            "covariate_shift": [float(c) for c in self.covariate_shift],
        }


@dataclass(frozen=True)
class PooledEstimate:
    """Single treatment effect combining blocks with precision weights ``w1 w0 / w``."""

    beta1: float
    precision_weights: np.ndarray
    block_contrasts: np.ndarray
    covariate_shift: np.ndarray
    gamma: np.ndarray


@dataclass(frozen=True)
class ScheduleEstimands:
    """Assignment-free targets of a full potential-outcome schedule."""

    block: np.ndarray
    pooled: float
    estimand_weights: np.ndarray
    proportions: np.ndarray


def ratio_mean(pop: Population, asg, block: int, arm: int) -> float:
    """Weighted mean of cluster outcomes over one arm of one block."""
    T = np.asarray(getattr(asg, "treatment", asg))
    agg = pop.clusters
    y = agg.ybar if pop.mode == "observed" else np.where(T == 1, agg.ybar1, agg.ybar0)
    sel = (pop.cluster_block == block) & (T == arm)
    if not sel.any():
        raise EmptyArmError(f"block {pop.block_ids[block]!r} has no clusters with T={arm}")
    w = agg.weight[sel]
    return float(np.dot(w, y[sel]) / w.sum())


def _solve_gamma(A, c, names):
    if A.shape[0] == 0:
        return np.zeros(0)
    d = np.sqrt(np.diag(A))
    if np.any(d == 0):
        k = int(np.flatnonzero(d == 0)[0])
        raise RankDeficiencyError(f"covariate {names[k]!r} has no variation", column=names[k])
    Ad = A / np.outer(d, d)
    ev = np.linalg.eigvalsh(Ad)
    # squared singular values, hence the squared tolerance
    if ev[0] / ev[-1] < 1e-20:
        raise RankDeficiencyError("covariate cross-product is singular", column=names[-1])
    return np.linalg.solve(A, c)


def _cell_centered(pop, asg, bs):
    T = np.asarray(getattr(asg, "treatment", asg)).astype(bool)[pop.unit_cluster]
    ub = pop.unit_block
    y = unit_outcomes(pop, asg)
    xm = np.where(T[:, None], bs.xbar1[ub], bs.xbar0[ub])
    ym = np.where(T, bs.ybar1[ub], bs.ybar0[ub])
    return pop.covariates - xm, y - ym


def estimate_gamma(pop: Population, asg, model="interacted") -> np.ndarray:
    """Covariate coefficients implied by ``model`` under ``asg``.

    Returns shape (v,), or (h, v) for the per-block covariate model.
    """
    model = ModelSpec.parse(model)
    bs = block_summary(pop, asg)
    w, names = pop.weights, pop.covariate_names
    if model is ModelSpec.NO_COVARIATES or pop.v == 0:
        return np.zeros((pop.h, 0)) if model is ModelSpec.BLOCK_COVARIATE else np.zeros(0)

    if model is ModelSpec.POOLED:
        ub = pop.unit_block
        Xt = pop.covariates - bs.xbarbar[ub]
        y = unit_outcomes(pop, asg)
        prec = bs.w1 * bs.w0 / bs.w
        P = prec.sum()
        k = prec @ (bs.xbar1 - bs.xbar0)
        d = prec @ (bs.ybar1 - bs.ybar0) / P
        A = (Xt * w[:, None]).T @ Xt - np.outer(k, k) / P
        c = (Xt * w[:, None]).T @ y - k * d
        return _solve_gamma(A, c, names)

    xc, yc = _cell_centered(pop, asg, bs)
    if model is ModelSpec.FULL_INTERACTED:
        return _solve_gamma((xc * w[:, None]).T @ xc, (xc * w[:, None]).T @ yc, names)
    out = np.empty((pop.h, pop.v))
    ub = pop.unit_block
    for b in range(pop.h):
        s = ub == b
        xb, yb, wb = xc[s], yc[s], w[s]
        labels = [f"{x}[{pop.block_ids[b]}]" for x in names]
        out[b] = _solve_gamma((xb * wb[:, None]).T @ xb, (xb * wb[:, None]).T @ yb, labels)
    return out


def _check_gamma(pop, gamma, per_block):
    g = np.asarray(gamma, dtype=float)
    want = (pop.h, pop.v) if per_block else (pop.v,)
    if per_block and g.shape == (pop.v,):
        g = np.broadcast_to(g, want)
    if g.shape != want:
        raise InputError(f"gamma has shape {g.shape}, expected {want}")
    return g


def block_ate(pop: Population, asg, gamma=None, model="interacted") -> list:
    """Per-block effects ``ybar1 - ybar0 - (xbar1 - xbar0) @ gamma``.

    ``gamma=None`` estimates the covariate coefficients for ``model``; a
    supplied ``gamma`` is used verbatim (shape (v,), or (h, v) for the
    per-block covariate model).
    """
    model = ModelSpec.parse(model)
    bs = block_summary(pop, asg)
    per_block = model is ModelSpec.BLOCK_COVARIATE
    if model is ModelSpec.NO_COVARIATES:
        gamma = np.zeros((pop.v,))
    elif gamma is None:
        gamma = estimate_gamma(pop, asg, model)
    g = _check_gamma(pop, gamma, per_block)
    shift = bs.xbar1 - bs.xbar0
    adj = np.einsum("bv,bv->b", shift, g) if per_block else shift @ g
    beta = bs.ybar1 - bs.ybar0 - adj
    return [
        BlockEstimate(pop.block_ids[b], float(beta[b]), (float(bs.ybar1[b]), float(bs.ybar0[b])), shift[b])
        for b in range(pop.h)
    ]


def pooled_ate(pop: Population, asg, gamma=None) -> PooledEstimate:
    """Precision-weighted single effect of the pooled (restricted) model."""
    bs = block_summary(pop, asg)
    g = estimate_gamma(pop, asg, ModelSpec.POOLED) if gamma is None else _check_gamma(pop, gamma, False)
    prec = bs.w1 * bs.w0 / bs.w
    contrast = bs.ybar1 - bs.ybar0
    shift = bs.xbar1 - bs.xbar0
    P = prec.sum()
    beta = prec @ contrast / P - (prec @ shift / P) @ g
    return PooledEstimate(float(beta), prec, contrast, shift, g)


def schedule_gamma(pop: Population, p, model="interacted") -> np.ndarray:
    """Covariate coefficients of the full-schedule population regression.

    Arms are mixed with the realized treated share of each block. Shape
    (v,), or (h, v) for the per-block covariate model.
    """
    model = ModelSpec.parse(model)
    pop.require_schedule("the schedule regression")
    f = realized_proportions(pop, p)
    bs = block_summary(pop)
    ub = pop.unit_block
    Xt = pop.covariates - bs.xbarbar[ub]
    fu = f[ub]
    ymix = fu * pop.potential[:, 1] + (1 - fu) * pop.potential[:, 0]
    Xw = Xt * pop.weights[:, None]
    names = pop.covariate_names
    if model is ModelSpec.NO_COVARIATES or pop.v == 0:
        return np.zeros((pop.h, 0)) if model is ModelSpec.BLOCK_COVARIATE else np.zeros(0)
    if model is not ModelSpec.BLOCK_COVARIATE:
        return _solve_gamma(Xw.T @ Xt, Xw.T @ ymix, names)
    out = np.empty((pop.h, pop.v))
    for b in range(pop.h):
        s = ub == b
        out[b] = _solve_gamma(Xw[s].T @ Xt[s], Xw[s].T @ ymix[s], names)
    return out


def schedule_estimands(pop: Population, p) -> ScheduleEstimands:
    """Per-block weighted effects and their pooled combination.

    The pooled target weights block ``b`` by
    ``(m_b / m) f_b (1 - f_b) wbar_b`` with ``f_b`` the realized treated
    share.
    """
    pop.require_schedule("schedule estimands")
    f = realized_proportions(pop, p)
    bs = block_summary(pop)
    beta = bs.Ybar1 - bs.Ybar0
    ew = (bs.m / bs.m.sum()) * f * (1 - f) * bs.wbar
    return ScheduleEstimands(beta, float(ew @ beta / ew.sum()), ew / ew.sum(), f)
