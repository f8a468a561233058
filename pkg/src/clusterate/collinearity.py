"""Between/within covariate structure and treatment-covariate R^2.

All moments are taken in the block-centered frame: covariates are
centered at their weighted block means and treatment at the block's
weighted treated share. With a single block this is the ordinary
weighted-centered regression of treatment on covariates.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .exceptions import InputError, RankDeficiencyError
from .population import Population, block_summary
from .randomize import realized_proportions


_ABSENT = 1e-14


def _inv(A, what):
    if A.shape[0] == 0:
        raise InputError(f"{what} needs at least one covariate")
    d = np.sqrt(np.diag(A))
    if np.any(d == 0) or np.linalg.cond(A / np.outer(d, d)) > 1e12:
        raise RankDeficiencyError(f"{what} is singular")
    return np.linalg.inv(A)


@dataclass(frozen=True)
class CovariateMoments:
    """Weighted covariate cross-products split into between and within parts."""

    total: np.ndarray
    between: np.ndarray
    within: np.ndarray
    xt_unit: np.ndarray
    xt_cluster: np.ndarray


def covariate_moments(pop: Population) -> CovariateMoments:
    bs = block_summary(pop)
    agg = pop.clusters
    ub = pop.unit_block
    Xt = pop.covariates - bs.xbarbar[ub]
    Xc = agg.xbar - bs.xbarbar[pop.cluster_block]
    Xw = pop.covariates - agg.xbar[pop.unit_cluster]
    w = pop.weights
    return CovariateMoments(
        total=(Xt * w[:, None]).T @ Xt,
        between=(Xc * agg.weight[:, None]).T @ Xc,
        within=(Xw * w[:, None]).T @ Xw,
        xt_unit=Xt,
        xt_cluster=Xc,
    )


@dataclass(frozen=True)
class IccDecomposition:
    """ICC matrix ``gamma_x = total^-1 between`` and its ingredients.

    ``s2_between`` and ``s2_within`` are divided by the number of
    clusters; ``rho_bar`` is ``trace / v``.
    """

    gamma_x: np.ndarray
    s2_between: np.ndarray
    s2_within: np.ndarray
    trace: float
    rho_bar: float


def icc_matrix(pop: Population) -> IccDecomposition:
    mom = covariate_moments(pop)
    G = _inv(mom.total, "total covariate cross-product") @ mom.between
    tr = float(np.trace(G))
    return IccDecomposition(G, mom.between / pop.m, mom.within / pop.m, tr, tr / pop.v)


@dataclass(frozen=True)
class BetweenWithin:
    """Schedule regression coefficients split into between and within parts."""

    gamma_between: np.ndarray
    gamma_within: np.ndarray
    gamma: np.ndarray
    gamma_x: np.ndarray
    recombination_residual: float


def between_within_gammas(pop: Population, p) -> BetweenWithin:
    """Between-cluster, within-cluster and pooled schedule coefficients.

    Potential outcomes are mixed with each block's realized treated
    share. ``recombination_residual`` is the largest absolute entry of
    ``gamma - G gamma_between - (I - G) gamma_within`` with ``G`` the ICC
    matrix. Covariates with no within-cluster (or no between-cluster)
    variation leave that coefficient undefined (NaN) and its term drops
    out.
    """
    pop.require_schedule("between/within coefficients")
    f = realized_proportions(pop, p)
    mom = covariate_moments(pop)
    agg = pop.clusters
    ymix = f[pop.unit_block] * pop.potential[:, 1] + (1 - f[pop.unit_block]) * pop.potential[:, 0]
    ymix_c = f[pop.cluster_block] * agg.ybar1 + (1 - f[pop.cluster_block]) * agg.ybar0
    w = pop.weights
    c_tot = (mom.xt_unit * w[:, None]).T @ ymix
    c_b = (mom.xt_cluster * agg.weight[:, None]).T @ ymix_c
    Xw = pop.covariates - agg.xbar[pop.unit_cluster]
    c_w = (Xw * w[:, None]).T @ (ymix - ymix_c[pop.unit_cluster])
    gamma = _inv(mom.total, "total covariate cross-product") @ c_tot
    G = np.linalg.solve(mom.total, mom.between)
    resid = gamma.copy()
    scale = np.trace(mom.total)
    gb = np.full(pop.v, np.nan)
    gw = np.full(pop.v, np.nan)
    # a part with no variation at all carries zero weight in the recombination
    if np.trace(mom.between) > _ABSENT * scale:
        gb = _inv(mom.between, "between-cluster covariate cross-product") @ c_b
        resid -= G @ gb
    if np.trace(mom.within) > _ABSENT * scale:
        gw = _inv(mom.within, "within-cluster covariate cross-product") @ c_w
        resid -= (np.eye(pop.v) - G) @ gw
    return BetweenWithin(gb, gw, gamma, G, float(np.max(np.abs(resid))))


@dataclass(frozen=True)
class R2Pair:
    """R^2 of treatment on covariates from unit rows (``tx``) and cluster means (``txb``).

    ``pi`` and ``lambda_b`` are the two regressions' coefficient vectors.
    """

    tx: float
    txb: float
    pi: np.ndarray
    lambda_b: np.ndarray


def r2_pair(pop: Population, asg) -> R2Pair:
    T = np.asarray(getattr(asg, "treatment", asg), dtype=float)
    bs = block_summary(pop, asg)
    mom = covariate_moments(pop)
    wj = pop.clusters.weight
    Tt = T - bs.pstar[pop.cluster_block]
    sst = float(wj @ Tt**2)
    if not sst > 0:
        raise InputError("treatment has no weighted variation")
    s = mom.xt_cluster.T @ (wj * Tt)
    pi = np.linalg.solve(mom.total, s)
    lam = np.linalg.solve(mom.between, s)
    return R2Pair(float(s @ pi / sst), float(s @ lam / sst), pi, lam)


class R2Sampler:
    """Vectorized R^2 pairs for many assignments of one population."""

    def __init__(self, pop: Population):
        mom = covariate_moments(pop)
        self.pop = pop
        self.wj = np.asarray(pop.clusters.weight)
        self.A = mom.xt_cluster * self.wj[:, None]
        self.tot_inv = _inv(mom.total, "total covariate cross-product")
        self.btw_inv = _inv(mom.between, "between-cluster covariate cross-product")

    def __call__(self, T: np.ndarray):
        T = np.asarray(T, dtype=float)
        cb = self.pop.cluster_block
        h = self.pop.h
        wb = np.bincount(cb, weights=self.wj, minlength=h)
        w1 = np.stack([T[:, cb == b] @ self.wj[cb == b] for b in range(h)], axis=1)
        sst = np.sum(w1 * (wb - w1) / wb, axis=1)
        # block-centering of T drops out since the columns of A sum to zero per block
        s = T @ self.A
        tx = np.einsum("kv,vu,ku->k", s, self.tot_inv, s) / sst
        txb = np.einsum("kv,vu,ku->k", s, self.btw_inv, s) / sst
        return tx, txb


@dataclass(frozen=True)
class R2Approximation:
    txb: float
    tx: float
    n_star: float


def r2_approximations(v: int, m: int, n: int, icc) -> R2Approximation:
    """Trace approximations to the expected R^2 values and the effective sample size.

    ``icc`` is an :class:`IccDecomposition` or the trace of the ICC matrix.
    """
    if m < 1 or n < m:
        raise InputError("need m >= 1 and n >= m")
    tr = icc.trace if isinstance(icc, IccDecomposition) else float(icc)
    rho = tr / v if v else 0.0
    nbar = n / m
    return R2Approximation(v / m, tr / m + (v - tr) / n, n / (1 + rho * (nbar - 1)))
