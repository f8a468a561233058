"""Variance estimators for the blocked ratio estimators.

Three families live here:

* estimable design-based variances built from arm residuals, with
  degrees-of-freedom corrections for fitted covariates;
* the cluster-robust sandwich of the WLS fit;
* theoretical randomization variances of a full potential-outcome
  schedule, used for evaluation and standardization.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from .exceptions import InfeasibleError, InputError
from .population import Population, block_summary
from .randomize import realized_proportions, treated_counts
from .wls import ModelSpec, WlsFit

DESIGN = "design"
CRSE = "crse"
SCHEDULE = "schedule"
POOLED_SCHEDULE = "pooled-schedule"


@dataclass(frozen=True)
class VarianceReport:
    """A variance with the ingredients needed to audit it.

    ``correction`` is the small-sample factor g (1 for design-based
    reports); ``qstar`` and ``vstar`` are the covariate df-sharing inputs.
    """

    method: str
    value: float
    df: float
    correction: float = 1.0
    components: dict = field(default_factory=dict)
    qstar: float | None = None
    vstar: int | None = None

    @property
    def se(self) -> float:
        return float(np.sqrt(self.value))

    def as_record(self) -> dict:
        return {
            "method": self.method,
            "value": self.value,
            "df": self.df,
            "g": self.correction,
            "qstar": self.qstar,
            "vstar": self.vstar,
            **{k: v for k, v in self.components.items() if np.isscalar(v)},
        }


def satterthwaite_df(terms, dfs) -> float:
    """Welch-Satterthwaite df for a sum of independent variance terms."""
    terms = np.asarray(terms, dtype=float)
    dfs = np.asarray(dfs, dtype=float)
    total = terms.sum()
    denom = np.sum(terms**2 / dfs)
    if denom == 0:
        return float(dfs.min())
    return float(total**2 / denom)


def _combine_df(terms, dfs, rule):
    if rule == "satterthwaite":
        return satterthwaite_df(terms, dfs)
    if rule == "min":
        return float(min(dfs))
    raise InputError(f"unknown df rule {rule!r}; use 'satterthwaite' or 'min'")


def resolve_qstar(pop: Population, qstar="weight") -> np.ndarray:
    """Per-block share of the covariate df.

    ``"weight"`` uses each block's share of total weight, ``"cluster"`` its
    share of clusters, and a number is used for every block.
    """
    if isinstance(qstar, str):
        agg = pop.clusters
        if qstar == "weight":
            w = np.bincount(pop.cluster_block, weights=agg.weight, minlength=pop.h)
            return w / w.sum()
        if qstar == "cluster":
            c = pop.clusters_per_block
            return c / c.sum()
        raise InputError(f"unknown qstar rule {qstar!r}")
    q = np.broadcast_to(np.asarray(qstar, dtype=float), (pop.h,))
    if np.any((q < 0) | (q > 1)):
        raise InputError("qstar must lie in [0, 1]")
    return q


def _cluster_residual_sums(fit: WlsFit) -> np.ndarray:
    dm = fit.design
    m = int(dm.cluster.max()) + 1
    return np.bincount(dm.cluster, weights=dm.w * fit.residuals, minlength=m)


def _arm_term(E, w_arm, m_t, df_t, what):
    if m_t < 2:
        raise InfeasibleError(f"{what} has {m_t} cluster(s); at least 2 are needed for a variance")
    if df_t <= 0:
        raise InfeasibleError(f"{what} has non-positive degrees of freedom ({df_t:.6g})")
    raw = np.sum(E**2) / w_arm**2
    return m_t / df_t * raw, raw


def design_variance_block(pop: Population, asg, fit: WlsFit, block: int, qstar="weight", df_rule="satterthwaite") -> VarianceReport:
    """Estimable design-based variance of one block's effect.

    For each arm the weighted residual totals ``E_j`` of the block's
    clusters give ``m_t / (m_t - v* p q - 1) * sum(E_j^2) / w_t^2``, where
    ``w_t`` is the arm's total weight and ``p`` is the block's weighted
    treated share (its complement for the control arm). Without covariates
    this is ``s2(1)/m1 + s2(0)/m0`` for the arm sample variances of the
    scaled residuals ``w_j (ybar_j - arm mean) / (arm mean weight)``.

    The cross term of the true variance is not identifiable from one
    assignment and is omitted, which makes the estimate conservative.
    """
    model = fit.design.model
    if model is ModelSpec.POOLED:
        raise InputError("per-block design variance needs a per-block model; use design_variance_pooled")
    bs = block_summary(pop, asg)
    T = np.asarray(getattr(asg, "treatment", asg)).astype(bool)
    E = _cluster_residual_sums(fit)
    inb = pop.cluster_block == block
    if model is ModelSpec.NO_COVARIATES:
        vstar, q = 0, 0.0
    elif model is ModelSpec.BLOCK_COVARIATE:
        vstar, q = pop.v, 1.0
    else:
        vstar, q = pop.v, float(resolve_qstar(pop, qstar)[block])
    p = float(bs.pstar[block])
    m1, m0 = int(bs.m1[block]), int(bs.m0[block])
    df1 = m1 - vstar * p * q - 1
    df0 = m0 - vstar * (1 - p) * q - 1
    name = pop.block_ids[block]
    a1, r1 = _arm_term(E[inb & T], bs.w1[block], m1, df1, f"treated arm of block {name!r}")
    a0, r0 = _arm_term(E[inb & ~T], bs.w0[block], m0, df0, f"control arm of block {name!r}")
    return VarianceReport(
        method=DESIGN,
        value=float(a1 + a0),
        df=_combine_df([a1, a0], [df1, df0], df_rule),
        components={"treated": a1, "control": a0, "df_treated": df1, "df_control": df0, "raw_treated": r1, "raw_control": r0, "pstar": p},
        qstar=q,
        vstar=vstar,
    )


def design_variance_pooled(pop: Population, asg, fit: WlsFit, df_rule="satterthwaite") -> VarianceReport:
    """Design-based variance for the pooled single effect.

    Same two-arm form as the per-block estimator, with clusters of all
    blocks entering through their centered treatment ``T_j - p*_b`` and
    the denominator ``(sum_b w1_b w0_b / w_b)^2``. Arm df are
    ``m_t - v* p - 1`` with ``m_t`` the total arm size and ``p`` the
    overall weighted treated share.
    """
    if fit.design.model is not ModelSpec.POOLED:
        raise InputError("design_variance_pooled needs a pooled-model fit")
    bs = block_summary(pop, asg)
    T = np.asarray(getattr(asg, "treatment", asg)).astype(bool)
    E = _cluster_residual_sums(fit)
    Tt = T - bs.pstar[pop.cluster_block]
    P = np.sum(bs.w1 * bs.w0 / bs.w)
    p = float(bs.w1.sum() / bs.w.sum())
    m1, m0 = int(T.sum()), int((~T).sum())
    terms, dfs = [], []
    for arm, m_t, share in ((T, m1, p), (~T, m0, 1 - p)):
        df_t = m_t - pop.v * share - 1
        if m_t < 2 or df_t <= 0:
            raise InfeasibleError(f"arm with {m_t} clusters has non-positive degrees of freedom ({df_t:.6g})")
        terms.append(m_t / df_t * np.sum((Tt[arm] * E[arm]) ** 2) / P**2)
        dfs.append(df_t)
    return VarianceReport(
        method=DESIGN,
        value=float(sum(terms)),
        df=_combine_df(terms, dfs, df_rule),
        components={"treated": terms[0], "control": terms[1], "df_treated": dfs[0], "df_control": dfs[1]},
        qstar=1.0,
        vstar=pop.v,
    )


def default_correction(fit: WlsFit) -> float:
    m = int(fit.design.cluster.max()) + 1
    return m / (m - 1)


def crse_matrix(fit: WlsFit, g=None) -> np.ndarray:
    """Cluster-robust sandwich ``g A^-1 (sum_j s_j s_j') A^-1`` with ``A = Z'WZ``."""
    dm = fit.design
    g = default_correction(fit) if g is None else float(g)
    m = int(dm.cluster.max()) + 1
    u = dm.Z * (dm.w * fit.residuals)[:, None]
    scores = np.empty((m, u.shape[1]))
    for k in range(u.shape[1]):
        scores[:, k] = np.bincount(dm.cluster, weights=u[:, k], minlength=m)
    bread = fit.gram_inverse
    V = g * bread @ (scores.T @ scores) @ bread
    return (V + V.T) / 2


def crse_variance(fit: WlsFit, g=None) -> dict:
    """Per-coefficient sandwich variances, keyed by column label.

    ``g=None`` uses ``G / (G - 1)`` for ``G`` clusters. Each report carries
    ``G - 1`` degrees of freedom and the full matrix under
    ``components['matrix']``.
    """
    g = default_correction(fit) if g is None else float(g)
    V = crse_matrix(fit, g)
    G = int(fit.design.cluster.max()) + 1
    return {
        lab: VarianceReport(CRSE, float(max(V[k, k], 0.0)), float(G - 1), g, {"matrix": V})
        for k, lab in enumerate(fit.labels)
    }


@dataclass(frozen=True)
class ScaledResiduals:
    """Schedule-mode scaled deviations of one block, one entry per cluster.

    ``D1`` and ``D0`` are ``w_j (Ybar_j(t) - Ybarbar(t) - xtilde_j gamma) / wbar``;
    ``S1``, ``S0`` and ``S_cross`` are their (m - 1)-divisor variances and
    the variance of ``D1 - D0``.
    """

    D1: np.ndarray
    D0: np.ndarray
    S1: float
    S0: float
    S_cross: float


def scaled_residuals(pop: Population, block: int, gamma=None) -> ScaledResiduals:
    pop.require_schedule("scaled schedule residuals")
    agg = pop.clusters
    sl = pop.block_slice(block)
    w = agg.weight[sl]
    wbar = w.mean()
    ybar = lambda y: np.dot(w, y) / w.sum()  # noqa: E731
    adj = np.zeros(w.shape[0])
    if gamma is not None and pop.v:
        g = np.asarray(gamma, dtype=float)
        g = g[block] if g.ndim == 2 else g
        xt = agg.xbar[sl] - (w @ agg.xbar[sl]) / w.sum()
        adj = xt @ g
    D1 = w * (agg.ybar1[sl] - ybar(agg.ybar1[sl]) - adj) / wbar
    D0 = w * (agg.ybar0[sl] - ybar(agg.ybar0[sl]) - adj) / wbar
    m = w.shape[0]
    return ScaledResiduals(D1, D0, D1 @ D1 / (m - 1), D0 @ D0 / (m - 1), (D1 - D0) @ (D1 - D0) / (m - 1))


def schedule_variance_block(pop: Population, block: int, p, gamma=None) -> float:
    """Randomization variance of a block's (gamma-adjusted) ratio contrast.

    ``S1/m1 + S0/m0 - S_cross/m`` from :func:`scaled_residuals`, with arm
    sizes ``round(p_b m_b)``. ``gamma=None`` means no covariate
    adjustment.
    """
    pop.require_schedule("the schedule variance")
    m1 = int(treated_counts(pop, p)[block])
    m = int(pop.clusters_per_block[block])
    r = scaled_residuals(pop, block, gamma)
    return float(r.S1 / m1 + r.S0 / (m - m1) - r.S_cross / m)


def pooled_schedule_variance(pop: Population, p, gamma=None) -> float:
    """Asymptotic randomization variance of the pooled estimator.

    For every block and cluster it sums the square of three contributions:
    the block's effect heterogeneity times the cluster's weight deviation
    (scaled by ``1 - 2 f_b``), and the two arms' scaled deviations ``D1``
    and ``D0``, each times the block's estimand share. Realized treated
    fractions ``f_b`` stand in for the target proportions.
    """
    pop.require_schedule("the pooled schedule variance")
    f = realized_proportions(pop, p)
    bs = block_summary(pop)
    beta_b = bs.Ybar1 - bs.Ybar0
    qt = bs.m / bs.m.sum()
    denom = np.sum(qt * f * (1 - f) * bs.wbar)
    beta = np.sum(qt * f * (1 - f) * bs.wbar * beta_b) / denom
    w = pop.clusters.weight
    total = 0.0
    for b in range(pop.h):
        fb = f[b]
        r = scaled_residuals(pop, b, gamma)
        wb = w[pop.block_slice(b)]
        c = qt[b] * fb * (1 - fb) * bs.wbar[b] / denom
        het = qt[b] * fb * (1 - fb) * (1 - 2 * fb) / (np.sqrt(fb * (1 - fb)) * denom)
        term = (
            het * (beta_b[b] - beta) * (wb - bs.wbar[b])
            + c * np.sqrt((1 - fb) / fb) * r.D1
            + c * np.sqrt(fb / (1 - fb)) * r.D0
        )
        total += term @ term / (bs.m[b] * (bs.m[b] - 1))
    return float(total)


def confidence_interval(estimate: float, vr: VarianceReport, level: float = 0.95) -> tuple:
    """Two-sided t interval; ``df = inf`` gives the normal interval."""
    if not 0 < level < 1:
        raise InputError("level must lie in (0, 1)")
    if not vr.df > 0:
        raise InfeasibleError(f"confidence interval needs positive df, got {vr.df}")
    if vr.value < 0:
        raise InputError("variance must be non-negative")
    q = stats.norm.ppf((1 + level) / 2) if np.isinf(vr.df) else stats.t.ppf((1 + level) / 2, vr.df)
    half = q * np.sqrt(vr.value)
    return float(estimate - half), float(estimate + half)
