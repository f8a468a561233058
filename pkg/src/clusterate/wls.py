"""Design matrices for the blocked regressions and a QR-based WLS solver.

Column order is fixed:

1. treatment interactions ``tau[b]`` (one per block), or a single ``tau``
   for the pooled model;
2. block indicators ``block[b]``;
3. covariates, block-centered: ``x1 .. xv`` shared across blocks, or
   ``x1[b] ..`` per block for :attr:`ModelSpec.BLOCK_COVARIATE`.

Treatment is centered at the realized weighted treated share
``p*_b = w1_b / w_b`` and covariates at the full-block weighted mean, so
the treatment columns are weighted-orthogonal to the block indicators.
"""

from __future__ import annotations

import csv
import enum
import io
from dataclasses import dataclass

import numpy as np
from scipy.linalg import solve_triangular

from .exceptions import InputError, RankDeficiencyError
from .population import Population, block_summary, unit_outcomes

RANK_TOL = 1e-10


class ModelSpec(enum.Enum):
    NO_COVARIATES = "none"
    FULL_INTERACTED = "interacted"
    BLOCK_COVARIATE = "block-cov"
    POOLED = "pooled"

    @classmethod
    def parse(cls, value) -> "ModelSpec":
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).lower())
        except ValueError:
            names = ", ".join(m.value for m in cls)
            raise InputError(f"unknown model {value!r}; choose one of {names}") from None

    @property
    def pooled(self) -> bool:
        return self is ModelSpec.POOLED


@dataclass(frozen=True, eq=False)
class DesignMatrix:
    """Weighted regression problem at the unit level.

    ``Z`` has one row per unit; ``labels`` name its columns. ``cluster``
    maps rows to clusters (for sandwich estimators) and ``n_tau`` counts
    the leading treatment columns.
    """

    Z: np.ndarray
    w: np.ndarray
    y: np.ndarray
    labels: tuple
    cluster: np.ndarray
    model: ModelSpec
    n_tau: int
    h: int
    v: int

    def column(self, label) -> int:
        try:
            return self.labels.index(label)
        except ValueError:
            raise KeyError(label) from None

    def to_csv(self) -> str:
        buf = io.StringIO()
        wr = csv.writer(buf, lineterminator="\n")
        wr.writerow(["cluster", "weight", "y", *self.labels])
        for j, w, y, row in zip(self.cluster, self.w, self.y, self.Z):
            wr.writerow([int(j), repr(float(w)), repr(float(y)), *(repr(float(z)) for z in row)])
        return buf.getvalue()


def design_columns(model, unit_block, treated, covariates, pstar, xbarbar, block_ids, covariate_names):
    """Centered design columns and labels from unit-level arrays.

    ``pstar`` and ``xbarbar`` are the per-block centering constants, so the
    same columns can be rebuilt for new units with constants from a fit.
    """
    model = ModelSpec.parse(model)
    ub = np.asarray(unit_block)
    h = len(block_ids)
    n, v = covariates.shape
    S = (ub[:, None] == np.arange(h)[None, :]).astype(float)
    Tt = np.asarray(treated, dtype=float) - pstar[ub]
    Xt = covariates - xbarbar[ub]
    if model is ModelSpec.POOLED:
        tau, tau_labels = Tt[:, None], ["tau"]
    else:
        tau, tau_labels = S * Tt[:, None], [f"tau[{b}]" for b in block_ids]
    parts = [tau, S]
    labels = tau_labels + [f"block[{b}]" for b in block_ids]
    if model is ModelSpec.BLOCK_COVARIATE:
        parts.append((S[:, :, None] * Xt[:, None, :]).reshape(n, h * v))
        labels += [f"{x}[{b}]" for b in block_ids for x in covariate_names]
    elif model is not ModelSpec.NO_COVARIATES:
        parts.append(Xt)
        labels += list(covariate_names)
    return np.hstack(parts), tuple(labels), len(tau_labels)


def build_design(pop: Population, asg, model="interacted") -> DesignMatrix:
    """Unit-level design matrix for ``model`` under assignment ``asg``."""
    model = ModelSpec.parse(model)
    bs = block_summary(pop, asg)
    T = np.asarray(getattr(asg, "treatment", asg), dtype=float)
    Z, labels, n_tau = design_columns(
        model, pop.unit_block, T[pop.unit_cluster], np.asarray(pop.covariates),
        bs.pstar, bs.xbarbar, pop.block_ids, pop.covariate_names,
    )
    return DesignMatrix(
        Z=Z,
        w=np.asarray(pop.weights),
        y=np.asarray(unit_outcomes(pop, asg)),
        labels=labels,
        cluster=pop.unit_cluster,
        model=model,
        n_tau=n_tau,
        h=pop.h,
        v=pop.v,
    )


@dataclass(frozen=True, eq=False)
class WlsFit:
    """Weighted least-squares solution.

    Attributes
    ----------
    coefficients : ndarray
    labels : tuple of str
    residuals : ndarray
        Unit residuals ``y - Z @ coefficients``.
    gram_inverse : ndarray
        ``(Z' W Z)^-1``, kept for sandwich estimators.
    design : DesignMatrix
    """

    coefficients: np.ndarray
    labels: tuple
    residuals: np.ndarray
    gram_inverse: np.ndarray
    design: DesignMatrix

    def __getitem__(self, label) -> float:
        return float(self.coefficients[self.design.column(label)])

    @property
    def tau(self) -> np.ndarray:
        return self.coefficients[: self.design.n_tau]

    @property
    def gamma(self) -> np.ndarray:
        return self.coefficients[self.design.n_tau + self.design.h :]


def _condition(A: np.ndarray) -> float:
    norms = np.linalg.norm(A, axis=0)
    if np.any(norms == 0):
        return 0.0
    s = np.linalg.svd(A / norms, compute_uv=False)
    return s[-1] / s[0]


def _first_dependent_column(A: np.ndarray) -> int:
    for k in range(1, A.shape[1] + 1):
        if _condition(A[:, :k]) < RANK_TOL:
            return k - 1
    return A.shape[1] - 1


def fit_wls(dm: DesignMatrix) -> WlsFit:
    """Minimize ``sum w (y - Z d)^2`` through a QR factorization of ``sqrt(w) Z``.

    Raises
    ------
    RankDeficiencyError
        When the column-equilibrated weighted design has reciprocal
        condition number below ``RANK_TOL``; the message names the first
        column that makes the design deficient.
    """
    sw = np.sqrt(dm.w)
    A = dm.Z * sw[:, None]
    if A.shape[0] < A.shape[1] or _condition(A) < RANK_TOL:
        k = _first_dependent_column(A) if A.shape[0] >= A.shape[1] else A.shape[0]
        label = dm.labels[k]
        raise RankDeficiencyError(f"design matrix is rank deficient at column {label!r}", column=label)
    Q, R = np.linalg.qr(A)
    coef = solve_triangular(R, Q.T @ (sw * dm.y))
    Rinv = solve_triangular(R, np.eye(R.shape[0]))
    return WlsFit(
        coefficients=coef,
        labels=dm.labels,
        residuals=dm.y - dm.Z @ coef,
        gram_inverse=Rinv @ Rinv.T,
        design=dm,
    )
