"""Blocked, clustered, weighted experimental data.

A :class:`Population` stores unit-level rows (weights, covariates and
either observed outcomes or both potential outcomes) together with the
block -> cluster -> unit nesting. Clusters are held contiguously per
block, blocks in first-appearance order and clusters in first-appearance
order within their block. Weights are never renormalized.
"""

from __future__ import annotations

import csv
import io
import re
from dataclasses import dataclass, field, replace
from typing import Mapping, Sequence

import numpy as np

from .exceptions import EmptyArmError, InputError

OBSERVED = "observed"
SCHEDULE = "schedule"

DEFAULT_SCHEMA = {
    "block": "block",
    "cluster": "cluster",
    "unit": "unit",
    "weight": "weight",
    "y": "y",
    "y0": "y0",
    "y1": "y1",
    "treatment": "T",
}

_COVARIATE_RE = re.compile(r"^x(\d+)$")


def _frozen(a):
    a = np.ascontiguousarray(a)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class ClusterAggregate:
    """Cluster-level weighted aggregates, one entry per cluster.

    ``weight`` is the exact sum of member unit weights; ``ybar`` (observed
    mode) or ``ybar0``/``ybar1`` (schedule mode) and ``xbar`` are weighted
    means over member units.
    """

    block: np.ndarray
    n: np.ndarray
    weight: np.ndarray
    xbar: np.ndarray
    ybar: np.ndarray | None = None
    ybar0: np.ndarray | None = None
    ybar1: np.ndarray | None = None


@dataclass(frozen=True, eq=False)
class Population:
    """Unit-level data with block and cluster structure.

    Use :meth:`from_arrays` or :func:`ingest_units` to build one; the
    constructor performs no validation.
    """

    block_ids: tuple
    cluster_ids: tuple
    cluster_block: np.ndarray
    unit_ids: tuple
    unit_cluster: np.ndarray
    weights: np.ndarray
    covariates: np.ndarray
    outcome: np.ndarray | None = None
    potential: np.ndarray | None = None
    treatment: np.ndarray | None = None
    covariate_names: tuple = ()
    _clusters: ClusterAggregate | None = field(default=None, repr=False)

    @classmethod
    def from_arrays(
        cls,
        blocks,
        clusters,
        weights,
        covariates=None,
        *,
        y=None,
        y0=None,
        y1=None,
        treatment=None,
        units=None,
        covariate_names=None,
    ) -> "Population":
        """Build a population from unit-level arrays.

        Parameters
        ----------
        blocks, clusters : array-like of hashable, length n
            Block and cluster labels. Cluster labels only need to be unique
            within a block. ``blocks=None`` puts every unit in one block.
        weights : array-like of float, length n
            Strictly positive unit weights.
        covariates : array-like, shape (n, v), optional
        y : array-like, optional
            Observed outcomes. Mutually exclusive with ``y0``/``y1``.
        y0, y1 : array-like, optional
            Potential outcomes under control and treatment.
        treatment : array-like of {0, 1}, optional
            Observed unit-level treatment; must be constant within clusters.
        units : array-like, optional
            Unit labels, defaults to the row position.
        """
        clusters = [str(c) for c in np.asarray(clusters, dtype=object).ravel()]
        n = len(clusters)
        if blocks is None:
            blocks = ["1"] * n
        else:
            blocks = [str(b) for b in np.asarray(blocks, dtype=object).ravel()]
        if len(blocks) != n:
            raise InputError(f"blocks has length {len(blocks)}, expected {n}")
        if n == 0:
            raise InputError("no units supplied")

        w = np.asarray(weights, dtype=float).ravel()
        if w.shape[0] != n:
            raise InputError(f"weights has length {w.shape[0]}, expected {n}")
        bad = np.flatnonzero(~(np.isfinite(w) & (w > 0)))
        if bad.size:
            raise InputError(
                f"row {bad[0] + 1}: weight must be a positive finite number, got {w[bad[0]]!r}"
            )

        if covariates is None:
            X = np.zeros((n, 0))
        else:
            X = np.asarray(covariates, dtype=float)
            if X.ndim == 1:
                X = X[:, None]
            if X.shape[0] != n:
                raise InputError(f"covariates have {X.shape[0]} rows, expected {n}")
            if not np.all(np.isfinite(X)):
                raise InputError("covariates contain non-finite values")
        v = X.shape[1]
        if covariate_names is None:
            covariate_names = tuple(f"x{k + 1}" for k in range(v))
        elif len(covariate_names) != v:
            raise InputError("covariate_names does not match covariate dimension")

        has_y = y is not None
        has_schedule = y0 is not None or y1 is not None
        if has_y == has_schedule:
            raise InputError("supply exactly one outcome mode: y, or both y0 and y1")
        outcome = potential = None
        if has_y:
            outcome = np.asarray(y, dtype=float).ravel()
            if outcome.shape[0] != n or not np.all(np.isfinite(outcome)):
                raise InputError("y must be a finite vector with one entry per unit")
        else:
            if y0 is None or y1 is None:
                raise InputError("schedule mode needs both y0 and y1")
            potential = np.column_stack(
                [np.asarray(y0, dtype=float).ravel(), np.asarray(y1, dtype=float).ravel()]
            )
            if potential.shape[0] != n or not np.all(np.isfinite(potential)):
                raise InputError("y0 and y1 must be finite vectors with one entry per unit")

        block_index: dict = {}
        for b in blocks:
            block_index.setdefault(b, len(block_index))
        # clusters: grouped by block, first appearance within block
        per_block: list[dict] = [dict() for _ in block_index]
        for b, c in zip(blocks, clusters):
            d = per_block[block_index[b]]
            d.setdefault(c, len(d))
        offsets = np.cumsum([0] + [len(d) for d in per_block])
        unit_cluster = np.fromiter(
            (offsets[block_index[b]] + per_block[block_index[b]][c] for b, c in zip(blocks, clusters)),
            dtype=np.intp,
            count=n,
        )
        cluster_ids = tuple(c for d in per_block for c in d)
        cluster_block = np.repeat(np.arange(len(per_block)), [len(d) for d in per_block])
        block_ids = tuple(block_index)
        for b, d in zip(block_ids, per_block):
            if len(d) < 2:
                raise InputError(f"block {b!r} has {len(d)} cluster(s); at least 2 are required")

        T = None
        if treatment is not None:
            tu = np.asarray(treatment, dtype=float).ravel()
            if tu.shape[0] != n or not np.all(np.isin(tu, (0.0, 1.0))):
                raise InputError("treatment must be a 0/1 vector with one entry per unit")
            m = len(cluster_ids)
            T = np.full(m, -1, dtype=np.int8)
            for i, (j, t) in enumerate(zip(unit_cluster, tu)):
                if T[j] == -1:
                    T[j] = int(t)
                elif T[j] != int(t):
                    raise InputError(
                        f"row {i + 1}: treatment varies within cluster {cluster_ids[j]!r}"
                    )

        if units is None:
            unit_ids = tuple(str(i + 1) for i in range(n))
        else:
            unit_ids = tuple(str(u) for u in units)

        return cls(
            block_ids=block_ids,
            cluster_ids=cluster_ids,
            cluster_block=_frozen(cluster_block),
            unit_ids=unit_ids,
            unit_cluster=_frozen(unit_cluster),
            weights=_frozen(w),
            covariates=_frozen(X),
            outcome=None if outcome is None else _frozen(outcome),
            potential=None if potential is None else _frozen(potential),
            treatment=None if T is None else _frozen(T),
            covariate_names=tuple(covariate_names),
        )

    @property
    def mode(self) -> str:
        return SCHEDULE if self.potential is not None else OBSERVED

    @property
    def h(self) -> int:
        return len(self.block_ids)

    @property
    def m(self) -> int:
        return len(self.cluster_ids)

    @property
    def n(self) -> int:
        return self.weights.shape[0]

    @property
    def v(self) -> int:
        return self.covariates.shape[1]

    @property
    def unit_block(self) -> np.ndarray:
        return self.cluster_block[self.unit_cluster]

    @property
    def clusters_per_block(self) -> np.ndarray:
        return np.bincount(self.cluster_block, minlength=self.h)

    def block_slice(self, b: int) -> slice:
        counts = self.clusters_per_block
        start = int(counts[:b].sum())
        return slice(start, start + int(counts[b]))

    @property
    def clusters(self) -> ClusterAggregate:
        """Cluster aggregates, computed on first access."""
        if self._clusters is None:
            object.__setattr__(self, "_clusters", _aggregate(self))
        return self._clusters

    def require_schedule(self, what="this operation"):
        if self.mode != SCHEDULE:
            raise InputError(f"{what} needs both potential outcomes (schedule mode)")


def _wmean_by(index, w, values, size, totals):
    if values.ndim == 1:
        return np.bincount(index, weights=w * values, minlength=size) / totals
    out = np.empty((size, values.shape[1]))
    for k in range(values.shape[1]):
        out[:, k] = np.bincount(index, weights=w * values[:, k], minlength=size) / totals
    return out


def _aggregate(pop: Population) -> ClusterAggregate:
    j, w, m = pop.unit_cluster, pop.weights, pop.m
    wj = np.bincount(j, weights=w, minlength=m)
    kw = {}
    if pop.outcome is not None:
        kw["ybar"] = _frozen(_wmean_by(j, w, pop.outcome, m, wj))
    else:
        kw["ybar0"] = _frozen(_wmean_by(j, w, pop.potential[:, 0], m, wj))
        kw["ybar1"] = _frozen(_wmean_by(j, w, pop.potential[:, 1], m, wj))
    return ClusterAggregate(
        block=pop.cluster_block,
        n=_frozen(np.bincount(j, minlength=m)),
        weight=_frozen(wj),
        xbar=_frozen(_wmean_by(j, w, pop.covariates, m, wj)),
        **kw,
    )


def aggregate_clusters(pop: Population) -> Population:
    """Return ``pop`` with its cluster aggregates filled in."""
    pop.clusters  # noqa: B018 - computes and stores
    return pop


def _treatment_vector(pop: Population, asg) -> np.ndarray:
    T = getattr(asg, "treatment", asg)
    T = np.asarray(T)
    if T.shape != (pop.m,):
        raise InputError(f"assignment covers {T.shape} clusters, population has {pop.m}")
    cb = getattr(asg, "cluster_block", None)
    if cb is not None and not np.array_equal(cb, pop.cluster_block):
        raise InputError("assignment block structure does not match the population")
    return T


def cluster_outcomes(pop: Population, asg=None) -> np.ndarray:
    """Observed cluster means; in schedule mode revealed through ``asg``."""
    agg = pop.clusters
    if pop.mode == OBSERVED:
        return agg.ybar
    if asg is None:
        raise InputError("schedule-mode outcomes are only observed under an assignment")
    T = _treatment_vector(pop, asg)
    return np.where(T == 1, agg.ybar1, agg.ybar0)


def unit_outcomes(pop: Population, asg=None) -> np.ndarray:
    """Observed unit outcomes; in schedule mode revealed through ``asg``."""
    if pop.mode == OBSERVED:
        return pop.outcome
    if asg is None:
        raise InputError("schedule-mode outcomes are only observed under an assignment")
    T = _treatment_vector(pop, asg)[pop.unit_cluster]
    return np.where(T == 1, pop.potential[:, 1], pop.potential[:, 0])


@dataclass(frozen=True, eq=False)
class BlockSummary:
    """Block-level weighted statistics, arrays indexed by block.

    Assignment-dependent fields are ``None`` when no assignment was given;
    ``Ybar1``/``Ybar0`` are filled in schedule mode only.
    """

    m: np.ndarray
    w: np.ndarray
    wbar: np.ndarray
    xbarbar: np.ndarray
    m1: np.ndarray | None = None
    m0: np.ndarray | None = None
    w1: np.ndarray | None = None
    w0: np.ndarray | None = None
    pstar: np.ndarray | None = None
    ybar1: np.ndarray | None = None
    ybar0: np.ndarray | None = None
    xbar1: np.ndarray | None = None
    xbar0: np.ndarray | None = None
    Ybar1: np.ndarray | None = None
    Ybar0: np.ndarray | None = None


def block_summary(pop: Population, asg=None) -> BlockSummary:
    """Block totals, weighted means and (given an assignment) arm statistics.

    Raises
    ------
    EmptyArmError
        If some block has no treated or no control cluster under ``asg``.
    """
    agg = pop.clusters
    b, h = pop.cluster_block, pop.h
    wj = agg.weight
    m_b = np.bincount(b, minlength=h)
    w_b = np.bincount(b, weights=wj, minlength=h)
    out = dict(m=m_b, w=w_b, wbar=w_b / m_b, xbarbar=_wmean_by(b, wj, agg.xbar, h, w_b))
    if pop.mode == SCHEDULE:
        out["Ybar1"] = _wmean_by(b, wj, agg.ybar1, h, w_b)
        out["Ybar0"] = _wmean_by(b, wj, agg.ybar0, h, w_b)
    if asg is not None:
        T = _treatment_vector(pop, asg).astype(bool)
        m1 = np.bincount(b[T], minlength=h)
        m0 = m_b - m1
        empty = np.flatnonzero((m1 == 0) | (m0 == 0))
        if empty.size:
            k = empty[0]
            arm = "control" if m0[k] == 0 else "treated"
            raise EmptyArmError(f"block {pop.block_ids[k]!r} has no {arm} clusters")
        w1 = np.bincount(b[T], weights=wj[T], minlength=h)
        w0 = np.bincount(b[~T], weights=wj[~T], minlength=h)
        y = cluster_outcomes(pop, T)
        out.update(
            m1=m1,
            m0=m0,
            w1=w1,
            w0=w0,
            pstar=w1 / w_b,
            ybar1=_wmean_by(b[T], wj[T], y[T], h, w1),
            ybar0=_wmean_by(b[~T], wj[~T], y[~T], h, w0),
            xbar1=_wmean_by(b[T], wj[T], agg.xbar[T], h, w1),
            xbar0=_wmean_by(b[~T], wj[~T], agg.xbar[~T], h, w0),
        )
    return BlockSummary(**out)


def replicate(pop: Population, k: int) -> Population:
    """Copy every block's clusters ``k`` times (k-fold population growth).

    Copies keep the block, get cluster ids suffixed ``#r`` and leave all
    block-level estimands unchanged.
    """
    if k < 1:
        raise InputError("replication factor must be >= 1")
    if k == 1:
        return pop
    ub = np.asarray(pop.block_ids, dtype=object)[pop.unit_block]
    uc = np.asarray(pop.cluster_ids, dtype=object)[pop.unit_cluster]
    blocks, clusters, units = [], [], []
    for r in range(k):
        blocks.append(ub)
        clusters.append([f"{c}#{r}" for c in uc])
        units.append([f"{u}#{r}" for u in pop.unit_ids])
    kw = {}
    if pop.outcome is not None:
        kw["y"] = np.tile(pop.outcome, k)
    else:
        kw["y0"] = np.tile(pop.potential[:, 0], k)
        kw["y1"] = np.tile(pop.potential[:, 1], k)
    if pop.treatment is not None:
        kw["treatment"] = np.tile(pop.treatment[pop.unit_cluster], k)
    return Population.from_arrays(
        np.concatenate(blocks),
        np.concatenate(clusters),
        np.tile(pop.weights, k),
        np.tile(pop.covariates, (k, 1)),
        units=np.concatenate(units),
        covariate_names=pop.covariate_names,
        **kw,
    )


def _parse_float(text, row, column):
    try:
        return float(text)
    except (TypeError, ValueError):
        raise InputError(f"row {row}: column {column!r} is not a number: {text!r}") from None


def ingest_units(
    source,
    schema: Mapping[str, str] | None = None,
    *,
    delimiter: str = ",",
    covariates: Sequence[str] | None = None,
) -> Population:
    """Read unit records from delimited text.

    Parameters
    ----------
    source : str, path-like or text stream
        A path or an open text stream with a header row.
    schema : mapping, optional
        Overrides for :data:`DEFAULT_SCHEMA` (logical name -> column name).
    delimiter : str
        Field separator, comma by default.
    covariates : sequence of str, optional
        Covariate columns. Defaults to every ``x<k>`` column in header order.

    Row numbers in error messages count data rows from 1 (header excluded).
    """
    cols = dict(DEFAULT_SCHEMA)
    if schema:
        cols.update(schema)
    if isinstance(source, (str, bytes)) or hasattr(source, "__fspath__"):
        with open(source, newline="", encoding="utf-8") as fh:
            return ingest_units(fh, schema, delimiter=delimiter, covariates=covariates)
    text = source.read() if hasattr(source, "read") else source
    reader = csv.reader(io.StringIO(text), delimiter=delimiter)
    try:
        header = [h.strip() for h in next(reader)]
    except StopIteration:
        raise InputError("input is empty; a header row is required") from None
    pos = {name: i for i, name in enumerate(header)}

    for required in ("cluster", "weight"):
        if cols[required] not in pos:
            raise InputError(f"missing required column {cols[required]!r}")
    has_y = cols["y"] in pos
    has_sched = cols["y0"] in pos or cols["y1"] in pos
    if has_y and has_sched:
        raise InputError("mixed outcome modes: both y and y0/y1 columns present")
    if not has_y and not has_sched:
        raise InputError(f"missing outcome column: need {cols['y']!r} or {cols['y0']!r}/{cols['y1']!r}")
    if has_sched and not (cols["y0"] in pos and cols["y1"] in pos):
        raise InputError(f"schedule mode needs both {cols['y0']!r} and {cols['y1']!r}")
    if covariates is None:
        xcols = [h for h in header if _COVARIATE_RE.match(h)]
        xcols.sort(key=lambda h: int(_COVARIATE_RE.match(h).group(1)))
    else:
        xcols = list(covariates)
        missing = [c for c in xcols if c not in pos]
        if missing:
            raise InputError(f"missing covariate column {missing[0]!r}")

    blocks, clusters, units, weights, X, y, y0, y1, T = [], [], [], [], [], [], [], [], []
    has_t = cols["treatment"] in pos
    for r, rec in enumerate(reader, start=1):
        if not rec or all(not f.strip() for f in rec):
            continue
        if len(rec) != len(header):
            raise InputError(f"row {r}: expected {len(header)} fields, found {len(rec)}")
        get = lambda name: rec[pos[cols[name]]].strip()  # noqa: E731
        blocks.append(get("block") if cols["block"] in pos else "1")
        clusters.append(get("cluster"))
        units.append(get("unit") if cols["unit"] in pos else str(r))
        wt = _parse_float(get("weight"), r, cols["weight"])
        if not (wt > 0 and np.isfinite(wt)):
            raise InputError(f"row {r}: weight must be positive, got {get('weight')!r}")
        weights.append(wt)
        X.append([_parse_float(rec[pos[c]].strip(), r, c) for c in xcols])
        if has_y:
            y.append(_parse_float(get("y"), r, cols["y"]))
        else:
            y0.append(_parse_float(get("y0"), r, cols["y0"]))
            y1.append(_parse_float(get("y1"), r, cols["y1"]))
        if has_t:
            t = get("treatment")
            if t not in ("0", "1"):
                raise InputError(f"row {r}: treatment must be 0 or 1, got {t!r}")
            T.append(int(t))
    if not weights:
        raise InputError("input has a header but no data rows")
    X = np.asarray(X, dtype=float).reshape(len(weights), len(xcols))
    kw = {"y": y} if has_y else {"y0": y0, "y1": y1}
    return Population.from_arrays(
        blocks,
        clusters,
        weights,
        X,
        treatment=T if has_t else None,
        units=units,
        covariate_names=tuple(xcols),
        **kw,
    )


def observed_assignment(pop: Population):
    """The assignment recorded in the input's treatment column."""
    from .randomize import Assignment

    if pop.treatment is None:
        raise InputError(f"no treatment column ({DEFAULT_SCHEMA['treatment']!r}) in the input")
    return Assignment.from_vector(pop, pop.treatment)


__all__ = [
    "OBSERVED",
    "SCHEDULE",
    "DEFAULT_SCHEMA",
    "ClusterAggregate",
    "Population",
    "BlockSummary",
    "ingest_units",
    "aggregate_clusters",
    "block_summary",
    "cluster_outcomes",
    "unit_outcomes",
    "replicate",
    "observed_assignment",
    "without_covariates",
]


def without_covariates(pop: Population) -> Population:
    """The same population with the covariates dropped."""
    return replace(pop, covariates=_frozen(np.zeros((pop.n, 0))), covariate_names=(), _clusters=None)
