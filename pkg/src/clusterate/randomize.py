"""Blocked complete randomization of clusters and exhaustive enumeration."""

from __future__ import annotations

import csv
import hashlib
import io
import itertools
import math
from dataclasses import dataclass

import numpy as np

from ._rng import stream
from ._validation import check_proportions
from .exceptions import DesignError, EnumerationCapError, InputError

DEFAULT_CAP = 10**7


@dataclass(frozen=True, eq=False)
class Assignment:
    """Cluster-level treatment indicators for one blocked randomization.

    Attributes
    ----------
    treatment : ndarray of int8, shape (m,)
        1 for treated clusters, in the population's cluster order.
    cluster_block : ndarray of int, shape (m,)
    block_ids, cluster_ids : tuple of str
    """

    treatment: np.ndarray
    cluster_block: np.ndarray
    block_ids: tuple
    cluster_ids: tuple

    @classmethod
    def from_vector(cls, pop, treatment) -> "Assignment":
        T = np.asarray(treatment)
        if T.shape != (pop.m,) or not np.all((T == 0) | (T == 1)):
            raise InputError(f"treatment must be a 0/1 vector of length {pop.m}")
        T = T.astype(np.int8)
        T.setflags(write=False)
        m1 = np.bincount(pop.cluster_block, weights=T, minlength=pop.h)
        m_b = pop.clusters_per_block
        bad = np.flatnonzero((m1 == 0) | (m1 == m_b))
        if bad.size:
            b = bad[0]
            arm = "treated" if m1[b] == 0 else "control"
            raise DesignError(f"block {pop.block_ids[b]!r} has no {arm} clusters")
        return cls(T, pop.cluster_block, pop.block_ids, pop.cluster_ids)

    @property
    def treated_counts(self) -> np.ndarray:
        return np.bincount(self.cluster_block, weights=self.treatment, minlength=len(self.block_ids)).astype(int)

    def bitstring(self) -> str:
        return "".join("1" if t else "0" for t in self.treatment)

    def to_csv(self) -> str:
        """Audit table with columns ``block, cluster, T``."""
        buf = io.StringIO()
        wr = csv.writer(buf, lineterminator="\n")
        wr.writerow(["block", "cluster", "T"])
        for b, c, t in zip(self.cluster_block, self.cluster_ids, self.treatment):
            wr.writerow([self.block_ids[b], c, int(t)])
        return buf.getvalue()


def treated_counts(pop, p) -> np.ndarray:
    """Treated clusters per block, ``round(p_b * m_b)`` with ties to even.

    Raises
    ------
    DesignError
        If a block would get no treated or no control cluster.
    """
    p = check_proportions(p, pop.h)
    m_b = pop.clusters_per_block
    m1 = np.array([round(float(pb * mb)) for pb, mb in zip(p, m_b)], dtype=int)
    bad = np.flatnonzero((m1 < 1) | (m1 > m_b - 1))
    if bad.size:
        b = bad[0]
        raise DesignError(
            f"block {pop.block_ids[b]!r}: round({p[b]} * {m_b[b]}) = {m1[b]} treated clusters "
            f"is infeasible (need 1..{m_b[b] - 1})"
        )
    return m1


def realized_proportions(pop, p) -> np.ndarray:
    """Treated fraction per block actually achieved after rounding."""
    return treated_counts(pop, p) / pop.clusters_per_block


def draw_matrix(pop, p, rng: np.random.Generator, size: int) -> np.ndarray:
    """``size`` independent blocked assignments as an int8 array (size, m)."""
    m1 = treated_counts(pop, p)
    out = np.zeros((size, pop.m), dtype=np.int8)
    u = rng.random((size, pop.m))
    for b in range(pop.h):
        sl = pop.block_slice(b)
        ranks = np.argsort(np.argsort(u[:, sl], axis=1), axis=1)
        out[:, sl] = ranks < m1[b]
    return out


def draw_assignment(pop, p, seed, key=()) -> Assignment:
    """One blocked complete randomization.

    Each block independently treats a uniformly random subset of
    ``round(p_b * m_b)`` clusters. The result depends only on
    ``(seed, key)``.
    """
    rng = stream(seed, *key)
    return Assignment.from_vector(pop, draw_matrix(pop, p, rng, 1)[0])


def _block_combinations(m_b: int, m1: int) -> np.ndarray:
    combos = np.zeros((math.comb(m_b, m1), m_b), dtype=np.int8)
    for r, c in enumerate(itertools.combinations(range(m_b), m1)):
        combos[r, list(c)] = 1
    return combos


def count_assignments(pop, p, blocks=None) -> int:
    m1 = treated_counts(pop, p)
    m_b = pop.clusters_per_block
    blocks = range(pop.h) if blocks is None else blocks
    return math.prod(math.comb(int(m_b[b]), int(m1[b])) for b in blocks)


class AssignmentSpace:
    """All blocked assignments, indexable in a fixed lexicographic order.

    Within a block, treated index tuples run in lexicographic order;
    across blocks, the first block varies slowest. Restricting to
    ``blocks`` enumerates those blocks only, holding every other block
    at its first combination.
    """

    def __init__(self, pop, p, cap: int = DEFAULT_CAP, blocks=None):
        self.pop = pop
        self.m1 = treated_counts(pop, p)
        self.blocks = list(range(pop.h)) if blocks is None else [int(b) for b in blocks]
        self.size = count_assignments(pop, p, self.blocks)
        if self.size > cap:
            raise EnumerationCapError(
                f"enumeration needs {self.size} assignments, above the cap of {cap}", self.size
            )
        m_b = pop.clusters_per_block
        self._combos = [_block_combinations(int(m_b[b]), int(self.m1[b])) for b in range(pop.h)]
        self._slices = [pop.block_slice(b) for b in range(pop.h)]
        self._radix = [len(self._combos[b]) for b in self.blocks]

    def __len__(self):
        return self.size

    def chunk(self, start: int, stop: int) -> np.ndarray:
        """Assignments ``start..stop-1`` as an int8 array (k, m)."""
        k = np.arange(start, stop, dtype=np.int64)
        out = np.empty((k.size, self.pop.m), dtype=np.int8)
        for b in range(self.pop.h):
            out[:, self._slices[b]] = self._combos[b][0]
        for b, r in zip(reversed(self.blocks), reversed(self._radix)):
            out[:, self._slices[b]] = self._combos[b][k % r]
            k //= r
        return out

    def chunks(self, chunk_size: int = 65536):
        for start in range(0, self.size, chunk_size):
            yield self.chunk(start, min(start + chunk_size, self.size))


def enumerate_assignments(pop, p, cap: int = DEFAULT_CAP):
    """Yield every blocked assignment exactly once, in lexicographic order.

    Raises
    ------
    EnumerationCapError
        If the number of assignments exceeds ``cap``; the exact count is
        attached as ``.count``.
    """
    space = AssignmentSpace(pop, p, cap)
    for rows in space.chunks():
        for row in rows:
            yield Assignment.from_vector(pop, row)


def stream_digest(pop, p, cap: int = DEFAULT_CAP) -> str:
    """SHA-256 of the concatenated bitstrings of the enumeration stream."""
    h = hashlib.sha256()
    for rows in AssignmentSpace(pop, p, cap).chunks():
        for row in rows:
            h.update(("".join("1" if t else "0" for t in row) + "\n").encode())
    return h.hexdigest()
