"""Exact moments over the full randomization distribution.

Assignments are enumerated in fixed-size chunks with fixed boundaries.
Each chunk is summed with :func:`math.fsum` and the chunk sums are
combined with ``fsum`` in chunk order, so the result does not depend on
the number of worker processes.
"""

from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import numpy as np

from .exceptions import InputError
from .population import Population
from .randomize import DEFAULT_CAP, AssignmentSpace
from .estimators import schedule_estimands

BLOCK_STATISTICS = ("block_ate", "treated_weight_mean", "treated_mean", "control_mean")
STATISTICS = BLOCK_STATISTICS + ("pooled_ate",)
CHUNK = 65536


def _adjusted(pop, gamma):
    agg = pop.clusters
    if gamma is None or pop.v == 0:
        return agg.ybar1, agg.ybar0
    g = np.asarray(gamma, dtype=float)
    if g.ndim == 2:
        adj = np.einsum("jv,jv->j", agg.xbar, g[pop.cluster_block])
    else:
        adj = agg.xbar @ g
    return agg.ybar1 - adj, agg.ybar0 - adj


def _arm_stats(pop, T, block, gamma):
    """Per-row treated/control ratio means and mean weights of one block."""
    sl = pop.block_slice(block)
    t = T[:, sl].astype(float)
    w = pop.clusters.weight[sl]
    y1, y0 = _adjusted(pop, gamma)
    w1 = t @ w
    w0 = (1 - t) @ w
    m1 = t.sum(axis=1)
    return {
        "ybar1": (t @ (w * y1[sl])) / w1,
        "ybar0": ((1 - t) @ (w * y0[sl])) / w0,
        "wbar1": w1 / m1,
        "wbar0": w0 / (w.shape[0] - m1),
        "w1": w1,
        "w0": w0,
    }


def evaluate(pop: Population, T: np.ndarray, statistic, block=None, gamma=None) -> np.ndarray:
    """Statistic values for each assignment row of ``T`` (shape (K, m))."""
    if callable(statistic):
        return np.asarray(statistic(pop, T), dtype=float)
    if statistic == "pooled_ate":
        num = den = 0.0
        for b in range(pop.h):
            s = _arm_stats(pop, T, b, gamma)
            prec = s["w1"] * s["w0"] / (s["w1"] + s["w0"])
            num = num + prec * (s["ybar1"] - s["ybar0"])
            den = den + prec
        return num / den
    s = _arm_stats(pop, T, block, gamma)
    if statistic == "block_ate":
        return s["ybar1"] - s["ybar0"]
    if statistic == "treated_weight_mean":
        return s["wbar1"]
    if statistic == "treated_mean":
        return s["ybar1"]
    if statistic == "control_mean":
        return s["ybar0"]
    raise InputError(f"unknown statistic {statistic!r}; choose one of {', '.join(STATISTICS)}")


def _chunk_sum(args):
    pop, p, blocks, cap, statistic, block, gamma, start, stop, power, center = args
    space = AssignmentSpace(pop, p, cap, blocks)
    vals = evaluate(pop, space.chunk(start, stop), statistic, block, gamma)
    if center is not None:
        vals = vals - center
    return math.fsum(vals**power)


def _space_blocks(pop, statistic, block):
    if callable(statistic) or statistic == "pooled_ate":
        return None
    if block is None:
        if pop.h == 1:
            return [0]
        raise InputError(f"statistic {statistic!r} needs a block index")
    if not 0 <= block < pop.h:
        raise InputError(f"block index {block} out of range")
    return [block]


def _moment(pop, statistic, p, block, gamma, cap, chunk_size, workers, power=1, center=None):
    blocks = _space_blocks(pop, statistic, block)
    if block is None and blocks:
        block = blocks[0]
    space = AssignmentSpace(pop, p, cap, blocks)
    tasks = [
        (pop, p, blocks, cap, statistic, block, gamma, s, min(s + chunk_size, space.size), power, center)
        for s in range(0, space.size, chunk_size)
    ]
    if workers and workers > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            parts = list(ex.map(_chunk_sum, tasks))
    else:
        parts = [_chunk_sum(t) for t in tasks]
    return math.fsum(parts) / space.size, space.size


def exact_expectation(
    pop: Population,
    statistic="block_ate",
    p=0.5,
    *,
    block=None,
    gamma=None,
    cap=DEFAULT_CAP,
    chunk_size=CHUNK,
    workers=1,
) -> float:
    """Average of ``statistic`` over every blocked assignment.

    Parameters
    ----------
    statistic : str or callable
        One of ``block_ate``, ``pooled_ate``, ``treated_weight_mean``,
        ``treated_mean``, ``control_mean``, or ``f(pop, T) -> values``
        evaluated on an int8 array of assignments (one row each).
    block : int, optional
        Block index for per-block statistics. Only that block's
        assignments are enumerated since the others do not affect it.
    gamma : array-like, optional
        Fixed covariate coefficients subtracted from the outcomes.
    """
    pop.require_schedule("exact expectations")
    return _moment(pop, statistic, p, block, gamma, cap, chunk_size, workers)[0]


def exact_variance(pop: Population, statistic="block_ate", p=0.5, **kw) -> float:
    """Exact randomization variance of ``statistic`` (two-pass, centered)."""
    pop.require_schedule("exact variances")
    args = (kw.get("block"), kw.get("gamma"), kw.get("cap", DEFAULT_CAP), kw.get("chunk_size", CHUNK), kw.get("workers", 1))
    mean = _moment(pop, statistic, p, *args)[0]
    return _moment(pop, statistic, p, *args, power=2, center=mean)[0]


@dataclass(frozen=True)
class HartleyBias:
    """Exact ratio bias of one block's contrast split by arm.

    ``treated = -cov_treated / wbar`` and ``control = cov_control / wbar``,
    where the covariances pair each arm's ratio mean with the arm's mean
    cluster weight over the randomization distribution.
    """

    treated: float
    control: float
    total: float
    cov_treated: float
    cov_control: float
    assignments: int


def hartley_bias(pop: Population, block=0, p=0.5, *, gamma=None, cap=DEFAULT_CAP, chunk_size=CHUNK) -> HartleyBias:
    """Exact bias ``E[estimate] - target`` of a block contrast via covariances."""
    pop.require_schedule("the ratio bias")
    space = AssignmentSpace(pop, p, cap, [block])
    sums = {k: [] for k in ("ybar1", "ybar0", "wbar1", "wbar0")}
    for T in space.chunks(chunk_size):
        s = _arm_stats(pop, T, block, gamma)
        for k in sums:
            sums[k].append(math.fsum(s[k]))
    mean = {k: math.fsum(v) / space.size for k, v in sums.items()}
    c1, c0 = [], []
    for T in space.chunks(chunk_size):
        s = _arm_stats(pop, T, block, gamma)
        c1.append(math.fsum((s["ybar1"] - mean["ybar1"]) * (s["wbar1"] - mean["wbar1"])))
        c0.append(math.fsum((s["ybar0"] - mean["ybar0"]) * (s["wbar0"] - mean["wbar0"])))
    cov1 = math.fsum(c1) / space.size
    cov0 = math.fsum(c0) / space.size
    sl = pop.block_slice(block)
    wbar = float(pop.clusters.weight[sl].mean())
    t, c = -cov1 / wbar, cov0 / wbar
    return HartleyBias(t, c, t + c, cov1, cov0, space.size)


def exact_bias(pop: Population, block=0, p=0.5, **kw) -> float:
    """``E[block contrast] - block target`` by direct enumeration."""
    est = schedule_estimands(pop, p)
    return exact_expectation(pop, "block_ate", p, block=block, **kw) - float(est.block[block])
