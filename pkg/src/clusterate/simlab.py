"""Monte Carlo engine for randomization-distribution studies.

Covariates follow a chained cluster/unit error model: with between-cluster
innovations ``u ~ N(0, rho/(1-rho))`` and unit innovations ``e ~ N(0, 1)``,
``x1 = u1 + e1`` and ``xk = theta x(k-1) + uk + ek`` where
``theta = r / sqrt(1 - r^2)``.

Outcomes are ``Y(0) = beta_x * sum_k x_k + c_j + eps`` and
``Y(1) = Y(0) + tau + d_j`` with cluster effects ``c_j`` (variance set by
``outcome_icc``), cluster-level effect heterogeneity ``d_j`` (sd
``effect_sd``) and unit noise ``eps`` (sd ``noise_sd``). ``effect_dist``
chooses the standardized law of ``c_j`` and ``d_j``.

Each base dataset (a "repeat") is one task with its own random streams,
so results are identical for any number of worker processes.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from ._rng import RNG_ALGORITHM, stream
from ._validation import check_positive_int, check_seed
from .collinearity import R2Sampler, icc_matrix, r2_approximations
from .estimators import schedule_estimands, schedule_gamma
from .exceptions import InputError
from .population import Population
from .randomize import Assignment, draw_matrix
from .variance import (
    confidence_interval,
    crse_variance,
    design_variance_block,
    design_variance_pooled,
    pooled_schedule_variance,
    satterthwaite_df,
    schedule_variance_block,
    VarianceReport,
)
from .wls import ModelSpec, build_design, fit_wls

POP_STREAM = 1
ASSIGN_STREAM = 2
LOGNORMAL_SIGMA = 1.0
EFFECT_DISTS = ("normal", "exponential", "lognormal")


@dataclass(frozen=True)
class SimConfig:
    """Settings of one simulation cell; see the module docstring for the DGP."""

    v: int = 2
    rho_x: float = 0.0
    r: float = 0.5
    m: int = 20
    p: float = 0.6
    n_range: tuple = (25, 75)
    draws: int = 500
    repeats: int = 10
    seed: int = 0
    h: int = 1
    weighting: str = "unit"
    tau: float = 1.0
    beta_x: float = 0.5
    outcome_icc: float = 0.2
    effect_sd: float = 0.3
    noise_sd: float = 1.0
    effect_dist: str = "normal"
    model: str = "interacted"
    variance: str = "both"
    g: float | None = None
    qstar: str = "weight"
    level: float = 0.95
    df_rule: str = "satterthwaite"

    def __post_init__(self):
        check_positive_int(self.v, "v", 0)
        check_positive_int(self.m, "m", 2)
        check_positive_int(self.h, "h", 1)
        check_positive_int(self.draws, "draws", 1)
        check_positive_int(self.repeats, "repeats", 1)
        check_seed(self.seed)
        if not 0 <= self.rho_x < 1:
            raise InputError(f"rho_x must lie in [0, 1), got {self.rho_x}")
        if not -1 < self.r < 1:
            raise InputError(f"r must lie in (-1, 1), got {self.r}")
        if not 0 < self.p < 1:
            raise InputError(f"p must lie in (0, 1), got {self.p}")
        if not 0 <= self.outcome_icc < 1:
            raise InputError(f"outcome_icc must lie in [0, 1), got {self.outcome_icc}")
        lo, hi = self.n_range
        if not 1 <= lo <= hi:
            raise InputError(f"n_range must satisfy 1 <= lo <= hi, got {self.n_range}")
        if self.weighting not in ("unit", "cluster"):
            raise InputError("weighting must be 'unit' or 'cluster'")
        if self.effect_dist not in EFFECT_DISTS:
            raise InputError(f"effect_dist must be one of {EFFECT_DISTS}")
        if self.variance not in ("design", "crse", "both"):
            raise InputError("variance must be 'design', 'crse' or 'both'")
        if self.m // self.h < 2:
            raise InputError("every block needs at least 2 clusters")
        ModelSpec.parse(self.model)

    @property
    def theta(self) -> float:
        return self.r / np.sqrt(1 - self.r**2)

    def replace(self, **changes) -> "SimConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["n_range"] = list(self.n_range)
        return d

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


_INT_FIELDS = {"v", "m", "draws", "repeats", "seed", "h"}
_STR_FIELDS = {"weighting", "effect_dist", "model", "variance", "qstar", "df_rule"}


def parse_config_value(key: str, text: str):
    names = {f.name for f in dataclasses.fields(SimConfig)}
    if key not in names:
        raise InputError(f"unknown configuration key {key!r}")
    text = text.strip()
    try:
        if key in _INT_FIELDS:
            return int(text)
        if key in _STR_FIELDS:
            return text
        if key == "n_range":
            lo, hi = (int(t) for t in text.replace(",", " ").split())
            return (lo, hi)
        if key == "g":
            return None if text.lower() in ("", "none", "default") else float(text)
        return float(text)
    except ValueError:
        raise InputError(f"bad value for {key!r}: {text!r}") from None


def load_config(path, **overrides) -> SimConfig:
    """Read ``key = value`` lines (``#`` starts a comment) into a :class:`SimConfig`."""
    values = {}
    if path is not None:
        with open(path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, start=1):
                line = line.split("#", 1)[0].strip()
                if not line:
                    continue
                if "=" not in line:
                    raise InputError(f"{path}:{lineno}: expected key = value")
                k, val = (s.strip() for s in line.split("=", 1))
                values[k] = parse_config_value(k, val)
    values.update({k: v for k, v in overrides.items() if v is not None})
    return SimConfig(**values)


def cluster_layout(cfg: SimConfig, rng: np.random.Generator):
    """Cluster sizes (uniform on ``n_range``) and block of each cluster."""
    lo, hi = cfg.n_range
    sizes = rng.integers(lo, hi + 1, size=cfg.m)
    block = np.arange(cfg.m) * cfg.h // cfg.m
    return sizes, block


def _covariates(cfg: SimConfig, sizes, rng):
    n = int(sizes.sum())
    unit_cluster = np.repeat(np.arange(cfg.m), sizes)
    su = np.sqrt(cfg.rho_x / (1 - cfg.rho_x))
    U = rng.normal(0.0, 1.0, size=(cfg.m, cfg.v)) * su
    E = rng.normal(0.0, 1.0, size=(n, cfg.v))
    X = np.empty((n, cfg.v))
    for k in range(cfg.v):
        X[:, k] = U[unit_cluster, k] + E[:, k]
        if k:
            X[:, k] += cfg.theta * X[:, k - 1]
    return X


def gen_covariates(cfg: SimConfig, seed=None, repeat: int = 0) -> np.ndarray:
    """Unit covariates of one base dataset (rows grouped by cluster)."""
    rng = stream(cfg.seed if seed is None else seed, POP_STREAM, repeat)
    sizes, _ = cluster_layout(cfg, rng)
    return _covariates(cfg, sizes, rng)


def _standard_effects(cfg, rng, size):
    if cfg.effect_dist == "normal":
        return rng.normal(size=size)
    if cfg.effect_dist == "exponential":
        return rng.exponential(size=size) - 1.0
    s2 = LOGNORMAL_SIGMA**2
    z = rng.lognormal(0.0, LOGNORMAL_SIGMA, size=size)
    return (z - np.exp(s2 / 2)) / np.sqrt((np.exp(s2) - 1) * np.exp(s2))


def gen_population(cfg: SimConfig, seed=None, repeat: int = 0) -> Population:
    """Base dataset with both potential outcomes, drawn from stream ``(seed, repeat)``."""
    rng = stream(cfg.seed if seed is None else seed, POP_STREAM, repeat)
    sizes, block = cluster_layout(cfg, rng)
    X = _covariates(cfg, sizes, rng)
    n = X.shape[0]
    unit_cluster = np.repeat(np.arange(cfg.m), sizes)
    c_sd = cfg.noise_sd * np.sqrt(cfg.outcome_icc / (1 - cfg.outcome_icc))
    c = c_sd * _standard_effects(cfg, rng, cfg.m)
    d = cfg.effect_sd * _standard_effects(cfg, rng, cfg.m)
    eps = cfg.noise_sd * rng.normal(size=n)
    y0 = cfg.beta_x * X.sum(axis=1) + c[unit_cluster] + eps
    y1 = y0 + cfg.tau + d[unit_cluster]
    w = np.ones(n) if cfg.weighting == "unit" else 1.0 / sizes[unit_cluster]
    return Population.from_arrays(block[unit_cluster], unit_cluster, w, X, y0=y0, y1=y1)


def population_digest(pop: Population) -> str:
    """SHA-256 over the numeric content of a population."""
    h = hashlib.sha256()
    for a in (pop.unit_cluster, pop.cluster_block, pop.weights, pop.covariates, pop.potential):
        h.update(np.ascontiguousarray(a).tobytes())
    return h.hexdigest()


class _SingleBlockEngine:
    """Vectorized estimates and variances for one block, per-block models.

    Works from per-cluster weighted moments of the block-centered
    covariates, so each assignment costs O(m v^2) instead of a unit-level
    regression.
    """

    def __init__(self, pop: Population, v: int):
        agg = pop.clusters
        j = pop.unit_cluster
        m = pop.m
        w = pop.weights
        xbb = np.average(pop.covariates[:, :v], axis=0, weights=w) if v else np.zeros(0)
        Xt = pop.covariates[:, :v] - xbb
        self.v, self.m = v, m
        self.w = np.asarray(agg.weight)
        self.ys = np.stack([self.w * agg.ybar0, self.w * agg.ybar1])
        self.xs = np.stack([np.bincount(j, w * Xt[:, k], m) for k in range(v)], axis=1).reshape(m, v)
        self.Mxx = np.zeros((m, v, v))
        self.xy = np.zeros((2, m, v))
        for a in range(v):
            self.xy[0, :, a] = np.bincount(j, w * Xt[:, a] * pop.potential[:, 0], m)
            self.xy[1, :, a] = np.bincount(j, w * Xt[:, a] * pop.potential[:, 1], m)
            for b in range(a, v):
                self.Mxx[:, a, b] = self.Mxx[:, b, a] = np.bincount(j, w * Xt[:, a] * Xt[:, b], m)
        self.Mtot = self.Mxx.sum(axis=0)

    def run(self, T, g, want_crse):
        T = T.astype(float)
        C = 1.0 - T
        v = self.v
        w1, w0 = T @ self.w, C @ self.w
        Y1, Y0 = T @ self.ys[1], C @ self.ys[0]
        ysobs = T * self.ys[1] + C * self.ys[0]
        X1, X0 = T @ self.xs, C @ self.xs
        XY = T @ self.xy[1] + C @ self.xy[0]
        if v:
            A = self.Mtot - X1[:, :, None] * X1[:, None, :] / w1[:, None, None] - X0[:, :, None] * X0[:, None, :] / w0[:, None, None]
            rhs = XY - X1 * (Y1 / w1)[:, None] - X0 * (Y0 / w0)[:, None]
            gam = np.linalg.solve(A, rhs[:, :, None])[:, :, 0]
        else:
            gam = np.zeros((T.shape[0], 0))
        a1 = (Y1 - np.einsum("kv,kv->k", X1, gam)) / w1
        a0 = (Y0 - np.einsum("kv,kv->k", X0, gam)) / w0
        beta = a1 - a0
        aT = T * a1[:, None] + C * a0[:, None]
        E = ysobs - aT * self.w - gam @ self.xs.T
        m1, m0 = T.sum(axis=1), C.sum(axis=1)
        ps = w1 / (w1 + w0)
        df1 = m1 - v * ps - 1
        df0 = m0 - v * (1 - ps) - 1
        t1 = m1 / df1 * (T * E**2).sum(axis=1) / w1**2
        t0 = m0 / df0 * (C * E**2).sum(axis=1) / w0**2
        out = {"beta": beta, "design": t1 + t0, "design_df": np.array([satterthwaite_df([a, b], [c, d]) for a, b, c, d in zip(t1, t0, df1, df0)])}
        if want_crse:
            k = 2 + v
            K = T.shape[0]
            G = np.zeros((K, k, k))
            G[:, 0, 0], G[:, 1, 1] = w1, w0
            G[:, 0, 2:], G[:, 1, 2:] = X1, X0
            G[:, 2:, 0], G[:, 2:, 1] = X1, X0
            G[:, 2:, 2:] = self.Mtot
            xyobs = T[:, :, None] * self.xy[1][None] + C[:, :, None] * self.xy[0][None]
            r = xyobs - aT[:, :, None] * self.xs[None] - np.einsum("jab,kb->kja", self.Mxx, gam)
            S = np.concatenate([(T * E)[:, :, None], (C * E)[:, :, None], r], axis=2)
            meat = np.einsum("kja,kjb->kab", S, S)
            c = np.zeros(k)
            c[0], c[1] = 1.0, -1.0
            u = np.linalg.solve(G, np.broadcast_to(c, (K, k))[:, :, None])[:, :, 0]
            gcorr = self.m / (self.m - 1) if g is None else g
            out["crse"] = gcorr * np.einsum("ka,kab,kb->k", u, meat, u)
        return out


def _slow_draws(cfg, pop, T, model, want_crse):
    beta, dvar, ddf, cvar = [], [], [], []
    for row in T:
        asg = Assignment.from_vector(pop, row)
        fit = fit_wls(build_design(pop, asg, model))
        if model is ModelSpec.POOLED:
            label = "tau"
            dv = design_variance_pooled(pop, asg, fit, cfg.df_rule)
        else:
            label = fit.labels[0]
            dv = design_variance_block(pop, asg, fit, 0, cfg.qstar, cfg.df_rule)
        beta.append(fit[label])
        dvar.append(dv.value)
        ddf.append(dv.df)
        if want_crse:
            cvar.append(crse_variance(fit, cfg.g)[label].value)
    out = {"beta": np.array(beta), "design": np.array(dvar), "design_df": np.array(ddf)}
    if want_crse:
        out["crse"] = np.array(cvar)
    return out


def simulate_repeat(cfg: SimConfig, repeat: int, fast: bool = True) -> dict:
    """All draws for one base dataset; returns per-draw arrays and dataset facts."""
    pop = gen_population(cfg, repeat=repeat)
    model = ModelSpec.parse(cfg.model)
    T = draw_matrix(pop, cfg.p, stream(cfg.seed, ASSIGN_STREAM, repeat), cfg.draws)
    want_crse = cfg.variance in ("crse", "both")
    v_model = 0 if model is ModelSpec.NO_COVARIATES else pop.v
    if fast and pop.h == 1 and model in (ModelSpec.NO_COVARIATES, ModelSpec.FULL_INTERACTED, ModelSpec.BLOCK_COVARIATE):
        res = _SingleBlockEngine(pop, v_model).run(T, cfg.g, want_crse)
    else:
        res = _slow_draws(cfg, pop, T, model, want_crse)
    est = schedule_estimands(pop, cfg.p)
    if model is ModelSpec.POOLED:
        res["target"] = est.pooled
        gam = schedule_gamma(pop, cfg.p, model) if v_model else None
        res["sched_var"] = pooled_schedule_variance(pop, cfg.p, gam)
    else:
        res["target"] = float(est.block[0])
        gam = schedule_gamma(pop, cfg.p, model) if v_model else None
        res["sched_var"] = schedule_variance_block(pop, 0, cfg.p, gam)
    if pop.v:
        icc = icc_matrix(pop)
        res["r2_tx"], res["r2_txb"] = R2Sampler(pop)(T)
        res["icc_trace"] = icc.trace
    res["n"] = pop.n
    res["digest"] = population_digest(pop)
    return res


def _task(args):
    cfg, repeat, fast = args
    return simulate_repeat(cfg, repeat, fast)


def run_repeats(cfg: SimConfig, workers: int = 1, fast: bool = True) -> list:
    tasks = [(cfg, r, fast) for r in range(cfg.repeats)]
    if workers and workers > 1 and cfg.repeats > 1:
        with ProcessPoolExecutor(max_workers=min(workers, cfg.repeats)) as ex:
            return list(ex.map(_task, tasks))
    return [_task(t) for t in tasks]


@dataclass(frozen=True)
class SimSummary:
    """Aggregated Monte Carlo results of one configuration.

    Means run over all repeats and draws with equal weight. ``emp_sd`` is
    the root mean within-repeat variance of the estimates; ``ks`` compares
    the estimation errors, standardized by each dataset's schedule
    variance, with N(0, 1).
    """

    config: SimConfig
    rng: str
    draws_total: int
    mean_target: float
    mean_bias: float
    emp_sd: float
    mean_se: dict
    se_ratio: dict
    coverage: dict
    ks: float
    mean_r2_tx: float | None = None
    mean_r2_txb: float | None = None
    approx_r2_tx: float | None = None
    approx_r2_txb: float | None = None
    n_star: float | None = None
    dataset_digests: tuple = field(default=(), repr=False)

    def rows(self) -> list:
        out = [
            ("draws_total", self.draws_total),
            ("mean_target", self.mean_target),
            ("mean_bias", self.mean_bias),
            ("emp_sd", self.emp_sd),
        ]
        for k in sorted(self.mean_se):
            out += [(f"mean_se_{k}", self.mean_se[k]), (f"se_ratio_{k}", self.se_ratio[k]), (f"coverage_{k}", self.coverage[k])]
        out.append(("ks", self.ks))
        if self.mean_r2_tx is not None:
            out += [
                ("mean_r2_tx", self.mean_r2_tx),
                ("mean_r2_txb", self.mean_r2_txb),
                ("approx_r2_tx", self.approx_r2_tx),
                ("approx_r2_txb", self.approx_r2_txb),
                ("n_star", self.n_star),
            ]
        return out


def summarize(cfg: SimConfig, results: list) -> SimSummary:
    err = np.concatenate([r["beta"] - r["target"] for r in results])
    z = np.concatenate([(r["beta"] - r["target"]) / np.sqrt(r["sched_var"]) for r in results])
    within_var = np.mean([np.var(r["beta"], ddof=1) if r["beta"].size > 1 else 0.0 for r in results])
    emp_sd = float(np.sqrt(within_var))
    methods = {"design": "design"} if cfg.variance == "design" else {"crse": "crse"} if cfg.variance == "crse" else {"design": "design", "crse": "crse"}
    mean_se, se_ratio, coverage = {}, {}, {}
    G = cfg.m
    for name in methods:
        covered, ses = [], []
        for r in results:
            var = r[name]
            df = r["design_df"] if name == "design" else np.full(var.shape, G - 1.0)
            for b, vv, d in zip(r["beta"], var, df):
                lo, hi = confidence_interval(b, VarianceReport(name, float(max(vv, 0.0)), float(d)), cfg.level)
                covered.append(lo <= r["target"] <= hi)
            ses.append(np.sqrt(np.maximum(var, 0.0)))
        mean_se[name] = float(np.mean(np.concatenate(ses)))
        se_ratio[name] = mean_se[name] / emp_sd if emp_sd > 0 else float("nan")
        coverage[name] = float(np.mean(covered))
    kw = {}
    if "r2_tx" in results[0]:
        ap = [r2_approximations(cfg.v, cfg.m, r["n"], r["icc_trace"]) for r in results]
        kw = dict(
            mean_r2_tx=float(np.mean(np.concatenate([r["r2_tx"] for r in results]))),
            mean_r2_txb=float(np.mean(np.concatenate([r["r2_txb"] for r in results]))),
            approx_r2_tx=float(np.mean([a.tx for a in ap])),
            approx_r2_txb=float(np.mean([a.txb for a in ap])),
            n_star=float(np.mean([a.n_star for a in ap])),
        )
    return SimSummary(
        config=cfg,
        rng=RNG_ALGORITHM,
        draws_total=int(err.size),
        mean_target=float(np.mean([r["target"] for r in results])),
        mean_bias=float(np.mean(err)),
        emp_sd=emp_sd,
        mean_se=mean_se,
        se_ratio=se_ratio,
        coverage=coverage,
        ks=float(stats.kstest(z, "norm").statistic),
        dataset_digests=tuple(r["digest"] for r in results),
        **kw,
    )


def run_study(cfg: SimConfig, workers: int = 1, fast: bool = True) -> SimSummary:
    """Run ``repeats`` base datasets with ``draws`` assignments each and summarize."""
    return summarize(cfg, run_repeats(cfg, workers, fast))


@dataclass(frozen=True)
class R2Cell:
    v: int
    rho_x: float
    m: int
    mean_r2_tx: float
    mean_r2_txb: float
    approx_r2_tx: float
    approx_r2_txb: float
    n_star: float
    min_gap: float

    def as_record(self) -> dict:
        return dataclasses.asdict(self)


def _r2_repeat(args):
    cfg, repeat = args
    rng = stream(cfg.seed, POP_STREAM, repeat)
    sizes, block = cluster_layout(cfg, rng)
    X = _covariates(cfg, sizes, rng)
    uc = np.repeat(np.arange(cfg.m), sizes)
    w = np.ones(X.shape[0]) if cfg.weighting == "unit" else 1.0 / sizes[uc]
    pop = Population.from_arrays(block[uc], uc, w, X, y=np.zeros(X.shape[0]))
    T = draw_matrix(pop, cfg.p, stream(cfg.seed, ASSIGN_STREAM, repeat), cfg.draws)
    tx, txb = R2Sampler(pop)(T)
    return tx, txb, icc_matrix(pop).trace, pop.n


def r2_cell(cfg: SimConfig, workers: int = 1) -> R2Cell:
    """Mean R^2 pair over ``repeats`` covariate datasets x ``draws`` allocations."""
    if cfg.v < 1:
        raise InputError("R^2 studies need v >= 1")
    tasks = [(cfg, r) for r in range(cfg.repeats)]
    if workers and workers > 1 and cfg.repeats > 1:
        with ProcessPoolExecutor(max_workers=min(workers, cfg.repeats)) as ex:
            res = list(ex.map(_r2_repeat, tasks))
    else:
        res = [_r2_repeat(t) for t in tasks]
    tx = np.concatenate([r[0] for r in res])
    txb = np.concatenate([r[1] for r in res])
    ap = [r2_approximations(cfg.v, cfg.m, r[3], r[2]) for r in res]
    return R2Cell(
        v=cfg.v,
        rho_x=cfg.rho_x,
        m=cfg.m,
        mean_r2_tx=float(tx.mean()),
        mean_r2_txb=float(txb.mean()),
        approx_r2_tx=float(np.mean([a.tx for a in ap])),
        approx_r2_txb=float(np.mean([a.txb for a in ap])),
        n_star=float(np.mean([a.n_star for a in ap])),
        min_gap=float(np.min(txb - tx)),
    )


def r2_grid_study(vs=(2, 5, 10), rhos=(0.0, 0.4, 0.8), ms=(20, 40, 60), base: SimConfig | None = None, workers: int = 1) -> list:
    """R^2 cells over a grid of covariate counts, covariate ICCs and cluster counts."""
    base = SimConfig() if base is None else base
    if not (vs and rhos and ms):
        raise InputError("the grid must be non-empty")
    return [r2_cell(base.replace(v=v, rho_x=rho, m=m), workers) for v in vs for rho in rhos for m in ms]
