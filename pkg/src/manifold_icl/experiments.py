"""Experiment harness: exact-equivalence checks and log-log rate fits.

Each ``run_*`` function takes an :class:`ExperimentConfig` and returns an
:class:`ExperimentReport`.  Random streams are derived from
``(seed, purpose, task, grid index)`` so results do not depend on evaluation
order.  Tasks share their test function across grid points (common random
numbers), which keeps fitted slopes stable at modest task counts.
"""

from __future__ import annotations

import csv
import dataclasses
import io
import json
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np
from scipy import stats

from .construction import (
    build_kernel_transformer,
    certify_spec,
    debug_forward,
    dump_stages,
    kernel_constants,
)
from .kernel_estimator import (
    bandwidth_for,
    integral_estimate_mc_many,
    nw_estimate,
    nw_estimate_many,
)
from .manifold_data import (
    DomainError,
    Manifold,
    ParameterError,
    Prompt,
    embed_ambient,
    make_embedding,
    make_holder_function,
    sample_uniform,
)
from .transformer_core import forward_batch, spec_to_json

SCHEMA_VERSION = 1
EQUIVALENCE_TOL = 1e-9
AMBIENT_RATIO_MAX = 1.2
FRAME_TOL = 1e-10

# stream purposes
_F, _X, _Q, _MC, _EMB, _EMB2 = range(1, 7)


def _rng(seed, *path):
    return np.random.default_rng([int(seed), *[int(p) for p in path]])


@dataclass(frozen=True)
class ExperimentConfig:
    manifold: str = "circle"
    radius: float = 1.0
    ambient_dim: int = 10
    alpha: float = 1.0
    L: float = 1.0
    R: float = 1.0
    num_anchors: int = 256
    n_grid: tuple = (16, 32, 64, 128, 256, 512, 1024, 2048)
    h_grid: tuple = (0.05, 0.1, 0.2, 0.4)
    ambient_grid: tuple = (3, 10, 30, 100)
    fixed_n: int = 256
    fixed_h: float = 0.2
    tasks_per_point: int = 64
    queries_per_task: int = 16
    mc_samples: int = 100_000
    seed: int = 0
    safety_factor: float = 2.0
    estimator: str = "nw"
    bias_queries: str = "anchors"
    out: str | None = None

    def __post_init__(self):
        for name in ("n_grid", "h_grid", "ambient_grid"):
            g = tuple(self._num(v) for v in getattr(self, name))
            if any(b <= a for a, b in zip(g, g[1:])):
                raise ParameterError(f"{name} must be strictly increasing, got {g}")
            if any(v <= 0 for v in g):
                raise ParameterError(f"{name} entries must be positive")
            object.__setattr__(self, name, g)
        if self.tasks_per_point < 8:
            raise ParameterError("tasks_per_point must be at least 8")
        for name in ("radius", "alpha", "L", "R", "num_anchors", "fixed_n", "fixed_h",
                     "queries_per_task", "mc_samples", "safety_factor", "ambient_dim"):
            if not getattr(self, name) > 0:
                raise ParameterError(f"{name} must be positive")
        if not self.alpha <= 1:
            raise ParameterError("alpha must lie in (0, 1]")
        if self.estimator not in ("nw", "transformer"):
            raise ParameterError("estimator must be 'nw' or 'transformer'")
        if self.bias_queries not in ("anchors", "uniform"):
            raise ParameterError("bias_queries must be 'anchors' or 'uniform'")
        Manifold.from_name(self.manifold, self.radius)

    @staticmethod
    def _num(v):
        return int(v) if float(v).is_integer() and not isinstance(v, float) else float(v)

    @property
    def manifold_obj(self) -> Manifold:
        return Manifold.from_name(self.manifold, self.radius)

    def replace(self, **kw) -> "ExperimentConfig":
        return dataclasses.replace(self, **kw)

    @classmethod
    def field_names(cls) -> set:
        return {f.name for f in dataclasses.fields(cls)}


# per-experiment defaults that differ from the dataclass defaults
DEFAULTS = {
    "equivalence": dict(n_grid=(4, 16, 64, 256), tasks_per_point=16, ambient_dim=10),
    "rate": dict(),
    "bias": dict(num_anchors=1, R=100.0),
    "variance": dict(n_grid=(32, 64, 128, 256, 512, 1024, 2048, 4096)),
    "ambient": dict(),
}


def default_config(kind: str, **overrides) -> ExperimentConfig:
    base = dict(DEFAULTS[kind])
    base.update(overrides)
    return ExperimentConfig(**base)


class SlopeFit(NamedTuple):
    slope: float
    intercept: float
    halfwidth: float


def fit_loglog_slope(points) -> SlopeFit:
    """Least squares on (log x, log y) with a 95% t-interval half-width."""
    pts = np.asarray(list(points), dtype=float)
    if pts.ndim != 2 or pts.shape[0] < 4 or pts.shape[1] != 2:
        raise ParameterError("need at least 4 (x, y) points")
    if np.any(pts <= 0) or not np.all(np.isfinite(pts)):
        raise DomainError("log-log fit needs positive finite values")
    lx, ly = np.log(pts[:, 0]), np.log(pts[:, 1])
    res = stats.linregress(lx, ly)
    m = pts.shape[0]
    half = float(stats.t.ppf(0.975, m - 2) * res.stderr)
    return SlopeFit(float(res.slope), float(res.intercept), half)


@dataclass
class ExperimentReport:
    name: str
    columns: list
    rows: list
    fit: SlopeFit | None = None
    band: tuple | None = None
    passed: bool = False
    summary: dict = field(default_factory=dict)
    config: ExperimentConfig | None = None
    wall_time: float = 0.0

    def column(self, name) -> np.ndarray:
        return np.array([r[name] for r in self.rows], dtype=float)

    def csv_text(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.columns)
        for r in self.rows:
            w.writerow([repr(float(r[c])) if isinstance(r[c], float) else r[c] for c in self.columns])
        return buf.getvalue()

    def to_dict(self) -> dict:
        doc = {
            "schema_version": SCHEMA_VERSION,
            "experiment": self.name,
            "config": dataclasses.asdict(self.config) if self.config else None,
            "columns": list(self.columns),
            "rows": self.rows,
            "passed": bool(self.passed),
            "summary": self.summary,
            "wall_time_s": self.wall_time,
        }
        if self.fit is not None:
            doc["fit"] = {"slope": self.fit.slope, "intercept": self.fit.intercept, "halfwidth_95": self.fit.halfwidth}
        if self.band is not None:
            doc["band"] = list(self.band)
        return doc

    def write(self, out_dir) -> tuple[Path, Path]:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        c = out / f"{self.name}.csv"
        j = out / f"{self.name}.json"
        c.write_text(self.csv_text())
        j.write_text(json.dumps(self.to_dict(), indent=2, default=_jsonable))
        return c, j


def _jsonable(o):
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    if isinstance(o, (tuple, set)):
        return list(o)
    raise TypeError(type(o).__name__)


def _stderr(per_task: np.ndarray) -> float:
    return float(np.std(per_task, ddof=1) / math.sqrt(per_task.size))


def _finish(report: ExperimentReport, t0: float) -> ExperimentReport:
    report.wall_time = time.perf_counter() - t0
    return report


def _task_function(cfg, man, g):
    return make_holder_function(man, cfg.L, cfg.alpha, cfg.R, cfg.num_anchors, _rng(cfg.seed, _F, g))


# ---------------------------------------------------------------------------


def run_equivalence_suite(cfg: ExperimentConfig, dump_dir=None) -> ExperimentReport:
    """Build the kernel network per n and compare it with the NW oracle.

    With ``dump_dir`` the built spec (JSON) and the token matrices of the first
    prompt (CSV) are written under ``dump_dir/n<n>/``.
    """
    t0 = time.perf_counter()
    man = cfg.manifold_obj
    emb = make_embedding(man.base_ambient_dim, cfg.ambient_dim, _rng(cfg.seed, _EMB, cfg.ambient_dim))
    rows, failures = [], []
    for a, n in enumerate(cfg.n_grid):
        h = bandwidth_for(n, cfg.alpha, man.intrinsic_dim).h
        spec = build_kernel_transformer(n, cfg.ambient_dim, h, man.coord_bound, cfg.R, cfg.safety_factor)
        certs = certify_spec(spec)
        prompts = []
        for g in range(cfg.tasks_per_point):
            f = make_holder_function(man, cfg.L, cfg.alpha, cfg.R, cfg.num_anchors, _rng(cfg.seed, _F, g, a))
            base = sample_uniform(man, n + 1, _rng(cfg.seed, _X, g, a))
            lab = f.values(base)
            prompts.append(Prompt(embed_ambient(emb, base), lab[:n], lab[n]))
        tv = forward_batch(spec, prompts)
        ov = np.array([nw_estimate(p, h) for p in prompts])
        ad = np.abs(tv - ov)
        rd = ad / np.maximum(1.0, np.abs(ov))
        trace = debug_forward(spec, prompts[:2])
        if dump_dir is not None:
            sub = Path(dump_dir) / f"n{n}"
            dump_stages(spec, prompts[0], sub)
            (sub / "spec.json").write_text(spec_to_json(spec))
        failures += [f"n={n}: {m}" for m in certs + trace.violations]
        rows.append(
            {
                "value": n,
                "error": float(rd.max()),
                "stderr": 0.0,
                "max_abs_diff": float(ad.max()),
                "h": h,
                "kappa": float(spec.kappa),
                "prompts": len(prompts),
            }
        )
    worst = max(r["error"] for r in rows)
    rep = ExperimentReport(
        "equivalence",
        ["value", "error", "stderr", "max_abs_diff", "h", "kappa", "prompts"],
        rows,
        passed=worst <= EQUIVALENCE_TOL and not failures,
        summary={"max_rel_diff": worst, "tolerance": EQUIVALENCE_TOL, "failures": failures},
        config=cfg,
    )
    return _finish(rep, t0)


def _transformer_estimates(spec, xs, ys, queries):
    prompts = [Prompt(np.vstack([xs, q[None, :]]), ys) for q in queries]
    return forward_batch(spec, prompts)


def run_rate_experiment(cfg: ExperimentConfig) -> ExperimentReport:
    """MSE of the kernel estimate at h = n^(-1/(2 alpha + d)) against n."""
    t0 = time.perf_counter()
    man = cfg.manifold_obj
    d = man.intrinsic_dim
    emb = make_embedding(man.base_ambient_dim, cfg.ambient_dim, _rng(cfg.seed, _EMB, cfg.ambient_dim))
    funcs = [_task_function(cfg, man, g) for g in range(cfg.tasks_per_point)]
    rows = []
    for a, n in enumerate(cfg.n_grid):
        h = bandwidth_for(n, cfg.alpha, d).h
        spec = None
        if cfg.estimator == "transformer":
            spec = build_kernel_transformer(n, cfg.ambient_dim, h, man.coord_bound, cfg.R, cfg.safety_factor)
        per_task = np.empty(cfg.tasks_per_point)
        for g, f in enumerate(funcs):
            base = sample_uniform(man, n, _rng(cfg.seed, _X, g, a))
            qb = sample_uniform(man, cfg.queries_per_task, _rng(cfg.seed, _Q, g, a))
            xs, qs = embed_ambient(emb, base), embed_ambient(emb, qb)
            ys = f.values(base)
            est = nw_estimate_many(xs, ys, qs, h) if spec is None else _transformer_estimates(spec, xs, ys, qs)
            per_task[g] = np.mean((est - f.values(qb)) ** 2)
        rows.append({"value": n, "error": float(per_task.mean()), "stderr": _stderr(per_task), "h": h})
    fit = fit_loglog_slope([(r["value"], r["error"]) for r in rows])
    target = -2 * cfg.alpha / (2 * cfg.alpha + d)
    band = (target - 0.15, target + 0.15)
    errs = [r["error"] for r in rows]
    inversions = sum(1 for u, v in zip(errs, errs[1:]) if v > u)
    rep = ExperimentReport(
        "rate",
        ["value", "error", "stderr", "h"],
        rows,
        fit,
        band,
        band[0] <= fit.slope <= band[1],
        {"target_slope": target, "inversions": inversions},
        cfg,
    )
    return _finish(rep, t0)


def run_bias_experiment(cfg: ExperimentConfig) -> ExperimentReport:
    """Mean |integral estimate - f| at the queries, against h."""
    t0 = time.perf_counter()
    man = cfg.manifold_obj
    emb = make_embedding(man.base_ambient_dim, cfg.ambient_dim, _rng(cfg.seed, _EMB, cfg.ambient_dim))
    for h in cfg.h_grid:
        if not h < man.reach / 2:
            raise ParameterError(f"bandwidth {h} must be below half the reach {man.reach / 2}")
    per = np.empty((len(cfg.h_grid), cfg.tasks_per_point))
    mcerr = np.empty_like(per)
    for g in range(cfg.tasks_per_point):
        f = _task_function(cfg, man, g)
        if cfg.bias_queries == "anchors":
            qb = f.anchors[np.arange(cfg.queries_per_task) % f.anchors.shape[0]]
            qb = np.unique(qb, axis=0)
        else:
            qb = sample_uniform(man, cfg.queries_per_task, _rng(cfg.seed, _Q, g))
        truth = f.values(qb)
        qs = embed_ambient(emb, qb)
        for a, h in enumerate(cfg.h_grid):
            est, se = integral_estimate_mc_many(
                man, emb, f, qs, h, cfg.mc_samples, _rng(cfg.seed, _MC, g), return_stderr=True
            )
            per[a, g] = np.mean(np.abs(est - truth))
            mcerr[a, g] = np.mean(se)
    rows = [
        {"value": h, "error": float(per[a].mean()), "stderr": _stderr(per[a]), "mc_stderr": float(mcerr[a].mean())}
        for a, h in enumerate(cfg.h_grid)
    ]
    fit = fit_loglog_slope([(r["value"], r["error"]) for r in rows])
    band = (cfg.alpha - 0.25, cfg.alpha + 0.25)
    rep = ExperimentReport(
        "bias",
        ["value", "error", "stderr", "mc_stderr"],
        rows,
        fit,
        band,
        band[0] <= fit.slope <= band[1],
        {"target_slope": cfg.alpha},
        cfg,
    )
    return _finish(rep, t0)


def variance_profile(cfg: ExperimentConfig, h: float, n_grid=None):
    """Per-task mean |NW - integral estimate| at bandwidth h for each n.

    Returns ``(dev, mc_err)`` with shapes (len(n_grid), tasks) and (tasks,);
    ``mc_err`` is the mean Monte Carlo standard error of the integral oracle.
    """
    man = cfg.manifold_obj
    emb = make_embedding(man.base_ambient_dim, cfg.ambient_dim, _rng(cfg.seed, _EMB, cfg.ambient_dim))
    n_grid = cfg.n_grid if n_grid is None else tuple(n_grid)
    per = np.empty((len(n_grid), cfg.tasks_per_point))
    mc = np.empty(cfg.tasks_per_point)
    for g in range(cfg.tasks_per_point):
        f = _task_function(cfg, man, g)
        qb = sample_uniform(man, cfg.queries_per_task, _rng(cfg.seed, _Q, g))
        qs = embed_ambient(emb, qb)
        kbar, se = integral_estimate_mc_many(
            man, emb, f, qs, h, cfg.mc_samples, _rng(cfg.seed, _MC, g), return_stderr=True
        )
        mc[g] = se.mean()
        for a, n in enumerate(n_grid):
            base = sample_uniform(man, n, _rng(cfg.seed, _X, g, a))
            est = nw_estimate_many(embed_ambient(emb, base), f.values(base), qs, h)
            per[a, g] = np.mean(np.abs(est - kbar))
    return per, mc


def run_variance_experiment(cfg: ExperimentConfig) -> ExperimentReport:
    """Mean |NW - integral estimate| at fixed h, against n."""
    t0 = time.perf_counter()
    h = float(cfg.fixed_h)
    per, _ = variance_profile(cfg, h)
    rows = [
        {"value": n, "error": float(per[a].mean()), "stderr": _stderr(per[a]), "h": h}
        for a, n in enumerate(cfg.n_grid)
    ]
    fit = fit_loglog_slope([(r["value"], r["error"]) for r in rows])
    band = (-0.6, -0.4)
    rep = ExperimentReport(
        "variance",
        ["value", "error", "stderr", "h"],
        rows,
        fit,
        band,
        band[0] <= fit.slope <= band[1],
        {"target_slope": -0.5},
        cfg,
    )
    return _finish(rep, t0)


def run_ambient_experiment(cfg: ExperimentConfig) -> ExperimentReport:
    """MSE at fixed n for several ambient dimensions, same base samples for every D."""
    t0 = time.perf_counter()
    man = cfg.manifold_obj
    n = int(cfg.fixed_n)
    h = bandwidth_for(n, cfg.alpha, man.intrinsic_dim).h
    tasks = []
    for g in range(cfg.tasks_per_point):
        f = _task_function(cfg, man, g)
        base = sample_uniform(man, n, _rng(cfg.seed, _X, g))
        qb = sample_uniform(man, cfg.queries_per_task, _rng(cfg.seed, _Q, g))
        tasks.append((base, f.values(base), qb, f.values(qb)))
    rows = []
    for D in cfg.ambient_grid:
        D = int(D)
        if D < man.base_ambient_dim:
            raise ParameterError(f"ambient dimension {D} below base dimension {man.base_ambient_dim}")
        e1 = make_embedding(man.base_ambient_dim, D, _rng(cfg.seed, _EMB, D))
        e2 = make_embedding(man.base_ambient_dim, D, _rng(cfg.seed, _EMB2, D))
        per = np.empty(len(tasks))
        frame = 0.0
        for g, (base, ys, qb, truth) in enumerate(tasks):
            est = nw_estimate_many(embed_ambient(e1, base), ys, embed_ambient(e1, qb), h)
            alt = nw_estimate_many(embed_ambient(e2, base), ys, embed_ambient(e2, qb), h)
            frame = max(frame, float(np.abs(est - alt).max()))
            per[g] = np.mean((est - truth) ** 2)
        kappa = kernel_constants(n, D, h, man.coord_bound, cfg.R, cfg.safety_factor).kappa
        rows.append(
            {"value": D, "error": float(per.mean()), "stderr": _stderr(per), "kappa": kappa, "frame_diff": frame}
        )
    mse = [r["error"] for r in rows]
    ratio = max(mse) / min(mse)
    frame = max(r["frame_diff"] for r in rows)
    rep = ExperimentReport(
        "ambient",
        ["value", "error", "stderr", "kappa", "frame_diff"],
        rows,
        passed=ratio <= AMBIENT_RATIO_MAX and frame <= FRAME_TOL,
        summary={"mse_ratio": ratio, "ratio_max": AMBIENT_RATIO_MAX, "frame_diff": frame, "frame_tol": FRAME_TOL, "h": h},
        config=cfg,
    )
    return _finish(rep, t0)


RUNNERS = {
    "equivalence": run_equivalence_suite,
    "rate": run_rate_experiment,
    "bias": run_bias_experiment,
    "variance": run_variance_experiment,
    "ambient": run_ambient_experiment,
}
