"""Monte-Carlo variance sweeps and inverse-curve fits.

A sweep visits every (N, run) cell of the grid. Each cell draws its own
generator from ``(seed, N, run)`` so results do not depend on execution order,
fits ``m_sets`` CAVs on independent reference sets of size N, and reduces them
to one variance per target. Runs are then averaged into a
:class:`VariancePoint`.
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from ._seeding import child_rng, child_seed
from .cav_estimators import ESTIMATORS, Cav, FitOptions, fit_cav
from .errors import ComputationError, ConfigurationError, DomainError
from .latent_model import EmpiricalReference, Scenario, sample_references
from .tcav_scoring import eval_gradients, multi_run_tcav, tcav_score

log = logging.getLogger(__name__)

TARGETS = ("cav_variance", "sensitivity_variance", "tcav_variance", "multirun_variance")
AGGREGATORS = ("arithmetic", "geometric")
SAMPLING_MODES = ("pool", "fresh")
VARIANCE_FLOOR = 1e-300

# stream tags keep the seed families of different procedures apart
_POOL, _SWEEP, _MULTIRUN, _SHUFFLE = 1, 2, 3, 4


@dataclass(frozen=True)
class SweepConfig:
    target: str = "cav_variance"
    estimator: str = "dom"
    n_grid: tuple = (10, 20, 50, 100, 200, 300)
    m_sets: int = 10
    r_runs: int = 10
    fit: FitOptions = field(default_factory=FitOptions)
    seed: int = 0
    sampling: str = "pool"
    pool_size: int = 10_000
    aggregator: str = "arithmetic"
    total_references: int = 2000
    s_grid: tuple = (1, 2, 4, 8, 16)
    e_outer: int = 10
    hinge_epochs: int = 20

    def __post_init__(self):
        object.__setattr__(self, "n_grid", tuple(int(n) for n in self.n_grid))
        object.__setattr__(self, "s_grid", tuple(int(s) for s in self.s_grid))
        if self.target not in TARGETS:
            raise ConfigurationError(f"unknown target {self.target!r}; expected one of {TARGETS}")
        if self.estimator not in ESTIMATORS:
            raise ConfigurationError(f"unknown estimator {self.estimator!r}")
        if self.sampling not in SAMPLING_MODES:
            raise ConfigurationError(f"sampling must be one of {SAMPLING_MODES}")
        if self.aggregator not in AGGREGATORS:
            raise ConfigurationError(f"aggregator must be one of {AGGREGATORS}")
        for name, grid in (("n_grid", self.n_grid), ("s_grid", self.s_grid)):
            if not grid or grid[0] < 1 or any(b <= a for a, b in zip(grid, grid[1:])):
                raise ConfigurationError(f"{name} must be a non-empty, strictly increasing list of positive integers")
        if self.m_sets < 2:
            raise ConfigurationError("m_sets must be >= 2 to estimate a variance")
        if self.r_runs < 1 or self.e_outer < 1:
            raise ConfigurationError("r_runs and e_outer must be >= 1")
        if self.pool_size < 1:
            raise ConfigurationError("pool_size must be >= 1")
        if self.target == "multirun_variance":
            if self.r_runs < 2:
                raise ConfigurationError("multirun variance needs r_runs >= 2")
            if self.s_grid[-1] > self.total_references:
                raise ConfigurationError("every s must satisfy s <= R")


@dataclass(frozen=True)
class VariancePoint:
    x: int
    mean_variance: float
    spread: float
    per_run: tuple
    failures: int = 0

    @property
    def valid(self) -> bool:
        return self.failures == 0 and math.isfinite(self.mean_variance)


@dataclass(frozen=True)
class CurveFit:
    a: float
    b: float
    residual_rms: float
    loglog_slope: float
    points_used: int
    excluded_nonpositive: int = 0


def _floor(v: float) -> float:
    return 0.0 if abs(v) < VARIANCE_FLOOR else v


def cav_variance_trace(cavs: Sequence) -> float:
    """Trace of the unbiased sample covariance of the CAV coefficient vectors."""
    betas = np.array([c.beta if isinstance(c, Cav) else np.asarray(c, dtype=np.float64) for c in cavs])
    if betas.ndim == 1:
        betas = betas[:, None]
    if betas.shape[0] < 2:
        raise DomainError("need at least two CAVs for a variance")
    return _floor(float(np.sum(np.var(betas, axis=0, ddof=1))))


def reference_source(scenario: Scenario, config: SweepConfig):
    """The distribution reference sets are drawn from.

    ``pool`` mode materializes ``pool_size`` points from a synthetic F0 once
    (seeded by the base seed) and resamples them with replacement; an empirical
    reference is already a pool. ``fresh`` mode draws from F0 directly.
    """
    spec = scenario.reference
    if config.sampling == "fresh" or isinstance(spec, EmpiricalReference):
        return spec
    return EmpiricalReference(sample_references(spec, config.pool_size, child_seed(config.seed, _POOL)))


def _fit_kwargs(config: SweepConfig) -> dict:
    return {"epochs": config.hinge_epochs} if config.estimator == "hinge" else {}


def _reduce_cell(betas: np.ndarray, grads: np.ndarray) -> dict:
    sens = betas @ grads.T
    per_point = np.var(sens, axis=0, ddof=1)
    if np.any(per_point <= 0):
        geo = 0.0
    else:
        geo = float(np.exp(np.mean(np.log(per_point))))
    scores = [tcav_score(row) for row in sens]
    return {
        "cav_variance": _floor(float(np.sum(np.var(betas, axis=0, ddof=1)))),
        "sensitivity_variance": _floor(float(per_point.mean())),
        "sensitivity_variance_geo": _floor(geo),
        "tcav_variance": _floor(float(np.var(scores, ddof=1))),
    }


def _run_cell(config, scenario, source, grads, n, run):
    rng = child_rng(config.seed, _SWEEP, n, run)
    betas, failures = [], 0
    kwargs = _fit_kwargs(config)
    for k in range(config.m_sets):
        refs = source.draw(n, rng)
        try:
            cav = fit_cav(config.estimator, scenario.concepts, refs, config.fit, seed=child_seed(config.seed, n, run, k), **kwargs)
        except ComputationError as exc:
            log.warning("fit failed at N=%d run=%d set=%d: %s", n, run, k, exc)
            failures += 1
            continue
        betas.append(cav.beta)
    if len(betas) < 2:
        nan = float("nan")
        return {key: nan for key in ("cav_variance", "sensitivity_variance", "sensitivity_variance_geo", "tcav_variance")}, failures
    return _reduce_cell(np.array(betas), grads), failures


def _map(fn, items, threads: int):
    if threads == 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=None if threads <= 0 else threads) as pool:
        return list(pool.map(fn, items))


def _summarize(x: int, values: Iterable[float], failures: int) -> VariancePoint:
    vals = np.array(list(values), dtype=np.float64)
    finite = vals[np.isfinite(vals)]
    mean = float(finite.mean()) if finite.size else float("nan")
    spread = float(finite.std()) if finite.size else float("nan")
    return VariancePoint(x=x, mean_variance=mean, spread=spread, per_run=tuple(float(v) for v in vals), failures=failures)


def run_sweep_all(config: SweepConfig, scenario: Scenario, threads: int = 1) -> dict[str, list[VariancePoint]]:
    """Variance-vs-N curves for every per-set reduction at once.

    Keys: ``cav_variance``, ``sensitivity_variance`` (arithmetic mean over
    evaluation points), ``sensitivity_variance_geo`` (geometric mean) and
    ``tcav_variance``.
    """
    if scenario.reference.dimension != scenario.dimension:
        raise ConfigurationError("scenario reference and concept dimensions differ")
    source = reference_source(scenario, config)
    grads = eval_gradients(scenario.head, scenario.eval_set)
    cells = [(n, run) for n in config.n_grid for run in range(config.r_runs)]
    results = dict(zip(cells, _map(lambda c: _run_cell(config, scenario, source, grads, *c), cells, threads)))

    out: dict[str, list[VariancePoint]] = {}
    for key in ("cav_variance", "sensitivity_variance", "sensitivity_variance_geo", "tcav_variance"):
        points = []
        for n in config.n_grid:
            cell = [results[(n, run)] for run in range(config.r_runs)]
            points.append(_summarize(n, (c[0][key] for c in cell), sum(c[1] for c in cell)))
        out[key] = points
    return out


def sweep_key(config: SweepConfig) -> str:
    if config.target == "sensitivity_variance" and config.aggregator == "geometric":
        return "sensitivity_variance_geo"
    return config.target


def run_sweep(config: SweepConfig, scenario: Scenario, threads: int = 1) -> list[VariancePoint]:
    """Variance-vs-N points for ``config.target`` (not ``multirun_variance``)."""
    if config.target == "multirun_variance":
        raise ConfigurationError("use run_multirun_sweep for the multirun_variance target")
    return run_sweep_all(config, scenario, threads)[sweep_key(config)]


def run_multirun_sweep(config: SweepConfig, scenario: Scenario, threads: int = 1) -> list[VariancePoint]:
    """Variance of the multi-run TCAV score against the number of subsets s.

    For each s and outer repetition, ``r_runs`` fresh sets of R references are
    drawn and split into s subsets; the variance of the r resulting multi-run
    scores is one sample. ``e_outer`` samples give the mean and spread.
    """
    source = reference_source(scenario, config)
    grads = eval_gradients(scenario.head, scenario.eval_set)
    big_r = config.total_references
    if config.s_grid[-1] > big_r:
        raise DomainError("every s must satisfy s <= R")
    kwargs = _fit_kwargs(config)

    def inner(key):
        s, outer, i = key
        refs = source.draw(big_r, child_rng(config.seed, _MULTIRUN, s, outer, i))
        try:
            res = multi_run_tcav(
                scenario.concepts, refs, s, None, None, config.estimator, config.fit,
                seed=child_seed(config.seed, _SHUFFLE, s, outer, i), gradients=grads, **kwargs,
            )
        except ComputationError as exc:
            log.warning("multi-run fit failed at s=%d outer=%d rep=%d: %s", s, outer, i, exc)
            return None
        return res.multi_run_mean

    keys = [(s, e, i) for s in config.s_grid for e in range(config.e_outer) for i in range(config.r_runs)]
    values = dict(zip(keys, _map(inner, keys, threads)))

    points = []
    for s in config.s_grid:
        samples, failures = [], 0
        for e in range(config.e_outer):
            t_multi = [values[(s, e, i)] for i in range(config.r_runs)]
            ok = [t for t in t_multi if t is not None]
            failures += len(t_multi) - len(ok)
            samples.append(_floor(float(np.var(ok, ddof=1))) if len(ok) >= 2 else float("nan"))
        points.append(_summarize(s, samples, failures))
    return points


def fit_inverse_curve(points) -> CurveFit:
    """Least-squares fit of y = a/N + b, plus the least-squares slope of log y on log N.

    ``points`` holds (N, y) pairs or :class:`VariancePoint` objects; points with
    non-finite y are ignored, and y <= 0 is left out of the log-log slope only
    (which is NaN when fewer than two distinct N remain).
    """
    pairs = [(p.x, p.mean_variance) if isinstance(p, VariancePoint) else (p[0], p[1]) for p in points]
    xs = np.array([float(x) for x, _ in pairs])
    ys = np.array([float(y) for _, y in pairs])
    keep = np.isfinite(ys) & np.isfinite(xs) & (xs > 0)
    xs, ys = xs[keep], ys[keep]
    if np.unique(xs).size < 2:
        raise DomainError("curve fit needs at least two distinct N values")
    design = np.column_stack([1.0 / xs, np.ones_like(xs)])
    (a, b), *_ = np.linalg.lstsq(design, ys, rcond=None)
    resid = ys - design @ np.array([a, b])
    rms = float(np.sqrt(np.mean(resid**2)))

    pos = ys > 0
    slope = float("nan")
    if np.unique(xs[pos]).size >= 2:
        lx, ly = np.log(xs[pos]), np.log(ys[pos])
        lx_c = lx - lx.mean()
        slope = float(lx_c @ (ly - ly.mean()) / (lx_c @ lx_c))
    else:
        log.warning("log-log slope undefined: fewer than two distinct N with y > 0")
    return CurveFit(
        a=float(a),
        b=float(b),
        residual_rms=rms,
        loglog_slope=slope,
        points_used=int(xs.size),
        excluded_nonpositive=int(np.count_nonzero(~pos)),
    )
