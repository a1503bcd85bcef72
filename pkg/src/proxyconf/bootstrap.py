"""Nonparametric bootstrap for the effect estimates.

Three designs:

``analysis``
    resample cohort rows, refit all nuisance models, keep the
    misclassification model fixed;
``validation``
    keep the cohort (and fitted models) fixed, resample the validation
    confusion table and re-derive the inverse matrix;
``both``
    cross ``r_analysis`` cohort resamples with ``r_validation`` table
    resamples.

Replicates whose resampled table cannot be normalised or inverted, or whose
estimate fails numerically, are dropped and counted.
"""

from __future__ import annotations

from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import rng as rngs
from .adjust import adjust_predictions, fit_nuisance
from .core import (
    Cohort,
    ConfusionCounts,
    IntervalEstimate,
    Method,
    MisclassificationModel,
    row_normalize,
)
from .errors import InsufficientData, InvalidConfig, NumericalError, TooFewReplicates

MODES = ("analysis", "validation", "both")
MAX_FAILED_FRACTION = 0.5


@dataclass(frozen=True)
class BootstrapPlan:
    mode: str = "both"
    r_analysis: int | None = None
    r_validation: int | None = None
    confidence: float = 0.95
    seed: int = 0
    estimator: str = "matrix_adjust"

    def __post_init__(self):
        if self.mode not in MODES:
            raise InvalidConfig(f"bootstrap mode must be one of {MODES}")
        default = 10 if self.mode == "both" else 100
        ra = self.r_analysis if self.r_analysis is not None else (default if self.mode != "validation" else 0)
        rv = self.r_validation if self.r_validation is not None else (default if self.mode != "analysis" else 0)
        if self.mode == "analysis":
            rv = 0
        elif self.mode == "validation":
            ra = 0
        object.__setattr__(self, "r_analysis", int(ra))
        object.__setattr__(self, "r_validation", int(rv))
        if self.n_requested < 1:
            raise InvalidConfig("bootstrap needs at least one replicate")
        if not 0.0 < self.confidence < 1.0:
            raise InvalidConfig("confidence must lie in (0, 1)")
        est = Method.parse(self.estimator)
        if est not in (Method.MATRIX_ADJUST, Method.MC_SIMEX, Method.NAIVE):
            raise InvalidConfig("bootstrap estimator must be matrix_adjust, mc_simex or naive")
        object.__setattr__(self, "estimator", est.value)

    @property
    def n_requested(self) -> int:
        if self.mode == "analysis":
            return self.r_analysis
        if self.mode == "validation":
            return self.r_validation
        return self.r_analysis * self.r_validation


def resample_cohort(cohort: Cohort, rng: np.random.Generator) -> Cohort:
    return cohort.take(rng.integers(0, cohort.n, size=cohort.n))


def resample_confusion(counts: ConfusionCounts, rng: np.random.Generator) -> ConfusionCounts:
    """Resample validation records with replacement and re-tabulate."""
    true, pred = counts.records()
    total = true.size
    if total < 1:
        raise InvalidConfig("cannot resample an empty confusion table")
    idx = rng.integers(0, total, size=total)
    k = counts.k
    cells = np.bincount(true[idx] * k + pred[idx], minlength=k * k)
    return ConfusionCounts(cells.reshape(k, k))


def percentile_interval(values, confidence: float = 0.95) -> tuple[float, float]:
    """Equal-tailed percentile interval, linear interpolation between order statistics."""
    v = np.sort(np.asarray(values, dtype=float))
    lo, hi = np.quantile(v, [(1 - confidence) / 2, (1 + confidence) / 2], method="linear")
    return float(lo), float(hi)


@dataclass(frozen=True, eq=False)
class BootstrapResult:
    risk_ratio: IntervalEstimate
    odds_ratio: IntervalEstimate
    plan: BootstrapPlan
    n_survived: int
    failures: dict = field(default_factory=dict)
    dropped_rows: int = 0

    @property
    def n_requested(self) -> int:
        return self.plan.n_requested

    @property
    def n_failed(self) -> int:
        return self.n_requested - self.n_survived

    def to_records(self) -> list[dict]:
        out = []
        for name, iv in (("risk_ratio", self.risk_ratio), ("odds_ratio", self.odds_ratio)):
            out.append({
                "estimand": name, "mode": self.plan.mode, "point": iv.point,
                "lower": iv.lower, "upper": iv.upper,
                "n_requested": self.n_requested, "n_survived": self.n_survived, "seed": self.plan.seed,
            })
        return out


class _Estimator:
    """Splits an estimate into a cohort-dependent part and a matrix-dependent part."""

    def __init__(self, method, backend, max_clamped, simex_config, fit_kw):
        self.method = Method.parse(method)
        self.backend = backend
        self.max_clamped = max_clamped
        self.simex_config = simex_config
        self.fit_kw = fit_kw

    def prepare(self, cohort: Cohort):
        if self.method is Method.MC_SIMEX:
            return cohort
        return fit_nuisance(cohort, backend=self.backend, **self.fit_kw).predict(cohort.c)

    def evaluate(self, state, mis: MisclassificationModel | None) -> tuple[float, float]:
        if self.method is Method.MC_SIMEX:
            from .simex import SimexConfig, mc_simex

            est, _ = mc_simex(state, mis, self.simex_config or SimexConfig(), backend=self.backend, **self.fit_kw)
            return est.risk_ratio, est.odds_ratio
        if self.method is Method.NAIVE or mis is None:
            mis = MisclassificationModel.identity(state.k)
        est = adjust_predictions(state, mis, self.max_clamped).estimate(self.method)
        return est.risk_ratio, est.odds_ratio


def _attempt(fn, *args):
    try:
        return fn(*args)
    except (NumericalError, InsufficientData) as exc:
        return type(exc).__name__


def run_bootstrap(cohort: Cohort, counts: ConfusionCounts | None, plan: BootstrapPlan, *,
                  backend: str = "glm", alpha: float = 0.0, missing_as: int | None = None,
                  simex_config=None, threads: int = 1, max_clamped: float = 0.25,
                  keep_replicates: bool = True, **fit_kw) -> BootstrapResult:
    """Percentile intervals for the risk ratio and odds ratio under ``plan``."""
    cohort, dropped = cohort.handle_missing(missing_as)
    est = _Estimator(plan.estimator, backend, max_clamped, simex_config, fit_kw)
    if counts is None:
        if est.method is not Method.NAIVE:
            raise InvalidConfig(f"{est.method.value} bootstrap needs confusion counts")
        if plan.mode != "analysis":
            raise InvalidConfig("validation resampling needs confusion counts")
        mis0 = None
    else:
        mis0 = row_normalize(counts, alpha)

    base = est.prepare(cohort)
    point_rr, point_or = est.evaluate(base, mis0)

    def matrix(key, j):
        return _attempt(lambda: row_normalize(resample_confusion(counts, rngs.stream(plan.seed, key, j)), alpha))

    def cohort_job(key, i, mats):
        boot = resample_cohort(cohort, rngs.stream(plan.seed, key, i))
        state = _attempt(est.prepare, boot)
        if isinstance(state, str):
            return [state] * len(mats)
        return [m if isinstance(m, str) else _attempt(est.evaluate, state, m) for m in mats]

    def run(fn, items):
        if threads > 1:
            with ThreadPoolExecutor(threads) as pool:
                return list(pool.map(fn, items))
        return [fn(i) for i in items]

    if plan.mode == "analysis":
        outcomes = [r for rs in run(lambda i: cohort_job(rngs.BOOT_ANALYSIS, i, [mis0]), range(plan.r_analysis))
                    for r in rs]
    elif plan.mode == "validation":
        mats = [matrix(rngs.BOOT_VALIDATION, j) for j in range(plan.r_validation)]
        outcomes = run(lambda m: m if isinstance(m, str) else _attempt(est.evaluate, base, m), mats)
    else:
        mats = [matrix(rngs.BOOT_BOTH_COUNTS, j) for j in range(plan.r_validation)]
        outcomes = [r for rs in run(lambda i: cohort_job(rngs.BOOT_BOTH_COHORT, i, mats), range(plan.r_analysis))
                    for r in rs]

    failures = Counter(o for o in outcomes if isinstance(o, str))
    good = np.array([o for o in outcomes if not isinstance(o, str)], dtype=float).reshape(-1, 2)
    n_failed = sum(failures.values())
    if n_failed > MAX_FAILED_FRACTION * plan.n_requested:
        raise TooFewReplicates(f"{n_failed} of {plan.n_requested} replicates failed: {dict(failures)}")

    intervals = []
    for col, point in ((0, point_rr), (1, point_or)):
        lo, hi = percentile_interval(good[:, col], plan.confidence)
        values = tuple(good[:, col].tolist()) if keep_replicates else None
        intervals.append(IntervalEstimate(point, lo, hi, good.shape[0], plan.mode, plan.n_requested, values))
    return BootstrapResult(intervals[0], intervals[1], plan, good.shape[0], dict(failures), dropped)
