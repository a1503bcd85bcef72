"""Domain types and the stochastic-matrix algebra shared by every estimator.

Orientation convention, fixed once for the whole package: confusion counts
are stored true-on-rows, predicted-on-columns.  ``pi[u, v]`` is therefore
``P(U* = v | U = u)`` (row-stochastic) and the adjustment matrix ``m`` that
maps a latent probability vector onto the proxy scale is ``pi.T``
(column-stochastic).
"""

from __future__ import annotations

import csv
import enum
import math
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

from .errors import (
    DegenerateRisk,
    DimensionMismatch,
    InvalidCohort,
    InvalidConfig,
    SingularMatrix,
    ZeroRow,
)

#: condition numbers above this make :func:`row_normalize` refuse to invert
CONDITION_CUTOFF = 1e8

MISSING = -1


class Method(str, enum.Enum):
    NAIVE = "naive"
    ORACLE = "oracle"
    MATRIX_ADJUST = "matrix_adjust"
    MC_SIMEX = "mc_simex"

    @classmethod
    def parse(cls, value: "str | Method") -> "Method":
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).replace("-", "_").lower())
        except ValueError:
            raise InvalidConfig(f"unknown method {value!r}") from None


def _frozen(a, dtype) -> np.ndarray:
    out = np.array(a, dtype=dtype, copy=True)
    out.setflags(write=False)
    return out


@dataclass(frozen=True, eq=False)
class Cohort:
    """Per-unit records of outcome, treatment, covariates and proxy labels.

    Missing proxy labels are encoded as ``-1`` in ``u_star``.
    """

    y: np.ndarray
    x: np.ndarray
    c: np.ndarray
    u_star: np.ndarray
    k: int
    u_true: np.ndarray | None = None
    category_names: tuple[str, ...] = ()

    def __post_init__(self):
        y = _frozen(self.y, np.int64)
        x = _frozen(self.x, np.int64)
        u_star = _frozen(self.u_star, np.int64)
        n = y.shape[0]
        c = np.asarray(self.c, dtype=float)
        if c.ndim == 1 and c.size == 0:
            c = c.reshape(n, 0)
        c = _frozen(c, float)
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "c", c)
        object.__setattr__(self, "u_star", u_star)
        if n < 1:
            raise InvalidCohort("cohort needs at least one unit")
        if self.k < 1:
            raise InvalidCohort("need at least one category")
        if x.shape != (n,) or u_star.shape != (n,) or c.ndim != 2 or c.shape[0] != n:
            raise InvalidCohort("cohort vectors must all have length n")
        if not np.isin(y, (0, 1)).all() or not np.isin(x, (0, 1)).all():
            raise InvalidCohort("y and x must be binary")
        if ((u_star < MISSING) | (u_star >= self.k)).any():
            raise InvalidCohort(f"u_star entries must lie in [0, {self.k}) or be missing")
        if self.u_true is not None:
            u_true = _frozen(self.u_true, np.int64)
            if u_true.shape != (n,) or ((u_true < 0) | (u_true >= self.k)).any():
                raise InvalidCohort("u_true must be fully populated with categories in [0, k)")
            object.__setattr__(self, "u_true", u_true)
        names = tuple(self.category_names) or tuple(str(i) for i in range(self.k))
        if len(names) != self.k:
            raise InvalidCohort("category_names must have k entries")
        object.__setattr__(self, "category_names", names)

    @property
    def n(self) -> int:
        return int(self.y.shape[0])

    @property
    def p(self) -> int:
        return int(self.c.shape[1])

    @property
    def n_missing(self) -> int:
        return int((self.u_star == MISSING).sum())

    def take(self, idx) -> "Cohort":
        idx = np.asarray(idx)
        return Cohort(
            y=self.y[idx],
            x=self.x[idx],
            c=self.c[idx],
            u_star=self.u_star[idx],
            k=self.k,
            u_true=None if self.u_true is None else self.u_true[idx],
            category_names=self.category_names,
        )

    def with_labels(self, u_star) -> "Cohort":
        return Cohort(self.y, self.x, self.c, u_star, self.k, self.u_true, self.category_names)

    def handle_missing(self, missing_as: int | None = None) -> tuple["Cohort", int]:
        """Drop rows without a proxy label, or relabel them as ``missing_as``.

        Returns the cleaned cohort and the number of affected rows.
        """
        miss = self.u_star == MISSING
        n_miss = int(miss.sum())
        if n_miss == 0:
            return self, 0
        if missing_as is not None:
            if not 0 <= missing_as < self.k:
                raise InvalidConfig(f"missing_as must be a category in [0, {self.k})")
            return self.with_labels(np.where(miss, missing_as, self.u_star)), n_miss
        if n_miss == self.n:
            raise InvalidCohort("every row is missing its proxy label")
        return self.take(np.flatnonzero(~miss)), n_miss


@dataclass(frozen=True, eq=False)
class ConfusionCounts:
    """Square table of validation counts, true labels on rows."""

    counts: np.ndarray

    def __post_init__(self):
        a = np.asarray(self.counts)
        if a.ndim != 2 or a.shape[0] != a.shape[1]:
            raise DimensionMismatch("confusion counts must be square")
        if not np.all(np.equal(np.mod(a, 1), 0)) or (a < 0).any():
            raise InvalidConfig("confusion counts must be nonnegative integers")
        object.__setattr__(self, "counts", _frozen(a, np.int64))

    @property
    def k(self) -> int:
        return int(self.counts.shape[0])

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def records(self) -> tuple[np.ndarray, np.ndarray]:
        """Expand the table to one (true, predicted) pair per validation unit."""
        flat = self.counts.ravel()
        cells = np.repeat(np.arange(flat.size), flat)
        return cells // self.k, cells % self.k


@dataclass(frozen=True, eq=False)
class MisclassificationModel:
    pi: np.ndarray
    m: np.ndarray
    m_inverse: np.ndarray
    condition_number: float
    smoothing_alpha: float = 0.0

    @property
    def k(self) -> int:
        return int(self.pi.shape[0])

    @classmethod
    def from_pi(cls, pi, smoothing_alpha: float = 0.0) -> "MisclassificationModel":
        pi = np.asarray(pi, dtype=float)
        if pi.ndim != 2 or pi.shape[0] != pi.shape[1]:
            raise DimensionMismatch("misclassification matrix must be square")
        if (pi < 0).any() or np.abs(pi.sum(axis=1) - 1.0).max() > 1e-12:
            raise InvalidConfig("pi must be row-stochastic")
        m = pi.T.copy()
        cond = float(np.linalg.cond(m))
        if not np.isfinite(cond) or cond > CONDITION_CUTOFF:
            raise SingularMatrix(f"adjustment matrix condition number {cond:.3g} exceeds {CONDITION_CUTOFF:g}")
        try:
            m_inv = np.linalg.solve(m, np.eye(m.shape[0]))
        except np.linalg.LinAlgError as exc:
            raise SingularMatrix(str(exc)) from None
        return cls(_frozen(pi, float), _frozen(m, float), _frozen(m_inv, float), cond, float(smoothing_alpha))

    @classmethod
    def identity(cls, k: int) -> "MisclassificationModel":
        return cls.from_pi(np.eye(k))


def row_normalize(counts: ConfusionCounts | np.ndarray, alpha: float = 0.0) -> MisclassificationModel:
    """Turn confusion counts into a misclassification model.

    ``alpha`` is added to every cell before dividing by the row sums.
    """
    if not isinstance(counts, ConfusionCounts):
        counts = ConfusionCounts(counts)
    if alpha < 0:
        raise InvalidConfig("alpha must be nonnegative")
    a = counts.counts.astype(float) + alpha
    sums = a.sum(axis=1, keepdims=True)
    if (sums <= 0).any():
        bad = np.flatnonzero(sums.ravel() <= 0).tolist()
        raise ZeroRow(f"confusion rows {bad} are empty; use alpha > 0 to smooth")
    return MisclassificationModel.from_pi(a / sums, smoothing_alpha=alpha)


def accuracy(counts: ConfusionCounts | np.ndarray) -> float:
    if not isinstance(counts, ConfusionCounts):
        counts = ConfusionCounts(counts)
    total = counts.total
    if total <= 0:
        raise InvalidConfig("accuracy needs a nonempty confusion table")
    return float(np.trace(counts.counts)) / total


def effects_from_risks(risk_treated: float, risk_control: float) -> tuple[float, float]:
    """Risk ratio and odds ratio from the two counterfactual risks."""
    r1, r0 = float(risk_treated), float(risk_control)
    for r in (r1, r0):
        if not 0.0 <= r <= 1.0 or math.isnan(r):
            raise DegenerateRisk(f"risk {r!r} outside [0, 1]")
    if r1 in (0.0, 1.0) or r0 in (0.0, 1.0):
        raise DegenerateRisk(f"degenerate risks (treated={r1}, control={r0}); ratios are 0 or infinite")
    if r1 == r0:
        return 1.0, 1.0
    return r1 / r0, (r1 * (1.0 - r0)) / ((1.0 - r1) * r0)


@dataclass(frozen=True)
class CausalEstimate:
    risk_treated: float
    risk_control: float
    risk_ratio: float
    odds_ratio: float
    method: Method
    clamped_mass: float = 0.0
    dropped_rows: int = 0
    degenerate_mass: float = 0.0

    @classmethod
    def from_risks(cls, risk_treated, risk_control, method, clamped_mass=0.0, dropped_rows=0,
                   degenerate_mass=0.0):
        rr, or_ = effects_from_risks(risk_treated, risk_control)
        return cls(float(risk_treated), float(risk_control), rr, or_, Method.parse(method),
                   float(clamped_mass), int(dropped_rows), float(degenerate_mass))

    def to_dict(self) -> dict:
        return {
            "method": self.method.value,
            "risk_treated": self.risk_treated,
            "risk_control": self.risk_control,
            "risk_ratio": self.risk_ratio,
            "odds_ratio": self.odds_ratio,
            "clamped_mass": self.clamped_mass,
            "dropped_rows": self.dropped_rows,
            "degenerate_mass": self.degenerate_mass,
        }


@dataclass(frozen=True)
class IntervalEstimate:
    """Point estimate with a percentile bootstrap interval.

    ``lower <= point`` is typical but not guaranteed for percentile intervals.
    """

    point: float
    lower: float
    upper: float
    n_replicates: int
    mode: str
    n_requested: int = 0
    replicate_values: tuple[float, ...] | None = field(default=None, repr=False)

    def __post_init__(self):
        if self.lower > self.upper:
            raise ValueError("interval lower bound exceeds upper bound")

    @property
    def width(self) -> float:
        return self.upper - self.lower

    def covers(self, value: float) -> bool:
        return self.lower <= value <= self.upper


# ---------------------------------------------------------------------------
# file formats
# ---------------------------------------------------------------------------

def read_confusion(path) -> ConfusionCounts:
    """K rows of K integers, no header, true labels on rows."""
    rows = []
    with open(path, newline="") as fh:
        for rec in csv.reader(fh):
            if not rec or all(not f.strip() for f in rec):
                continue
            try:
                rows.append([int(f) for f in rec])
            except ValueError:
                raise InvalidConfig(f"{path}: confusion cells must be integers") from None
    if not rows or any(len(r) != len(rows) for r in rows):
        raise DimensionMismatch(f"{path}: confusion matrix must be K x K")
    return ConfusionCounts(np.array(rows))


def write_confusion(counts: ConfusionCounts, path) -> None:
    with open(path, "w", newline="") as fh:
        csv.writer(fh, lineterminator="\n").writerows(counts.counts.tolist())


def table1_counts() -> ConfusionCounts:
    """The shipped 4-class smoking-status validation table (Past, Current, Never, Unknown)."""
    with resources.as_file(resources.files("proxyconf") / "data" / "table1_confusion.csv") as p:
        return read_confusion(p)


TABLE1_CATEGORIES = ("Past", "Current", "Never", "Unknown")


def _fmt(v: float) -> str:
    return format(float(v), ".17g")


def write_cohort(cohort: Cohort, path) -> None:
    header = ["y", "x", "u_star"]
    if cohort.u_true is not None:
        header.append("u_true")
    header += [f"c_{j}" for j in range(cohort.p)]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for i in range(cohort.n):
            row = [int(cohort.y[i]), int(cohort.x[i]), "" if cohort.u_star[i] == MISSING else int(cohort.u_star[i])]
            if cohort.u_true is not None:
                row.append(int(cohort.u_true[i]))
            row += [_fmt(v) for v in cohort.c[i]]
            w.writerow(row)


def read_cohort(path, k: int | None = None, category_names=()) -> Cohort:
    """Read the cohort CSV format (``y,x,u_star[,u_true],c_0,...``).

    ``k`` defaults to ``len(category_names)`` or, failing that, one more
    than the largest label present.
    """
    path = Path(path)
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise InvalidCohort(f"{path}: empty file") from None
        rows = [r for r in reader if r]
    if header[:3] != ["y", "x", "u_star"]:
        raise InvalidCohort(f"{path}: header must start with y,x,u_star")
    has_truth = len(header) > 3 and header[3] == "u_true"
    cov_cols = header[4 if has_truth else 3:]
    if cov_cols != [f"c_{j}" for j in range(len(cov_cols))]:
        raise InvalidCohort(f"{path}: covariate columns must be c_0..c_{{p-1}}")
    if not rows:
        raise InvalidCohort(f"{path}: no data rows")
    width = len(header)
    try:
        y = [int(r[0]) for r in rows]
        x = [int(r[1]) for r in rows]
        u_star = [int(r[2]) if r[2].strip() else MISSING for r in rows]
        u_true = [int(r[3]) for r in rows] if has_truth else None
        off = 4 if has_truth else 3
        c = np.array([[float(v) for v in r[off:]] for r in rows], dtype=float).reshape(len(rows), len(cov_cols))
    except (ValueError, IndexError):
        raise InvalidCohort(f"{path}: malformed row") from None
    if any(len(r) != width for r in rows):
        raise InvalidCohort(f"{path}: ragged rows")
    if k is None:
        labels = [v for v in u_star if v != MISSING] + (u_true or [])
        k = len(category_names) or (max(labels) + 1 if labels else 1)
    return Cohort(y=y, x=x, c=c, u_star=u_star, k=k, u_true=u_true, category_names=tuple(category_names))
