"""Matrix-adjustment (effect restoration) estimator.

Pipeline, per unit ``i`` with covariates ``C_i``:

1. three nuisance models give ``P(Y=1|X,U*,C_i)``, ``P(U*|X,C_i)`` and
   ``P(X=1|C_i)``; their product is the proxy joint ``p(Y,X,U*|C_i)``;
2. the inverse adjustment matrix maps each ``(y, x)`` slice of the proxy
   joint onto the latent scale, giving ``p(Y,X,U|C_i)``;
3. negative cells are clamped to zero and the ``2 x 2 x K`` table is
   renormalised;
4. conditioning and marginalising the recovered table gives
   ``P(Y=1|x,C_i,u)`` and ``P(U=u|C_i)``, which are averaged over units
   (empirical distribution of ``C``) in the backdoor formula.

Units carry weights so that population tables, where each "unit" is a
covariate pattern with probability ``p(C=c)``, run through the same code.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import glm
from .core import Cohort, CausalEstimate, Method, MisclassificationModel
from .errors import (
    DegenerateCell,
    DimensionMismatch,
    EmptySubgroup,
    ExcessiveClamping,
    InsufficientData,
    InvalidConfig,
    MissingTruth,
)

MAX_CLAMPED_MASS = 0.25
MAX_PATTERNS = 64
SUBGROUP_MIN_WEIGHT = 1e-6
DEGENERATE_DENOMINATOR = 1e-12
MAX_DEGENERATE_MASS = 1e-3


@dataclass(frozen=True, eq=False)
class NuisancePredictions:
    """Per-unit conditional probabilities feeding the adjustment.

    p_y[i, x, u]  P(Y=1 | X=x, U*=u, C_i)
    p_u[i, x, u]  P(U*=u | X=x, C_i)
    p_x[i]        P(X=1 | C_i)
    weights[i]    unit weight in the average over C (sums to one)
    """

    p_y: np.ndarray
    p_u: np.ndarray
    p_x: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        n = self.p_x.shape[0]
        if self.p_y.shape != self.p_u.shape or self.p_y.shape[:2] != (n, 2) or self.weights.shape != (n,):
            raise DimensionMismatch("prediction arrays disagree in shape")

    @property
    def k(self) -> int:
        return int(self.p_y.shape[2])

    @property
    def n(self) -> int:
        return int(self.p_x.shape[0])

    def proxy_joint(self) -> np.ndarray:
        """``p(Y=y, X=x, U*=u | C_i)`` indexed ``[i, y, x, u]``."""
        px = np.stack([1.0 - self.p_x, self.p_x], axis=1)[:, :, None]
        pxu = self.p_u * px
        return np.stack([(1.0 - self.p_y) * pxu, self.p_y * pxu], axis=1)


# ---------------------------------------------------------------------------
# nuisance models
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class NuisanceModels:
    """The outcome, proxy and propensity models, fitted on the same rows.

    ``backend`` is ``"glm"`` (main-effects logistic/multinomial regressions)
    or ``"frequency"`` (saturated cell frequencies over discrete covariate
    patterns).  For the frequency backend the three "models" are arrays
    indexed by pattern.
    """

    backend: str
    outcome_model: object
    proxy_model: object
    propensity_model: object
    k: int
    n_rows: int
    dropped_rows: int = 0
    outcome_design: glm.DesignSpec | None = None
    proxy_design: glm.DesignSpec | None = None
    propensity_design: glm.DesignSpec | None = None
    patterns: np.ndarray | None = field(default=None, repr=False)

    def predict(self, c, collapse: bool = True) -> NuisancePredictions:
        """Predictions for covariate rows ``c``, weighted ``1/n`` each.

        With the frequency backend and ``collapse=True`` rows sharing a
        covariate pattern are merged into one weighted unit; every average
        over units is unchanged up to summation order.
        """
        c = np.asarray(c, dtype=float)
        n = c.shape[0]
        if self.backend == "frequency":
            idx = _pattern_index(self.patterns, c)
            if collapse:
                counts = np.bincount(idx, minlength=self.patterns.shape[0])
                idx = np.flatnonzero(counts)
                weights = counts[idx] / n
            else:
                weights = np.full(n, 1.0 / n)
            return NuisancePredictions(self.outcome_model[idx], self.proxy_model[idx],
                                       self.propensity_model[idx], weights)
        p_x = glm.predict_logistic(self.propensity_model, self.propensity_design.build(c))
        p_u = np.empty((n, 2, self.k))
        p_y = np.empty((n, 2, self.k))
        for x in (0, 1):
            p_u[:, x, :] = glm.predict_multinomial(self.proxy_model, self.proxy_design.build(c, x=x))
            for u in range(self.k):
                p_y[:, x, u] = glm.predict_logistic(self.outcome_model, self.outcome_design.build(c, x=x, u=u))
        return NuisancePredictions(p_y, p_u, np.asarray(p_x, dtype=float), np.full(n, 1.0 / n))


def _row_patterns(c, limit=MAX_PATTERNS):
    """Distinct rows of ``c`` and each row's pattern index.

    Folds one column at a time into a compressed integer code, which is far
    cheaper than ``np.unique(axis=0)`` and bails out as soon as the pattern
    count passes ``limit``.
    """
    n, p = c.shape
    code = np.zeros(n, dtype=np.int64)
    for j in range(p):
        _, col = np.unique(c[:, j], return_inverse=True)
        _, code = np.unique(code * (col.max() + 1) + col, return_inverse=True)
        if code.max() + 1 > limit:
            raise InvalidConfig(f"frequency backend needs discrete covariates with <= {limit} patterns")
    code = code.ravel()
    first = np.unique(code, return_index=True)[1]
    return c[first], code


def _pattern_index(patterns, c):
    try:
        uniq, code = _row_patterns(c, limit=patterns.shape[0])
        lookup = {tuple(row): j for j, row in enumerate(patterns.tolist())}
        return np.array([lookup[tuple(row)] for row in uniq.tolist()], dtype=np.int64)[code]
    except (KeyError, InvalidConfig):
        raise InsufficientData("covariate patterns not seen when fitting") from None


def _fit_frequency(c, x, u, y, k):
    patterns, inv = _row_patterns(c)
    g = patterns.shape[0]
    n_cxu = np.bincount((inv * 2 + x) * k + u, minlength=g * 2 * k).reshape(g, 2, k).astype(float)
    n_cxuy = np.bincount((inv * 2 + x) * k + u, weights=y, minlength=g * 2 * k).reshape(g, 2, k)
    n_cx = n_cxu.sum(axis=2)
    n_c = n_cx.sum(axis=1)
    with np.errstate(invalid="ignore", divide="ignore"):
        # empty cells carry zero weight in the proxy joint; any fill value works
        p_y = np.where(n_cxu > 0, n_cxuy / n_cxu, 0.5)
        p_u = np.where(n_cx[:, :, None] > 0, n_cxu / n_cx[:, :, None], 1.0 / k)
    p_x = n_cx[:, 1] / n_c
    return patterns, p_y, p_u, p_x


def fit_nuisance(cohort: Cohort, backend: str = "glm", labels=None, ridge: float = glm.DEFAULT_RIDGE,
                 tol: float = glm.DEFAULT_TOL, max_iter: int = glm.DEFAULT_MAX_ITER,
                 reference: int = -1, dropped_rows: int = 0) -> NuisanceModels:
    """Fit ``Y ~ X + U* + C``, ``U* ~ X + C`` and ``X ~ C`` on one cohort.

    ``labels`` overrides the proxy column (the oracle passes ``u_true``).
    Rows must already be free of missing labels.
    """
    u = cohort.u_star if labels is None else np.asarray(labels, dtype=np.int64)
    if (u < 0).any():
        raise InsufficientData("drop or relabel rows with missing proxy labels before fitting")
    if cohort.x.min() == cohort.x.max():
        raise InsufficientData("both treatment arms must be represented")
    k, c, x, y = cohort.k, cohort.c, cohort.x, cohort.y
    if backend == "frequency":
        patterns, p_y, p_u, p_x = _fit_frequency(c, x, u, y, k)
        return NuisanceModels("frequency", p_y, p_u, p_x, k, cohort.n, dropped_rows, patterns=patterns)
    if backend != "glm":
        raise InvalidConfig(f"unknown backend {backend!r}")
    out_spec = glm.DesignSpec(cohort.p, include_treatment=True, k=k, reference_category=reference)
    u_spec = glm.DesignSpec(cohort.p, include_treatment=True)
    x_spec = glm.DesignSpec(cohort.p)
    kw = dict(ridge=ridge, tol=tol, max_iter=max_iter)
    outcome = glm.fit_logistic(out_spec.build(c, x=x, u=u), y, **kw)
    proxy = glm.fit_multinomial(u_spec.build(c, x=x), u, k=k, reference=reference, **kw)
    propensity = glm.fit_logistic(x_spec.build(c), x, **kw)
    return NuisanceModels("glm", outcome, proxy, propensity, k, cohort.n, dropped_rows,
                          out_spec, u_spec, x_spec)


# ---------------------------------------------------------------------------
# restoration and the backdoor functional
# ---------------------------------------------------------------------------

def restore(m_inverse, proxy) -> np.ndarray:
    """Apply the inverse adjustment matrix along the last (category) axis."""
    return np.asarray(proxy, dtype=float) @ np.asarray(m_inverse).T


@dataclass(frozen=True, eq=False)
class RecoveredJoint:
    """Latent joint ``q[i, y, x, u]`` after clamping and renormalisation."""

    q: np.ndarray
    pre_clamp_total: np.ndarray
    unit_clamped: np.ndarray
    clamped_mass: float


def recover(pred: NuisancePredictions, mis: MisclassificationModel,
            max_clamped: float = MAX_CLAMPED_MASS) -> RecoveredJoint:
    if mis.k != pred.k:
        raise DimensionMismatch(f"misclassification model has K={mis.k}, predictions K={pred.k}")
    q = restore(mis.m_inverse, pred.proxy_joint())
    total = q.sum(axis=(1, 2, 3))
    neg = np.minimum(q, 0.0)
    unit_clamped = -neg.sum(axis=(1, 2, 3))
    clamped = float(np.dot(pred.weights, unit_clamped))
    if clamped > max_clamped:
        raise ExcessiveClamping(
            f"{clamped:.3g} of the recovered probability mass is negative (limit {max_clamped:g}); "
            "the misclassification matrix looks incompatible with the fitted models"
        )
    if clamped > 0.0:
        q = np.maximum(q, 0.0)
        s = q.sum(axis=(1, 2, 3), keepdims=True)
        if (s <= 0).any():
            raise DegenerateCell("recovered joint has no positive mass for some unit")
        q = q / s
    return RecoveredJoint(q, total, unit_clamped, clamped)


@dataclass(frozen=True, eq=False)
class Adjustment:
    """All quantities of the backdoor formula for one set of predictions.

    p_y_latent[i, x, u]  P(Y=1 | X=x, C_i, U=u)
    p_u_latent[i, u]     P(U=u | C_i)
    """

    weights: np.ndarray
    p_y_latent: np.ndarray
    p_u_latent: np.ndarray
    clamped_mass: float
    degenerate_mass: float = 0.0

    @property
    def k(self) -> int:
        return int(self.p_u_latent.shape[1])

    @property
    def marginal_u(self) -> np.ndarray:
        return self.weights @ self.p_u_latent

    def risk(self, x: int) -> float:
        unit = np.sum(self.p_y_latent[:, x, :] * self.p_u_latent, axis=1)
        return float(min(max(np.dot(self.weights, unit), 0.0), 1.0))

    def subgroup_risk(self, u: int, x: int) -> float:
        w = self.weights * self.p_u_latent[:, u]
        total = w.sum()
        if total <= SUBGROUP_MIN_WEIGHT:
            raise EmptySubgroup(f"P(U={u}) = {total:.3g} is too small for a subgroup estimate")
        return float(np.dot(w, self.p_y_latent[:, x, u]) / total)

    def subgroup_risk_ratio(self, u: int) -> float:
        return self.subgroup_risk(u, 1) / self.subgroup_risk(u, 0)

    def estimate(self, method="matrix_adjust", dropped_rows: int = 0) -> CausalEstimate:
        return CausalEstimate.from_risks(self.risk(1), self.risk(0), method, self.clamped_mass, dropped_rows,
                                         self.degenerate_mass)

    def subgroups(self, names=None) -> list[dict]:
        names = names or [str(j) for j in range(self.k)]
        pu = self.marginal_u
        rows = []
        for u in range(self.k):
            try:
                rr = self.subgroup_risk_ratio(u)
            except EmptySubgroup:
                rr = None
            rows.append({"category": names[u], "rr": rr, "weight": float(pu[u])})
        return rows


def latent_u_given_c(pred: NuisancePredictions, mis: MisclassificationModel) -> np.ndarray:
    """``P(U | C_i)`` from ``I . sum_x P(U*|x, C_i) P(x|C_i)``, clamped and renormalised per unit."""
    px = np.stack([1.0 - pred.p_x, pred.p_x], axis=1)
    p = restore(mis.m_inverse, np.sum(pred.p_u * px[:, :, None], axis=1))
    if (p < 0).any():
        p = np.maximum(p, 0.0)
        s = p.sum(axis=1, keepdims=True)
        if (s <= 0).any():
            raise DegenerateCell("recovered P(U | C) has no positive mass for some unit")
        p = p / s
    return p


def adjust_predictions(pred: NuisancePredictions, mis: MisclassificationModel,
                       max_clamped: float = MAX_CLAMPED_MASS,
                       max_degenerate: float = MAX_DEGENERATE_MASS) -> Adjustment:
    """Backdoor quantities on the latent scale.

    A cell ``(i, x, u)`` whose recovered ``p(X=x, U=u | C_i)`` vanishes has no
    defined conditional risk.  Its risk falls back to the unit's arm risk
    ``P(Y=1 | x, C_i)``.  ``degenerate_mass`` is the largest share (over the two
    arms) of the backdoor average carried by such cells with
    ``P(U=u | C_i) > 1e-6``; above ``max_degenerate`` the estimate is refused.
    ``max_degenerate=0`` refuses any such cell.
    """
    rec = recover(pred, mis, max_clamped)
    q = rec.q
    p_u = latent_u_given_c(pred, mis)
    denom = q[:, 0] + q[:, 1]
    tiny = denom < DEGENERATE_DENOMINATOR
    bad = tiny & (p_u[:, None, :] > SUBGROUP_MIN_WEIGHT)
    degenerate = 0.0
    if bad.any():
        degenerate = float(np.max(pred.weights @ np.sum(bad * p_u[:, None, :], axis=2)))
        if degenerate > max_degenerate:
            i, x, u = np.argwhere(bad)[0]
            raise DegenerateCell(
                f"P(X={x}, U={u} | C) vanishes for unit {i} although P(U={u} | C) > 0; "
                f"such cells carry {degenerate:.3g} of the average (limit {max_degenerate:g})")
    arm = np.sum(pred.p_y * pred.p_u, axis=2)
    with np.errstate(invalid="ignore", divide="ignore"):
        p_y = np.where(tiny, arm[:, :, None], q[:, 1] / np.where(tiny, 1.0, denom))
    return Adjustment(pred.weights, p_y, p_u, rec.clamped_mass, degenerate)


# ---------------------------------------------------------------------------
# operation-level entry points
# ---------------------------------------------------------------------------

def recovered_joint(nuisance: NuisanceModels, mis: MisclassificationModel, unit_row,
                    max_clamped: float = MAX_CLAMPED_MASS) -> RecoveredJoint:
    """Recovered ``2 x 2 x K`` table for one covariate row."""
    pred = nuisance.predict(np.atleast_2d(np.asarray(unit_row, dtype=float)))
    rec = recover(pred, mis, max_clamped)
    return RecoveredJoint(rec.q[0], rec.pre_clamp_total[:1], rec.unit_clamped[:1], rec.clamped_mass)


def marginal_u(nuisance: NuisanceModels, mis: MisclassificationModel, cohort: Cohort) -> np.ndarray:
    return adjust_predictions(nuisance.predict(cohort.c), mis).marginal_u


def counterfactual_risk(nuisance: NuisanceModels, mis: MisclassificationModel, cohort: Cohort, x: int) -> float:
    return adjust_predictions(nuisance.predict(cohort.c), mis).risk(x)


def subgroup_risk_ratio(nuisance: NuisanceModels, mis: MisclassificationModel, cohort: Cohort, u: int) -> float:
    return adjust_predictions(nuisance.predict(cohort.c), mis).subgroup_risk_ratio(u)


def _prepare(cohort, method, missing_as):
    if method is Method.ORACLE:
        if cohort.u_true is None:
            raise MissingTruth("the oracle estimate needs true category labels")
        return cohort, 0
    return cohort.handle_missing(missing_as)


def run_adjustment(cohort: Cohort, mis: MisclassificationModel | None, method="matrix_adjust",
                   backend: str = "glm", missing_as: int | None = None,
                   max_clamped: float = MAX_CLAMPED_MASS, max_degenerate: float = MAX_DEGENERATE_MASS,
                   **fit_kw) -> tuple[Adjustment, int]:
    """Fit nuisance models and run the adjustment for a non-SIMEX method.

    Returns the adjustment and the number of rows dropped for missing labels.
    """
    method = Method.parse(method)
    if method is Method.MC_SIMEX:
        raise InvalidConfig("use proxyconf.simex.mc_simex for the SIMEX estimate")
    cohort, dropped = _prepare(cohort, method, missing_as)
    labels = cohort.u_true if method is Method.ORACLE else None
    nuisance = fit_nuisance(cohort, backend=backend, labels=labels, dropped_rows=dropped, **fit_kw)
    if method is Method.MATRIX_ADJUST:
        if mis is None:
            raise InvalidConfig("matrix adjustment needs a misclassification model")
    else:
        mis = MisclassificationModel.identity(cohort.k)
    return adjust_predictions(nuisance.predict(cohort.c), mis, max_clamped, max_degenerate), dropped


def estimate_effects(cohort: Cohort, mis: MisclassificationModel | None, method="matrix_adjust",
                     backend: str = "glm", missing_as: int | None = None, simex_config=None,
                     **kw) -> CausalEstimate:
    method = Method.parse(method)
    if method is Method.MC_SIMEX:
        from .simex import SimexConfig, mc_simex

        est, _ = mc_simex(cohort, mis, simex_config or SimexConfig(), backend=backend, missing_as=missing_as, **kw)
        return est
    adj, dropped = run_adjustment(cohort, mis, method, backend, missing_as, **kw)
    return adj.estimate(method, dropped)
