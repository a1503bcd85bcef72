"""Binary logistic and multinomial (softmax) regression fitted by damped Newton.

Both solvers maximise a ridge-penalised log-likelihood

    l(beta) - ridge/2 * ||beta||^2

and stop once the max-norm of the penalised gradient drops below ``tol``.
Every accepted step is required to not decrease the objective (beyond a
few ulps of rounding); a rejected step is halved up to ``MAX_HALVINGS`` times.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg as sla
from scipy.special import expit, log_expit, logsumexp

from .errors import DimensionMismatch, InvalidConfig, NotConvergedWarning, RankDeficient

DEFAULT_RIDGE = 1e-6
DEFAULT_TOL = 1e-8
DEFAULT_MAX_ITER = 100
MAX_HALVINGS = 30
PROB_CLAMP = 1e-12


@dataclass(frozen=True)
class DesignSpec:
    """Column layout of a nuisance-model design matrix.

    Columns, in order: intercept, treatment, proxy-category dummies (all
    categories except ``reference_category``), covariates.
    """

    n_covariates: int
    include_intercept: bool = True
    include_treatment: bool = False
    k: int = 0
    reference_category: int = -1

    def __post_init__(self):
        if self.k:
            ref = self.reference_category % self.k
            object.__setattr__(self, "reference_category", ref)

    @property
    def width(self) -> int:
        return (int(self.include_intercept) + int(self.include_treatment)
                + max(self.k - 1, 0) + self.n_covariates)

    def build(self, c, x=None, u=None) -> np.ndarray:
        c = np.asarray(c, dtype=float)
        if c.ndim != 2 or c.shape[1] != self.n_covariates:
            raise DimensionMismatch(f"expected {self.n_covariates} covariate columns, got {c.shape}")
        n = c.shape[0]
        cols = []
        if self.include_intercept:
            cols.append(np.ones((n, 1)))
        if self.include_treatment:
            cols.append(np.broadcast_to(np.asarray(x, dtype=float), (n,)).reshape(n, 1))
        if self.k > 1:
            u = np.broadcast_to(np.asarray(u), (n,))
            levels = [j for j in range(self.k) if j != self.reference_category]
            cols.append((u[:, None] == np.array(levels)[None, :]).astype(float))
        cols.append(c)
        return np.hstack(cols)


# ---------------------------------------------------------------------------
# binary logistic regression
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class LogisticModel:
    coefficients: np.ndarray
    converged: bool
    iterations: int
    final_gradient_norm: float
    ridge: float
    objective_path: tuple[float, ...] = field(default=(), repr=False)

    @property
    def d(self) -> int:
        return int(self.coefficients.shape[0])


def logistic_loglik(beta, X, y, ridge=0.0) -> float:
    eta = X @ beta
    ll = np.sum(y * log_expit(eta) + (1 - y) * log_expit(-eta))
    return float(ll - 0.5 * ridge * beta @ beta)


def logistic_gradient(beta, X, y, ridge=0.0) -> np.ndarray:
    return X.T @ (y - expit(X @ beta)) - ridge * beta


def logistic_neg_hessian(beta, X, ridge=0.0) -> np.ndarray:
    mu = expit(X @ beta)
    w = mu * (1 - mu)
    return X.T @ (w[:, None] * X) + ridge * np.eye(X.shape[1])


def _newton_direction(neg_hess, grad):
    try:
        factor = sla.cho_factor(neg_hess, lower=True, check_finite=True)
    except (np.linalg.LinAlgError, ValueError):
        raise RankDeficient("penalised Hessian is not positive definite") from None
    diag = np.abs(np.diag(factor[0]))
    if diag.min() <= 0 or (diag.max() / diag.min()) ** 2 > 1e15:
        raise RankDeficient("penalised Hessian is numerically singular; increase ridge")
    return sla.cho_solve(factor, grad)


def _damped_newton(objective, gradient, neg_hessian, beta, tol, max_iter):
    f = objective(beta)
    g = gradient(beta)
    path = [f]
    it = 0
    converged = bool(np.max(np.abs(g), initial=0.0) < tol)
    while not converged and it < max_iter:
        step = _newton_direction(neg_hessian(beta), g)
        # objective values are only resolved to a few ulps of |f|
        slack = 64 * np.finfo(float).eps * max(1.0, abs(f))
        t = 1.0
        for _ in range(MAX_HALVINGS + 1):
            cand = beta + t * step
            f_new = objective(cand)
            if np.isfinite(f_new) and f_new >= f - slack:
                break
            t *= 0.5
        else:
            break
        beta, f = cand, f_new
        path.append(f)
        g = gradient(beta)
        it += 1
        converged = bool(np.max(np.abs(g), initial=0.0) < tol)
    return beta, converged, it, float(np.max(np.abs(g), initial=0.0)), tuple(path)


def _check_fit_inputs(X, y, ridge, max_iter):
    X = np.asarray(X, dtype=float)
    y = np.asarray(y)
    if X.ndim != 2 or y.shape != (X.shape[0],):
        raise DimensionMismatch("design must be n x d and response length n")
    if ridge < 0 or max_iter < 0:
        raise InvalidConfig("ridge and max_iter must be nonnegative")
    return X, y


def fit_logistic(X, y, ridge=DEFAULT_RIDGE, tol=DEFAULT_TOL, max_iter=DEFAULT_MAX_ITER) -> LogisticModel:
    X, y = _check_fit_inputs(X, y, ridge, max_iter)
    if not np.isin(y, (0, 1)).all():
        raise InvalidConfig("logistic response must be binary")
    y = y.astype(float)
    beta, conv, it, gnorm, path = _damped_newton(
        lambda b: logistic_loglik(b, X, y, ridge),
        lambda b: logistic_gradient(b, X, y, ridge),
        lambda b: logistic_neg_hessian(b, X, ridge),
        np.zeros(X.shape[1]), tol, max_iter,
    )
    if not conv:
        warnings.warn(f"logistic fit stopped after {it} iterations (|grad|={gnorm:.3g})", NotConvergedWarning)
    beta.setflags(write=False)
    return LogisticModel(beta, conv, it, gnorm, float(ridge), path)


def predict_logistic(model: LogisticModel, rows) -> np.ndarray | float:
    """P(response = 1), clamped to ``[1e-12, 1 - 1e-12]``.

    Accepts one design row or an ``n x d`` matrix.
    """
    rows = np.asarray(rows, dtype=float)
    if rows.shape[-1] != model.d:
        raise DimensionMismatch(f"row width {rows.shape[-1]} != model width {model.d}")
    p = np.clip(expit(rows @ model.coefficients), PROB_CLAMP, 1.0 - PROB_CLAMP)
    return float(p) if p.ndim == 0 else p


# ---------------------------------------------------------------------------
# multinomial logit
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class MultinomialModel:
    """Softmax regression; the reference category's logit is pinned at zero.

    ``coefficients`` has one row per non-reference category, in category order.
    """

    coefficients: np.ndarray
    k: int
    reference: int
    converged: bool
    iterations: int
    final_gradient_norm: float
    ridge: float
    objective_path: tuple[float, ...] = field(default=(), repr=False)

    @property
    def d(self) -> int:
        return int(self.coefficients.shape[1])


def _full_logits(B, X, k, ref):
    eta = X @ B.T
    return np.insert(eta, ref, 0.0, axis=1) if k > 1 else np.zeros((X.shape[0], 1))


def multinomial_loglik(B, X, y, k, ref, ridge=0.0) -> float:
    B = np.asarray(B, dtype=float).reshape(k - 1, X.shape[1])
    eta = _full_logits(B, X, k, ref)
    ll = np.sum(eta[np.arange(X.shape[0]), y] - logsumexp(eta, axis=1))
    return float(ll - 0.5 * ridge * np.sum(B * B))


def _probs(B, X, k, ref):
    eta = _full_logits(B, X, k, ref)
    eta = eta - eta.max(axis=1, keepdims=True)
    e = np.exp(eta)
    return e / e.sum(axis=1, keepdims=True)


def multinomial_gradient(B, X, y, k, ref, ridge=0.0) -> np.ndarray:
    """Gradient with respect to the flattened ``(k-1) x d`` coefficient matrix."""
    B = np.asarray(B, dtype=float).reshape(k - 1, X.shape[1])
    P = np.delete(_probs(B, X, k, ref), ref, axis=1)
    levels = np.delete(np.arange(k), ref)
    resid = (y[:, None] == levels[None, :]) - P
    return (resid.T @ X - ridge * B).ravel()


def multinomial_neg_hessian(B, X, k, ref, ridge=0.0) -> np.ndarray:
    d = X.shape[1]
    B = np.asarray(B, dtype=float).reshape(k - 1, d)
    P = np.delete(_probs(B, X, k, ref), ref, axis=1)
    H = np.empty(((k - 1) * d, (k - 1) * d))
    for a in range(k - 1):
        for b in range(a, k - 1):
            w = P[:, a] * ((a == b) - P[:, b])
            blk = X.T @ (w[:, None] * X)
            H[a * d:(a + 1) * d, b * d:(b + 1) * d] = blk
            H[b * d:(b + 1) * d, a * d:(a + 1) * d] = blk.T
    return H + ridge * np.eye(H.shape[0])


def fit_multinomial(X, y, k=None, reference=-1, ridge=DEFAULT_RIDGE, tol=DEFAULT_TOL,
                    max_iter=DEFAULT_MAX_ITER) -> MultinomialModel:
    X, y = _check_fit_inputs(X, y, ridge, max_iter)
    y = y.astype(np.int64)
    k = int(y.max()) + 1 if k is None else int(k)
    if (y < 0).any() or (y >= k).any():
        raise InvalidConfig(f"multinomial response must lie in [0, {k})")
    ref = reference % k
    d = X.shape[1]
    if k == 1:
        return MultinomialModel(np.zeros((0, d)), 1, 0, True, 0, 0.0, float(ridge), (0.0,))
    beta, conv, it, gnorm, path = _damped_newton(
        lambda b: multinomial_loglik(b, X, y, k, ref, ridge),
        lambda b: multinomial_gradient(b, X, y, k, ref, ridge),
        lambda b: multinomial_neg_hessian(b, X, k, ref, ridge),
        np.zeros((k - 1) * d), tol, max_iter,
    )
    if not conv:
        warnings.warn(f"multinomial fit stopped after {it} iterations (|grad|={gnorm:.3g})", NotConvergedWarning)
    B = beta.reshape(k - 1, d)
    B.setflags(write=False)
    return MultinomialModel(B, k, ref, conv, it, gnorm, float(ridge), path)


def predict_multinomial(model: MultinomialModel, rows) -> np.ndarray:
    """Class probabilities for one row (length ``k``) or a matrix (``n x k``)."""
    rows = np.asarray(rows, dtype=float)
    if rows.shape[-1] != model.d:
        raise DimensionMismatch(f"row width {rows.shape[-1]} != model width {model.d}")
    P = _probs(model.coefficients, np.atleast_2d(rows), model.k, model.reference)
    return P[0] if rows.ndim == 1 else P


def standard_errors(model: LogisticModel | MultinomialModel, X) -> np.ndarray:
    """Hessian-based standard errors, shaped like ``model.coefficients``.

    Only used as a test oracle; intervals come from the bootstrap.
    """
    X = np.asarray(X, dtype=float)
    if isinstance(model, LogisticModel):
        H = logistic_neg_hessian(model.coefficients, X, model.ridge)
    else:
        H = multinomial_neg_hessian(model.coefficients, X, model.k, model.reference, model.ridge)
    se = np.sqrt(np.diag(np.linalg.inv(H)))
    return se.reshape(model.coefficients.shape)
