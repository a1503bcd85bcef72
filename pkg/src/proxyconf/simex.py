"""Categorical MC-SIMEX.

For each noise level ``lam`` the observed proxy labels are pushed through
``pi ** lam`` (a fractional power of the misclassification matrix), the
naive estimator is refitted on the perturbed labels, and the averaged
estimates are extrapolated back to ``lam = -1``, the level at which the
misclassification would vanish.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import rng as rngs
from .adjust import run_adjustment
from .core import Cohort, CausalEstimate, Method, MisclassificationModel
from .errors import (
    IllConditionedFit,
    InvalidConfig,
    NegativeTransition,
    NonDiagonalizable,
    NonPositiveEigenvalue,
)

EIGVEC_CONDITION_LIMIT = 1e10
NEGATIVE_TOLERANCE = 1e-10


@dataclass(frozen=True)
class SimexConfig:
    lambda_grid: tuple[float, ...] = (0.5, 1.0, 1.5, 2.0)
    b_per_lambda: int = 100
    extrapolant_degree: int = 2
    scale: str = "log"
    seed: int = 0

    def __post_init__(self):
        grid = tuple(float(v) for v in self.lambda_grid)
        object.__setattr__(self, "lambda_grid", grid)
        if not grid or any(v <= 0 for v in grid) or list(grid) != sorted(set(grid)):
            raise InvalidConfig("lambda_grid must be nonempty, strictly ascending and positive")
        if self.b_per_lambda < 1:
            raise InvalidConfig("b_per_lambda must be at least 1")
        if not 0 <= self.extrapolant_degree < len(grid) + 1:
            raise InvalidConfig("extrapolant degree must be below the number of grid points plus one")
        if self.scale not in ("log", "linear"):
            raise InvalidConfig("scale must be 'log' or 'linear'")

    def to_dict(self) -> dict:
        return {"lambda_grid": list(self.lambda_grid), "b_per_lambda": self.b_per_lambda,
                "extrapolant_degree": self.extrapolant_degree, "scale": self.scale, "seed": self.seed}


def matrix_power(pi, lam: float) -> np.ndarray:
    """Fractional power of a row-stochastic matrix via its eigendecomposition."""
    pi = np.asarray(pi, dtype=float)
    if lam < 0:
        raise InvalidConfig("lambda must be nonnegative")
    w, E = np.linalg.eig(pi)
    if np.abs(w.imag).max() > 1e-10 or (w.real <= 0).any():
        raise NonPositiveEigenvalue(f"eigenvalues {np.round(w, 6).tolist()} are not all real and positive")
    if np.iscomplexobj(E):
        E = E.real
    w = w.real
    if np.linalg.cond(E) > EIGVEC_CONDITION_LIMIT:
        raise NonDiagonalizable("misclassification matrix is (numerically) not diagonalizable")
    out = (E * w ** lam) @ np.linalg.inv(E)
    if out.min() < -NEGATIVE_TOLERANCE:
        raise NegativeTransition(f"pi ** {lam} has entry {out.min():.3g} < 0")
    out = np.maximum(out, 0.0)
    return out / out.sum(axis=1, keepdims=True)


def perturb_labels(u_star, pi_lambda, rng: np.random.Generator) -> np.ndarray:
    """Redraw each label ``u`` from row ``pi_lambda[u]``; missing labels (< 0) stay put."""
    u_star = np.asarray(u_star, dtype=np.int64)
    pi_lambda = np.asarray(pi_lambda, dtype=float)
    draws = rng.random(u_star.shape[0])
    present = u_star >= 0
    cum = np.cumsum(pi_lambda, axis=1)[np.where(present, u_star, 0)]
    new = np.minimum((cum <= draws[:, None]).sum(axis=1), pi_lambda.shape[1] - 1)
    return np.where(present, new, u_star)


def extrapolation_fit(lams, values, degree: int) -> np.ndarray:
    """Least-squares polynomial coefficients, lowest order first."""
    lams = np.asarray(lams, dtype=float)
    values = np.asarray(values, dtype=float)
    if np.unique(lams).size < degree + 1:
        raise IllConditionedFit(f"need {degree + 1} distinct lambda values for a degree-{degree} fit")
    V = np.vander(lams, degree + 1, increasing=True)
    coef, _, rank, _ = np.linalg.lstsq(V, values, rcond=None)
    if rank < degree + 1:
        raise IllConditionedFit("Vandermonde system is rank deficient")
    return coef


def extrapolate(points, degree: int = 2, scale: str = "linear", at: float = -1.0) -> float:
    """Evaluate the fitted polynomial through ``(lam, value)`` points at ``lam = at``.

    On the log scale the polynomial is fitted to ``log(value)`` and the
    result exponentiated.
    """
    lams, values = zip(*points)
    if 0.0 not in lams:
        raise IllConditionedFit("points must include lambda = 0")
    values = np.asarray(values, dtype=float)
    if scale == "log":
        values = np.log(values)
    coef = extrapolation_fit(lams, values, degree)
    out = float(np.polynomial.polynomial.polyval(at, coef))
    return float(np.exp(out)) if scale == "log" else out


@dataclass(frozen=True)
class SimexTrace:
    lambdas: tuple[float, ...]
    risk_treated: tuple[float, ...]
    risk_control: tuple[float, ...]
    risk_ratio: tuple[float, ...]
    odds_ratio: tuple[float, ...]
    sd_risk_ratio: tuple[float, ...]
    sd_odds_ratio: tuple[float, ...]
    coef_treated: tuple[float, ...]
    coef_control: tuple[float, ...]
    extrapolated_risk_treated: float
    extrapolated_risk_control: float
    extrapolated_log_or: float
    config: SimexConfig

    def to_dict(self) -> dict:
        d = {k: (list(v) if isinstance(v, tuple) else v) for k, v in self.__dict__.items() if k != "config"}
        d["config"] = self.config.to_dict()
        return d


def _naive_risks(cohort, labels, backend, fit_kw):
    adj, _ = run_adjustment(cohort.with_labels(labels), None, Method.NAIVE, backend, **fit_kw)
    return adj.risk(1), adj.risk(0)


def mc_simex(cohort: Cohort, mis: MisclassificationModel, config: SimexConfig | None = None,
             backend: str = "glm", missing_as: int | None = None, threads: int = 1,
             **fit_kw) -> tuple[CausalEstimate, SimexTrace]:
    config = config or SimexConfig()
    cohort, dropped = cohort.handle_missing(missing_as)
    powers = [matrix_power(mis.pi, lam) for lam in config.lambda_grid]
    r0 = _naive_risks(cohort, cohort.u_star, backend, fit_kw)

    def job(a_b):
        a, b = a_b
        labels = perturb_labels(cohort.u_star, powers[a], rngs.stream(config.seed, rngs.SIMEX, a, b))
        return _naive_risks(cohort, labels, backend, fit_kw)

    jobs = [(a, b) for a in range(len(powers)) for b in range(config.b_per_lambda)]
    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            results = list(pool.map(job, jobs))
    else:
        results = [job(j) for j in jobs]
    res = np.array(results).reshape(len(powers), config.b_per_lambda, 2)

    lams = (0.0,) + config.lambda_grid
    r1s = np.concatenate([[r0[0]], res[:, :, 0].mean(axis=1)])
    r0s = np.concatenate([[r0[1]], res[:, :, 1].mean(axis=1)])
    rr = res[:, :, 0] / res[:, :, 1]
    orr = res[:, :, 0] * (1 - res[:, :, 1]) / ((1 - res[:, :, 0]) * res[:, :, 1])
    base_rr = r0[0] / r0[1]
    base_or = r0[0] * (1 - r0[1]) / ((1 - r0[0]) * r0[1])

    deg = config.extrapolant_degree
    if config.scale == "log":
        # log-risk fits are linear in the data, so the implied log-RR is itself the extrapolated log-RR
        c1 = extrapolation_fit(lams, np.log(r1s), deg)
        c0 = extrapolation_fit(lams, np.log(r0s), deg)
        ext1, ext0 = (float(np.exp(np.polynomial.polynomial.polyval(-1.0, c))) for c in (c1, c0))
    else:
        c1 = extrapolation_fit(lams, r1s, deg)
        c0 = extrapolation_fit(lams, r0s, deg)
        ext1, ext0 = (float(np.polynomial.polynomial.polyval(-1.0, c)) for c in (c1, c0))
    log_or = np.log(r1s / (1 - r1s)) - np.log(r0s / (1 - r0s))
    ext_log_or = float(np.polynomial.polynomial.polyval(-1.0, extrapolation_fit(lams, log_or, deg)))

    trace = SimexTrace(
        lambdas=lams,
        risk_treated=tuple(r1s.tolist()), risk_control=tuple(r0s.tolist()),
        risk_ratio=(base_rr,) + tuple(rr.mean(axis=1).tolist()),
        odds_ratio=(base_or,) + tuple(orr.mean(axis=1).tolist()),
        sd_risk_ratio=(0.0,) + tuple(rr.std(axis=1).tolist()),
        sd_odds_ratio=(0.0,) + tuple(orr.std(axis=1).tolist()),
        coef_treated=tuple(c1.tolist()), coef_control=tuple(c0.tolist()),
        extrapolated_risk_treated=ext1, extrapolated_risk_control=ext0,
        extrapolated_log_or=ext_log_or, config=config,
    )
    est = CausalEstimate.from_risks(min(max(ext1, 0.0), 1.0), min(max(ext0, 0.0), 1.0),
                                    Method.MC_SIMEX, 0.0, dropped)
    return est, trace
