"""Synthetic data-generating processes with exact enumeration oracles.

Structure of every DGP::

    C -> U,  (C, U) -> X,  (C, U, X) -> Y,  U -> U*

with ``U | C`` multinomial logit, ``X | C, U`` and ``Y | X, C, U``
logistic, and ``U* | U`` drawn from the row-stochastic ``pi_true``.

Config files are JSON::

    {
      "n": 5000, "k": 3, "seed": 1,
      "category_names": ["a", "b", "c"],            # optional
      "covariates": {
        "gaussian": {"count": 2, "mean": 0.0, "sd": 1.0},
        "binary":   {"count": 3, "prob": [0.5, 0.3, 0.6]}
      },
      "u_given_c":   {"intercept": [K], "c": [[p] * K]},
      "x_given_cu":  {"intercept": a, "c": [p], "u": [K]},
      "y_given_xcu": {"intercept": a, "x": b, "c": [p], "u": [K]},
      "pi_true": [[K] * K],
      "missing_rate": 0.0                           # optional
    }

Covariate columns are ordered gaussian first, then binary.  Any per-covariate
list may be given as a scalar, which is broadcast.  Coefficient blocks that
are omitted default to zeros.
"""

from __future__ import annotations

import itertools
import json
from dataclasses import dataclass, field
from importlib import resources

import numpy as np
from scipy.special import expit, softmax

from .adjust import NuisancePredictions
from .core import MISSING, Cohort
from .errors import EnumerationTooLarge, InvalidConfig

MAX_DISCRETE_COVARIATES = 6


def _vec(value, size, name):
    if value is None:
        return np.zeros(size)
    a = np.asarray(value, dtype=float)
    if a.ndim == 0:
        return np.full(size, float(a))
    if a.shape != (size,):
        raise InvalidConfig(f"{name}: expected {size} values, got {a.shape}")
    return a


@dataclass(frozen=True, eq=False)
class DgpConfig:
    n: int
    k: int
    pi_true: np.ndarray
    u_intercept: np.ndarray
    u_coef: np.ndarray
    x_intercept: float
    x_coef: np.ndarray
    x_u: np.ndarray
    y_intercept: float
    y_x: float
    y_coef: np.ndarray
    y_u: np.ndarray
    n_gaussian: int = 0
    gaussian_mean: np.ndarray = field(default_factory=lambda: np.zeros(0))
    gaussian_sd: np.ndarray = field(default_factory=lambda: np.zeros(0))
    n_binary: int = 0
    binary_prob: np.ndarray = field(default_factory=lambda: np.zeros(0))
    seed: int = 0
    missing_rate: float = 0.0
    category_names: tuple[str, ...] = ()

    def __post_init__(self):
        k, p = self.k, self.p
        if self.n < 1 or k < 1:
            raise InvalidConfig("n and k must be positive")
        pi = np.asarray(self.pi_true, dtype=float)
        if pi.shape != (k, k) or (pi < 0).any() or np.abs(pi.sum(axis=1) - 1).max() > 1e-12:
            raise InvalidConfig("pi_true must be a K x K row-stochastic matrix")
        checks = [
            (self.u_intercept, (k,)), (self.u_coef, (k, p)), (self.x_coef, (p,)), (self.x_u, (k,)),
            (self.y_coef, (p,)), (self.y_u, (k,)), (self.gaussian_mean, (self.n_gaussian,)),
            (self.gaussian_sd, (self.n_gaussian,)), (self.binary_prob, (self.n_binary,)),
        ]
        for arr, shape in checks:
            if np.shape(arr) != shape:
                raise InvalidConfig(f"coefficient block has shape {np.shape(arr)}, expected {shape}")
        if ((self.binary_prob < 0) | (self.binary_prob > 1)).any() or (self.gaussian_sd < 0).any():
            raise InvalidConfig("invalid covariate distribution parameters")
        if not 0.0 <= self.missing_rate < 1.0:
            raise InvalidConfig("missing_rate must lie in [0, 1)")
        if self.category_names and len(self.category_names) != k:
            raise InvalidConfig("category_names must have k entries")

    @property
    def p(self) -> int:
        return self.n_gaussian + self.n_binary

    @property
    def is_discrete(self) -> bool:
        return self.n_gaussian == 0 and self.n_binary <= MAX_DISCRETE_COVARIATES

    @classmethod
    def from_dict(cls, d: dict) -> "DgpConfig":
        try:
            k = int(d["k"])
            cov = d.get("covariates", {})
            g = cov.get("gaussian", {})
            b = cov.get("binary", {})
            ng, nb = int(g.get("count", 0)), int(b.get("count", 0))
            p = ng + nb
            uc = d.get("u_given_c", {})
            u_coef = uc.get("c")
            if u_coef is None or np.ndim(u_coef) == 0:
                u_coef = np.full((k, p), float(u_coef or 0.0))
            xc, yc = d.get("x_given_cu", {}), d.get("y_given_xcu", {})
            return cls(
                n=int(d["n"]), k=k, pi_true=np.asarray(d["pi_true"], dtype=float),
                u_intercept=_vec(uc.get("intercept"), k, "u_given_c.intercept"),
                u_coef=np.asarray(u_coef, dtype=float),
                x_intercept=float(xc.get("intercept", 0.0)),
                x_coef=_vec(xc.get("c"), p, "x_given_cu.c"),
                x_u=_vec(xc.get("u"), k, "x_given_cu.u"),
                y_intercept=float(yc.get("intercept", 0.0)),
                y_x=float(yc.get("x", 0.0)),
                y_coef=_vec(yc.get("c"), p, "y_given_xcu.c"),
                y_u=_vec(yc.get("u"), k, "y_given_xcu.u"),
                n_gaussian=ng, gaussian_mean=_vec(g.get("mean"), ng, "gaussian.mean"),
                gaussian_sd=_vec(g.get("sd", 1.0), ng, "gaussian.sd"),
                n_binary=nb, binary_prob=_vec(b.get("prob", 0.5), nb, "binary.prob"),
                seed=int(d.get("seed", 0)), missing_rate=float(d.get("missing_rate", 0.0)),
                category_names=tuple(d.get("category_names", ())),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise InvalidConfig(f"bad DGP config: {exc}") from None

    def to_dict(self) -> dict:
        return {
            "n": self.n, "k": self.k, "seed": self.seed,
            "category_names": list(self.category_names),
            "covariates": {
                "gaussian": {"count": self.n_gaussian, "mean": self.gaussian_mean.tolist(),
                             "sd": self.gaussian_sd.tolist()},
                "binary": {"count": self.n_binary, "prob": self.binary_prob.tolist()},
            },
            "u_given_c": {"intercept": self.u_intercept.tolist(), "c": self.u_coef.tolist()},
            "x_given_cu": {"intercept": self.x_intercept, "c": self.x_coef.tolist(), "u": self.x_u.tolist()},
            "y_given_xcu": {"intercept": self.y_intercept, "x": self.y_x, "c": self.y_coef.tolist(),
                            "u": self.y_u.tolist()},
            "pi_true": self.pi_true.tolist(),
            "missing_rate": self.missing_rate,
        }

    def replace(self, **changes) -> "DgpConfig":
        d = {f: getattr(self, f) for f in self.__dataclass_fields__}
        d.update(changes)
        return type(self)(**d)

    # conditionals, vectorised over rows of c
    def p_u_given_c(self, c) -> np.ndarray:
        return softmax(self.u_intercept[None, :] + np.asarray(c) @ self.u_coef.T, axis=1)

    def p_x_given_cu(self, c, u) -> np.ndarray:
        return expit(self.x_intercept + np.asarray(c) @ self.x_coef + self.x_u[u])

    def p_y_given_xcu(self, x, c, u) -> np.ndarray:
        return expit(self.y_intercept + self.y_x * np.asarray(x) + np.asarray(c) @ self.y_coef + self.y_u[u])


class DiscreteDgp(DgpConfig):
    """A DGP small enough for exact enumeration: binary covariates only."""

    def __post_init__(self):
        super().__post_init__()
        if self.n_gaussian:
            raise EnumerationTooLarge("Gaussian covariates cannot be enumerated")
        if self.n_binary > MAX_DISCRETE_COVARIATES:
            raise EnumerationTooLarge(f"at most {MAX_DISCRETE_COVARIATES} binary covariates can be enumerated")

    @classmethod
    def from_config(cls, cfg: DgpConfig) -> "DiscreteDgp":
        if isinstance(cfg, cls):
            return cfg
        return cls(**{f: getattr(cfg, f) for f in cfg.__dataclass_fields__})

    def patterns(self) -> tuple[np.ndarray, np.ndarray]:
        """All covariate patterns and their probabilities."""
        pats = np.array(list(itertools.product((0.0, 1.0), repeat=self.n_binary)), dtype=float)
        pats = pats.reshape(-1, self.n_binary)
        prob = self.binary_prob[None, :]
        w = np.prod(np.where(pats == 1.0, prob, 1.0 - prob), axis=1)
        return pats, w

    def latent_joint(self) -> tuple[np.ndarray, np.ndarray]:
        """``p(Y=y, X=x, U=u | C=c)`` as ``[c, y, x, u]``, plus ``p(c)``."""
        pats, w = self.patterns()
        pu = self.p_u_given_c(pats)
        g = pats.shape[0]
        q = np.empty((g, 2, 2, self.k))
        for u in range(self.k):
            px1 = self.p_x_given_cu(pats, u)
            for x, px in ((0, 1.0 - px1), (1, px1)):
                py1 = self.p_y_given_xcu(x, pats, u)
                q[:, 1, x, u] = py1 * px * pu[:, u]
                q[:, 0, x, u] = (1.0 - py1) * px * pu[:, u]
        return q, w


def as_discrete(dgp) -> DiscreteDgp:
    return DiscreteDgp.from_config(dgp)


def load_dgp(path) -> DgpConfig:
    try:
        with open(path) as fh:
            d = json.load(fh)
    except json.JSONDecodeError as exc:
        raise InvalidConfig(f"{path}: {exc}") from None
    cfg = DgpConfig.from_dict(d)
    return DiscreteDgp.from_config(cfg) if cfg.is_discrete else cfg


def shipped_config_names() -> list[str]:
    root = resources.files("proxyconf") / "data" / "dgp"
    return sorted(p.name[:-5] for p in root.iterdir() if p.name.endswith(".json"))


def shipped_dgp(name: str) -> DgpConfig:
    """Load one of the configs bundled in ``proxyconf/data/dgp``."""
    with resources.as_file(resources.files("proxyconf") / "data" / "dgp" / f"{name}.json") as p:
        if not p.exists():
            raise InvalidConfig(f"no shipped DGP named {name!r}")
        return load_dgp(p)


def _draw_categorical(rng, probs):
    cum = np.cumsum(probs, axis=1)
    draws = rng.random(probs.shape[0])
    idx = (cum < draws[:, None]).sum(axis=1)
    return np.minimum(idx, probs.shape[1] - 1)


def generate_cohort(config: DgpConfig) -> Cohort:
    rng = np.random.default_rng(config.seed)
    n = config.n
    gauss = config.gaussian_mean + config.gaussian_sd * rng.standard_normal((n, config.n_gaussian))
    binary = (rng.random((n, config.n_binary)) < config.binary_prob).astype(float)
    c = np.hstack([gauss, binary])
    u = _draw_categorical(rng, config.p_u_given_c(c))
    x = (rng.random(n) < config.p_x_given_cu(c, u)).astype(np.int64)
    y = (rng.random(n) < config.p_y_given_xcu(x, c, u)).astype(np.int64)
    u_star = _draw_categorical(rng, config.pi_true[u])
    if config.missing_rate > 0:
        u_star = np.where(rng.random(n) < config.missing_rate, MISSING, u_star)
    return Cohort(y=y, x=x, c=c, u_star=u_star, k=config.k, u_true=u,
                  category_names=config.category_names)


@dataclass(frozen=True)
class TrueEffects:
    risk_treated: float
    risk_control: float
    risk_ratio: float
    odds_ratio: float

    def to_dict(self) -> dict:
        return dict(risk_treated=self.risk_treated, risk_control=self.risk_control,
                    risk_ratio=self.risk_ratio, odds_ratio=self.odds_ratio)


def _effects(r1, r0) -> TrueEffects:
    return TrueEffects(r1, r0, r1 / r0, (r1 * (1 - r0)) / ((1 - r1) * r0))


def true_effects(dgp) -> TrueEffects:
    """Backdoor functional over all ``(C, U)`` cells, using the true conditionals."""
    dgp = as_discrete(dgp)
    pats, w = dgp.patterns()
    pu = dgp.p_u_given_c(pats)
    risks = []
    for x in (1, 0):
        cell = np.stack([dgp.p_y_given_xcu(x, pats, u) for u in range(dgp.k)], axis=1)
        risks.append(float(np.dot(w, np.sum(cell * pu, axis=1))))
    return _effects(*risks)


def covariate_only_effects(dgp) -> TrueEffects:
    """Backdoor functional adjusting for ``C`` alone (``U`` marginalised given ``X, C``)."""
    q, w = as_discrete(dgp).latent_joint()
    risks = []
    for x in (1, 0):
        joint = q[:, :, x, :].sum(axis=2)  # [c, y]
        risks.append(float(np.dot(w, joint[:, 1] / joint.sum(axis=1))))
    return _effects(*risks)


def true_marginal_u(dgp) -> np.ndarray:
    dgp = as_discrete(dgp)
    pats, w = dgp.patterns()
    return w @ dgp.p_u_given_c(pats)


def true_subgroup_risk_ratios(dgp) -> np.ndarray:
    """``P(Y=1|do(x=1), U=u) / P(Y=1|do(x=0), U=u)`` for every category."""
    dgp = as_discrete(dgp)
    pats, w = dgp.patterns()
    pu = dgp.p_u_given_c(pats)
    out = np.empty(dgp.k)
    for u in range(dgp.k):
        wu = w * pu[:, u]
        r1 = np.dot(wu, dgp.p_y_given_xcu(1, pats, u)) / wu.sum()
        r0 = np.dot(wu, dgp.p_y_given_xcu(0, pats, u)) / wu.sum()
        out[u] = r1 / r0
    return out


@dataclass(frozen=True, eq=False)
class PopulationTables:
    """Exact proxy-scale conditionals implied by a discrete DGP.

    Arrays are indexed by covariate pattern; ``weights`` is ``p(C=c)``.
    """

    patterns: np.ndarray
    weights: np.ndarray
    p_x: np.ndarray
    p_u: np.ndarray
    p_y: np.ndarray
    latent: np.ndarray

    def predictions(self) -> NuisancePredictions:
        return NuisancePredictions(self.p_y, self.p_u, self.p_x, self.weights)


def population_tables(dgp) -> PopulationTables:
    dgp = as_discrete(dgp)
    q, w = dgp.latent_joint()
    # non-differential error: p(Y, X, U*=v | C) = sum_u pi[u, v] p(Y, X, U=u | C)
    q_star = q @ dgp.pi_true
    p_xc = q_star.sum(axis=(1, 3))  # [c, x]
    p_x = p_xc[:, 1] / p_xc.sum(axis=1)
    p_xu = q_star.sum(axis=1)  # [c, x, u*]
    p_u = p_xu / p_xc[:, :, None]
    with np.errstate(invalid="ignore", divide="ignore"):
        p_y = np.where(p_xu > 0, q_star[:, 1] / p_xu, 0.5)
    pats, _ = dgp.patterns()
    return PopulationTables(pats, w, p_x, p_u, p_y, q)
