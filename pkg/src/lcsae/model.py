"""Likelihood kernels of the latent class model.

Classes are 0-based in every array (class ``c`` here is class ``c+1`` in
reports).  Response codes stay 1-based.  Everything is computed in log
space.

Membership model, with linear predictor ``eta = alpha1*sex + gamma.marital +
beta*age + spline(age).w + v[district]``:

* multinomial logit: ``log P(Q=c)/P(Q=1) = alpha0[c-1] + eta[c-1]`` for
  ``c >= 2``; class 1 is the reference with predictor 0;
* proportional odds: ``logit P(Q <= c) = alpha0[c] + eta``, one shared
  ``eta`` and increasing cutpoints ``alpha0``.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, replace
from typing import Protocol

import numpy as np
from scipy.special import log_expit, logsumexp

from .data import CovariateVector

LOGIT = "multinomial-logit"
PROPORTIONAL_ODDS = "proportional-odds"
LINKS = (LOGIT, PROPORTIONAL_ODDS)
DEMMLER_REINSCH = "demmler-reinsch"
THIN_PLATE = "thin-plate"
BASIS_KINDS = (DEMMLER_REINSCH, THIN_PLATE)


class ModelError(ValueError):
    pass


class ZeroProbabilityWarning(RuntimeWarning):
    pass


class SplineColumns(Protocol):
    def columns(self, ages) -> np.ndarray: ...


@dataclass(frozen=True)
class ModelSpec:
    n_classes: int = 5
    link: str = PROPORTIONAL_ODDS
    use_sex: bool = True
    use_marital: bool = False
    use_spline: bool = True
    use_district: bool = True
    n_knots: int = 12
    basis: str = DEMMLER_REINSCH
    penalty: str = "raw"

    def __post_init__(self):
        if self.n_classes < 1:
            raise ModelError(f"need at least one class, got {self.n_classes}")
        if self.link not in LINKS:
            raise ModelError(f"unknown link {self.link!r}; expected one of {LINKS}")
        if self.basis not in BASIS_KINDS:
            raise ModelError(f"unknown basis {self.basis!r}; expected one of {BASIS_KINDS}")
        if self.use_spline and self.n_knots < 1:
            raise ModelError("spline needs at least one knot")

    @property
    def n_equations(self) -> int:
        """Number of linear predictors: C-1 for the logit link, 1 for proportional odds."""
        if self.n_classes == 1:
            return 0
        return self.n_classes - 1 if self.link == LOGIT else 1

    @property
    def n_marital(self) -> int:
        return 3 if self.use_marital else 0

    @property
    def spline_dim(self) -> int:
        return self.n_knots if self.use_spline else 0


@dataclass
class ItemProbTable:
    """``probs[c, t, h]`` = P(Y_t = h+1 | class c); entries past H_t are zero."""

    probs: np.ndarray
    n_categories: np.ndarray

    def __post_init__(self):
        self.probs = np.asarray(self.probs, dtype=float)
        self.n_categories = np.asarray(self.n_categories, dtype=np.int64)

    @property
    def C(self) -> int:
        return self.probs.shape[0]

    @property
    def T(self) -> int:
        return self.probs.shape[1]

    @classmethod
    def from_lists(cls, nested) -> "ItemProbTable":
        """Build from ``nested[c][t] = [p_1, ..., p_H]``."""
        C, T = len(nested), len(nested[0])
        H = np.array([len(nested[0][t]) for t in range(T)])
        probs = np.zeros((C, T, H.max()))
        for c in range(C):
            for t in range(T):
                probs[c, t, : H[t]] = nested[c][t]
        return cls(probs, H)

    def check(self, tol: float = 1e-12) -> None:
        if (self.probs < 0).any():
            raise ModelError("negative item probability")
        sums = self.probs.sum(axis=2)
        if np.abs(sums - 1).max() > tol:
            raise ModelError("item probabilities do not sum to one")
        Hmax = self.probs.shape[2]
        mask = np.arange(Hmax)[None, :] >= self.n_categories[:, None]
        if (self.probs[:, mask] != 0).any():
            raise ModelError("mass on categories beyond H_t")

    def log(self) -> np.ndarray:
        with np.errstate(divide="ignore"):
            return np.log(self.probs)

    def severity(self) -> np.ndarray:
        """Mean expected item level per class, each item rescaled to [0, 1]."""
        levels = np.arange(self.probs.shape[2])[None, None, :]
        expected = (self.probs * levels).sum(axis=2) / (self.n_categories[None, :] - 1)
        return expected.mean(axis=1)

    def permuted(self, order) -> "ItemProbTable":
        return ItemProbTable(self.probs[np.asarray(order)], self.n_categories.copy())

    def copy(self) -> "ItemProbTable":
        return ItemProbTable(self.probs.copy(), self.n_categories.copy())


@dataclass
class MembershipParams:
    """Membership-model coefficients; leading axis of every block except
    ``alpha0`` indexes the linear predictor (``E`` = C-1 or 1).

    alpha0 : (C-1,) logit intercepts for classes 2..C, or increasing cutpoints.
    alpha1 : (E,) sex effect.   gamma : (E, 3 or 0) marital effects.
    beta : (E,) linear age effect.   w : (E, K or 0) spline coefficients.
    v : (E, D or 0) district random intercepts.
    """

    link: str
    alpha0: np.ndarray
    alpha1: np.ndarray
    gamma: np.ndarray
    beta: np.ndarray
    w: np.ndarray
    v: np.ndarray

    BLOCKS = ("alpha0", "alpha1", "gamma", "beta", "w", "v")

    def __post_init__(self):
        for name in self.BLOCKS:
            setattr(self, name, np.asarray(getattr(self, name), dtype=float))

    @classmethod
    def zeros(cls, spec: ModelSpec, n_districts: int) -> "MembershipParams":
        E = spec.n_equations
        C = spec.n_classes
        return cls(
            link=spec.link,
            alpha0=np.zeros(max(C - 1, 0)),
            alpha1=np.zeros(E),
            gamma=np.zeros((E, spec.n_marital)),
            beta=np.zeros(E),
            w=np.zeros((E, spec.spline_dim)),
            v=np.zeros((E, n_districts if spec.use_district else 0)),
        )

    @property
    def C(self) -> int:
        return self.alpha0.shape[0] + 1

    @property
    def E(self) -> int:
        return self.alpha1.shape[0]

    def check(self) -> None:
        if self.link == PROPORTIONAL_ODDS and np.any(np.diff(self.alpha0) <= 0):
            raise ModelError(f"proportional-odds cutpoints must be strictly increasing: {self.alpha0}")

    def copy(self) -> "MembershipParams":
        return replace(self, **{name: getattr(self, name).copy() for name in self.BLOCKS})


@dataclass
class VarianceComponents:
    sigma_v: np.ndarray
    sigma_b: np.ndarray
    B: float = 16.0

    def __post_init__(self):
        self.sigma_v = np.asarray(self.sigma_v, dtype=float)
        self.sigma_b = np.asarray(self.sigma_b, dtype=float)

    def check(self, bounded: bool = True) -> None:
        for name in ("sigma_v", "sigma_b"):
            s = getattr(self, name)
            if (s <= 0).any() or (bounded and (s >= self.B).any()):
                raise ModelError(f"{name} outside (0, {self.B}): {s}")

    def copy(self) -> "VarianceComponents":
        return VarianceComponents(self.sigma_v.copy(), self.sigma_b.copy(), self.B)


@dataclass
class Covariates:
    """Unit-level design for the membership model (all arrays length n)."""

    age: np.ndarray
    sex: np.ndarray
    marital: np.ndarray  # (n, 3 or 0)
    spline: np.ndarray  # (n, K or 0)
    district: np.ndarray  # 0-based

    @property
    def n(self) -> int:
        return self.age.shape[0]


def make_covariates(
    spec: ModelSpec, spline_design: SplineColumns | None, age, sex, marital_matrix, district
) -> Covariates:
    age = np.asarray(age, dtype=float).reshape(-1)
    n = age.shape[0]
    sex = np.asarray(sex, dtype=float).reshape(-1) if spec.use_sex else np.zeros(n)
    marital = np.asarray(marital_matrix, dtype=float)
    marital = (marital.reshape(n, -1) if n else np.zeros((0, 3)))[:, : spec.n_marital]
    if spec.use_spline:
        spline = spline_design.columns(age) if n else np.zeros((0, spec.n_knots))
    else:
        spline = np.zeros((n, 0))
    district = np.asarray(district, dtype=np.int64).reshape(-1) - 1
    return Covariates(age=age, sex=sex, marital=marital, spline=spline, district=district)


def covariates_from_vector(spec: ModelSpec, spline_design, cov: CovariateVector, district: int) -> Covariates:
    return make_covariates(
        spec, spline_design, [cov.age], [cov.sex_dummy], np.array([cov.marital_dummies], dtype=float), [district]
    )


def linear_predictor(params: MembershipParams, cov: Covariates) -> np.ndarray:
    """(n, E) linear predictors excluding the intercepts/cutpoints."""
    eta = cov.sex[:, None] * params.alpha1[None, :] + cov.age[:, None] * params.beta[None, :]
    if params.gamma.shape[1]:
        eta = eta + cov.marital @ params.gamma.T
    if params.w.shape[1]:
        eta = eta + cov.spline @ params.w.T
    if params.v.shape[1]:
        eta = eta + params.v.T[cov.district]
    return eta


def _log_diff_expit(a_hi: np.ndarray, a_lo: np.ndarray) -> np.ndarray:
    """log(expit(a_hi) - expit(a_lo)) for a_hi >= a_lo, stable in both tails."""
    with np.errstate(divide="ignore", invalid="ignore"):
        out = log_expit(a_hi) + log_expit(-a_lo) + np.log(-np.expm1(a_lo - a_hi))
    return np.where(a_hi > a_lo, out, -np.inf)


def log_membership_from_eta(link: str, alpha0: np.ndarray, eta: np.ndarray) -> np.ndarray:
    """(n, C) log class probabilities from per-unit linear predictors."""
    n = eta.shape[0]
    C = alpha0.shape[0] + 1
    if C == 1:
        return np.zeros((n, 1))
    if link == LOGIT:
        lp = np.concatenate([np.zeros((n, 1)), alpha0[None, :] + eta], axis=1)
        return lp - logsumexp(lp, axis=1, keepdims=True)
    a = alpha0[None, :] + eta[:, :1]
    out = np.empty((n, C))
    out[:, 0] = log_expit(a[:, 0])
    out[:, -1] = log_expit(-a[:, -1])
    if C > 2:
        out[:, 1:-1] = _log_diff_expit(a[:, 1:], a[:, :-1])
    return out


def log_membership_probs(params: MembershipParams, cov: Covariates) -> np.ndarray:
    params.check()
    return log_membership_from_eta(params.link, params.alpha0, linear_predictor(params, cov))


def membership_probs(
    params: MembershipParams, cov: CovariateVector, basis: SplineColumns | None, district: int, spec: ModelSpec | None = None
) -> np.ndarray:
    """Class-membership simplex for one unit (district is 1-based)."""
    if spec is None:
        spec = _spec_from_params(params)
    X = covariates_from_vector(spec, basis, cov, district)
    return np.exp(log_membership_probs(params, X)[0])


def _spec_from_params(params: MembershipParams) -> ModelSpec:
    return ModelSpec(
        n_classes=params.C,
        link=params.link,
        use_marital=params.gamma.shape[1] > 0,
        use_spline=params.w.shape[1] > 0,
        n_knots=max(params.w.shape[1], 1),
        use_district=params.v.shape[1] > 0,
    )


def log_pattern_probs(theta: ItemProbTable, responses) -> np.ndarray:
    """(n, C) ``log P(Y_i | Q_i = c)`` under local independence."""
    Y = np.asarray(responses, dtype=np.int64).reshape(-1, theta.T) - 1
    logt = theta.log()
    T = theta.T
    # logt[:, t, Y[:, t]] -> (C, n) per item, summed in fixed item order
    out = np.zeros((Y.shape[0], theta.C))
    for t in range(T):
        out += logt[:, t, Y[:, t]].T
    return out


def pattern_prob_given_class(theta: ItemProbTable, pattern, c: int) -> float:
    return float(np.exp(log_pattern_probs(theta, [pattern])[0, c]))


def marginal_pattern_prob(
    theta: ItemProbTable,
    params: MembershipParams,
    cov: CovariateVector,
    basis: SplineColumns | None,
    district: int,
    pattern,
    spec: ModelSpec | None = None,
) -> float:
    if spec is None:
        spec = _spec_from_params(params)
    X = covariates_from_vector(spec, basis, cov, district)
    lp = log_membership_probs(params, X)[0] + log_pattern_probs(theta, [pattern])[0]
    return float(np.exp(logsumexp(lp)))


def responsibilities_from_logs(log_pi: np.ndarray, log_lik: np.ndarray, unit_offset: int = 0) -> np.ndarray:
    """Row-normalized ``pi_c * P(Y|c)`` computed with max subtraction."""
    joint = log_pi + log_lik
    m = joint.max(axis=1, keepdims=True)
    if not np.all(np.isfinite(m)):
        bad = np.flatnonzero(~np.isfinite(m[:, 0]))
        raise ModelError(f"unit(s) {(bad + unit_offset).tolist()} have zero probability under every class")
    r = np.exp(joint - m)
    return r / r.sum(axis=1, keepdims=True)


def responsibilities(
    theta: ItemProbTable,
    params: MembershipParams,
    cov: CovariateVector,
    basis: SplineColumns | None,
    district: int,
    pattern,
    spec: ModelSpec | None = None,
) -> np.ndarray:
    if spec is None:
        spec = _spec_from_params(params)
    X = covariates_from_vector(spec, basis, cov, district)
    return responsibilities_from_logs(log_membership_probs(params, X), log_pattern_probs(theta, [pattern]))[0]


def zero_probability_units(responses, memberships, theta: ItemProbTable) -> list[int]:
    ll = log_pattern_probs(theta, responses)
    q = np.asarray(memberships, dtype=np.int64)
    vals = ll[np.arange(q.shape[0]), q]
    return np.flatnonzero(~np.isfinite(vals)).tolist()


def complete_data_deviance(responses, memberships, theta: ItemProbTable) -> float:
    """``-2 log L(Y | Q)``; +inf (with a warning naming the units) if a unit is impossible."""
    q = np.asarray(memberships, dtype=np.int64)
    ll = log_pattern_probs(theta, responses)
    vals = ll[np.arange(q.shape[0]), q]
    if not np.all(np.isfinite(vals)):
        bad = np.flatnonzero(~np.isfinite(vals)).tolist()
        warnings.warn(f"zero-probability pattern under assigned class for units {bad}", ZeroProbabilityWarning)
        return float("inf")
    return float(-2.0 * vals.sum())
