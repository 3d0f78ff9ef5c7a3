"""Metropolis-within-Gibbs sampler for the latent class small area model.

One sweep updates, in order:

1. memberships ``Q`` (exact Gibbs from the responsibilities),
2. item probabilities (conjugate Dirichlet draws),
3. the regression block of every linear predictor (adaptive random-walk
   Metropolis on intercepts/cutpoints, sex, marital and linear age effects),
4. district random intercepts (scalar Metropolis, all districts at once),
5. spline coefficients (scalar Metropolis, one coefficient at a time),
6. standard deviations ``sigma_v`` and ``sigma_b``.

Under the multinomial-logit link classes are relabelled by severity after
each sweep.  Proposal scales adapt during burn-in only.

Chain ``k`` of a run seeded with ``seed`` draws from
``PCG64(SeedSequence(seed, spawn_key=(k,)))``.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import gammainccinv, gammaincc, gammaln, log_expit, logsumexp

from .basis import DRBasis, ThinPlateDesign
from .data import ItemResponseMatrix
from .model import (
    DEMMLER_REINSCH,
    LOGIT,
    PROPORTIONAL_ODDS,
    ItemProbTable,
    MembershipParams,
    ModelSpec,
    VarianceComponents,
    log_membership_from_eta,
    log_pattern_probs,
    make_covariates,
    responsibilities_from_logs,
)

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "lcsae-checkpoint"
CHECKPOINT_VERSION = 1


class NumericalError(RuntimeError):
    """Non-finite posterior; ``checkpoint`` points at the last good state."""

    def __init__(self, message: str, checkpoint: Path | None = None):
        super().__init__(message)
        self.checkpoint = checkpoint


SD_FAMILIES = ("uniform", "half-cauchy", "inv-gamma")


@dataclass(frozen=True)
class SdPrior:
    """Prior on a random-effect standard deviation.

    ``uniform``: sigma ~ U(0, B).  ``half-cauchy``: sigma ~ HC(scale).
    ``inv-gamma``: sigma^2 ~ IG(a, b).
    """

    family: str = "uniform"
    B: float = 16.0
    scale: float = 1.0
    a: float = 1.0
    b: float = 1.0

    def __post_init__(self):
        if self.family not in SD_FAMILIES:
            raise ValueError(f"unknown sd prior family {self.family!r}")
        for name in ("B", "scale", "a", "b"):
            if not getattr(self, name) > 0:
                raise ValueError(f"sd prior {name} must be positive")

    @property
    def upper(self) -> float:
        return self.B if self.family == "uniform" else math.inf

    def logpdf(self, sigma: float) -> float:
        if sigma <= 0 or sigma >= self.upper:
            return -math.inf
        if self.family == "uniform":
            return -math.log(self.B)
        if self.family == "half-cauchy":
            return math.log(2 / (math.pi * self.scale)) - math.log1p((sigma / self.scale) ** 2)
        # sigma^2 ~ IG(a, b), pushed to sigma: p(s) = IG(s^2) * 2s
        v = sigma * sigma
        return (
            self.a * math.log(self.b) - gammaln(self.a) - (self.a + 1) * math.log(v) - self.b / v + math.log(2 * sigma)
        )


@dataclass(frozen=True)
class PriorSpec:
    dirichlet_conc: float = 1.0
    reg_prior_var: float = 100.0
    sd_b: SdPrior = SdPrior()
    sd_v: SdPrior = SdPrior()

    def __post_init__(self):
        if not self.dirichlet_conc > 0 or not self.reg_prior_var > 0:
            raise ValueError("prior hyperparameters must be strictly positive")

    @property
    def B(self) -> float:
        return self.sd_b.B

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "PriorSpec":
        d = dict(d)
        for key in ("sd_b", "sd_v"):
            if key in d and isinstance(d[key], dict):
                d[key] = SdPrior(**d[key])
        return cls(**d)


@dataclass(frozen=True)
class SamplerConfig:
    iterations: int = 120_000
    burn_in: int = 15_000
    thin: int = 3
    chains: int = 1
    seed: int = 20_240_601
    adapt_window: int = 50
    target_accept: float = 0.44
    target_accept_block: float = 0.234
    ordered_burn_in: float = 0.5

    def __post_init__(self):
        if self.thin < 1:
            raise ValueError("thin must be >= 1")
        if not 0 <= self.burn_in < self.iterations:
            raise ValueError("need 0 <= burn_in < iterations")
        if self.chains < 1:
            raise ValueError("need at least one chain")
        if not 0 <= self.ordered_burn_in <= 1:
            raise ValueError("ordered_burn_in must lie in [0, 1]")

    @property
    def n_kept(self) -> int:
        return (self.iterations - self.burn_in) // self.thin

    def keeps(self, t: int) -> bool:
        """Whether 1-based iteration ``t`` is retained."""
        return t > self.burn_in and (t - self.burn_in) % self.thin == 0

    def to_dict(self) -> dict:
        return asdict(self)


def chain_rng(seed: int, chain: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed, spawn_key=(chain,))))


@dataclass
class ChainState:
    Q: np.ndarray
    theta: ItemProbTable
    params: MembershipParams
    variances: VarianceComponents
    log_posterior: float = float("nan")
    proposal_scales: dict = field(default_factory=dict)

    def copy(self) -> "ChainState":
        return ChainState(
            Q=self.Q.copy(),
            theta=self.theta.copy(),
            params=self.params.copy(),
            variances=self.variances.copy(),
            log_posterior=self.log_posterior,
            proposal_scales={k: np.array(v, copy=True) for k, v in self.proposal_scales.items()},
        )


# ---------------------------------------------------------------------------
# standard-deviation full conditionals


def slice_sample(logf, x0: float, width: float, lower: float, upper: float, rng, max_steps: int = 50) -> float:
    """One univariate slice-sampling step (stepping out, then shrinkage)."""
    y = logf(x0) - rng.exponential()
    u = rng.uniform()
    left = x0 - width * u
    right = left + width
    j = int(math.floor(max_steps * rng.uniform()))
    k = max_steps - 1 - j
    while j > 0 and left > lower and logf(left) > y:
        left -= width
        j -= 1
    while k > 0 and right < upper and logf(right) > y:
        right += width
        k -= 1
    left, right = max(left, lower), min(right, upper)
    while True:
        x1 = rng.uniform(left, right)
        if logf(x1) > y:
            return x1
        if x1 < x0:
            left = x1
        else:
            right = x1


def sd_log_conditional(prior: SdPrior, m: int, ss: float):
    def logf(sigma):
        if sigma <= 0 or sigma >= prior.upper:
            return -math.inf
        return prior.logpdf(sigma) - m * math.log(sigma) - ss / (2 * sigma * sigma)

    return logf


def _truncated_gamma_above(shape: float, rate: float, lower: float, rng) -> float:
    """Draw tau ~ Gamma(shape, rate) restricted to tau > lower."""
    tail = gammaincc(shape, rate * lower)
    if tail > 1e-250:
        p = rng.uniform() * tail
        p = min(max(p, 1e-300), tail)
        return max(float(gammainccinv(shape, p)) / rate, lower)
    # far tail: density ~ exp(-(rate - (shape-1)/tau) tau) locally
    r = rate - (shape - 1) / lower
    return lower + rng.exponential(1.0 / max(r, rate * 1e-3))


def draw_sd(prior: SdPrior, m: int, ss: float, current: float, rng) -> float:
    """Draw sigma from ``prior(sigma) * sigma^-m * exp(-ss / (2 sigma^2))``."""
    if prior.family == "inv-gamma":
        var = 1.0 / rng.gamma(prior.a + m / 2, 1.0 / (prior.b + ss / 2))
        return math.sqrt(var)
    if prior.family == "uniform":
        if m == 0 and ss == 0:
            return rng.uniform(0, prior.B)
        shape = (m - 1) / 2
        if shape > 0 and ss > 0:
            tau = _truncated_gamma_above(shape, ss / 2, 1.0 / prior.B**2, rng)
            return min(1.0 / math.sqrt(tau), np.nextafter(prior.B, 0))
    logf = sd_log_conditional(prior, m, ss)
    x0 = current if 0 < current < prior.upper else min(1.0, prior.upper / 2)
    return slice_sample(logf, x0, max(0.5 * x0, 1e-3), 0.0, prior.upper, rng)


# ---------------------------------------------------------------------------
# adaptation helpers


class _ScalarAdapter:
    """Per-coordinate log-scale adaptation toward a target acceptance rate."""

    def __init__(self, scales: np.ndarray, target: float):
        self.scale = np.array(scales, dtype=float)
        self.target = target
        self.acc = np.zeros_like(self.scale)
        self.prop = np.zeros_like(self.scale)
        self.batches = 0

    def record(self, accepted, where=None):
        if where is None:
            self.acc += accepted
            self.prop += 1
        else:
            self.acc[where] += accepted
            self.prop[where] += 1

    def adapt(self):
        self.batches += 1
        gain = min(1.0, 3.0 / math.sqrt(self.batches))
        rate = np.divide(self.acc, self.prop, out=np.full_like(self.acc, self.target), where=self.prop > 0)
        self.scale *= np.exp(gain * (rate - self.target))
        self.acc[:] = 0
        self.prop[:] = 0


class _BlockAdapter:
    """Adaptive-covariance random walk (covariance frozen after burn-in)."""

    def __init__(self, init_sd: np.ndarray, target: float, history: int):
        d = init_sd.shape[0]
        self.d = d
        self.chol = np.diag(init_sd)
        self.log_lambda = 0.0
        self.target = target
        self.hist = np.zeros((max(history, 1), d))
        self.n_hist = 0
        self.acc = 0
        self.prop = 0
        self.batches = 0

    def propose(self, x, rng):
        return x + math.exp(self.log_lambda) * (self.chol @ rng.standard_normal(self.d))

    def store(self, x):
        if self.n_hist < self.hist.shape[0]:
            self.hist[self.n_hist] = x
            self.n_hist += 1

    def adapt(self):
        self.batches += 1
        gain = min(1.0, 3.0 / math.sqrt(self.batches))
        rate = self.acc / self.prop if self.prop else self.target
        self.log_lambda += gain * (rate - self.target)
        self.acc = self.prop = 0
        start = self.n_hist // 2
        if self.n_hist - start >= max(2 * self.d, 20):
            S = np.atleast_2d(np.cov(self.hist[start : self.n_hist].T))
            scale = np.sqrt(np.maximum(np.diag(S), 1e-300))
            S = S + np.diag(1e-8 * scale**2 + 1e-300)
            try:
                L = np.linalg.cholesky(S)
            except np.linalg.LinAlgError:
                return
            self.chol = (2.38 / math.sqrt(self.d)) * L
            self.log_lambda = 0.0 if self.batches == 1 else self.log_lambda


# ---------------------------------------------------------------------------


class Sampler:
    """Holds data, design and prior; its ``update_*`` methods mutate a ChainState."""

    def __init__(
        self,
        spec: ModelSpec,
        data: ItemResponseMatrix,
        basis: DRBasis | None,
        prior: PriorSpec = PriorSpec(),
        config: SamplerConfig = SamplerConfig(),
    ):
        self.spec = spec
        self.data = data
        self.basis = basis
        self.prior = prior
        self.config = config
        self.C = spec.n_classes
        self.E = spec.n_equations
        self.D = data.D if spec.use_district else 0
        self.K = spec.spline_dim
        if spec.use_spline:
            if basis is None:
                raise ValueError("spline model needs a basis")
            if basis.K != spec.n_knots:
                raise ValueError(f"basis has {basis.K} knots, spec asks for {spec.n_knots}")
            if spec.basis == DEMMLER_REINSCH:
                self.design = basis
                self.spline_precision = np.diag(basis.s)
                self.diagonal_prior = True
            else:
                self.design = ThinPlateDesign(basis)
                self.spline_precision = self.design.precision()
                self.diagonal_prior = False
        else:
            self.design = None
            self.spline_precision = np.zeros((0, 0))
            self.diagonal_prior = True
        self.X = make_covariates(spec, self.design, data.age, data.sex, data.marital_matrix, data.district)
        self.Y = data.responses
        self.n = data.n
        self.H = data.schema.n_categories
        self.Hmax = int(self.H.max())
        self.cat_mask = np.arange(self.Hmax)[None, :] < self.H[:, None]  # (T, Hmax)
        self._reg_columns = self._regression_columns()
        self._eta = None
        self._adapting = False
        self.ledger = {"reg": [0, 0], "v": [0, 0], "w": [0, 0], "reg_nonfinite": 0}

    # -- layout of the regression block --------------------------------------

    def _regression_columns(self) -> np.ndarray:
        cols = []
        if self.spec.use_sex:
            cols.append(self.X.sex)
        for j in range(self.spec.n_marital):
            cols.append(self.X.marital[:, j])
        if self.spec.use_spline:
            cols.append(self.X.age)
        return np.column_stack(cols) if cols else np.zeros((self.n, 0))

    def n_intercepts(self, e: int) -> int:
        return self.C - 1 if self.spec.link == PROPORTIONAL_ODDS else 1

    def reg_get(self, params: MembershipParams, e: int) -> np.ndarray:
        parts = [params.alpha0 if self.spec.link == PROPORTIONAL_ODDS else params.alpha0[e : e + 1]]
        if self.spec.use_sex:
            parts.append(params.alpha1[e : e + 1])
        parts.append(params.gamma[e])
        if self.spec.use_spline:
            parts.append(params.beta[e : e + 1])
        return np.concatenate(parts)

    def reg_set(self, params: MembershipParams, e: int, x: np.ndarray) -> None:
        k = self.n_intercepts(e)
        if self.spec.link == PROPORTIONAL_ODDS:
            params.alpha0[:] = x[:k]
        else:
            params.alpha0[e] = x[0]
        i = k
        if self.spec.use_sex:
            params.alpha1[e] = x[i]
            i += 1
        g = self.spec.n_marital
        params.gamma[e] = x[i : i + g]
        i += g
        if self.spec.use_spline:
            params.beta[e] = x[i]

    def reg_slopes(self, params: MembershipParams, e: int) -> np.ndarray:
        return self.reg_get(params, e)[self.n_intercepts(e) :]

    # -- likelihood pieces ----------------------------------------------------

    def eta(self, params: MembershipParams) -> np.ndarray:
        from .model import linear_predictor

        return linear_predictor(params, self.X)

    def unit_loglik(self, alpha0: np.ndarray, eta: np.ndarray, Q: np.ndarray) -> np.ndarray:
        """Per-unit ``log P(Q_i | covariates)``."""
        n = Q.shape[0]
        if self.C == 1 or n == 0:
            return np.zeros(n)
        if self.spec.link == PROPORTIONAL_ODDS:
            if np.any(np.diff(alpha0) <= 0):
                return np.full(n, -np.inf)
            ext = np.concatenate([[-np.inf], alpha0, [np.inf]])
            hi = ext[Q + 1] + eta[:, 0]
            lo = ext[Q] + eta[:, 0]
            with np.errstate(divide="ignore", invalid="ignore"):
                out = log_expit(hi) + log_expit(-lo) + np.log(-np.expm1(lo - hi))
            return np.where(hi > lo, out, -np.inf)
        lp = np.concatenate([np.zeros((n, 1)), alpha0[None, :] + eta], axis=1)
        return lp[np.arange(n), Q] - logsumexp(lp, axis=1)

    def log_pi(self, params: MembershipParams, eta: np.ndarray | None = None) -> np.ndarray:
        if eta is None:
            eta = self.eta(params)
        return log_membership_from_eta(params.link, params.alpha0, eta)

    def log_theta_lik(self, theta: ItemProbTable) -> np.ndarray:
        return log_pattern_probs(theta, self.Y)

    def deviance(self, state: ChainState) -> float:
        ll = self.log_theta_lik(state.theta)
        return float(-2.0 * ll[np.arange(self.n), state.Q].sum())

    def log_prior(self, state: ChainState) -> float:
        p = state.params
        var = self.prior.reg_prior_var
        lp = 0.0
        for e in range(self.E):
            x = self.reg_get(p, e) if self.spec.link == LOGIT or e == 0 else self.reg_slopes(p, e)
            lp += float(-0.5 * np.sum(x * x) / var - 0.5 * x.size * math.log(2 * math.pi * var))
        vs = state.variances
        for e in range(self.E):
            if self.D:
                s = vs.sigma_v[e]
                lp += float(-0.5 * np.sum(p.v[e] ** 2) / s**2 - self.D * math.log(s) - 0.5 * self.D * math.log(2 * math.pi))
                lp += self.prior.sd_v.logpdf(s)
            if self.K:
                s = vs.sigma_b[e]
                quad = self._spline_quadratic(p.w[e])
                lp += float(-0.5 * quad / s**2 - self.K * math.log(s) - 0.5 * self.K * math.log(2 * math.pi))
                lp += 0.5 * float(np.linalg.slogdet(self.spline_precision)[1])
                lp += self.prior.sd_b.logpdf(s)
        conc = self.prior.dirichlet_conc
        logt = state.theta.log()
        for t in range(self.Y.shape[1] if self.n else state.theta.T):
            h = int(self.H[t])
            lp += float(np.sum((conc - 1) * logt[:, t, :h])) if conc != 1 else 0.0
            lp += state.theta.C * float(gammaln(h * conc) - h * gammaln(conc))
        return lp

    def log_posterior(self, state: ChainState, eta: np.ndarray | None = None) -> float:
        if eta is None:
            eta = self.eta(state.params)
        ll = self.log_theta_lik(state.theta)[np.arange(self.n), state.Q].sum()
        lq = self.unit_loglik(state.params.alpha0, eta, state.Q).sum()
        return float(ll + lq + self.log_prior(state))

    def _spline_quadratic(self, w: np.ndarray) -> float:
        if self.diagonal_prior:
            return float(np.sum(np.diag(self.spline_precision) * w * w))
        return float(w @ self.spline_precision @ w)

    # -- initial state --------------------------------------------------------

    def init_state(self, rng: np.random.Generator) -> ChainState:
        spec = self.spec
        theta = self._draw_theta(np.zeros((self.C, len(self.H), self.Hmax)), rng)
        theta = theta.permuted(np.argsort(theta.severity(), kind="stable"))
        params = MembershipParams.zeros(spec, self.D)
        if self.C > 1:
            if spec.link == PROPORTIONAL_ODDS:
                params.alpha0[:] = np.arange(1, self.C) - self.C / 2
        B = self.prior.B
        variances = VarianceComponents(np.full(self.E, B / 2), np.full(self.E, B / 2), B)
        state = ChainState(Q=np.zeros(self.n, dtype=np.int64), theta=theta, params=params, variances=variances)
        if self.C > 1:
            self.update_memberships(state, rng)
        state.proposal_scales = self._initial_scales(state)
        state.log_posterior = self.log_posterior(state)
        return state

    def _initial_scales(self, state: ChainState) -> dict:
        """Rough posterior sds from a logistic Fisher-information approximation."""
        var = self.prior.reg_prior_var
        scales = {}
        for e in range(self.E):
            k = self.n_intercepts(e)
            info = np.concatenate([np.full(k, 0.25 * self.n / max(k, 1)), 0.25 * np.sum(self._reg_columns**2, axis=0)])
            scales[f"reg{e}"] = 1.0 / np.sqrt(info + 1.0 / var)
        if self.D:
            nd = np.bincount(self.X.district, minlength=self.D)
            sv = state.variances.sigma_v
            scales["v"] = 2.0 / np.sqrt(0.25 * nd[None, :] + 1.0 / sv[:, None] ** 2)
        if self.K:
            colinfo = 0.25 * np.sum(self.X.spline**2, axis=0)
            prec = np.diag(self.spline_precision)
            sb = state.variances.sigma_b
            scales["w"] = 2.0 / np.sqrt(colinfo[None, :] + prec[None, :] / sb[:, None] ** 2)
        return scales

    # -- Gibbs steps ----------------------------------------------------------

    def update_memberships(self, state: ChainState, rng: np.random.Generator, eta=None) -> None:
        if self.n == 0:
            rng.uniform(size=0)
            return
        r = responsibilities_from_logs(self.log_pi(state.params, eta), self.log_theta_lik(state.theta))
        u = rng.uniform(size=self.n)
        cdf = np.cumsum(r, axis=1)
        state.Q = np.minimum((u[:, None] > cdf).sum(axis=1), self.C - 1).astype(np.int64)

    def category_counts(self, Q: np.ndarray) -> np.ndarray:
        T = self.Y.shape[1]
        counts = np.zeros((self.C, T, self.Hmax))
        if self.n:
            for t in range(T):
                idx = Q * self.Hmax + (self.Y[:, t] - 1)
                counts[:, t, :] = np.bincount(idx, minlength=self.C * self.Hmax).reshape(self.C, self.Hmax)
        return counts

    def _draw_theta(self, counts: np.ndarray, rng) -> ItemProbTable:
        shape = np.where(self.cat_mask[None], self.prior.dirichlet_conc + counts, 1.0)
        g = rng.standard_gamma(shape) * self.cat_mask[None]
        tiny = np.finfo(float).tiny
        g = np.where(self.cat_mask[None], np.maximum(g, tiny), 0.0)
        return ItemProbTable(g / g.sum(axis=2, keepdims=True), self.H.copy())

    def update_item_probs(self, state: ChainState, rng: np.random.Generator) -> None:
        state.theta = self._draw_theta(self.category_counts(state.Q), rng)

    def update_regression_block(self, state, rng, eta, adapters) -> np.ndarray:
        params = state.params
        var = self.prior.reg_prior_var
        for e in range(self.E):
            ad: _BlockAdapter = adapters[f"reg{e}"]
            x = self.reg_get(params, e)
            k = self.n_intercepts(e)
            cur = self.unit_loglik(params.alpha0, eta, state.Q).sum() - 0.5 * np.sum(x * x) / var
            y = ad.propose(x, rng)
            prop = params.copy()
            self.reg_set(prop, e, y)
            eta_new = eta.copy()
            if x.size > k:
                eta_new[:, e] += self._reg_columns @ (y[k:] - x[k:])
            if self.spec.link == PROPORTIONAL_ODDS and np.any(np.diff(prop.alpha0) <= 0):
                new = -np.inf
            else:
                new = self.unit_loglik(prop.alpha0, eta_new, state.Q).sum() - 0.5 * np.sum(y * y) / var
            accept = np.isfinite(new) and math.log(rng.uniform()) < new - cur
            ad.prop += 1
            if not np.isfinite(new):
                self.ledger["reg_nonfinite"] += 1
            if accept:
                ad.acc += 1
                self.reg_set(params, e, y)
                eta = eta_new
                self.ledger["reg"][0] += 1
            self.ledger["reg"][1] += 1
            if self._adapting:
                ad.store(self.reg_get(params, e))
        return eta

    def update_random_effects(self, state, rng, eta, adapter: _ScalarAdapter) -> np.ndarray:
        if not self.D:
            return eta
        params = state.params
        d_idx = self.X.district
        for e in range(self.E):
            sd = state.variances.sigma_v[e]
            v = params.v[e]
            prop = v + adapter.scale[e] * rng.standard_normal(self.D)
            eta_new = eta.copy()
            eta_new[:, e] += (prop - v)[d_idx]
            ll_old = np.bincount(d_idx, weights=self.unit_loglik(params.alpha0, eta, state.Q), minlength=self.D)
            ll_new_u = self.unit_loglik(params.alpha0, eta_new, state.Q)
            with np.errstate(invalid="ignore"):
                ll_new = np.bincount(d_idx, weights=ll_new_u, minlength=self.D)
            log_ratio = ll_new - ll_old - 0.5 * (prop**2 - v**2) / sd**2
            u = np.log(rng.uniform(size=self.D))
            acc = np.isfinite(log_ratio) & (u < log_ratio)
            adapter.record(acc.astype(float), where=(e,))
            params.v[e] = np.where(acc, prop, v)
            eta[:, e] += (params.v[e] - v)[d_idx]
            self.ledger["v"][0] += int(acc.sum())
            self.ledger["v"][1] += self.D
        return eta

    def update_spline_coeffs(self, state, rng, eta, adapter: _ScalarAdapter) -> np.ndarray:
        if not self.K:
            return eta
        params = state.params
        P = self.spline_precision
        Z = self.X.spline
        for e in range(self.E):
            sb2 = state.variances.sigma_b[e] ** 2
            w = params.w[e]
            cur_ll = self.unit_loglik(params.alpha0, eta, state.Q).sum()
            noise = rng.standard_normal(self.K)
            logu = np.log(rng.uniform(size=self.K))
            for k in range(self.K):
                delta = adapter.scale[e, k] * noise[k]
                eta_e = eta[:, e] + delta * Z[:, k]
                eta_new = eta.copy()
                eta_new[:, e] = eta_e
                new_ll = self.unit_loglik(params.alpha0, eta_new, state.Q).sum()
                if self.diagonal_prior:
                    dquad = P[k, k] * ((w[k] + delta) ** 2 - w[k] ** 2)
                else:
                    dquad = 2 * delta * (P[k] @ w) + delta * delta * P[k, k]
                log_ratio = new_ll - cur_ll - 0.5 * dquad / sb2
                ok = bool(np.isfinite(log_ratio) and logu[k] < log_ratio)
                adapter.record(float(ok), where=(e, k))
                if ok:
                    w[k] += delta
                    eta = eta_new
                    cur_ll = new_ll
                    self.ledger["w"][0] += 1
                self.ledger["w"][1] += 1
        return eta

    def update_variances(self, state: ChainState, rng: np.random.Generator) -> None:
        vs = state.variances
        p = state.params
        for e in range(self.E):
            if self.D:
                vs.sigma_v[e] = draw_sd(self.prior.sd_v, self.D, float(np.sum(p.v[e] ** 2)), vs.sigma_v[e], rng)
            if self.K:
                vs.sigma_b[e] = draw_sd(self.prior.sd_b, self.K, self._spline_quadratic(p.w[e]), vs.sigma_b[e], rng)

    def relabel(self, state: ChainState, ordered_link: bool = False) -> bool:
        """Sort classes by severity.

        Under the logit link membership coefficients are re-referenced to the
        new class 1.  Under proportional odds the class order is part of the
        model, so sorting is applied only when ``ordered_link`` is set (early
        burn-in, to leave modes whose classes are out of severity order).
        """
        if self.C == 1 or (self.spec.link != LOGIT and not ordered_link):
            return False
        order = np.argsort(state.theta.severity(), kind="stable")
        if np.array_equal(order, np.arange(self.C)):
            return False
        inverse = np.empty_like(order)
        inverse[order] = np.arange(self.C)
        state.Q = inverse[state.Q]
        state.theta = state.theta.permuted(order)
        if self.spec.link != LOGIT:
            return True
        p = state.params
        p.alpha0 = _rereference(p.alpha0, order)
        for name in ("alpha1", "gamma", "beta", "w", "v"):
            setattr(p, name, _rereference(getattr(p, name), order))
        vs = state.variances
        for name in ("sigma_v", "sigma_b"):
            s = getattr(vs, name)
            full = np.concatenate([[s[order[0] - 1] if order[0] > 0 else s[0]], s])
            setattr(vs, name, full[order[1:]])
        return True

    # -- driver ---------------------------------------------------------------

    def sweep(self, state: ChainState, rng: np.random.Generator, adapters: dict, ordering: bool = False) -> None:
        eta = self.eta(state.params)
        if self.C > 1:
            self.update_memberships(state, rng, eta)
        self.update_item_probs(state, rng)
        if self.E:
            eta = self.update_regression_block(state, rng, eta, adapters)
            eta = self.update_random_effects(state, rng, eta, adapters.get("v"))
            eta = self.update_spline_coeffs(state, rng, eta, adapters.get("w"))
            self.update_variances(state, rng)
        if self.relabel(state, ordering):
            eta = self.eta(state.params)
        self._eta = eta

    def make_adapters(self, state: ChainState) -> dict:
        cfg = self.config
        ad = {}
        for e in range(self.E):
            ad[f"reg{e}"] = _BlockAdapter(state.proposal_scales[f"reg{e}"], cfg.target_accept_block, cfg.burn_in)
        if self.D:
            ad["v"] = _ScalarAdapter(state.proposal_scales["v"], cfg.target_accept)
        if self.K:
            ad["w"] = _ScalarAdapter(state.proposal_scales["w"], cfg.target_accept)
        return ad

    def scales_of(self, adapters: dict) -> dict:
        out = {}
        for key, ad in adapters.items():
            if isinstance(ad, _BlockAdapter):
                out[key] = np.diag(ad.chol) * math.exp(ad.log_lambda)
            else:
                out[key] = ad.scale.copy()
        return out


def _rereference(block: np.ndarray, order: np.ndarray) -> np.ndarray:
    """Rows of a class-indexed block (class 1 implicit zero) after relabelling."""
    full = np.concatenate([np.zeros((1,) + block.shape[1:]), block], axis=0)
    new = full[order] - full[order[0]]
    return new[1:].copy()


# ---------------------------------------------------------------------------
# chain driver and output


BLOCK_NAMES = ("theta", "alpha0", "alpha1", "gamma", "beta", "w", "v", "sigma_v", "sigma_b")
SCALAR_TRACES = ("deviance", "log_posterior")


@dataclass
class ChainOutput:
    """Thinned trace of one chain.  ``draws[name]`` has the kept draws on axis 0."""

    spec: ModelSpec
    prior: PriorSpec
    config: SamplerConfig
    chain: int
    iterations: np.ndarray
    draws: dict
    acceptance: dict
    n_categories: np.ndarray
    n_districts: int
    proposal_scales: dict = field(default_factory=dict)

    @property
    def n_draws(self) -> int:
        return int(self.iterations.shape[0])

    @property
    def seed(self) -> int:
        return self.config.seed

    @property
    def deviance(self) -> np.ndarray:
        return self.draws["deviance"]

    def theta(self, m: int) -> ItemProbTable:
        return ItemProbTable(self.draws["theta"][m], self.n_categories)

    def params(self, m: int) -> MembershipParams:
        return MembershipParams(self.spec.link, *(self.draws[name][m] for name in MembershipParams.BLOCKS))

    def variances(self, m: int) -> VarianceComponents:
        return VarianceComponents(self.draws["sigma_v"][m], self.draws["sigma_b"][m], self.prior.B)

    def subset(self, idx) -> "ChainOutput":
        idx = np.asarray(idx)
        return ChainOutput(
            spec=self.spec,
            prior=self.prior,
            config=self.config,
            chain=self.chain,
            iterations=self.iterations[idx],
            draws={k: v[idx] for k, v in self.draws.items()},
            acceptance=dict(self.acceptance),
            n_categories=self.n_categories,
            n_districts=self.n_districts,
            proposal_scales=self.proposal_scales,
        )


def _record(buf: dict, m: int, state: ChainState, sampler: Sampler) -> None:
    buf["theta"][m] = state.theta.probs
    for name in MembershipParams.BLOCKS:
        buf[name][m] = getattr(state.params, name)
    buf["sigma_v"][m] = state.variances.sigma_v
    buf["sigma_b"][m] = state.variances.sigma_b
    buf["deviance"][m] = sampler.deviance(state)
    buf["log_posterior"][m] = state.log_posterior
    buf["class_sizes"][m] = np.bincount(state.Q, minlength=sampler.C)


def _allocate(n_kept: int, state: ChainState, C: int) -> dict:
    buf = {"theta": np.zeros((n_kept,) + state.theta.probs.shape)}
    for name in MembershipParams.BLOCKS:
        buf[name] = np.zeros((n_kept,) + getattr(state.params, name).shape)
    buf["sigma_v"] = np.zeros((n_kept,) + state.variances.sigma_v.shape)
    buf["sigma_b"] = np.zeros((n_kept,) + state.variances.sigma_b.shape)
    buf["deviance"] = np.zeros(n_kept)
    buf["log_posterior"] = np.zeros(n_kept)
    buf["class_sizes"] = np.zeros((n_kept, C), dtype=np.int64)
    return buf


def run_chain(
    spec: ModelSpec,
    data: ItemResponseMatrix,
    basis: DRBasis | None,
    prior: PriorSpec = PriorSpec(),
    config: SamplerConfig = SamplerConfig(),
    chain: int = 0,
    checkpoint_dir: Path | None = None,
    resume: Path | None = None,
    progress_every: int = 0,
    checkpoint_every: int = 0,
) -> ChainOutput:
    """Run one chain; on a non-finite posterior write a checkpoint and raise NumericalError.

    ``checkpoint_every > 0`` also writes ``chain<k>.ckpt.npz`` under
    ``checkpoint_dir`` every that many iterations; ``resume`` continues
    from such a file and reproduces the uninterrupted chain exactly.
    """
    sampler = Sampler(spec, data, basis, prior, config)
    if resume is not None:
        state, rng, adapters, t0, buf, m0, ledger = load_checkpoint(resume, sampler)
        sampler.ledger = ledger
    else:
        rng = chain_rng(config.seed, chain)
        state = sampler.init_state(rng)
        adapters = sampler.make_adapters(state)
        buf = _allocate(config.n_kept, state, sampler.C)
        t0, m0 = 0, 0
    m = m0
    window = config.adapt_window
    ckpt_path = Path(checkpoint_dir) / f"chain{chain}.ckpt.npz" if checkpoint_dir is not None else None
    frozen_scales = sampler.scales_of(adapters) if t0 >= config.burn_in else None
    for t in range(t0 + 1, config.iterations + 1):
        sampler._adapting = t <= config.burn_in
        rng_state = rng.bit_generator.state
        last_good = state.copy() if ckpt_path is not None else None
        sampler.sweep(state, rng, adapters, ordering=t <= config.ordered_burn_in * config.burn_in)
        state.log_posterior = sampler.log_posterior(state, sampler._eta)
        if not math.isfinite(state.log_posterior):
            path = None
            if ckpt_path is not None:
                path = save_checkpoint(ckpt_path, sampler, last_good, rng_state, adapters, t - 1, buf, m)
            raise NumericalError(f"non-finite log posterior at iteration {t} (chain {chain})", path)
        if sampler._adapting and t % window == 0:
            for ad in adapters.values():
                ad.adapt()
        if t == config.burn_in:
            frozen_scales = sampler.scales_of(adapters)
        if config.keeps(t):
            _record(buf, m, state, sampler)
            m += 1
        if progress_every and t % progress_every == 0:
            log.info("chain %d: iteration %d/%d, deviance %.2f", chain, t, config.iterations, sampler.deviance(state))
        if ckpt_path is not None and checkpoint_every and t % checkpoint_every == 0 and t < config.iterations:
            save_checkpoint(ckpt_path, sampler, state, rng.bit_generator.state, adapters, t, buf, m)
    state.proposal_scales = sampler.scales_of(adapters)
    acceptance = {
        key: {"accepted": int(val[0]), "proposed": int(val[1])}
        for key, val in sampler.ledger.items()
        if isinstance(val, list)
    }
    acceptance["reg_nonfinite"] = {"accepted": 0, "proposed": int(sampler.ledger["reg_nonfinite"])}
    kept_iter = np.array([t for t in range(1, config.iterations + 1) if config.keeps(t)], dtype=np.int64)
    return ChainOutput(
        spec=spec,
        prior=prior,
        config=config,
        chain=chain,
        iterations=kept_iter,
        draws=buf,
        acceptance=acceptance,
        n_categories=data.schema.n_categories.copy(),
        n_districts=data.D,
        proposal_scales={"burn_in_end": frozen_scales, "final": state.proposal_scales},
    )


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path: Path, sampler: Sampler, state: ChainState, rng_state: dict, adapters: dict, t: int, buf: dict, m: int) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    arrays = {"Q": state.Q, "theta": state.theta.probs}
    for name in MembershipParams.BLOCKS:
        arrays[f"param_{name}"] = getattr(state.params, name)
    arrays["sigma_v"] = state.variances.sigma_v
    arrays["sigma_b"] = state.variances.sigma_b
    for key, ad in adapters.items():
        if isinstance(ad, _BlockAdapter):
            arrays[f"adapt_{key}_chol"] = ad.chol
            arrays[f"adapt_{key}_hist"] = ad.hist[: ad.n_hist]
        else:
            arrays[f"adapt_{key}_scale"] = ad.scale
            arrays[f"adapt_{key}_acc"] = ad.acc
            arrays[f"adapt_{key}_prop"] = ad.prop
    for key, val in buf.items():
        arrays[f"draw_{key}"] = val[:m]
    meta = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "iteration": t,
        "kept": m,
        "rng_state": rng_state,
        "spec": asdict(sampler.spec),
        "prior": sampler.prior.to_dict(),
        "config": sampler.config.to_dict(),
        "ledger": sampler.ledger,
        "adapters": {
            key: (
                {"log_lambda": ad.log_lambda, "batches": ad.batches, "acc": ad.acc, "prop": ad.prop}
                if isinstance(ad, _BlockAdapter)
                else {"batches": ad.batches}
            )
            for key, ad in adapters.items()
        },
        "arrays": sorted(arrays),
    }
    with path.open("wb") as fh:
        np.savez(fh, meta=np.array(json.dumps(meta, default=_json_default)), **arrays)
    return path


def _json_default(o):
    if isinstance(o, np.integer):
        return int(o)
    if isinstance(o, np.floating):
        return float(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(type(o))


def load_checkpoint(path: Path, sampler: Sampler):
    with np.load(path, allow_pickle=False) as z:
        meta = json.loads(str(z["meta"]))
        if meta.get("format") != CHECKPOINT_FORMAT or meta.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"{path}: not a version-{CHECKPOINT_VERSION} checkpoint")
        arrays = {k: z[k] for k in z.files if k != "meta"}
    for key, mine in (("spec", asdict(sampler.spec)), ("prior", sampler.prior.to_dict()), ("config", sampler.config.to_dict())):
        if json.loads(json.dumps(mine, default=_json_default)) != meta[key]:
            raise ValueError(f"{path}: checkpoint {key} does not match this run")
    params = MembershipParams(sampler.spec.link, *(arrays[f"param_{n}"] for n in MembershipParams.BLOCKS))
    state = ChainState(
        Q=arrays["Q"].astype(np.int64),
        theta=ItemProbTable(arrays["theta"], sampler.H.copy()),
        params=params,
        variances=VarianceComponents(arrays["sigma_v"], arrays["sigma_b"], sampler.prior.B),
    )
    state.proposal_scales = sampler._initial_scales(state)
    adapters = sampler.make_adapters(state)
    for key, ad in adapters.items():
        info = meta["adapters"][key]
        ad.batches = info["batches"]
        if isinstance(ad, _BlockAdapter):
            ad.chol = arrays[f"adapt_{key}_chol"]
            ad.log_lambda = info["log_lambda"]
            hist = arrays[f"adapt_{key}_hist"]
            ad.hist[: hist.shape[0]] = hist
            ad.n_hist = hist.shape[0]
            ad.acc, ad.prop = info["acc"], info["prop"]
        else:
            ad.scale = arrays[f"adapt_{key}_scale"].copy()
            ad.acc = arrays[f"adapt_{key}_acc"].copy()
            ad.prop = arrays[f"adapt_{key}_prop"].copy()
    rng = np.random.Generator(np.random.PCG64())
    rng.bit_generator.state = meta["rng_state"]
    m = meta["kept"]
    buf = _allocate(sampler.config.n_kept, state, sampler.C)
    for key in buf:
        buf[key][:m] = arrays[f"draw_{key}"]
    ledger = meta["ledger"]
    state.log_posterior = sampler.log_posterior(state)
    return state, rng, adapters, meta["iteration"], buf, m, ledger
