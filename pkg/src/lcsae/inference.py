"""Post-chain analytics: deviance CDFs, predictive p-values, counts, classification, ESS."""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp

from .basis import DRBasis, ThinPlateDesign
from .data import ItemResponseMatrix, PopulationCellTable
from .model import (
    DEMMLER_REINSCH,
    ModelError,
    linear_predictor,
    log_membership_from_eta,
    log_pattern_probs,
    make_covariates,
    responsibilities_from_logs,
)
from .sampler import ChainOutput

QUANTILE_METHOD = "median_unbiased"


def spline_design(chain: ChainOutput, basis: DRBasis | None):
    spec = chain.spec
    if not spec.use_spline:
        return None
    if basis is None:
        raise ModelError("spline model needs its basis")
    return basis if spec.basis == DEMMLER_REINSCH else ThinPlateDesign(basis)


def _quantiles(x, q, axis=0):
    return np.quantile(x, q, axis=axis, method=QUANTILE_METHOD)


# ---------------------------------------------------------------------------
# effective sample size


def autocorrelation(x, max_lag: int | None = None) -> np.ndarray:
    """Sample autocorrelations rho_0..rho_max_lag (biased estimator, FFT)."""
    x = np.asarray(x, dtype=float)
    n = x.size
    if max_lag is None:
        max_lag = n - 1
    xc = x - x.mean()
    nfft = 1 << (2 * n - 1).bit_length()
    f = np.fft.rfft(xc, nfft)
    acov = np.fft.irfft(f * np.conj(f), nfft)[: max_lag + 1] / n
    if acov[0] <= 0:
        out = np.zeros(max_lag + 1)
        out[0] = 1.0
        return out
    return acov / acov[0]


def ess(x) -> tuple[float, bool]:
    """Effective sample size by the initial positive sequence; returns (ess, degenerate)."""
    x = np.asarray(x, dtype=float)
    n = x.size
    if n < 2 or np.ptp(x) == 0:
        return float(n), True
    rho = autocorrelation(x)
    # pair sums Gamma_k = rho_{2k} + rho_{2k+1}, truncated at the first non-positive one
    m = (n - 1) // 2
    gam = rho[0 : 2 * m : 2] + rho[1 : 2 * m + 1 : 2]
    pos = np.flatnonzero(gam <= 0)
    k = pos[0] if pos.size else gam.size
    gam = np.minimum.accumulate(gam[:k]) if k else gam[:0]
    tau = -1.0 + 2.0 * gam.sum()
    tau = max(tau, 1.0 / np.log10(max(n, 10)))
    return float(min(n / tau, n * np.log10(max(n, 10)))), False


def scalar_traces(chain: ChainOutput) -> dict[str, np.ndarray]:
    """Flatten every block into named scalar traces, e.g. ``alpha0[2]`` or ``theta[1,2,3]`` (1-based)."""
    out = {}
    for name, arr in chain.draws.items():
        if name == "class_sizes":
            continue
        if name == "theta":
            H = chain.n_categories
            for c in range(arr.shape[1]):
                for t in range(arr.shape[2]):
                    for h in range(int(H[t])):
                        out[f"theta[{c + 1},{t + 1},{h + 1}]"] = arr[:, c, t, h]
            continue
        if arr.ndim == 1:
            out[name] = arr
            continue
        flat = arr.reshape(arr.shape[0], -1)
        for j, idx in enumerate(np.ndindex(*arr.shape[1:])):
            out[f"{name}[{','.join(str(i + 1) for i in idx)}]"] = flat[:, j]
    return out


@dataclass
class ParameterSummary:
    name: str
    mean: float
    sd: float
    q025: float
    q50: float
    q975: float
    ess: float
    degenerate: bool
    acf: tuple


SUMMARY_LAGS = (1, 5, 10, 50)


def chain_summary(chain: ChainOutput, lags=SUMMARY_LAGS) -> list[ParameterSummary]:
    if chain.n_draws < 10:
        warnings.warn(f"chain has only {chain.n_draws} kept draws; summaries are unreliable", RuntimeWarning)
    out = []
    for name, x in scalar_traces(chain).items():
        e, degenerate = ess(x)
        max_lag = min(max(lags), x.size - 1)
        rho = autocorrelation(x, max_lag) if x.size > 1 else np.ones(1)
        acf = tuple(float(rho[k]) if k <= max_lag else float("nan") for k in lags)
        q = _quantiles(x, [0.025, 0.5, 0.975]) if x.size else [np.nan] * 3
        out.append(
            ParameterSummary(
                name=name,
                mean=float(x.mean()),
                sd=float(x.std(ddof=1)) if x.size > 1 else 0.0,
                q025=float(q[0]),
                q50=float(q[1]),
                q975=float(q[2]),
                ess=e,
                degenerate=degenerate,
                acf=acf,
            )
        )
    return out


@dataclass
class MixingReport:
    rows: list  # (parameter, ess_dr, ess_tp, ratio)
    trace_iterations: np.ndarray
    traces: dict  # parameter -> (dr trace, tp trace)

    def ratio(self, name: str) -> float:
        for row in self.rows:
            if row[0] == name:
                return row[3]
        raise KeyError(name)


COMPARABLE_BLOCKS = ("alpha0", "alpha1", "gamma", "beta", "v", "sigma_v", "deviance")


def compare_mixing(chain_dr: ChainOutput, chain_tp: ChainOutput, trace_params=("beta[1]",)) -> MixingReport:
    """ESS ratio DR/TP for the parameters both parameterizations share."""
    a, b = chain_dr.config, chain_tp.config
    if (a.iterations, a.burn_in, a.thin) != (b.iterations, b.burn_in, b.thin):
        raise ValueError("mixing comparison needs matched iterations, burn-in and thinning")
    sa, sb = chain_dr.spec, chain_tp.spec
    if (sa.n_classes, sa.link, sa.n_knots) != (sb.n_classes, sb.link, sb.n_knots):
        raise ValueError("mixing comparison needs the same model apart from the basis")
    ta, tb = scalar_traces(chain_dr), scalar_traces(chain_tp)
    rows = []
    for name in ta:
        if name.split("[")[0] not in COMPARABLE_BLOCKS or name not in tb:
            continue
        ea, eb = ess(ta[name])[0], ess(tb[name])[0]
        rows.append((name, ea, eb, ea / eb if eb > 0 else float("inf")))
    traces = {p: (ta[p], tb[p]) for p in trace_params if p in ta and p in tb}
    return MixingReport(rows=rows, trace_iterations=chain_dr.iterations.copy(), traces=traces)


# ---------------------------------------------------------------------------
# deviance CDFs


@dataclass
class DevianceCDF:
    label: str
    draws: np.ndarray  # sorted
    grid: np.ndarray
    ecdf: np.ndarray

    def quantile(self, q) -> np.ndarray:
        return _quantiles(self.draws, q)


def ecdf(sorted_draws: np.ndarray, grid: np.ndarray) -> np.ndarray:
    return np.searchsorted(sorted_draws, grid, side="right") / sorted_draws.size


def deviance_cdf(chains, labels=None, grid_size: int = 200) -> list[DevianceCDF]:
    chains = list(chains)
    if labels is None:
        labels = [f"C={c.spec.n_classes}" if isinstance(c, ChainOutput) else f"model{i + 1}" for i, c in enumerate(chains)]
    draws = [np.sort(np.asarray(c.deviance if isinstance(c, ChainOutput) else c, dtype=float)) for c in chains]
    if not chains or any(d.size == 0 for d in draws):
        raise ValueError("deviance CDF needs at least one draw per model")
    lo = min(d[0] for d in draws)
    hi = max(d[-1] for d in draws)
    grid = np.linspace(lo, hi, grid_size) if hi > lo else np.array([lo])
    return [DevianceCDF(label, d, grid, ecdf(d, grid)) for label, d in zip(labels, draws)]


# ---------------------------------------------------------------------------
# posterior predictive p-values


@dataclass
class PPCReport:
    pvalues: np.ndarray  # for included units
    units: np.ndarray  # 0-based indices of included units
    n_excluded: int
    n_draws: int

    SUMMARY = ("p.025", "p.25", "mean", "p.5", "p.75", "p.975")

    def summary(self) -> dict[str, float]:
        p = self.pvalues
        if p.size == 0:
            return {k: float("nan") for k in self.SUMMARY}
        q = _quantiles(p, [0.025, 0.25, 0.5, 0.75, 0.975])
        return dict(zip(self.SUMMARY, [q[0], q[1], float(p.mean()), q[2], q[3], q[4]]))


def ppc_key(seed: int, iteration: int) -> np.random.Generator:
    """Counter-based stream for one kept draw, keyed by its iteration number."""
    key = np.random.SeedSequence([seed, int(iteration)]).generate_state(2, dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


def _draw_categorical(cdf: np.ndarray, u: np.ndarray) -> np.ndarray:
    return np.minimum((u[:, None] > cdf).sum(axis=1), cdf.shape[1] - 1)


def membership_probs_matrix(chain: ChainOutput, m: int, X) -> np.ndarray:
    params = chain.params(m)
    return np.exp(log_membership_from_eta(params.link, params.alpha0, linear_predictor(params, X)))


def ppc_pvalues(chain: ChainOutput, data: ItemResponseMatrix, basis: DRBasis | None, seed: int = 0) -> PPCReport:
    """Per-unit p-values of ``d(Y, Y*) > d(Y*, Y**)`` with ``d`` the L1 distance."""
    spec = chain.spec
    X = make_covariates(spec, spline_design(chain, basis), data.age, data.sex, data.marital_matrix, data.district)
    Y = data.responses
    n, T = Y.shape
    H = data.schema.n_categories
    keep = ~np.all(Y == 1, axis=1)
    units = np.flatnonzero(keep)
    Yk = Y[units]
    nk = units.size
    hits = np.zeros(nk)
    C = spec.n_classes
    for m in range(chain.n_draws):
        rng = ppc_key(seed, chain.iterations[m])
        u = rng.uniform(size=(n, 2 + 2 * T))[units]
        pi = membership_probs_matrix(chain, m, X)[units] if C > 1 else np.ones((nk, 1))
        cdf_pi = np.cumsum(pi, axis=1)
        c1 = _draw_categorical(cdf_pi, u[:, 0])
        c2 = _draw_categorical(cdf_pi, u[:, 1])
        theta = chain.draws["theta"][m]
        d_obs = np.zeros(nk)
        d_rep = np.zeros(nk)
        for t in range(T):
            h = int(H[t])
            cdf_t = np.cumsum(theta[:, t, :h], axis=1)
            y1 = np.minimum((u[:, 2 + 2 * t, None] > cdf_t[c1]).sum(axis=1), h - 1) + 1
            y2 = np.minimum((u[:, 3 + 2 * t, None] > cdf_t[c2]).sum(axis=1), h - 1) + 1
            d_obs += np.abs(Yk[:, t] - y1)
            d_rep += np.abs(y1 - y2)
        hits += d_obs > d_rep
    pv = hits / max(chain.n_draws, 1)
    return PPCReport(pvalues=pv, units=units, n_excluded=int(n - nk), n_draws=chain.n_draws)


# ---------------------------------------------------------------------------
# classification


@dataclass
class Classification:
    probs: np.ndarray  # (n, C) averaged responsibilities
    map_class: np.ndarray  # 0-based
    tie: np.ndarray

    def shares(self) -> np.ndarray:
        """Percentage of units assigned to each class."""
        n = self.map_class.size
        return 100.0 * np.bincount(self.map_class, minlength=self.probs.shape[1]) / max(n, 1)


def classify_units(chain: ChainOutput, data: ItemResponseMatrix, basis: DRBasis | None, tie_tol: float = 1e-12) -> Classification:
    spec = chain.spec
    C = spec.n_classes
    n = data.n
    if C == 1:
        return Classification(np.ones((n, 1)), np.zeros(n, dtype=np.int64), np.zeros(n, dtype=bool))
    X = make_covariates(spec, spline_design(chain, basis), data.age, data.sex, data.marital_matrix, data.district)
    total = np.zeros((n, C))
    for m in range(chain.n_draws):
        params = chain.params(m)
        log_pi = log_membership_from_eta(params.link, params.alpha0, linear_predictor(params, X))
        total += responsibilities_from_logs(log_pi, log_pattern_probs(chain.theta(m), data.responses))
    probs = total / max(chain.n_draws, 1)
    top = probs.max(axis=1, keepdims=True)
    near = probs >= top - tie_tol
    map_class = np.argmax(near, axis=1)
    return Classification(probs, map_class, near.sum(axis=1) > 1)


# ---------------------------------------------------------------------------
# small area counts


@dataclass
class CountEstimate:
    area: int  # small-area id (1-based) or district id for aggregates
    district: int
    age_class: str
    cls: int  # 1-based
    mean: float
    cv: float | None
    q025: float
    q50: float
    q975: float
    population: float
    draws: np.ndarray | None = field(default=None, repr=False)


@dataclass
class CountTables:
    areas: list[CountEstimate]
    districts: list[CountEstimate]
    area_draws: np.ndarray  # (M, J, C)
    district_draws: np.ndarray  # (M, D, C)
    area_population: np.ndarray  # (J,)


def count_draws(chain: ChainOutput, cells: PopulationCellTable, basis: DRBasis | None) -> tuple[np.ndarray, np.ndarray]:
    """Per-draw ``sum_{cells in area} N * P(class)``, streamed over draws: (M, J, C) and (J,)."""
    spec = chain.spec
    D = chain.n_districts
    if cells.L and (cells.district.min() < 1 or cells.district.max() > D):
        raise ModelError(f"cell district outside 1..{D}")
    if spec.use_spline and cells.L and basis is not None and np.any(basis.extrapolating(cells.age)):
        warnings.warn("some cell ages lie outside the fitted age range; the spline extrapolates", RuntimeWarning)
    A = cells.n_age_classes
    J = D * A
    area = cells.small_area - 1
    N = cells.count
    pop = np.bincount(area, weights=N, minlength=J) if cells.L else np.zeros(J)
    C = spec.n_classes
    out = np.zeros((chain.n_draws, J, C))
    if cells.L == 0:
        return out, pop
    X = make_covariates(spec, spline_design(chain, basis), cells.age, cells.sex, cells.marital_matrix, cells.district)
    # sparse area indicator applied as a dense (J, L) matrix keeps the reduction order fixed
    G = np.zeros((J, cells.L))
    G[area, np.arange(cells.L)] = N
    for m in range(chain.n_draws):
        pi = membership_probs_matrix(chain, m, X) if C > 1 else np.ones((cells.L, 1))
        out[m] = G @ pi
    return out, pop


def _summaries(draws: np.ndarray, pops, ids, districts, labels, keep_draws: bool) -> list[CountEstimate]:
    M, K, C = draws.shape
    rows = []
    mean = draws.mean(axis=0)
    sd = draws.std(axis=0, ddof=1) if M > 1 else np.zeros((K, C))
    q = _quantiles(draws, [0.025, 0.5, 0.975], axis=0) if M else np.zeros((3, K, C))
    for k in range(K):
        for c in range(C):
            mu = float(mean[k, c])
            rows.append(
                CountEstimate(
                    area=int(ids[k]),
                    district=int(districts[k]),
                    age_class=labels[k],
                    cls=c + 1,
                    mean=mu,
                    cv=100.0 * float(sd[k, c]) / mu if mu > 0 else None,
                    q025=float(q[0, k, c]),
                    q50=float(q[1, k, c]),
                    q975=float(q[2, k, c]),
                    population=float(pops[k]),
                    draws=draws[:, k, c].copy() if keep_draws else None,
                )
            )
    return rows


def estimate_counts(chain: ChainOutput, cells: PopulationCellTable, basis: DRBasis | None, keep_draws: bool = False) -> CountTables:
    draws, pop = count_draws(chain, cells, basis)
    A = cells.n_age_classes
    D = chain.n_districts
    J = D * A
    age_labels = cells.age_classes.labels()
    ids = np.arange(1, J + 1)
    districts = (ids - 1) // A + 1
    labels = [age_labels[(j - 1) % A] for j in ids]
    areas = _summaries(draws, pop, ids, districts, labels, keep_draws)
    ddraws = draws.reshape(draws.shape[0], D, A, -1).sum(axis=2)
    dpop = pop.reshape(D, A).sum(axis=1)
    dids = np.arange(1, D + 1)
    agg = _summaries(ddraws, dpop, dids, dids, ["all"] * D, keep_draws)
    return CountTables(areas=areas, districts=agg, area_draws=draws, district_draws=ddraws, area_population=pop)


# ---------------------------------------------------------------------------
# smooth age effect


def age_effect_draws(chain: ChainOutput, basis: DRBasis | None, ages, equation: int = 0) -> np.ndarray:
    """(M, len(ages)) draws of ``beta*age + spline(age)`` for one linear predictor."""
    ages = np.asarray(ages, dtype=float)
    beta = chain.draws["beta"][:, equation]
    out = beta[:, None] * ages[None, :]
    design = spline_design(chain, basis)
    if design is not None:
        Z = design.columns(ages)
        out = out + chain.draws["w"][:, equation, :] @ Z.T
    return out


def identified_age_effect(chain: ChainOutput, basis, data: ItemResponseMatrix, ages, equation: int = 0):
    """Age effect and intercepts/cutpoints in a form free of the location confound.

    The curve is centred on its mean over the sampled units and the
    intercepts absorb the sample mean of ``f(age) + v[district]``, so a
    constant moved between the curve, the district effects and the
    intercepts leaves both outputs unchanged.  Returns (curves (M, len(ages)),
    alpha0 (M, C-1)).
    """
    curves = age_effect_draws(chain, basis, ages, equation)
    f_mean = age_effect_draws(chain, basis, data.age, equation).mean(axis=1)
    shift = f_mean.copy()
    if chain.spec.use_district and chain.draws["v"].shape[-1]:
        shift += chain.draws["v"][:, equation, data.district - 1].mean(axis=1)
    alpha0 = chain.draws["alpha0"] + shift[:, None]
    return curves - f_mean[:, None], alpha0


def log_likelihood_marginal(chain: ChainOutput, data: ItemResponseMatrix, basis, m: int) -> float:
    """``log L(Y | parameters)`` with classes summed out for draw ``m``."""
    spec = chain.spec
    X = make_covariates(spec, spline_design(chain, basis), data.age, data.sex, data.marital_matrix, data.district)
    params = chain.params(m)
    log_pi = log_membership_from_eta(params.link, params.alpha0, linear_predictor(params, X))
    return float(logsumexp(log_pi + log_pattern_probs(chain.theta(m), data.responses), axis=1).sum())
