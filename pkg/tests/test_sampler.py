import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats
from scipy.integrate import cumulative_trapezoid
from scipy.special import betaln, expit, gammaln

from lcsae.basis import build_basis
from lcsae.data import ItemResponseMatrix, ItemSchema
from lcsae.model import LOGIT, PROPORTIONAL_ODDS, ItemProbTable, ModelSpec
from lcsae.sampler import (
    ChainState,
    NumericalError,
    PriorSpec,
    Sampler,
    SamplerConfig,
    SdPrior,
    draw_sd,
    load_checkpoint,
    run_chain,
    sd_log_conditional,
)
from lcsae.simulate import default_truth, simulate

TINY = ModelSpec(n_classes=2, use_sex=False, use_spline=False, use_district=False)


def _tiny_data(Y, n_districts=1):
    Y = np.asarray(Y)
    n = Y.shape[0]
    schema = ItemSchema(tuple((f"i{t}", 2) for t in range(Y.shape[1])))
    return ItemResponseMatrix(schema, Y, np.full(n, 50), np.zeros(n), np.zeros(n), np.ones(n, dtype=int), n_districts)


def _small_fit_data(seed=3, n=300, C=3):
    truth = default_truth(C=C, T=4, n_sample=n, n_districts=3)
    sim = simulate(truth, seed)
    basis = build_basis(sim.data.age, 5)
    return sim, basis


def _state(sampler, seed=0):
    return sampler.init_state(np.random.default_rng(seed))


# -- memberships --------------------------------------------------------------


def test_membership_rate_single_unit():
    # theta identical across classes, cutpoint logit(0.3): P(class 1) = 0.3
    s = Sampler(TINY, _tiny_data([[1, 1]]), None)
    state = _state(s)
    state.theta = ItemProbTable(np.full((2, 2, 2), 0.5), np.array([2, 2]))
    state.params.alpha0[:] = np.log(0.3 / 0.7)
    rng = np.random.default_rng(1)
    hits = 0
    for _ in range(100_000):
        s.update_memberships(state, rng)
        hits += state.Q[0]
    assert abs(hits / 1e5 - 0.7) < 0.01


def test_membership_frequencies_chi_square():
    spec = ModelSpec(n_classes=3, use_sex=False, use_spline=False, use_district=False)
    s = Sampler(spec, _tiny_data(np.ones((5000, 2), dtype=int)), None)
    state = _state(s)
    state.theta = ItemProbTable(np.full((3, 2, 2), 0.5), np.array([2, 2]))
    state.params.alpha0[:] = [-0.4, 0.9]
    s.update_memberships(state, np.random.default_rng(2))
    cum = expit(np.array([-0.4, 0.9]))
    probs = np.diff(np.concatenate([[0], cum, [1]]))
    obs = np.bincount(state.Q, minlength=3)
    assert stats.chisquare(obs, probs * 5000).pvalue > 0.001


def test_forcing_theta_makes_memberships_deterministic():
    s = Sampler(TINY, _tiny_data([[1, 1], [2, 2], [1, 1]]), None)
    state = _state(s)
    state.theta = ItemProbTable(np.array([[[1.0, 0.0]] * 2, [[0.0, 1.0]] * 2]), np.array([2, 2]))
    rng = np.random.default_rng(0)
    for _ in range(50):
        s.update_memberships(state, rng)
        assert state.Q.tolist() == [0, 1, 0]


# -- item probabilities -------------------------------------------------------


def _theta_mean(s, Q, draws=20_000, seed=0):
    state = _state(s)
    state.Q = np.asarray(Q, dtype=np.int64)
    rng = np.random.default_rng(seed)
    acc = np.zeros_like(state.theta.probs)
    for _ in range(draws):
        s.update_item_probs(state, rng)
        acc += state.theta.probs
    return acc / draws


def test_item_probs_posterior_means():
    schema = ItemSchema((("a", 3),))
    n = 1000
    d = ItemResponseMatrix(schema, np.full((n, 1), 2), np.full(n, 50), np.zeros(n), np.zeros(n), np.ones(n, int), 1)
    s = Sampler(TINY, d, None)
    mean = _theta_mean(s, np.zeros(n), draws=5000)
    # class 0 holds everyone; class 1 is empty and gets the prior mean
    assert abs(mean[0, 0, 1] - 1001 / 1003) < 3e-4
    assert np.allclose(mean[1, 0], 1 / 3, atol=0.01)


def test_item_probs_zero_counts_mean_half():
    s = Sampler(TINY, _tiny_data([[1, 2]]), None)
    mean = _theta_mean(s, [0])
    assert np.allclose(mean[1], 0.5, atol=0.01)


def test_item_probs_respect_category_mask():
    schema = ItemSchema((("a", 2), ("b", 4)))
    d = ItemResponseMatrix(schema, [[1, 4], [2, 3]], [40, 50], [0, 1], [0, 0], [1, 1], 1)
    s = Sampler(TINY, d, None)
    state = _state(s)
    s.update_item_probs(state, np.random.default_rng(0))
    state.theta.check()
    assert np.all(state.theta.probs[:, 0, 2:] == 0)


# -- regression block ---------------------------------------------------------


def test_block_acceptance_tends_to_one_as_scale_shrinks():
    sim, basis = _small_fit_data()
    spec = ModelSpec(n_classes=3, n_knots=5)
    s = Sampler(spec, sim.data, basis)
    state = _state(s)
    adapters = s.make_adapters(state)
    adapters["reg0"].chol *= 1e-7
    s._adapting = False
    rng = np.random.default_rng(0)
    eta = s.eta(state.params)
    for _ in range(200):
        eta = s.update_regression_block(state, rng, eta, adapters)
    assert adapters["reg0"].acc / adapters["reg0"].prop > 0.98


def test_prior_only_regression_moments():
    d = ItemResponseMatrix(ItemSchema((("a", 2),)), np.zeros((0, 1), int), [], [], [], np.zeros(0, int), 1)
    spec = ModelSpec(n_classes=2, use_spline=False, use_district=False)
    out = run_chain(spec, d, None, config=SamplerConfig(iterations=22_000, burn_in=2000, thin=1, seed=5))
    a = out.draws["alpha1"][:, 0]
    # adaptive RW over N(0, 100); correlated draws so loose bands
    assert abs(a.mean()) < 1.0
    assert 85 < a.var() < 115


# -- standard deviations ------------------------------------------------------


def test_sd_flat_conditional_is_uniform():
    prior = SdPrior("uniform", B=16)
    rng = np.random.default_rng(0)
    x = np.array([draw_sd(prior, 0, 0.0, 1.0, rng) for _ in range(20_000)])
    assert stats.kstest(x, stats.uniform(0, 16).cdf).pvalue > 0.01


def _grid_cdf(prior, m, ss):
    logf = sd_log_conditional(prior, m, ss)
    grid = np.linspace(1e-6, prior.upper if np.isfinite(prior.upper) else 60.0, 200_001)
    lf = np.array([logf(g) for g in grid])
    dens = np.exp(lf - lf[np.isfinite(lf)].max())
    cdf = cumulative_trapezoid(dens, grid, initial=0)
    cdf /= cdf[-1]
    return lambda x: np.interp(x, grid, cdf)


def test_sd_draws_match_grid_cdf_uniform_prior():
    prior = SdPrior("uniform", B=16)
    m, ss = 12, 6.0
    rng = np.random.default_rng(1)
    x = np.array([draw_sd(prior, m, ss, 1.0, rng) for _ in range(100_000)])
    assert stats.kstest(x, _grid_cdf(prior, m, ss)).pvalue > 0.01


@pytest.mark.parametrize("prior", [SdPrior("half-cauchy", scale=1.0), SdPrior("inv-gamma", a=1.0, b=1.0)])
def test_sd_draws_match_grid_cdf_other_priors(prior):
    m, ss = 12, 6.0
    rng = np.random.default_rng(2)
    x, cur = [], 1.0
    for i in range(40_000):
        cur = draw_sd(prior, m, ss, cur, rng)
        if i % 4 == 0:
            x.append(cur)
    assert stats.kstest(np.array(x), _grid_cdf(prior, m, ss)).pvalue > 0.01


def test_sd_small_bound_piles_up_at_bound():
    prior = SdPrior("uniform", B=0.2)
    rng = np.random.default_rng(3)
    x = np.array([draw_sd(prior, 12, 50.0, 0.1, rng) for _ in range(2000)])
    assert np.all(x < 0.2) and np.mean(x > 0.19) > 0.5


# -- chain driver -------------------------------------------------------------


def test_config_keep_count():
    cfg = SamplerConfig(iterations=10, burn_in=7, thin=3)
    assert cfg.n_kept == 1 and [t for t in range(1, 11) if cfg.keeps(t)] == [10]
    assert SamplerConfig().n_kept == 35_000
    with pytest.raises(ValueError):
        SamplerConfig(iterations=5, burn_in=5)


def test_single_kept_draw():
    sim, basis = _small_fit_data(n=100)
    out = run_chain(ModelSpec(n_classes=3, n_knots=5), sim.data, basis, config=SamplerConfig(iterations=13, burn_in=10, thin=3))
    assert out.n_draws == 1 and out.iterations.tolist() == [13]


@pytest.fixture(scope="module")
def short_chains():
    sim, basis = _small_fit_data()
    spec = ModelSpec(n_classes=3, n_knots=5)
    cfg = SamplerConfig(iterations=600, burn_in=300, thin=2, seed=11)
    a = run_chain(spec, sim.data, basis, config=cfg)
    b = run_chain(spec, sim.data, basis, config=cfg)
    c = run_chain(spec, sim.data, basis, config=SamplerConfig(iterations=600, burn_in=300, thin=2, seed=12))
    return sim, basis, spec, cfg, a, b, c


def test_chain_determinism(short_chains):
    *_, a, b, c = short_chains
    for k in a.draws:
        assert np.array_equal(a.draws[k], b.draws[k])
    assert not np.array_equal(a.draws["theta"], c.draws["theta"])


def test_adaptation_frozen_after_burn_in(short_chains):
    *_, a, _, _ = short_chains
    ps = a.proposal_scales
    assert ps["burn_in_end"].keys() == ps["final"].keys()
    for k in ps["final"]:
        assert np.array_equal(ps["burn_in_end"][k], ps["final"][k])


def test_kept_states_satisfy_invariants(short_chains):
    sim, _, spec, _, a, _, _ = short_chains
    th = a.draws["theta"]
    mask = np.arange(th.shape[-1])[None, :] < a.n_categories[:, None]
    assert np.all(th >= 0) and np.all(th[..., ~mask] == 0)
    assert np.abs(th.sum(axis=-1) - 1).max() < 1e-12
    assert np.all(np.diff(a.draws["alpha0"], axis=-1) > 0)
    assert np.all((a.draws["sigma_v"] > 0) & (a.draws["sigma_v"] < 16))
    assert np.all((a.draws["sigma_b"] > 0) & (a.draws["sigma_b"] < 16))
    assert np.all(a.draws["class_sizes"].sum(axis=1) == sim.data.n)
    assert np.all(np.isfinite(a.draws["log_posterior"]))


def test_logit_chain_runs_and_keeps_classes_ordered():
    sim, basis = _small_fit_data(n=200)
    spec = ModelSpec(n_classes=3, link=LOGIT, n_knots=5)
    out = run_chain(spec, sim.data, basis, config=SamplerConfig(iterations=200, burn_in=100, thin=1, seed=2))
    theta = out.draws["theta"]
    H = out.n_categories
    sev = np.zeros(theta.shape[:2])
    for t, h in enumerate(H):
        sev += (theta[:, :, t, :h] * np.arange(h)).sum(axis=-1) / (h - 1)
    assert np.all(np.diff(sev, axis=1) >= 0)
    assert out.draws["alpha1"].shape == (100, 2)


def test_relabel_logit_preserves_membership_probs():
    sim, basis = _small_fit_data(n=150)
    spec = ModelSpec(n_classes=3, link=LOGIT, n_knots=5)
    s = Sampler(spec, sim.data, basis)
    state = _state(s, 4)
    rng = np.random.default_rng(4)
    p = state.params
    p.alpha0[:] = rng.normal(size=2)
    p.alpha1[:] = rng.normal(size=2)
    p.beta[:] = rng.normal(scale=0.01, size=2)
    p.v[:] = rng.normal(size=p.v.shape)
    state.theta = state.theta.permuted(np.array([2, 0, 1]))
    before = s.log_pi(p)
    Q = state.Q.copy()
    order = np.argsort(state.theta.severity(), kind="stable")
    assert not np.array_equal(order, np.arange(3))
    assert s.relabel(state)
    assert np.array_equal(np.argsort(state.theta.severity()), np.arange(3))
    # same unit, same physical class: log pi follows the permutation
    assert np.allclose(s.log_pi(state.params), before[:, order])
    assert np.array_equal(order[state.Q], Q)


def test_checkpoint_resume_reproduces_chain(tmp_path, short_chains):
    sim, basis, spec, cfg, a, _, _ = short_chains
    run_chain(spec, sim.data, basis, config=cfg, checkpoint_dir=tmp_path, checkpoint_every=250)
    ckpt = tmp_path / "chain0.ckpt.npz"
    assert ckpt.exists()
    # the file holds the last periodic checkpoint (iteration 500)
    resumed = run_chain(spec, sim.data, basis, config=cfg, resume=ckpt)
    for k in a.draws:
        assert np.array_equal(a.draws[k], resumed.draws[k]), k
    with pytest.raises(ValueError):
        load_checkpoint(ckpt, Sampler(spec, sim.data, basis, config=SamplerConfig(iterations=700, burn_in=300, thin=2, seed=11)))


def test_numerical_failure_writes_checkpoint(tmp_path, monkeypatch):
    sim, basis = _small_fit_data(n=100)
    spec = ModelSpec(n_classes=3, n_knots=5)
    calls = {"n": 0}
    orig = Sampler.log_posterior

    def flaky(self, state, eta=None):
        calls["n"] += 1
        return -np.inf if calls["n"] == 8 else orig(self, state, eta)

    monkeypatch.setattr(Sampler, "log_posterior", flaky)
    with pytest.raises(NumericalError) as err:
        run_chain(spec, sim.data, basis, config=SamplerConfig(iterations=20, burn_in=10, thin=1), checkpoint_dir=tmp_path)
    assert err.value.checkpoint is not None and err.value.checkpoint.exists()
    assert "iteration 7" in str(err.value)
    monkeypatch.setattr(Sampler, "log_posterior", orig)
    state, *_, t, _, _, _ = load_checkpoint(err.value.checkpoint, Sampler(spec, sim.data, basis, config=SamplerConfig(iterations=20, burn_in=10, thin=1)))
    assert isinstance(state, ChainState) and t == 6


# -- detailed balance ---------------------------------------------------------


def _enumeration_oracle(Y, prior_var=100.0):
    """Posterior of theta[c, t, category 2] for C=2, binary items, cutpoint-only PO membership."""
    Y = np.asarray(Y)
    n, T = Y.shape
    patterns, counts = np.unique(Y, axis=0, return_counts=True)
    a = np.linspace(-40, 40, 2001)
    log_prior_a = stats.norm(0, np.sqrt(prior_var)).logpdf(a)
    comps = []  # log weight, per-item (alpha, beta) for each class
    for ks in itertools.product(*[range(c + 1) for c in counts]):
        ks = np.array(ks)
        N0 = ks.sum()
        N1 = n - N0
        lw = np.sum(gammaln(counts + 1) - gammaln(ks + 1) - gammaln(counts - ks + 1))
        la = log_prior_a + N0 * np.log(expit(a)) + N1 * np.log(expit(-a))
        mx = la.max()
        lw += mx + np.log(np.trapezoid(np.exp(la - mx), a))
        params = []
        for t in range(T):
            s0 = np.sum(ks * (patterns[:, t] == 2))
            s1 = np.sum((counts - ks) * (patterns[:, t] == 2))
            lw += betaln(1 + s0, 1 + N0 - s0) + betaln(1 + s1, 1 + N1 - s1)
            params.append(((1 + s0, 1 + N0 - s0), (1 + s1, 1 + N1 - s1)))
        comps.append((lw, params))
    lws = np.array([c[0] for c in comps])
    wts = np.exp(lws - lws.max())
    return wts / wts.sum(), [c[1] for c in comps]


def test_detailed_balance_against_enumeration():
    Y = [[1, 1]] * 10 + [[2, 2]] * 10 + [[1, 2]] * 5 + [[2, 1]] * 5
    data = _tiny_data(Y)
    out = run_chain(TINY, data, None, config=SamplerConfig(iterations=42_000, burn_in=2000, thin=2, seed=9))
    wts, params = _enumeration_oracle(Y)
    edges = np.linspace(0, 1, 21)
    for t in range(2):
        # class labels can switch, so compare the class-pooled marginal
        expected = np.zeros(20)
        for w, p in zip(wts, params):
            for c in range(2):
                expected += 0.5 * w * np.diff(stats.beta(*p[t][c]).cdf(edges))
        pooled = out.draws["theta"][:, :, t, 1].ravel()
        observed = np.histogram(pooled, edges)[0] / pooled.size
        tv = 0.5 * np.abs(observed - expected).sum()
        assert tv < 0.05, tv


def test_cutpoint_posterior_against_quadrature():
    # a single response pattern: the cutpoint posterior is a mixture over class-1 counts
    Y = [[1, 1]] * 12
    data = _tiny_data(Y)
    prior = PriorSpec(reg_prior_var=4.0)
    out = run_chain(TINY, data, None, prior=prior, config=SamplerConfig(iterations=30_000, burn_in=2000, thin=2, seed=3))
    wts, _ = _enumeration_oracle(Y, prior_var=4.0)
    n = 12
    grid = np.linspace(-15, 15, 6001)
    second = 0.0
    for N0, w in enumerate(wts):
        la = stats.norm(0, 2).logpdf(grid) + N0 * np.log(expit(grid)) + (n - N0) * np.log(expit(-grid))
        dens = np.exp(la - la.max())
        second += w * np.trapezoid(grid**2 * dens, grid) / np.trapezoid(dens, grid)
    # the mean is zero by label symmetry; the second moment is label invariant
    a = out.draws["alpha0"][:, 0]
    assert abs(np.mean(a**2) / second - 1) < 0.1


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 2**31 - 1), st.sampled_from([PROPORTIONAL_ODDS, LOGIT]))
def test_sweep_keeps_state_valid(seed, link):
    rng = np.random.default_rng(seed)
    n = 40
    Y = rng.integers(1, 3, size=(n, 3))
    d = ItemResponseMatrix(
        ItemSchema((("a", 2), ("b", 2), ("c", 2))), Y, rng.integers(20, 90, n), rng.integers(0, 2, n),
        rng.integers(0, 4, n), rng.integers(1, 4, n), 3,
    )
    basis = build_basis(d.age, 3)
    spec = ModelSpec(n_classes=3, link=link, n_knots=3, use_marital=True)
    s = Sampler(spec, d, basis, config=SamplerConfig(iterations=20, burn_in=10, thin=1))
    s._adapting = True
    state = s.init_state(rng)
    ad = s.make_adapters(state)
    for _ in range(5):
        s.sweep(state, rng, ad)
        state.theta.check()
        state.params.check()
        assert np.isfinite(s.log_posterior(state))
        assert state.Q.min() >= 0 and state.Q.max() < 3
