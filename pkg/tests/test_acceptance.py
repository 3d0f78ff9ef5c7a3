"""End-to-end acceptance criteria; each test prints one PASS/FAIL line."""

import itertools
import sys
import time

import numpy as np
import pytest
from scipy.special import expit

from conftest import ACCEPTANCE_LINES
from lcsae.basis import build_basis, build_raw_design, covariance_identity_error, spline_eval, thin_plate_columns
from lcsae.cli import main
from lcsae.config import RunConfig
from lcsae.data import CovariateVector, ItemResponseMatrix, ItemSchema
from lcsae.inference import deviance_cdf, ess, estimate_counts, identified_age_effect, ppc_pvalues
from lcsae.model import LOGIT, PROPORTIONAL_ODDS, ItemProbTable, MembershipParams, ModelSpec
from lcsae.model import marginal_pattern_prob, responsibilities
from lcsae.sampler import PriorSpec, Sampler, SamplerConfig, run_chain
from lcsae.simulate import default_truth, simulate
from lcsae.trace import directory_digest

pytestmark = pytest.mark.slow


def record(n: int, name: str, ok: bool, detail: str) -> None:
    line = f"criterion {n}: {'PASS' if ok else 'FAIL'} {name} ({detail})"
    ACCEPTANCE_LINES.append(line)
    print(line)
    assert ok, line


# 1 ----------------------------------------------------------------------------


def test_c01_demmler_reinsch_basis():
    rng = np.random.default_rng(101)
    worst_orth = worst_cov = 0.0
    bad_null = 0
    n_pd = 0
    t0 = time.perf_counter()
    for i in range(100):
        K = int(rng.integers(2, 21))
        n = int(rng.integers(K + 3, 201))
        ages = np.round(rng.uniform(18, 95, n), 1)
        penalty = "absolute" if i % 2 else "raw"
        b = build_basis(ages, K, penalty)
        worst_orth = max(worst_orth, b.orthonormality_error())
        # penalty expressed in the transformed coordinates
        Dn = np.zeros((K + 2, K + 2))
        Dn[2:, 2:] = b.omega
        P = b.Rinv_U.T @ Dn @ b.Rinv_U
        lam = np.linalg.eigvalsh((P + P.T) / 2)
        bad_null += int(np.sum(np.abs(lam) <= 1e-10 * np.abs(lam).max()) != 2)
        err = covariance_identity_error(b)
        if err["literal"] is not None:
            n_pd += 1
            worst_cov = max(worst_cov, err["literal"])
    elapsed = time.perf_counter() - t0
    ok = worst_orth <= 1e-10 and bad_null == 0 and n_pd > 0 and worst_cov <= 1e-8 and elapsed < 10
    record(1, "DR basis", ok, f"orth {worst_orth:.1e}, null-space misses {bad_null}, cov {worst_cov:.1e} on {n_pd} PD, {elapsed:.1f}s")


# 2 ----------------------------------------------------------------------------


def test_c02_basis_equivalence():
    rng = np.random.default_rng(202)
    worst = 0.0
    for _ in range(50):
        K = int(rng.integers(2, 16))
        ages = rng.uniform(18, 95, int(rng.integers(K + 5, 200)))
        b = build_basis(ages, K)
        beta, w = rng.normal(scale=0.05), rng.normal(size=K)
        grid = np.linspace(ages.min(), ages.max(), 60)
        f_dr = spline_eval(b, beta, w, grid)
        c0, c1, coef = b.to_thin_plate(beta, w)
        f_tp = c0 + c1 * grid + thin_plate_columns(grid, b.knots) @ coef
        worst = max(worst, np.abs(f_dr - f_tp).max() / max(1.0, np.abs(f_dr).max()))
    record(2, "DR / thin-plate equivalence", worst <= 1e-8, f"max rel err {worst:.1e}")


# 3 ----------------------------------------------------------------------------


def test_c03_likelihood_brute_force():
    rng = np.random.default_rng(303)
    worst_sum = worst_resp = 0.0
    for _ in range(20):
        H = rng.integers(2, 4, size=3)
        C = 3
        theta = ItemProbTable.from_lists([[rng.dirichlet(np.ones(h)).tolist() for h in H] for _ in range(C)])
        spec = ModelSpec(n_classes=C, use_spline=False, use_district=False)
        p = MembershipParams.zeros(spec, 0)
        p.alpha0[:] = np.sort(rng.normal(size=2))
        p.alpha1[:] = rng.normal(size=1)
        sex = int(rng.integers(0, 2))
        cov = CovariateVector(age=60, sex_dummy=sex, marital_dummies=(0, 0, 0))
        cum = expit(p.alpha0 + p.alpha1[0] * sex)
        pi = np.diff(np.concatenate([[0.0], cum, [1.0]]))
        pats = list(itertools.product(*[range(1, h + 1) for h in H]))
        total = 0.0
        for pat in pats:
            total += marginal_pattern_prob(theta, p, cov, None, 1, pat, spec)
            joint = np.array([pi[c] * np.prod([theta.probs[c, t, pat[t] - 1] for t in range(3)]) for c in range(C)])
            r = responsibilities(theta, p, cov, None, 1, pat, spec)
            worst_resp = max(worst_resp, np.abs(r - joint / joint.sum()).max())
        worst_sum = max(worst_sum, abs(total - 1))
    ok = worst_sum <= 1e-10 and worst_resp <= 1e-12
    record(3, "pattern marginals and responsibilities", ok, f"sum err {worst_sum:.1e}, resp err {worst_resp:.1e}")


# 4 ----------------------------------------------------------------------------


def test_c04_dirichlet_posterior_mean():
    schema = ItemSchema((("a", 3), ("b", 2)))
    rng = np.random.default_rng(404)
    n = 60
    Y = np.column_stack([rng.integers(1, 4, n), rng.integers(1, 3, n)])
    data = ItemResponseMatrix(schema, Y, np.full(n, 50), np.zeros(n), np.zeros(n), np.ones(n, int), 1)
    spec = ModelSpec(n_classes=3, use_spline=False, use_district=False)
    s = Sampler(spec, data, None)
    state = s.init_state(np.random.default_rng(0))
    state.Q = np.where(np.arange(n) < 40, 0, 1).astype(np.int64)  # class 3 left empty
    counts = s.category_counts(state.Q)
    draws = np.zeros((100_000,) + counts.shape)
    g = np.random.default_rng(1)
    for m in range(draws.shape[0]):
        s.update_item_probs(state, g)
        draws[m] = state.theta.probs
    worst = 0.0
    for t, h in enumerate(schema.n_categories):
        size = counts[:, t, :h].sum(axis=1, keepdims=True)
        target = (1 + counts[:, t, :h]) / (h + size)
        se = draws[:, :, t, :h].std(axis=0) / np.sqrt(draws.shape[0])
        worst = max(worst, float(np.max(np.abs(draws[:, :, t, :h].mean(axis=0) - target) / se)))
    record(4, "Dirichlet posterior mean", worst <= 3, f"max |z| {worst:.2f} over 1e5 draws")


# 5 ----------------------------------------------------------------------------


def test_c05_parameter_recovery():
    seed = 2024
    truth = default_truth(C=3, T=5, n_sample=2000, link=PROPORTIONAL_ODDS, alpha1=-1.0)
    sim = simulate(truth, seed)
    basis = build_basis(sim.data.age, 12)
    spec = ModelSpec(n_classes=3, n_knots=12)
    cfg = SamplerConfig(iterations=20_000, burn_in=5000, thin=2, seed=seed)
    t0 = time.perf_counter()
    out = run_chain(spec, sim.data, basis, PriorSpec(), cfg)
    elapsed = time.perf_counter() - t0
    d = out.draws
    theta_err = float(np.abs(d["theta"].mean(axis=0) - truth.theta.probs).max())
    a1 = np.quantile(d["alpha1"][:, 0], [0.025, 0.975])
    a1_in = bool(a1[0] <= truth.alpha1[0] <= a1[1])
    lo, hi = np.quantile(sim.data.age, [0.05, 0.95])
    ages = np.arange(int(np.ceil(lo)), int(np.floor(hi)) + 1)
    curves, a0 = identified_age_effect(out, basis, sim.data, ages)
    # the truth in the same identified form
    f_mean = truth.f(sim.data.age)[:, 0].mean()
    v_mean = truth.v[0, sim.data.district - 1].mean()
    f_err = float(np.abs(curves.mean(axis=0) - (truth.f(ages)[:, 0] - f_mean)).max())
    a0_true = truth.alpha0 + f_mean + v_mean
    ci = np.quantile(a0, [0.025, 0.975], axis=0)
    a0_in = bool(np.all((ci[0] <= a0_true) & (a0_true <= ci[1])))
    ok = theta_err <= 0.05 and a1_in and a0_in and f_err <= 0.3 and elapsed < 900
    record(
        5, "parameter recovery", ok,
        f"theta err {theta_err:.3f}, alpha1 CI [{a1[0]:.2f},{a1[1]:.2f}], cutpoints in CI {a0_in}, f err {f_err:.3f}, {elapsed:.0f}s",
    )


# 6 ----------------------------------------------------------------------------


def test_c06_count_identities():
    truth = default_truth(C=3, T=3, n_sample=200)
    sim = simulate(truth, 6)
    basis = build_basis(sim.data.age, 5)
    out = run_chain(ModelSpec(n_classes=3, n_knots=5), sim.data, basis, config=SamplerConfig(iterations=120, burn_in=60, thin=2))
    tab = estimate_counts(out, sim.cells, basis)
    pop = tab.area_population
    add_err = float(np.abs(tab.area_draws.sum(axis=2) - pop[None, :]).max() / max(pop.max(), 1))
    # zero effects under the logit link give equal shares
    spec5 = ModelSpec(n_classes=5, link=LOGIT, n_knots=5)
    z = run_chain(spec5, sim.data, basis, config=SamplerConfig(iterations=12, burn_in=2, thin=1))
    for name in MembershipParams.BLOCKS:
        z.draws[name][:] = 0.0
    tz = estimate_counts(z, sim.cells, basis)
    share = tz.area_draws / np.where(tz.area_population > 0, tz.area_population, 1)[None, :, None]
    occupied = tz.area_population > 0
    uni_err = float(np.abs(share[:, occupied] - 0.2).max())
    ok = add_err <= 1e-12 and uni_err <= 1e-12
    record(6, "count identities", ok, f"additivity rel err {add_err:.1e}, uniform-share err {uni_err:.1e}")


# 7-9: replicated small fits ---------------------------------------------------


REPS = range(10)
REP_CFG = dict(iterations=3000, burn_in=1000, thin=2)


@pytest.fixture(scope="module")
def replicate_fits():
    fits = []
    for r in REPS:
        truth = default_truth(C=3, T=5, n_sample=600)
        sim = simulate(truth, 1000 + r)
        basis = build_basis(sim.data.age, 12)
        cfg = SamplerConfig(seed=5000 + r, **REP_CFG)
        c3 = run_chain(ModelSpec(n_classes=3, n_knots=12), sim.data, basis, config=cfg)
        c2 = run_chain(ModelSpec(n_classes=2, n_knots=12), sim.data, basis, config=cfg)
        tp = run_chain(ModelSpec(n_classes=3, n_knots=12, basis="thin-plate"), sim.data, basis, config=cfg)
        fits.append((sim, basis, c2, c3, tp))
    return fits


def test_c07_deviance_ordering(replicate_fits):
    wins = 0
    for _, _, c2, c3, _ in replicate_fits:
        cdf2, cdf3 = deviance_cdf([c2, c3])
        q2, q3 = cdf2.quantile([0.25, 0.5, 0.75]), cdf3.quantile([0.25, 0.5, 0.75])
        wins += int(np.all(q3 < q2))
    record(7, "C=3 deviance ECDF left of C=2", wins >= 9, f"{wins}/10 replications")


def test_c08_posterior_predictive(replicate_fits):
    good = 0
    means, mins = [], []
    for r, (sim, basis, _, c3, _) in zip(REPS, replicate_fits):
        rep = ppc_pvalues(c3, sim.data, basis, seed=r)
        m, lo = float(rep.pvalues.mean()), float(rep.pvalues.min())
        means.append(m)
        mins.append(lo)
        good += int(0.4 <= m <= 0.6 and lo >= 0.05)
    record(8, "posterior predictive p-values", good >= 9, f"{good}/10 ok; means {min(means):.3f}-{max(means):.3f}, min p {min(mins):.3f}")


def test_c09_mixing_dr_vs_tp(replicate_fits):
    wins = 0
    ratios = []
    for _, _, _, c3, tp in replicate_fits:
        e_dr, e_tp = ess(c3.draws["beta"][:, 0])[0], ess(tp.draws["beta"][:, 0])[0]
        ratios.append(e_dr / e_tp)
        wins += int(e_dr > e_tp)
    record(9, "ESS(beta) DR above thin-plate", wins >= 8, f"{wins}/10; median ratio {np.median(ratios):.1f}")


# 10 ---------------------------------------------------------------------------


def test_c10_reproducibility(tmp_path):
    sim_dir = tmp_path / "sim"
    assert main(["simulate", "--out", str(sim_dir), "--n", "200", "--seed", "10"]) == 0
    args = ["fit", "--responses", str(sim_dir / "responses.csv"), "--classes", "3", "--knots", "5",
            "--iterations", "200", "--burn-in", "100", "--thin", "2"]
    digests = {}
    for name, seed in (("a", 1), ("b", 1), ("c", 2)):
        assert main(args + ["--out", str(tmp_path / name), "--seed", str(seed)]) == 0
        assert main(["diagnose", str(tmp_path / name), "--out", str(tmp_path / name / "diag")]) == 0
        digests[name] = directory_digest(tmp_path / name / "chain0"), directory_digest(tmp_path / name / "diag")
    ok = digests["a"] == digests["b"] and digests["a"][0] != digests["c"][0] and digests["a"][1] != digests["c"][1]
    record(10, "byte-identical reruns", ok, f"same seed identical {digests['a'] == digests['b']}, other seed differs {digests['a'][0] != digests['c'][0]}")


# 11 ---------------------------------------------------------------------------


def test_c11_defaults_snapshot():
    cfg = RunConfig()
    ages = np.arange(18, 96)
    b = build_basis(ages, cfg.model.n_knots)
    raw = build_raw_design(ages, b.knots)
    expected_knots = np.quantile(np.unique(ages), np.arange(1, 13) / 13)
    ok = (
        cfg.model.n_classes == 5
        and cfg.model.n_knots == 12
        and np.allclose(b.knots.knots, expected_knots)
        and raw.Ztilde.shape[1] == 14
        and cfg.prior.sd_b.B == 16
        and cfg.prior.sd_v.B == 16
        and (cfg.sampler.iterations, cfg.sampler.burn_in, cfg.sampler.thin) == (120_000, 15_000, 3)
        and cfg.sampler.n_kept == 35_000
    )
    record(11, "defaults", ok, f"C={cfg.model.n_classes}, K={cfg.model.n_knots}, B={cfg.prior.B:g}, kept {cfg.sampler.n_kept}")


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-q", "-s"]))
