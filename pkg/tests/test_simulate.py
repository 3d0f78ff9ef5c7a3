import json

import numpy as np
import pytest

from lcsae.data import AgeClasses, DataError, PopulationCellTable, load_responses
from lcsae.model import LOGIT, ModelError
from lcsae.simulate import (
    TruthSpec,
    analytic_item_marginals,
    default_truth,
    graded_theta,
    scaled_logistic,
    simulate,
    write_simulation,
)


def test_graded_theta_is_ordered():
    th = graded_theta(4, [3, 3, 2])
    th.check()
    assert np.all(np.diff(th.severity()) > 0)


def test_scaled_logistic_shape():
    a = np.arange(18, 96)
    f = scaled_logistic(a, height=3, centre=62, width=7)
    assert np.all(np.diff(f) < 0)
    assert abs(f[a == 62][0]) < 1e-12 and np.abs(f).max() < 1.5


def test_simulation_is_deterministic():
    truth = default_truth(C=3, T=3, n_sample=300)
    a, b, c = simulate(truth, 1), simulate(truth, 1), simulate(truth, 2)
    assert np.array_equal(a.data.responses, b.data.responses) and np.array_equal(a.classes, b.classes)
    assert not np.array_equal(a.data.responses, c.data.responses)


def test_sample_comes_from_population():
    sim = simulate(default_truth(C=2, T=2, n_sample=500), 3)
    keys = {k: n for k, n in zip(sim.cells.keys(), sim.cells.count)}
    d = sim.data
    drawn = {}
    for k in zip(d.age.tolist(), d.sex.tolist(), d.marital.tolist(), d.district.tolist()):
        drawn[k] = drawn.get(k, 0) + 1
    assert all(n <= keys[k] for k, n in drawn.items())
    # expected class counts add to the area populations
    pop = np.bincount(sim.cells.small_area - 1, weights=sim.cells.count, minlength=sim.expected_counts.shape[0])
    assert np.allclose(sim.expected_counts.sum(axis=1), pop)


def test_single_class_marginals_equal_theta():
    truth = default_truth(C=1, T=3, n_sample=20_000)
    truth.cell_mean = 200.0
    sim = simulate(truth, 4)
    Y = sim.data.responses
    for t in range(3):
        freq = np.bincount(Y[:, t] - 1, minlength=3) / Y.shape[0]
        assert np.abs(freq - truth.theta.probs[0, t, :3]).max() < 0.01


@pytest.mark.parametrize("link", ["proportional-odds", LOGIT])
def test_large_sample_marginals_match_analytic(link):
    truth = default_truth(C=3, T=3, n_sample=30_000, link=link)
    truth.cell_mean = 300.0
    sim = simulate(truth, 5)
    expected = analytic_item_marginals(sim)
    Y = sim.data.responses
    for t in range(3):
        freq = np.bincount(Y[:, t] - 1, minlength=3) / Y.shape[0]
        assert np.abs(freq - expected[t, :3]).max() < 0.01


def test_infeasible_sizes():
    truth = default_truth(C=2, T=2, n_sample=50)
    cells = PopulationCellTable([30, 70], [0, 1], [0, 0], [1, 2], [10, 5], AgeClasses((65, 80)))
    with pytest.raises(DataError, match="infeasible"):
        simulate(truth, 0, cells)
    with pytest.raises(DataError):
        default_truth(C=2, T=2, n_sample=0)


def test_truth_validation():
    truth = default_truth(C=3, T=2, n_sample=10)
    d = truth.to_dict()
    d["alpha0"] = [1.0, 0.5]
    with pytest.raises(ModelError):
        TruthSpec.from_dict(d)
    assert TruthSpec.from_dict(truth.to_dict()).to_dict() == truth.to_dict()


def test_write_simulation(tmp_path):
    sim = simulate(default_truth(C=3, T=3, n_sample=100), 6)
    paths = write_simulation(sim, tmp_path)
    back = load_responses(paths["responses"], sim.truth.schema, AgeClasses((65, 80)))
    assert np.array_equal(back.responses, sim.data.responses)
    meta = json.loads((tmp_path / "truth.json").read_text())
    assert meta["seed"] == 6 and len(meta["classes"]) == 100
    assert TruthSpec.from_dict(meta["truth"]).C == 3
