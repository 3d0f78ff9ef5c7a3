"""Forward simulation of populations, samples and responses from a known truth."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import expit

from .data import (
    AgeClasses,
    DataError,
    ItemResponseMatrix,
    ItemSchema,
    PopulationCellTable,
    marital_dummies,
    small_area_index,
    write_population_cells,
    write_responses,
)
from .model import (
    LOGIT,
    PROPORTIONAL_ODDS,
    ItemProbTable,
    ModelError,
    log_membership_from_eta,
)

MARITAL_SHARES = (0.30, 0.50, 0.05, 0.15)


def _rows(x, E: int) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    return x.reshape(E, -1) if E else np.zeros((0, 0))


@dataclass
class TruthSpec:
    """Generative parameters.

    ``f_values[e]`` is the smooth age effect of equation ``e`` on the integer
    grid ``ages``; the linear predictor of a unit is
    ``alpha1*sex + gamma @ marital + f(age) + v[district]``.
    """

    theta: ItemProbTable
    link: str
    alpha0: np.ndarray
    alpha1: np.ndarray
    gamma: np.ndarray
    v: np.ndarray
    ages: np.ndarray
    f_values: np.ndarray
    item_names: tuple[str, ...]
    n_sample: int
    cell_mean: float = 40.0
    age_breaks: tuple[int, ...] = (65, 80)
    marital_shares: tuple[float, ...] = MARITAL_SHARES

    def __post_init__(self):
        self.theta.check(1e-9)
        C = self.theta.C
        self.alpha0 = np.asarray(self.alpha0, dtype=float).reshape(-1)
        E = 0 if C == 1 else (1 if self.link == PROPORTIONAL_ODDS else C - 1)
        self.alpha1 = np.asarray(self.alpha1, dtype=float).reshape(E)
        self.gamma = _rows(self.gamma, E)
        self.v = _rows(self.v, E)
        self.ages = np.asarray(self.ages, dtype=np.int64)
        self.f_values = np.asarray(self.f_values, dtype=float).reshape(E, self.ages.size)
        if self.link not in (LOGIT, PROPORTIONAL_ODDS):
            raise ModelError(f"unknown link {self.link!r}")
        if self.alpha0.size != C - 1:
            raise ModelError(f"need {C - 1} intercepts/cutpoints, got {self.alpha0.size}")
        if self.link == PROPORTIONAL_ODDS and np.any(np.diff(self.alpha0) <= 0):
            raise ModelError("cutpoints must be strictly increasing")
        if self.gamma.shape[1] not in (0, 3):
            raise ModelError("gamma needs 0 or 3 marital columns")
        if len(self.item_names) != self.theta.T:
            raise ModelError("one item name per item")
        if np.any(np.diff(self.ages) != 1):
            raise ModelError("truth age grid must be consecutive integers")
        if self.n_sample < 1 or not self.cell_mean > 0:
            raise DataError("infeasible sizes: need n_sample >= 1 and cell_mean > 0")

    @property
    def C(self) -> int:
        return self.theta.C

    @property
    def E(self) -> int:
        return self.alpha1.size

    @property
    def D(self) -> int:
        return self.v.shape[1]

    @property
    def schema(self) -> ItemSchema:
        return ItemSchema(tuple(zip(self.item_names, (int(h) for h in self.theta.n_categories))))

    def f(self, age) -> np.ndarray:
        """(n, E) smooth effects at integer ages on the grid."""
        idx = np.asarray(age, dtype=np.int64) - self.ages[0]
        if np.any((idx < 0) | (idx >= self.ages.size)):
            raise DataError("age outside the truth grid")
        return self.f_values[:, idx].T

    def eta(self, age, sex, marital, district) -> np.ndarray:
        eta = self.alpha1[None, :] * np.asarray(sex)[:, None] + self.f(age)
        if self.gamma.shape[1]:
            eta = eta + marital_dummies(marital) @ self.gamma.T
        return eta + self.v[:, np.asarray(district) - 1].T

    def membership_probs(self, age, sex, marital, district) -> np.ndarray:
        n = np.asarray(age).size
        if self.C == 1:
            return np.ones((n, 1))
        return np.exp(log_membership_from_eta(self.link, self.alpha0, self.eta(age, sex, marital, district)))

    def to_dict(self) -> dict:
        return {
            "theta": self.theta.probs.tolist(),
            "n_categories": self.theta.n_categories.tolist(),
            "link": self.link,
            "alpha0": self.alpha0.tolist(),
            "alpha1": self.alpha1.tolist(),
            "gamma": self.gamma.tolist(),
            "v": self.v.tolist(),
            "ages": self.ages.tolist(),
            "f_values": self.f_values.tolist(),
            "item_names": list(self.item_names),
            "n_sample": self.n_sample,
            "cell_mean": self.cell_mean,
            "age_breaks": list(self.age_breaks),
            "marital_shares": list(self.marital_shares),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TruthSpec":
        d = dict(d)
        theta = ItemProbTable(np.asarray(d.pop("theta"), dtype=float), np.asarray(d.pop("n_categories")))
        d["item_names"] = tuple(d["item_names"])
        d["age_breaks"] = tuple(d.get("age_breaks", (65, 80)))
        d["marital_shares"] = tuple(d.get("marital_shares", MARITAL_SHARES))
        return cls(theta=theta, **d)


def graded_theta(C: int, H, sharpness: float = 2.0, floor: float = 0.02) -> ItemProbTable:
    """Item probabilities whose mass moves from the lowest to the highest level as c grows."""
    H = np.asarray(H, dtype=np.int64)
    probs = np.zeros((C, H.size, int(H.max())))
    for t, h in enumerate(H):
        levels = np.arange(h)
        for c in range(C):
            centre = (h - 1) * (c / (C - 1) if C > 1 else 0.0)
            p = np.exp(-sharpness * (levels - centre) ** 2) + floor
            probs[c, t, :h] = p / p.sum()
    return ItemProbTable(probs, H)


def scaled_logistic(ages, height: float = 3.0, centre: float = 62.0, width: float = 7.0) -> np.ndarray:
    """Decreasing logistic curve centred at zero: ``height * (0.5 - expit((a - centre)/width))``."""
    return height * (0.5 - expit((np.asarray(ages, dtype=float) - centre) / width))


def default_truth(
    C: int = 3,
    T: int = 5,
    n_sample: int = 2000,
    link: str = PROPORTIONAL_ODDS,
    n_districts: int = 4,
    H=3,
    alpha1: float = -1.0,
    sigma_v: float = 0.3,
    age_min: int = 18,
    age_max: int = 95,
    marital: bool = False,
    seed: int = 7,
    f_height: float = 3.0,
    f_width: float = 8.0,
    sharpness: float = 2.0,
) -> TruthSpec:
    """A well-separated truth with a logistic age effect and mild district effects."""
    rng = np.random.default_rng(seed)
    Hs = np.broadcast_to(np.asarray(H), (T,)).astype(np.int64)
    theta = graded_theta(C, Hs, sharpness)
    E = 0 if C == 1 else (1 if link == PROPORTIONAL_ODDS else C - 1)
    ages = np.arange(age_min, age_max + 1)
    if link == PROPORTIONAL_ODDS:
        alpha0 = np.linspace(-0.6, 1.2, C - 1) if C > 2 else np.array([0.3])[: C - 1]
        f = scaled_logistic(ages, f_height, width=f_width)[None, :] * np.ones((E, 1))
    else:
        alpha0 = -np.linspace(0.3, 0.6, C - 1)
        f = -scaled_logistic(ages, f_height, width=f_width)[None, :] * np.linspace(0.5, 1.0, E)[:, None]
    v = rng.normal(0, sigma_v, size=(E, n_districts))
    v -= v.mean(axis=1, keepdims=True)
    gamma = np.tile([[0.3, -0.2, 0.4]], (E, 1)) if marital else np.zeros((E, 0))
    return TruthSpec(
        theta=theta,
        link=link,
        alpha0=alpha0,
        alpha1=np.full(E, alpha1),
        gamma=gamma,
        v=v,
        ages=ages,
        f_values=f,
        item_names=tuple(f"item{t + 1}" for t in range(T)),
        n_sample=n_sample,
    )


@dataclass
class Simulation:
    truth: TruthSpec
    data: ItemResponseMatrix
    cells: PopulationCellTable
    classes: np.ndarray
    expected_counts: np.ndarray  # (J, C): sum over area cells of N * P(class)
    seed: int = 0
    extra: dict = field(default_factory=dict)


def simulate_population(truth: TruthSpec, rng: np.random.Generator) -> PopulationCellTable:
    """Poisson cell counts over age x sex x marital x district."""
    ages = truth.ages
    D = truth.D if truth.E else 1
    A, S, M, Dd = np.meshgrid(ages, [0, 1], np.arange(4), np.arange(1, D + 1), indexing="ij")
    # mild thinning toward the oldest ages
    age_weight = 1.2 - 0.6 * (ages - ages[0]) / max(ages[-1] - ages[0], 1)
    shares = np.asarray(truth.marital_shares, dtype=float)
    mean = truth.cell_mean * age_weight[:, None, None, None] * shares[None, None, :, None] * 4
    counts = rng.poisson(np.broadcast_to(mean, A.shape))
    return PopulationCellTable(
        age=A.ravel(),
        sex=S.ravel(),
        marital=M.ravel(),
        district=Dd.ravel(),
        count=counts.ravel().astype(float),
        age_classes=AgeClasses(truth.age_breaks),
    )


def simulate(truth: TruthSpec, seed: int, cells: PopulationCellTable | None = None) -> Simulation:
    """Draw a population, a sample without replacement, classes and item responses."""
    ss = np.random.SeedSequence(seed)
    rng_pop, rng_sample, rng_class, rng_items = (np.random.Generator(np.random.PCG64(s)) for s in ss.spawn(4))
    if cells is None:
        cells = simulate_population(truth, rng_pop)
    counts = cells.count.astype(np.int64)
    total = int(counts.sum())
    if truth.n_sample > total:
        raise DataError(f"infeasible sizes: sample of {truth.n_sample} from a population of {total}")
    taken = rng_sample.multivariate_hypergeometric(counts, truth.n_sample)
    idx = np.repeat(np.arange(cells.L), taken)
    age, sex, marital, district = cells.age[idx], cells.sex[idx], cells.marital[idx], cells.district[idx]
    probs = truth.membership_probs(age, sex, marital, district)
    u = rng_class.uniform(size=idx.size)
    Q = np.minimum((u[:, None] > np.cumsum(probs, axis=1)).sum(axis=1), truth.C - 1)
    th = truth.theta
    Y = np.zeros((idx.size, th.T), dtype=np.int64)
    for t in range(th.T):
        h = int(th.n_categories[t])
        cdf = np.cumsum(th.probs[Q, t, :h], axis=1)
        u = rng_items.uniform(size=idx.size)
        Y[:, t] = np.minimum((u[:, None] > cdf).sum(axis=1), h - 1) + 1
    D = truth.D if truth.E else int(cells.district.max())
    data = ItemResponseMatrix(
        schema=truth.schema,
        responses=Y,
        age=age,
        sex=sex,
        marital=marital,
        district=district,
        n_districts=D,
        age_classes=AgeClasses(truth.age_breaks),
    )
    cell_probs = truth.membership_probs(cells.age, cells.sex, cells.marital, cells.district)
    J = D * cells.n_age_classes
    expected = np.zeros((J, truth.C))
    np.add.at(expected, cells.small_area - 1, cells.count[:, None] * cell_probs)
    return Simulation(truth=truth, data=data, cells=cells, classes=Q, expected_counts=expected, seed=seed)


def write_simulation(sim: Simulation, out_dir) -> dict:
    """Write responses.csv, cells.csv and truth.json under ``out_dir``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {"responses": out / "responses.csv", "cells": out / "cells.csv", "truth": out / "truth.json"}
    write_responses(sim.data, paths["responses"])
    write_population_cells(sim.cells, paths["cells"])
    manifest = {
        "seed": sim.seed,
        "truth": sim.truth.to_dict(),
        "n_districts": sim.data.D,
        "classes": sim.classes.tolist(),
        "class_shares": (np.bincount(sim.classes, minlength=sim.truth.C) / max(sim.data.n, 1)).tolist(),
        "expected_counts": sim.expected_counts.tolist(),
        "small_area_ids": small_area_index(
            np.repeat(np.arange(1, sim.data.D + 1), sim.cells.n_age_classes),
            np.tile(np.arange(sim.cells.n_age_classes), sim.data.D),
            sim.cells.n_age_classes,
        ).tolist(),
    }
    paths["truth"].write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    return {k: str(v) for k, v in paths.items()}


def analytic_item_marginals(sim: Simulation) -> np.ndarray:
    """Sum over classes of the sample-average membership probability times theta, (T, Hmax)."""
    d = sim.data
    probs = sim.truth.membership_probs(d.age, d.sex, d.marital, d.district).mean(axis=0)
    return np.einsum("c,cth->th", probs, sim.truth.theta.probs)
