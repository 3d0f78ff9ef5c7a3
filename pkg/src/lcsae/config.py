"""Run configuration: one YAML file, with command-line overrides.

Schema (all keys optional)::

    seed: 20240601
    paths: {responses: ..., cells: ..., out: run}
    items: [{name: item1, categories: 3}, ...]
    age_classes: [65, 80]
    n_districts: 12
    model: {n_classes: 5, link: proportional-odds, use_sex: true,
            use_marital: false, use_spline: true, use_district: true,
            n_knots: 12, basis: demmler-reinsch, penalty: raw}
    prior: {dirichlet_conc: 1.0, reg_prior_var: 100,
            sd_b: {family: uniform, B: 16}, sd_v: {family: uniform, B: 16}}
    sampler: {iterations: 120000, burn_in: 15000, thin: 3, chains: 1,
              adapt_window: 50, target_accept: 0.44, target_accept_block: 0.234}
    simulate: {n_classes: 3, n_items: 5, n_categories: 3, n_sample: 2000, ...}
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import yaml

from .data import AgeClasses, DataError, ItemSchema
from .model import ModelSpec
from .sampler import PriorSpec, SamplerConfig, SdPrior

DEFAULT_AGE_BREAKS = (65, 80)


@dataclass
class Paths:
    responses: str | None = None
    cells: str | None = None
    out: str = "run"

    def check(self) -> None:
        given = [Path(p).resolve() for p in (self.responses, self.cells, self.out) if p is not None]
        if len(set(given)) != len(given):
            raise DataError("responses, cells and output paths must be distinct")


@dataclass
class SimulateSettings:
    n_classes: int = 3
    n_items: int = 5
    n_categories: int = 3
    n_sample: int = 2000
    link: str = "proportional-odds"
    n_districts: int = 4
    alpha1: float = -1.0
    sigma_v: float = 0.3
    marital: bool = False
    age_min: int = 18
    age_max: int = 95
    cell_mean: float = 40.0
    truth_seed: int = 7


@dataclass
class RunConfig:
    seed: int = 20_240_601
    paths: Paths = field(default_factory=Paths)
    model: ModelSpec = field(default_factory=ModelSpec)
    prior: PriorSpec = field(default_factory=PriorSpec)
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    items: ItemSchema | None = None
    age_classes: AgeClasses = field(default_factory=lambda: AgeClasses(DEFAULT_AGE_BREAKS))
    n_districts: int | None = None
    simulate: SimulateSettings = field(default_factory=SimulateSettings)

    def __post_init__(self):
        if self.sampler.seed != self.seed:
            self.sampler = replace(self.sampler, seed=self.seed)
        if self.model.n_classes < 1:
            raise DataError("n_classes must be >= 1")

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "paths": asdict(self.paths),
            "model": asdict(self.model),
            "prior": self.prior.to_dict(),
            "sampler": self.sampler.to_dict(),
            "items": self.items.to_config() if self.items is not None else None,
            "age_classes": list(self.age_classes.breakpoints),
            "n_districts": self.n_districts,
            "simulate": asdict(self.simulate),
        }

    def digest(self) -> str:
        """Hash of everything that affects results (paths excluded)."""
        d = self.to_dict()
        d.pop("paths")
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()

    def with_overrides(self, **kw) -> "RunConfig":
        """Apply flat overrides; ``None`` values are ignored."""
        cfg = self
        m, s, p = {}, {}, {}
        for key, val in kw.items():
            if val is None:
                continue
            if key == "seed":
                cfg = replace(cfg, seed=int(val))
            elif key == "out":
                p["out"] = str(val)
            elif key in ("responses", "cells"):
                p[key] = str(val)
            elif key in {f.name for f in fields(ModelSpec)}:
                m[key] = val
            elif key in {f.name for f in fields(SamplerConfig)}:
                s[key] = val
            else:
                raise KeyError(f"unknown override {key!r}")
        if m:
            cfg = replace(cfg, model=replace(cfg.model, **m))
        if s:
            cfg = replace(cfg, sampler=replace(cfg.sampler, **s))
        if p:
            cfg = replace(cfg, paths=replace(cfg.paths, **p))
        return replace(cfg, sampler=replace(cfg.sampler, seed=cfg.seed))


def _pick(cls, d: dict | None, what: str) -> dict:
    d = dict(d or {})
    known = {f.name for f in fields(cls)}
    unknown = set(d) - known
    if unknown:
        raise DataError(f"unknown {what} keys: {sorted(unknown)}")
    return d


def config_from_dict(d: dict | None) -> RunConfig:
    d = dict(d or {})
    known = {f.name for f in fields(RunConfig)}
    unknown = set(d) - known
    if unknown:
        raise DataError(f"unknown config keys: {sorted(unknown)}")
    seed = int(d.get("seed", RunConfig.seed))
    prior_d = _pick(PriorSpec, d.get("prior"), "prior")
    for key in ("sd_b", "sd_v"):
        if key in prior_d:
            prior_d[key] = SdPrior(**_pick(SdPrior, prior_d[key], key))
    try:
        cfg = RunConfig(
            seed=seed,
            paths=Paths(**_pick(Paths, d.get("paths"), "paths")),
            model=ModelSpec(**_pick(ModelSpec, d.get("model"), "model")),
            prior=PriorSpec(**prior_d),
            sampler=SamplerConfig(**{**_pick(SamplerConfig, d.get("sampler"), "sampler"), "seed": seed}),
            items=ItemSchema.from_config(d["items"]) if d.get("items") else None,
            age_classes=AgeClasses(tuple(d.get("age_classes", DEFAULT_AGE_BREAKS))),
            n_districts=d.get("n_districts"),
            simulate=SimulateSettings(**_pick(SimulateSettings, d.get("simulate"), "simulate")),
        )
    except (TypeError, ValueError) as exc:
        if isinstance(exc, DataError):
            raise
        raise DataError(f"invalid config: {exc}") from exc
    return cfg


def load_config(path=None) -> RunConfig:
    if path is None:
        return RunConfig()
    text = Path(path).read_text()
    try:
        d = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise DataError(f"{path}: not valid YAML: {exc}") from exc
    if d is not None and not isinstance(d, dict):
        raise DataError(f"{path}: top level must be a mapping")
    return config_from_dict(d)


def dump_config(cfg: RunConfig, path) -> None:
    Path(path).write_text(yaml.safe_dump(cfg.to_dict(), sort_keys=True))
