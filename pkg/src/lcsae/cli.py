"""Command-line front end: ``lcsae {simulate,fit,diagnose,estimate,basis}``.

Exit codes: 0 success, 2 validation failure, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .basis import BasisError, build_basis
from .config import RunConfig, dump_config, load_config
from .data import (
    COVARIATE_COLUMNS,
    DataError,
    ItemSchema,
    load_population_cells,
    load_responses,
    validate_dataset,
)
from .inference import (
    chain_summary,
    classify_units,
    compare_mixing,
    deviance_cdf,
    estimate_counts,
    ppc_pvalues,
)
from .model import DEMMLER_REINSCH, THIN_PLATE, ModelError
from .sampler import NumericalError, run_chain
from .simulate import default_truth, simulate, write_simulation
from .trace import directory_digest, read_basis, read_chain, write_basis, write_chain

EXIT_OK, EXIT_VALIDATION, EXIT_NUMERICAL = 0, 2, 3
RUN_FORMAT = "lcsae-run"

log = logging.getLogger("lcsae")


class StageError(Exception):
    def __init__(self, stage: str, exc: Exception):
        super().__init__(f"{stage}: {exc}")
        self.stage = stage
        self.exc = exc


# ---------------------------------------------------------------------------
# report tables


class Report:
    """A named table written as CSV with a one-line schema header, or as JSON."""

    def __init__(self, name: str, columns, rows, meta: dict | None = None):
        self.name = name
        self.columns = list(columns)
        self.rows = [list(r) for r in rows]
        self.meta = meta or {}

    def schema_line(self) -> str:
        return f"# schema={self.name} version=1 columns={len(self.columns)}"

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write(self.schema_line() + "\n")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.columns)
        for r in self.rows:
            w.writerow(["" if v is None else _cell(v) for v in r])
        return buf.getvalue()

    def to_json(self) -> dict:
        return {
            "schema": self.name,
            "version": 1,
            "columns": self.columns,
            "rows": [[_jsonable(v) for v in r] for r in self.rows],
            **({"meta": self.meta} if self.meta else {}),
        }

    def write(self, directory: Path, as_json: bool) -> Path:
        path = directory / f"{self.name}.{'json' if as_json else 'csv'}"
        if as_json:
            path.write_text(json.dumps(self.to_json(), indent=1) + "\n")
        else:
            path.write_text(self.to_csv())
        return path


def _cell(v):
    if isinstance(v, (float, np.floating)):
        return format(float(v), ".10g")
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    return v


def _jsonable(v):
    if isinstance(v, (np.integer,)):
        return int(v)
    if isinstance(v, (np.floating, float)):
        v = float(v)
        return v if np.isfinite(v) else None
    if isinstance(v, np.bool_):
        return bool(v)
    return v


def read_report(path) -> Report:
    """Parse a report written by :meth:`Report.write`."""
    path = Path(path)
    if path.suffix == ".json":
        d = json.loads(path.read_text())
        return Report(d["schema"], d["columns"], d["rows"], d.get("meta"))
    lines = path.read_text().splitlines()
    name = lines[0].split()[1].split("=", 1)[1]
    rows = list(csv.reader(lines[1:]))
    return Report(name, rows[0], rows[1:])


# ---------------------------------------------------------------------------
# helpers


def _sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def infer_schema(path) -> ItemSchema:
    """Items are the columns after the covariates; H_t is the largest observed code (at least 2)."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path}: empty file")
        items = header[len(COVARIATE_COLUMNS) :]
        if header[: len(COVARIATE_COLUMNS)] != list(COVARIATE_COLUMNS) or not items:
            raise DataError(f"{path}: header must be {','.join(COVARIATE_COLUMNS)},<items>")
        top = [2] * len(items)
        for lineno, row in enumerate(reader, start=2):
            for t, val in enumerate(row[len(COVARIATE_COLUMNS) :]):
                try:
                    top[t] = max(top[t], int(val))
                except ValueError:
                    raise DataError(f"{path}: row {lineno}: item {items[t]!r} is not an integer: {val!r}")
    return ItemSchema(tuple(zip(items, top)))


def _load_data(cfg: RunConfig):
    if not cfg.paths.responses:
        raise DataError("no responses file (set paths.responses or pass --responses)")
    schema = cfg.items or infer_schema(cfg.paths.responses)
    return load_responses(cfg.paths.responses, schema, cfg.age_classes, n_districts=cfg.n_districts)


def _emit(args, payload: dict, text: str) -> None:
    if args.json:
        print(json.dumps(payload, indent=1, default=_jsonable))
    else:
        print(text)


def _fit_one(args):
    spec, data, basis, prior, config, chain, ckpt_dir = args
    return run_chain(spec, data, basis, prior, config, chain=chain, checkpoint_dir=ckpt_dir)


# ---------------------------------------------------------------------------
# commands


def cmd_simulate(cfg: RunConfig, args) -> int:
    s = cfg.simulate
    truth = default_truth(
        C=args.classes or s.n_classes,
        T=s.n_items,
        n_sample=args.n or s.n_sample,
        link=s.link,
        n_districts=s.n_districts,
        H=s.n_categories,
        alpha1=s.alpha1,
        sigma_v=s.sigma_v,
        age_min=s.age_min,
        age_max=s.age_max,
        marital=s.marital,
        seed=s.truth_seed,
    )
    truth.cell_mean = s.cell_mean
    truth.age_breaks = tuple(cfg.age_classes.breakpoints)
    sim = simulate(truth, cfg.seed)
    paths = write_simulation(sim, cfg.paths.out)
    _emit(args, {"files": paths, "n": sim.data.n}, "\n".join(f"{k}: {v}" for k, v in paths.items()))
    return EXIT_OK


def cmd_fit(cfg: RunConfig, args) -> int:
    if args.basis:
        cfg = replace(cfg, model=replace(cfg.model, basis=args.basis))
    run_dir = Path(cfg.paths.out)
    digest = cfg.digest()
    manifest_path = run_dir / "manifest.json"
    if manifest_path.exists():
        old = json.loads(manifest_path.read_text())
        if old.get("config_hash") != digest and not args.force:
            raise DataError(f"{run_dir} holds a run with a different config hash; use --force or another --out")
    try:
        data = _load_data(cfg)
    except Exception as exc:
        raise StageError("data", exc)
    try:
        basis = build_basis(data.age, cfg.model.n_knots, cfg.model.penalty) if cfg.model.use_spline else None
    except Exception as exc:
        raise StageError("basis", exc)
    run_dir.mkdir(parents=True, exist_ok=True)
    handler = logging.FileHandler(run_dir / "fit.log", mode="w")
    handler.setFormatter(logging.Formatter("%(levelname)s %(name)s: %(message)s"))
    logging.getLogger("lcsae").addHandler(handler)
    logging.getLogger("lcsae").setLevel(logging.INFO)
    try:
        dump_config(cfg, run_dir / "config.yaml")
        if basis is not None:
            write_basis(basis, run_dir / "basis.json")
        log.info("fitting C=%d (%s, %s basis) on n=%d units", cfg.model.n_classes, cfg.model.link, cfg.model.basis, data.n)
        n_chains = cfg.sampler.chains
        jobs = [(cfg.model, data, basis, cfg.prior, cfg.sampler, k, run_dir / "checkpoints") for k in range(n_chains)]
        workers = min(n_chains, os.cpu_count() or 1)
        try:
            if workers > 1:
                with ProcessPoolExecutor(max_workers=workers) as pool:
                    outputs = list(pool.map(_fit_one, jobs))
            else:
                outputs = [_fit_one(j) for j in jobs]
        except NumericalError:
            raise
        except Exception as exc:
            raise StageError("sampler", exc)
        chains = []
        for out in outputs:
            d = write_chain(out, run_dir / f"chain{out.chain}")
            chains.append({"dir": d.name, "n_draws": out.n_draws, "digest": directory_digest(d)})
        manifest = {
            "format": RUN_FORMAT,
            "version": 1,
            "lcsae_version": __version__,
            "config_hash": digest,
            "responses": str(Path(cfg.paths.responses).resolve()),
            "responses_sha256": _sha256(cfg.paths.responses),
            "n_units": data.n,
            "label": f"C={cfg.model.n_classes}",
            "basis": cfg.model.basis,
            "chains": chains,
        }
        manifest_path.write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    finally:
        logging.getLogger("lcsae").removeHandler(handler)
        handler.close()
    _emit(args, manifest, f"{run_dir}: {len(chains)} chain(s), {chains[0]['n_draws']} kept draws each")
    return EXIT_OK


def open_run(run_dir):
    run_dir = Path(run_dir)
    mpath = run_dir / "manifest.json"
    if not mpath.exists():
        raise DataError(f"{run_dir}: not a completed run (no manifest.json)")
    manifest = json.loads(mpath.read_text())
    if manifest.get("format") != RUN_FORMAT:
        raise DataError(f"{run_dir}: not a run directory")
    cfg = load_config(run_dir / "config.yaml")
    if cfg.digest() != manifest["config_hash"]:
        raise DataError(f"{run_dir}: config.yaml does not match the manifest hash")
    chains = []
    for entry in manifest["chains"]:
        try:
            chains.append(read_chain(run_dir / entry["dir"]))
        except (FileNotFoundError, KeyError) as exc:
            raise DataError(f"{run_dir}: missing blocks: {exc}")
    basis = read_basis(run_dir / "basis.json") if (run_dir / "basis.json").exists() else None
    return manifest, cfg, chains, basis


def _run_data(manifest, cfg):
    path = manifest["responses"]
    if not Path(path).exists():
        raise DataError(f"responses file {path} recorded in the run is missing")
    if _sha256(path) != manifest["responses_sha256"]:
        raise DataError(f"responses file {path} changed since the fit")
    return _load_data(replace(cfg, paths=replace(cfg.paths, responses=path)))


def _pooled(chains):
    if len(chains) == 1:
        return chains[0]
    base = chains[0]
    draws = {k: np.concatenate([c.draws[k] for c in chains]) for k in base.draws}
    # iterations stay distinct per chain so PPC streams do not repeat
    iters = np.concatenate([c.iterations + i * (base.config.iterations + 1) for i, c in enumerate(chains)])
    return replace(base, draws=draws, iterations=iters)


def cmd_diagnose(cfg: RunConfig, args) -> int:
    out_dir = Path(args.out) if args.out else Path(args.runs[0]) / "diagnostics"
    out_dir.mkdir(parents=True, exist_ok=True)
    runs = [open_run(r) for r in args.runs]
    written = []
    labels = []
    for (m, _, _, _), r in zip(runs, args.runs):
        label = m.get("label", Path(r).name)
        labels.append(label if labels.count(label) == 0 else f"{label} ({Path(r).name})")
    cdfs = deviance_cdf([_pooled(ch).deviance for _, _, ch, _ in runs], labels)
    rows = []
    for c in cdfs:
        rows += [[c.label, float(g), float(e)] for g, e in zip(c.grid, c.ecdf)]
    written.append(Report("deviance_cdf", ["model", "deviance", "ecdf"], rows).write(out_dir, args.json))
    q = [[c.label] + [float(v) for v in c.quantile([0.25, 0.5, 0.75])] for c in cdfs]
    written.append(Report("deviance_quantiles", ["model", "q25", "q50", "q75"], q).write(out_dir, args.json))
    summary_payload = {}
    for (manifest, rcfg, chains, basis), label in zip(runs, labels):
        tag = label.replace("=", "").replace(" ", "_").replace("(", "").replace(")", "")
        data = _run_data(manifest, rcfg)
        pooled = _pooled(chains)
        ppc = ppc_pvalues(pooled, data, basis, seed=rcfg.seed)
        prow = [[int(u) + 1, float(p)] for u, p in zip(ppc.units, ppc.pvalues)]
        written.append(Report(f"ppc_{tag}", ["unit", "pvalue"], prow, {"excluded": ppc.n_excluded}).write(out_dir, args.json))
        summ = ppc.summary()
        written.append(
            Report(f"ppc_summary_{tag}", list(summ) + ["excluded"], [list(summ.values()) + [ppc.n_excluded]]).write(
                out_dir, args.json
            )
        )
        summary_payload[label] = {"ppc": summ}
        cls = classify_units(pooled, data, basis)
        shares = cls.shares()
        written.append(
            Report(f"class_shares_{tag}", ["class", "percent"], [[c + 1, float(s)] for c, s in enumerate(shares)]).write(
                out_dir, args.json
            )
        )
        for ch in chains:
            rows = [[s.name, s.mean, s.sd, s.q025, s.q50, s.q975, s.ess, s.degenerate, *s.acf] for s in chain_summary(ch)]
            cols = ["parameter", "mean", "sd", "p.025", "p.5", "p.975", "ess", "degenerate", "acf1", "acf5", "acf10", "acf50"]
            written.append(Report(f"summary_{tag}_chain{ch.chain}", cols, rows).write(out_dir, args.json))
    if args.compare:
        _, _, tp_chains, _ = open_run(args.compare)
        dr_chains = runs[0][2]
        mix = compare_mixing(dr_chains[0], tp_chains[0])
        written.append(
            Report("mixing", ["parameter", "ess_dr", "ess_tp", "ratio"], mix.rows).write(out_dir, args.json)
        )
        trace_rows = []
        for p, (a, b) in mix.traces.items():
            trace_rows += [[p, int(it), float(x), float(y)] for it, x, y in zip(mix.trace_iterations, a, b)]
        written.append(Report("mixing_traces", ["parameter", "iteration", "dr", "tp"], trace_rows).write(out_dir, args.json))
    _emit(args, {"reports": [str(p) for p in written], "summary": summary_payload}, "\n".join(str(p) for p in written))
    return EXIT_OK


def cmd_estimate(cfg: RunConfig, args) -> int:
    manifest, rcfg, chains, basis = open_run(args.run)
    cells = load_population_cells(args.cells, rcfg.age_classes)
    out_dir = Path(args.out) if args.out else Path(args.run) / "estimates"
    out_dir.mkdir(parents=True, exist_ok=True)
    pooled = _pooled(chains)
    if pooled.spec.use_district and cells.L and cells.district.max() > pooled.n_districts:
        raise DataError(f"cells reference district {int(cells.district.max())} but the fit has {pooled.n_districts}")
    tables = estimate_counts(pooled, cells, basis)
    cols = ["area", "district", "age_class", "class", "estimate", "cv", "p.025", "p.5", "p.975", "population"]

    def rows(ests):
        return [[e.area, e.district, e.age_class, e.cls, e.mean, e.cv, e.q025, e.q50, e.q975, e.population] for e in ests]

    written = [
        Report("counts_areas", cols, rows(tables.areas)).write(out_dir, args.json),
        Report("counts_districts", cols, rows(tables.districts)).write(out_dir, args.json),
    ]
    try:
        v = validate_dataset(_run_data(manifest, rcfg), cells)
        written.append(Report("validation", ["check", "detail"], v.table_rows()).write(out_dir, args.json))
    except DataError:
        pass
    _emit(args, {"reports": [str(p) for p in written]}, "\n".join(str(p) for p in written))
    return EXIT_OK


def cmd_basis(cfg: RunConfig, args) -> int:
    if args.ages:
        ages = np.array([float(a) for a in args.ages.split(",")])
    else:
        ages = _load_data(cfg).age.astype(float)
    K = args.knots or cfg.model.n_knots
    penalty = args.penalty or cfg.model.penalty
    basis = build_basis(ages, K, penalty)
    out_dir = Path(cfg.paths.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    mode = THIN_PLATE if args.thin_plate else DEMMLER_REINSCH
    write_basis(basis, out_dir / "basis.json", full=True)
    err = basis.orthonormality_error()
    grid = np.unique(ages)
    if mode == DEMMLER_REINSCH:
        Z = basis.design(grid)
        cols = ["age"] + [f"a{k + 1}" for k in range(Z.shape[1])]
    else:
        from .basis import thin_plate_columns

        Z = np.column_stack([np.ones_like(grid), grid, thin_plate_columns(grid, basis.knots)])
        cols = ["age", "one", "age_linear"] + [f"tp{k + 1}" for k in range(basis.K)]
    written = [
        Report(f"basis_{mode}", cols, [[float(a), *map(float, z)] for a, z in zip(grid, Z)]).write(out_dir, args.json),
        Report(
            "basis_info",
            ["knot", "location", "s"],
            [[k + 1, float(kn), float(s)] for k, (kn, s) in enumerate(zip(basis.knots.knots, basis.s))],
            {"orthonormality_error": err, "orthonormal": err <= 1e-10, "n_columns": basis.Atilde.shape[1]},
        ).write(out_dir, args.json),
    ]
    payload = {
        "mode": mode,
        "K": basis.K,
        "n_columns": int(basis.Atilde.shape[1]),
        "n_s": int(basis.s.size),
        "orthonormality_error": err,
        "orthonormal": bool(err <= 1e-10),
        "reports": [str(p) for p in written],
    }
    _emit(args, payload, f"{mode}: K={basis.K}, {basis.Atilde.shape[1]} columns, orthonormality error {err:.2e}")
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML run configuration")
    common.add_argument("--seed", type=int, help="master seed")
    common.add_argument("--out", help="output directory")
    common.add_argument("--chains", type=int, help="number of chains")
    common.add_argument("--json", action="store_true", help="JSON reports and output")
    sub_common = argparse.ArgumentParser(add_help=False)
    for action in common._actions:
        kw = {"help": action.help, "default": argparse.SUPPRESS}
        if isinstance(action, argparse._StoreTrueAction):
            sub_common.add_argument(*action.option_strings, action="store_true", **kw)
        else:
            sub_common.add_argument(*action.option_strings, type=action.type, **kw)

    p = argparse.ArgumentParser(prog="lcsae", description=__doc__.splitlines()[0], parents=[common])
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", parents=[sub_common], help="simulate responses and population cells")
    s.add_argument("--n", type=int, help="sample size")
    s.add_argument("--classes", type=int, help="number of latent classes in the truth")

    f = sub.add_parser("fit", parents=[sub_common], help="fit the model by MCMC")
    f.add_argument("--responses")
    f.add_argument("--classes", type=int, dest="n_classes")
    f.add_argument("--link", choices=["proportional-odds", "multinomial-logit"])
    f.add_argument("--basis", choices=[DEMMLER_REINSCH, THIN_PLATE])
    f.add_argument("--knots", type=int, dest="n_knots")
    f.add_argument("--iterations", type=int)
    f.add_argument("--burn-in", type=int, dest="burn_in")
    f.add_argument("--thin", type=int)
    f.add_argument("--force", action="store_true", help="overwrite a run with a different config")

    d = sub.add_parser("diagnose", parents=[sub_common], help="deviance CDFs, PPC, chain summaries")
    d.add_argument("runs", nargs="+", help="run directories (several give a combined deviance-CDF table)")
    d.add_argument("--compare", help="paired thin-plate run for the mixing comparison")

    e = sub.add_parser("estimate", parents=[sub_common], help="small area class counts")
    e.add_argument("run")
    e.add_argument("--cells", required=True)

    b = sub.add_parser("basis", parents=[sub_common], help="dump the spline basis")
    b.add_argument("--responses")
    b.add_argument("--ages", help="comma-separated ages instead of a responses file")
    b.add_argument("--knots", type=int)
    b.add_argument("--penalty", choices=["raw", "absolute"])
    b.add_argument("--thin-plate", action="store_true", help="dump the raw thin-plate design")
    return p


COMMANDS = {"simulate": cmd_simulate, "fit": cmd_fit, "diagnose": cmd_diagnose, "estimate": cmd_estimate, "basis": cmd_basis}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    for name in ("config", "seed", "out", "chains"):
        if not hasattr(args, name):
            setattr(args, name, None)
    args.json = bool(getattr(args, "json", False))
    try:
        cfg = load_config(args.config)
        overrides = {"seed": args.seed, "chains": args.chains, "responses": getattr(args, "responses", None)}
        if args.command in ("simulate", "fit", "basis"):
            overrides["out"] = args.out
        if args.command == "fit":
            for key in ("n_classes", "link", "n_knots", "iterations", "burn_in", "thin"):
                overrides[key] = getattr(args, key)
        cfg = cfg.with_overrides(**overrides)
        cfg.paths.check()
        return COMMANDS[args.command](cfg, args)
    except NumericalError as exc:
        print(f"lcsae: numerical failure: {exc}", file=sys.stderr)
        if exc.checkpoint is not None:
            print(f"checkpoint: {exc.checkpoint}", file=sys.stderr)
        return EXIT_NUMERICAL
    except StageError as exc:
        if isinstance(exc.exc, NumericalError):
            print(f"lcsae: numerical failure in {exc.stage}: {exc.exc}", file=sys.stderr)
            return EXIT_NUMERICAL
        print(f"lcsae: {exc.stage} stage failed: {exc.exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except (DataError, ModelError, BasisError, ValueError, KeyError, FileNotFoundError) as exc:
        print(f"lcsae: validation failure: {exc}", file=sys.stderr)
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())
