"""On-disk layout of chain output and fitted bases.

A chain directory holds ``manifest.json`` plus one CSV per block.  Each CSV
has an ``iteration`` column followed by the flattened block entries (1-based
indices in the header, C order), one row per kept draw.  Floats are written
with 17 significant digits so a read-back is exact.
"""

from __future__ import annotations

import csv
import hashlib
import json
from dataclasses import asdict
from pathlib import Path

import numpy as np

from .basis import DRBasis, KnotSet, build_raw_design, demmler_reinsch
from .model import ModelSpec
from .sampler import ChainOutput, PriorSpec, SamplerConfig

CHAIN_FORMAT = "lcsae-chain"
CHAIN_VERSION = 1
BASIS_FORMAT = "lcsae-basis"


def fmt(x) -> str:
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return format(float(x), ".17g")


def column_names(name: str, shape: tuple) -> list[str]:
    if not shape:
        return [name]
    return [f"{name}[{','.join(str(i + 1) for i in idx)}]" for idx in np.ndindex(*shape)]


def write_chain(out: ChainOutput, directory) -> Path:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    layout = {}
    for name in sorted(out.draws):
        arr = out.draws[name]
        shape = tuple(arr.shape[1:])
        layout[name] = {"shape": list(shape), "dtype": "int" if arr.dtype.kind in "iu" else "float", "file": f"{name}.csv"}
        with (d / f"{name}.csv").open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["iteration"] + column_names(name, shape))
            flat = arr.reshape(arr.shape[0], -1)
            for it, row in zip(out.iterations, flat):
                w.writerow([fmt(it)] + [fmt(v) for v in row])
    manifest = {
        "format": CHAIN_FORMAT,
        "version": CHAIN_VERSION,
        "chain": out.chain,
        "seed": out.config.seed,
        "n_draws": out.n_draws,
        "spec": asdict(out.spec),
        "prior": out.prior.to_dict(),
        "config": out.config.to_dict(),
        "acceptance": out.acceptance,
        "n_categories": out.n_categories.tolist(),
        "n_districts": out.n_districts,
        "blocks": layout,
        "proposal_scales": {
            stage: ({k: np.asarray(v).tolist() for k, v in scales.items()} if scales is not None else None)
            for stage, scales in out.proposal_scales.items()
        },
    }
    (d / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    return d


def read_chain(directory) -> ChainOutput:
    d = Path(directory)
    manifest = json.loads((d / "manifest.json").read_text())
    if manifest.get("format") != CHAIN_FORMAT:
        raise ValueError(f"{d}: not a chain directory")
    if manifest.get("version") != CHAIN_VERSION:
        raise ValueError(f"{d}: unsupported chain version {manifest.get('version')}")
    draws = {}
    iterations = None
    for name, info in manifest["blocks"].items():
        path = d / info["file"]
        if not path.exists():
            raise FileNotFoundError(f"missing block file {path}")
        dtype = np.int64 if info["dtype"] == "int" else float
        raw = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2, dtype=float)
        n = manifest["n_draws"]
        raw = raw.reshape(n, -1)
        it = raw[:, 0].astype(np.int64)
        if iterations is None:
            iterations = it
        elif not np.array_equal(iterations, it):
            raise ValueError(f"block {name} has mismatched iterations")
        draws[name] = raw[:, 1:].astype(dtype).reshape((n,) + tuple(info["shape"]))
    return ChainOutput(
        spec=ModelSpec(**manifest["spec"]),
        prior=PriorSpec.from_dict(manifest["prior"]),
        config=SamplerConfig(**manifest["config"]),
        chain=manifest["chain"],
        iterations=iterations if iterations is not None else np.zeros(0, dtype=np.int64),
        draws=draws,
        acceptance=manifest["acceptance"],
        n_categories=np.asarray(manifest["n_categories"], dtype=np.int64),
        n_districts=manifest["n_districts"],
        proposal_scales={
            stage: ({k: np.asarray(v, dtype=float) for k, v in scales.items()} if scales is not None else None)
            for stage, scales in manifest.get("proposal_scales", {}).items()
        },
    )


def directory_digest(directory) -> str:
    """SHA-256 over the sorted file names and bytes of a directory tree."""
    h = hashlib.sha256()
    root = Path(directory)
    for path in sorted(p for p in root.rglob("*") if p.is_file()):
        h.update(str(path.relative_to(root)).encode())
        h.update(b"\0")
        h.update(path.read_bytes())
    return h.hexdigest()


# ---------------------------------------------------------------------------


def basis_to_dict(basis: DRBasis, full: bool = False) -> dict:
    d = {
        "format": BASIS_FORMAT,
        "version": 1,
        "knots": basis.knots.knots.tolist(),
        "ages": basis.ages.tolist(),
        "penalty": basis.penalty,
        "K": basis.K,
        "n_columns": int(basis.Atilde.shape[1]),
        "s": basis.s.tolist(),
        "eigen_sign": basis.eigen_sign.tolist(),
        "orthonormality_error": basis.orthonormality_error(),
    }
    if full:
        d["Atilde"] = basis.Atilde.tolist()
        d["U"] = basis.U.tolist()
        d["R"] = basis.R.tolist()
    return d


def basis_from_dict(d: dict) -> DRBasis:
    if d.get("format") != BASIS_FORMAT:
        raise ValueError("not a basis dump")
    raw = build_raw_design(np.asarray(d["ages"], dtype=float), KnotSet(np.asarray(d["knots"], dtype=float)))
    return demmler_reinsch(raw, penalty=d.get("penalty", "raw"))


def write_basis(basis: DRBasis, path, full: bool = False) -> Path:
    path = Path(path)
    path.write_text(json.dumps(basis_to_dict(basis, full), sort_keys=True) + "\n")
    return path


def read_basis(path) -> DRBasis:
    return basis_from_dict(json.loads(Path(path).read_text()))
