"""Text matrix files, the region mapping file, config files and JSON checkpoints."""
from __future__ import annotations

import csv
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (
    DimensionMismatch,
    DuplicateLabel,
    ParseError,
    SchemaVersionError,
    UnknownRegion,
)
from .inference.engine import FitReport
from .model import Dataset, Dims, HyperParams, LatentState, RegulatoryPrior, build_sign_matrix

SCHEMA_VERSION = 1
TOOL_VERSION = "0.1.0"


# --------------------------------------------------------------------------
# matrices


@dataclass
class MatrixFile:
    values: np.ndarray
    row_labels: list
    col_labels: list
    corner: str = ""
    path: str | None = None


def _fmt(v: float) -> str:
    return repr(float(v))


def read_matrix(path) -> MatrixFile:
    """Read a tab-separated matrix with a header of column labels and row labels first."""
    path = Path(path)
    with path.open(newline="") as fh:
        rows = list(csv.reader(fh, delimiter="\t"))
    rows = [r for r in rows if r and not (len(r) == 1 and not r[0].strip())]
    if not rows:
        raise ParseError("empty matrix file", path)
    header = rows[0]
    if len(header) < 2:
        raise ParseError("header needs a corner cell and at least one column label", path, 1)
    cols = header[1:]
    _check_unique(cols, path, "column")
    labels, values = [], []
    for i, row in enumerate(rows[1:], start=2):
        if len(row) != len(header):
            raise ParseError(f"expected {len(header)} fields, found {len(row)}", path, i)
        labels.append(row[0])
        vals = []
        for j, cell in enumerate(row[1:], start=2):
            try:
                v = float(cell)
            except ValueError:
                raise ParseError(f"cannot parse {cell!r} as a number", path, i, j) from None
            if not np.isfinite(v):
                raise ParseError(f"non-finite value {cell!r}", path, i, j)
            vals.append(v)
        values.append(vals)
    if not labels:
        raise ParseError("matrix has no data rows", path)
    _check_unique(labels, path, "row")
    return MatrixFile(np.array(values, dtype=float), labels, cols, header[0], str(path))


def _check_unique(labels, path, kind):
    seen = set()
    for lab in labels:
        if lab in seen:
            raise DuplicateLabel(f"{path}: duplicate {kind} label {lab!r}")
        seen.add(lab)


def write_matrix(path, values, row_labels, col_labels, corner: str = "") -> None:
    values = np.atleast_2d(np.asarray(values, dtype=float))
    if values.shape != (len(row_labels), len(col_labels)):
        raise DimensionMismatch(f"matrix {values.shape} does not match {len(row_labels)} x {len(col_labels)} labels")
    lines = ["\t".join([corner, *map(str, col_labels)])]
    for lab, row in zip(row_labels, values):
        lines.append("\t".join([str(lab), *map(_fmt, row)]))
    Path(path).write_text("\n".join(lines) + "\n")


@dataclass
class LoadedData:
    dataset: Dataset
    genes: list
    cells: list
    regions: list
    replicates: list


def load_dataset(expr_path, bulk_path, raw_counts: bool = False) -> LoadedData:
    """Expression (genes x cells) and bulk (regions x replicates) matrices.

    With ``raw_counts`` the expression values are transformed to log(count + 1).
    """
    expr = read_matrix(expr_path)
    bulk = read_matrix(bulk_path)
    X = expr.values
    if raw_counts:
        if np.any(X < 0):
            raise ParseError("raw counts must be nonnegative", expr_path)
        X = np.log1p(X)
    if np.any(bulk.values < 0):
        raise ParseError("bulk values must be nonnegative", bulk_path)
    return LoadedData(Dataset(X, bulk.values), expr.row_labels, expr.col_labels,
                      bulk.row_labels, bulk.col_labels)


# --------------------------------------------------------------------------
# mapping file

MAPPING_COLUMNS = ("region_id", "target_gene", "regulator_gene", "motif_flag")


def read_mapping_rows(path) -> tuple[list, bool]:
    """Rows of (region, target, regulator, motif flag, sign or None) and whether signs were given."""
    path = Path(path)
    with path.open(newline="") as fh:
        rows = [r for r in csv.reader(fh, delimiter="\t") if r and any(c.strip() for c in r)]
    if not rows:
        raise ParseError("empty mapping file", path)
    header = [h.strip() for h in rows[0]]
    if tuple(header[:4]) != MAPPING_COLUMNS or len(header) > 5 or (len(header) == 5 and header[4] != "sign"):
        raise ParseError("header must be region_id, target_gene, regulator_gene, motif_flag[, sign]", path, 1)
    has_sign = len(header) == 5
    out = []
    for i, row in enumerate(rows[1:], start=2):
        if len(row) != len(header):
            raise ParseError(f"expected {len(header)} fields, found {len(row)}", path, i)
        region, target, regulator, flag = row[:4]
        if flag not in ("0", "1"):
            raise ParseError(f"motif_flag must be 0 or 1, got {flag!r}", path, i, 4)
        sign = None
        if has_sign:
            try:
                sign = int(row[4])
            except ValueError:
                raise ParseError(f"sign must be -1, 0 or 1, got {row[4]!r}", path, i, 5) from None
            if sign not in (-1, 0, 1):
                raise ParseError(f"sign must be -1, 0 or 1, got {row[4]!r}", path, i, 5)
        out.append((region, target, regulator, int(flag), sign, i))
    return out, has_sign


def load_regulatory_prior(mapping_path, genes: list, regions: list, X: np.ndarray | None = None) -> RegulatoryPrior:
    """Build the mapping, motif and sign matrices from a mapping file.

    Without a sign column the signs come from the empirical gene covariance of
    ``X``. Signs of pairs without a motif are set to zero.
    """
    rows, has_sign = read_mapping_rows(mapping_path)
    gidx = {g: i for i, g in enumerate(genes)}
    ridx = {r: m for m, r in enumerate(regions)}
    d = len(genes)
    region = -np.ones((d, d), dtype=int)
    M = np.zeros((d, d))
    S = np.zeros((d, d))
    seen = set()
    for reg, target, regulator, flag, sign, line in rows:
        if reg not in ridx:
            raise UnknownRegion(f"{mapping_path}: line {line}: unknown region {reg!r}")
        for g in (target, regulator):
            if g not in gidx:
                raise DimensionMismatch(f"{mapping_path}: line {line}: unknown gene {g!r}")
        i, i2 = gidx[target], gidx[regulator]
        if (i, i2) in seen:
            raise DuplicateLabel(f"{mapping_path}: line {line}: duplicate pair ({target}, {regulator})")
        seen.add((i, i2))
        region[i, i2] = ridx[reg]
        M[i, i2] = flag
        if has_sign:
            S[i, i2] = sign
    if not has_sign:
        if X is None:
            raise ValueError("signs are missing and no expression matrix was given")
        S = build_sign_matrix(X)
    S = np.where(M != 0, S, 0.0)
    return RegulatoryPrior(region, M, S, len(regions))


def write_mapping(path, prior: RegulatoryPrior, genes: list, regions: list, with_sign: bool = True) -> None:
    cols = list(MAPPING_COLUMNS) + (["sign"] if with_sign else [])
    lines = ["\t".join(cols)]
    for i, i2 in np.argwhere(prior.region >= 0):
        fields = [str(regions[prior.region[i, i2]]), str(genes[i]), str(genes[i2]), str(int(prior.M[i, i2]))]
        if with_sign:
            fields.append(str(int(prior.S[i, i2])))
        lines.append("\t".join(fields))
    Path(path).write_text("\n".join(lines) + "\n")


def read_labels(path, cells: list) -> np.ndarray:
    """Cluster labels from a two-column TSV (cell, cluster); clusters are 1-based in the file."""
    path = Path(path)
    with path.open(newline="") as fh:
        rows = [r for r in csv.reader(fh, delimiter="\t") if r and any(c.strip() for c in r)]
    if not rows or [h.strip() for h in rows[0]] != ["cell", "cluster"]:
        raise ParseError("header must be: cell, cluster", path, 1)
    cidx = {c: j for j, c in enumerate(cells)}
    z = -np.ones(len(cells), dtype=int)
    for i, row in enumerate(rows[1:], start=2):
        if len(row) != 2:
            raise ParseError(f"expected 2 fields, found {len(row)}", path, i)
        if row[0] not in cidx:
            raise DimensionMismatch(f"{path}: line {i}: unknown cell {row[0]!r}")
        try:
            k = int(row[1])
        except ValueError:
            raise ParseError(f"cluster must be an integer, got {row[1]!r}", path, i, 2) from None
        if k < 1:
            raise ParseError("cluster ids start at 1", path, i, 2)
        j = cidx[row[0]]
        if z[j] >= 0:
            raise DuplicateLabel(f"{path}: line {i}: cell {row[0]!r} listed twice")
        z[j] = k - 1
    missing = np.flatnonzero(z < 0)
    if missing.size:
        raise DimensionMismatch(f"{path}: no label for cell {cells[missing[0]]!r}")
    return z


def write_labels(path, z: np.ndarray, cells: list) -> None:
    lines = ["cell\tcluster"] + [f"{c}\t{int(k) + 1}" for c, k in zip(cells, z)]
    Path(path).write_text("\n".join(lines) + "\n")


# --------------------------------------------------------------------------
# config files


def read_config(path) -> dict:
    """Flat ``key = value`` file; ``#`` starts a comment. Keys use flag spelling."""
    out = {}
    path = Path(path)
    for i, line in enumerate(path.read_text().splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ParseError("expected key = value", path, i)
        key, value = (s.strip() for s in line.split("=", 1))
        if not key:
            raise ParseError("empty key", path, i)
        out[key.replace("-", "_")] = value
    return out


def write_config(path, values: dict) -> None:
    lines = [f"{k.replace('_', '-')} = {v}" for k, v in sorted(values.items())]
    Path(path).write_text("\n".join(lines) + "\n")


# --------------------------------------------------------------------------
# checkpoints


def _arr(a) -> dict:
    a = np.asarray(a)
    if a.dtype.kind in "iub":
        data = [int(v) for v in a.ravel()]
    else:
        data = [float(v) for v in a.ravel()]
    return {"shape": list(a.shape), "data": data}


def _unarr(d: dict, dtype=float) -> np.ndarray:
    return np.asarray(d["data"], dtype=dtype).reshape(d["shape"])


def hp_to_dict(hp: HyperParams) -> dict:
    return {
        "nu": hp.nu, "delta": hp.delta, "omega": hp.omega, "theta": hp.theta, "gamma": hp.gamma,
        "lam": hp.lam, "zeta": hp.zeta, "phi": hp.phi, "eta": _arr(hp.eta),
        "Lambda_diag": _arr(hp.Lambda_diag), "mu2": _arr(hp.mu2), "Sigma2": _arr(hp.Sigma2),
    }


def hp_from_dict(d: dict) -> HyperParams:
    scal = {k: float(d[k]) for k in ("nu", "delta", "omega", "theta", "gamma", "lam", "zeta", "phi")}
    return HyperParams(eta=_unarr(d["eta"]), Lambda_diag=_unarr(d["Lambda_diag"]), mu2=_unarr(d["mu2"]),
                       Sigma2=_unarr(d["Sigma2"]), **scal)


_STATE_FLOATS = ("pi", "p", "R", "Sigma", "mu", "mu1", "Sigma1", "alpha", "beta")


def state_to_dict(state: LatentState) -> dict:
    out = {k: _arr(getattr(state, k)) for k in _STATE_FLOATS}
    out["z"] = _arr(state.z.astype(int))
    out["delta"] = None if state.delta is None else _arr(state.delta)
    return out


def state_from_dict(d: dict) -> LatentState:
    kw = {k: _unarr(d[k]) for k in _STATE_FLOATS}
    return LatentState(z=_unarr(d["z"], int), delta=None if d.get("delta") is None else _unarr(d["delta"]), **kw)


@dataclass
class Checkpoint:
    dims: Dims
    hp: HyperParams
    state: LatentState
    report: FitReport = field(default_factory=FitReport)
    provenance: dict = field(default_factory=dict)
    labels: dict = field(default_factory=dict)
    schema_version: int = SCHEMA_VERSION

    def to_dict(self) -> dict:
        dims = self.dims
        return {
            "schema_version": self.schema_version,
            "dims": {"n": dims.n, "d": dims.d, "l": dims.l, "r": dims.r, "K": dims.K},
            "hyperparams": hp_to_dict(self.hp),
            "state": state_to_dict(self.state),
            "report": _jsonable(self.report.to_dict()),
            "provenance": _jsonable(self.provenance),
            "labels": _jsonable(self.labels),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Checkpoint":
        version = d.get("schema_version")
        if not isinstance(version, int):
            raise SchemaVersionError("checkpoint has no integer schema_version")
        if version > SCHEMA_VERSION:
            raise SchemaVersionError(f"checkpoint schema version {version} is newer than supported {SCHEMA_VERSION}")
        return cls(Dims(**d["dims"]), hp_from_dict(d["hyperparams"]), state_from_dict(d["state"]),
                   FitReport.from_dict(d["report"]), d.get("provenance", {}), d.get("labels", {}), version)

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True, allow_nan=False) + "\n"


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.floating):
        return float(obj)
    return obj


def write_checkpoint(path, ckpt: Checkpoint) -> None:
    Path(path).write_text(ckpt.dumps())


def read_checkpoint(path) -> Checkpoint:
    path = Path(path)
    try:
        d = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ParseError(exc.msg, path, exc.lineno, exc.colno) from None
    return Checkpoint.from_dict(d)


def config_hash(values: dict) -> str:
    text = json.dumps(_jsonable(values), sort_keys=True)
    return hashlib.sha256(text.encode()).hexdigest()[:16]


def file_digest(paths) -> str:
    h = hashlib.sha256()
    for p in sorted(Path(p) for p in paths):
        h.update(p.name.encode())
        h.update(p.read_bytes())
    return h.hexdigest()
