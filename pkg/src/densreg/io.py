"""Volume, map and landmark files, run configuration, and landmark evaluation.

A volume ``X`` is a JSON sidecar ``X.json`` plus a raw payload ``X.raw``.  The
payload stores the array with the first axis varying fastest, matching the
order of ``dims`` in the sidecar.
"""

from __future__ import annotations

import csv
import io as _io
import json
import math
import os
import tempfile
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import ValidationError
from .fields import CLAMPED, FORWARD, INVERSE, PERIODIC, DiffeoMap, Grid, ScalarField, VectorField

DTYPES = {"f32": np.dtype("<f4"), "f64": np.dtype("<f8")}
AXES = "xyz"


def _base(path) -> Path:
    p = Path(path)
    return p.with_suffix("") if p.suffix in (".json", ".raw") else p


def _atomic_write(path: Path, data: bytes) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_text(path, text: str) -> None:
    _atomic_write(Path(path), text.encode("utf-8"))


def write_json(path, obj) -> None:
    write_text(path, json.dumps(obj, indent=2, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# volumes


def grid_from_sidecar(meta: dict) -> Grid:
    try:
        dims = tuple(int(n) for n in meta["dims"])
        spacing = tuple(float(h) for h in meta["spacing"])
        origin = tuple(float(o) for o in meta.get("origin", [0.0] * len(dims)))
        bc = meta.get("bc", CLAMPED)
    except (KeyError, TypeError, ValueError) as exc:
        raise ValidationError(f"malformed sidecar: {exc}") from None
    return Grid(dims, spacing, origin, bc)


def sidecar(grid: Grid, dtype: str = "f64", **extra) -> dict:
    meta = {
        "dims": list(grid.dims),
        "spacing": list(grid.spacing),
        "origin": list(grid.origin),
        "bc": grid.bc,
        "dtype": dtype,
        "byte_order": "little",
    }
    meta.update(extra)
    return meta


def write_volume(path, fld: ScalarField, dtype: str = "f64", **extra) -> Path:
    """Write ``path.raw`` then ``path.json``; returns the sidecar path."""
    if dtype not in DTYPES:
        raise ValidationError(f"dtype must be one of {sorted(DTYPES)}, got {dtype!r}")
    base = _base(path)
    payload = np.asarray(fld.values, dtype=DTYPES[dtype]).ravel(order="F").tobytes()
    _atomic_write(base.with_suffix(".raw"), payload)
    meta = sidecar(fld.grid, dtype, **extra)
    _atomic_write(base.with_suffix(".json"), (json.dumps(meta, indent=2, sort_keys=True) + "\n").encode())
    return base.with_suffix(".json")


def read_sidecar(path) -> dict:
    base = _base(path)
    try:
        meta = json.loads(base.with_suffix(".json").read_text())
    except FileNotFoundError:
        raise ValidationError(f"missing sidecar {base.with_suffix('.json')}") from None
    except json.JSONDecodeError as exc:
        raise ValidationError(f"sidecar {base.with_suffix('.json')} is not valid JSON: {exc}") from None
    if not isinstance(meta, dict):
        raise ValidationError("sidecar must be a JSON object")
    return meta


def read_volume(path) -> ScalarField:
    """Read a volume; f32 payloads are widened to float64."""
    base = _base(path)
    meta = read_sidecar(base)
    dtype = meta.get("dtype")
    if dtype not in DTYPES:
        raise ValidationError(f"unsupported dtype {dtype!r}; expected one of {sorted(DTYPES)}")
    if meta.get("byte_order", "little") != "little":
        raise ValidationError(f"unsupported byte order {meta.get('byte_order')!r}")
    grid = grid_from_sidecar(meta)
    raw = base.with_suffix(".raw")
    try:
        data = raw.read_bytes()
    except FileNotFoundError:
        raise ValidationError(f"missing payload {raw}") from None
    expected = grid.size * DTYPES[dtype].itemsize
    if len(data) != expected:
        raise ValidationError(f"payload {raw} has {len(data)} bytes, expected {expected}")
    values = np.frombuffer(data, dtype=DTYPES[dtype]).astype(np.float64)
    if not np.all(np.isfinite(values)):
        raise ValidationError(f"payload {raw} contains non-finite values")
    return ScalarField(grid, values.reshape(grid.dims, order="F"))


def write_map(prefix, phi: DiffeoMap, dtype: str = "f64") -> None:
    """Write displacement components ``{prefix}_x`` ... and ``{prefix}_jac`` when tracked."""
    prefix = str(_base(prefix))
    for i in range(phi.grid.ndim):
        write_volume(f"{prefix}_{AXES[i]}", phi.displacement.component(i), dtype,
                     kind="displacement", component=AXES[i], direction=phi.direction)
    if phi.jac_det is not None:
        write_volume(f"{prefix}_jac", phi.jac_det, dtype, kind="jacobian", direction=phi.direction)


def read_map(prefix, direction: Optional[str] = None) -> DiffeoMap:
    prefix = str(_base(prefix))
    first = read_volume(f"{prefix}_x")
    grid = first.grid
    comps = [first.values] + [read_volume(f"{prefix}_{AXES[i]}").values for i in range(1, grid.ndim)]
    for i, c in enumerate(comps[1:], 1):
        if c.shape != grid.dims:
            raise ValidationError(f"map component {AXES[i]} has dims {c.shape}, expected {grid.dims}")
    if direction is None:
        direction = read_sidecar(f"{prefix}_x").get("direction", FORWARD)
        if direction not in (FORWARD, INVERSE):
            direction = FORWARD
    jac = None
    if Path(f"{prefix}_jac.json").exists():
        jac = read_volume(f"{prefix}_jac")
        grid.require_same(jac.grid, "map and Jacobian")
    return DiffeoMap(grid, VectorField(grid, np.stack(comps)), jac, direction)


# ---------------------------------------------------------------------------
# CSV


def format_float(x: float) -> str:
    return "%.17g" % x


def write_csv(path, header, rows) -> None:
    buf = _io.StringIO()
    buf.write(",".join(header) + "\n")
    for row in rows:
        buf.write(",".join(r if isinstance(r, str) else
                           (str(r) if isinstance(r, (int, np.integer)) else format_float(r)) for r in row) + "\n")
    write_text(path, buf.getvalue())


def write_points_csv(path, points: np.ndarray) -> None:
    """Write sample points with an ``x,y[,z]`` header; rows formatted with 17 significant digits."""
    points = np.asarray(points, dtype=float)
    d = points.shape[1] if points.ndim == 2 else 0
    header = ",".join(AXES[:d]) + "\n"
    body = "".join(",".join("%.17g" % v for v in row) + "\n" for row in points.tolist())
    write_text(path, header + body)


@dataclass
class LandmarkSet:
    ids: list
    points: np.ndarray  # (n, 3) in mm

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=float).reshape(-1, 3)
        if len(self.ids) != len(self.points):
            raise ValidationError("landmark ids and points differ in length")
        if len(set(self.ids)) != len(self.ids):
            raise ValidationError("landmark ids must be unique")
        if not np.all(np.isfinite(self.points)):
            raise ValidationError("landmark coordinates must be finite")

    def __len__(self):
        return len(self.ids)

    @classmethod
    def from_points(cls, points, ids=None) -> "LandmarkSet":
        pts = np.asarray(points, dtype=float)
        pts = np.hstack([pts, np.zeros((len(pts), 3 - pts.shape[1]))]) if pts.shape[1] < 3 else pts
        return cls(list(ids) if ids is not None else [str(i) for i in range(len(pts))], pts)


def read_landmarks(path) -> LandmarkSet:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or [c.strip() for c in rows[0]] != ["id", "x", "y", "z"]:
        raise ValidationError(f"{path}: header must be exactly 'id,x,y,z'")
    ids, pts = [], []
    for k, row in enumerate(rows[1:], start=2):
        if not row or all(not c.strip() for c in row):
            continue
        if len(row) != 4:
            raise ValidationError(f"{path}:{k}: expected 4 fields, got {len(row)}")
        try:
            pts.append([float(c) for c in row[1:]])
        except ValueError:
            raise ValidationError(f"{path}:{k}: coordinates must be numbers") from None
        ids.append(row[0].strip())
    return LandmarkSet(ids, np.array(pts).reshape(-1, 3))


def write_landmarks(path, lms: LandmarkSet) -> None:
    write_csv(path, ["id", "x", "y", "z"], [[i, *map(float, p)] for i, p in zip(lms.ids, lms.points)])


@dataclass
class LandmarkReport:
    mean: float
    sd: float
    max: float
    ids: list
    errors: np.ndarray
    excluded: list = field(default_factory=list)

    @property
    def count(self) -> int:
        return len(self.ids)

    def to_dict(self) -> dict:
        return {
            "mean_mm": self.mean,
            "sd_mm": self.sd,
            "max_mm": self.max,
            "count": self.count,
            "excluded_count": len(self.excluded),
            "excluded_ids": list(self.excluded),
            "errors_mm": {i: float(e) for i, e in zip(self.ids, self.errors)},
        }


def eval_landmarks(phi: DiffeoMap, source: LandmarkSet, target: LandmarkSet) -> LandmarkReport:
    """Euclidean errors ``|phi(source_i) - target_i|`` with population SD.

    Periodic grids use the minimum-image distance.  On clamped grids a source
    landmark outside the domain box is excluded from the statistics and listed
    in ``excluded``.
    """
    if len(source) == 0:
        raise ValidationError("landmark set is empty")
    if list(source.ids) != list(target.ids):
        if sorted(source.ids) != sorted(target.ids):
            raise ValidationError("source and target landmark ids differ")
        order = {k: i for i, k in enumerate(target.ids)}
        target = LandmarkSet(list(source.ids), target.points[[order[k] for k in source.ids]])
    grid = phi.grid
    d = grid.ndim
    src = source.points[:, :d]
    tgt = target.points[:, :d]
    if grid.periodic:
        inside = np.ones(len(src), dtype=bool)
    else:
        lo = np.asarray(grid.origin)
        hi = lo + np.asarray(grid.extent)
        tol = 1e-9 * np.asarray(grid.spacing)
        inside = np.all((src >= lo - tol) & (src <= hi + tol), axis=1)
    ids = [i for i, ok in zip(source.ids, inside) if ok]
    excluded = [i for i, ok in zip(source.ids, inside) if not ok]
    if not ids:
        raise ValidationError("every landmark lies outside the domain")
    diff = phi(src[inside]) - tgt[inside]
    if grid.periodic:
        L = np.asarray(grid.extent)
        diff = diff - L * np.round(diff / L)
    err = np.linalg.norm(diff, axis=1)
    return LandmarkReport(float(err.mean()), float(err.std()), float(err.max()), ids, err, excluded)


# ---------------------------------------------------------------------------
# run configuration


@dataclass
class RunConfig:
    """Flat key/value settings shared by the CLI subcommands."""

    # oit
    steps: int = 100
    track_inverse: bool = False
    renormalize: bool = True
    scheme: str = "midpoint"
    blocks: int = 8
    diagnostics_every: int = 10
    # wddr
    step: float = 0.01
    iterations: int = 1000
    sigmoid_center: float = 0.0
    sigmoid_sharpness: float = 1.0
    resync_every: int = 500
    report_every: int = 100
    form: str = "adjoint"
    backtracking: bool = False
    alpha: float = 1.0
    # shared
    floor: float = 0.0
    seed: int = 0
    # alpha fit
    alpha_min: float = 0.3
    alpha_max: float = 1.2
    alpha_step: float = 0.005
    # outputs
    out: str = ""
    dtype: str = "f64"

    def update(self, values: dict) -> "RunConfig":
        known = {f.name: f for f in fields(self)}
        for key, raw in values.items():
            if key not in known:
                raise ValidationError(f"unknown config key {key!r}")
            setattr(self, key, _coerce(key, raw, type(getattr(self, key))))
        return self


def _coerce(key, raw, typ):
    if not isinstance(raw, str):
        return typ(raw)
    text = raw.strip()
    try:
        if typ is bool:
            low = text.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if typ is int:
            return int(text)
        if typ is float:
            x = float(text)
            if not math.isfinite(x):
                raise ValueError(text)
            return x
    except ValueError:
        raise ValidationError(f"config key {key!r}: cannot parse {raw!r} as {typ.__name__}") from None
    return text


def parse_config_text(text: str, source: str = "<config>") -> dict:
    out = {}
    for k, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValidationError(f"{source}:{k}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        if not key:
            raise ValidationError(f"{source}:{k}: empty key")
        out[key] = value
    return out


def load_run_config(path=None, overrides: Optional[dict] = None) -> RunConfig:
    cfg = RunConfig()
    if path:
        try:
            text = Path(path).read_text()
        except FileNotFoundError:
            raise ValidationError(f"config file {path} not found") from None
        cfg.update(parse_config_text(text, str(path)))
    if overrides:
        cfg.update({k: v for k, v in overrides.items() if v is not None})
    return cfg


__all__ = [
    "PERIODIC",
    "CLAMPED",
    "read_volume",
    "write_volume",
    "read_map",
    "write_map",
    "read_landmarks",
    "write_landmarks",
    "LandmarkSet",
    "LandmarkReport",
    "eval_landmarks",
    "RunConfig",
    "load_run_config",
    "parse_config_text",
    "write_csv",
    "write_points_csv",
    "write_json",
]
