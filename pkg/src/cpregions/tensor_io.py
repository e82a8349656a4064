"""Tensor files, probability grids and dataset manifests.

Tensors travel as npy v1.0 files (magic ``\\x93NUMPY``), little-endian
float32 or float64, C-order. Reading promotes to float64. The codec is
deliberately strict: anything outside that envelope raises a typed
error rather than being coerced.

A dataset is a ``manifest.json`` plus one tensor file per example grid.
Distances are millimetres throughout; a grid's ``origin`` is the
physical midpoint of cell ``(0, ..., 0)`` and cell ``k`` has midpoint
``origin + k * spacing``.
"""
from __future__ import annotations

import ast
import json
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import (
    DimMismatch,
    InvariantViolation,
    IoError,
    MalformedHeader,
    MissingTensor,
    ShapeMismatch,
    UnsupportedDType,
)
from .regions import AffineMap, cell_index

__all__ = [
    "read_tensor",
    "write_tensor",
    "GridDistribution",
    "Example",
    "DatasetManifest",
    "load_dataset",
    "save_dataset",
]

_MAGIC = b"\x93NUMPY"
_MASS_TOL = 1e-9
_NEG_TOL = -1e-9


def write_tensor(array, path) -> None:
    """Write ``array`` as an npy v1.0 file.

    float32 input is stored as ``<f4``, everything else as ``<f8``.
    Data is written C-contiguous; filesystem failures raise
    :class:`IoError`.
    """
    arr = np.asarray(array)
    if arr.dtype == np.float32:
        arr = np.ascontiguousarray(arr, dtype="<f4")
        descr = "<f4"
    else:
        arr = np.ascontiguousarray(arr, dtype="<f8")
        descr = "<f8"
    shape = arr.shape if arr.ndim > 0 else ()
    header = ("{'descr': '%s', 'fortran_order': False, 'shape': %s, }"
              % (descr, repr(tuple(shape))))
    base = len(_MAGIC) + 2 + 2 + len(header) + 1
    pad = (64 - base % 64) % 64
    header_bytes = (header + " " * pad + "\n").encode("latin1")
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    try:
        if path.parent and not path.parent.exists():
            os.makedirs(path.parent, exist_ok=True)
        with open(tmp, "wb") as fh:
            fh.write(_MAGIC)
            fh.write(bytes([1, 0]))
            fh.write(len(header_bytes).to_bytes(2, "little"))
            fh.write(header_bytes)
            fh.write(arr.tobytes(order="C"))
        os.replace(tmp, path)
    except OSError as exc:
        raise IoError(f"cannot write tensor to {path}: {exc}") from exc


def read_tensor(path, expected_shape=None) -> np.ndarray:
    """Read an npy v1.0 tensor, promoted to float64.

    Accepts ``<f4`` and ``<f8`` payloads only. ``expected_shape``, when
    given, is enforced with :class:`ShapeMismatch`.
    """
    try:
        with open(path, "rb") as fh:
            raw = fh.read()
    except FileNotFoundError as exc:
        raise MissingTensor(f"tensor file not found: {path}") from exc
    except OSError as exc:
        raise IoError(f"cannot read tensor from {path}: {exc}") from exc

    if len(raw) < 10 or raw[:6] != _MAGIC:
        raise MalformedHeader(f"{path}: missing npy magic")
    major, minor = raw[6], raw[7]
    if (major, minor) != (1, 0):
        raise MalformedHeader(f"{path}: unsupported npy version {major}.{minor}")
    hlen = int.from_bytes(raw[8:10], "little")
    header_end = 10 + hlen
    if len(raw) < header_end:
        raise MalformedHeader(f"{path}: truncated header")
    if (header_end) % 64 != 0 or not raw[10:header_end].endswith(b"\n"):
        raise MalformedHeader(f"{path}: header not 64-byte aligned")
    try:
        meta = ast.literal_eval(raw[10:header_end].decode("latin1"))
    except (ValueError, SyntaxError) as exc:
        raise MalformedHeader(f"{path}: unparsable header") from exc
    if not isinstance(meta, dict) or set(meta) != {"descr", "fortran_order", "shape"}:
        raise MalformedHeader(f"{path}: header keys invalid")

    descr = meta["descr"]
    if descr not in ("<f4", "<f8"):
        raise UnsupportedDType(f"{path}: dtype {descr!r} not supported")
    shape = meta["shape"]
    if (not isinstance(shape, tuple)
            or not all(isinstance(k, int) and k >= 0 for k in shape)):
        raise MalformedHeader(f"{path}: bad shape entry {shape!r}")
    order = "F" if meta["fortran_order"] else "C"

    itemsize = 4 if descr == "<f4" else 8
    count = int(np.prod(shape, dtype=np.int64)) if shape else 1
    if len(raw) - header_end != count * itemsize:
        raise MalformedHeader(
            f"{path}: payload is {len(raw) - header_end} bytes, "
            f"expected {count * itemsize}")
    data = np.frombuffer(raw[header_end:], dtype=descr, count=count)
    arr = data.reshape(shape, order=order).astype(np.float64)
    if expected_shape is not None and arr.shape != tuple(expected_shape):
        raise ShapeMismatch(
            f"{path}: tensor shape {arr.shape} != expected {tuple(expected_shape)}")
    return arr


def _locked(arr: np.ndarray) -> np.ndarray:
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class GridDistribution:
    """Discrete probability distribution over a regular grid.

    Parameters
    ----------
    origin : array_like
        Physical midpoint (mm) of the first cell, one entry per axis.
    spacing : array_like
        Positive cell edge lengths (mm).
    values : ndarray
        Non-negative cell masses, one axis per spatial axis.

    Values are copied, promoted to float64 and frozen; instances are
    safe to share.
    """

    origin: np.ndarray
    spacing: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        values = np.array(self.values, dtype=np.float64)
        if not 1 <= values.ndim <= 3:
            raise DimMismatch(f"grid must be 1-D to 3-D, got {values.ndim}-D")
        origin = np.array(self.origin, dtype=np.float64)
        spacing = np.array(self.spacing, dtype=np.float64)
        if origin.shape != (values.ndim,) or spacing.shape != (values.ndim,):
            raise DimMismatch(
                f"origin/spacing must have {values.ndim} entries for a "
                f"{values.ndim}-D grid")
        if not np.all(spacing > 0):
            raise DimMismatch("spacing must be strictly positive")
        if min(values.shape) < 1:
            raise DimMismatch("grid axes must be non-empty")
        object.__setattr__(self, "origin", _locked(origin))
        object.__setattr__(self, "spacing", _locked(spacing))
        object.__setattr__(self, "values", _locked(values))

    @property
    def dims(self) -> int:
        return self.values.ndim

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    def midpoints(self, axis: int) -> np.ndarray:
        """Physical midpoints of cells along one axis."""
        k = self.shape[axis]
        return self.origin[axis] + np.arange(k) * self.spacing[axis]

    def extent(self) -> tuple[np.ndarray, np.ndarray]:
        """Physical (lower, upper) corners of the covered volume."""
        lo = self.origin - 0.5 * self.spacing
        hi = self.origin + (np.array(self.shape) - 0.5) * self.spacing
        return lo, hi

    def cell_of(self, y) -> tuple[int, ...] | None:
        """Index of the half-open cell containing ``y`` (None if outside)."""
        return cell_index(self.origin, self.spacing, self.shape, y)

    def normalize(self) -> "GridDistribution":
        """Clamp tiny negatives to zero and rescale to unit mass.

        Negatives below -1e-9 raise :class:`InvariantViolation`, as does
        zero total mass. When nothing needs clamping and the mass is
        already within 1e-9 of one, the values pass through unchanged,
        which makes the operation exactly idempotent.
        """
        v = self.values
        if np.any(v < _NEG_TOL):
            raise InvariantViolation(
                f"grid has negative mass below tolerance (min {v.min():.3e})")
        clipped = np.any(v < 0)
        if clipped:
            v = np.clip(v, 0.0, None)
        total = float(v.sum())
        if total <= 0.0:
            raise InvariantViolation("grid carries no probability mass")
        if not clipped and abs(total - 1.0) <= _MASS_TOL:
            return self
        return GridDistribution(self.origin, self.spacing, v / total)

    def same_geometry(self, other: "GridDistribution") -> bool:
        return (self.shape == other.shape
                and np.array_equal(self.origin, other.origin)
                and np.array_equal(self.spacing, other.spacing))


@dataclass(eq=False)
class Example:
    """One localization example: ground truth plus model outputs.

    At least one of ``grid``, ``point``, ``samples`` must be present.
    ``samples`` is an ``(n_draws, dims)`` stack; ``covariance`` a
    ``(dims, dims)`` PSD matrix. ``affine`` maps grid-native
    coordinates to the output frame when the dataset declares one.
    """

    id: str
    truth: np.ndarray
    grid: GridDistribution | None = None
    point: np.ndarray | None = None
    samples: np.ndarray | None = None
    covariance: np.ndarray | None = None
    affine: AffineMap | None = None
    landmark: int | None = None

    def __post_init__(self):
        self.truth = np.array(self.truth, dtype=np.float64)
        if self.truth.ndim != 1 or not 1 <= self.truth.shape[0] <= 3:
            raise InvariantViolation(
                f"example {self.id}: truth must be a 1..3-vector")
        d = self.truth.shape[0]
        if self.grid is None and self.point is None and self.samples is None:
            raise InvariantViolation(
                f"example {self.id}: needs at least one of grid/point/samples")
        if self.grid is not None and self.grid.dims != d:
            raise InvariantViolation(
                f"example {self.id}: grid is {self.grid.dims}-D, truth is {d}-D")
        if self.point is not None:
            self.point = np.array(self.point, dtype=np.float64)
            if self.point.shape != (d,):
                raise InvariantViolation(
                    f"example {self.id}: point shape {self.point.shape} != ({d},)")
        if self.samples is not None:
            self.samples = np.array(self.samples, dtype=np.float64)
            if self.samples.ndim != 2 or self.samples.shape[1] != d:
                raise InvariantViolation(
                    f"example {self.id}: samples must be (n, {d})")
        if self.covariance is not None:
            C = np.array(self.covariance, dtype=np.float64)
            if C.shape != (d, d):
                raise InvariantViolation(
                    f"example {self.id}: covariance shape {C.shape} != ({d},{d})")
            scale = max(1.0, float(np.max(np.abs(C))))
            if np.max(np.abs(C - C.T)) > 1e-9 * scale:
                raise InvariantViolation(
                    f"example {self.id}: covariance not symmetric within 1e-9")
            if np.linalg.eigvalsh(0.5 * (C + C.T)).min() < -1e-9 * scale:
                raise InvariantViolation(
                    f"example {self.id}: covariance not positive semi-definite")
            self.covariance = C

    @property
    def dims(self) -> int:
        return self.truth.shape[0]


@dataclass(eq=False)
class DatasetManifest:
    """Parsed manifest header (the examples live in ``load_dataset``)."""

    dims: int
    split: str
    units: str = "mm"
    seed: int | None = None

    SPLITS = ("calibration", "test")

    def validate(self) -> None:
        if self.dims not in (2, 3):
            raise InvariantViolation(f"manifest dims must be 2 or 3, got {self.dims}")
        if self.split not in self.SPLITS:
            raise InvariantViolation(
                f"manifest split must be one of {self.SPLITS}, got {self.split!r}")
        if self.units != "mm":
            raise InvariantViolation(f"manifest units must be 'mm', got {self.units!r}")


def _parse_manifest(path: Path) -> tuple[DatasetManifest, list[dict], AffineMap | None]:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
    except FileNotFoundError as exc:
        raise IoError(f"manifest not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise InvariantViolation(f"manifest is not valid JSON: {exc}") from exc
    for key in ("dims", "split", "units", "examples"):
        if key not in doc:
            raise InvariantViolation(f"manifest missing key {key!r}")
    manifest = DatasetManifest(
        dims=int(doc["dims"]), split=str(doc["split"]),
        units=str(doc["units"]), seed=doc.get("seed"))
    manifest.validate()
    default_affine = (AffineMap.from_json(doc["affine"])
                      if doc.get("affine") is not None else None)
    entries = doc["examples"]
    if not isinstance(entries, list):
        raise InvariantViolation("manifest 'examples' must be a list")
    return manifest, entries, default_affine


def load_dataset(manifest_path) -> tuple[DatasetManifest, list["Example"]]:
    """Load a manifest and all referenced examples.

    Grid tensors are read eagerly, validated against the manifest's
    recorded shape, clamped/renormalized, and frozen. Example ids must
    be unique.
    """
    path = Path(manifest_path)
    manifest, entries, default_affine = _parse_manifest(path)
    root = path.parent
    examples: list[Example] = []
    seen: set[str] = set()
    for entry in entries:
        if "id" not in entry or "truth" not in entry:
            raise InvariantViolation("manifest entry missing 'id' or 'truth'")
        ex_id = str(entry["id"])
        if ex_id in seen:
            raise InvariantViolation(f"duplicate example id {ex_id!r}")
        seen.add(ex_id)

        grid = None
        if entry.get("grid") is not None:
            g = entry["grid"]
            for key in ("path", "origin", "spacing", "shape"):
                if key not in g:
                    raise InvariantViolation(
                        f"example {ex_id}: grid entry missing {key!r}")
            values = read_tensor(root / g["path"],
                                 expected_shape=tuple(g["shape"]))
            grid = GridDistribution(g["origin"], g["spacing"], values).normalize()
            if grid.dims != manifest.dims:
                raise InvariantViolation(
                    f"example {ex_id}: grid dims {grid.dims} != manifest "
                    f"dims {manifest.dims}")

        affine = (AffineMap.from_json(entry["affine"])
                  if entry.get("affine") is not None else default_affine)
        ex = Example(
            id=ex_id,
            truth=np.asarray(entry["truth"], dtype=float),
            grid=grid,
            point=(np.asarray(entry["point"], dtype=float)
                   if entry.get("point") is not None else None),
            samples=(np.asarray(entry["samples"], dtype=float)
                     if entry.get("samples") is not None else None),
            covariance=(np.asarray(entry["covariance"], dtype=float)
                        if entry.get("covariance") is not None else None),
            affine=affine,
            landmark=(int(entry["landmark"])
                      if entry.get("landmark") is not None else None),
        )
        if ex.dims != manifest.dims:
            raise InvariantViolation(
                f"example {ex_id}: truth is {ex.dims}-D, manifest says "
                f"{manifest.dims}-D")
        examples.append(ex)
    return manifest, examples


def save_dataset(examples, out_dir, *, dims: int, split: str,
                 seed: int | None = None, tensor_dtype: str = "float64",
                 affine: AffineMap | None = None) -> Path:
    """Write examples plus ``manifest.json`` under ``out_dir``.

    Grid tensors go to ``tensors/<id>.npy`` in the requested dtype
    (float32 halves the disk footprint; values are promoted back to
    float64 on load). Returns the manifest path.
    """
    if tensor_dtype not in ("float32", "float64"):
        raise InvariantViolation(f"unsupported tensor dtype {tensor_dtype!r}")
    out = Path(out_dir)
    tensor_dir = out / "tensors"
    os.makedirs(tensor_dir, exist_ok=True)
    entries = []
    for ex in examples:
        entry: dict = {"id": ex.id, "truth": ex.truth.tolist()}
        if ex.grid is not None:
            rel = f"tensors/{ex.id}.npy"
            values = ex.grid.values
            if tensor_dtype == "float32":
                values = values.astype(np.float32)
            write_tensor(values, out / rel)
            entry["grid"] = {
                "path": rel,
                "origin": ex.grid.origin.tolist(),
                "spacing": ex.grid.spacing.tolist(),
                "shape": list(ex.grid.shape),
            }
        if ex.point is not None:
            entry["point"] = ex.point.tolist()
        if ex.samples is not None:
            entry["samples"] = ex.samples.tolist()
        if ex.covariance is not None:
            entry["covariance"] = ex.covariance.tolist()
        if ex.affine is not None:
            entry["affine"] = ex.affine.to_json()
        if ex.landmark is not None:
            entry["landmark"] = ex.landmark
        entries.append(entry)
    doc = {"dims": dims, "split": split, "units": "mm", "examples": entries}
    if seed is not None:
        doc["seed"] = seed
    if affine is not None:
        doc["affine"] = affine.to_json()
    manifest_path = out / "manifest.json"
    tmp = manifest_path.with_suffix(".json.tmp")
    with open(tmp, "w", encoding="utf-8") as fh:
        json.dump(doc, fh)
    os.replace(tmp, manifest_path)
    return manifest_path
