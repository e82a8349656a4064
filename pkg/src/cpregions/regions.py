"""Prediction regions in physical (mm) coordinates.

Three region families cover the package's needs: axis-aligned boxes
(``HyperRect``), Mahalanobis balls (``Ellipsoid``) and unions of grid
cells (``GridMask``). All are immutable. Boxes and ellipsoids treat
their boundary as inside (``<=``); grid masks partition space into
half-open cells ``[mid - s/2, mid + s/2)`` per axis, with the upper
edge of the whole grid belonging to the last cell, so every point lies
in at most one cell.

``AffineMap`` expresses per-axis rescale+shift (e.g. voxel-to-mm
conversions); each region type transforms exactly under it.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Union

import numpy as np
from scipy.linalg import solve_triangular

from .errors import DimMismatch, IndexOutOfRange, NonSPDMatrix

__all__ = [
    "AffineMap",
    "HyperRect",
    "Ellipsoid",
    "GridMask",
    "Region",
    "cell_index",
    "bins_to_region",
    "region_to_json",
    "region_from_json",
    "unit_ball_volume",
]

_SYM_TOL = 1e-9


def unit_ball_volume(dims: int) -> float:
    """Lebesgue volume of the unit ball in ``dims`` dimensions (1..3)."""
    try:
        return {1: 2.0, 2: math.pi, 3: 4.0 * math.pi / 3.0}[dims]
    except KeyError:
        raise DimMismatch(f"unsupported dimensionality {dims}") from None


def _as_vector(x, dims: int | None = None, name: str = "vector") -> np.ndarray:
    arr = np.array(x, dtype=float)
    if arr.ndim != 1:
        raise DimMismatch(f"{name} must be 1-D, got shape {arr.shape}")
    if dims is not None and arr.shape[0] != dims:
        raise DimMismatch(f"{name} has length {arr.shape[0]}, expected {dims}")
    if not 1 <= arr.shape[0] <= 3:
        raise DimMismatch(f"{name} must have 1..3 entries, got {arr.shape[0]}")
    arr.setflags(write=False)
    return arr


def _as_matrix(x, dims: int, name: str = "matrix") -> np.ndarray:
    arr = np.array(x, dtype=float)
    if arr.shape != (dims, dims):
        raise DimMismatch(f"{name} must be {dims}x{dims}, got shape {arr.shape}")
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class AffineMap:
    """Per-axis map ``y -> scale * y + offset`` with strictly positive scale.

    Parameters
    ----------
    scale : array_like
        Positive per-axis factors.
    offset : array_like
        Per-axis shifts, same length as ``scale``.
    """

    scale: np.ndarray
    offset: np.ndarray

    def __post_init__(self):
        scale = _as_vector(self.scale, name="scale")
        offset = _as_vector(self.offset, dims=scale.shape[0], name="offset")
        if not np.all(scale > 0):
            raise DimMismatch("scale factors must be strictly positive")
        object.__setattr__(self, "scale", scale)
        object.__setattr__(self, "offset", offset)

    @property
    def dims(self) -> int:
        return self.scale.shape[0]

    @classmethod
    def identity(cls, dims: int) -> "AffineMap":
        return cls(np.ones(dims), np.zeros(dims))

    def apply(self, y) -> np.ndarray:
        """Apply to a point or an ``(..., dims)`` stack of points."""
        arr = np.asarray(y, dtype=float)
        if arr.shape[-1] != self.dims:
            raise DimMismatch(
                f"point has {arr.shape[-1]} coordinates, map expects {self.dims}")
        return arr * self.scale + self.offset

    def inverse(self) -> "AffineMap":
        return AffineMap(1.0 / self.scale, -self.offset / self.scale)

    def to_json(self) -> dict:
        return {"scale": self.scale.tolist(), "offset": self.offset.tolist()}

    @classmethod
    def from_json(cls, obj: dict) -> "AffineMap":
        return cls(obj["scale"], obj["offset"])


def cell_index(origin, spacing, shape, y) -> tuple[int, ...] | None:
    """Index of the half-open cell containing ``y``, or None if outside.

    Cell ``k`` on an axis spans ``[origin + (k - 0.5) * spacing,
    origin + (k + 0.5) * spacing)``; a point exactly on the upper edge of
    the whole grid falls in the last cell.
    """
    origin = np.asarray(origin, dtype=float)
    spacing = np.asarray(spacing, dtype=float)
    shape_arr = np.asarray(shape, dtype=int)
    yv = np.asarray(y, dtype=float)
    if yv.shape != origin.shape:
        raise DimMismatch(
            f"point has shape {yv.shape}, grid is {origin.shape[0]}-dimensional")
    # position in cell units measured from the lower physical edge
    t = (yv - origin) / spacing + 0.5
    if np.any(t < 0) or np.any(t > shape_arr):
        return None
    idx = np.floor(t).astype(int)
    idx = np.minimum(idx, shape_arr - 1)  # exact upper edge -> last cell
    return tuple(int(i) for i in idx)


@dataclass(frozen=True, eq=False)
class HyperRect:
    """Axis-aligned box ``{y : |y_j - center_j| <= half_widths_j}``.

    A box with any non-positive half-width carries no volume and is
    stored with ``empty=True``; ``measure() == 0`` exactly when empty.
    """

    center: np.ndarray
    half_widths: np.ndarray
    empty: bool = False

    def __post_init__(self):
        center = _as_vector(self.center, name="center")
        hw = _as_vector(self.half_widths, dims=center.shape[0], name="half_widths")
        object.__setattr__(self, "center", center)
        object.__setattr__(self, "half_widths", hw)
        if not self.empty and not np.all(hw > 0):
            object.__setattr__(self, "empty", True)

    @property
    def dims(self) -> int:
        return self.center.shape[0]

    def contains(self, y) -> bool:
        if self.empty:
            return False
        yv = _as_vector(y, dims=self.dims, name="point")
        return bool(np.all(np.abs(yv - self.center) <= self.half_widths))

    def measure(self) -> float:
        if self.empty:
            return 0.0
        return float(np.prod(2.0 * self.half_widths))

    def transform(self, m: AffineMap) -> "HyperRect":
        if m.dims != self.dims:
            raise DimMismatch("map dimensionality differs from region")
        return HyperRect(m.apply(self.center), m.scale * self.half_widths, self.empty)


@dataclass(frozen=True, eq=False)
class Ellipsoid:
    """Mahalanobis ball ``{y : sqrt((y-c)' S^-1 (y-c)) <= radius}``.

    ``shape_matrix`` must be symmetric positive definite; violation
    raises :class:`NonSPDMatrix` at construction. ``radius <= 0`` marks
    the region empty.
    """

    center: np.ndarray
    shape_matrix: np.ndarray
    radius: float
    empty: bool = False
    _chol: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        center = _as_vector(self.center, name="center")
        S = _as_matrix(self.shape_matrix, center.shape[0], name="shape_matrix")
        scale = max(1.0, float(np.max(np.abs(S))))
        if np.max(np.abs(S - S.T)) > _SYM_TOL * scale:
            raise NonSPDMatrix("shape_matrix is not symmetric within 1e-9")
        try:
            chol = np.linalg.cholesky(0.5 * (S + S.T))
        except np.linalg.LinAlgError:
            raise NonSPDMatrix("shape_matrix is not positive definite") from None
        object.__setattr__(self, "center", center)
        object.__setattr__(self, "shape_matrix", S)
        object.__setattr__(self, "radius", float(self.radius))
        object.__setattr__(self, "_chol", chol)
        if not self.empty and not self.radius > 0:
            object.__setattr__(self, "empty", True)

    @property
    def dims(self) -> int:
        return self.center.shape[0]

    def mahalanobis(self, y) -> float:
        """Distance ``sqrt((y-c)' S^-1 (y-c))`` from the center."""
        yv = _as_vector(y, dims=self.dims, name="point")
        w = solve_triangular(self._chol, yv - self.center, lower=True)
        return float(np.sqrt(w @ w))

    def contains(self, y) -> bool:
        if self.empty:
            return False
        return self.mahalanobis(y) <= self.radius

    def measure(self) -> float:
        if self.empty:
            return 0.0
        sqrt_det = float(np.prod(np.diag(self._chol)))
        return unit_ball_volume(self.dims) * self.radius ** self.dims * sqrt_det

    def transform(self, m: AffineMap) -> "Ellipsoid":
        if m.dims != self.dims:
            raise DimMismatch("map dimensionality differs from region")
        S = self.shape_matrix * np.outer(m.scale, m.scale)
        return Ellipsoid(m.apply(self.center), S, self.radius, self.empty)


@dataclass(frozen=True, eq=False)
class GridMask:
    """Union of half-open grid cells selected by a boolean array.

    ``origin`` is the midpoint of cell ``(0, ..., 0)``; cell ``k`` has
    midpoint ``origin + k * spacing``. The mask is empty exactly when no
    cell is included.
    """

    origin: np.ndarray
    spacing: np.ndarray
    included: np.ndarray

    def __post_init__(self):
        origin = _as_vector(self.origin, name="origin")
        spacing = _as_vector(self.spacing, dims=origin.shape[0], name="spacing")
        if not np.all(spacing > 0):
            raise DimMismatch("spacing must be strictly positive")
        inc = np.array(self.included, dtype=bool)
        if inc.ndim != origin.shape[0]:
            raise DimMismatch(
                f"included has {inc.ndim} axes, expected {origin.shape[0]}")
        inc.setflags(write=False)
        object.__setattr__(self, "origin", origin)
        object.__setattr__(self, "spacing", spacing)
        object.__setattr__(self, "included", inc)

    @property
    def dims(self) -> int:
        return self.origin.shape[0]

    @property
    def shape(self) -> tuple[int, ...]:
        return self.included.shape

    @property
    def empty(self) -> bool:
        return not bool(self.included.any())

    def contains(self, y) -> bool:
        idx = cell_index(self.origin, self.spacing, self.included.shape, y)
        return idx is not None and bool(self.included[idx])

    def measure(self) -> float:
        return float(self.included.sum()) * float(np.prod(self.spacing))

    def transform(self, m: AffineMap) -> "GridMask":
        if m.dims != self.dims:
            raise DimMismatch("map dimensionality differs from region")
        return GridMask(m.apply(self.origin), m.scale * self.spacing, self.included)


Region = Union[HyperRect, Ellipsoid, GridMask]


def bins_to_region(origin, spacing, shape, included_bins) -> GridMask:
    """Build a :class:`GridMask` from an iterable of cell indices.

    Raises :class:`IndexOutOfRange` if any index falls outside ``shape``.
    """
    shape = tuple(int(k) for k in shape)
    mask = np.zeros(shape, dtype=bool)
    for idx in included_bins:
        idx = tuple(int(i) for i in idx)
        if len(idx) != len(shape):
            raise DimMismatch(f"index {idx} has wrong rank for shape {shape}")
        if any(i < 0 or i >= k for i, k in zip(idx, shape)):
            raise IndexOutOfRange(f"index {idx} outside grid shape {shape}")
        mask[idx] = True
    return GridMask(origin, spacing, mask)


def _runs_encode(flat: np.ndarray) -> tuple[bool, list[int]]:
    """Run-length encode a boolean vector as (first value, run lengths)."""
    if flat.size == 0:
        return False, []
    change = np.flatnonzero(flat[1:] != flat[:-1]) + 1
    bounds = np.concatenate(([0], change, [flat.size]))
    return bool(flat[0]), np.diff(bounds).astype(int).tolist()


def _runs_decode(first: bool, runs: list[int], size: int) -> np.ndarray:
    total = int(sum(runs))
    if total != size:
        raise DimMismatch(f"run lengths sum to {total}, expected {size}")
    out = np.empty(size, dtype=bool)
    pos, val = 0, bool(first)
    for r in runs:
        out[pos:pos + r] = val
        pos += r
        val = not val
    return out


def region_to_json(region: Region) -> dict:
    """JSON-serializable form of a region (floats kept repr-exact)."""
    if isinstance(region, HyperRect):
        return {
            "type": "hyperrect",
            "center": region.center.tolist(),
            "half_widths": region.half_widths.tolist(),
            "empty": region.empty,
        }
    if isinstance(region, Ellipsoid):
        return {
            "type": "ellipsoid",
            "center": region.center.tolist(),
            "shape_matrix": region.shape_matrix.tolist(),
            "radius": region.radius,
            "empty": region.empty,
        }
    if isinstance(region, GridMask):
        first, runs = _runs_encode(region.included.ravel(order="C"))
        return {
            "type": "grid_mask",
            "origin": region.origin.tolist(),
            "spacing": region.spacing.tolist(),
            "shape": list(region.included.shape),
            "first": first,
            "runs": runs,
        }
    raise TypeError(f"not a region: {type(region).__name__}")


def region_from_json(obj: dict) -> Region:
    """Inverse of :func:`region_to_json`."""
    kind = obj.get("type")
    if kind == "hyperrect":
        return HyperRect(obj["center"], obj["half_widths"], bool(obj.get("empty", False)))
    if kind == "ellipsoid":
        return Ellipsoid(obj["center"], obj["shape_matrix"], obj["radius"],
                         bool(obj.get("empty", False)))
    if kind == "grid_mask":
        shape = tuple(int(k) for k in obj["shape"])
        flat = _runs_decode(bool(obj["first"]), obj["runs"], int(np.prod(shape)))
        return GridMask(obj["origin"], obj["spacing"], flat.reshape(shape))
    raise DimMismatch(f"unknown region type {kind!r}")
