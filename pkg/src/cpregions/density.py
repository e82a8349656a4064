"""Operations on grid densities: interpolation, decoding, moments.

The continuous density behind a :class:`GridDistribution` is defined by
multilinear interpolation over the ``2**d`` surrounding cell midpoints.
Queries between the physical edge of the grid and the outermost
midpoints clamp onto the midpoint hull (the density is extended
constantly there); queries beyond the physical extent raise
:class:`OutOfDomain`. This keeps every in-domain point scorable while
still rejecting points the grid cannot speak for.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from itertools import product

import numpy as np
from scipy.special import logsumexp

from .errors import (
    DegenerateGrid,
    EmptyCalibrationSet,
    GeometryMismatch,
    InvariantViolation,
    MissingField,
    OutOfDomain,
)
from .tensor_io import Example, GridDistribution

__all__ = [
    "interp_density",
    "interp_density_many",
    "score_density",
    "decode",
    "fit_gaussian",
    "average_grids",
    "Temperature",
    "apply_temperature",
    "fit_temperature",
]

_LOG_FLOOR = 1e-12


def interp_density_many(grid: GridDistribution, points) -> np.ndarray:
    """Interpolated density at an ``(n, dims)`` stack of points.

    Parameters
    ----------
    grid : GridDistribution
        Source density.
    points : array_like
        Query points in mm, shape ``(n, dims)``.

    Returns
    -------
    ndarray
        Interpolated values, shape ``(n,)``.

    Raises
    ------
    OutOfDomain
        If any point lies beyond the physical extent of the grid.
    """
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    d = grid.dims
    if pts.shape[1] != d:
        raise OutOfDomain(f"points have {pts.shape[1]} coordinates, grid is {d}-D")
    lo, hi = grid.extent()
    if np.any(pts < lo) or np.any(pts > hi):
        bad = np.argmax(np.any((pts < lo) | (pts > hi), axis=1))
        raise OutOfDomain(
            f"point {pts[bad].tolist()} outside physical extent "
            f"[{lo.tolist()}, {hi.tolist()}]")

    shape = np.asarray(grid.shape)
    # midpoint coordinates, clamped onto the hull of cell midpoints
    t = (pts - grid.origin) / grid.spacing
    t = np.clip(t, 0.0, shape - 1)
    k = np.minimum(t.astype(int), np.maximum(shape - 2, 0))
    f = t - k

    out = np.zeros(pts.shape[0])
    for corner in product((0, 1), repeat=d):
        idx = np.minimum(k + np.asarray(corner), shape - 1)
        w = np.ones(pts.shape[0])
        for j, c in enumerate(corner):
            w *= f[:, j] if c else 1.0 - f[:, j]
        out += w * grid.values[tuple(idx.T)]
    return out


def interp_density(grid: GridDistribution, y) -> float:
    """Interpolated density at a single point (see
    :func:`interp_density_many`)."""
    return float(interp_density_many(grid, np.asarray(y, dtype=float)[None, :])[0])


def score_density(grid: GridDistribution, y) -> float:
    """Nonconformity score: negated interpolated density.

    Low density means a surprising point, so the score rises as the
    density falls.
    """
    return -interp_density(grid, y)


def decode(grid: GridDistribution, mode: str = "weighted_mean") -> np.ndarray:
    """Point estimate from a grid density.

    ``weighted_mean`` returns the probability-weighted midpoint average
    (exact, computed per axis from marginals). ``argmax`` returns the
    midpoint of the highest cell, first in C-order on ties.
    """
    total = float(grid.values.sum())
    if total <= 0.0:
        raise DegenerateGrid("cannot decode a massless grid")
    if mode == "weighted_mean":
        out = np.empty(grid.dims)
        for axis in range(grid.dims):
            others = tuple(a for a in range(grid.dims) if a != axis)
            marginal = grid.values.sum(axis=others) if others else grid.values
            out[axis] = float(marginal @ grid.midpoints(axis)) / total
        return out
    if mode == "argmax":
        idx = np.unravel_index(int(np.argmax(grid.values)), grid.shape)
        return grid.origin + np.asarray(idx) * grid.spacing
    raise InvariantViolation(f"unknown decode mode {mode!r}")


def fit_gaussian(grid: GridDistribution) -> tuple[np.ndarray, np.ndarray]:
    """Probability-weighted mean and covariance of the cell midpoints.

    Returns ``(mean, cov)`` with ``cov`` symmetrized. Raises
    :class:`DegenerateGrid` when the grid carries no mass.
    """
    p = grid.values.ravel()
    total = float(p.sum())
    if total <= 0.0:
        raise DegenerateGrid("cannot fit moments of a massless grid")
    p = p / total
    axes = [grid.midpoints(a) for a in range(grid.dims)]
    mesh = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)
    M = mesh.reshape(-1, grid.dims)
    mean = p @ M
    D = M - mean
    cov = D.T @ (D * p[:, None])
    return mean, 0.5 * (cov + cov.T)


def average_grids(grids) -> GridDistribution:
    """Arithmetic mean of same-geometry grids, renormalized.

    Raises :class:`GeometryMismatch` if any grid disagrees in origin,
    spacing or shape, and :class:`EmptyCalibrationSet` on empty input.
    """
    grids = list(grids)
    if not grids:
        raise EmptyCalibrationSet("no grids to average")
    head = grids[0]
    for g in grids[1:]:
        if not head.same_geometry(g):
            raise GeometryMismatch("grids do not share origin/spacing/shape")
    acc = np.zeros(head.shape)
    for g in grids:
        acc += g.values
    return GridDistribution(head.origin, head.spacing, acc / len(grids)).normalize()


@dataclass(frozen=True)
class Temperature:
    """Positive sharpening parameter for :func:`apply_temperature`."""

    tau: float

    def __post_init__(self):
        if not self.tau > 0:
            raise InvariantViolation(f"temperature must be positive, got {self.tau}")


def apply_temperature(grid: GridDistribution, tau: float) -> GridDistribution:
    """Rescale a density to ``p ** (1/tau)``, renormalized.

    Implemented as a softmax of ``log(p) / tau`` with the log floored at
    1e-12, so zero cells stay representable. ``tau=1`` reproduces the
    input (within float round-trip error) on strictly positive grids;
    ``tau < 1`` sharpens, ``tau > 1`` flattens.
    """
    tau = Temperature(float(tau)).tau
    z = np.log(np.maximum(grid.values, _LOG_FLOOR)) / tau
    z -= z.max()
    q = np.exp(z)
    return GridDistribution(grid.origin, grid.spacing, q / q.sum())


def _true_cell_flat(ex: Example) -> int:
    """Flat C-order index of the cell containing the truth (clamped in)."""
    g = ex.grid
    idx = g.cell_of(ex.truth)
    if idx is None:
        t = np.rint((ex.truth - g.origin) / g.spacing).astype(int)
        idx = tuple(int(i) for i in np.clip(t, 0, np.asarray(g.shape) - 1))
    return int(np.ravel_multi_index(idx, g.shape))


def fit_temperature(examples) -> Temperature:
    """Fit the temperature minimizing calibration NLL of the true cell.

    Golden-section search over ``log(tau)`` on ``[log 0.01, log 100]``
    with tolerance 1e-4. Every example must carry a grid.
    """
    examples = list(examples)
    if not examples:
        raise EmptyCalibrationSet("temperature fit needs calibration examples")
    logits = []
    true_idx = []
    for ex in examples:
        if ex.grid is None:
            raise MissingField(f"example {ex.id}: temperature fit needs a grid")
        logits.append(np.log(np.maximum(ex.grid.values.ravel(), _LOG_FLOOR)))
        true_idx.append(_true_cell_flat(ex))

    def nll(log_tau: float) -> float:
        inv = math.exp(-log_tau)
        total = 0.0
        for z, k in zip(logits, true_idx):
            w = z * inv
            total += float(logsumexp(w) - w[k])
        return total / len(logits)

    lo, hi = math.log(0.01), math.log(100.0)
    invphi = (math.sqrt(5.0) - 1.0) / 2.0
    c = hi - invphi * (hi - lo)
    d = lo + invphi * (hi - lo)
    fc, fd = nll(c), nll(d)
    while (hi - lo) > 1e-4:
        if fc < fd:
            hi, d, fd = d, c, fc
            c = hi - invphi * (hi - lo)
            fc = nll(c)
        else:
            lo, c, fc = c, d, fd
            d = lo + invphi * (hi - lo)
            fd = nll(d)
    return Temperature(math.exp(0.5 * (lo + hi)))
