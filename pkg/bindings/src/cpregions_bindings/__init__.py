"""In-memory boundary to the cpregions calibration pipeline.

Callers that already hold heatmaps, truths or posterior draws as numpy
arrays can fit calibrators and obtain regions without writing a dataset
to disk. Records returned by :func:`bind_predict` are plain dicts in
the same JSON schema the command line tools write, so the two paths are
interchangeable (and bit-identical on identical inputs).

Arrays are adopted without copying when they are already float64; other
dtypes or layouts are converted once at the boundary, and the core's
immutable containers take one defensive copy of what they keep.
Calibrator handles are opaque and immutable, safe to share between
threads for concurrent predictions; the heavy kernels run inside numpy,
which releases the interpreter lock.

Failures raise the core exception types directly, so the class name
(ShapeMismatch, EmptyCalibrationSet, InvalidAlpha, ...) identifies the
error across the boundary.
"""
from __future__ import annotations

import numpy as np

from cpregions.calibrate import fit as _core_fit
from cpregions.errors import (
    AlignmentError,
    EmptyCalibrationSet,
    EmptyLedger,
    InvalidConfig,
    ShapeMismatch,
)
from cpregions.evaluate import build_reports, reports_to_json
from cpregions.regions import region_from_json, region_to_json
from cpregions.tensor_io import Example, GridDistribution
from cpregions.tensor_io import load_dataset as _core_load_dataset

__all__ = [
    "BoundDataset",
    "CalibratorHandle",
    "arrays_from_examples",
    "bind_fit",
    "bind_predict",
    "evaluate",
    "fit",
    "load_dataset",
    "predict",
]

__version__ = "0.1.0"


def _as_float64(obj, name):
    arr = np.asarray(obj, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise InvalidConfig(f"{name}: entries must be finite")
    return arr


class BoundDataset:
    """Immutable collection of examples held in memory.

    Build one from raw arrays with :meth:`from_arrays` or from a
    manifest on disk with :func:`load_dataset`. Validation matches the
    tensor reader: grids are clamped and renormalized, covariances must
    be symmetric PSD, every example needs at least one model output.
    """

    def __init__(self, examples):
        self._examples = tuple(examples)
        if len({ex.dims for ex in self._examples}) > 1:
            raise ShapeMismatch("examples mix dimensionalities")

    def __len__(self) -> int:
        return len(self._examples)

    @property
    def examples(self) -> tuple:
        return self._examples

    @property
    def dims(self) -> int:
        if not self._examples:
            raise EmptyCalibrationSet("dataset holds no examples")
        return self._examples[0].dims

    @classmethod
    def from_arrays(cls, *, truths, grids=None, origin=None, spacing=None,
                    points=None, samples=None, covariances=None, ids=None,
                    labels=None, affine=None) -> "BoundDataset":
        """Build a dataset directly from arrays.

        Parameters
        ----------
        truths : array_like
            Ground-truth positions, shape ``(n, dims)``.
        grids : array_like, optional
            Stacked heatmaps, shape ``(n, *grid_shape)``; needs
            ``spacing`` (``origin`` defaults to zeros). Cell masses go
            through the same clamp-and-normalize step as the reader.
        origin, spacing : array_like, optional
            Grid geometry shared by all heatmaps, ``(dims,)`` each.
        points : array_like, optional
            Point predictions, shape ``(n, dims)``.
        samples : array_like, optional
            Posterior-style draws, shape ``(n, n_draws, dims)``.
        covariances : array_like, optional
            Predicted covariances, shape ``(n, dims, dims)``.
        ids : sequence of str, optional
            Example ids; defaults to ``ex-00000`` style numbering.
        labels : sequence of int, optional
            Landmark labels for per-landmark reporting.
        affine : AffineMap, optional
            Grid-native to output-frame map applied to every example.

        Returns
        -------
        BoundDataset

        Raises
        ------
        ShapeMismatch
            If any array has the wrong rank or inconsistent leading
            dimension.
        """
        truths = _as_float64(truths, "truths")
        if truths.ndim != 2:
            raise ShapeMismatch(
                f"truths must have shape (n, dims), got {truths.shape}")
        n, d = truths.shape

        grids_arr = None
        if grids is not None:
            grids_arr = np.asarray(grids, dtype=np.float64)
            if grids_arr.ndim != d + 1:
                raise ShapeMismatch(
                    f"grids must have rank {d + 1} (examples plus {d} grid "
                    f"axes), got rank {grids_arr.ndim}")
            if grids_arr.shape[0] != n:
                raise ShapeMismatch(
                    f"got {grids_arr.shape[0]} grids for {n} truths")
            if spacing is None:
                raise InvalidConfig("spacing: required when grids are given")
            spacing = _as_float64(spacing, "spacing")
            origin = (np.zeros(d) if origin is None
                      else _as_float64(origin, "origin"))

        points_arr = None
        if points is not None:
            points_arr = _as_float64(points, "points")
            if points_arr.shape != (n, d):
                raise ShapeMismatch(
                    f"points must have shape ({n}, {d}), got {points_arr.shape}")

        samples_arr = None
        if samples is not None:
            samples_arr = _as_float64(samples, "samples")
            if (samples_arr.ndim != 3 or samples_arr.shape[0] != n
                    or samples_arr.shape[2] != d):
                raise ShapeMismatch(
                    f"samples must have shape ({n}, n_draws, {d}), "
                    f"got {samples_arr.shape}")

        cov_arr = None
        if covariances is not None:
            cov_arr = _as_float64(covariances, "covariances")
            if cov_arr.shape != (n, d, d):
                raise ShapeMismatch(
                    f"covariances must have shape ({n}, {d}, {d}), "
                    f"got {cov_arr.shape}")

        if ids is None:
            ids = [f"ex-{i:05d}" for i in range(n)]
        else:
            ids = [str(s) for s in ids]
            if len(ids) != n:
                raise ShapeMismatch(f"got {len(ids)} ids for {n} truths")
        if labels is not None and len(labels) != n:
            raise ShapeMismatch(f"got {len(labels)} labels for {n} truths")

        examples = []
        for i in range(n):
            grid = None
            if grids_arr is not None:
                grid = GridDistribution(origin, spacing,
                                        grids_arr[i]).normalize()
            examples.append(Example(
                id=ids[i],
                truth=truths[i],
                grid=grid,
                point=None if points_arr is None else points_arr[i],
                samples=None if samples_arr is None else samples_arr[i],
                covariance=None if cov_arr is None else cov_arr[i],
                affine=affine,
                landmark=None if labels is None else int(labels[i]),
            ))
        return cls(examples)


def arrays_from_examples(examples) -> dict:
    """Array bundle for :meth:`BoundDataset.from_arrays`.

    Stacks the fields shared by every example; fields missing from any
    example are dropped from the bundle. Grid geometry must agree
    across examples.
    """
    examples = list(examples)
    if not examples:
        raise EmptyCalibrationSet("no examples to convert")
    out = {"truths": np.stack([ex.truth for ex in examples]),
           "ids": [ex.id for ex in examples]}
    if all(ex.grid is not None for ex in examples):
        g0 = examples[0].grid
        for ex in examples:
            if (not np.array_equal(ex.grid.origin, g0.origin)
                    or not np.array_equal(ex.grid.spacing, g0.spacing)):
                raise ShapeMismatch("examples disagree on grid geometry")
        out["grids"] = np.stack([ex.grid.values for ex in examples])
        out["origin"] = np.array(g0.origin)
        out["spacing"] = np.array(g0.spacing)
    if all(ex.point is not None for ex in examples):
        out["points"] = np.stack([ex.point for ex in examples])
    if all(ex.samples is not None for ex in examples):
        out["samples"] = np.stack([ex.samples for ex in examples])
    if all(ex.covariance is not None for ex in examples):
        out["covariances"] = np.stack([ex.covariance for ex in examples])
    if all(ex.landmark is not None for ex in examples):
        out["labels"] = [ex.landmark for ex in examples]
    return out


class CalibratorHandle:
    """Opaque immutable handle to a fitted calibrator.

    Obtained from :func:`bind_fit`; hand it to :func:`bind_predict`.
    Read-only views of the fitted state are exposed for inspection and
    serialization, never for mutation.
    """

    __slots__ = ("_calibrator",)

    def __init__(self, calibrator):
        object.__setattr__(self, "_calibrator", calibrator)

    def __setattr__(self, name, value):
        raise AttributeError("calibrator handles are immutable")

    @property
    def method(self) -> str:
        return self._calibrator.method

    @property
    def dims(self) -> int:
        return self._calibrator.dims

    @property
    def n_cal(self) -> int:
        return self._calibrator.n_cal

    def ledger_names(self) -> tuple:
        return tuple(self._calibrator.ledgers)

    def ledger(self, name: str = "scores") -> tuple:
        """Calibration scores of one ledger, in insertion order."""
        ledgers = self._calibrator.ledgers
        if name not in ledgers:
            raise EmptyLedger(f"calibrator has no ledger {name!r}")
        return tuple(ledgers[name].scores)

    def to_json(self) -> dict:
        """Serialized state, identical to the CLI calibrator file."""
        return self._calibrator.to_json()


def _as_dataset(data) -> BoundDataset:
    if isinstance(data, BoundDataset):
        return data
    if isinstance(data, dict):
        return BoundDataset.from_arrays(**data)
    raise InvalidConfig(
        "data must be a BoundDataset or an array bundle dict, "
        f"got {type(data).__name__}")


def bind_fit(method: str, data, config: dict | None = None) -> CalibratorHandle:
    """Fit a region calibrator on in-memory data.

    Parameters
    ----------
    method : str
        Core method name (``bonferroni``, ``m_r2ccp``, ...).
    data : BoundDataset or dict
        Calibration examples, or an array bundle accepted by
        :meth:`BoundDataset.from_arrays`.
    config : dict, optional
        Method options, same keys as the CLI config file.

    Returns
    -------
    CalibratorHandle
        Immutable handle with ledgers numerically identical to the
        CLI path on the same data.
    """
    ds = _as_dataset(data)
    if len(ds) == 0:
        raise EmptyCalibrationSet("cannot fit on an empty dataset")
    return CalibratorHandle(_core_fit(method, list(ds.examples), config))


def bind_predict(handle: CalibratorHandle, data, alpha: float) -> list:
    """Prediction regions for in-memory examples.

    Parameters
    ----------
    handle : CalibratorHandle
        Fitted handle from :func:`bind_fit`.
    data : BoundDataset or dict
        Test examples.
    alpha : float
        Miscoverage level in (0, 1).

    Returns
    -------
    list of dict
        One record per example: ``id``, ``region`` (export schema),
        ``measure``, plus method diagnostics. Byte-for-byte the
        records the CLI predict subcommand writes.
    """
    ds = _as_dataset(data)
    alpha = float(alpha)
    records = []
    for ex in ds.examples:
        region, info = handle._calibrator.predict_with_info(ex, alpha)
        record = {"id": ex.id, "region": region_to_json(region),
                  "measure": region.measure()}
        record.update(info)
        records.append(record)
    return records


def evaluate(records, data, *, method: str = "", alpha: float = np.nan) -> dict:
    """Score prediction records against ground truth.

    Mirrors the CLI evaluate subcommand: records are aligned to the
    dataset by id and the report document (pooled and per-landmark) is
    returned as a dict instead of written to disk.
    """
    ds = _as_dataset(data)
    by_id = {}
    for record in records:
        by_id[record["id"]] = record
    ids = [ex.id for ex in ds.examples]
    missing = [i for i in ids if i not in by_id]
    extra = [i for i in by_id if i not in set(ids)]
    if missing or extra:
        raise AlignmentError(
            f"records/dataset id mismatch: {len(missing)} examples without "
            f"records, {len(extra)} records without examples")
    regions = [region_from_json(by_id[i]["region"]) for i in ids]
    reports = build_reports(regions, list(ds.examples))
    return reports_to_json(reports, method, float(alpha))


def load_dataset(path) -> BoundDataset:
    """Load a manifest-based dataset from disk into a BoundDataset."""
    _, examples = _core_load_dataset(path)
    return BoundDataset(examples)


fit = bind_fit
predict = bind_predict
