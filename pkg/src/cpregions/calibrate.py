"""Calibrated region constructors for multi-output localization.

A :class:`Calibrator` is fitted on a calibration split and then turns
each test example into a :mod:`~cpregions.regions` region at a chosen
miscoverage level ``alpha``. Seven methods are conformal (their scores
live in :class:`ScoreLedger` objects and the region is cut at the
conformal quantile); two are baselines without finite-sample guarantees
(``naive_r2cr``, ``gaussian_sample``).

Methods
-------
``bonferroni``
    Per-axis absolute residuals, normalized by a per-axis uncertainty
    scale; each axis calibrated at ``alpha / dims``. Produces a
    :class:`HyperRect`.
``sidak``
    Same scores, axes calibrated at ``1 - (1-alpha)**(1/dims)``.
``max_nonconf``
    Single ledger of the max normalized residual across axes; one
    quantile sizes every axis. Produces a :class:`HyperRect`.
``ellipsoidal``
    Mahalanobis distance under a per-example covariance. Produces an
    :class:`Ellipsoid`.
``m_r2ccp``
    Negated interpolated heatmap density at the truth; the region keeps
    the grid cells whose midpoint density clears the cut. Produces a
    :class:`GridMask`.
``m_r2c2r_std``
    One minus the probability of the binned cell containing the truth.
    Produces a :class:`GridMask` over bins.
``m_r2c2r_aps``
    Cumulative binned probability of bins at least as likely as the
    true bin (optionally randomized at the boundary). Produces a
    :class:`GridMask` over bins.
``naive_r2cr``
    Baseline: highest-density cells until ``1 - alpha`` mass is
    reached, no calibration. Optional temperature scaling.
``gaussian_sample``
    Baseline: per-example sample mean/covariance ball with the
    chi-squared radius; no calibration.

Uncertainty scales for the first four methods come from the
``uncertainty`` config key: ``"samples"`` (default, per-axis sample
standard deviation / sample covariance), ``"covariance"`` (the
example's covariance field) or ``"grid"`` (moments of the heatmap).
Per-axis scales are floored at 1e-6 mm.
"""
from __future__ import annotations

import json
import math
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.stats import chi2

from .density import fit_gaussian, fit_temperature, interp_density, apply_temperature
from .errors import (
    DimMismatch,
    EmptyCalibrationSet,
    EmptyLedger,
    InvalidAlpha,
    InvalidConfig,
    MissingField,
)
from .regions import Ellipsoid, GridMask, HyperRect, Region
from .tensor_io import Example, GridDistribution

__all__ = [
    "METHODS",
    "CONFORMAL_METHODS",
    "ScoreLedger",
    "conformal_threshold",
    "Calibrator",
    "fit",
    "aps_set",
    "binned_distribution",
]

METHODS = (
    "bonferroni",
    "sidak",
    "max_nonconf",
    "ellipsoidal",
    "m_r2ccp",
    "m_r2c2r_std",
    "m_r2c2r_aps",
    "naive_r2cr",
    "gaussian_sample",
)
CONFORMAL_METHODS = METHODS[:7]

UNCERTAINTY_SOURCES = ("samples", "covariance", "grid")

_STD_FLOOR = 1e-6
_INDEX_NUDGE = 1e-9
_CUM_TOL = 1e-9


@dataclass(frozen=True, eq=False)
class ScoreLedger:
    """Immutable list of calibration scores.

    ``scores`` keeps insertion order for serialization fidelity; the
    descending view used by the threshold rule is materialized once.
    """

    scores: tuple[float, ...]
    _sorted_desc: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        scores = tuple(float(s) for s in self.scores)
        object.__setattr__(self, "scores", scores)
        srt = np.sort(np.asarray(scores, dtype=float))[::-1]
        srt.setflags(write=False)
        object.__setattr__(self, "_sorted_desc", srt)

    @property
    def m(self) -> int:
        return len(self.scores)

    @property
    def sorted_desc(self) -> np.ndarray:
        return self._sorted_desc


def _check_alpha(alpha: float) -> float:
    alpha = float(alpha)
    if not 0.0 < alpha < 1.0:
        raise InvalidAlpha(f"alpha must lie strictly in (0, 1), got {alpha}")
    return alpha


def conformal_threshold(ledger: ScoreLedger, alpha: float) -> float:
    """Split-conformal score cut at miscoverage ``alpha``.

    With ``m`` calibration scores sorted descending, the cut is the
    ``floor(alpha * (m + 1))``-th largest score. An index below 1 means
    no score may be excluded (cut ``+inf``, full-domain region); an
    index above ``m`` means even the smallest score is excludable (cut
    ``-inf``, empty region). The index computation carries a 1e-9 nudge
    so decimal alphas hit their intended integer indices despite binary
    rounding.
    """
    alpha = _check_alpha(alpha)
    if ledger.m == 0:
        raise EmptyLedger("cannot take a conformal threshold of an empty ledger")
    k = math.floor(alpha * (ledger.m + 1) + _INDEX_NUDGE)
    if k < 1:
        return math.inf
    if k > ledger.m:
        return -math.inf
    return float(ledger.sorted_desc[k - 1])


def binned_distribution(grid: GridDistribution, factor) -> GridDistribution:
    """Aggregate a grid into equal blocks of ``factor`` cells per axis.

    ``factor`` is an int or per-axis sequence; every axis length must be
    divisible by its factor. The result's origin/spacing describe the
    block midpoints, and block lower edges coincide with cell lower
    edges so the half-open membership rule is preserved.
    """
    d = grid.dims
    if np.isscalar(factor):
        factors = np.full(d, int(factor))
    else:
        factors = np.asarray(factor, dtype=int)
        if factors.shape != (d,):
            raise InvalidConfig(f"bin_factor must be scalar or length {d}")
    if np.any(factors < 1):
        raise InvalidConfig("bin_factor entries must be >= 1")
    shape = np.asarray(grid.shape)
    if np.any(shape % factors != 0):
        raise InvalidConfig(
            f"grid shape {tuple(shape)} not divisible by bin_factor "
            f"{factors.tolist()}")
    new_shape = shape // factors
    v = grid.values
    inter = []
    for axis in range(d):
        inter.extend([int(new_shape[axis]), int(factors[axis])])
    binned = v.reshape(inter).sum(axis=tuple(range(1, 2 * d, 2)))
    origin = grid.origin + (factors - 1) * 0.5 * grid.spacing
    spacing = factors * grid.spacing
    return GridDistribution(origin, spacing, binned)


def _rng_for(seed: int, example_id: str) -> np.random.Generator:
    # per-example stream, independent of calibration order
    key = zlib.crc32(example_id.encode("utf-8"))
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence((int(seed), key))))


def aps_set(probs: np.ndarray, threshold: float, randomized: bool = False,
            rng: np.random.Generator | None = None) -> np.ndarray:
    """Cells selected by the cumulative-probability rule.

    Cells are visited in order of decreasing probability (ties by flat
    C-order index) and kept while the running total stays within
    ``threshold``. A threshold at or above 1 keeps every cell. With
    ``randomized=True`` the first cell that would overshoot is kept
    with the fractional probability that exactly spends the remaining
    budget.

    Returns a boolean mask with the same shape as ``probs``.
    """
    probs = np.asarray(probs, dtype=float)
    flat = probs.ravel()
    mask = np.zeros(flat.size, dtype=bool)
    if threshold >= 1.0:
        mask[:] = True
        return mask.reshape(probs.shape)
    if not threshold > 0.0 and not randomized:
        return mask.reshape(probs.shape)
    order = np.argsort(-flat, kind="stable")
    csum = np.cumsum(flat[order])
    n_full = int(np.searchsorted(csum, threshold, side="right"))
    mask[order[:n_full]] = True
    if randomized and n_full < flat.size:
        if rng is None:
            raise InvalidConfig("randomized selection needs an rng")
        before = float(csum[n_full - 1]) if n_full > 0 else 0.0
        boundary = order[n_full]
        if before + float(rng.uniform()) * float(flat[boundary]) <= threshold:
            mask[boundary] = True
    return mask.reshape(probs.shape)


def _require(value, ex: Example, what: str):
    if value is None:
        raise MissingField(f"example {ex.id}: method needs {what}")
    return value


def _covariance_from(ex: Example, source: str) -> np.ndarray:
    if source == "samples":
        samples = _require(ex.samples, ex, "samples")
        if samples.shape[0] < 2:
            return np.zeros((ex.dims, ex.dims))
        return np.cov(samples, rowvar=False, ddof=1).reshape(ex.dims, ex.dims)
    if source == "covariance":
        return _require(ex.covariance, ex, "a covariance")
    if source == "grid":
        grid = _require(ex.grid, ex, "a grid")
        return fit_gaussian(grid)[1]
    raise InvalidConfig(f"unknown uncertainty source {source!r}")


def _axis_scale_from(ex: Example, source: str) -> np.ndarray:
    var = np.diag(_covariance_from(ex, source))
    return np.maximum(np.sqrt(np.maximum(var, 0.0)), _STD_FLOOR)


def _regularize_spd(S: np.ndarray) -> np.ndarray:
    """Return ``S`` untouched when already PD, else add a minimal ridge."""
    S = 0.5 * (S + S.T)
    try:
        np.linalg.cholesky(S)
        return S
    except np.linalg.LinAlgError:
        pass
    d = S.shape[0]
    base = float(np.trace(S)) / d
    if base <= 0.0:
        base = 1.0
    eps = 1e-9 * base
    for _ in range(40):
        try:
            np.linalg.cholesky(S + eps * np.eye(d))
            return S + eps * np.eye(d)
        except np.linalg.LinAlgError:
            eps *= 10.0
    raise DimMismatch("covariance could not be regularized")


def _mahalanobis_score(ex: Example, source: str) -> float:
    point = _require(ex.point, ex, "a point estimate")
    S = _regularize_spd(_covariance_from(ex, source))
    r = ex.truth - point
    w = np.linalg.solve(np.linalg.cholesky(S), r)
    return float(np.sqrt(w @ w))


def _normalized_residual(ex: Example, source: str) -> np.ndarray:
    point = _require(ex.point, ex, "a point estimate")
    return np.abs(ex.truth - point) / _axis_scale_from(ex, source)


def _grid_native_truth(ex: Example) -> np.ndarray:
    """Truth mapped into the grid's native frame when an affine is set."""
    if ex.affine is None:
        return ex.truth
    return ex.affine.inverse().apply(ex.truth)


def _maybe_transform(region: Region, ex: Example) -> Region:
    return region.transform(ex.affine) if ex.affine is not None else region


@dataclass(eq=False)
class Calibrator:
    """Fitted region constructor; see module docstring for methods.

    Built by :func:`fit` or :meth:`from_json`. ``ledgers`` maps ledger
    names (``dim0``.. for per-axis methods, ``scores`` otherwise) to
    :class:`ScoreLedger`; baselines have none. Instances serialize to
    JSON and reload bit-identically.
    """

    method: str
    dims: int
    config: dict
    ledgers: dict[str, ScoreLedger]
    temperature: float | None = None
    n_cal: int = 0

    def threshold(self, name: str, alpha: float) -> float:
        if name not in self.ledgers:
            raise EmptyLedger(f"calibrator has no ledger {name!r}")
        return conformal_threshold(self.ledgers[name], alpha)

    def predict(self, example: Example, alpha: float) -> Region:
        """Region for one example at miscoverage ``alpha``."""
        return self.predict_with_info(example, alpha)[0]

    def predict_with_info(self, example: Example, alpha: float) -> tuple[Region, dict]:
        """Region plus a record of thresholds and fallbacks used."""
        alpha = _check_alpha(alpha)
        if example.dims != self.dims:
            raise DimMismatch(
                f"example {example.id} is {example.dims}-D, calibrator is "
                f"{self.dims}-D")
        handler = getattr(self, f"_predict_{self.method}")
        return handler(example, alpha)

    # --- rectangle and ellipsoid constructors ---

    def _rect_from_axis_cuts(self, ex: Example, cuts: np.ndarray) -> HyperRect:
        point = _require(ex.point, ex, "a point estimate")
        scale = _axis_scale_from(ex, self.config["uncertainty"])
        return HyperRect(point, cuts * scale)

    def _predict_bonferroni(self, ex: Example, alpha: float):
        per_axis = alpha / self.dims
        cuts = np.array([self.threshold(f"dim{j}", per_axis)
                         for j in range(self.dims)])
        return self._rect_from_axis_cuts(ex, cuts), {"thresholds": cuts.tolist()}

    def _predict_sidak(self, ex: Example, alpha: float):
        per_axis = 1.0 - (1.0 - alpha) ** (1.0 / self.dims)
        cuts = np.array([self.threshold(f"dim{j}", per_axis)
                         for j in range(self.dims)])
        return self._rect_from_axis_cuts(ex, cuts), {"thresholds": cuts.tolist()}

    def _predict_max_nonconf(self, ex: Example, alpha: float):
        cut = self.threshold("scores", alpha)
        cuts = np.full(self.dims, cut)
        return self._rect_from_axis_cuts(ex, cuts), {"thresholds": [cut]}

    def _predict_ellipsoidal(self, ex: Example, alpha: float):
        point = _require(ex.point, ex, "a point estimate")
        S = _regularize_spd(_covariance_from(ex, self.config["uncertainty"]))
        cut = self.threshold("scores", alpha)
        return Ellipsoid(point, S, cut), {"thresholds": [cut]}

    # --- grid constructors ---

    def _predict_m_r2ccp(self, ex: Example, alpha: float):
        grid = _require(ex.grid, ex, "a grid")
        cut = self.threshold("scores", alpha)
        mask = grid.values >= -cut
        region = GridMask(grid.origin, grid.spacing, mask)
        return _maybe_transform(region, ex), {"thresholds": [cut]}

    def _binned(self, ex: Example) -> GridDistribution:
        grid = _require(ex.grid, ex, "a grid")
        return binned_distribution(grid, self.config["bin_factor"])

    def _predict_m_r2c2r_std(self, ex: Example, alpha: float):
        q = self._binned(ex)
        cut = self.threshold("scores", alpha)
        mask = (1.0 - q.values) <= cut
        region = GridMask(q.origin, q.spacing, mask)
        return _maybe_transform(region, ex), {"thresholds": [cut]}

    def _predict_m_r2c2r_aps(self, ex: Example, alpha: float):
        q = self._binned(ex)
        cut = self.threshold("scores", alpha)
        rng = None
        if self.config["randomized"]:
            rng = _rng_for(self.config["seed"], ex.id)
        mask = aps_set(q.values, cut, randomized=self.config["randomized"], rng=rng)
        region = GridMask(q.origin, q.spacing, mask)
        return _maybe_transform(region, ex), {"thresholds": [cut]}

    def _predict_naive_r2cr(self, ex: Example, alpha: float):
        grid = _require(ex.grid, ex, "a grid")
        if self.temperature is not None:
            grid = apply_temperature(grid, self.temperature)
        flat = grid.values.ravel()
        order = np.argsort(-flat, kind="stable")
        csum = np.cumsum(flat[order])
        target = (1.0 - alpha) - _CUM_TOL
        n_take = int(np.searchsorted(csum, target, side="left")) + 1
        n_take = min(n_take, flat.size)
        mask = np.zeros(flat.size, dtype=bool)
        mask[order[:n_take]] = True
        region = GridMask(grid.origin, grid.spacing,
                          mask.reshape(grid.shape))
        return _maybe_transform(region, ex), {"thresholds": [1.0 - alpha]}

    def _predict_gaussian_sample(self, ex: Example, alpha: float):
        samples = _require(ex.samples, ex, "samples")
        n, d = samples.shape
        center = samples.mean(axis=0)
        fallback = n < d + 1
        if fallback:
            resid = samples - center
            pooled = float(np.mean(resid ** 2)) if n > 1 else 0.0
            S = np.eye(d) * max(pooled, _STD_FLOOR ** 2)
        else:
            S = _regularize_spd(np.cov(samples, rowvar=False, ddof=1).reshape(d, d))
        radius = float(np.sqrt(chi2.ppf(1.0 - alpha, df=d)))
        region = Ellipsoid(center, S, radius)
        return region, {"thresholds": [radius], "fallback": fallback}

    # --- serialization ---

    def to_json(self) -> dict:
        return {
            "method": self.method,
            "dims": self.dims,
            "config": dict(self.config),
            "ledgers": {name: list(l.scores) for name, l in self.ledgers.items()},
            "temperature": self.temperature,
            "n_cal": self.n_cal,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "Calibrator":
        for key in ("method", "dims", "config", "ledgers"):
            if key not in obj:
                raise InvalidConfig(f"calibrator document missing key {key!r}")
        if obj["method"] not in METHODS:
            raise InvalidConfig(f"unknown method {obj['method']!r}")
        ledgers = {name: ScoreLedger(tuple(scores))
                   for name, scores in obj["ledgers"].items()}
        return cls(
            method=obj["method"],
            dims=int(obj["dims"]),
            config=_full_config(obj["method"], obj["config"]),
            ledgers=ledgers,
            temperature=obj.get("temperature"),
            n_cal=int(obj.get("n_cal", 0)),
        )

    def save(self, path) -> None:
        path = Path(path)
        tmp = path.with_name(path.name + ".tmp")
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(tmp, "w", encoding="utf-8") as fh:
            json.dump(self.to_json(), fh)
        tmp.replace(path)

    @classmethod
    def load(cls, path) -> "Calibrator":
        with open(path, "r", encoding="utf-8") as fh:
            return cls.from_json(json.load(fh))


_DEFAULTS = {
    "uncertainty": "samples",
    "bin_factor": 4,
    "randomized": False,
    "seed": 0,
    "temperature_scaling": False,
}

_CONFIG_KEYS = {
    "bonferroni": ("uncertainty",),
    "sidak": ("uncertainty",),
    "max_nonconf": ("uncertainty",),
    "ellipsoidal": ("uncertainty",),
    "m_r2ccp": (),
    "m_r2c2r_std": ("bin_factor",),
    "m_r2c2r_aps": ("bin_factor", "randomized", "seed"),
    "naive_r2cr": ("temperature_scaling",),
    "gaussian_sample": (),
}


def _full_config(method: str, overrides: dict | None) -> dict:
    overrides = dict(overrides or {})
    keys = _CONFIG_KEYS[method]
    unknown = set(overrides) - set(keys)
    if unknown:
        raise InvalidConfig(
            f"config keys {sorted(unknown)} not valid for method {method!r}")
    # fixed key order keeps serialized calibrators byte-stable across runs
    config = {key: overrides.get(key, _DEFAULTS[key]) for key in keys}
    if "uncertainty" in config and config["uncertainty"] not in UNCERTAINTY_SOURCES:
        raise InvalidConfig(
            f"uncertainty must be one of {UNCERTAINTY_SOURCES}, "
            f"got {config['uncertainty']!r}")
    if "seed" in config:
        config["seed"] = int(config["seed"])
    if "randomized" in config:
        config["randomized"] = bool(config["randomized"])
    if "temperature_scaling" in config:
        config["temperature_scaling"] = bool(config["temperature_scaling"])
    return config


def fit(method: str, calibration, config: dict | None = None) -> Calibrator:
    """Fit a :class:`Calibrator` on a calibration split.

    Parameters
    ----------
    method : str
        One of :data:`METHODS`.
    calibration : sequence of Example
        Non-empty; all examples must share dimensionality and carry the
        fields the method needs.
    config : dict, optional
        Method-specific keys (see module docstring); unknown keys are
        rejected.
    """
    if method not in METHODS:
        raise InvalidConfig(f"unknown method {method!r}")
    cal = list(calibration)
    if not cal:
        raise EmptyCalibrationSet("calibration split is empty")
    dims = cal[0].dims
    for ex in cal:
        if ex.dims != dims:
            raise DimMismatch(
                f"example {ex.id} is {ex.dims}-D, expected {dims}-D")
    cfg = _full_config(method, config)

    ledgers: dict[str, ScoreLedger] = {}
    temperature = None

    if method in ("bonferroni", "sidak"):
        rows = np.array([_normalized_residual(ex, cfg["uncertainty"]) for ex in cal])
        for j in range(dims):
            ledgers[f"dim{j}"] = ScoreLedger(tuple(rows[:, j]))
    elif method == "max_nonconf":
        rows = np.array([_normalized_residual(ex, cfg["uncertainty"]) for ex in cal])
        ledgers["scores"] = ScoreLedger(tuple(rows.max(axis=1)))
    elif method == "ellipsoidal":
        scores = [_mahalanobis_score(ex, cfg["uncertainty"]) for ex in cal]
        ledgers["scores"] = ScoreLedger(tuple(scores))
    elif method == "m_r2ccp":
        scores = []
        for ex in cal:
            grid = _require(ex.grid, ex, "a grid")
            scores.append(-interp_density(grid, _grid_native_truth(ex)))
        ledgers["scores"] = ScoreLedger(tuple(scores))
    elif method == "m_r2c2r_std":
        scores = []
        for ex in cal:
            q = binned_distribution(_require(ex.grid, ex, "a grid"),
                                    cfg["bin_factor"])
            scores.append(1.0 - _prob_of_truth(q, _grid_native_truth(ex)))
        ledgers["scores"] = ScoreLedger(tuple(scores))
    elif method == "m_r2c2r_aps":
        scores = []
        for ex in cal:
            q = binned_distribution(_require(ex.grid, ex, "a grid"),
                                    cfg["bin_factor"])
            p_true = _prob_of_truth(q, _grid_native_truth(ex))
            flat = q.values.ravel()
            if cfg["randomized"]:
                u = float(_rng_for(cfg["seed"], ex.id).uniform())
                score = float(flat[flat > p_true].sum()) + u * p_true
            else:
                score = float(flat[flat >= p_true].sum())
            scores.append(score)
        ledgers["scores"] = ScoreLedger(tuple(scores))
    elif method == "naive_r2cr":
        for ex in cal:
            _require(ex.grid, ex, "a grid")
        if cfg["temperature_scaling"]:
            temperature = fit_temperature(cal).tau
    elif method == "gaussian_sample":
        for ex in cal:
            _require(ex.samples, ex, "samples")

    return Calibrator(method=method, dims=dims, config=cfg, ledgers=ledgers,
                      temperature=temperature, n_cal=len(cal))


def _prob_of_truth(q: GridDistribution, truth: np.ndarray) -> float:
    """Mass of the (clamped) cell containing the truth."""
    idx = q.cell_of(truth)
    if idx is None:
        t = np.rint((truth - q.origin) / q.spacing).astype(int)
        idx = tuple(int(i) for i in np.clip(t, 0, np.asarray(q.shape) - 1))
    return float(q.values[idx])
