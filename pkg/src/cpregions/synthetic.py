"""Synthetic localization scenarios with known ground truth.

Each example draws a landmark position uniformly from the central half
of the grid (per axis), perturbs it with the configured noise law to
produce the observed truth, and emits model outputs derived from the
same law: a heatmap over cell midpoints (optionally distorted), a
decoded point estimate, ``sample_count`` posterior-style draws, and a
covariance (oracle or sample). Per-example randomness comes from
``PCG64(seed + index)`` so any example can be regenerated in isolation.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.stats import chi2

from .density import decode
from .errors import InvalidConfig, UnsupportedNoise
from .regions import unit_ball_volume
from .tensor_io import Example, GridDistribution, save_dataset

__all__ = [
    "ScenarioConfig",
    "generate",
    "write_scenario",
    "true_region_volume",
    "gaussian_grid_values",
]

_HEATMAP_MODES = ("oracle", "sharpened", "blurred", "shifted")


def _as_cov(obj, dims: int, where: str) -> np.ndarray:
    C = np.asarray(obj, dtype=float)
    if C.shape != (dims, dims):
        raise InvalidConfig(f"{where}: covariance must be {dims}x{dims}")
    if np.max(np.abs(C - C.T)) > 1e-9 * max(1.0, float(np.max(np.abs(C)))):
        raise InvalidConfig(f"{where}: covariance must be symmetric")
    try:
        np.linalg.cholesky(C)
    except np.linalg.LinAlgError:
        raise InvalidConfig(f"{where}: covariance must be positive definite") from None
    return C


class _Noise:
    """Mixture-of-Gaussians noise shared by truth draws, samples and
    heatmaps. Offsets shift component means relative to the center.

    ``truncate``, when set, bounds every standard-normal coordinate at
    that many standard units (vectors outside are redrawn), keeping
    draws inside a known box without breaking exchangeability."""

    def __init__(self, weights, offsets, covs, dims: int,
                 truncate: float | None = None):
        self.weights = np.asarray(weights, dtype=float)
        self.offsets = np.asarray(offsets, dtype=float)
        self.covs = [np.asarray(c, dtype=float) for c in covs]
        self.chols = [np.linalg.cholesky(c) for c in self.covs]
        self.inv_chols = [np.linalg.inv(L) for L in self.chols]
        self.sqrt_dets = [float(np.prod(np.diag(L))) for L in self.chols]
        self.dims = dims
        self.cum = np.cumsum(self.weights)
        self.truncate = truncate

    def draw(self, rng: np.random.Generator) -> np.ndarray:
        """One draw; consumes one uniform plus ``dims`` normals per
        attempt (truncation redraws the whole normal vector)."""
        u = rng.random()
        k = int(np.searchsorted(self.cum, u, side="right"))
        k = min(k, len(self.covs) - 1)
        z = rng.standard_normal(self.dims)
        if self.truncate is not None:
            while np.max(np.abs(z)) > self.truncate:
                z = rng.standard_normal(self.dims)
        return self.offsets[k] + self.chols[k] @ z

    def total_covariance(self) -> np.ndarray:
        mean = self.weights @ self.offsets
        C = np.zeros((self.dims, self.dims))
        for w, off, cov in zip(self.weights, self.offsets, self.covs):
            dm = off - mean
            C += w * (cov + np.outer(dm, dm))
        return 0.5 * (C + C.T)

    def density(self, rel: np.ndarray) -> np.ndarray:
        """Unnormalized mixture density at offsets ``rel`` (n, dims)."""
        out = np.zeros(rel.shape[0])
        for w, off, invL, sd in zip(self.weights, self.offsets,
                                    self.inv_chols, self.sqrt_dets):
            u = (rel - off) @ invL.T
            out += (w / sd) * np.exp(-0.5 * np.einsum("ij,ij->i", u, u))
        return out

    @property
    def is_single_gaussian(self) -> bool:
        return len(self.covs) == 1 and not np.any(self.offsets)


def _parse_noise(obj: dict, dims: int) -> _Noise:
    if not isinstance(obj, dict) or "kind" not in obj:
        raise InvalidConfig("noise: must be an object with a 'kind' field")
    kind = obj["kind"]
    truncate = obj.get("truncate")
    if truncate is not None:
        truncate = float(truncate)
        if truncate <= 0:
            raise InvalidConfig("noise.truncate: must be positive")
    if kind == "isotropic":
        sigma = float(obj.get("sigma", 0.0))
        if sigma <= 0:
            raise InvalidConfig("noise.sigma: must be positive")
        cov = np.eye(dims) * sigma ** 2
        return _Noise([1.0], [np.zeros(dims)], [cov], dims, truncate)
    if kind == "anisotropic":
        if "cov" not in obj:
            raise InvalidConfig("noise.cov: required for anisotropic noise")
        cov = _as_cov(obj["cov"], dims, "noise.cov")
        return _Noise([1.0], [np.zeros(dims)], [cov], dims, truncate)
    if kind == "mixture":
        for key in ("weights", "covs"):
            if key not in obj:
                raise InvalidConfig(f"noise.{key}: required for mixture noise")
        weights = np.asarray(obj["weights"], dtype=float)
        if weights.ndim != 1 or weights.size == 0 or np.any(weights <= 0):
            raise InvalidConfig("noise.weights: must be positive")
        if abs(float(weights.sum()) - 1.0) > 1e-9:
            raise InvalidConfig("noise.weights: must sum to 1")
        covs = [_as_cov(c, dims, f"noise.covs[{i}]")
                for i, c in enumerate(obj["covs"])]
        if len(covs) != weights.size:
            raise InvalidConfig("noise.covs: length must match weights")
        if obj.get("offsets") is not None:
            offsets = np.asarray(obj["offsets"], dtype=float)
            if offsets.shape != (weights.size, dims):
                raise InvalidConfig(
                    f"noise.offsets: must be ({weights.size}, {dims})")
        else:
            offsets = np.zeros((weights.size, dims))
        return _Noise(weights, offsets, covs, dims, truncate)
    raise InvalidConfig(f"noise.kind: unknown kind {kind!r}")


@dataclass(eq=False)
class ScenarioConfig:
    """Validated generator settings.

    JSON form mirrors the field names; ``noise`` and ``heatmap`` stay
    as dicts so configs round-trip byte-for-byte.
    """

    dims: int
    grid_shape: tuple
    spacing: tuple
    n_examples: int
    seed: int
    noise: dict
    split: str = "calibration"
    heatmap: dict = field(default_factory=lambda: {"mode": "oracle"})
    sample_count: int = 10
    covariance_mode: str = "oracle"
    n_landmarks: int = 1
    tensor_dtype: str = "float32"

    def __post_init__(self):
        if self.dims not in (2, 3):
            raise InvalidConfig("dims: must be 2 or 3")
        self.grid_shape = tuple(int(k) for k in self.grid_shape)
        if len(self.grid_shape) != self.dims or min(self.grid_shape) < 2:
            raise InvalidConfig(
                f"grid_shape: need {self.dims} entries >= 2")
        self.spacing = tuple(float(s) for s in self.spacing)
        if len(self.spacing) != self.dims or min(self.spacing) <= 0:
            raise InvalidConfig(f"spacing: need {self.dims} positive entries")
        if int(self.n_examples) < 1:
            raise InvalidConfig("n_examples: must be >= 1")
        self.n_examples = int(self.n_examples)
        self.seed = int(self.seed)
        if self.split not in ("calibration", "test"):
            raise InvalidConfig("split: must be 'calibration' or 'test'")
        self._noise = _parse_noise(self.noise, self.dims)
        mode = self.heatmap.get("mode", "oracle")
        if mode not in _HEATMAP_MODES:
            raise InvalidConfig(f"heatmap.mode: unknown mode {mode!r}")
        if mode in ("sharpened", "blurred"):
            beta = self.heatmap.get("beta")
            if beta is None or not float(beta) > 0:
                raise InvalidConfig("heatmap.beta: must be positive")
        if mode == "shifted":
            off = self.heatmap.get("offset")
            if off is None or len(off) != self.dims:
                raise InvalidConfig(
                    f"heatmap.offset: need {self.dims} entries")
        if int(self.sample_count) < 0:
            raise InvalidConfig("sample_count: must be >= 0")
        self.sample_count = int(self.sample_count)
        if self.covariance_mode not in ("oracle", "sample"):
            raise InvalidConfig("covariance_mode: must be 'oracle' or 'sample'")
        if int(self.n_landmarks) < 1:
            raise InvalidConfig("n_landmarks: must be >= 1")
        self.n_landmarks = int(self.n_landmarks)
        if self.tensor_dtype not in ("float32", "float64"):
            raise InvalidConfig("tensor_dtype: must be 'float32' or 'float64'")

    @property
    def origin(self) -> np.ndarray:
        return np.zeros(self.dims)

    def to_json(self) -> dict:
        return {
            "dims": self.dims,
            "grid_shape": list(self.grid_shape),
            "spacing": list(self.spacing),
            "n_examples": self.n_examples,
            "seed": self.seed,
            "split": self.split,
            "noise": self.noise,
            "heatmap": self.heatmap,
            "sample_count": self.sample_count,
            "covariance_mode": self.covariance_mode,
            "n_landmarks": self.n_landmarks,
            "tensor_dtype": self.tensor_dtype,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "ScenarioConfig":
        required = ("dims", "grid_shape", "spacing", "n_examples", "seed", "noise")
        for key in required:
            if key not in obj:
                raise InvalidConfig(f"{key}: required field missing")
        known = set(required) | {"split", "heatmap", "sample_count",
                                 "covariance_mode", "n_landmarks", "tensor_dtype"}
        unknown = set(obj) - known
        if unknown:
            raise InvalidConfig(f"{sorted(unknown)[0]}: unknown field")
        kwargs = {k: obj[k] for k in obj}
        return cls(**kwargs)

    @classmethod
    def load(cls, path) -> "ScenarioConfig":
        with open(path, "r", encoding="utf-8") as fh:
            try:
                doc = json.load(fh)
            except json.JSONDecodeError as exc:
                raise InvalidConfig(f"config is not valid JSON: {exc}") from exc
        return cls.from_json(doc)


def gaussian_grid_values(origin, spacing, shape, center, cov) -> np.ndarray:
    """Normalized Gaussian cell masses over a grid (midpoint evaluation)."""
    noise = _Noise([1.0], [np.zeros(len(shape))], [np.asarray(cov, dtype=float)],
                   len(shape))
    mesh = _midpoint_mesh(np.asarray(origin, dtype=float),
                          np.asarray(spacing, dtype=float), tuple(shape))
    vals = noise.density(mesh - np.asarray(center, dtype=float))
    vals = vals.reshape(tuple(shape))
    return vals / vals.sum()


def _midpoint_mesh(origin: np.ndarray, spacing: np.ndarray,
                   shape: tuple) -> np.ndarray:
    axes = [origin[a] + np.arange(shape[a]) * spacing[a]
            for a in range(len(shape))]
    return np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, len(shape))


def generate(config: ScenarioConfig) -> list[Example]:
    """Draw the configured examples.

    Per example ``i`` the stream ``PCG64(seed + i)`` is consumed in a
    fixed order: center uniforms, truth draw, then sample draws. The
    heatmap is the noise density at cell midpoints around the center
    (distorted per ``config.heatmap``), the point estimate is the
    heatmap's weighted mean, and landmark labels cycle ``i mod
    n_landmarks``.
    """
    noise = config._noise
    d = config.dims
    origin = config.origin
    spacing = np.asarray(config.spacing)
    shape = config.grid_shape
    lo = origin - 0.5 * spacing
    width = np.asarray(shape) * spacing
    mesh = _midpoint_mesh(origin, spacing, shape)
    mode = config.heatmap.get("mode", "oracle")
    beta = float(config.heatmap.get("beta", 1.0))
    offset = np.asarray(config.heatmap.get("offset", np.zeros(d)), dtype=float)

    examples: list[Example] = []
    for i in range(config.n_examples):
        rng = np.random.Generator(np.random.PCG64(config.seed + i))
        center = lo + width * (0.25 + 0.5 * rng.random(d))
        truth = center + noise.draw(rng)
        samples = None
        if config.sample_count > 0:
            samples = np.stack([center + noise.draw(rng)
                                for _ in range(config.sample_count)])

        heat_center = center + offset if mode == "shifted" else center
        vals = noise.density(mesh - heat_center)
        if mode in ("sharpened", "blurred"):
            vals = vals ** beta
        total = vals.sum()
        if total <= 0.0:
            # density underflowed everywhere; collapse to the nearest cell
            vals = np.zeros(vals.shape)
            vals[int(np.argmin(np.abs(mesh - heat_center).sum(axis=1)))] = 1.0
            total = 1.0
        vals = (vals / total).reshape(shape)
        grid = GridDistribution(origin, spacing, vals)

        if config.covariance_mode == "oracle":
            cov = noise.total_covariance()
        else:
            if samples is not None and samples.shape[0] >= 2:
                cov = np.cov(samples, rowvar=False, ddof=1).reshape(d, d)
                cov = 0.5 * (cov + cov.T)
            else:
                cov = np.zeros((d, d))

        examples.append(Example(
            id=f"{config.split}-{i:05d}",
            truth=truth,
            grid=grid,
            point=decode(grid, "weighted_mean"),
            samples=samples,
            covariance=cov,
            landmark=i % config.n_landmarks,
        ))
    return examples


def write_scenario(config: ScenarioConfig, out_dir) -> Path:
    """Generate and persist a scenario; returns the manifest path."""
    examples = generate(config)
    return save_dataset(
        examples, out_dir, dims=config.dims, split=config.split,
        seed=config.seed, tensor_dtype=config.tensor_dtype)


def true_region_volume(config: ScenarioConfig, alpha: float) -> float:
    """Volume of the smallest set with ``1 - alpha`` noise probability.

    Defined for single-Gaussian noise only (the highest-density region
    is then the Mahalanobis ball at the chi-squared radius); mixture
    noise raises :class:`UnsupportedNoise`.
    """
    if not 0.0 < float(alpha) < 1.0:
        raise InvalidConfig("alpha: must lie strictly in (0, 1)")
    noise = config._noise
    if not noise.is_single_gaussian:
        raise UnsupportedNoise("true HDR volume is only defined for "
                               "single-Gaussian noise")
    cov = noise.covs[0]
    d = config.dims
    r2 = float(chi2.ppf(1.0 - float(alpha), df=d))
    if noise.truncate is not None and noise.truncate < math.sqrt(r2):
        raise UnsupportedNoise(
            "truncation bound is tighter than the requested density ball")
    return unit_ball_volume(d) * r2 ** (d / 2.0) * math.sqrt(float(np.linalg.det(cov)))
