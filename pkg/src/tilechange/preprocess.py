"""Radiometric preprocessing: spectral alignment and robust log scaling.

Two stages, fitted on training data and archived for reuse at inference:

1. Per-band major-axis linear regression maps one sensor's reflectance
   onto a reference sensor's scale (gain/offset per band).
2. Log compression followed by robust percentile scaling squashes each
   band into [-1, +1]: ``x' = log(clamp(x, 0) + eps)`` then an affine map
   anchored at the 1st and 99th percentiles of x' over the training
   pixels, clipped to [-1, +1].

The fitted parameters are stored as one JSON archive so inference applies
exactly the coefficients seen at training time.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DegenerateError, DomainError, FormatError
from .raster import SceneRaster, Tile

DEFAULT_EPSILON = 1e-6


def percentile(values, p: float) -> float:
    """Percentile by linear interpolation at rank (p/100)*(n-1) of the sorted values."""
    values = np.asarray(values, dtype=np.float64)
    if values.size == 0:
        raise DomainError("percentile of empty input")
    if not np.isfinite(values).all():
        raise DomainError("percentile input contains non-finite values")
    if not 0.0 <= p <= 100.0:
        raise DomainError(f"percentile rank {p} outside [0, 100]")
    return float(np.percentile(values, p, method="linear"))


def fit_ma_regression(x, y) -> tuple:
    """Fit major-axis regression y ~ alpha*x + beta.

    The slope is the direction of the leading eigenvector of the 2x2 sample
    covariance matrix, so regressing y on x and x on y gives reciprocal
    slopes (unlike ordinary least squares).
    """
    x = np.asarray(x, dtype=np.float64).ravel()
    y = np.asarray(y, dtype=np.float64).ravel()
    if x.size != y.size:
        raise DomainError(f"sample lengths differ: {x.size} vs {y.size}")
    if x.size < 3:
        raise DomainError(f"major-axis fit needs >= 3 samples, got {x.size}")
    sxx = float(np.var(x, ddof=1))
    syy = float(np.var(y, ddof=1))
    sxy = float(np.cov(x, y, ddof=1)[0, 1])
    if sxy == 0.0:
        raise DegenerateError("zero covariance: major-axis slope undefined")
    alpha = (syy - sxx + math.sqrt((syy - sxx) ** 2 + 4.0 * sxy * sxy)) / (2.0 * sxy)
    beta = float(np.mean(y)) - alpha * float(np.mean(x))
    return alpha, beta


@dataclass(frozen=True)
class SpectralAlignParams:
    """Per-band gain/offset from major-axis regression."""

    alpha: np.ndarray
    beta: np.ndarray

    def __post_init__(self):
        a = np.asarray(self.alpha, dtype=np.float64)
        b = np.asarray(self.beta, dtype=np.float64)
        if a.shape != b.shape or a.ndim != 1:
            raise DomainError(f"alpha/beta must be matching 1-D arrays, got {a.shape} vs {b.shape}")
        if not np.isfinite(a).all() or (a == 0).any():
            raise DomainError("gains must be finite and nonzero")
        if not np.isfinite(b).all():
            raise DomainError("offsets must be finite")
        object.__setattr__(self, "alpha", a)
        object.__setattr__(self, "beta", b)

    @property
    def bands(self) -> int:
        return self.alpha.size

    @classmethod
    def identity(cls, bands: int) -> "SpectralAlignParams":
        return cls(alpha=np.ones(bands), beta=np.zeros(bands))

    @classmethod
    def fit(cls, samples_x: np.ndarray, samples_y: np.ndarray) -> "SpectralAlignParams":
        """Fit one (alpha, beta) per band from paired samples shaped (n, bands)."""
        sx = np.atleast_2d(np.asarray(samples_x, dtype=np.float64))
        sy = np.atleast_2d(np.asarray(samples_y, dtype=np.float64))
        if sx.shape != sy.shape:
            raise DomainError(f"paired sample shapes differ: {sx.shape} vs {sy.shape}")
        fits = [fit_ma_regression(sx[:, b], sy[:, b]) for b in range(sx.shape[1])]
        return cls(alpha=np.array([f[0] for f in fits]), beta=np.array([f[1] for f in fits]))


def apply_spectral_alignment(scene: SceneRaster, params: SpectralAlignParams) -> SceneRaster:
    """Map band b to alpha_b * x + beta_b; nodata pixels pass through untouched."""
    if params.bands != scene.header.bands:
        raise DomainError(
            f"alignment has {params.bands} bands, scene has {scene.header.bands}"
        )
    a = params.alpha.astype(np.float32)[:, None, None]
    b = params.beta.astype(np.float32)[:, None, None]
    out = scene.values * a + b
    nd = scene.header.nodata_value
    if nd is not None:
        mask = scene.values == np.float32(nd)
        out = np.where(mask, np.float32(nd), out)
    return scene.with_values(out)


@dataclass(frozen=True)
class NormalizationParams:
    """Log-domain robust scaling anchors, one (p1, p99) per band."""

    epsilon: float
    p1: np.ndarray
    p99: np.ndarray

    def __post_init__(self):
        if self.epsilon <= 0:
            raise DomainError(f"epsilon must be positive, got {self.epsilon}")
        p1 = np.asarray(self.p1, dtype=np.float64)
        p99 = np.asarray(self.p99, dtype=np.float64)
        if p1.shape != p99.shape or p1.ndim != 1:
            raise DomainError("p1/p99 must be matching 1-D arrays")
        if not (p99 > p1).all():
            raise DegenerateError("p99 must exceed p1 for every band")
        object.__setattr__(self, "p1", p1)
        object.__setattr__(self, "p99", p99)

    @property
    def bands(self) -> int:
        return self.p1.size


def _log_domain(values: np.ndarray, epsilon: float) -> np.ndarray:
    return np.log(np.maximum(values.astype(np.float64), 0.0) + epsilon)


def fit_normalization(training_scenes, epsilon: float = DEFAULT_EPSILON) -> NormalizationParams:
    """Pool all non-nodata training pixels per band and take log-domain P1/P99."""
    if epsilon <= 0:
        raise DomainError(f"epsilon must be positive, got {epsilon}")
    scenes = list(training_scenes)
    if not scenes:
        raise DomainError("no training scenes")
    bands = scenes[0].header.bands
    for s in scenes:
        if s.header.bands != bands:
            raise DomainError("training scenes disagree on band count")
    p1 = np.empty(bands)
    p99 = np.empty(bands)
    for b in range(bands):
        pooled = []
        for s in scenes:
            band = s.values[b]
            nd = s.header.nodata_value
            if nd is not None:
                band = band[band != np.float32(nd)]
            pooled.append(np.ravel(band))
        logs = _log_domain(np.concatenate(pooled), epsilon)
        p1[b] = percentile(logs, 1.0)
        p99[b] = percentile(logs, 99.0)
        if not p99[b] > p1[b]:
            raise DegenerateError(f"band {b} has no spread between P1 and P99")
    return NormalizationParams(epsilon=epsilon, p1=p1, p99=p99)


def lognorm_values(values: np.ndarray, params: NormalizationParams) -> np.ndarray:
    """Apply log + robust scaling to a (bands, ...) array; result in [-1, +1], float32."""
    if values.shape[0] != params.bands:
        raise DomainError(
            f"normalization has {params.bands} bands, data has {values.shape[0]}"
        )
    logs = _log_domain(values, params.epsilon)
    p1 = params.p1.reshape((-1,) + (1,) * (values.ndim - 1))
    p99 = params.p99.reshape((-1,) + (1,) * (values.ndim - 1))
    scaled = 2.0 * (logs - p1) / (p99 - p1) - 1.0
    return np.clip(scaled, -1.0, 1.0).astype(np.float32)


def apply_lognorm(tile: Tile, params: NormalizationParams) -> Tile:
    return Tile(
        row=tile.row,
        col=tile.col,
        size=tile.size,
        values=lognorm_values(tile.values, params),
        contains_nodata=tile.contains_nodata,
    )


def save_params(path, align: SpectralAlignParams, norm: NormalizationParams) -> None:
    """Archive both stages as one JSON file (exact float round trip)."""
    if align.bands != norm.bands:
        raise DomainError("alignment and normalization band counts differ")
    doc = {
        "epsilon": norm.epsilon,
        "p1": norm.p1.tolist(),
        "p99": norm.p99.tolist(),
        "alpha": align.alpha.tolist(),
        "beta": align.beta.tolist(),
    }
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    with open(p, "w", encoding="utf-8") as f:
        json.dump(doc, f, indent=2, sort_keys=True)
        f.write("\n")


def load_params(path) -> tuple:
    try:
        with open(path, encoding="utf-8") as f:
            doc = json.load(f)
    except (OSError, json.JSONDecodeError) as exc:
        raise FormatError(f"cannot read parameter archive {path}: {exc}") from exc
    try:
        align = SpectralAlignParams(alpha=np.array(doc["alpha"]), beta=np.array(doc["beta"]))
        norm = NormalizationParams(
            epsilon=float(doc["epsilon"]),
            p1=np.array(doc["p1"]),
            p99=np.array(doc["p99"]),
        )
    except KeyError as exc:
        raise FormatError(f"parameter archive missing field {exc}") from exc
    return align, norm
