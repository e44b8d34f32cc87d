"""Seeded synthetic multispectral scene pairs with planted burn anomalies.

A scene pair consists of a smooth correlated base field (the shared
ground truth), burn ellipses injected into the post scene (visible bands
darkened, near-infrared depressed, char texture added), and nuisance
perturbations (global radiometric gain, integer misregistration with a
nodata border, sensor noise). Tile labels derive from the exact burned
pixel masks: a tile is positive when its burned fraction reaches the
coverage threshold.

Generation is a pure function of the config; every random draw comes
from one named substream in a fixed order.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

from .errors import DomainError, FormatError, PlacementError
from .raster import SceneHeader, SceneRaster
from .rngs import substream

NODATA = -9999.0

BAND_NAMES = {
    4: ("red", "green", "blue", "nir"),
    8: ("coastal_blue", "blue", "green_i", "green", "yellow", "red", "red_edge", "nir"),
}
# red_edge behaves NIR-like for burn response
NIR_BAND_COUNT = {4: 1, 8: 2}


@dataclass(frozen=True)
class SynthConfig:
    width: int = 256
    height: int = 256
    bands: int = 4
    n_burns: int = 3
    burn_visible_gain: float = 0.4
    burn_nir_gain: float = 0.3
    char_noise_sigma: float = 0.02
    nuisance_gain_range: tuple = (0.9, 1.1)
    noise_sigma: float = 0.01
    misregistration_px: int = 0
    target_prevalence: float = 0.08
    label_coverage_theta: float = 0.25
    tile_size: int = 32
    smooth_sigma: float = 6.0
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "nuisance_gain_range", tuple(self.nuisance_gain_range))
        if self.bands not in BAND_NAMES:
            raise DomainError(f"bands must be one of {sorted(BAND_NAMES)}, got {self.bands}")
        if not 0.0 < self.burn_visible_gain <= 1.0 or not 0.0 < self.burn_nir_gain <= 1.0:
            raise DomainError("burn gains must lie in (0, 1]")
        if not 0.0 < self.target_prevalence <= 0.10:
            raise DomainError(f"target_prevalence must lie in (0, 0.10], got {self.target_prevalence}")
        if not 0.0 < self.label_coverage_theta <= 1.0:
            raise DomainError("label_coverage_theta must lie in (0, 1]")
        if self.misregistration_px < 0 or self.n_burns < 0:
            raise DomainError("misregistration_px and n_burns must be >= 0")
        lo, hi = self.nuisance_gain_range
        if not 0.0 < lo <= hi:
            raise DomainError(f"bad nuisance gain range {self.nuisance_gain_range}")

    @property
    def nir_bands(self) -> tuple:
        k = NIR_BAND_COUNT[self.bands]
        return tuple(range(self.bands - k, self.bands))

    def header(self) -> SceneHeader:
        return SceneHeader(
            width=self.width,
            height=self.height,
            bands=self.bands,
            band_names=BAND_NAMES[self.bands],
            nodata_value=NODATA,
            resolution_m=3.0,
        )

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SynthConfig":
        return cls(**d)


@dataclass(frozen=True)
class SceneLabels:
    rows: int
    cols: int
    theta: float
    labels: np.ndarray  # (rows, cols) bool
    burned_fraction: np.ndarray  # (rows, cols) float

    def __post_init__(self):
        labels = np.asarray(self.labels, dtype=bool)
        frac = np.asarray(self.burned_fraction, dtype=np.float64)
        if labels.shape != (self.rows, self.cols) or frac.shape != labels.shape:
            raise DomainError("label arrays must be (rows, cols)")
        if not np.array_equal(labels, frac >= self.theta):
            raise DomainError("labels inconsistent with burned_fraction and theta")
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "burned_fraction", frac)

    @property
    def n_positive(self) -> int:
        return int(self.labels.sum())

    def save(self, path) -> None:
        doc = {
            "rows": self.rows,
            "cols": self.cols,
            "theta": self.theta,
            "labels": self.labels.ravel().astype(int).tolist(),
            "burned_fraction": self.burned_fraction.ravel().tolist(),
        }
        p = Path(path)
        p.parent.mkdir(parents=True, exist_ok=True)
        with open(p, "w", encoding="utf-8") as f:
            json.dump(doc, f, sort_keys=True)
            f.write("\n")

    @classmethod
    def load(cls, path) -> "SceneLabels":
        try:
            with open(path, encoding="utf-8") as f:
                doc = json.load(f)
            rows, cols = int(doc["rows"]), int(doc["cols"])
            return cls(
                rows=rows,
                cols=cols,
                theta=float(doc["theta"]),
                labels=np.array(doc["labels"], dtype=bool).reshape(rows, cols),
                burned_fraction=np.array(doc["burned_fraction"], dtype=np.float64).reshape(rows, cols),
            )
        except (OSError, json.JSONDecodeError, KeyError, ValueError) as exc:
            raise FormatError(f"cannot read labels {path}: {exc}") from exc


@dataclass(frozen=True)
class Ellipse:
    cy: float
    cx: float
    ry: float
    rx: float
    angle: float  # radians

    def scaled(self, s: float) -> "Ellipse":
        return Ellipse(self.cy, self.cx, self.ry * s, self.rx * s, self.angle)

    def mask(self, height: int, width: int) -> np.ndarray:
        yy, xx = np.mgrid[0:height, 0:width]
        dy = yy - self.cy
        dx = xx - self.cx
        cos_t, sin_t = np.cos(self.angle), np.sin(self.angle)
        u = dx * cos_t + dy * sin_t
        v = -dx * sin_t + dy * cos_t
        return (u / self.rx) ** 2 + (v / self.ry) ** 2 <= 1.0

    def bbox_inside(self, height: int, width: int) -> bool:
        extent = max(self.rx, self.ry)
        return (
            self.cy - extent >= 0
            and self.cy + extent < height
            and self.cx - extent >= 0
            and self.cx + extent < width
        )


def _smooth_field(rng: np.random.Generator, height: int, width: int, sigma: float) -> np.ndarray:
    field = rng.standard_normal((height, width))
    smooth = gaussian_filter(field, sigma=sigma, mode="reflect")
    sd = smooth.std()
    return smooth / sd if sd > 0 else smooth


def gen_base_scene(cfg: SynthConfig, rng: np.random.Generator) -> SceneRaster:
    """Smooth correlated reflectance field per band, scaled to [0.05, 0.6]."""
    common = _smooth_field(rng, cfg.height, cfg.width, cfg.smooth_sigma)
    bands = []
    for _ in range(cfg.bands):
        ind = _smooth_field(rng, cfg.height, cfg.width, cfg.smooth_sigma)
        f = 0.8 * common + 0.45 * ind
        lo, hi = f.min(), f.max()
        bands.append(0.05 + 0.55 * (f - lo) / (hi - lo))
    return SceneRaster(cfg.header(), np.stack(bands).astype(np.float32))


def inject_burn(scene: SceneRaster, region: Ellipse, cfg: SynthConfig, rng: np.random.Generator):
    """Darken an elliptical region; returns (new scene, exact pixel mask).

    Visible bands are multiplied by the visible gain, NIR-like bands by
    the NIR gain, and seeded char texture noise is added inside the mask.
    Identity gains leave the scene untouched (the mask is still returned).
    """
    h, w = scene.header.height, scene.header.width
    if not region.bbox_inside(h, w):
        raise DomainError(f"burn region {region} extends outside the {w}x{h} scene")
    mask = region.mask(h, w)
    if cfg.burn_visible_gain == 1.0 and cfg.burn_nir_gain == 1.0:
        return scene, mask
    values = scene.values.astype(np.float64)
    nir = set(cfg.nir_bands)
    for b in range(scene.header.bands):
        gain = cfg.burn_nir_gain if b in nir else cfg.burn_visible_gain
        values[b][mask] *= gain
    if cfg.char_noise_sigma > 0:
        noise = rng.normal(0.0, cfg.char_noise_sigma, size=(scene.header.bands, int(mask.sum())))
        for b in range(scene.header.bands):
            values[b][mask] += noise[b]
    return scene.with_values(values.astype(np.float32)), mask


def translate_with_nodata(values: np.ndarray, dy: int, dx: int, nodata: float) -> np.ndarray:
    """Shift (C, H, W) by whole pixels; vacated rows/cols become nodata."""
    out = np.full_like(values, np.float32(nodata))
    _, h, w = values.shape
    ys_dst = slice(max(dy, 0), h + min(dy, 0))
    xs_dst = slice(max(dx, 0), w + min(dx, 0))
    ys_src = slice(max(-dy, 0), h + min(-dy, 0))
    xs_src = slice(max(-dx, 0), w + min(-dx, 0))
    out[:, ys_dst, xs_dst] = values[:, ys_src, xs_src]
    return out


def inject_nuisance(scene: SceneRaster, cfg: SynthConfig, rng: np.random.Generator) -> SceneRaster:
    """Apply, in order: per-band global gain, integer shift, additive noise."""
    values = scene.values.astype(np.float64)
    lo, hi = cfg.nuisance_gain_range
    gains = rng.uniform(lo, hi, size=scene.header.bands)
    values *= gains[:, None, None]
    if cfg.misregistration_px > 0:
        dy, dx = rng.integers(-cfg.misregistration_px, cfg.misregistration_px + 1, size=2)
        values = translate_with_nodata(values.astype(np.float32), int(dy), int(dx), NODATA).astype(np.float64)
    if cfg.noise_sigma > 0:
        noise = rng.normal(0.0, cfg.noise_sigma, size=values.shape)
        valid = values != NODATA
        values[valid] += noise[valid]
    return scene.with_values(values.astype(np.float32))


def _tile_burn_fraction(mask: np.ndarray, tile_size: int) -> np.ndarray:
    rows = mask.shape[0] // tile_size
    cols = mask.shape[1] // tile_size
    core = mask[: rows * tile_size, : cols * tile_size]
    return core.reshape(rows, tile_size, cols, tile_size).mean(axis=(1, 3))


def _count_positive(shapes, scale, cfg) -> int:
    union = np.zeros((cfg.height, cfg.width), dtype=bool)
    for e in shapes:
        union |= e.scaled(scale).mask(cfg.height, cfg.width)
    frac = _tile_burn_fraction(union, cfg.tile_size)
    return int((frac >= cfg.label_coverage_theta).sum())


def _draw_shapes(cfg: SynthConfig, rng: np.random.Generator):
    """Unit-ish ellipses at random interior positions; scaled later."""
    shapes = []
    margin = 0.25 * min(cfg.height, cfg.width)
    for _ in range(cfg.n_burns):
        cy = rng.uniform(margin, cfg.height - margin)
        cx = rng.uniform(margin, cfg.width - margin)
        aspect = rng.uniform(0.5, 1.0)
        angle = rng.uniform(0.0, np.pi)
        base = rng.uniform(0.8, 1.2)
        shapes.append(Ellipse(cy=cy, cx=cx, ry=base * aspect, rx=base, angle=angle))
    return shapes


def _max_scale(shapes, cfg) -> float:
    """Largest uniform scale keeping every ellipse bbox inside the scene."""
    s = np.inf
    for e in shapes:
        extent = max(e.rx, e.ry)
        room = min(e.cy, e.cx, cfg.height - 1 - e.cy, cfg.width - 1 - e.cx)
        s = min(s, room / extent)
    return float(s)


def gen_scene_pair(cfg: SynthConfig, stream: int = 0):
    """Generate (pre, post, labels) for one seeded scene pair.

    Burn ellipse sizes are bisected to land the positive-tile count within
    +-3 tiles of the prevalence target; failure to do so raises. `stream`
    selects an independent substream so one config can emit many scenes.
    """
    rng = substream(cfg.seed, "synth", stream)
    pre = gen_base_scene(cfg, rng)
    rows = cfg.height // cfg.tile_size
    cols = cfg.width // cfg.tile_size
    n_tiles = rows * cols
    if n_tiles == 0:
        raise DomainError("scene smaller than one tile")

    union = np.zeros((cfg.height, cfg.width), dtype=bool)
    post = pre
    if cfg.n_burns > 0:
        target = int(round(cfg.target_prevalence * n_tiles))
        shapes = _draw_shapes(cfg, rng)
        hi = _max_scale(shapes, cfg)
        lo = 1e-3
        count_hi = _count_positive(shapes, hi, cfg)
        count_lo = _count_positive(shapes, lo, cfg)
        if count_hi < target - 3:
            raise PlacementError(
                f"cannot reach {target} positive tiles: max attainable {count_hi}"
            )
        if count_lo > target + 3:
            raise PlacementError(
                f"cannot stay within {target}+3 positive tiles: minimum {count_lo}"
            )
        for _ in range(60):
            mid = 0.5 * (lo + hi)
            if _count_positive(shapes, mid, cfg) < target:
                lo = mid
            else:
                hi = mid
        scale = hi if abs(_count_positive(shapes, hi, cfg) - target) <= abs(
            _count_positive(shapes, lo, cfg) - target
        ) else lo
        achieved = _count_positive(shapes, scale, cfg)
        if abs(achieved - target) > 3:
            raise PlacementError(
                f"bisection landed at {achieved} positive tiles, target {target}"
            )
        for e in shapes:
            post, mask = inject_burn(post, e.scaled(scale), cfg, rng)
            union |= mask
    post = inject_nuisance(post, cfg, rng)
    frac = _tile_burn_fraction(union, cfg.tile_size)
    labels = SceneLabels(
        rows=rows,
        cols=cols,
        theta=cfg.label_coverage_theta,
        labels=frac >= cfg.label_coverage_theta,
        burned_fraction=frac,
    )
    return pre, post, labels
