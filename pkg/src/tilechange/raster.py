"""Scene raster storage, tiling, and pairing.

A scene is stored as two files sharing a stem:

* ``<name>.bin``  raw IEEE-754 32-bit little-endian reflectance values in
  band-major order (``[band][row][col]``);
* ``<name>.json`` sidecar with ``width``, ``height``, ``bands``,
  ``band_names``, ``nodata_value`` and ``resolution_m``.

The format is deliberately self-contained: no geospatial container, no
projection metadata. Scenes and tile grids are immutable after
construction and safe to share across threads.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DomainError, EmptyGridError, FormatError, PairingError

DEFAULT_TILE_SIZE = 32
MIN_TILE_SIZE = 8

_SIDE_FIELDS = ("width", "height", "bands", "band_names", "nodata_value", "resolution_m")


@dataclass(frozen=True)
class SceneHeader:
    """Geometry and band metadata for one scene."""

    width: int
    height: int
    bands: int
    band_names: tuple
    nodata_value: float | None = None
    resolution_m: float | None = None

    def __post_init__(self):
        if self.width <= 0 or self.height <= 0:
            raise DomainError(f"scene dimensions must be positive, got {self.width}x{self.height}")
        if self.bands <= 0:
            raise DomainError(f"band count must be positive, got {self.bands}")
        object.__setattr__(self, "band_names", tuple(self.band_names))
        if len(self.band_names) != self.bands:
            raise DomainError(
                f"band_names length {len(self.band_names)} != bands {self.bands}"
            )

    def to_dict(self) -> dict:
        return {
            "width": self.width,
            "height": self.height,
            "bands": self.bands,
            "band_names": list(self.band_names),
            "nodata_value": self.nodata_value,
            "resolution_m": self.resolution_m,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SceneHeader":
        missing = [k for k in _SIDE_FIELDS if k not in d]
        if missing:
            raise FormatError(f"sidecar missing fields: {missing}")
        try:
            return cls(
                width=int(d["width"]),
                height=int(d["height"]),
                bands=int(d["bands"]),
                band_names=tuple(str(n) for n in d["band_names"]),
                nodata_value=None if d["nodata_value"] is None else float(d["nodata_value"]),
                resolution_m=None if d["resolution_m"] is None else float(d["resolution_m"]),
            )
        except (TypeError, ValueError) as exc:
            raise FormatError(f"sidecar field has wrong type: {exc}") from exc


class SceneRaster:
    """A multiband reflectance grid, band-major, float32, immutable.

    `values` has shape (bands, height, width). All values are finite or
    equal to the header's nodata sentinel.
    """

    def __init__(self, header: SceneHeader, values: np.ndarray):
        values = np.asarray(values, dtype=np.float32)
        expected = (header.bands, header.height, header.width)
        if values.shape != expected:
            raise DomainError(f"values shape {values.shape} != {expected}")
        finite = np.isfinite(values)
        if not finite.all():
            bad = values[~finite]
            if header.nodata_value is None or not np.isfinite(header.nodata_value):
                raise DomainError(f"scene contains {bad.size} non-finite values")
            raise DomainError("non-finite values are not a valid nodata encoding")
        values = values.copy()
        values.flags.writeable = False
        self.header = header
        self.values = values

    @property
    def shape(self):
        return self.values.shape

    def nodata_mask(self) -> np.ndarray:
        """Boolean (height, width) mask, True where any band is nodata."""
        nd = self.header.nodata_value
        if nd is None:
            return np.zeros((self.header.height, self.header.width), dtype=bool)
        return (self.values == np.float32(nd)).any(axis=0)

    def with_values(self, values: np.ndarray) -> "SceneRaster":
        return SceneRaster(self.header, values)


def _stem(path) -> Path:
    p = Path(path)
    return p.with_suffix("") if p.suffix in (".bin", ".json") else p


def save_scene(scene: SceneRaster, path) -> None:
    """Write `<stem>.bin` + `<stem>.json`; overwrites existing files."""
    stem = _stem(path)
    payload = np.ascontiguousarray(scene.values, dtype="<f4")
    try:
        stem.parent.mkdir(parents=True, exist_ok=True)
        with open(stem.with_suffix(".json"), "w", encoding="utf-8") as f:
            json.dump(scene.header.to_dict(), f, indent=2, sort_keys=True)
            f.write("\n")
        payload.tofile(stem.with_suffix(".bin"))
    except OSError as exc:
        raise FormatError(f"cannot write scene to {stem}: {exc}") from exc


def load_scene(path) -> SceneRaster:
    """Load a scene; values round-trip bit-exactly with save_scene."""
    stem = _stem(path)
    side = stem.with_suffix(".json")
    binf = stem.with_suffix(".bin")
    if not side.exists():
        raise FormatError(f"missing sidecar {side}")
    if not binf.exists():
        raise FormatError(f"missing payload {binf}")
    try:
        with open(side, encoding="utf-8") as f:
            header = SceneHeader.from_dict(json.load(f))
    except (OSError, json.JSONDecodeError) as exc:
        raise FormatError(f"corrupt sidecar {side}: {exc}") from exc
    raw = np.fromfile(binf, dtype="<f4")
    expected = header.width * header.height * header.bands
    if raw.size != expected:
        raise FormatError(
            f"payload {binf} holds {raw.size} values, header implies {expected}"
        )
    values = raw.reshape(header.bands, header.height, header.width)
    return SceneRaster(header, values)


@dataclass(frozen=True)
class Tile:
    """One size x size patch of a scene, band-major values (C, size, size)."""

    row: int
    col: int
    size: int
    values: np.ndarray
    contains_nodata: bool = False

    def __post_init__(self):
        v = self.values
        if v.shape != (v.shape[0], self.size, self.size):
            raise DomainError(f"tile values shape {v.shape} inconsistent with size {self.size}")

    @property
    def bands(self) -> int:
        return self.values.shape[0]


@dataclass(frozen=True)
class TileGrid:
    rows: int
    cols: int
    tiles: tuple
    source_header: SceneHeader
    tile_size: int = DEFAULT_TILE_SIZE

    def tile_at(self, r: int, c: int) -> Tile:
        return self.tiles[r * self.cols + c]


@dataclass(frozen=True)
class TilePair:
    """Spatially co-located pre/post tiles, plus optional older pre tiles."""

    pre: Tile
    post: Tile
    pre_history: tuple = ()
    excluded: bool = False

    @property
    def row(self) -> int:
        return self.pre.row

    @property
    def col(self) -> int:
        return self.pre.col


def tile_scene(scene: SceneRaster, size: int = DEFAULT_TILE_SIZE) -> TileGrid:
    """Partition a scene into non-overlapping size x size tiles.

    Partial strips at the right/bottom edges are dropped. Tiles containing
    any nodata pixel are flagged `contains_nodata` and later excluded from
    scoring.
    """
    if size < MIN_TILE_SIZE:
        raise DomainError(f"tile size {size} below minimum {MIN_TILE_SIZE}")
    h, w = scene.header.height, scene.header.width
    rows, cols = h // size, w // size
    if rows == 0 or cols == 0:
        raise EmptyGridError(f"scene {w}x{h} smaller than one {size}px tile")
    nodata = scene.nodata_mask()
    tiles = []
    for r in range(rows):
        for c in range(cols):
            ys, xs = r * size, c * size
            patch = scene.values[:, ys : ys + size, xs : xs + size]
            flag = bool(nodata[ys : ys + size, xs : xs + size].any())
            tiles.append(Tile(row=r, col=c, size=size, values=patch, contains_nodata=flag))
    return TileGrid(rows=rows, cols=cols, tiles=tuple(tiles), source_header=scene.header, tile_size=size)


def _check_grid_compat(a: TileGrid, b: TileGrid, what: str) -> None:
    if (a.rows, a.cols, a.tile_size) != (b.rows, b.cols, b.tile_size):
        raise PairingError(
            f"{what}: grid {a.rows}x{a.cols}@{a.tile_size} vs {b.rows}x{b.cols}@{b.tile_size}"
        )
    if a.source_header.bands != b.source_header.bands:
        raise PairingError(
            f"{what}: band count {a.source_header.bands} vs {b.source_header.bands}"
        )


def pair_tiles(pre: TileGrid, post: TileGrid, history: list | None = None) -> list:
    """Pair co-located tiles row-major; always rows x cols pairs.

    A pair is marked excluded when any constituent tile (pre, post, or any
    history tile) contains nodata.
    """
    _check_grid_compat(pre, post, "pre vs post")
    history = list(history or [])
    for i, hg in enumerate(history):
        _check_grid_compat(pre, hg, f"pre vs history[{i}]")
    pairs = []
    for idx in range(pre.rows * pre.cols):
        p, q = pre.tiles[idx], post.tiles[idx]
        hist = tuple(hg.tiles[idx] for hg in history)
        excluded = p.contains_nodata or q.contains_nodata or any(t.contains_nodata for t in hist)
        pairs.append(TilePair(pre=p, post=q, pre_history=hist, excluded=excluded))
    return pairs


def reassemble(grid: TileGrid) -> np.ndarray:
    """Stitch a grid back into the covered (bands, rows*size, cols*size) block."""
    size = grid.tile_size
    bands = grid.source_header.bands
    out = np.empty((bands, grid.rows * size, grid.cols * size), dtype=np.float32)
    for t in grid.tiles:
        out[:, t.row * size : (t.row + 1) * size, t.col * size : (t.col + 1) * size] = t.values
    return out


def export_pgm(scores: np.ndarray, path) -> None:
    """Write a (rows, cols) score array as a binary P5 PGM.

    The minimum score maps to 0, the maximum to 255, linear in between,
    rounded half away from zero. A constant array maps to 128 everywhere.
    NaN entries (excluded tiles) render as 0.
    """
    scores = np.asarray(scores, dtype=np.float64)
    if scores.ndim != 2 or scores.size == 0:
        raise DomainError(f"score array must be non-empty 2-D, got shape {scores.shape}")
    valid = np.isfinite(scores)
    if not valid.any():
        raise DomainError("score array has no finite entries")
    lo = scores[valid].min()
    hi = scores[valid].max()
    if hi > lo:
        scaled = (scores - lo) * (255.0 / (hi - lo))
    else:
        scaled = np.full_like(scores, 128.0)
    pixels = np.floor(scaled + 0.5)  # scores are non-negative after the affine map
    pixels[~valid] = 0.0
    pixels = np.clip(pixels, 0, 255).astype(np.uint8)
    try:
        p = Path(path)
        p.parent.mkdir(parents=True, exist_ok=True)
        with open(p, "wb") as f:
            f.write(f"P5\n{scores.shape[1]} {scores.shape[0]}\n255\n".encode("ascii"))
            f.write(pixels.tobytes())
    except OSError as exc:
        raise FormatError(f"cannot write PGM to {path}: {exc}") from exc
