import json

import numpy as np
import pytest

from tilechange.errors import DomainError, EmptyGridError, FormatError, PairingError
from tilechange.raster import (
    SceneHeader,
    SceneRaster,
    Tile,
    export_pgm,
    load_scene,
    pair_tiles,
    reassemble,
    save_scene,
    tile_scene,
)


def make_scene(width=64, height=64, bands=4, seed=0, nodata=None):
    rng = np.random.default_rng(seed)
    header = SceneHeader(
        width=width,
        height=height,
        bands=bands,
        band_names=tuple(f"b{i}" for i in range(bands)),
        nodata_value=nodata,
        resolution_m=3.0,
    )
    values = rng.uniform(0.0, 1.0, size=(bands, height, width)).astype(np.float32)
    return SceneRaster(header, values)


class TestHeader:
    def test_band_names_must_match_bands(self):
        with pytest.raises(DomainError):
            SceneHeader(width=4, height=4, bands=3, band_names=("a", "b"))

    def test_rejects_empty_dims(self):
        with pytest.raises(DomainError):
            SceneHeader(width=0, height=4, bands=1, band_names=("a",))


class TestSaveLoad:
    def test_round_trip_identity(self, tmp_path):
        scene = make_scene(seed=7)
        save_scene(scene, tmp_path / "s")
        back = load_scene(tmp_path / "s")
        assert back.header == scene.header
        assert np.array_equal(back.values, scene.values)
        assert back.values.tobytes() == scene.values.tobytes()

    def test_payload_length_mismatch(self, tmp_path):
        scene = make_scene(bands=3)
        save_scene(scene, tmp_path / "s")
        side = json.loads((tmp_path / "s.json").read_text())
        side["bands"] = 4
        side["band_names"] = ["b0", "b1", "b2", "b3"]
        (tmp_path / "s.json").write_text(json.dumps(side))
        with pytest.raises(FormatError):
            load_scene(tmp_path / "s")

    def test_missing_sidecar(self, tmp_path):
        scene = make_scene()
        save_scene(scene, tmp_path / "s")
        (tmp_path / "s.json").unlink()
        with pytest.raises(FormatError):
            load_scene(tmp_path / "s")

    def test_nodata_sentinel_preserved(self, tmp_path):
        scene = make_scene(nodata=-9999.0)
        values = scene.values.copy()
        values[:, :2, :] = -9999.0
        scene = SceneRaster(scene.header, values)
        save_scene(scene, tmp_path / "s")
        back = load_scene(tmp_path / "s")
        assert np.array_equal(back.values, values)
        assert back.nodata_mask()[:2].all()

    def test_payload_bytes_little_endian(self, tmp_path):
        header = SceneHeader(width=2, height=2, bands=1, band_names=("b0",))
        scene = SceneRaster(header, np.array([[[0.0, 0.5], [1.0, 0.25]]], dtype=np.float32))
        save_scene(scene, tmp_path / "s")
        raw = (tmp_path / "s.bin").read_bytes()
        assert len(raw) == 16
        assert raw == np.array([0.0, 0.5, 1.0, 0.25], dtype="<f4").tobytes()

    def test_empty_band_names_rejected_before_write(self, tmp_path):
        with pytest.raises(DomainError):
            SceneHeader(width=2, height=2, bands=1, band_names=())

    def test_overwrite_existing(self, tmp_path):
        a = make_scene(seed=1)
        b = make_scene(seed=2)
        save_scene(a, tmp_path / "s")
        save_scene(b, tmp_path / "s")
        assert np.array_equal(load_scene(tmp_path / "s").values, b.values)

    def test_rejects_non_finite_values(self):
        header = SceneHeader(width=2, height=1, bands=1, band_names=("b0",))
        with pytest.raises(DomainError):
            SceneRaster(header, np.array([[[np.nan, 0.0]]], dtype=np.float32))


class TestTiling:
    def test_exact_division(self):
        grid = tile_scene(make_scene(96, 96), size=32)
        assert (grid.rows, grid.cols) == (3, 3)
        assert len(grid.tiles) == 9

    def test_edge_strips_dropped(self):
        grid = tile_scene(make_scene(100, 100), size=32)
        assert (grid.rows, grid.cols) == (3, 3)

    def test_too_small_scene(self):
        with pytest.raises(EmptyGridError):
            tile_scene(make_scene(20, 20), size=32)

    def test_minimum_size_enforced(self):
        with pytest.raises(DomainError):
            tile_scene(make_scene(), size=4)

    def test_tile_coverage_and_reassembly(self):
        scene = make_scene(100, 68, seed=3)
        grid = tile_scene(scene, size=32)
        block = reassemble(grid)
        assert np.array_equal(block, scene.values[:, : 2 * 32, : 3 * 32])

    def test_coverage_disjoint_union(self):
        scene = make_scene(64, 64, seed=4)
        grid = tile_scene(scene, size=32)
        seen = np.zeros((64, 64), dtype=int)
        for t in grid.tiles:
            seen[t.row * 32 : (t.row + 1) * 32, t.col * 32 : (t.col + 1) * 32] += 1
        assert (seen == 1).all()

    def test_nodata_tiles_flagged(self):
        scene = make_scene(64, 64, nodata=-9999.0)
        values = scene.values.copy()
        values[0, 0, 0] = -9999.0
        grid = tile_scene(SceneRaster(scene.header, values), size=32)
        flags = [t.contains_nodata for t in grid.tiles]
        assert flags == [True, False, False, False]


class TestPairing:
    def test_count_row_major(self):
        pre = tile_scene(make_scene(96, 96, seed=1))
        post = tile_scene(make_scene(96, 96, seed=2))
        pairs = pair_tiles(pre, post)
        assert len(pairs) == 9
        assert [(p.row, p.col) for p in pairs[:4]] == [(0, 0), (0, 1), (0, 2), (1, 0)]

    def test_shape_mismatch(self):
        pre = tile_scene(make_scene(96, 96))
        post = tile_scene(make_scene(96, 128))
        with pytest.raises(PairingError):
            pair_tiles(pre, post)

    def test_history_carried(self):
        pre = tile_scene(make_scene(96, 96, seed=1))
        post = tile_scene(make_scene(96, 96, seed=2))
        history = [tile_scene(make_scene(96, 96, seed=10 + i)) for i in range(3)]
        pairs = pair_tiles(pre, post, history)
        assert all(len(p.pre_history) == 3 for p in pairs)

    def test_nodata_pair_excluded(self):
        scene = make_scene(64, 64, nodata=-9999.0)
        values = scene.values.copy()
        values[0, 0, 0] = -9999.0
        pre = tile_scene(SceneRaster(scene.header, values))
        post = tile_scene(make_scene(64, 64, seed=9, nodata=-9999.0))
        pairs = pair_tiles(pre, post)
        assert [p.excluded for p in pairs] == [True, False, False, False]


class TestPgmExport:
    def read_pgm(self, path):
        raw = path.read_bytes()
        magic, dims, maxval, rest = raw.split(b"\n", 3)
        w, h = map(int, dims.split())
        assert magic == b"P5" and maxval == b"255"
        return np.frombuffer(rest, dtype=np.uint8).reshape(h, w)

    def test_endpoints(self, tmp_path):
        export_pgm(np.array([[0.0, 1.0]]), tmp_path / "m.pgm")
        assert self.read_pgm(tmp_path / "m.pgm").tolist() == [[0, 255]]

    def test_constant_maps_to_128(self, tmp_path):
        export_pgm(np.full((2, 2), 0.7), tmp_path / "m.pgm")
        assert (self.read_pgm(tmp_path / "m.pgm") == 128).all()

    def test_linear_midpoint_rounds_half_away(self, tmp_path):
        # 0.5 of the range scales to 127.5, which rounds away from zero to 128
        export_pgm(np.array([[0.0, 0.5, 1.0]]), tmp_path / "m.pgm")
        assert self.read_pgm(tmp_path / "m.pgm").tolist() == [[0, 128, 255]]

    def test_empty_rejected(self, tmp_path):
        with pytest.raises(DomainError):
            export_pgm(np.zeros((0, 3)), tmp_path / "m.pgm")

    def test_nan_renders_zero(self, tmp_path):
        export_pgm(np.array([[np.nan, 0.2, 0.4]]), tmp_path / "m.pgm")
        assert self.read_pgm(tmp_path / "m.pgm").tolist() == [[0, 0, 255]]


class TestTileType:
    def test_tile_shape_validated(self):
        with pytest.raises(DomainError):
            Tile(row=0, col=0, size=8, values=np.zeros((4, 8, 7), dtype=np.float32))
