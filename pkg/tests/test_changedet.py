import math

import numpy as np
import pytest

from tilechange.changedet import (
    ScoreMap,
    chi2_sf,
    cosine_distance,
    cva_score,
    embed_batch,
    embed_tile,
    lrc_score,
    pixel_cosine_score,
    score_scene,
    threshold_at_95,
)
from tilechange.errors import DegenerateError, DomainError, FormatError
from tilechange.preprocess import fit_normalization
from tilechange.raster import SceneHeader, SceneRaster, Tile, TilePair
from tilechange.vae import Checkpoint, EncoderConfig, VaeParams


def tile_of(values):
    values = np.asarray(values, dtype=np.float32)
    return Tile(row=0, col=0, size=values.shape[1], values=values)


def pair_of(pre, post, history=()):
    return TilePair(pre=tile_of(pre), post=tile_of(post), pre_history=tuple(tile_of(h) for h in history))


def scene_of(values, nodata=None):
    values = np.asarray(values, dtype=np.float32)
    header = SceneHeader(
        width=values.shape[2],
        height=values.shape[1],
        bands=values.shape[0],
        band_names=tuple(f"b{i}" for i in range(values.shape[0])),
        nodata_value=nodata,
    )
    return SceneRaster(header, values)


class TestCosineDistance:
    def test_identical_direction(self):
        assert cosine_distance([1.0, 2.0], [1.0, 2.0]) == 0.0
        assert cosine_distance([1.0, 2.0], [2.0, 4.0]) == pytest.approx(0.0, abs=1e-15)

    def test_orthogonal(self):
        assert cosine_distance([1.0, 0.0], [0.0, 1.0]) == 1.0

    def test_formula_value(self):
        assert cosine_distance([1.0, 1.0], [1.0, 0.0]) == pytest.approx(1 - 1 / math.sqrt(2), rel=1e-12)

    def test_zero_vector_rejected(self):
        with pytest.raises(DegenerateError):
            cosine_distance([0.0, 0.0], [1.0, 0.0])

    def test_range(self):
        rng = np.random.default_rng(0)
        for _ in range(50):
            d = cosine_distance(rng.normal(size=8), rng.normal(size=8))
            assert 0.0 <= d <= 2.0


class TestChi2Sf:
    def test_at_zero_full_tail(self):
        for k in (1, 2, 4, 8):
            assert chi2_sf(0.0, k) == 1.0

    def test_two_dof_closed_form(self):
        # with k = 2 the survival function is exp(-x/2)
        assert chi2_sf(2.0, 2) == pytest.approx(math.exp(-1.0), rel=1e-12)
        assert chi2_sf(5.0, 2) == pytest.approx(math.exp(-2.5), rel=1e-12)

    def test_strictly_decreasing(self):
        xs = np.linspace(0, 20, 100)
        vals = chi2_sf(xs, 4)
        assert (np.diff(vals) < 0).all()

    def test_domain_checks(self):
        with pytest.raises(DomainError):
            chi2_sf(-1.0, 2)
        with pytest.raises(DomainError):
            chi2_sf(1.0, 0)


class TestPixelCosine:
    def test_identical_tiles(self):
        rng = np.random.default_rng(1)
        v = rng.uniform(-1, 1, (4, 8, 8))
        assert pixel_cosine_score(pair_of(v, v)) == 0.0

    def test_scale_invariance_in_offset_space(self):
        rng = np.random.default_rng(2)
        u = rng.uniform(0, 1, (1, 4, 4))
        # post chosen so post + 1 = 2 (pre + 1)
        post = 2.0 * (u + 1.0) - 1.0
        assert pixel_cosine_score(pair_of(u, post)) == pytest.approx(0.0, abs=1e-12)

    def test_hand_example(self):
        u = np.array([1.0, 1.0, 1.0, 1.0]).reshape(4, 1, 1)
        v = np.array([1.0, 1.0, 1.0, 0.0]).reshape(4, 1, 1)
        # offset vectors (2,2,2,2) and (2,2,2,1): 1 - 14 / (4 * sqrt(13))
        expected = 1.0 - 14.0 / (4.0 * math.sqrt(13.0))
        assert pixel_cosine_score(pair_of(u, v)) == pytest.approx(expected, rel=1e-12)

    def test_degenerate_all_minus_one(self):
        v = -np.ones((2, 4, 4))
        with pytest.raises(DegenerateError):
            pixel_cosine_score(pair_of(v, np.zeros((2, 4, 4))))


class TestCva:
    def test_identical(self):
        rng = np.random.default_rng(3)
        v = rng.uniform(-1, 1, (4, 8, 8))
        assert cva_score(pair_of(v, v)) == 0.0

    def test_unit_shift_all_bands(self):
        pre = np.zeros((4, 8, 8))
        post = np.ones((4, 8, 8))
        assert cva_score(pair_of(pre, post)) == pytest.approx(2.0, rel=1e-12)

    def test_common_offset_cancels(self):
        rng = np.random.default_rng(4)
        pre = rng.uniform(-1, 1, (3, 8, 8))
        post = rng.uniform(-1, 1, (3, 8, 8))
        base = cva_score(pair_of(pre, post))
        shift = np.array([0.2, -0.1, 0.4]).reshape(3, 1, 1)
        shifted = cva_score(pair_of(pre + shift, post + shift))
        assert shifted == pytest.approx(base, rel=1e-6)

    def test_max_aggregate_option(self):
        pre = np.zeros((1, 2, 2))
        post = np.zeros((1, 2, 2))
        post[0, 0, 0] = 1.0
        assert cva_score(pair_of(pre, post), aggregate="mean") == pytest.approx(0.25)
        assert cva_score(pair_of(pre, post), aggregate="max") == pytest.approx(1.0)


class TestThreshold:
    def make_map(self, scores):
        arr = np.asarray(scores, dtype=np.float64).reshape(1, -1)
        return ScoreMap(rows=1, cols=arr.shape[1], scores=arr, method="CVA")

    def test_flags_top_five_percent(self):
        scores = np.arange(1.0, 101.0)
        smap = self.make_map(scores)
        flags, tau = threshold_at_95(scores, smap)
        assert tau == pytest.approx(95.05)
        assert flags.sum() == 5
        assert flags.ravel()[95:].all()

    def test_none_flagged_below(self):
        smap = self.make_map([0.1, 0.2, 0.3])
        flags, _ = threshold_at_95(np.linspace(1, 2, 50), smap)
        assert flags.sum() == 0

    def test_constant_nominal(self):
        smap = self.make_map([0.5, 0.7, 0.9])
        flags, tau = threshold_at_95(np.full(10, 0.7), smap)
        assert tau == 0.7
        assert flags.ravel().tolist() == [False, False, True]

    def test_empty_nominal_rejected(self):
        with pytest.raises(DomainError):
            threshold_at_95([], self.make_map([1.0]))

    def test_nan_tiles_never_flagged(self):
        smap = self.make_map([0.5, np.nan, 2.0])
        # tau = percentile([0.1, 0.2, 1.0], 95) = 0.2 + 0.9 * 0.8 = 0.92
        flags, tau = threshold_at_95([0.1, 0.2, 1.0], smap)
        assert tau == pytest.approx(0.92)
        assert flags.ravel().tolist() == [False, False, True]


class TestScoreMapIO:
    def test_round_trip_with_sentinels(self, tmp_path):
        scores = np.array([[0.5, np.nan], [1.5, 0.0]])
        smap = ScoreMap(rows=2, cols=2, scores=scores, method="IRMAD", config_tag="8-band", threshold=0.9)
        smap.save(tmp_path / "m.json")
        back = ScoreMap.load(tmp_path / "m.json")
        assert back.method == "IRMAD"
        assert back.config_tag == "8-band"
        assert back.threshold == 0.9
        np.testing.assert_array_equal(np.isnan(back.scores), np.isnan(scores))
        assert back.scores[0, 0] == 0.5

    def test_negative_scores_rejected(self):
        with pytest.raises(DomainError):
            ScoreMap(rows=1, cols=1, scores=np.array([[-0.1]]), method="CVA")

    def test_corrupt_file(self, tmp_path):
        (tmp_path / "bad.json").write_text("{not json")
        with pytest.raises(FormatError):
            ScoreMap.load(tmp_path / "bad.json")


def small_ckpt(bands=2, tile=16, seed=0):
    cfg = EncoderConfig(
        input_bands=bands,
        tile_size=tile,
        stage_channels=(4, 6, 8, 10),
        latent_dim=8,
        dilation_rates=(1, 2),
    )
    return Checkpoint(params=VaeParams.init(cfg, seed=seed))


class TestLrc:
    def test_identical_tiles_zero(self):
        ckpt = small_ckpt()
        rng = np.random.default_rng(5)
        v = rng.uniform(-1, 1, (2, 16, 16)).astype(np.float32)
        assert lrc_score(pair_of(v, v), ckpt) == 0.0

    def test_in_cosine_range(self):
        ckpt = small_ckpt()
        rng = np.random.default_rng(6)
        for _ in range(5):
            a = rng.uniform(-1, 1, (2, 16, 16))
            b = rng.uniform(-1, 1, (2, 16, 16))
            assert 0.0 <= lrc_score(pair_of(a, b), ckpt) <= 2.0

    def test_history_takes_minimum(self):
        ckpt = small_ckpt()
        rng = np.random.default_rng(7)
        post = rng.uniform(-1, 1, (2, 16, 16))
        far = rng.uniform(-1, 1, (2, 16, 16))
        p = pair_of(far, post, history=[far, post])  # post itself in history
        assert lrc_score(p, ckpt) == pytest.approx(0.0, abs=1e-12)

    def test_embedding_batch_independence(self):
        ckpt = small_ckpt()
        rng = np.random.default_rng(8)
        tiles = rng.uniform(-1, 1, (5, 2, 16, 16)).astype(np.float32)
        solo = embed_tile(tiles[2], ckpt)
        batched = embed_batch(tiles, ckpt)[2]
        np.testing.assert_allclose(solo, batched, rtol=1e-5, atol=1e-6)

    def test_embedding_length(self):
        ckpt = small_ckpt()
        emb = embed_tile(np.zeros((2, 16, 16), dtype=np.float32) + 0.1, ckpt)
        assert emb.shape == (8,)


class TestScoreScene:
    def build_pair(self, seed=0, size=48, bands=2, change=False):
        rng = np.random.default_rng(seed)
        pre = rng.uniform(0.1, 0.6, (bands, size, size)).astype(np.float32)
        post = pre.copy()
        if change:
            post[:, :16, :16] *= 0.3
        return scene_of(pre), scene_of(post + rng.normal(0, 0.005, post.shape).astype(np.float32))

    def test_grid_shape(self):
        pre, post = self.build_pair(size=96)
        norm = fit_normalization([pre, post])
        smap = score_scene(pre, post, "CVA", norm, tile_size=32)
        assert (smap.rows, smap.cols) == (3, 3)

    def test_identical_scenes_cva_zero(self):
        rng = np.random.default_rng(9)
        vals = rng.uniform(0.1, 0.6, (2, 32, 32)).astype(np.float32)
        scene = scene_of(vals)
        norm = fit_normalization([scene])
        smap = score_scene(scene, scene, "CVA", norm, tile_size=16)
        np.testing.assert_array_equal(smap.scores, 0.0)

    def test_unchanged_pair_scores_zero_for_every_method(self):
        rng = np.random.default_rng(14)
        vals = rng.uniform(0.1, 0.6, (2, 64, 64)).astype(np.float32)
        scene = scene_of(vals)
        norm = fit_normalization([scene])
        ckpt = small_ckpt()
        for method, tol in (("LRC", 0.0), ("COSINE", 0.0), ("CVA", 0.0), ("IRMAD", 1e-6)):
            smap = score_scene(scene, scene, method, norm, ckpt=ckpt, tile_size=16)
            assert np.nanmax(smap.scores) <= tol, method

    def test_all_methods_run_and_changed_region_scores_higher(self):
        pre, post = self.build_pair(seed=10, size=64, change=True)
        norm = fit_normalization([pre])
        ckpt = small_ckpt()
        for method in ("LRC", "COSINE", "CVA", "IRMAD"):
            smap = score_scene(pre, post, method, norm, ckpt=ckpt, tile_size=16)
            assert smap.scores.shape == (4, 4)
            changed = smap.scores[0, 0]
            rest = np.delete(smap.scores.ravel(), 0)
            assert changed > np.median(rest), method

    def test_lrc_requires_checkpoint(self):
        pre, post = self.build_pair()
        norm = fit_normalization([pre])
        with pytest.raises(DomainError):
            score_scene(pre, post, "LRC", norm)

    def test_deterministic_across_threads(self):
        pre, post = self.build_pair(seed=11, size=64, change=True)
        norm = fit_normalization([pre])
        ckpt = small_ckpt()
        for method in ("LRC", "COSINE", "CVA", "IRMAD"):
            a = score_scene(pre, post, method, norm, ckpt=ckpt, tile_size=16, threads=1)
            b = score_scene(pre, post, method, norm, ckpt=ckpt, tile_size=16, threads=4)
            np.testing.assert_array_equal(a.scores, b.scores)

    def test_nodata_tiles_excluded(self):
        pre, post = self.build_pair(seed=12, size=64)
        vals = post.values.copy()
        vals[:, 0, 0] = -9999.0
        header = SceneHeader(
            width=64, height=64, bands=2, band_names=("b0", "b1"), nodata_value=-9999.0
        )
        post_nd = SceneRaster(header, vals)
        pre_nd = SceneRaster(header, pre.values)
        norm = fit_normalization([pre_nd])
        smap = score_scene(pre_nd, post_nd, "CVA", norm, tile_size=16)
        assert np.isnan(smap.scores[0, 0])
        assert np.isfinite(np.delete(smap.scores.ravel(), 0)).all()

    def test_history_min_aggregation(self):
        pre, post = self.build_pair(seed=13, size=32)
        norm = fit_normalization([pre])
        # history containing the post scene itself drives scores to ~0
        smap = score_scene(pre, post, "CVA", norm, history=[pre, post], tile_size=16)
        np.testing.assert_allclose(smap.scores, 0.0, atol=1e-9)
