import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tilechange.errors import DegenerateError, DomainError
from tilechange.preprocess import (
    DEFAULT_EPSILON,
    NormalizationParams,
    SpectralAlignParams,
    apply_lognorm,
    apply_spectral_alignment,
    fit_ma_regression,
    fit_normalization,
    load_params,
    lognorm_values,
    percentile,
    save_params,
)
from tilechange.raster import SceneHeader, SceneRaster, Tile


def scene_from(values, nodata=None):
    values = np.asarray(values, dtype=np.float32)
    header = SceneHeader(
        width=values.shape[2],
        height=values.shape[1],
        bands=values.shape[0],
        band_names=tuple(f"b{i}" for i in range(values.shape[0])),
        nodata_value=nodata,
    )
    return SceneRaster(header, values)


class TestPercentile:
    def test_interpolated_rank(self):
        # rank 0.95 * 99 = 94.05 lies between sorted values 95 and 96
        assert percentile(np.arange(1, 101), 95) == pytest.approx(95.05, abs=1e-12)

    def test_single_value(self):
        assert percentile([7.25], 33.0) == 7.25

    def test_midpoint(self):
        assert percentile([1.0, 3.0], 50) == 2.0

    def test_extremes_are_min_max(self):
        rng = np.random.default_rng(5)
        v = rng.normal(size=101)
        assert percentile(v, 0) == v.min()
        assert percentile(v, 100) == v.max()

    def test_empty_rejected(self):
        with pytest.raises(DomainError):
            percentile([], 50)

    def test_out_of_range_rank(self):
        with pytest.raises(DomainError):
            percentile([1.0], 101)


class TestMaRegression:
    def test_exact_linear_data(self):
        x = np.linspace(0, 1, 50)
        alpha, beta = fit_ma_regression(x, 2 * x + 1)
        assert alpha == pytest.approx(2.0, rel=1e-12)
        assert beta == pytest.approx(1.0, rel=1e-12)

    def test_identity_line(self):
        x = np.linspace(-3, 5, 40)
        alpha, beta = fit_ma_regression(x, x)
        assert alpha == pytest.approx(1.0, rel=1e-12)
        assert beta == pytest.approx(0.0, abs=1e-12)

    def test_reciprocal_slopes_match_eigenvector_oracle(self):
        rng = np.random.default_rng(11)
        x = rng.normal(size=500)
        y = 0.6 * x + rng.normal(scale=0.4, size=500)
        a_yx, _ = fit_ma_regression(x, y)
        a_xy, _ = fit_ma_regression(y, x)
        assert a_yx * a_xy == pytest.approx(1.0, abs=1e-10)
        # oracle: slope of the leading eigenvector of the 2x2 covariance
        cov = np.cov(np.stack([x, y]), ddof=1)
        evals, evecs = np.linalg.eigh(cov)
        lead = evecs[:, np.argmax(evals)]
        assert a_yx == pytest.approx(lead[1] / lead[0], rel=1e-10)

    def test_too_few_samples(self):
        with pytest.raises(DomainError):
            fit_ma_regression([1.0, 2.0], [1.0, 2.0])

    def test_zero_covariance(self):
        x = np.array([1.0, 2.0, 3.0, 4.0])
        y = np.array([5.0, 5.0, 5.0, 5.0])
        with pytest.raises(DegenerateError):
            fit_ma_regression(x, y)


class TestSpectralAlignment:
    def test_identity_transform(self):
        scene = scene_from(np.random.default_rng(0).uniform(0, 1, (4, 8, 8)))
        out = apply_spectral_alignment(scene, SpectralAlignParams.identity(4))
        assert np.array_equal(out.values, scene.values)

    def test_gain_offset_arithmetic(self):
        scene = scene_from(np.full((1, 2, 2), 0.3))
        params = SpectralAlignParams(alpha=np.array([2.0]), beta=np.array([0.1]))
        out = apply_spectral_alignment(scene, params)
        np.testing.assert_allclose(out.values, 0.7, rtol=1e-6)

    def test_nodata_passthrough(self):
        vals = np.full((1, 2, 2), 0.3, dtype=np.float32)
        vals[0, 0, 0] = -9999.0
        scene = scene_from(vals, nodata=-9999.0)
        params = SpectralAlignParams(alpha=np.array([2.0]), beta=np.array([0.1]))
        out = apply_spectral_alignment(scene, params)
        assert out.values[0, 0, 0] == -9999.0

    def test_band_count_mismatch(self):
        scene = scene_from(np.zeros((2, 2, 2)) + 0.5)
        with pytest.raises(DomainError):
            apply_spectral_alignment(scene, SpectralAlignParams.identity(3))


class TestFitNormalization:
    def test_constructed_log_percentiles(self):
        # values exp(k) - eps for k in 0..100 make the log domain exactly 0..100,
        # so P1 = 1.0 and P99 = 99.0 by linear interpolation
        eps = DEFAULT_EPSILON
        k = np.arange(101, dtype=np.float64)
        logs = np.log(np.maximum(np.exp(k) - eps, 0.0) + eps)
        assert percentile(logs, 1) == pytest.approx(1.0, abs=1e-9)
        assert percentile(logs, 99) == pytest.approx(99.0, abs=1e-9)

    def test_fit_on_scene_matches_construction(self):
        eps = DEFAULT_EPSILON
        k = np.arange(101, dtype=np.float64)
        vals = (np.exp(k / 10.0) - eps).reshape(1, 1, 101)  # scaled to stay in float32 range
        params = fit_normalization([scene_from(vals)], epsilon=eps)
        assert params.p1[0] == pytest.approx(0.1, abs=1e-5)
        assert params.p99[0] == pytest.approx(9.9, abs=1e-5)

    def test_constant_band_degenerate(self):
        with pytest.raises(DegenerateError):
            fit_normalization([scene_from(np.full((1, 4, 4), 0.5))])

    def test_pooling_equals_concatenation(self):
        rng = np.random.default_rng(3)
        a = rng.uniform(0, 1, (2, 4, 8))
        b = rng.uniform(0, 1, (2, 4, 8))
        two = fit_normalization([scene_from(a), scene_from(b)])
        merged = fit_normalization([scene_from(np.concatenate([a, b], axis=2))])
        np.testing.assert_array_equal(two.p1, merged.p1)
        np.testing.assert_array_equal(two.p99, merged.p99)

    def test_nodata_excluded_from_fit(self):
        vals = np.random.default_rng(4).uniform(0.1, 1, (1, 8, 8)).astype(np.float32)
        withnd = vals.copy()
        withnd[0, 0, :4] = -9999.0
        fit_clean = fit_normalization([scene_from(vals[:, :, :])])
        # removing pixels changes percentiles, so just check sentinel is ignored:
        fit_nd = fit_normalization([scene_from(withnd, nodata=-9999.0)])
        ref = fit_normalization([scene_from(vals.reshape(1, 8, 8))])
        assert fit_clean.p1[0] == ref.p1[0]
        assert fit_nd.p1[0] != pytest.approx(np.log(0.0 + 1e-6))


class TestApplyLognorm:
    def params(self):
        return NormalizationParams(epsilon=1e-6, p1=np.array([-2.0]), p99=np.array([1.0]))

    def tile_of(self, value):
        return Tile(row=0, col=0, size=8, values=np.full((1, 8, 8), value, dtype=np.float32))

    def test_lower_anchor(self):
        p = self.params()
        t = apply_lognorm(self.tile_of(math.exp(-2.0) - 1e-6), p)
        np.testing.assert_allclose(t.values, -1.0, atol=1e-6)

    def test_upper_anchor(self):
        p = self.params()
        t = apply_lognorm(self.tile_of(math.exp(1.0) - 1e-6), p)
        np.testing.assert_allclose(t.values, 1.0, atol=1e-6)

    def test_log_midpoint_maps_to_zero(self):
        p = self.params()
        t = apply_lognorm(self.tile_of(math.exp(-0.5) - 1e-6), p)
        np.testing.assert_allclose(t.values, 0.0, atol=1e-6)

    def test_clipped_to_unit_interval(self):
        p = self.params()
        hi = apply_lognorm(self.tile_of(100.0), p)
        lo = apply_lognorm(self.tile_of(0.0), p)
        assert hi.values.max() == 1.0
        assert lo.values.min() == -1.0

    @settings(max_examples=50, deadline=None)
    @given(st.floats(min_value=0.0, max_value=10.0), st.floats(min_value=0.0, max_value=10.0))
    def test_monotone_and_bounded(self, a, b):
        p = self.params()
        va = lognorm_values(np.full((1, 1, 1), a), p)[0, 0, 0]
        vb = lognorm_values(np.full((1, 1, 1), b), p)[0, 0, 0]
        assert -1.0 <= va <= 1.0 and -1.0 <= vb <= 1.0
        if a < b:
            assert va <= vb


class TestArchive:
    def test_round_trip_exact(self, tmp_path):
        rng = np.random.default_rng(8)
        align = SpectralAlignParams(alpha=rng.uniform(0.5, 2, 4), beta=rng.normal(size=4))
        norm = NormalizationParams(epsilon=1e-6, p1=rng.normal(size=4), p99=rng.normal(size=4) + 10)
        save_params(tmp_path / "params.json", align, norm)
        align2, norm2 = load_params(tmp_path / "params.json")
        np.testing.assert_array_equal(align2.alpha, align.alpha)
        np.testing.assert_array_equal(align2.beta, align.beta)
        np.testing.assert_array_equal(norm2.p1, norm.p1)
        np.testing.assert_array_equal(norm2.p99, norm.p99)
        assert norm2.epsilon == norm.epsilon

    def test_p99_must_exceed_p1(self):
        with pytest.raises(DegenerateError):
            NormalizationParams(epsilon=1e-6, p1=np.array([1.0]), p99=np.array([1.0]))
