import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from aui import synth
from aui.catalog import CatalogSource, Period
from aui.errors import BandMissingError, NoValidPixelsError
from aui.geogrid import decode
from aui.indices import index_series, ndbi
from aui.raster import BandRaster, SceneRaster

from .reference_impls import oracle_ndbi

CELL = decode("tdr70")


def make_scene(b8_values, b11_values, scene_id="unit"):
    b8 = np.asarray(b8_values, dtype=np.uint16)
    b11 = np.asarray(b11_values, dtype=np.uint16)
    bands = {
        "B8": BandRaster(
            band="B8", width=b8.shape[1], height=b8.shape[0],
            pixel_size_m=10, values=b8,
        ),
        "B11": BandRaster(
            band="B11", width=b11.shape[1], height=b11.shape[0],
            pixel_size_m=20, values=b11,
        ),
    }
    return SceneRaster(bands=bands, scene_id=scene_id)


def equal_res_scene(b8_values, b11_values):
    """Both bands on one 20 m grid, for exact elementwise properties."""
    b8 = np.asarray(b8_values, dtype=np.uint16)
    b11 = np.asarray(b11_values, dtype=np.uint16)
    bands = {
        "B8": BandRaster(
            band="B8", width=b8.shape[1], height=b8.shape[0],
            pixel_size_m=20, values=b8,
        ),
        "B11": BandRaster(
            band="B11", width=b11.shape[1], height=b11.shape[0],
            pixel_size_m=20, values=b11,
        ),
    }
    return SceneRaster(bands=bands, scene_id="eq")


def test_equal_bands_give_zero():
    scene = equal_res_scene(np.full((4, 4), 500), np.full((4, 4), 500))
    result = ndbi(scene)
    assert (result.values[result.valid] == 0.0).all()
    assert result.scene_mean == 0.0
    assert result.valid_pixel_count == 16


def test_simple_arithmetic():
    scene = equal_res_scene([[100]], [[300]])
    result = ndbi(scene)
    assert result.values[0, 0] == 0.5
    assert result.scene_mean == 0.5


def test_random_scenes_match_scalar_oracle():
    rng = np.random.default_rng(21)
    for _ in range(5):
        b8 = rng.integers(0, 9000, size=(50, 50), dtype=np.uint16)
        b11 = rng.integers(0, 9000, size=(25, 25), dtype=np.uint16)
        scene = make_scene(b8, b11)
        result = ndbi(scene)
        grid, valid, mean, count = oracle_ndbi(b8.tolist(), 0, b11.tolist(), 0)
        assert np.array_equal(result.valid, np.array(valid))
        assert np.allclose(
            result.values[result.valid],
            np.array(grid)[np.array(valid)],
            rtol=1e-12, atol=0,
        )
        assert result.scene_mean == pytest.approx(mean, rel=1e-12)
        assert result.valid_pixel_count == count


def test_nodata_pixels_excluded_not_zeroed():
    b8 = np.array([[0, 100], [100, 100]])  # one nodata NIR pixel
    b11 = np.array([[300, 300], [300, 300]])
    scene = equal_res_scene(b8, b11)
    result = ndbi(scene)
    assert result.valid_pixel_count == 3
    assert not result.valid[0, 0]
    assert result.scene_mean == 0.5  # the masked pixel does not drag the mean


def test_zero_sum_pixel_invalid():
    # SWIR + NIR = 0 only when both are 0, which is nodata anyway; use the
    # nodata-nodata case to pin the behaviour.
    scene = equal_res_scene([[0, 200]], [[0, 600]])
    result = ndbi(scene)
    assert result.valid_pixel_count == 1
    assert result.values[0, 1] == 0.5


def test_all_invalid_raises():
    scene = equal_res_scene(np.zeros((3, 3)), np.zeros((3, 3)))
    with pytest.raises(NoValidPixelsError):
        ndbi(scene)


def test_missing_band_raises():
    b8 = BandRaster(band="B8", width=2, height=2, pixel_size_m=10,
                    values=np.ones((2, 2), dtype=np.uint16))
    scene = SceneRaster(bands={"B8": b8}, scene_id="x")
    with pytest.raises(BandMissingError, match="B11"):
        ndbi(scene)


def test_scale_invariance_exact():
    rng = np.random.default_rng(4)
    b8 = rng.integers(1, 20000, size=(16, 16), dtype=np.uint16)
    b11 = rng.integers(1, 20000, size=(16, 16), dtype=np.uint16)
    base = ndbi(equal_res_scene(b8, b11))
    for c in (2, 3):
        scaled = ndbi(equal_res_scene(b8 * c, b11 * c))
        assert np.array_equal(scaled.values, base.values)
        assert scaled.scene_mean == base.scene_mean


def test_antisymmetry_exact():
    rng = np.random.default_rng(6)
    b8 = rng.integers(1, 9000, size=(32, 32), dtype=np.uint16)
    b11 = rng.integers(1, 9000, size=(16, 16), dtype=np.uint16)
    forward = ndbi(make_scene(b8, b11))
    # Swap the roles: the 10 m grid now plays SWIR and vice versa; the
    # harmonized pair is exactly exchanged.
    swapped_bands = {
        "B11": BandRaster(band="B11", width=32, height=32, pixel_size_m=10, values=b8),
        "B8": BandRaster(band="B8", width=16, height=16, pixel_size_m=20, values=b11),
    }
    backward = ndbi(SceneRaster(bands=swapped_bands, scene_id="swap"))
    assert np.array_equal(backward.values, -forward.values)
    assert backward.scene_mean == -forward.scene_mean


@given(
    nir=st.integers(min_value=0, max_value=20000),
    swir=st.integers(min_value=0, max_value=20000),
)
@settings(max_examples=200, deadline=None)
def test_bounds_property(nir, swir):
    scene = equal_res_scene([[nir]], [[swir]])
    if nir == 0 or swir == 0:  # DN 0 is nodata, so the lone pixel is invalid
        with pytest.raises(NoValidPixelsError):
            ndbi(scene)
        return
    result = ndbi(scene)
    assert result.valid_pixel_count == 1
    assert -1.0 <= result.values[0, 0] <= 1.0


def test_mean_within_pixel_range():
    rng = np.random.default_rng(11)
    b8 = rng.integers(1, 9000, size=(20, 20), dtype=np.uint16)
    b11 = rng.integers(1, 9000, size=(20, 20), dtype=np.uint16)
    result = ndbi(equal_res_scene(b8, b11))
    values = result.values[result.valid]
    assert values.min() <= result.scene_mean <= values.max()


class TestIndexSeries:
    def corpus(self, tmp_path, periods, specs):
        builder = lambda code, period, index, count: specs[index]
        synth.write_corpus(tmp_path, ["tdr70"], periods, spec_builder=builder)
        return CatalogSource.local(tmp_path)

    def test_two_periods_ordered(self, tmp_path):
        periods = Period.range_inclusive("2016-01", "2016-07")
        specs = [
            synth.SynthSpec(0.3, 0.7, seed=1),
            synth.SynthSpec(0.6, 0.4, seed=2),
        ]
        source = self.corpus(tmp_path, periods, specs)
        series = index_series(CELL, reversed(periods), source)
        assert [e.period.label for e in series.entries] == ["2016-01", "2016-07"]
        assert series.gaps == [] and series.failures == []

    def test_gap_period_flagged_and_skipped(self, tmp_path):
        periods = Period.range_inclusive("2016-01", "2017-01")
        specs = [synth.SynthSpec(0.3, 0.7, seed=i) for i in range(3)]
        source = self.corpus(tmp_path, periods, specs)
        wanted = Period.range_inclusive("2016-01", "2017-07")  # 2017-07 missing
        series = index_series(CELL, wanted, source)
        assert [p.label for p in series.gaps] == ["2017-07"]
        assert len(series.entries) == 3

    def test_unreadable_band_flagged_row_continues(self, tmp_path):
        periods = Period.range_inclusive("2016-01", "2016-07")
        specs = [synth.SynthSpec(0.3, 0.7, seed=1), synth.SynthSpec(0.6, 0.4, seed=2)]
        source = self.corpus(tmp_path, periods, specs)
        (tmp_path / "scenes" / "tdr70" / "2016-01" / "B11.tif").unlink()
        series = index_series(CELL, periods, source)
        assert len(series.entries) == 1
        assert series.entries[0].period.label == "2016-07"
        assert len(series.failures) == 1
        assert series.failures[0][0].label == "2016-01"

    def test_urbanizing_ramp_strictly_increases(self, tmp_path):
        periods = Period.range_inclusive("2016-01", "2020-07")
        fractions = np.linspace(0.1, 0.9, 10)
        specs = [
            synth.SynthSpec(float(f), float(1 - f), seed=300 + i)
            for i, f in enumerate(fractions)
        ]
        source = self.corpus(tmp_path, periods, specs)
        series = index_series(CELL, periods, source)
        means = [e.result.scene_mean for e in series.entries]
        assert len(means) == 10
        assert all(b > a for a, b in zip(means, means[1:]))
