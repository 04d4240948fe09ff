import io
from pathlib import Path

import numpy as np
import pytest
from PIL import Image

from aui import synth
from aui.catalog import Period
from aui.errors import BandMissingError, GeometryError, InputError
from aui.raster import (
    BandRaster,
    CompositeImage,
    StretchSpec,
    canonical_band,
    compose_rgb,
    composite_filename,
    encode_jpeg_bytes,
    export_jpeg,
    export_png,
    harmonize,
    read_scene,
    round_half_away,
    to_reflectance,
)
from aui.tiff import write_tiff

from .reference_impls import oracle_block_means

DATA = Path(__file__).parent / "data"


def band(values, *, name="B8", pixel_size=10, nodata=0):
    arr = np.asarray(values, dtype=np.uint16)
    return BandRaster(
        band=name,
        width=arr.shape[1],
        height=arr.shape[0],
        pixel_size_m=pixel_size,
        values=arr,
        nodata_value=nodata,
    )


def scene_from_grids(r, g, b):
    return_scene = {
        "B4": band(r, name="B4"),
        "B3": band(g, name="B3"),
        "B2": band(b, name="B2"),
    }
    from aui.raster import SceneRaster

    return SceneRaster(bands=return_scene, scene_id="unit")


def uniform(value, shape=(4, 4)):
    return np.full(shape, value, dtype=np.uint16)


class TestCanonicalBand:
    def test_normalises_spellings(self):
        assert canonical_band("B04") == "B4"
        assert canonical_band("b8") == "B8"
        assert canonical_band("B08") == "B8"
        assert canonical_band("b8a") == "B8A"
        assert canonical_band("B11") == "B11"

    def test_rejects_garbage(self):
        with pytest.raises(InputError):
            canonical_band("NIR")


class TestReadScene:
    def test_identity_read_of_known_grid(self, tmp_path):
        dns = np.array(
            [[0, 1, 2, 3], [4, 5, 6, 7], [8, 9, 10, 11], [12, 13, 14, 65535]],
            dtype=np.uint16,
        )
        write_tiff(tmp_path / "B8.tif", dns)
        scene = read_scene({"B8": str(tmp_path / "B8.tif")}, ("B8",), scene_id="s1")
        loaded = scene.band("B8")
        assert np.array_equal(loaded.values, dns)
        assert loaded.pixel_size_m == 10
        assert loaded.nodata_value == 0

    def test_endianness_symmetry(self, tmp_path):
        dns = uniform(1234, (6, 6))
        write_tiff(tmp_path / "le.tif", dns, byte_order="<")
        write_tiff(tmp_path / "be.tif", dns, byte_order=">")
        a = read_scene({"B8": str(tmp_path / "le.tif")}, ("B8",))
        b = read_scene({"B8": str(tmp_path / "be.tif")}, ("B8",))
        assert np.array_equal(a.band("B8").values, b.band("B8").values)

    def test_missing_band_named_in_error(self, tmp_path):
        write_tiff(tmp_path / "B8.tif", uniform(5))
        with pytest.raises(BandMissingError, match="B11"):
            read_scene({"B8": str(tmp_path / "B8.tif")}, ("B8", "B11"))

    def test_multisample_default_band_order(self, tmp_path):
        # 13 samples in the conventional order; B2 is sample 1, B8 sample 7.
        rng = np.random.default_rng(0)
        stack = rng.integers(1, 60000, size=(8, 8, 13), dtype=np.uint16)
        write_tiff(tmp_path / "scene.tif", stack)
        path = str(tmp_path / "scene.tif")
        scene = read_scene({"B2": path, "B8": path}, ("B2", "B8"))
        assert np.array_equal(scene.band("B2").values, stack[:, :, 1])
        assert np.array_equal(scene.band("B8").values, stack[:, :, 7])

    def test_multisample_explicit_sample_index(self, tmp_path):
        stack = np.stack(
            [uniform(100, (4, 4)), uniform(200, (4, 4)), uniform(300, (4, 4))], axis=-1
        )
        write_tiff(tmp_path / "scene.tif", stack)
        ref = {"path": str(tmp_path / "scene.tif"), "sample": 2}
        scene = read_scene({"B11": ref}, ("B11",))
        assert np.array_equal(scene.band("B11").values, uniform(300, (4, 4)))

    def test_sample_index_out_of_range(self, tmp_path):
        stack = np.zeros((4, 4, 3), dtype=np.uint16) + 9
        write_tiff(tmp_path / "scene.tif", stack)
        ref = {"path": str(tmp_path / "scene.tif"), "sample": 7}
        with pytest.raises(BandMissingError):
            read_scene({"B11": ref}, ("B11",))

    def test_extent_mismatch_rejected(self, tmp_path):
        write_tiff(tmp_path / "B8.tif", uniform(5, (8, 8)))  # 10 m -> 80 m
        write_tiff(tmp_path / "B11.tif", uniform(5, (8, 8)))  # 20 m -> 160 m
        with pytest.raises(GeometryError):
            read_scene(
                {"B8": str(tmp_path / "B8.tif"), "B11": str(tmp_path / "B11.tif")},
                ("B8", "B11"),
            )


class TestReflectance:
    def test_scale_and_nodata(self):
        grid = to_reflectance(band([[0, 10000], [2500, 12000]]))
        assert not grid.valid[0, 0]  # DN 0 is nodata
        assert grid.values[0, 1] == 1.0
        assert grid.values[1, 0] == 0.25
        assert grid.values[1, 1] == pytest.approx(1.2)
        assert grid.valid_count == 3


class TestHarmonize:
    def test_constant_grid_stays_constant(self):
        fine = band(uniform(7, (4, 4)), name="B8", pixel_size=10)
        coarse = band(uniform(9, (2, 2)), name="B11", pixel_size=20)
        g8, g11 = harmonize(fine, coarse)
        assert np.array_equal(g8.values, np.full((2, 2), 7.0))
        assert np.array_equal(g11.values, np.full((2, 2), 9.0))

    def test_block_mean_arithmetic(self):
        fine = band([[10, 20], [30, 40]], name="B8", pixel_size=10)
        coarse = band([[5]], name="B11", pixel_size=20)
        g8, _ = harmonize(fine, coarse)
        assert g8.values[0, 0] == 25.0

    def test_argument_order_preserved(self):
        fine = band([[10, 20], [30, 40]], name="B8", pixel_size=10)
        coarse = band([[5]], name="B11", pixel_size=20)
        g11, g8 = harmonize(coarse, fine)
        assert g11.values[0, 0] == 5.0
        assert g8.values[0, 0] == 25.0

    def test_random_grids_match_bruteforce_oracle(self):
        rng = np.random.default_rng(17)
        for _ in range(10):
            values = rng.integers(0, 60000, size=(20, 20), dtype=np.uint16)
            nodata_mask = rng.random((20, 20)) < 0.2
            values[nodata_mask] = 0
            fine = band(values, name="B8", pixel_size=10)
            coarse = band(
                rng.integers(1, 60000, size=(10, 10), dtype=np.uint16),
                name="B11",
                pixel_size=20,
            )
            g8, _ = harmonize(fine, coarse)
            expected, expected_valid = oracle_block_means(
                values.tolist(), (values != 0).tolist(), 2
            )
            assert np.allclose(g8.values, np.array(expected), rtol=0, atol=0)
            assert np.array_equal(g8.valid, np.array(expected_valid))

    def test_mean_conservation_on_fully_valid_grid(self):
        rng = np.random.default_rng(3)
        values = rng.integers(1, 60000, size=(24, 24), dtype=np.uint16)
        fine = band(values, name="B8", pixel_size=10)
        coarse = band(
            rng.integers(1, 60000, size=(12, 12), dtype=np.uint16),
            name="B11", pixel_size=20,
        )
        g8, _ = harmonize(fine, coarse)
        assert g8.values.mean() == pytest.approx(values.mean(), rel=1e-9)

    def test_all_nodata_block_becomes_nodata(self):
        values = np.array([[0, 0, 5, 5], [0, 0, 5, 5], [7, 7, 0, 0], [7, 7, 0, 0]],
                          dtype=np.uint16)
        fine = band(values, name="B8", pixel_size=10)
        coarse = band(uniform(1, (2, 2)), name="B11", pixel_size=20)
        g8, _ = harmonize(fine, coarse)
        assert not g8.valid[0, 0]
        assert g8.valid[0, 1] and g8.values[0, 1] == 5.0
        assert g8.valid[1, 0] and g8.values[1, 0] == 7.0
        assert not g8.valid[1, 1]

    def test_shape_mismatch_is_geometry_error(self):
        fine = band(uniform(1, (6, 6)), name="B8", pixel_size=10)
        coarse = band(uniform(1, (2, 2)), name="B11", pixel_size=20)
        with pytest.raises(GeometryError):
            harmonize(fine, coarse)

    def test_equal_resolution_passthrough(self):
        a = band(uniform(4, (3, 3)), name="B8", pixel_size=20)
        b = band(uniform(6, (3, 3)), name="B11", pixel_size=20)
        ga, gb = harmonize(a, b)
        assert np.array_equal(ga.values, np.full((3, 3), 4.0))
        assert np.array_equal(gb.values, np.full((3, 3), 6.0))


class TestComposeRgb:
    def test_upper_clip_saturates(self):
        scene = scene_from_grids(uniform(3000), uniform(3000), uniform(3000))
        img = compose_rgb(scene)
        assert (img.rgb == 255).all()

    def test_midpoint_rounds_half_away_from_zero(self):
        scene = scene_from_grids(uniform(1500), uniform(1500), uniform(1500))
        img = compose_rgb(scene)
        assert (img.rgb == 128).all()

    def test_nodata_renders_black(self):
        r = uniform(2000)
        r[0, 0] = 0
        scene = scene_from_grids(r, uniform(2000), uniform(2000))
        img = compose_rgb(scene)
        assert tuple(img.rgb[0, 0]) == (0, 0, 0)
        assert (img.rgb[1, 1] > 0).all()

    def test_monotone_per_channel(self):
        rng = np.random.default_rng(5)
        dns = np.sort(rng.integers(1, 4000, size=64).astype(np.uint16))
        grid = dns.reshape(8, 8)
        scene = scene_from_grids(grid, grid, grid)
        img = compose_rgb(scene)
        flat = img.rgb[:, :, 0].reshape(-1)
        assert (np.diff(flat.astype(int)) >= 0).all()

    def test_percentile_stretch_behind_flag(self):
        rng = np.random.default_rng(6)
        grid = rng.integers(500, 1200, size=(8, 8), dtype=np.uint16)
        scene = scene_from_grids(grid, grid, grid)
        fixed = compose_rgb(scene)
        stretched = compose_rgb(scene, stretch=StretchSpec(mode="percentile"))
        # A dim scene uses the full byte range only under percentile stretch.
        assert fixed.rgb.max() < 128
        assert stretched.rgb.max() == 255

    def test_missing_visible_band(self):
        from aui.raster import SceneRaster

        scene = SceneRaster(bands={"B4": band(uniform(1), name="B4")}, scene_id="x")
        with pytest.raises(BandMissingError, match="B3"):
            compose_rgb(scene)

    def test_stretch_validation(self):
        with pytest.raises(InputError):
            StretchSpec(lo=0.5, hi=0.2)
        with pytest.raises(InputError):
            StretchSpec(mode="magic")


class TestRounding:
    def test_half_away_from_zero(self):
        assert round_half_away(np.array([0.5, 1.5, 2.4, -0.5])).tolist() == [
            1.0, 2.0, 2.0, -1.0,
        ]


class TestJpegExport:
    def make_smooth_composite(self):
        # Smooth gradient fixture: JPEG loss stays tiny away from hard edges.
        x = np.linspace(20, 230, 64)
        grid = np.tile(x, (64, 1))
        rgb = np.stack([grid, grid * 0.9, grid * 0.8], axis=-1).astype(np.uint8)
        return CompositeImage(width=64, height=64, rgb=rgb)

    def test_roundtrip_deviation_bounded(self, tmp_path):
        img = self.make_smooth_composite()
        path = export_jpeg(img, tmp_path / "smooth.jpg")
        back = np.array(Image.open(path)).astype(int)
        assert np.abs(back - img.rgb.astype(int)).max() <= 6

    def test_export_deterministic_and_matches_golden(self, tmp_path):
        spec = synth.SynthSpec(
            built_up_fraction=0.5, vegetation_fraction=0.3,
            cloud_fraction=0.1, seed=20, size=64,
        )
        scene, _ = synth.generate(spec)
        data1 = encode_jpeg_bytes(compose_rgb(scene))
        data2 = encode_jpeg_bytes(compose_rgb(scene))
        assert data1 == data2
        assert data1 == (DATA / "golden_composite.jpg").read_bytes()

    def test_empty_composite_rejected(self):
        img = CompositeImage(width=0, height=0, rgb=np.zeros((0, 0, 3), dtype=np.uint8))
        with pytest.raises(InputError):
            encode_jpeg_bytes(img)

    def test_png_sibling_is_lossless(self, tmp_path):
        img = self.make_smooth_composite()
        path = export_png(img, tmp_path / "x.png")
        back = np.array(Image.open(path))
        assert np.array_equal(back, img.rgb)

    def test_filename_convention(self):
        assert composite_filename(Period.from_label("2016-01")) == "sentinel_2016-01-01.jpg"
        assert composite_filename(Period.from_label("2016-07")) == "sentinel_2016-07-01.jpg"
