import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from lstfusion.geoio import read_archive, read_geotiff, write_archive, write_geotiff
from lstfusion.raster import (
    GridSpec,
    Raster,
    block_average,
    fill_gaps_adaptive,
    gaussian_kernel,
    gaussian_smooth,
    resample_bicubic,
)


def grid(h, w, px=10.0):
    return GridSpec(w, h, px, 500000.0, 5300000.0)


def brute_block_mean(v, f):
    h, w = v.shape
    out = np.zeros((h // f, w // f))
    for i in range(h // f):
        for j in range(w // f):
            tot = 0.0
            for a in range(f):
                for b in range(f):
                    tot += v[i * f + a, j * f + b]
            out[i, j] = tot / (f * f)
    return out


def brute_fill(values, mask):
    """Expand a centred window one ring at a time until a valid pixel shows up."""
    h, w = values.shape
    out = values.copy()
    for r in range(h):
        for c in range(w):
            if mask[r, c]:
                continue
            rad = 1
            while True:
                vals = [
                    values[i, j]
                    for i in range(max(0, r - rad), min(h, r + rad + 1))
                    for j in range(max(0, c - rad), min(w, c + rad + 1))
                    if mask[i, j]
                ]
                if vals:
                    out[r, c] = sum(vals) / len(vals)
                    break
                rad += 1
    return out


class TestGridSpec:
    def test_rejects_bad_dims(self):
        with pytest.raises(ValueError):
            GridSpec(0, 5, 10.0)
        with pytest.raises(ValueError):
            GridSpec(5, 5, 0.0)

    def test_coarsen_refine(self):
        g = grid(96, 96)
        assert g.coarsen(3).refine(3) == g


class TestBlockAverage:
    def test_constant(self):
        r = Raster(grid(3, 3), np.full((3, 3), 5.0))
        assert block_average(r, 3).values[0, 0, 0] == 5.0

    def test_one_to_nine(self):
        r = Raster(grid(3, 3), np.arange(1.0, 10.0).reshape(3, 3))
        assert block_average(r, 3).values[0, 0, 0] == pytest.approx(5.0)

    def test_patch_sizes(self):
        r = Raster(grid(96, 96), np.random.default_rng(0).normal(size=(96, 96)))
        out = block_average(r, 3)
        assert out.grid.shape == (32, 32)
        assert out.grid.pixel_size == 30.0

    def test_matches_brute_force(self):
        v = np.random.default_rng(1).normal(size=(12, 18))
        out = block_average(Raster(grid(12, 18), v), 3).values[0]
        np.testing.assert_allclose(out, brute_block_mean(v, 3), atol=1e-12)

    def test_indivisible(self):
        with pytest.raises(ValueError, match="divisible"):
            block_average(Raster(grid(10, 9), np.zeros((10, 9))), 3)

    def test_masked(self):
        m = np.ones((3, 3), bool)
        m[1, 1] = False
        with pytest.raises(ValueError, match="valid"):
            block_average(Raster(grid(3, 3), np.zeros((3, 3)), m), 3)

    @settings(max_examples=30, deadline=None)
    @given(a=st.sampled_from([1, 2, 3]), b=st.sampled_from([1, 2, 3]), seed=st.integers(0, 2**16))
    def test_composition(self, a, b, seed):
        n = 36
        r = Raster(grid(n, n), np.random.default_rng(seed).normal(size=(n, n)))
        two = block_average(block_average(r, a), b)
        one = block_average(r, a * b)
        np.testing.assert_allclose(two.values, one.values, atol=1e-6)


class TestBicubic:
    def test_constant(self):
        src = Raster(grid(8, 8, 30.0), np.full((8, 8), 290.0))
        out = resample_bicubic(src, grid(24, 24, 10.0))
        np.testing.assert_allclose(out.values, 290.0, atol=1e-9)

    def test_identity(self):
        v = np.random.default_rng(2).normal(size=(10, 7))
        src = Raster(grid(10, 7), v)
        out = resample_bicubic(src, src.grid)
        np.testing.assert_allclose(out.values[0], v, atol=1e-6)

    def test_ramp_upsampling(self):
        g = grid(20, 20, 30.0)
        fine = g.refine(3)

        def ramp(gr):
            x = gr.origin_x + (np.arange(gr.width) + 0.5) * gr.pixel_size - gr.origin_x
            y = gr.origin_y - (np.arange(gr.height) + 0.5) * gr.pixel_size - gr.origin_y
            xx, yy = np.meshgrid(x, y)
            return 280.0 + 0.01 * xx - 0.02 * yy + 1e-5 * xx * yy

        out = resample_bicubic(Raster(g, ramp(g)), fine).values[0]
        expect = ramp(fine)
        inner = (slice(6, -6), slice(6, -6))
        rel = np.abs(out[inner] - expect[inner]) / np.abs(expect[inner])
        assert rel.max() < 1e-3

    def test_no_overlap(self):
        src = Raster(grid(4, 4), np.zeros((4, 4)))
        far = GridSpec(4, 4, 10.0, 0.0, 0.0)
        with pytest.raises(ValueError, match="overlap"):
            resample_bicubic(src, far)


class TestFillGaps:
    def test_fully_valid_identity(self):
        v = np.random.default_rng(3).normal(size=(5, 6))
        out = fill_gaps_adaptive(Raster(grid(5, 6), v))
        np.testing.assert_array_equal(out.values[0], v)

    def test_single_hole(self):
        v = np.full((3, 3), 10.0)
        m = np.ones((3, 3), bool)
        m[1, 1] = False
        v[1, 1] = -5.0
        out = fill_gaps_adaptive(Raster(grid(3, 3), v, m))
        assert out.values[0, 1, 1] == 10.0
        assert out.fully_valid

    def test_expands_to_five(self):
        m = np.zeros((5, 5), bool)
        m[0, 4] = True
        v = np.zeros((5, 5))
        v[0, 4] = 7.0
        out = fill_gaps_adaptive(Raster(grid(5, 5), v, m))
        assert out.values[0, 2, 2] == 7.0
        np.testing.assert_allclose(out.values[0], brute_fill(v, m))

    def test_all_masked(self):
        with pytest.raises(ValueError):
            fill_gaps_adaptive(Raster(grid(3, 3), np.zeros((3, 3)), np.zeros((3, 3), bool)))

    @settings(max_examples=25, deadline=None)
    @given(seed=st.integers(0, 2**16), frac=st.floats(0.05, 0.95))
    def test_matches_brute_force_and_idempotent(self, seed, frac):
        rng = np.random.default_rng(seed)
        v = rng.normal(size=(9, 11))
        m = rng.random((9, 11)) > frac
        if not m.any():
            m[4, 5] = True
        r = Raster(grid(9, 11), v, m)
        once = fill_gaps_adaptive(r)
        np.testing.assert_allclose(once.values[0], brute_fill(np.where(m, v, 0.0), m), atol=1e-12)
        np.testing.assert_array_equal(fill_gaps_adaptive(once).values, once.values)
        np.testing.assert_array_equal(once.values[0][m], v[m])


class TestGaussian:
    def test_sigma_one_side(self):
        assert gaussian_kernel(1.0).shape == (7, 7)

    @pytest.mark.parametrize("sigma", [0.3, 0.5, 1.0, 1.7, 2.5])
    def test_normalised_and_symmetric(self, sigma):
        k = gaussian_kernel(sigma)
        side = 2 * math.ceil(3 * sigma) + 1
        assert k.shape == (side, side)
        assert abs(k.sum() - 1) < 1e-9
        np.testing.assert_allclose(k, k.T, atol=0)
        np.testing.assert_allclose(k, k[::-1, ::-1], atol=0)

    def test_shape_follows_formula(self):
        k = gaussian_kernel(1.0)
        raw = np.array(
            [[math.exp(-(x * x + y * y) / 2) / (2 * math.pi) for y in range(-3, 4)] for x in range(-3, 4)]
        )
        np.testing.assert_allclose(k, raw / raw.sum(), rtol=1e-12)

    @pytest.mark.parametrize("sigma", [0.0, -1.0])
    def test_bad_sigma(self, sigma):
        with pytest.raises(ValueError):
            gaussian_kernel(sigma)

    def test_constant_identity(self):
        x = np.full((2, 20, 20), 3.25)
        np.testing.assert_allclose(gaussian_smooth(x, 1.0), x, atol=1e-6)

    def test_impulse_reproduces_kernel(self):
        x = np.zeros((15, 15))
        x[7, 7] = 1.0
        out = gaussian_smooth(x, 1.0)
        np.testing.assert_allclose(out[4:11, 4:11], gaussian_kernel(1.0), atol=1e-12)

    def test_noise_variance_drops(self):
        x = np.random.default_rng(4).normal(size=(1, 64, 64))
        assert gaussian_smooth(x, 1.0).var() < x.var()

    def test_too_small(self):
        with pytest.raises(ValueError, match="smaller"):
            gaussian_smooth(np.zeros((6, 6)), 1.0)

    def test_torch_path_differentiable(self):
        x = torch.randn(2, 1, 16, 16, dtype=torch.float64, requires_grad=True)
        gaussian_smooth(x, 1.0).sum().backward()
        # every output pixel sums to one across inputs -> total gradient = pixel count
        assert x.grad.sum().item() == pytest.approx(2 * 16 * 16)

    def test_ramp_mean_preserved(self):
        yy, xx = np.mgrid[0:30, 0:40]
        ramp = 0.3 * xx - 0.7 * yy + 5
        assert abs(gaussian_smooth(ramp, 1.0).mean() - ramp.mean()) < 1e-6

    @settings(max_examples=20, deadline=None)
    @given(c=st.floats(-100, 100), seed=st.integers(0, 1000))
    def test_commutes_with_constant(self, c, seed):
        x = np.random.default_rng(seed).normal(size=(12, 12))
        np.testing.assert_allclose(gaussian_smooth(x + c, 1.0), gaussian_smooth(x, 1.0) + c, atol=1e-9)


class TestIO:
    def test_geotiff_roundtrip(self, tmp_path):
        v = np.random.default_rng(5).normal(290, 5, size=(2, 6, 9))
        m = np.ones_like(v, bool)
        m[1, 2, 3] = False
        r = Raster(GridSpec(9, 6, 30.0, 400000.0, 5200000.0, "EPSG:32631"), v, m)
        write_geotiff(tmp_path / "a.tif", r)
        back = read_geotiff(tmp_path / "a.tif")
        assert back.grid == r.grid
        np.testing.assert_array_equal(back.mask, m)
        np.testing.assert_allclose(back.values[m], v[m].astype(np.float32))

    def test_geotiff_bytes_deterministic(self, tmp_path):
        r = Raster(grid(4, 4), np.arange(16.0).reshape(4, 4))
        write_geotiff(tmp_path / "a.tif", r)
        write_geotiff(tmp_path / "b.tif", r)
        assert (tmp_path / "a.tif").read_bytes() == (tmp_path / "b.tif").read_bytes()

    def test_missing_file(self, tmp_path):
        with pytest.raises(FileNotFoundError, match="nope.tif"):
            read_geotiff(tmp_path / "nope.tif")

    @given(a=arrays(np.float32, (3, 4, 5), elements=st.floats(-1e3, 1e3, width=32)))
    @settings(max_examples=10, deadline=None)
    def test_archive_roundtrip(self, tmp_path_factory, a):
        d = tmp_path_factory.mktemp("arch")
        write_archive(d, {"x": a}, {"note": 1})
        back, meta = read_archive(d, mmap=False)
        np.testing.assert_array_equal(back["x"], a)
        assert meta == {"note": 1}
        assert (d / "x.f32").stat().st_size == a.size * 4
