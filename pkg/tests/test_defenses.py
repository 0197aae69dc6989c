import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays
from numpy.testing import assert_allclose, assert_array_equal
from scipy.fft import dctn

from saakrobust import defenses as D
from saakrobust.datasets import LabeledSet

from gradcheck import numeric_grad, rel_error

images = arrays(np.float64, st.tuples(st.integers(1, 9), st.integers(1, 9), st.integers(1, 3)),
                elements=st.floats(0, 1))


def _clamp(v, lo, hi):
    return min(max(v, lo), hi)


class TestBitDepth:
    def test_hand_value(self):
        assert D.bit_depth_reduce(np.array([0.5]), 4)[0] == pytest.approx(8 / 15)

    def test_eight_bits_is_identity_on_8bit_data(self):
        x = np.arange(256, dtype=np.float64) / 255
        assert_array_equal(D.bit_depth_reduce(x, 8), x)

    @given(images, st.integers(1, 8))
    def test_idempotent_and_in_range(self, x, bits):
        once = D.bit_depth_reduce(x, bits)
        assert_array_equal(D.bit_depth_reduce(once, bits), once)
        assert once.min() >= 0 and once.max() <= 1
        assert len(np.unique(once)) <= 2 ** bits

    @pytest.mark.parametrize("bits", [0, 9])
    def test_invalid(self, bits):
        with pytest.raises(ValueError):
            D.bit_depth_reduce(np.zeros(3), bits)


class TestMedian:
    def test_isolated_pixel_removed(self):
        x = np.zeros((3, 3, 1))
        x[1, 1] = 1
        assert D.median_filter(x, 3)[1, 1, 0] == 0

    def test_two_by_two_mean_of_middle(self):
        x = np.array([[0.0, 0.0], [1.0, 1.0]])[:, :, None]
        assert D.median_filter(x, 2)[0, 0, 0] == 0.5

    @given(images, st.sampled_from([2, 3]))
    @settings(max_examples=40, deadline=None)
    def test_matches_loop_oracle(self, x, w):
        h, wd, c = x.shape
        out = D.median_filter(x, w)
        offsets = (-1, 0, 1) if w == 3 else (0, 1)
        for i in range(h):
            for j in range(wd):
                for k in range(c):
                    vals = sorted(x[_clamp(i + a, 0, h - 1), _clamp(j + b, 0, wd - 1), k]
                                  for a in offsets for b in offsets)
                    m = len(vals)
                    expected = vals[m // 2] if m % 2 else (vals[m // 2 - 1] + vals[m // 2]) / 2
                    assert out[i, j, k] == pytest.approx(expected, abs=1e-15)

    def test_constant_unchanged(self):
        x = np.full((5, 6, 2), 0.3)
        for w in (2, 3):
            assert_array_equal(D.median_filter(x, w), x)

    def test_invalid_window(self):
        with pytest.raises(ValueError):
            D.median_filter(np.zeros((3, 3, 1)), 5)


class TestNLMeans:
    def test_constant_unchanged(self):
        x = np.full((6, 6, 1), 0.7)
        assert_allclose(D.nl_means(x), x, atol=1e-12)

    def test_large_h_is_box_mean(self, rng):
        x = rng.random((7, 8, 2))
        out = D.nl_means(x, h=1e6, patch=3, search=5)
        h, w, _ = x.shape
        expected = np.zeros_like(x)
        for i in range(h):
            for j in range(w):
                win = [x[_clamp(i + a, 0, h - 1), _clamp(j + b, 0, w - 1)]
                       for a in range(-2, 3) for b in range(-2, 3)]
                expected[i, j] = np.mean(win, axis=0)
        assert_allclose(out, expected, atol=1e-4)

    def test_edges_preserved_better_than_box(self):
        x = np.zeros((12, 12, 1))
        x[:, 6:] = 1.0
        nlm = D.nl_means(x, h=0.05, patch=3, search=7)
        box = D.nl_means(x, h=1e6, patch=3, search=7)
        assert np.abs(nlm - x).max() < 1e-6
        assert np.abs(nlm - x).sum() < np.abs(box - x).sum()

    def test_sigma_offset_flattens_small_differences(self, rng):
        x = 0.5 + 0.01 * rng.standard_normal((6, 6, 1))
        out = D.nl_means(x, h=0.01, patch=3, search=3, sigma=1.0)
        box = D.nl_means(x, h=1e6, patch=3, search=3)
        assert_allclose(out, box, atol=1e-12)

    @pytest.mark.parametrize("kwargs", [dict(h=0), dict(patch=2), dict(search=4)])
    def test_invalid(self, kwargs):
        with pytest.raises(ValueError):
            D.nl_means(np.zeros((4, 4, 1)), **kwargs)


class TestTVM:
    def test_constant_unchanged(self):
        x = np.full((6, 6, 1), 0.4)
        assert_allclose(D.tvm(x, 0.3, 50), x, atol=1e-9)

    def test_vanishing_lambda(self, rng):
        x = rng.random((8, 8, 1))
        assert_allclose(D.tvm(x, 1e-9, 100), x, atol=1e-4)

    @settings(max_examples=15, deadline=None)
    @given(st.integers(0, 2 ** 31 - 1), st.floats(0.01, 2.0))
    def test_energy_and_tv_do_not_increase(self, seed, lam):
        rng = np.random.default_rng(seed)
        x = np.clip(0.5 + 0.3 * rng.standard_normal((10, 10, 1)), 0, 1)
        out = D.tvm(x, lam, 30)
        assert D.tv_energy(out, x, lam) <= D.tv_energy(x, x, lam) + 1e-12
        assert D.total_variation(out) <= D.total_variation(x) + 1e-8
        assert out.min() >= 0 and out.max() <= 1

    def test_tv_gradient(self, rng):
        u = rng.random((1, 5, 6, 2))
        g = D._tv_grad(u)
        assert rel_error(g, numeric_grad(D.total_variation, u)) < 1e-5

    def test_tv_of_step(self):
        x = np.zeros((4, 4, 1))
        x[:, 2:] = 1.0
        assert D.total_variation(x) == pytest.approx(4.0, abs=1e-4)

    def test_invalid(self):
        with pytest.raises(ValueError):
            D.tvm(np.zeros((3, 3, 1)), 0.0)


class TestPixelDeflect:
    def test_deterministic(self, rng):
        x = rng.random((2, 8, 8, 3))
        assert_array_equal(D.pixel_deflect(x, 50, 5, 3), D.pixel_deflect(x, 50, 5, 3))
        assert not np.array_equal(D.pixel_deflect(x, 50, 5, 3), D.pixel_deflect(x, 50, 5, 4))

    def test_constant_unchanged(self):
        x = np.full((6, 6, 3), 0.2)
        assert_array_equal(D.pixel_deflect(x, 100, 3, 0), x)

    def test_no_new_values(self, rng):
        x = rng.random((9, 9, 1))
        out = D.pixel_deflect(x, 60, 5, 1)
        assert set(out.ravel()) <= set(x.ravel())

    def test_whole_pixels_move_within_window(self):
        h = w = 9
        x = np.arange(h * w, dtype=np.float64).reshape(h, w, 1) / (h * w)
        x = np.concatenate([x, 1 - x], axis=2)
        for seed in range(40):
            out = D.pixel_deflect(x, 1, 3, seed)
            changed = np.argwhere((out != x).any(axis=2))
            assert len(changed) == 1
            (i, j), = changed
            src = np.argwhere((x == out[i, j]).all(axis=2))
            (si, sj), = src
            assert max(abs(si - i), abs(sj - j)) == 1  # inside the 3x3 window, never itself

    def test_invalid(self):
        with pytest.raises(ValueError):
            D.pixel_deflect(np.zeros((4, 4, 1)), 5, 4)


class TestJPEG:
    def test_quant_table_scaling(self):
        assert_array_equal(D.jpeg_quant_table(50), D.JPEG_LUMA)
        assert D.jpeg_quant_table(100).max() == 1
        assert D.jpeg_quant_table(10)[0, 0] == 80  # 16 * 500 / 100
        assert D.jpeg_quant_table(90)[7, 7] == 20  # round(99 * 20 / 100)

    def test_quality_100_near_identity(self, rng):
        x = np.round(rng.random((20, 28, 28, 1)) * 255) / 255
        assert np.abs(D.jpeg_approx(x, 100) - x).max() <= 2 / 255

    def test_constant_image(self):
        for v in (0.0, 0.3, 1.0):
            x = np.full((16, 16, 3), v)
            assert np.abs(D.jpeg_approx(x, 50) - x).max() <= 1 / 255

    def test_low_contrast_checkerboard_removed(self):
        # the (7, 7) coefficient of a +-0.1 checkerboard is ~204 grey levels, below
        # half the Q=10 quantizer step (495), so it is zeroed
        idx = np.add.outer(np.arange(32), np.arange(32))
        x = (0.5 + 0.1 * np.where(idx % 2 == 0, 1, -1))[:, :, None]

        def high_energy(img):
            blocks = img[:, :, 0].reshape(4, 8, 4, 8).transpose(0, 2, 1, 3) * 255
            coefs = dctn(blocks, axes=(-2, -1), norm="ortho")
            return (coefs[..., np.add.outer(np.arange(8), np.arange(8)) >= 8] ** 2).sum()

        assert high_energy(D.jpeg_approx(x, 10)) <= 0.1 * high_energy(x)

    def test_odd_sizes_and_range(self, rng):
        x = rng.random((2, 13, 10, 3))
        out = D.jpeg_approx(x, 30)
        assert out.shape == x.shape and out.min() >= 0 and out.max() <= 1


class TestSpecAndApply:
    @pytest.mark.parametrize("text", ["none", "jpeg:q=90", "bitdepth:bits=4", "median:w=3", "median:w=2",
                                      "tvm:lambda=0.1,iters=100", "deflect:count=200,window=5,seed=7",
                                      "nlmeans:h=0.1,patch=3,search=7"])
    def test_parse_roundtrip(self, text):
        spec = D.DefenseSpec.parse(text)
        assert D.DefenseSpec.parse(str(spec)) == spec

    def test_defaults_filled(self):
        assert D.DefenseSpec.parse("jpeg").params == {"q": 90}

    @pytest.mark.parametrize("text", ["blur", "jpeg:q=0", "jpeg:q=101", "bitdepth:bits=9", "median:w=4",
                                      "tvm:lambda=0", "nlmeans:patch=4", "deflect:window=4", "jpeg:quality=5",
                                      "jpeg:q"])
    def test_invalid(self, text):
        with pytest.raises(ValueError):
            D.DefenseSpec.parse(text)

    @pytest.mark.parametrize("text", ["none", "jpeg:q=50", "bitdepth:bits=3", "median:w=2", "nlmeans",
                                      "tvm:iters=10", "deflect:count=20"])
    def test_apply_preserves_set(self, rng, text):
        data = LabeledSet(rng.random((7, 8, 8, 1)), rng.integers(0, 10, 7), 10)
        spec = D.DefenseSpec.parse(text)
        a = D.apply_defense(data, spec, batch_size=3)
        b = D.apply_defense(data, spec)
        assert len(a) == len(data) and a.images.shape == data.images.shape
        assert_array_equal(a.labels, data.labels)
        assert_allclose(a.images, b.images, atol=1e-12)
        assert a.images.min() >= 0 and a.images.max() <= 1
        if text == "none":
            assert_array_equal(a.images, data.images)
