import numpy as np
import pytest
from hypothesis import assume, given, strategies as st
from hypothesis.extra.numpy import arrays

from xcam import blocks, cam
from xcam.errors import ConfigError, ShapeError

SMALL = blocks.NetworkScale(width_multiplier=0.25, se_reduction=4)
finite = st.floats(-1e3, 1e3, allow_nan=False)


class TestComputeCam:
    def test_single_channel_identity(self):
        f = np.random.default_rng(0).standard_normal((1, 1, 4, 4))
        np.testing.assert_array_equal(cam.compute_cam(f, np.array([1.0]), 1).raw, f[0, 0])

    def test_weighted_sum_example(self):
        f = np.array([[[1.0, 0], [0, 1]], [[0, 2], [2, 0]]])
        np.testing.assert_array_equal(cam.compute_cam(f, np.array([1.0, 0.5]), 0).raw, np.ones((2, 2)))

    def test_linear_in_weights(self):
        rng = np.random.default_rng(1)
        f = rng.integers(-8, 8, (6, 5, 5)).astype(float)
        w1, w2 = rng.integers(-8, 8, 6).astype(float), rng.integers(-8, 8, 6).astype(float)
        lhs = cam.compute_cam(f, w1 + w2, 1).raw
        rhs = cam.compute_cam(f, w1, 1).raw + cam.compute_cam(f, w2, 1).raw
        np.testing.assert_array_equal(lhs, rhs)

    def test_channel_mismatch(self):
        with pytest.raises(ShapeError):
            cam.compute_cam(np.zeros((3, 2, 2)), np.ones(4), 0)

    def test_batch_rejected(self):
        with pytest.raises(ShapeError):
            cam.compute_cam(np.zeros((2, 3, 2, 2)), np.ones(3), 0)

    @pytest.mark.parametrize("family", blocks.FAMILIES)
    @pytest.mark.parametrize("logits", [1, 2])
    def test_mean_plus_bias_is_logit(self, family, logits):
        model = blocks.build_network(family, SMALL, input_size=32, logits=logits, seed=7)
        x = np.random.default_rng(2).random((1, 1, 32, 32))
        out, feats = blocks.forward(model, x)
        for c in (0, 1):
            w, b = blocks.class_weights(model, c)
            m = cam.compute_cam(feats, w, c).raw
            expected = out[0, c] if logits == 2 else (out[0, 0] if c == 1 else -out[0, 0])
            assert abs(m.mean() + b - expected) < 1e-10


class TestNormalize:
    def test_example(self):
        np.testing.assert_array_equal(cam.normalize_cam(np.array([[0.0, 2], [4, 8]])), [[0, 0.25], [0.5, 1]])

    def test_constant(self):
        np.testing.assert_array_equal(cam.normalize_cam(np.full((3, 3), 4.2)), np.zeros((3, 3)))

    @given(arrays(np.float64, (4, 5), elements=finite), st.floats(0.1, 10), st.floats(-100, 100))
    def test_affine_invariance(self, m, a, b):
        assume(np.ptp(m) > 1e-3)  # below this, b swamps the spread in float64
        base = cam.normalize_cam(m)
        np.testing.assert_allclose(cam.normalize_cam(a * m + b), base, atol=1e-6)

    @given(arrays(np.float64, (3, 4), elements=finite))
    def test_range_and_argmax(self, m):
        n = cam.normalize_cam(m)
        assert n.min() >= 0 and n.max() <= 1
        if m.max() > m.min():
            assert n.ravel()[np.argmax(m)] == 1.0


class TestOverlay:
    def test_alpha_zero_is_gray(self):
        img = np.random.default_rng(0).random((6, 6))
        out = cam.render_overlay(img, np.random.default_rng(1).random((6, 6)), alpha=0.0)
        np.testing.assert_array_equal(out, np.repeat(img[..., None], 3, axis=-1))

    def test_alpha_one_top_color(self):
        out = cam.render_overlay(np.zeros((2, 3)), np.ones((2, 3)), alpha=1.0)
        np.testing.assert_array_equal(out, np.broadcast_to(cam.COLORMAP_BREAKPOINTS[-1][1], (2, 3, 3)))

    def test_red_monotone(self):
        v = np.linspace(0, 1, 256)
        red = cam.render_overlay(np.full((1, 256), 0.3), v[None, :], alpha=0.6)[0, :, 0]
        assert np.all(np.diff(red) >= 0)

    def test_colormap_breakpoints(self):
        for value, rgb in cam.COLORMAP_BREAKPOINTS:
            np.testing.assert_array_equal(cam.colormap(np.array(value)), rgb)

    def test_shape_and_alpha_checks(self):
        with pytest.raises(ShapeError):
            cam.render_overlay(np.zeros((2, 2)), np.zeros((3, 3)))
        with pytest.raises(ConfigError):
            cam.render_overlay(np.zeros((2, 2)), np.zeros((2, 2)), alpha=1.5)


@pytest.fixture(scope="module")
def model():
    return blocks.build_network("se_resnext", SMALL, input_size=32, seed=3)


class TestCamForModel:
    def test_non_kd_is_negated_kd(self, model):
        img = np.random.default_rng(0).random((32, 32))
        kd = cam.cam_for_model(model, img, 1)
        non = cam.cam_for_model(model, img, 0)
        np.testing.assert_array_equal(non.cam.raw, -kd.cam.raw)

    def test_deterministic(self, model):
        img = np.random.default_rng(1).random((32, 32))
        a, b = cam.cam_for_model(model, img, 1), cam.cam_for_model(model, img, 1)
        assert a.overlay.tobytes() == b.overlay.tobytes()
        assert a.upsampled.tobytes() == b.upsampled.tobytes()

    def test_shapes_and_raw_untouched(self, model):
        img = np.random.default_rng(2).random((32, 32))
        r = cam.cam_for_model(model, img, 1)
        raw = r.cam.raw.copy()
        cam.render_overlay(img, r.upsampled, 0.7)
        cam.normalize_cam(r.cam)
        np.testing.assert_array_equal(r.cam.raw, raw)
        assert r.cam.raw.shape == model.spec.feature_shape()[2:]
        assert r.upsampled.shape == (32, 32) and r.overlay.shape == (32, 32, 3)
        assert r.normalized.min() == 0 and r.normalized.max() == 1

    def test_size_mismatch(self, model):
        with pytest.raises(ShapeError):
            cam.cam_for_model(model, np.zeros((16, 16)), 1)


class TestTopFraction:
    def test_all_inside(self):
        grid = np.arange(100.0).reshape(10, 10)
        mask = np.zeros((10, 10), bool)
        mask[-1] = True  # the ten largest values
        assert cam.top_fraction_inside(grid, mask) == 1.0

    def test_half_inside(self):
        grid = np.arange(100.0).reshape(10, 10)
        mask = np.zeros((10, 10), bool)
        mask[-1, :5] = True
        assert cam.top_fraction_inside(grid, mask) == 0.5

    def test_shape_check(self):
        with pytest.raises(ShapeError):
            cam.top_fraction_inside(np.zeros((2, 2)), np.zeros((3, 3), bool))
