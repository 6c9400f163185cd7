import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from xcam import blocks, data, training
from xcam.errors import ConfigError, NumericalError, ShapeError, ValidationError
from xcam.training import AdamConfig, OptimizerState, ScheduleConfig, TrainConfig


# --------------------------------------------------------------------------
# loss
# --------------------------------------------------------------------------

class TestBCE:
    def test_half_probability(self):
        loss, _ = training.bce_loss(np.array([0.5]), np.array([1]))
        assert abs(loss - math.log(2)) < 1e-12

    @pytest.mark.parametrize("y", [0, 1])
    def test_perfect_prediction(self, y):
        loss, grad = training.bce_loss(np.array([float(y)]), np.array([y]))
        assert loss <= 1e-6 * abs(math.log(1e-7))
        assert grad[0] == 0.0

    def test_gradient_fd(self):
        rng = np.random.default_rng(0)
        p = rng.uniform(0.05, 0.95, 7)
        y = rng.integers(0, 2, 7)
        _, g = training.bce_loss(p, y)
        h = 1e-6
        for i in range(7):
            up, dn = p.copy(), p.copy()
            up[i] += h
            dn[i] -= h
            fd = (training.bce_loss(up, y)[0] - training.bce_loss(dn, y)[0]) / (2 * h)
            assert abs(fd - g[i]) < 1e-8

    @given(st.lists(st.tuples(st.floats(0, 1), st.integers(0, 1)), min_size=1, max_size=20))
    def test_non_negative(self, pairs):
        p = np.array([a for a, _ in pairs])
        y = np.array([b for _, b in pairs])
        loss, grad = training.bce_loss(p, y)
        assert loss >= 0 and np.all(np.isfinite(grad))

    def test_bad_label(self):
        with pytest.raises(ValidationError):
            training.bce_loss(np.array([0.3]), np.array([2]))

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            training.bce_loss(np.array([0.3, 0.2]), np.array([1]))

    @pytest.mark.parametrize("n_logits", [1, 2])
    def test_logit_loss_gradient(self, n_logits):
        rng = np.random.default_rng(n_logits)
        z = rng.standard_normal((5, n_logits))
        y = np.array([1, 0, 1, 1, 0])
        fn = training.logit_loss(y)
        _, dz = fn(z)
        for idx in np.ndindex(z.shape):
            up, dn = z.copy(), z.copy()
            up[idx] += 1e-6
            dn[idx] -= 1e-6
            assert abs((fn(up)[0] - fn(dn)[0]) / 2e-6 - dz[idx]) < 1e-8


# --------------------------------------------------------------------------
# optimiser
# --------------------------------------------------------------------------

class TestAdam:
    def test_zero_grad_keeps_params(self):
        params = {"w": np.array([1.0, -2.0])}
        state = OptimizerState.zeros_like(params)
        new, st_ = training.adam_step(params, {"w": np.zeros(2)}, state, AdamConfig(), 1e-3)
        np.testing.assert_array_equal(new["w"], params["w"])
        assert st_.t == 1

    def test_closed_form_first_step(self):
        params = {"w": np.array([0.0])}
        state = OptimizerState.zeros_like(params)
        new, st_ = training.adam_step(params, {"w": np.array([2.0])}, state, AdamConfig(), 1e-3)
        assert st_.m["w"][0] == pytest.approx(0.2, abs=1e-15)
        assert st_.v["w"][0] == pytest.approx(0.004, abs=1e-15)
        assert -new["w"][0] == pytest.approx(1e-3 * 2 / (2 + 1e-8), rel=1e-12)

    @given(st.floats(1e-3, 1e3) | st.floats(-1e3, -1e-3))
    def test_first_step_magnitude(self, g):
        params = {"w": np.array([0.5])}
        new, _ = training.adam_step(params, {"w": np.array([g])}, OptimizerState.zeros_like(params), AdamConfig(), 1e-3)
        delta = abs(new["w"][0] - 0.5)
        assert 0.999e-3 <= delta <= 1e-3 * (1 + 1e-12)

    def test_inputs_untouched_and_moments_decay(self):
        params = {"w": np.ones(3)}
        state = OptimizerState.zeros_like(params)
        _, state = training.adam_step(params, {"w": np.ones(3)}, state, AdamConfig(), 1e-3)
        m1, v1 = state.m["w"].copy(), state.v["w"].copy()
        _, state2 = training.adam_step(params, {"w": np.zeros(3)}, state, AdamConfig(), 1e-3)
        np.testing.assert_array_equal(state.m["w"], m1)
        np.testing.assert_allclose(state2.m["w"], 0.9 * m1)
        np.testing.assert_allclose(state2.v["w"], 0.999 * v1)
        assert np.all(state2.v["w"] >= 0) and state2.t == 2

    def test_shape_mismatch(self):
        params = {"w": np.ones(3)}
        with pytest.raises(ShapeError):
            training.adam_step(params, {"w": np.ones(2)}, OptimizerState.zeros_like(params), AdamConfig(), 1e-3)

    def test_config_invariants(self):
        with pytest.raises(ConfigError):
            AdamConfig(beta1=0.999, beta2=0.9)
        with pytest.raises(ConfigError):
            AdamConfig(eps=0)


# --------------------------------------------------------------------------
# schedule
# --------------------------------------------------------------------------

class TestSchedule:
    @pytest.mark.parametrize("epoch,lr", [(0, 1e-3), (29, 1e-3), (30, 1e-4), (60, 1e-5), (90, 1e-6), (119, 1e-6)])
    def test_values(self, epoch, lr):
        assert training.lr_at(epoch) == lr

    def test_non_increasing_with_four_levels(self):
        lrs = [training.lr_at(e) for e in range(120)]
        assert all(a >= b for a, b in zip(lrs, lrs[1:]))
        assert sorted(set(lrs), reverse=True) == [1e-3, 1e-4, 1e-5, 1e-6]
        assert len(set(lrs)) == math.ceil(120 / 30)

    @pytest.mark.parametrize("epoch", [-1, 120])
    def test_out_of_range(self, epoch):
        with pytest.raises(ConfigError):
            training.lr_at(epoch)

    def test_config_invariants(self):
        with pytest.raises(ConfigError):
            ScheduleConfig(decay_factor=1.0)
        with pytest.raises(ConfigError):
            ScheduleConfig(batch_size=0)

    def test_epoch_order_is_seeded_permutation(self):
        a = training.epoch_order(50, 3, 7)
        assert sorted(a) == list(range(50))
        np.testing.assert_array_equal(a, training.epoch_order(50, 3, 7))
        assert not np.array_equal(a, training.epoch_order(50, 3, 8))


# --------------------------------------------------------------------------
# training loop
# --------------------------------------------------------------------------

SMALL = blocks.NetworkScale(width_multiplier=0.25, se_reduction=4)


@pytest.fixture(scope="module")
def separable():
    synth = data.generate_synthetic(data.SynthConfig(n_per_class=32, seed=11))
    return data.to_batch(synth.images, 64), synth.labels


def small_model(seed=0, family="se_resnext"):
    return blocks.build_network(family, SMALL, input_size=64, seed=seed)


def test_batch_count(separable, monkeypatch):
    x, y = separable
    calls = []
    real = blocks.forward_backward

    def counting(model, batch, dloss, training=True):
        calls.append(len(batch))
        return real(model, batch, dloss, training)

    monkeypatch.setattr(training, "forward_backward", counting)
    cfg = TrainConfig(schedule=ScheduleConfig(total_epochs=2))
    _, manifest = training.train(small_model(), x, y, cfg, seed=0)
    assert calls == [32, 32, 32, 32]
    assert len(calls) // 2 * 120 == 240  # observed batches per epoch, scaled to the full recipe
    assert [e["epoch"] for e in manifest.epochs] == [0, 1]


def test_partial_batch_kept(separable, monkeypatch):
    x, y = separable
    calls = []
    real = blocks.forward_backward
    monkeypatch.setattr(training, "forward_backward", lambda m, b, d, training=True: calls.append(len(b)) or real(m, b, d, training))
    training.train(small_model(), x[:45], y[:45], TrainConfig(schedule=ScheduleConfig(total_epochs=1)), seed=0)
    assert calls == [32, 13]


def test_determinism_and_input_untouched(separable):
    x, y = separable
    cfg = TrainConfig(schedule=ScheduleConfig(total_epochs=2))
    model = small_model(3)
    before = {k: v.copy() for k, v in model.params.items()}
    a, ma = training.train(model, x, y, cfg, seed=5)
    b, mb = training.train(model, x, y, cfg, seed=5)
    for k in model.params:
        assert a.params[k].tobytes() == b.params[k].tobytes()
        np.testing.assert_array_equal(model.params[k], before[k])
    assert [e["mean_loss"] for e in ma.epochs] == [e["mean_loss"] for e in mb.epochs]


def test_manifest_lr_sequence_and_json(separable):
    x, y = separable
    cfg = TrainConfig(schedule=ScheduleConfig(total_epochs=4, step_epochs=2))
    _, manifest = training.train(small_model(), x[:40], y[:40], cfg, seed=1)
    assert [e["lr"] for e in manifest.epochs] == [1e-3, 1e-3, 1e-4, 1e-4]
    doc = json.loads(manifest.to_json())
    assert set(doc) == {"seed", "config", "epochs", "wall_seconds"}
    assert doc["config"]["adam"] == {"beta1": 0.9, "beta2": 0.999, "eps": 1e-8, "lr0": 1e-3}


def test_single_class_rejected(separable):
    x, y = separable
    idx = np.flatnonzero(y == 1)
    with pytest.raises(ValidationError, match="both classes"):
        training.train(small_model(), x[idx], y[idx], seed=0)


def test_nan_names_epoch_and_batch(separable):
    x, y = separable
    cfg = TrainConfig(adam=AdamConfig(lr0=1e200), schedule=ScheduleConfig(total_epochs=3))
    with pytest.raises(NumericalError, match=r"epoch \d+, batch \d+"):
        training.train(small_model(), x, y, cfg, seed=0)


def test_convergence_on_separable_set(separable):
    """Short schedule on the synthetic set: low final loss, smoothed loss non-increasing."""
    x, y = separable
    cfg = TrainConfig(schedule=ScheduleConfig(total_epochs=40, step_epochs=30))
    model = blocks.build_network("se_resnext", input_size=64, seed=2)
    _, manifest = training.train(model, x, y, cfg, seed=2)
    losses = np.array([e["mean_loss"] for e in manifest.epochs])
    assert losses[-1] < 0.1
    windows = losses.reshape(-1, 10).mean(axis=1)
    violations = int(np.sum(np.diff(windows) > 0))
    assert violations <= 2
