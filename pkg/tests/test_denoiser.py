import dataclasses

import numpy as np
import pytest
from conftest import elementwise_error, finite_differences

from motiondiff.denoiser import (
    Denoiser,
    DenoiserConfig,
    avgpool2,
    avgpool2_backward,
    checkpoint_from_bytes,
    checkpoint_to_bytes,
    conv3x3,
    load_checkpoint,
    parameter_count,
    save_checkpoint,
    sinusoidal_features,
    upsample2,
    upsample2_backward,
)
from motiondiff.diffusion import training_loss
from motiondiff.motion_data import DatasetFormatError
from motiondiff.optim import AdamState, adam_step
from motiondiff.schedule import build_schedule


def _zero(model):
    for p in model.params.values():
        p[...] = 0.0
    return model


def test_zero_parameters_give_zero_output(tiny_config):
    model = _zero(Denoiser(tiny_config, rng=0))
    x = np.random.default_rng(0).standard_normal((2, 3, 4, 4))
    np.testing.assert_array_equal(model.predict(x, [1, 5], [0, 2]), 0.0)


def test_fresh_model_predicts_zero(tiny_config):
    # the output conv starts at zero, so training begins from eps_hat = 0
    x = np.ones((3, 4, 4))
    assert np.all(Denoiser(tiny_config, rng=0)(x, 3, 1) == 0.0)


@pytest.mark.parametrize("J, f, depth", [(4, 4, 2), (5, 7, 2), (8, 32, 2), (3, 6, 0), (6, 10, 3)])
def test_output_shape_matches_input(J, f, depth):
    cfg = DenoiserConfig(joints=J, frames=f, num_classes=2, T=5, base_width=4, depth=depth)
    model = Denoiser(cfg, rng=0)
    model.params["out.b"][:] = 1.0
    x = np.zeros((2, 3, J, f))
    assert model.predict(x, 1, 0).shape == x.shape
    assert model.predict(x[0], 1, 0).shape == x[0].shape


def test_padding_geometry():
    cfg = DenoiserConfig(joints=5, frames=7, depth=2)
    assert cfg.padded_shape == (8, 8) and cfg.padding == (3, 1)
    assert DenoiserConfig().padding == (0, 0)


def test_linear_mode_is_homogeneous(tiny_config):
    cfg = dataclasses.replace(tiny_config, activation="linear")
    model = Denoiser(cfg, rng=3)
    rng = np.random.default_rng(4)
    for k, p in model.params.items():
        if k.endswith(".b") or ".proj." in k:
            p[...] = 0.0
        elif k == "out.w":
            p[...] = rng.normal(0, 0.3, p.shape)
    x = rng.standard_normal((2, 3, 4, 4))
    out = model.predict(x, [2, 7], [0, 1])
    assert np.abs(out).max() > 0
    np.testing.assert_allclose(model.predict(2 * x, [2, 7], [0, 1]), 2 * out, rtol=1e-12, atol=1e-14)


def test_input_validation(tiny_config):
    model = Denoiser(tiny_config, rng=0)
    with pytest.raises(ValueError, match="shape"):
        model.predict(np.zeros((1, 3, 5, 4)), 1, 0)
    with pytest.raises(ValueError, match="out of range"):
        model.predict(np.zeros((1, 3, 4, 4)), 11, 0)
    with pytest.raises(ValueError, match="label out of range"):
        model.predict(np.zeros((1, 3, 4, 4)), 1, 4)
    model.predict(np.zeros((1, 3, 4, 4)), 1, tiny_config.null_label)


def test_non_finite_parameters_rejected(tiny_config):
    model = Denoiser(tiny_config, rng=0)
    model.params["out.b"][0] = np.nan
    with pytest.raises(FloatingPointError):
        model.predict(np.zeros((1, 3, 4, 4)), 1, 0)


def test_conditioning_changes_output(tiny_model):
    x = np.random.default_rng(0).standard_normal((3, 4, 4))
    assert not np.allclose(tiny_model(x, 3, 0), tiny_model(x, 3, 1))
    assert not np.allclose(tiny_model(x, 3, 0), tiny_model(x, 8, 0))


# -- primitives -------------------------------------------------------------


def test_sinusoidal_features():
    f = sinusoidal_features([0, 3], 6)
    assert f.shape == (2, 6)
    np.testing.assert_array_equal(f[0], [0, 0, 0, 1, 1, 1])
    assert f[1, 0] == pytest.approx(np.sin(3.0))
    assert sinusoidal_features([1], 5).shape == (1, 5)


def test_conv3x3_matches_direct_sum():
    rng = np.random.default_rng(0)
    x, w, b = rng.standard_normal((1, 2, 4, 5)), rng.standard_normal((3, 2, 3, 3)), rng.standard_normal(3)
    out, _ = conv3x3(x, w, b)
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    for o in range(3):
        for i in range(4):
            for j in range(5):
                ref = b[o] + sum(
                    w[o, ci, di, dj] * xp[0, ci, i + di, j + dj]
                    for ci in range(2) for di in range(3) for dj in range(3)
                )
                assert out[0, o, i, j] == pytest.approx(ref, rel=1e-12)


def test_pool_and_upsample_adjoints():
    rng = np.random.default_rng(1)
    x, y = rng.standard_normal((2, 3, 4, 6)), rng.standard_normal((2, 3, 2, 3))
    # <pool(x), y> == <x, pool^T(y)>
    assert np.sum(avgpool2(x) * y) == pytest.approx(np.sum(x * avgpool2_backward(y)))
    assert np.sum(upsample2(y) * x) == pytest.approx(np.sum(y * upsample2_backward(x)))


# -- backward ---------------------------------------------------------------


@pytest.mark.parametrize("kind", ["l1", "l2"])
def test_gradients_spot_check(tiny_model, kind):
    worst = elementwise_error(finite_differences(tiny_model, kind, per_param=4))
    assert max(worst.values()) <= 1e-4, worst


def _smallest(name, grad, k=6):
    nz = np.flatnonzero(grad)
    return nz[np.argsort(np.abs(grad[nz]))[:k]]


@pytest.mark.parametrize("kind", ["l1", "l2"])
def test_tiny_gradient_entries_match_extrapolated_differences(tiny_model, kind):
    # Entries near 1e-8 sit below the round-off floor of a 1e-5 central
    # difference; an extrapolated wider step resolves them.
    pairs = finite_differences(tiny_model, kind, h=1e-3, richardson=True, pick=_smallest)
    worst = elementwise_error(pairs)
    assert min(np.abs(a).min() for a, _ in pairs.values() if a.size) < 1e-7
    assert max(worst.values()) <= 1e-4, worst


def test_zero_upstream_gives_zero_gradients(tiny_model):
    x = np.random.default_rng(0).standard_normal((2, 3, 4, 4))
    tiny_model.forward(x, [1, 2], [0, 1], cache=True)
    grads = tiny_model.backward(np.zeros_like(x))
    assert set(grads) == set(tiny_model.params)
    for g in grads.values():
        assert not np.any(g)


def test_unused_label_rows_get_no_gradient(tiny_model):
    sched = build_schedule("cosine", 10)
    x0 = np.random.default_rng(0).standard_normal((2, 3, 4, 4))
    _, g = training_loss(tiny_model, x0, [1, 1], sched, rng=0)
    table = tiny_model.backward(g)["label.table"]
    assert np.any(table[1])
    assert not np.any(table[[0, 2, 3]])


def test_backward_needs_cache(tiny_model):
    with pytest.raises(RuntimeError, match="cached forward"):
        tiny_model.backward(np.zeros((1, 3, 4, 4)))
    tiny_model.predict(np.zeros((1, 3, 4, 4)), 1, 0)
    with pytest.raises(RuntimeError):
        tiny_model.backward(np.zeros((1, 3, 4, 4)))


# -- parameter counts -------------------------------------------------------


@pytest.mark.parametrize("width, count", [(16, 129235), (32, 513443), (64, 2046787)])
def test_frozen_parameter_counts(width, count):
    cfg = DenoiserConfig(base_width=width)
    assert parameter_count(cfg) == count
    assert Denoiser(cfg, rng=0).num_parameters() == count


def test_parameter_count_by_hand_width16():
    E = 64
    dense = lambda o, i: o * i + o  # noqa: E731
    conv = lambda o, i: o * i * 9 + o  # noqa: E731
    total = 2 * dense(E, E) + 5 * E + conv(16, 3)
    total += conv(32, 16) + dense(32, E) + conv(64, 32) + dense(64, E)
    total += conv(64, 64) + dense(64, E)
    total += conv(32, 128) + dense(32, E) + conv(16, 64) + dense(16, E)
    total += conv(3, 16)
    assert total == parameter_count(DenoiserConfig(base_width=16)) == 129235


# -- checkpoint -------------------------------------------------------------


def test_checkpoint_round_trip_bit_exact(tmp_path, tiny_model):
    sched = build_schedule("cosine", 10)
    x0 = np.random.default_rng(0).standard_normal((2, 3, 4, 4))
    _, g = training_loss(tiny_model, x0, [0, 1], sched, rng=0)
    tiny_model.step(tiny_model.backward(g), 1e-3)
    manifest = {"seed": 3, "schedule": {"kind": "cosine", "T": 10}}
    save_checkpoint(tiny_model, tmp_path / "m.mdck", manifest)
    back, man = load_checkpoint(tmp_path / "m.mdck")
    assert man == manifest and back.config == tiny_model.config
    for k, p in tiny_model.params.items():
        assert back.params[k].tobytes() == p.tobytes()
        assert back.adam.m[k].tobytes() == tiny_model.adam.m[k].tobytes()
        assert back.adam.v[k].tobytes() == tiny_model.adam.v[k].tobytes()
    assert back.adam.step == 1
    assert checkpoint_to_bytes(back, man) == checkpoint_to_bytes(tiny_model, manifest)


def test_checkpoint_errors(tiny_model):
    raw = checkpoint_to_bytes(tiny_model)
    with pytest.raises(DatasetFormatError, match="magic"):
        checkpoint_from_bytes(b"MDIF" + raw[4:])
    with pytest.raises(DatasetFormatError, match="version"):
        checkpoint_from_bytes(raw[:4] + b"\x09" + raw[5:])
    with pytest.raises(DatasetFormatError, match="end of file"):
        checkpoint_from_bytes(raw[:-3])
    with pytest.raises(DatasetFormatError, match="trailing"):
        checkpoint_from_bytes(raw + b"\x00")


# -- Adam -------------------------------------------------------------------


def test_adam_zero_gradient_fixed_point():
    params = {"w": np.array([1.5, -2.0])}
    state = AdamState.zeros_like(params)
    state.m["w"][:] = 0.4
    state.v["w"][:] = 0.2
    state.step = 3
    before = params["w"].copy()
    adam_step(params, {"w": np.zeros(2)}, state, lr=0.1)
    assert state.step == 4
    np.testing.assert_allclose(state.m["w"], 0.36)
    np.testing.assert_allclose(state.v["w"], 0.2 * 0.999)
    # the update is not zero (stored momentum), but the moments decay toward 0
    assert np.all(state.m["w"] < 0.4)
    fresh = {"w": before.copy()}
    adam_step(fresh, {"w": np.zeros(2)}, AdamState.zeros_like(fresh), lr=0.1)
    np.testing.assert_array_equal(fresh["w"], before)


def test_adam_first_step_by_hand():
    params = {"w": np.array([0.0])}
    state = AdamState.zeros_like(params)
    adam_step(params, {"w": np.array([1.0])}, state, lr=0.01)
    # m_hat = v_hat = 1 after bias correction
    assert params["w"][0] == pytest.approx(-0.01 / (1.0 + 1e-8), rel=1e-14)
    assert state.step == 1


def test_adam_deterministic_and_validating():
    def run():
        params = {"w": np.zeros(3)}
        state = AdamState.zeros_like(params)
        for i in range(5):
            adam_step(params, {"w": np.array([1.0, -0.5, 0.1 * i])}, state, 1e-2)
        return params["w"]

    np.testing.assert_array_equal(run(), run())
    params = {"w": np.zeros(3)}
    with pytest.raises(FloatingPointError):
        adam_step(params, {"w": np.array([np.inf, 0, 0])}, AdamState.zeros_like(params), 1e-2)
    with pytest.raises(ValueError, match="shape"):
        adam_step(params, {"w": np.zeros(2)}, AdamState.zeros_like(params), 1e-2)
