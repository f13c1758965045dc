import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ensflow.errors import ContractViolation, NumericError, StaleTapeError
from ensflow.net import (
    NetworkConfig,
    NetworkParams,
    OptimizerState,
    PlateauScheduler,
    adam_step,
    backward,
    forward,
    plateau_scheduler,
)


def small(input_dim=5, hidden=4, layers=4, out=3, p=0.2, seed=0):
    cfg = NetworkConfig(input_dim=input_dim, hidden_dim=hidden, num_layers=layers,
                        dropout_prob=p, output_dim=out)
    return NetworkParams.initialize(cfg, np.random.default_rng(seed))


def test_default_config_layer_layout():
    cfg = NetworkConfig()
    assert cfg.layer_shapes[0] == (48, 256)
    assert cfg.layer_shapes[-1] == (256, 840)
    assert len(cfg.layer_shapes) == 6
    assert cfg.n_params == 48 * 256 + 256 + 4 * (256 * 256 + 256) + 256 * 840 + 840


def test_initialization_is_uniform_fan_in():
    params = small(input_dim=48, hidden=64, layers=3, out=42)
    for w, (fan_in, _) in zip(params.weights, params.config.layer_shapes):
        assert np.abs(w).max() <= 1 / np.sqrt(fan_in)


def test_flat_views_share_memory():
    params = small()
    params.weights[1][0, 0] = 123.0
    assert 123.0 in params.flat
    assert params.flat.size == params.config.n_params


def test_flatten_unflatten_round_trip_is_bitwise():
    params = small()
    back = NetworkParams.unflatten(params.config, params.flatten())
    assert back.flat.tobytes() == params.flat.tobytes()
    for a, b in zip(back.weights, params.weights):
        assert np.array_equal(a, b)


def test_zero_network_outputs_zero():
    params = small()
    params.assign(np.zeros_like(params.flat))
    out, _ = forward(params, np.random.default_rng(1).normal(size=(7, 5)))
    assert np.array_equal(out, np.zeros((7, 3)))


def test_zero_residual_blocks_reduce_to_affine_chain():
    # 2-2-2 toy: first layer, two identity blocks, last layer
    cfg = NetworkConfig(input_dim=2, hidden_dim=2, num_layers=4, dropout_prob=0.0, output_dim=2)
    params = NetworkParams(cfg)
    w0, b0 = np.array([[1.0, -2.0], [0.5, 3.0]]), np.array([0.1, -0.2])
    w3, b3 = np.array([[2.0, 0.0], [-1.0, 1.0]]), np.array([0.3, 0.4])
    params.weights[0][...], params.biases[0][...] = w0, b0
    params.weights[3][...], params.biases[3][...] = w3, b3
    params.touch()
    x = np.array([0.7, -1.3])
    a = x @ w0 + b0
    h = a / (1 + np.exp(-a))
    expected = h @ w3 + b3
    out, _ = forward(params, x)
    np.testing.assert_allclose(out, expected, rtol=0, atol=1e-15)


def test_eval_is_deterministic():
    params = small()
    x = np.random.default_rng(3).normal(size=(4, 5))
    a, _ = forward(params, x)
    b, _ = forward(params, x)
    assert a.tobytes() == b.tobytes()


def test_dimension_mismatch_raises():
    with pytest.raises(ContractViolation):
        forward(small(), np.zeros(6))


def test_train_mode_requires_rng():
    with pytest.raises(ContractViolation):
        forward(small(), np.zeros(5), mode="train")


def test_linear_gradient_scalar():
    cfg = NetworkConfig(input_dim=1, hidden_dim=1, num_layers=2, dropout_prob=0.0, output_dim=1)
    params = NetworkParams(cfg)
    params.weights[1][...] = 1.0
    params.touch()
    _, tape = forward(params, np.array([2.0]))
    g = NetworkParams(cfg, backward(tape, np.array([1.0])))
    # d out / d b0 = silu'(0) * w1 = 0.5
    assert g.biases[1][0] == 1.0
    assert g.biases[0][0] == pytest.approx(0.5)
    assert g.weights[0][0, 0] == pytest.approx(1.0)


def test_zero_output_gradient_gives_zero_gradient():
    params = small()
    _, tape = forward(params, np.ones((2, 5)))
    assert not backward(tape, np.zeros((2, 3))).any()


def test_stale_tape_detected():
    params = small()
    _, tape = forward(params, np.ones(5))
    params.assign(params.flat * 0.5)
    with pytest.raises(StaleTapeError):
        backward(tape, np.ones(3))


def fd_gradient(params, x, w, mask_rng_seed=None, h=1e-4):
    base = params.flatten()
    grad = np.zeros_like(base)
    for i in range(base.size):
        vals = []
        for sgn in (1, -1):
            trial = base.copy()
            trial[i] += sgn * h
            params.assign(trial)
            rng = np.random.default_rng(mask_rng_seed) if mask_rng_seed is not None else None
            out, _ = forward(params, x, mode="train" if rng else "eval", rng=rng)
            vals.append(np.sum(out * w))
        grad[i] = (vals[0] - vals[1]) / (2 * h)
    params.assign(base)
    return grad


def test_backward_matches_finite_differences_48_8_42():
    cfg = NetworkConfig(input_dim=48, hidden_dim=8, num_layers=3, dropout_prob=0.0, output_dim=42)
    rng = np.random.default_rng(11)
    params = NetworkParams.initialize(cfg, rng)
    x = rng.normal(size=(3, 48))
    w = rng.normal(size=(3, 42))
    _, tape = forward(params, x)
    g = backward(tape, w)
    fd = fd_gradient(params, x, w)
    scale = np.maximum(np.abs(fd), 1e-6)
    assert np.max(np.abs(g - fd) / scale) < 1e-4


def test_backward_with_dropout_masks_matches_finite_differences():
    params = small(seed=4, p=0.3)
    rng = np.random.default_rng(5)
    x = rng.normal(size=(6, 5))
    w = rng.normal(size=(6, 3))
    _, tape = forward(params, x, mode="train", rng=np.random.default_rng(99))
    g = backward(tape, w)
    fd = fd_gradient(params, x, w, mask_rng_seed=99)
    assert np.max(np.abs(g - fd) / np.maximum(np.abs(fd), 1e-6)) < 1e-4


def test_dropout_expectation_matches_eval_on_linear_net():
    # single hidden block with zero internal weights is linear in the dropped input
    cfg = NetworkConfig(input_dim=3, hidden_dim=3, num_layers=3, dropout_prob=0.2, output_dim=2)
    rng = np.random.default_rng(0)
    params = NetworkParams.initialize(cfg, rng)
    params.weights[1][...] = 0.0
    params.biases[1][...] = 0.0
    params.touch()
    x = np.tile(rng.normal(size=3), (100_000, 1))
    out_train, _ = forward(params, x, mode="train", rng=np.random.default_rng(1))
    out_eval, _ = forward(params, x[:1])
    np.testing.assert_allclose(out_train.mean(axis=0), out_eval[0], rtol=1e-2)


def test_dropout_scales_kept_units():
    params = small(hidden=50, layers=3, p=0.2)
    _, tape = forward(params, np.ones((10, 5)), mode="train", rng=np.random.default_rng(0))
    mask = tape.masks[1]
    assert set(np.unique(mask)) <= {0.0, 1.25}
    # first and last dense layers see undropped inputs
    assert tape.masks[0] is None and tape.masks[-1] is None


def test_adam_zero_gradient_leaves_parameters():
    params = small()
    before = params.flatten()
    state = OptimizerState.for_params(params, weight_decay=0.0)
    adam_step(state, params, np.zeros_like(before))
    assert np.array_equal(params.flat, before)
    assert not state.m.any() and not state.v.any()
    assert state.step == 1


def test_adam_moments_decay_under_zero_gradient():
    params = small()
    state = OptimizerState.for_params(params, weight_decay=0.0)
    state.m[:] = 1.0
    state.v[:] = 1.0
    adam_step(state, params, np.zeros_like(params.flat))
    assert np.all(state.m == 0.9) and np.allclose(state.v, 0.999)


def test_adam_first_step_size():
    cfg = NetworkConfig(input_dim=1, hidden_dim=1, num_layers=2, dropout_prob=0.0, output_dim=1)
    params = NetworkParams(cfg)
    state = OptimizerState.for_params(params, lr=1e-3, weight_decay=0.0)
    adam_step(state, params, np.ones_like(params.flat))
    np.testing.assert_allclose(params.flat, -1e-3 / (1 + 1e-8), rtol=1e-12)


def test_adam_weight_decay_is_coupled_l2():
    cfg = NetworkConfig(input_dim=1, hidden_dim=1, num_layers=2, dropout_prob=0.0, output_dim=1)
    params = NetworkParams(cfg, np.full(cfg.n_params, 2.0))
    state = OptimizerState.for_params(params, lr=1e-3, weight_decay=0.5)
    adam_step(state, params, np.zeros(cfg.n_params))
    # the decay term enters the moments: first step moves by lr regardless of magnitude
    np.testing.assert_allclose(params.flat, 2.0 - 1e-3, rtol=1e-9)
    assert np.allclose(state.m, 0.1 * 1.0)


def test_adam_rejects_non_finite_gradient():
    params = small()
    state = OptimizerState.for_params(params)
    g = np.zeros_like(params.flat)
    g[3] = np.nan
    with pytest.raises(NumericError, match="index 3"):
        adam_step(state, params, g)


def test_adam_trajectories_are_reproducible():
    def run():
        params = small(seed=7)
        state = OptimizerState.for_params(params)
        rng = np.random.default_rng(8)
        for _ in range(5):
            x = rng.normal(size=(4, 5))
            out, tape = forward(params, x, mode="train", rng=rng)
            adam_step(state, params, backward(tape, out))
        return params.flatten()

    assert run().tobytes() == run().tobytes()


def test_plateau_strictly_decreasing_keeps_lr():
    assert plateau_scheduler(np.linspace(1, 0, 30), 1e-3) == 1e-3


def test_plateau_ten_bad_epochs_reduce_lr():
    assert plateau_scheduler([1.0] + [1.0] * 10, 1e-3) == pytest.approx(9e-4)


def test_plateau_nine_bad_epochs_keep_lr():
    assert plateau_scheduler([1.0] + [1.0] * 9, 1e-3) == 1e-3


def test_plateau_counter_resets_after_reduction():
    sched = PlateauScheduler(1.0)
    lrs = [sched.step(v) for v in [1.0] + [2.0] * 20]
    assert lrs[10] == pytest.approx(0.9)
    assert lrs[20] == pytest.approx(0.81)


@settings(max_examples=25, deadline=None)
@given(st.lists(st.floats(0.0, 10.0), min_size=1, max_size=60))
def test_plateau_lr_is_power_of_factor(history):
    lr = plateau_scheduler(history, 1.0)
    k = np.log(lr) / np.log(0.9)
    assert abs(k - round(k)) < 1e-9
    assert 0 <= round(k) <= len(history) // 10


@settings(max_examples=20, deadline=None)
@given(st.integers(1, 6), st.integers(1, 6), st.integers(2, 5), st.integers(1, 4), st.integers(0, 2**31))
def test_flat_length_matches_shapes(i, h, layers, o, seed):
    params = small(i, h, layers, o, seed=seed)
    assert params.flat.size == sum(w.size + b.size for w, b in zip(params.weights, params.biases))
    assert NetworkParams.unflatten(params.config, params.flatten()).flat.tobytes() == params.flat.tobytes()


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 2**31))
def test_random_small_net_gradient_property(seed):
    rng = np.random.default_rng(seed)
    params = small(int(rng.integers(1, 5)), int(rng.integers(2, 5)), int(rng.integers(2, 5)),
                   int(rng.integers(1, 4)), p=0.0, seed=seed)
    x = rng.normal(size=(2, params.config.input_dim))
    w = rng.normal(size=(2, params.config.output_dim))
    _, tape = forward(params, x)
    g = backward(tape, w)
    fd = fd_gradient(params, x, w)
    assert np.max(np.abs(g - fd) / np.maximum(np.abs(fd), 1e-6)) < 1e-4
