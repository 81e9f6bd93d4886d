import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from neural_core import (
    AdamState, MlpSpec, adam_step, backward, cast_weights, forward, init_weights, layer_plan,
    pca_fit, swish
)
from sim_types import BatchTooSmall, ConfigError, RankDeficient
from fd_utils import fd_gradient, relative_error


SPECS = {
    'plain': MlpSpec(input_dim=5, hidden=[7, 6], output_dim=3),
    'residual': MlpSpec(input_dim=5, hidden=[6, 6, 6], output_dim=3, residual=True),
    'batchnorm': MlpSpec(input_dim=5, hidden=[6, 6], output_dim=3, residual=True, batchnorm=True),
    'projected': MlpSpec(input_dim=8, hidden=[6, 6], output_dim=8, residual=True, batchnorm=True,
                         input_projection=4, output_projection=4, skip=True),
}


def _loss(spec, weights, batch, probe, mode):
    out, _ = forward(spec, weights.copy(), batch, mode=mode)
    return float(np.sum(out * probe))


@pytest.mark.parametrize('name', list(SPECS))
@pytest.mark.parametrize('mode', ['train', 'eval'])
def test_backward_matches_finite_differences(name, mode, rng):
    spec = SPECS[name]
    weights = init_weights(spec, seed=1)
    for key in weights.params:
        weights.params[key] = weights.params[key] + 0.1 * rng.standard_normal(weights.params[key].shape)
    batch = rng.standard_normal((6, spec.input_dim))
    probe = rng.standard_normal((6, spec.output_dim))

    out, cache = forward(spec, weights.copy(), batch, mode=mode)
    d_input, grads = backward(cache, probe)

    numeric = fd_gradient(lambda b: _loss(spec, weights, b.reshape(batch.shape), probe, mode),
                          batch.reshape(-1)).reshape(batch.shape)
    assert relative_error(d_input, numeric) < 1e-5

    for key in list(grads)[:3] + list(grads)[-2:]:
        def loss_of_param(p, key=key):
            trial = weights.copy()
            trial.params[key] = p.reshape(weights.params[key].shape)
            return _loss(spec, trial, batch, probe, mode)
        numeric = fd_gradient(loss_of_param, weights.params[key].reshape(-1))
        assert relative_error(grads[key].reshape(-1), numeric) < 1e-5, key


def test_layer_plan_orders_projections_around_core():
    ops = [(op, name) for op, name, _, _ in layer_plan(SPECS['projected'])]
    assert ops[0] == ('dense', 'in_proj')
    assert ops[1] == ('skip_begin', 'skip')
    assert ops[-3:] == [('dense', 'dense_out'), ('skip_end', 'skip'), ('dense', 'out_proj')]


def test_zero_output_with_skip_is_identity_on_core():
    spec = MlpSpec(input_dim=4, hidden=[8, 8], output_dim=4, skip=True, zero_init_output=True)
    weights = init_weights(spec, seed=0)
    batch = np.arange(8.0).reshape(2, 4)
    out, _ = forward(spec, weights, batch, mode='eval')
    np.testing.assert_allclose(out, batch)


def test_init_bounds_follow_fan_in():
    spec = MlpSpec(input_dim=24, hidden=[50], output_dim=2)
    weights = init_weights(spec, seed=0)
    assert np.abs(weights.params['dense0.W']).max() <= np.sqrt(6.0 / 24)
    assert np.all(weights.params['dense0.b'] == 0)


def test_batchnorm_updates_running_statistics_only_in_train(rng):
    spec = SPECS['batchnorm']
    weights = init_weights(spec, seed=0)
    batch = 3.0 + rng.standard_normal((16, spec.input_dim))
    before = {k: v.copy() for k, v in weights.buffers.items()}
    forward(spec, weights, batch, mode='eval')
    for key in before:
        np.testing.assert_array_equal(weights.buffers[key], before[key])
    forward(spec, weights, batch, mode='train')
    assert not np.allclose(weights.buffers['bn0.running_mean'], before['bn0.running_mean'])


def test_batchnorm_train_mode_needs_two_samples():
    spec = SPECS['batchnorm']
    with pytest.raises(BatchTooSmall):
        forward(spec, init_weights(spec), np.zeros((1, spec.input_dim)), mode='train')
    out, _ = forward(spec, init_weights(spec), np.zeros((1, spec.input_dim)), mode='eval')
    assert out.shape == (1, spec.output_dim)


def test_forward_checks_input_width():
    spec = SPECS['plain']
    with pytest.raises(ConfigError):
        forward(spec, init_weights(spec), np.zeros((2, 4)))


def test_invalid_widths_are_rejected():
    with pytest.raises(ConfigError):
        MlpSpec(input_dim=0, hidden=[4], output_dim=1)


def test_float32_cast_matches_float64(rng):
    spec = SPECS['projected']
    weights = init_weights(spec, seed=2)
    batch = rng.standard_normal((4, spec.input_dim))
    reference, _ = forward(spec, weights, batch, mode='eval')
    single, _ = forward(spec, cast_weights(weights), batch.astype(np.float32), mode='eval')
    assert single.dtype == np.float32
    np.testing.assert_allclose(single, reference, rtol=1e-4, atol=1e-5)


def test_adam_first_step_moves_by_learning_rate():
    spec = SPECS['plain']
    weights = init_weights(spec)
    state = AdamState.for_weights(weights, lr=1e-3)
    before = weights.params['dense0.W'].copy()
    grads = {'dense0.W': np.ones_like(before)}
    adam_step(weights, grads, state)
    np.testing.assert_allclose(weights.params['dense0.W'], before - 1e-3, atol=1e-9)
    assert state.step == 1


def test_adam_minimizes_quadratic():
    spec = MlpSpec(input_dim=1, hidden=[1], output_dim=1)
    weights = init_weights(spec)
    weights.params['dense_out.b'][:] = 5.0
    state = AdamState.for_weights(weights, lr=0.1)
    for _ in range(500):
        adam_step(weights, {'dense_out.b': 2.0 * weights.params['dense_out.b']}, state)
    assert abs(weights.params['dense_out.b'][0]) < 0.05


@settings(max_examples=30, deadline=None)
@given(st.floats(-30.0, 30.0))
def test_swish_is_bounded_below(v):
    assert swish(np.array(v)) >= -0.2785


def test_pca_recovers_planted_subspace(rng):
    basis = np.linalg.qr(rng.standard_normal((10, 2)))[0]
    frames = rng.standard_normal((50, 2)) @ basis.T + 1.5
    fit = pca_fit(frames, 2)
    assert not fit.rank_deficient
    np.testing.assert_allclose(fit.reconstruct(fit.project(frames)), frames, atol=1e-10)
    np.testing.assert_allclose(fit.basis.T @ fit.basis, np.eye(2), atol=1e-12)
    for column in fit.basis.T:
        assert column[np.argmax(np.abs(column))] > 0


def test_pca_pads_rank_deficient_data(rng):
    direction = rng.standard_normal(6)
    frames = np.outer(rng.standard_normal(20), direction)
    fit = pca_fit(frames, 3)
    assert fit.rank_deficient
    assert fit.k == 3
    np.testing.assert_allclose(fit.basis.T @ fit.basis, np.eye(3), atol=1e-10)
    assert fit.singular_values[1] == 0.0 and fit.singular_values[2] == 0.0


def test_pca_of_identical_frames_is_all_padding():
    frames = np.tile(np.arange(6.0), (5, 1))
    fit = pca_fit(frames, 2)
    assert fit.rank_deficient
    np.testing.assert_allclose(fit.mean, np.arange(6.0))
    np.testing.assert_allclose(fit.reconstruct(fit.project(frames)), frames)


def test_pca_rejects_k_above_dimension():
    with pytest.raises(RankDeficient):
        pca_fit(np.zeros((5, 3)), 4)
