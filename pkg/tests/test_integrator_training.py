import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from integrator_training import (
    IntegratorTrainer, IntegratorWeights, LossContext, balance_weight, encode_dataset,
    integrator_inputs, load_integrator, perturb_latents, predict, save_integrator, selfsup_loss,
    weighted_loss
)
from sim_types import ConfigError
from fd_utils import fd_gradient, relative_error


def test_balance_weight_is_inverse_mean_speed():
    x_prev2 = np.zeros(6)
    x_prev = np.array([0.1, 0.0, 0.0, 0.1, 0.0, 0.0])
    assert balance_weight(x_prev, x_prev2, 0.1) == pytest.approx(1.0)
    # opposite vertex motions cancel in the mean
    x_prev = np.array([0.1, 0.0, 0.0, -0.1, 0.0, 0.0])
    assert balance_weight(x_prev, x_prev2, 0.1) == pytest.approx(1e6)


def test_balance_weight_on_batches():
    x_prev2 = np.zeros((3, 6))
    x_prev = np.zeros((3, 6))
    x_prev[1, [1, 4]] = 0.2
    x_prev[2, [2, 5]] = 0.05
    weights = balance_weight(x_prev, x_prev2, 0.1)
    np.testing.assert_allclose(weights, [1e6, 0.5, 2.0])


def test_weighted_loss():
    values = np.array([1.0, 3.0])
    assert weighted_loss(values, None) == pytest.approx(2.0)
    assert weighted_loss(values, np.array([2.0, 0.0])) == pytest.approx(1.0)


@settings(max_examples=50, deadline=None)
@given(z=arrays(np.float64, (6, 3), elements=st.floats(-10.0, 10.0)),
       scale=st.floats(0.0, 1.0), seed=st.integers(0, 1000))
def test_perturbation_stays_within_scaled_spread(z, scale, seed):
    z_prev, z_prev2 = z[:3], z[3:]
    sigma = z.std(axis=0)
    noisy_prev, noisy_prev2 = perturb_latents(z_prev, z_prev2, np.random.default_rng(seed), scale)
    bound = scale * sigma + 1e-12
    assert np.all(np.abs(noisy_prev - z_prev) <= bound)
    assert np.all(np.abs(noisy_prev2 - z_prev2) <= bound)


def test_integrator_inputs_order():
    row = integrator_inputs(np.array([1.0]), np.array([2.0]), np.array([3.0, 3.0]),
                            np.array([4.0, 4.0]), np.array([5.0, 5.0]))
    np.testing.assert_array_equal(row, [[1.0, 2.0, 3.0, 3.0, 4.0, 4.0, 5.0, 5.0]])


def test_integrator_dimensions_are_checked(rod_pipeline):
    integrator = rod_pipeline['integrator']
    with pytest.raises(ConfigError):
        IntegratorWeights(integrator.spec, integrator.weights, integrator.input_scaler,
                          integrator.latent_scaler, integrator.latent_dim + 1, integrator.bc_dim)


def test_encode_dataset_builds_consecutive_triples(rod_pipeline):
    data = encode_dataset(rod_pipeline['sequences'], rod_pipeline['ae'])
    # three sequences of eight frames, six triples each
    assert data.triples.shape == (18, 3)
    np.testing.assert_array_equal(data.triples[6], [8, 9, 10])
    assert data.z.shape == (24, rod_pipeline['ae'].latent_dim)


def _single_context(rod_pipeline, index=3):
    body, ae = rod_pipeline['body'], rod_pipeline['ae']
    data = encode_dataset(rod_pipeline['sequences'], ae)
    i0, i1, i2 = data.triples[index]
    targets = data.x[i2].reshape(-1, 3)[body.dirichlet]
    context = LossContext(x_prev=data.x[i1][None], x_prev2=data.x[i0][None],
                          reference_t=ae.encoding.reference_positions(data.x[i2])[None],
                          bc_indices=body.dirichlet, bc_targets=targets[None])
    return data, context, data.z[i2]


def test_selfsup_gradient_matches_finite_differences(rod_pipeline):
    ae, body, dt = rod_pipeline['ae'], rod_pipeline['body'], rod_pipeline['spec'].dt
    _, context, z = _single_context(rod_pipeline)

    def loss(zz):
        return selfsup_loss(zz[None], context, ae, body, None, dt, use_bc=True, w_bc=1e3)[0][0]

    values, dz, components = selfsup_loss(z[None], context, ae, body, None, dt, use_bc=True, w_bc=1e3)
    assert values.shape == (1,)
    assert set(components) == {'inertial', 'elastic', 'external', 'bc'}
    numeric = fd_gradient(loss, z)
    assert relative_error(dz[0], numeric) < 1e-4


def test_supervised_training_fits_latents(rod_pipeline):
    trainer = IntegratorTrainer()
    spec = rod_pipeline['spec']
    integrator, report = trainer.train(rod_pipeline['sequences'], rod_pipeline['ae'], rod_pipeline['body'],
                                       spec.dt, [16, 16], epochs=80, lr=3e-3, seed=1, supervised=True,
                                       batch_size=6)
    losses = report.series('total')
    assert report.kind == 'supervised'
    assert losses[-1] < 0.5 * losses[0]


def test_selfsup_report_records_energy_terms(rod_pipeline):
    report = rod_pipeline['report']
    assert report.kind == 'selfsup'
    assert len(report.losses) == 2
    last = report.losses[-1]
    assert last['inertial'] >= 0.0
    assert last['elastic'] != 0.0
    assert np.isfinite(last['total'])


def test_autoencoder_stays_frozen(rod_pipeline):
    ae = rod_pipeline['ae']
    params = {k: v.copy() for k, v in {**ae.encoder.params, **ae.decoder.params}.items()}
    buffers = {k: v.copy() for k, v in {**ae.encoder.buffers, **ae.decoder.buffers}.items()}
    spec = rod_pipeline['spec']
    IntegratorTrainer().train(rod_pipeline['sequences'], ae, rod_pipeline['body'], spec.dt, [8],
                              epochs=2, lr=1e-2, seed=4, batch_size=6)
    for key, value in {**ae.encoder.params, **ae.decoder.params}.items():
        np.testing.assert_array_equal(value, params[key])
    for key, value in {**ae.encoder.buffers, **ae.decoder.buffers}.items():
        np.testing.assert_array_equal(value, buffers[key])


@pytest.mark.parametrize('noise, balancing', [(True, True), (False, False)])
def test_training_is_deterministic_for_a_seed(rod_pipeline, noise, balancing):
    spec = rod_pipeline['spec']

    def run():
        integrator, _ = IntegratorTrainer().train(rod_pipeline['sequences'], rod_pipeline['ae'],
                                                  rod_pipeline['body'], spec.dt, [8, 8], epochs=2,
                                                  lr=1e-3, seed=7, noise=noise, balancing=balancing,
                                                  batch_size=9)
        return integrator

    a, b = run(), run()
    for key in a.weights.params:
        np.testing.assert_array_equal(a.weights.params[key], b.weights.params[key])


def test_saved_integrator_predicts_identically(rod_pipeline, tmp_path):
    integrator = rod_pipeline['integrator']
    data = encode_dataset(rod_pipeline['sequences'], rod_pipeline['ae'])
    i0, i1, i2 = data.triples[:4].T
    path = str(tmp_path / 'int.sdwt')
    save_integrator(path, integrator, {'scenario': 'rod-translation'})
    restored = load_integrator(path)
    args = (data.z[i1], data.z[i0], data.p[i2], data.p[i1], data.p[i0])
    np.testing.assert_array_equal(predict(restored, *args), predict(integrator, *args))
    assert predict(integrator, *(a[0] for a in args)).shape == (integrator.latent_dim,)


def test_integrator_checkpoint_keeps_batch_norm_settings(rod_pipeline, tmp_path):
    trainer = IntegratorTrainer({'bn_momentum': 0.5, 'bn_eps': 1e-3})
    data = encode_dataset(rod_pipeline['sequences'], rod_pipeline['ae'])
    spec = rod_pipeline['spec']
    integrator = trainer.initialize(data, rod_pipeline['ae'].latent_dim, spec.bc_dim,
                                    spec.integrator_hidden, seed=0)
    assert (integrator.weights.momentum, integrator.weights.eps) == (0.5, 1e-3)

    path = str(tmp_path / 'int.sdwt')
    save_integrator(path, integrator)
    restored = load_integrator(path)
    assert (restored.weights.momentum, restored.weights.eps) == (0.5, 1e-3)


def test_load_integrator_rejects_autoencoder_file(rod_pipeline, tmp_path):
    from autoencoder import save_autoencoder
    path = str(tmp_path / 'ae.sdwt')
    save_autoencoder(path, rod_pipeline['ae'])
    with pytest.raises(ConfigError):
        load_integrator(path)


def test_training_needs_three_frames(rod_pipeline):
    from sim_types import StateSequence
    short = [StateSequence(s.frames[:2], s.dt, s.scenario, s.topology, s.bc_dim)
             for s in rod_pipeline['sequences']]
    spec = rod_pipeline['spec']
    with pytest.raises(ConfigError):
        IntegratorTrainer().train(short, rod_pipeline['ae'], rod_pipeline['body'], spec.dt, [8], epochs=1)


def test_module_level_supervised_training(rod_pipeline):
    from integrator_training import train_integrator_supervised
    spec = rod_pipeline['spec']
    integrator, report = train_integrator_supervised(rod_pipeline['sequences'], rod_pipeline['ae'],
                                                     rod_pipeline['body'], spec.dt, [8], epochs=1, batch_size=6)
    assert report.kind == 'supervised'
    assert integrator.latent_dim == rod_pipeline['ae'].latent_dim
