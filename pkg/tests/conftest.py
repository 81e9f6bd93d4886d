import os
import sys
from dataclasses import replace
from functools import partial

import numpy as np
import pytest

SRC = os.path.join(os.path.dirname(os.path.dirname(os.path.abspath(__file__))), 'src')
if SRC not in sys.path:
    sys.path.insert(0, SRC)

import config  # noqa: E402

config.TRAINING_CONFIG['show_progress'] = False

import mesh_generators  # noqa: E402
from geometry import RestState, SimObject, build_sim_object  # noqa: E402
from scenarios import build_scenario  # noqa: E402
from sim_types import MaterialParams, Topology, TopologyKind  # noqa: E402


def make_point_mass(mass: float = 1.0, gravity=(0.0, -9.81, 0.0)) -> SimObject:
    """One free vertex with no elastic elements"""
    topology = Topology(TopologyKind.TET_MESH, 1, np.zeros((0, 4), dtype=np.int64))
    rest = RestState(positions=np.zeros((1, 3)), elements=topology.elements,
                     tet_rest_inv=np.zeros((0, 3, 3)), tet_volumes=np.zeros(0))
    material = MaterialParams(youngs_modulus=1.0, poisson_ratio=0.3, density=1.0, gravity=gravity)
    return SimObject(topology=topology, rest=rest, masses=np.array([mass]), material=material)


@pytest.fixture
def point_mass():
    return make_point_mass()


@pytest.fixture
def rod_object():
    topology, points, roots = mesh_generators.rod_grid(strands=2, vertices_per_strand=5)
    material = MaterialParams(youngs_modulus=4e7, poisson_ratio=0.3, density=1320.0, rod_radius=7e-4)
    return build_sim_object(topology, points, material, roots, name='rods')


@pytest.fixture
def cloth_object():
    topology, points, pinned = mesh_generators.cloth_grid(resolution=(4, 3), size=(0.3, 0.2))
    material = MaterialParams(youngs_modulus=1e6, poisson_ratio=0.45, density=1.5e3, shell_thickness=3e-3)
    return build_sim_object(topology, points, material, pinned, name='cloth')


@pytest.fixture
def tet_object():
    topology, points, fixed = mesh_generators.beam_tet_grid(cells=(2, 1, 1), cell_size=0.05)
    material = MaterialParams(youngs_modulus=1e6, poisson_ratio=0.3, density=1000.0)
    return build_sim_object(topology, points, material, fixed, name='beam')


@pytest.fixture
def small_rod_scenario():
    """rod-translation on two short strands, three speeds, 8 frames each"""
    spec = build_scenario('rod-translation', {'frames': 8, 'speeds': [10, 40, 80],
                                              'ae_hidden': [16, 16], 'integrator_hidden': [16, 16],
                                              'latent_dim': 3})
    return replace(spec, generator=partial(mesh_generators.rod_grid, strands=2, vertices_per_strand=4))


@pytest.fixture
def small_beam_scenario():
    spec = build_scenario('beam-cantilever', {'frames': 6, 'train_frames': 4, 'latent_dim': 3,
                                              'ae_hidden': [16, 16], 'integrator_hidden': [16, 16]})
    return replace(spec, generator=partial(mesh_generators.beam_tet_grid, cells=(2, 1, 1), cell_size=0.05))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def rod_pipeline(small_rod_scenario):
    """Simulated rod dataset with a briefly trained autoencoder and integrator"""
    from autoencoder import AutoencoderTrainer
    from integrator_training import IntegratorTrainer
    from relative_encoding import create_relative_encoding
    from scenarios import generate_dataset

    spec = small_rod_scenario
    body = spec.build_object()
    sequences = generate_dataset(spec, sim_object=body, max_workers=1)
    encoding = create_relative_encoding(body)
    ae, _ = AutoencoderTrainer({'pca_dim': 8}).train(sequences, encoding, spec.latent_dim, spec.ae_hidden,
                                                     epochs=5, batch_size=32, lr=1e-3, seed=0)
    integrator, report = IntegratorTrainer().train(sequences, ae, body, spec.dt, spec.integrator_hidden,
                                                   epochs=2, lr=1e-3, seed=0, use_bc=spec.loss_uses_bc,
                                                   batch_size=8)
    return {'spec': spec, 'body': body, 'sequences': sequences, 'ae': ae,
            'integrator': integrator, 'report': report}
