import numpy as np
import pytest

from sim_types import (
    ConfigError, Frame, InvalidTopology, MaterialParams, SimulationFailure, StateSequence,
    SubDynError, Topology, TopologyKind, TopologyValidator, NonFiniteLatent
)


def test_material_derived_stiffnesses():
    params = MaterialParams(youngs_modulus=2.0, poisson_ratio=0.25, density=1.0, rod_radius=0.5,
                            shell_thickness=0.1)
    assert params.mu == pytest.approx(0.8)
    assert params.lam == pytest.approx(0.8)
    assert params.stretch_stiffness == pytest.approx(2.0 * np.pi * 0.25)
    assert params.bend_stiffness == pytest.approx(2.0 * np.pi * 0.0625 / 4.0)
    assert params.hinge_stiffness == pytest.approx(2.0 * 1e-3 / (12.0 * (1.0 - 0.0625)))


@pytest.mark.parametrize('kwargs', [
    {'youngs_modulus': 0.0, 'poisson_ratio': 0.3, 'density': 1.0},
    {'youngs_modulus': 1.0, 'poisson_ratio': 0.5, 'density': 1.0},
    {'youngs_modulus': 1.0, 'poisson_ratio': 0.3, 'density': -1.0},
])
def test_material_rejects_invalid_values(kwargs):
    with pytest.raises(ConfigError):
        MaterialParams(**kwargs)


def test_material_dict_round_trip_keeps_gravity():
    params = MaterialParams(youngs_modulus=1e6, poisson_ratio=0.3, density=900.0, gravity=(0, 0, -1))
    assert MaterialParams.from_dict(params.to_dict()) == params


def test_rod_set_builds_consecutive_edges():
    topology = Topology.rod_set([(0, 3), (3, 7)])
    assert topology.num_vertices == 7
    np.testing.assert_array_equal(topology.elements, [[0, 1], [1, 2], [3, 4], [4, 5], [5, 6]])
    np.testing.assert_array_equal(topology.roots(), [0, 3])
    assert Topology.from_dict(topology.to_dict()).strands == topology.strands


@pytest.mark.parametrize('kind, elements, strands', [
    (TopologyKind.TRI_MESH, [[0, 1, 5]], []),
    (TopologyKind.TRI_MESH, [[0, 1, 1]], []),
    (TopologyKind.TET_MESH, [[0, 1, 2]], []),
    (TopologyKind.ROD_SET, [[0, 1]], [(0, 2)]),
    (TopologyKind.ROD_SET, [[0, 1], [1, 2], [2, 3]], [(0, 3), (2, 4)]),
])
def test_topology_validation_failures(kind, elements, strands):
    with pytest.raises(InvalidTopology):
        Topology(kind, 4, np.asarray(elements), strands)


def test_validator_reports_message():
    topology = Topology.rod_set([(0, 3)])
    topology.elements = np.array([[0, 9], [1, 2]])
    valid, message = TopologyValidator().validate(topology)
    assert not valid
    assert 'out of range' in message


def test_state_sequence_checks_frames():
    topology = Topology(TopologyKind.TET_MESH, 4, np.array([[0, 1, 2, 3]]))
    good = [Frame(t, np.zeros(12), np.zeros(3)) for t in range(3)]
    sequence = StateSequence(good, dt=0.1, scenario='x', topology=topology, bc_dim=3)
    assert len(sequence) == 3
    assert sequence.positions().shape == (3, 12)
    assert sequence.bc_params().shape == (3, 3)
    with pytest.raises(ConfigError):
        StateSequence([Frame(1, np.zeros(12), np.zeros(3))], dt=0.1, scenario='x', bc_dim=3)
    with pytest.raises(ConfigError):
        StateSequence([Frame(0, np.zeros(9), np.zeros(3))], dt=0.1, scenario='x',
                      topology=topology, bc_dim=3)
    with pytest.raises(ConfigError):
        StateSequence([Frame(0, np.zeros(12), np.zeros(1))], dt=0.1, scenario='x', bc_dim=3)


def test_errors_carry_codes_and_details():
    error = SimulationFailure("boom", frame=7, cause="LINEAR_SOLVE_FAILURE")
    assert isinstance(error, SubDynError)
    assert error.error_code == "SIMULATION_FAILURE"
    assert error.frame == 7
    assert error.details['cause'] == "LINEAR_SOLVE_FAILURE"
    assert "frame 7" in str(error)
    assert NonFiniteLatent("nan", step=3).step == 3
