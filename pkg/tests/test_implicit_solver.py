import numpy as np
import pytest
import scipy.sparse as sp

import implicit_solver
from conftest import make_point_mass
from energy_model import EnergyReport, IncrementalPotential
from implicit_solver import ImplicitSolver, SolverConfig, DirichletSet, LinearSolverKind
from sim_types import (
    ConfigError, InvalidTopology, BcMode, SimulationFailure, StateSequence, LinearSolveFailure,
    LineSearchFailure
)


def test_free_particle_follows_bdf1_recurrence():
    body = make_point_mass()
    dt = 1.0 / 30.0
    g = body.material.gravity_vector
    solver = ImplicitSolver()
    x_prev2 = np.zeros(3)
    x_prev = np.array([0.01, 0.02, -0.03])
    expected_prev2, expected_prev = x_prev2.copy(), x_prev.copy()
    for _ in range(100):
        objective = IncrementalPotential(body, x_prev, x_prev2, dt)
        x, stats = solver.newton_minimize(objective, objective.inertial_target, force_scale=9.81)
        expected = 2.0 * expected_prev - expected_prev2 + dt * dt * g
        assert stats.converged
        np.testing.assert_allclose(x, expected, rtol=0, atol=1e-10)
        x_prev2, x_prev = x_prev, x
        expected_prev2, expected_prev = expected_prev, expected


def test_dirichlet_vertices_hit_their_targets(tet_object):
    dt = 1.0 / 30.0
    x = tet_object.rest.flat
    targets = tet_object.rest.positions[tet_object.dirichlet] + np.array([0.0, 0.01, 0.0])
    dirichlet = DirichletSet(tet_object.dirichlet, targets)
    objective = IncrementalPotential(tet_object, x, x, dt)
    result, _ = ImplicitSolver().newton_minimize(objective, x, dirichlet,
                                                 ImplicitSolver.characteristic_force(tet_object,
                                                                                     tet_object.material))
    np.testing.assert_array_equal(result.reshape(-1, 3)[tet_object.dirichlet], targets)


def test_newton_energies_decrease_monotonically(tet_object):
    dt = 1.0 / 30.0
    x = tet_object.rest.flat
    fixed = DirichletSet(tet_object.dirichlet, tet_object.rest.positions[tet_object.dirichlet])
    objective = IncrementalPotential(tet_object, x, x, dt)
    force = ImplicitSolver.characteristic_force(tet_object, tet_object.material)
    _, stats = ImplicitSolver().newton_minimize(objective, x, fixed, force)
    energies = np.asarray(stats.energies)
    assert np.all(np.diff(energies) <= 0)
    assert stats.converged


def test_pcg_and_cholesky_agree(cloth_object):
    dt = 1.0 / 30.0
    x = cloth_object.rest.flat
    fixed = DirichletSet(cloth_object.dirichlet, cloth_object.rest.positions[cloth_object.dirichlet])
    objective = IncrementalPotential(cloth_object, x, x, dt)
    force = ImplicitSolver.characteristic_force(cloth_object, cloth_object.material)
    direct, _ = ImplicitSolver().newton_minimize(objective, x, fixed, force)
    iterative, _ = ImplicitSolver(SolverConfig(linear_solver='pcg')).newton_minimize(
        objective, x, fixed, force)
    np.testing.assert_allclose(direct, iterative, atol=1e-7)


def test_characteristic_force_without_gravity():
    body = make_point_mass(mass=2.0, gravity=(0.0, 0.0, 0.0))
    assert ImplicitSolver.characteristic_force(body, body.material) == pytest.approx(2.0)


@pytest.mark.parametrize('field, value', [
    ('grad_tol', 0.0),
    ('max_newton_iters', 0),
    ('armijo_c', 1.5),
    ('backtrack_factor', 1.0),
])
def test_solver_config_rejects_bad_values(field, value):
    with pytest.raises(ConfigError):
        SolverConfig(**{field: value})


def test_solver_config_from_dict_overrides_defaults():
    config = SolverConfig.from_dict({'linear_solver': 'pcg', 'grad_tol': 1e-4, 'unknown': 3})
    assert config.linear_solver == LinearSolverKind.PCG
    assert config.grad_tol == 1e-4


def test_dirichlet_set_validation():
    with pytest.raises(InvalidTopology):
        DirichletSet(np.array([0, 0]), np.zeros((2, 3)))
    with pytest.raises(InvalidTopology):
        DirichletSet(np.array([0, 1]), np.zeros((1, 3)))
    with pytest.raises(InvalidTopology):
        DirichletSet(np.array([5]), np.zeros((1, 3))).check_range(3)


def test_simulate_produces_scripted_sequence(small_beam_scenario):
    body = small_beam_scenario.build_object()
    sequence = ImplicitSolver().simulate(body, None, small_beam_scenario, 5)
    assert isinstance(sequence, StateSequence)
    assert len(sequence) == 5
    # frames are stored at float32 precision
    np.testing.assert_array_equal(sequence.frames[0].x, body.rest.flat.astype(np.float32))
    clamp = body.rest.positions[body.dirichlet].astype(np.float32)
    for frame in sequence.frames:
        np.testing.assert_array_equal(frame.x.reshape(-1, 3)[body.dirichlet], clamp)
    # the free end sags under gravity
    tip = np.argmax(body.rest.positions[:, 0])
    assert sequence.frames[-1].x.reshape(-1, 3)[tip, 1] < body.rest.positions[tip, 1]


def test_simulate_in_penalty_mode_stays_close_to_targets(small_beam_scenario):
    from dataclasses import replace
    spec = replace(small_beam_scenario, simulation_bc_mode=BcMode.PENALTY)
    body = spec.build_object()
    sequence = ImplicitSolver().simulate(body, None, spec, 4)
    clamped = sequence.frames[-1].x.reshape(-1, 3)[body.dirichlet]
    assert np.max(np.abs(clamped - body.rest.positions[body.dirichlet])) < 1e-3


def test_simulation_failure_carries_frame(small_beam_scenario):
    class Broken:
        def __getattr__(self, name):
            return getattr(small_beam_scenario, name)

        def dirichlet_targets(self, sim_object, t, script=None):
            return np.array([0, 0]), np.zeros((2, 3))

    body = small_beam_scenario.build_object()
    with pytest.raises(SimulationFailure) as info:
        ImplicitSolver().simulate(body, None, Broken(), 4)
    assert info.value.frame == 2


@pytest.fixture
def without_cholmod(monkeypatch):
    monkeypatch.setattr(implicit_solver, 'CHOLMOD_AVAILABLE', False)


def test_sparse_lu_solve_matches_dense(without_cholmod, cloth_object):
    x = cloth_object.rest.flat
    objective = IncrementalPotential(cloth_object, x, x, 1.0 / 30.0)
    H = implicit_solver.assemble_hessian(objective(x, hessian=True), x.size, project=True)
    rhs = np.random.default_rng(3).normal(size=x.size)
    solution = ImplicitSolver()._solve_linear(H.tocsr(), rhs)
    expected = np.linalg.solve(H.toarray(), rhs)
    np.testing.assert_allclose(solution, expected, rtol=1e-6, atol=1e-9 * np.max(np.abs(expected)))


def test_singular_system_raises_linear_solve_failure(without_cholmod):
    singular = sp.csr_matrix(np.diag([1.0, 0.0, 2.0]))
    with pytest.raises(LinearSolveFailure):
        ImplicitSolver()._solve_linear(singular, np.ones(3))


def _uphill_objective(x, hessian=False):
    # reported gradient has the wrong sign, so no step along the Newton direction decreases the value
    return EnergyReport(value=float(x @ x), gradient=-2.0 * x,
                        hessian_diagonal=np.full(x.size, 2.0) if hessian else None)


def test_failed_line_search_returns_current_iterate_with_flag():
    x0 = np.array([1.0, -2.0, 0.5])
    x, stats = ImplicitSolver().newton_minimize(_uphill_objective, x0)
    assert stats.line_search_failed
    assert not stats.converged
    np.testing.assert_array_equal(x, x0)


def test_strict_line_search_raises():
    solver = ImplicitSolver(SolverConfig(strict_line_search=True))
    with pytest.raises(LineSearchFailure) as info:
        solver.newton_minimize(_uphill_objective, np.array([1.0, -2.0, 0.5]))
    assert info.value.error_code == "LINE_SEARCH_FAILURE"
    assert info.value.details['iterations'] == 1
