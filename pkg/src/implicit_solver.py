import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import cg, splu
from typing import Callable, List, Optional, Tuple, Any, Dict
from dataclasses import dataclass, field
from enum import Enum

try:
    from sksparse.cholmod import cholesky as cholmod_cholesky
    CHOLMOD_AVAILABLE = True
except ImportError:
    CHOLMOD_AVAILABLE = False

from config import SOLVER_CONFIG
from log_utils import setup_logger
from geometry import SimObject
from energy_model import EnergyReport, IncrementalPotential, assemble_hessian
from sim_types import (
    MaterialParams, BcMode, Frame, StateSequence, SubDynError, ConfigError,
    InvalidTopology, LinearSolveFailure, LineSearchFailure, SimulationFailure, to_storage_precision
)


class LinearSolverKind(Enum):
    """Linear solver for the projected Newton system"""
    SPARSE_CHOLESKY = "cholesky"
    PCG = "pcg"


@dataclass
class SolverConfig:
    """Newton / line search / linear solver settings"""
    max_newton_iters: int = SOLVER_CONFIG['max_newton_iters']
    grad_tol: float = SOLVER_CONFIG['grad_tol']
    armijo_c: float = SOLVER_CONFIG['armijo_c']
    backtrack_factor: float = SOLVER_CONFIG['backtrack_factor']
    max_halvings: int = SOLVER_CONFIG['max_halvings']
    linear_solver: LinearSolverKind = LinearSolverKind(SOLVER_CONFIG['linear_solver'])
    pcg_tol: float = SOLVER_CONFIG['pcg_tol']
    pcg_max_iter_factor: int = SOLVER_CONFIG['pcg_max_iter_factor']
    pd_eps_rel: float = SOLVER_CONFIG['pd_eps_rel']
    strict_line_search: bool = SOLVER_CONFIG['strict_line_search']

    def __post_init__(self):
        if isinstance(self.linear_solver, str):
            self.linear_solver = LinearSolverKind(self.linear_solver)
        positive = {
            'max_newton_iters': self.max_newton_iters,
            'grad_tol': self.grad_tol,
            'armijo_c': self.armijo_c,
            'backtrack_factor': self.backtrack_factor,
            'max_halvings': self.max_halvings,
            'pcg_tol': self.pcg_tol,
            'pcg_max_iter_factor': self.pcg_max_iter_factor,
            'pd_eps_rel': self.pd_eps_rel,
        }
        for name, value in positive.items():
            if not value > 0:
                raise ConfigError(f"Solver setting '{name}' must be positive (got {value})")
        if not (self.armijo_c < 1 and self.backtrack_factor < 1):
            raise ConfigError("armijo_c and backtrack_factor must lie in (0, 1)")

    @classmethod
    def from_dict(cls, data: Optional[Dict[str, Any]] = None) -> 'SolverConfig':
        merged = dict(SOLVER_CONFIG)
        merged.update(data or {})
        return cls(**{k: merged[k] for k in cls.__dataclass_fields__ if k in merged})


@dataclass
class DirichletSet:
    """Constrained vertices and their target positions for one step"""
    indices: np.ndarray
    targets: np.ndarray

    def __post_init__(self):
        self.indices = np.asarray(self.indices, dtype=np.int64).reshape(-1)
        self.targets = np.asarray(self.targets, dtype=np.float64).reshape(-1, 3)
        if len(self.indices) != len(self.targets):
            raise InvalidTopology("Dirichlet indices and targets differ in length")
        if len(np.unique(self.indices)) != len(self.indices):
            raise InvalidTopology("Dirichlet vertex indices must be unique")

    @classmethod
    def empty(cls) -> 'DirichletSet':
        return cls(np.zeros(0, dtype=np.int64), np.zeros((0, 3)))

    def check_range(self, num_vertices: int):
        if self.indices.size and (self.indices.min() < 0 or self.indices.max() >= num_vertices):
            raise InvalidTopology("Dirichlet vertex index out of range")

    @property
    def dofs(self) -> np.ndarray:
        return (3 * self.indices[:, None] + np.arange(3)[None, :]).reshape(-1)

    def apply(self, x: np.ndarray) -> np.ndarray:
        """Copy of x with the constrained DOFs set to the targets"""
        x = np.array(x, dtype=np.float64)
        x[self.dofs] = self.targets.reshape(-1)
        return x


@dataclass
class NewtonStats:
    """Outcome of one Newton minimization"""
    iterations: int = 0
    converged: bool = False
    grad_norm: float = np.inf
    tolerance: float = 0.0
    line_search_failed: bool = False
    fallback_steps: int = 0
    energies: List[float] = field(default_factory=list)


Objective = Callable[..., EnergyReport]


class ImplicitSolver:
    """
    Full-space implicit Euler stepping by projected Newton on the incremental potential

    Features:
    - PD-projected element Hessians assembled into a sparse system over free DOFs
    - Sparse Cholesky (cholmod when available, sparse LU otherwise) or diagonal PCG
    - Armijo backtracking with negative-gradient fallback
    - Dirichlet handling by DOF elimination or quadratic penalty

    A failed line search ends the minimization with stats.line_search_failed set, or raises
    LineSearchFailure when strict_line_search is on.
    """

    def __init__(self, config: Optional[SolverConfig] = None):
        self.config = config or SolverConfig()
        self.logger = setup_logger('ImplicitSolver', 'solver.log')

    def newton_minimize(self, objective: Objective, x0: np.ndarray,
                        dirichlet: Optional[DirichletSet] = None,
                        force_scale: float = 1.0) -> Tuple[np.ndarray, NewtonStats]:
        """
        Minimize objective over the free DOFs

        Args:
            objective: Callable (x, hessian) -> EnergyReport
            x0: Initial guess (Dirichlet DOFs are overwritten with their targets)
            dirichlet: Eliminated DOFs
            force_scale: Characteristic force; grad_tol is relative to it

        Returns:
            Tuple of (x*, NewtonStats)
        """
        cfg = self.config
        dirichlet = dirichlet or DirichletSet.empty()
        x = dirichlet.apply(x0)
        n = x.size
        dirichlet.check_range(n // 3)
        free = np.ones(n, dtype=bool)
        free[dirichlet.dofs] = False
        free_idx = np.flatnonzero(free)

        stats = NewtonStats(tolerance=cfg.grad_tol * force_scale)
        report = objective(x, hessian=True)
        energy = float(report.value)
        stats.energies.append(energy)

        while True:
            g = report.gradient[free_idx]
            stats.grad_norm = float(np.max(np.abs(g))) if g.size else 0.0
            if stats.grad_norm < stats.tolerance:
                stats.converged = True
                break
            if stats.iterations >= cfg.max_newton_iters:
                break

            H = assemble_hessian(report, n, project=True, eps_rel=cfg.pd_eps_rel)
            H_free = H[free_idx][:, free_idx]
            direction = self._solve_linear(H_free, -g)
            slope = float(g @ direction)
            if not slope < 0 or not np.all(np.isfinite(direction)):
                direction = -g
                slope = -float(g @ g)
                stats.fallback_steps += 1

            accepted = self._line_search(objective, x, free_idx, direction, slope, energy,
                                         stats.grad_norm)
            stats.iterations += 1
            if accepted is None:
                stats.line_search_failed = True
                self.logger.warning(
                    f"Line search failed after {cfg.max_halvings} halvings "
                    f"(iteration {stats.iterations}, |g|={stats.grad_norm:.3e})"
                )
                if cfg.strict_line_search:
                    raise LineSearchFailure(
                        f"No decrease after {cfg.max_halvings} halvings",
                        iterations=stats.iterations, grad_norm=stats.grad_norm)
                break
            x = accepted
            report = objective(x, hessian=True)
            energy = float(report.value)
            stats.energies.append(energy)

        if not stats.converged and not stats.line_search_failed:
            self.logger.warning(
                f"Newton stopped after {stats.iterations} iterations "
                f"(|g|={stats.grad_norm:.3e}, tol={stats.tolerance:.3e})"
            )
        return x, stats

    def _line_search(self, objective: Objective, x: np.ndarray, free_idx: np.ndarray,
                     direction: np.ndarray, slope: float, energy: float,
                     grad_norm: float) -> Optional[np.ndarray]:
        """Armijo backtracking; returns the accepted iterate or None"""
        cfg = self.config
        # Decreases below this are indistinguishable from rounding in the energy sum.
        rounding_floor = 64.0 * np.finfo(float).eps * max(1.0, abs(energy))
        alpha = 1.0
        for _ in range(cfg.max_halvings + 1):
            trial = x.copy()
            trial[free_idx] += alpha * direction
            try:
                trial_report = objective(trial, hessian=False)
                trial_energy = float(trial_report.value)
            except SubDynError:
                trial_energy = np.inf
            if np.isfinite(trial_energy):
                if trial_energy <= energy + cfg.armijo_c * alpha * slope:
                    return trial
                trial_grad = trial_report.gradient[free_idx]
                if (-alpha * slope < rounding_floor and trial_energy <= energy
                        and np.max(np.abs(trial_grad)) < grad_norm):
                    return trial
            alpha *= cfg.backtrack_factor
        return None

    def _solve_linear(self, H: sp.csr_matrix, rhs: np.ndarray) -> np.ndarray:
        cfg = self.config
        if rhs.size == 0:
            return rhs.copy()
        if cfg.linear_solver == LinearSolverKind.PCG:
            diagonal = H.diagonal()
            if np.any(diagonal <= 0):
                raise LinearSolveFailure("Non-positive diagonal in PCG preconditioner")
            preconditioner = sp.diags(1.0 / diagonal)
            solution, info = cg(H, rhs, rtol=cfg.pcg_tol,
                                maxiter=cfg.pcg_max_iter_factor * rhs.size, M=preconditioner)
            if info != 0:
                raise LinearSolveFailure(f"PCG did not converge (info={info})")
            return solution

        if CHOLMOD_AVAILABLE:
            try:
                factor = cholmod_cholesky(H.tocsc())
                return factor(rhs)
            except Exception as e:
                raise LinearSolveFailure(f"Sparse Cholesky breakdown: {e}")
        try:
            solution = splu(H.tocsc()).solve(rhs)
        except RuntimeError as e:
            raise LinearSolveFailure(f"Sparse LU breakdown: {e}")
        if not np.all(np.isfinite(solution)):
            raise LinearSolveFailure("Sparse LU produced a non-finite solution")
        return solution

    def simulate(self, sim_object: SimObject, params: Optional[MaterialParams], scenario: Any,
                 frames: int, script: Any = None) -> StateSequence:
        """
        Simulate one scripted sequence

        Args:
            sim_object: Body to simulate (its dirichlet set names the scripted vertices)
            params: Material override
            scenario: ScenarioSpec providing start_frames / dirichlet_targets / bc_params_at
            frames: Number of frames to produce
            script: BC script (defaults to the scenario's first sequence)

        Returns:
            StateSequence with `frames` frames
        """
        params = params or sim_object.material
        script = script if script is not None else scenario.sequences[0]
        dt = scenario.dt
        force_scale = self.characteristic_force(sim_object, params)

        x0, x1 = scenario.start_frames(sim_object, script)
        start = [x0, x1][:frames]
        seq_frames = [Frame(t, x, scenario.bc_params_at(t, script)) for t, x in enumerate(start)]

        # history is the stored (float32-exact) states
        x_prev2, x_prev = to_storage_precision(x0), to_storage_precision(x1)
        for t in range(2, frames):
            try:
                x, stats = self.step(sim_object, params, scenario, x_prev, x_prev2, t, script,
                                     force_scale)
            except SubDynError as e:
                raise SimulationFailure(str(e), frame=t, cause=e.error_code) from e
            if not stats.converged:
                self.logger.warning(f"{scenario.name} frame {t}: Newton did not converge "
                                    f"(|g|={stats.grad_norm:.3e})")
            frame = Frame(t, x, scenario.bc_params_at(t, script))
            seq_frames.append(frame)
            x_prev2, x_prev = x_prev, frame.x

        self.logger.info(f"Simulated {scenario.name} [{getattr(script, 'label', '')}]: {frames} frames")
        return StateSequence(frames=seq_frames, dt=dt, scenario=scenario.name,
                             topology=sim_object.topology, bc_dim=scenario.bc_dim)

    def step(self, sim_object: SimObject, params: MaterialParams, scenario: Any,
             x_prev: np.ndarray, x_prev2: np.ndarray, t: int, script: Any = None,
             force_scale: Optional[float] = None) -> Tuple[np.ndarray, NewtonStats]:
        """One implicit Euler step to frame t from the two previous frames"""
        if force_scale is None:
            force_scale = self.characteristic_force(sim_object, params)
        indices, targets = scenario.dirichlet_targets(sim_object, t, script)
        if scenario.simulation_bc_mode == BcMode.PENALTY:
            objective = IncrementalPotential(sim_object, x_prev, x_prev2, scenario.dt, params,
                                             bc=(indices, targets), w_bc=scenario.bc_penalty_weight)
            dirichlet = DirichletSet.empty()
        else:
            objective = IncrementalPotential(sim_object, x_prev, x_prev2, scenario.dt, params)
            dirichlet = DirichletSet(indices, targets)
        return self.newton_minimize(objective, objective.inertial_target, dirichlet, force_scale)

    @staticmethod
    def characteristic_force(sim_object: SimObject, params: MaterialParams) -> float:
        """Total mass * |g| / N, or total mass / N without gravity"""
        total_mass = float(np.sum(sim_object.masses))
        g = float(np.linalg.norm(params.gravity_vector))
        return total_mass * (g if g > 0 else 1.0) / max(sim_object.num_vertices, 1)
