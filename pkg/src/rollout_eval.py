import os
import csv
import json
import time
import hashlib
import platform
from functools import partial
import numpy as np
from dataclasses import dataclass, field, asdict
from typing import Any, Callable, Dict, List, Optional, Sequence, Union
from threadpoolctl import threadpool_limits

from config import BENCH_CONFIG, EXPORT_CONFIG, RUNTIME_CONFIG
from log_utils import setup_logger
from sim_types import (
    Topology, TopologyKind, StateSequence, NonFiniteLatent, LengthMismatch, ExportIoError
)
from geometry import SimObject, boundary_faces
from neural_core import forward, backward
from autoencoder import AutoencoderWeights, encode, decode
from integrator_training import IntegratorWeights, predict
from implicit_solver import ImplicitSolver

BcSource = Union[np.ndarray, Callable[[int], np.ndarray]]

logger = setup_logger('RolloutEvaluator', 'evaluation.log')


@dataclass
class LatentTrajectory:
    """Latent states and the BC parameters that drove them"""
    z: List[np.ndarray]
    p: List[np.ndarray]
    dt: float

    def __post_init__(self):
        if len(self.z) != len(self.p):
            raise LengthMismatch(f"{len(self.z)} latents but {len(self.p)} BC vectors")
        if len({np.shape(z) for z in self.z}) > 1:
            raise LengthMismatch("Latent dimension changes along the trajectory")

    def __len__(self) -> int:
        return len(self.z)

    def as_array(self) -> np.ndarray:
        return np.stack(self.z)


def _bc_at(bc_params: BcSource, t: int) -> np.ndarray:
    if callable(bc_params):
        return np.asarray(bc_params(t), dtype=np.float64)
    return np.asarray(bc_params[t], dtype=np.float64)


def rollout(integrator: IntegratorWeights, ae: Optional[AutoencoderWeights], z0: np.ndarray,
            z1: np.ndarray, bc_params: BcSource, steps: int, dt: float = 0.0) -> LatentTrajectory:
    """
    Autoregressive latent inference

    Args:
        integrator: Trained integrator
        ae: Autoencoder the latents belong to (only its latent size is checked)
        z0, z1: Encoded start frames
        bc_params: (T, bc_dim) array or callable t -> p_t covering t = 0 .. steps + 1
        steps: Number of predicted frames

    Returns:
        LatentTrajectory of length steps + 2
    """
    if ae is not None and np.shape(z0)[-1] != ae.latent_dim:
        raise LengthMismatch(f"Start latent has size {np.shape(z0)[-1]}, autoencoder expects {ae.latent_dim}")
    p = [_bc_at(bc_params, 0), _bc_at(bc_params, 1)]
    z = [np.asarray(z0), np.asarray(z1)]
    for t in range(2, steps + 2):
        p.append(_bc_at(bc_params, t))
        z_t = predict(integrator, z[t - 1], z[t - 2], p[t], p[t - 1], p[t - 2])
        if not np.all(np.isfinite(z_t)):
            raise NonFiniteLatent("integrator produced a non-finite latent", step=t)
        z.append(z_t)
    return LatentTrajectory(z=z, p=p, dt=dt)


def decode_trajectory(ae: AutoencoderWeights, trajectory: LatentTrajectory,
                      bc_values: np.ndarray) -> np.ndarray:
    """
    Absolute frames of a latent trajectory

    Args:
        bc_values: (T, K, 3) reference vertex positions per frame
    """
    bc_values = np.asarray(bc_values)
    if len(bc_values) != len(trajectory):
        raise LengthMismatch(f"{len(trajectory)} latents but {len(bc_values)} BC frames")
    return decode(ae, trajectory.as_array(), bc_values)


def scripted_bc_values(scenario: Any, sim_object: SimObject, script: Any, frames: int) -> np.ndarray:
    """Dirichlet targets of frames 0 .. frames-1, (T, K, 3)"""
    return np.stack([scenario.dirichlet_targets(sim_object, t, script)[1] for t in range(frames)])


def metric_bc_residual(frames: np.ndarray, indices: np.ndarray, targets: np.ndarray) -> np.ndarray:
    """Per frame max over constrained vertices of |x_i - x*_i|"""
    frames = np.asarray(frames, dtype=np.float64)
    points = frames.reshape(frames.shape[0], -1, 3)[:, np.asarray(indices, dtype=np.int64), :]
    targets = np.asarray(targets, dtype=np.float64).reshape(points.shape)
    if points.shape[1] == 0:
        return np.zeros(frames.shape[0])
    return np.linalg.norm(points - targets, axis=-1).max(axis=1)


def metric_kinetic_energy(frames: np.ndarray, masses: np.ndarray, dt: float) -> np.ndarray:
    """KE_t = 1/2 sum_i m_i |(x_i,t - x_i,t-1) / dt|^2 for t = 1 .. T-1"""
    frames = np.asarray(frames, dtype=np.float64)
    if frames.shape[0] < 2:
        raise LengthMismatch("Kinetic energy needs at least 2 frames")
    velocity = np.diff(frames.reshape(frames.shape[0], -1, 3), axis=0) / dt
    return 0.5 * np.einsum('i,tij,tij->t', np.asarray(masses, dtype=np.float64), velocity, velocity)


def metric_vertex_rmse(frames_a: np.ndarray, frames_b: np.ndarray) -> np.ndarray:
    """Per frame RMS over vertices of the position difference"""
    a = np.asarray(frames_a, dtype=np.float64)
    b = np.asarray(frames_b, dtype=np.float64)
    if a.shape != b.shape:
        raise LengthMismatch(f"Cannot compare sequences of shapes {a.shape} and {b.shape}")
    diff = (a - b).reshape(a.shape[0], -1, 3)
    return np.sqrt(np.mean(np.sum(diff ** 2, axis=-1), axis=1))


def evaluate_rollout(scenario: Any, sim_object: SimObject, ae: AutoencoderWeights,
                     integrator: IntegratorWeights, ground_truth: StateSequence,
                     script: Any = None, steps: Optional[int] = None) -> Dict[str, Any]:
    """
    Roll out from the encoded first two ground-truth frames and compare

    Without a script the BC parameters and Dirichlet targets come from the ground-truth
    sequence itself, which caps the horizon at its length.

    Returns:
        Dict with per-frame arrays ('rmse', 'bc_residual', 'kinetic_energy', 'kinetic_energy_gt')
        and a 'summary' of scalars
    """
    gt = ground_truth.positions()
    indices = sim_object.dirichlet
    steps = len(gt) - 2 if steps is None else steps
    if script is None:
        steps = min(steps, len(gt) - 2)
        bc_params = ground_truth.bc_params()
        bc_values = gt[:steps + 2].reshape(steps + 2, -1, 3)[:, indices, :]
    else:
        bc_params = partial(scenario.bc_params_at, script=script)
        bc_values = scripted_bc_values(scenario, sim_object, script, steps + 2)
    z0, z1 = encode(ae, gt[:2])
    trajectory = rollout(integrator, ae, z0, z1, bc_params, steps, scenario.dt)
    frames = steps + 2
    predicted = decode_trajectory(ae, trajectory, bc_values)

    residual = metric_bc_residual(predicted, indices, bc_values)
    kinetic = metric_kinetic_energy(predicted, sim_object.masses, scenario.dt)
    compared = min(frames, len(gt))
    rmse = metric_vertex_rmse(predicted[:compared], gt[:compared])
    kinetic_gt = metric_kinetic_energy(gt[:compared], sim_object.masses, scenario.dt)

    diag = sim_object.bbox_diagonal()
    mean_gt = float(np.mean(kinetic_gt)) if kinetic_gt.size else 0.0
    ratio = float(np.mean(kinetic[:len(kinetic_gt)]) / mean_gt) if mean_gt > 0 else float('nan')
    summary = {
        'steps': steps,
        'bbox_diagonal': diag,
        'rmse_mean': float(np.mean(rmse)),
        'rmse_final': float(rmse[-1]),
        'rmse_mean_relative': float(np.mean(rmse) / diag),
        'bc_residual_max': float(np.max(residual)),
        'bc_residual_max_relative': float(np.max(residual) / diag),
        'kinetic_energy_mean': float(np.mean(kinetic)),
        'kinetic_energy_gt_mean': mean_gt,
        'kinetic_energy_ratio': ratio,
    }
    logger.info(f"{scenario.name} [{getattr(script, 'label', '')}]: rmse {summary['rmse_mean']:.4e}, "
                f"bc residual {summary['bc_residual_max']:.4e}")
    if np.isfinite(ratio) and ratio < 1.0:
        logger.info(f"{scenario.name}: rollout kinetic energy is {ratio:.3f} of ground truth")
    return {
        'predicted': predicted,
        'rmse': rmse,
        'bc_residual': residual,
        'kinetic_energy': kinetic,
        'kinetic_energy_gt': kinetic_gt,
        'summary': summary,
    }


def write_metrics_csv(path: str, metrics: Dict[str, np.ndarray]):
    """One row per frame, one column per metric; shorter series leave empty cells"""
    columns = [name for name, values in metrics.items() if np.ndim(values) == 1]
    length = max((len(metrics[name]) for name in columns), default=0)
    try:
        os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
        with open(path, 'w', newline='') as f:
            writer = csv.writer(f)
            writer.writerow(['frame'] + columns)
            for t in range(length):
                row = [t]
                for name in columns:
                    values = metrics[name]
                    # Kinetic energy series start at frame 1
                    offset = 1 if name.startswith('kinetic_energy') else 0
                    index = t - offset
                    row.append(repr(float(values[index])) if 0 <= index < len(values) else '')
                writer.writerow(row)
    except OSError as e:
        raise ExportIoError(f"Could not write metrics to {path}: {e}")


@dataclass
class BenchResult:
    """Median wall times (milliseconds) of the online and offline primitives"""
    integrator_ms: float
    decoder_ms: float
    newton_step_ms: float
    decoder_jvp_ms: float
    newton_iterations: int
    newton_tolerance: float
    repeats: int
    dtype: str
    machine: Dict[str, Any] = field(default_factory=dict)
    config_hash: str = ""

    @property
    def online_ms(self) -> float:
        return self.integrator_ms + self.decoder_ms

    @property
    def speedup(self) -> float:
        return self.newton_step_ms / self.online_ms

    def to_dict(self) -> Dict[str, Any]:
        data = asdict(self)
        data['online_ms'] = self.online_ms
        data['speedup'] = self.speedup
        return data


def machine_descriptor() -> Dict[str, Any]:
    return {
        'platform': platform.platform(),
        'processor': platform.processor(),
        'machine': platform.machine(),
        'python': platform.python_version(),
        'numpy': np.__version__,
        'threads': 1,
    }


def config_hash(config: Dict[str, Any]) -> str:
    """sha256 of the canonical JSON form"""
    return hashlib.sha256(json.dumps(config, sort_keys=True, default=str).encode('utf-8')).hexdigest()


def median_time(fn: Callable[[], Any], repeats: int,
                warmup_fraction: float = BENCH_CONFIG['warmup_fraction']) -> float:
    """Median milliseconds over `repeats` calls, the first repeats*warmup_fraction discarded"""
    repeats = max(1, int(repeats))
    samples = []
    for _ in range(repeats):
        start = time.perf_counter()
        fn()
        samples.append(time.perf_counter() - start)
    discard = int(repeats * warmup_fraction)
    kept = samples[discard:] or samples
    return float(np.median(kept) * 1000.0)


def decoder_vertex_jvp(ae: AutoencoderWeights, z: np.ndarray, vertex: int = 0) -> np.ndarray:
    """
    Reverse-mode Jacobian rows of one decoded vertex with respect to z, (3, r)

    The vertex indexes the encoded (kept) vertices.
    """
    batch = np.repeat(np.atleast_2d(z), 3, axis=0)
    _, cache = forward(ae.decoder_spec, ae.decoder, batch, 'eval')
    seed = np.zeros((3, ae.encoding.encoded_dim), dtype=batch.dtype)
    columns = 3 * vertex + np.arange(3)
    seed[np.arange(3), columns] = ae.scaler.scale_[columns]
    jacobian, _ = backward(cache, seed)
    return jacobian


def bench(sim_object: SimObject, ae: AutoencoderWeights, integrator: IntegratorWeights,
          scenario: Any, steps: int = 10, repeats: int = BENCH_CONFIG['repeats'],
          solver: Optional[ImplicitSolver] = None) -> BenchResult:
    """
    Time one integrator step, one decoder pass, one decoder vertex JVP and one
    full-space Newton step on a state `steps` frames into the first scripted sequence

    Learned parts run on the 32-bit path, everything single threaded.
    """
    solver = solver or ImplicitSolver()
    dtype = np.dtype(BENCH_CONFIG['dtype'])
    script = scenario.sequences[0]
    params = sim_object.material
    history = solver.simulate(sim_object, None, scenario, steps + 2, script).positions()
    x_prev2, x_prev = history[-2], history[-1]
    t = steps + 2

    ae32 = ae.cast(dtype)
    int32 = integrator.cast(dtype)
    z_prev2, z_prev = encode(ae32, np.stack([x_prev2, x_prev]).astype(dtype))
    p = [scenario.bc_params_at(t - k, script).astype(dtype) for k in (0, 1, 2)]
    reference = scenario.dirichlet_targets(sim_object, t, script)[1]
    z_t = predict(int32, z_prev, z_prev2, p[0], p[1], p[2])

    newton_iterations = []

    def newton_step():
        _, stats = solver.step(sim_object, params, scenario, x_prev, x_prev2, t, script)
        newton_iterations.append(stats.iterations)
        return stats

    with threadpool_limits(limits=1):
        integrator_ms = median_time(lambda: predict(int32, z_prev, z_prev2, p[0], p[1], p[2]), repeats)
        decoder_ms = median_time(lambda: decode(ae32, z_t, reference), repeats)
        jvp_ms = median_time(lambda: decoder_vertex_jvp(ae32, z_t), repeats)
        newton_ms = median_time(newton_step, repeats)

    result = BenchResult(
        integrator_ms=integrator_ms,
        decoder_ms=decoder_ms,
        newton_step_ms=newton_ms,
        decoder_jvp_ms=jvp_ms,
        newton_iterations=int(np.median(newton_iterations)),
        newton_tolerance=solver.config.grad_tol,
        repeats=repeats,
        dtype=dtype.name,
        machine=machine_descriptor(),
        config_hash=config_hash({
            'scenario': scenario.to_dict(),
            'solver': asdict(solver.config),
            'bench': BENCH_CONFIG,
            'steps': steps,
            'repeats': repeats,
            'encoder': ae.encoder_spec.to_dict(),
            'decoder': ae.decoder_spec.to_dict(),
            'integrator': integrator.spec.to_dict(),
            'version': RUNTIME_CONFIG['version'],
        }),
    )
    logger.info(f"{scenario.name} bench: online {result.online_ms:.4f} ms, Newton {newton_ms:.4f} ms, "
                f"speedup {result.speedup:.1f}x, decoder JVP {jvp_ms:.4f} ms")
    return result


def export_obj_sequence(frames: Sequence[np.ndarray], topology: Topology, directory: str) -> List[str]:
    """
    Write one OBJ per frame

    Rods become polylines (`l`), shells their triangles and solids their boundary faces (`f`).
    """
    frames = [np.asarray(x, dtype=np.float64).reshape(-1, 3) for x in frames]
    fmt = EXPORT_CONFIG['float_format']
    if topology.kind == TopologyKind.ROD_SET:
        records = [('l', np.arange(start, stop)) for start, stop in topology.strands]
    elif topology.kind == TopologyKind.TRI_MESH:
        records = [('f', tri) for tri in topology.elements]
    else:
        faces = boundary_faces(topology, frames[0]) if frames else np.zeros((0, 3), dtype=np.int64)
        records = [('f', face) for face in faces]
    element_lines = [f"{tag} " + " ".join(str(int(i) + 1) for i in indices) for tag, indices in records]

    paths = []
    try:
        os.makedirs(directory, exist_ok=True)
        for t, points in enumerate(frames):
            path = os.path.join(directory, EXPORT_CONFIG['file_pattern'].format(t))
            with open(path, 'w') as f:
                for point in points:
                    f.write("v " + " ".join(fmt.format(c) for c in point) + "\n")
                for line in element_lines:
                    f.write(line + "\n")
            paths.append(path)
    except OSError as e:
        raise ExportIoError(f"Could not export OBJ sequence to {directory}: {e}")
    return paths
