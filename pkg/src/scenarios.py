import numpy as np
from enum import Enum
from typing import Callable, Dict, List, Optional, Tuple, Any
from dataclasses import dataclass, field, replace
from concurrent.futures import ThreadPoolExecutor

from config import SCENARIO_CONFIG, MATERIAL_PRESETS, AUTOENCODER_CONFIG, INTEGRATOR_CONFIG, RUNTIME_CONFIG
from log_utils import setup_logger
from sim_types import (
    MaterialParams, BcMode, StateSequence, UnknownScenario, ConfigError
)
from geometry import SimObject, build_sim_object
from implicit_solver import ImplicitSolver
import mesh_generators


class BcScriptKind(Enum):
    """Boundary-condition script families"""
    TRANSLATION_REVERSING = "translation_reversing"
    CONSTANT_ROTATION = "constant_rotation"
    LINEAR_TRAJECTORY = "linear_trajectory"
    SINUSOIDAL_TRAJECTORY = "sinusoidal_trajectory"
    STATIC = "static"


class BcParamKind(Enum):
    """What the per-frame BC parameter vector p_t encodes"""
    VELOCITY = "velocity"
    ANGULAR_SPEED = "angular_speed"
    DISPLACEMENT = "displacement"


class SplitRule(Enum):
    BY_SEQUENCE = "by_sequence"
    BY_PREFIX = "by_prefix"


# Direction cycle for piecewise-linear anchor trajectories
_SEGMENT_DIRECTIONS = np.array([
    [0.0, 0.0, 1.0],
    [1.0, 0.0, 0.0],
    [0.0, 0.0, -1.0],
    [-1.0, 0.0, 0.0],
])


@dataclass
class BcScript:
    """
    One scripted Dirichlet motion. Speeds are stored in m/s, angular speeds in rad/s.
    """
    kind: BcScriptKind
    label: str = ""
    speed: float = 0.0
    direction: Tuple[float, float, float] = (1.0, 0.0, 0.0)
    period_frames: int = 10
    switch_frame: Optional[int] = None          # speed change for generalization scripts
    switch_speed: float = 0.0
    omega: float = 0.0
    segment_velocities: List[Tuple[float, float, float]] = field(default_factory=list)
    segment_frames: int = 25
    amplitude: float = 0.0
    chirp: float = 0.0
    frames: int = 100

    def velocity(self, t: int, dt: float) -> np.ndarray:
        """Velocity of the translating anchors applied between frames t-1 and t"""
        direction = np.asarray(self.direction, dtype=np.float64)
        if self.kind == BcScriptKind.TRANSLATION_REVERSING:
            speed = self.speed
            if self.switch_frame is not None and t >= self.switch_frame:
                speed = self.switch_speed
            sign = 1.0 if (t // self.period_frames) % 2 == 0 else -1.0
            return sign * speed * direction
        if self.kind == BcScriptKind.LINEAR_TRAJECTORY:
            if not self.segment_velocities:
                return np.zeros(3)
            segment = min(t // self.segment_frames, len(self.segment_velocities) - 1)
            return np.asarray(self.segment_velocities[segment], dtype=np.float64)
        if self.kind == BcScriptKind.SINUSOIDAL_TRAJECTORY:
            if t == 0:
                return np.zeros(3)
            return (self.displacement(t, dt) - self.displacement(t - 1, dt)) / dt
        return np.zeros(3)

    def displacement(self, t: int, dt: float) -> np.ndarray:
        """Anchor translation at frame t relative to frame 0"""
        if self.kind == BcScriptKind.SINUSOIDAL_TRAJECTORY:
            direction = np.asarray(self.direction, dtype=np.float64)
            return self.amplitude * np.sin(self.phase(t)) * direction
        if self.kind in (BcScriptKind.TRANSLATION_REVERSING, BcScriptKind.LINEAR_TRAJECTORY):
            total = np.zeros(3)
            for s in range(1, t + 1):
                total = total + self.velocity(s, dt) * dt
            return total
        return np.zeros(3)

    def phase(self, t: int) -> float:
        """Chirped phase: frequency ramps from 1/period to (1 + chirp)/period over the sequence"""
        horizon = max(self.frames, 1)
        return 2.0 * np.pi * (t / self.period_frames) * (1.0 + 0.5 * self.chirp * t / horizon)

    def angle(self, t: int, dt: float) -> float:
        if self.kind == BcScriptKind.CONSTANT_ROTATION:
            return self.omega * t * dt
        return 0.0

    def to_dict(self) -> Dict[str, Any]:
        return {
            'kind': self.kind.value,
            'label': self.label,
            'speed': self.speed,
            'direction': list(self.direction),
            'period_frames': self.period_frames,
            'switch_frame': self.switch_frame,
            'switch_speed': self.switch_speed,
            'omega': self.omega,
            'segment_velocities': [list(v) for v in self.segment_velocities],
            'segment_frames': self.segment_frames,
            'amplitude': self.amplitude,
            'chirp': self.chirp,
            'frames': self.frames,
        }


@dataclass
class ScenarioSpec:
    """Declarative scenario: mesh generator, material, BC scripts and learning defaults"""
    name: str
    generator: Callable[[], Tuple[Any, np.ndarray, np.ndarray]]
    material: MaterialParams
    sequences: List[BcScript]
    bc_dim: int
    frames: int
    bc_param_kind: BcParamKind
    dt: float = SCENARIO_CONFIG['dt']
    eval_scripts: List[BcScript] = field(default_factory=list)
    simulation_bc_mode: BcMode = BcMode.ELIMINATION
    loss_uses_bc: bool = True
    bc_penalty_weight: float = SCENARIO_CONFIG['bc_penalty_weight']
    split_rule: SplitRule = SplitRule.BY_SEQUENCE
    train_fraction: float = 1.0
    train_frames: Optional[int] = None
    test_sequences: Tuple[int, ...] = ()
    latent_dim: int = 4
    ae_hidden: List[int] = field(default_factory=lambda: [200, 200, 200])
    integrator_hidden: List[int] = field(default_factory=lambda: [256, 256, 256])

    def __post_init__(self):
        if self.frames < 3:
            raise ConfigError("A scenario needs at least 3 frames")
        expected = 1 if self.bc_param_kind == BcParamKind.ANGULAR_SPEED else 3
        if self.bc_dim != expected:
            raise ConfigError(f"bc_dim {self.bc_dim} does not match {self.bc_param_kind.value} parameters")

    @property
    def bc_script(self) -> BcScriptKind:
        return self.sequences[0].kind

    def build_object(self) -> SimObject:
        topology, points, dirichlet = self.generator()
        return build_sim_object(topology, points, self.material, dirichlet, name=self.name)

    def bc_params_at(self, t: int, script: Optional[BcScript] = None) -> np.ndarray:
        script = script or self.sequences[0]
        if self.bc_param_kind == BcParamKind.VELOCITY:
            return script.velocity(t, self.dt)
        if self.bc_param_kind == BcParamKind.ANGULAR_SPEED:
            return np.array([script.omega])
        return script.displacement(t, self.dt)

    def rigid_motion(self, points: np.ndarray, anchor_center: np.ndarray, t: int,
                     script: BcScript) -> np.ndarray:
        """Apply the script's frame-t rigid transform to (K, 3) points"""
        if script.kind == BcScriptKind.CONSTANT_ROTATION:
            theta = script.angle(t, self.dt)
            c, s = np.cos(theta), np.sin(theta)
            rotation = np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])
            return (points - anchor_center) @ rotation.T + anchor_center
        return points + script.displacement(t, self.dt)

    def dirichlet_targets(self, sim_object: SimObject, t: int,
                          script: Optional[BcScript] = None) -> Tuple[np.ndarray, np.ndarray]:
        """(indices, (K, 3) targets) of the scripted vertices at frame t"""
        script = script or self.sequences[0]
        indices = sim_object.dirichlet
        rest = sim_object.rest.positions
        center = anchor_center(sim_object)
        return indices, self.rigid_motion(rest[indices], center, t, script)

    def start_frames(self, sim_object: SimObject,
                     script: Optional[BcScript] = None) -> Tuple[np.ndarray, np.ndarray]:
        """Frame 0 is the rest shape; frame 1 is the rest shape moved by the frame-1 BC"""
        script = script or self.sequences[0]
        rest = sim_object.rest.positions
        center = anchor_center(sim_object)
        x0 = self.rigid_motion(rest, center, 0, script).reshape(-1)
        x1 = self.rigid_motion(rest, center, 1, script).reshape(-1)
        return x0, x1

    def to_dict(self) -> Dict[str, Any]:
        return {
            'name': self.name,
            'material': self.material.to_dict(),
            'sequences': [s.to_dict() for s in self.sequences],
            'eval_scripts': [s.to_dict() for s in self.eval_scripts],
            'bc_dim': self.bc_dim,
            'frames': self.frames,
            'dt': self.dt,
            'bc_param_kind': self.bc_param_kind.value,
            'simulation_bc_mode': self.simulation_bc_mode.value,
            'loss_uses_bc': self.loss_uses_bc,
            'bc_penalty_weight': self.bc_penalty_weight,
            'split_rule': self.split_rule.value,
            'train_fraction': self.train_fraction,
            'train_frames': self.train_frames,
            'latent_dim': self.latent_dim,
            'ae_hidden': list(self.ae_hidden),
            'integrator_hidden': list(self.integrator_hidden),
        }


@dataclass
class DatasetSplit:
    """Train/test sequences and the rule that produced them"""
    train: List[StateSequence]
    test: List[StateSequence]
    rule: SplitRule
    boundary: Optional[int] = None


def anchor_center(sim_object: SimObject) -> np.ndarray:
    """Centroid of the Dirichlet vertices at rest (rotation axis passes through it)"""
    rest = sim_object.rest.positions
    if sim_object.dirichlet.size == 0:
        return rest.mean(axis=0)
    return rest[sim_object.dirichlet].mean(axis=0)


SCENARIO_NAMES = (
    'rod-translation', 'rod-rotation', 'cloth-pinned',
    'beam-cantilever', 'solid-swing', 'bunny-ears-like',
)


def _material(preset: str, overrides: Optional[Dict[str, Any]]) -> MaterialParams:
    data = dict(MATERIAL_PRESETS[preset])
    data.update(overrides or {})
    return MaterialParams.from_dict(data)


def _learning_defaults(name: str) -> Dict[str, Any]:
    return {
        'latent_dim': AUTOENCODER_CONFIG['latent_dim'][name],
        'ae_hidden': list(AUTOENCODER_CONFIG['hidden'][name]),
        'integrator_hidden': list(INTEGRATOR_CONFIG['hidden'][name]),
    }


def build_scenario(name: str, overrides: Optional[Dict[str, Any]] = None) -> ScenarioSpec:
    """
    Build one of the built-in scenarios

    Args:
        name: Scenario name (see SCENARIO_NAMES)
        overrides: Optional values from a JSON scenario config ('frames', 'speeds',
            'material', 'latent_dim', 'ae_hidden', 'integrator_hidden', ...)

    Returns:
        Fully populated ScenarioSpec
    """
    cfg = dict(SCENARIO_CONFIG)
    overrides = dict(overrides or {})
    material_overrides = overrides.pop('material', None)
    learning = _learning_defaults(name) if name in SCENARIO_NAMES else {}
    for key in ('latent_dim', 'ae_hidden', 'integrator_hidden'):
        if key in overrides:
            learning[key] = overrides.pop(key)
    cfg.update(overrides)
    dt = cfg['dt']

    if name == 'rod-translation':
        unit = cfg['speed_unit']
        frames = cfg.get('frames', cfg['rod_frames'])
        speeds = cfg.get('speeds', cfg['rod_translation_speeds'])
        period = cfg['rod_translation_period']
        sequences = [BcScript(BcScriptKind.TRANSLATION_REVERSING, label=f"speed-{s:g}",
                              speed=s * unit, period_frames=period, frames=frames)
                     for s in speeds]
        eval_scripts = [
            BcScript(BcScriptKind.TRANSLATION_REVERSING, label="speed-45",
                     speed=45 * unit, period_frames=period, frames=300),
            BcScript(BcScriptKind.TRANSLATION_REVERSING, label="speed-140-to--60",
                     speed=140 * unit, period_frames=period, switch_frame=150,
                     switch_speed=-60 * unit, frames=300),
        ]
        return ScenarioSpec(name, mesh_generators.rod_grid, _material('hair', material_overrides),
                            sequences, bc_dim=3, frames=frames, dt=dt,
                            bc_param_kind=BcParamKind.VELOCITY, eval_scripts=eval_scripts,
                            loss_uses_bc=False, split_rule=SplitRule.BY_SEQUENCE, **learning)

    if name == 'rod-rotation':
        unit = cfg['angular_speed_unit']
        frames = cfg.get('frames', cfg['rod_frames'])
        speeds = cfg.get('speeds', cfg['rod_rotation_speeds'])
        sequences = [BcScript(BcScriptKind.CONSTANT_ROTATION, label=f"omega-{w:g}",
                              omega=w * unit, frames=frames) for w in speeds]
        eval_scripts = [
            BcScript(BcScriptKind.CONSTANT_ROTATION, label="omega-0.275", omega=0.275 * unit, frames=300),
            BcScript(BcScriptKind.CONSTANT_ROTATION, label="omega-0.6", omega=0.6 * unit, frames=300),
        ]
        return ScenarioSpec(name, mesh_generators.rod_grid, _material('hair', material_overrides),
                            sequences, bc_dim=1, frames=frames, dt=dt,
                            bc_param_kind=BcParamKind.ANGULAR_SPEED, eval_scripts=eval_scripts,
                            loss_uses_bc=False, split_rule=SplitRule.BY_SEQUENCE, **learning)

    if name == 'cloth-pinned':
        frames = cfg.get('frames', cfg['cloth_frames'])
        profile = cfg['cloth_speed_profile']
        velocities = [tuple(speed * _SEGMENT_DIRECTIONS[k % len(_SEGMENT_DIRECTIONS)])
                      for k, speed in enumerate(profile)]
        script = BcScript(BcScriptKind.LINEAR_TRAJECTORY, label="profile",
                          segment_velocities=velocities,
                          segment_frames=cfg['cloth_segment_frames'], frames=frames)
        reversed_script = replace(script, label="profile-reversed",
                                  segment_velocities=velocities[::-1])
        return ScenarioSpec(name, mesh_generators.cloth_grid, _material('cloth', material_overrides),
                            [script], bc_dim=3, frames=frames, dt=dt,
                            bc_param_kind=BcParamKind.DISPLACEMENT, eval_scripts=[reversed_script],
                            loss_uses_bc=True, split_rule=SplitRule.BY_PREFIX,
                            train_fraction=cfg['cloth_train_fraction'], **learning)

    if name == 'beam-cantilever':
        frames = cfg.get('frames', cfg['beam_frames'])
        script = BcScript(BcScriptKind.STATIC, label="static", frames=frames)
        return ScenarioSpec(name, mesh_generators.beam_tet_grid, _material('beam', material_overrides),
                            [script], bc_dim=3, frames=frames, dt=dt,
                            bc_param_kind=BcParamKind.DISPLACEMENT,
                            loss_uses_bc=True, split_rule=SplitRule.BY_PREFIX,
                            train_frames=cfg.get('train_frames', cfg['beam_train_frames']), **learning)

    if name in ('solid-swing', 'bunny-ears-like'):
        prefix = 'solid' if name == 'solid-swing' else 'ears'
        frames = cfg.get('frames', cfg[f'{prefix}_frames'])
        script = BcScript(BcScriptKind.SINUSOIDAL_TRAJECTORY, label="swing",
                          amplitude=cfg[f'{prefix}_amplitude'],
                          period_frames=cfg[f'{prefix}_period_frames'],
                          chirp=cfg[f'{prefix}_chirp'], frames=frames)
        slower = replace(script, label="swing-slow", period_frames=int(1.5 * script.period_frames))
        generator = mesh_generators.two_lobe_solid if name == 'solid-swing' else mesh_generators.two_ear_solid
        return ScenarioSpec(name, generator, _material(prefix if prefix == 'ears' else 'solid', material_overrides),
                            [script], bc_dim=3, frames=frames, dt=dt,
                            bc_param_kind=BcParamKind.DISPLACEMENT, eval_scripts=[slower],
                            loss_uses_bc=True, split_rule=SplitRule.BY_PREFIX,
                            train_fraction=cfg['solid_train_fraction'], **learning)

    raise UnknownScenario(f"Unknown scenario '{name}'", name=name)


def bc_params_at(spec: ScenarioSpec, t: int, script: Optional[BcScript] = None) -> np.ndarray:
    """BC parameter vector p_t"""
    return spec.bc_params_at(t, script)


def dirichlet_targets(spec: ScenarioSpec, sim_object: SimObject, t: int,
                      script: Optional[BcScript] = None) -> Tuple[np.ndarray, np.ndarray]:
    return spec.dirichlet_targets(sim_object, t, script)


def start_frames(spec: ScenarioSpec, sim_object: SimObject,
                 script: Optional[BcScript] = None) -> Tuple[np.ndarray, np.ndarray]:
    return spec.start_frames(sim_object, script)


def generate_dataset(spec: ScenarioSpec, scripts: Optional[List[BcScript]] = None,
                     sim_object: Optional[SimObject] = None, solver: Any = None,
                     max_workers: Optional[int] = None) -> List[StateSequence]:
    """
    Simulate every scripted sequence of a scenario

    Sequences run in parallel on a thread pool; results keep the script order.
    """
    logger = setup_logger('DatasetGenerator', 'dataset.log')
    scripts = scripts if scripts is not None else spec.sequences
    sim_object = sim_object or spec.build_object()
    solver = solver or ImplicitSolver()
    max_workers = max_workers or RUNTIME_CONFIG['threads']

    def run(script: BcScript) -> StateSequence:
        frames = script.frames if script.frames >= 3 else spec.frames
        return solver.simulate(sim_object, None, spec, frames, script)

    logger.info(f"Generating {len(scripts)} sequences for {spec.name} with {max_workers} workers")
    with ThreadPoolExecutor(max_workers=max_workers) as executor:
        futures = [executor.submit(run, script) for script in scripts]
        sequences = [future.result() for future in futures]
    return sequences


def split_dataset(sequences: List[StateSequence], spec: ScenarioSpec,
                  test_indices: Optional[Tuple[int, ...]] = None) -> DatasetSplit:
    """
    Split according to the scenario's rule

    BY_SEQUENCE: the listed sequences are held out entirely.
    BY_PREFIX: training keeps the first frames of every sequence; the test set is the full sequences.
    """
    if spec.split_rule == SplitRule.BY_SEQUENCE:
        held_out = set(spec.test_sequences if test_indices is None else test_indices)
        train = [s for i, s in enumerate(sequences) if i not in held_out]
        test = [s for i, s in enumerate(sequences) if i in held_out]
        return DatasetSplit(train=train, test=test, rule=SplitRule.BY_SEQUENCE)

    train, boundary = [], None
    for sequence in sequences:
        length = len(sequence)
        if spec.train_frames is not None:
            boundary = spec.train_frames
        else:
            boundary = int(round(spec.train_fraction * length))
        boundary = min(max(boundary, 3), length - 1)
        train.append(StateSequence(frames=sequence.frames[:boundary], dt=sequence.dt,
                                   scenario=sequence.scenario, topology=sequence.topology,
                                   bc_dim=sequence.bc_dim))
    return DatasetSplit(train=train, test=list(sequences), rule=SplitRule.BY_PREFIX, boundary=boundary)
