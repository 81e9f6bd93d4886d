from enum import Enum
from typing import Dict, List, Optional, Any, Tuple
from dataclasses import dataclass, field
import numpy as np


class SubDynError(Exception):
    """Base class for every domain error; carries a stable error code"""
    error_code = "SUBDYN_ERROR"

    def __init__(self, message: str = "", **details):
        super().__init__(message)
        self.message = message
        self.details = details


class InvalidTopology(SubDynError):
    error_code = "INVALID_TOPOLOGY"


class DegenerateElement(SubDynError):
    error_code = "DEGENERATE_ELEMENT"


class ZeroLengthEdge(SubDynError):
    error_code = "ZERO_LENGTH_EDGE"


class AntiparallelEdges(SubDynError):
    error_code = "ANTIPARALLEL_EDGES"


class DegenerateTriangle(SubDynError):
    error_code = "DEGENERATE_TRIANGLE"


class DegenerateHinge(SubDynError):
    error_code = "DEGENERATE_HINGE"


class FormatVersionMismatch(SubDynError):
    error_code = "FORMAT_VERSION_MISMATCH"


class TruncatedFile(SubDynError):
    error_code = "TRUNCATED_FILE"


class LinearSolveFailure(SubDynError):
    error_code = "LINEAR_SOLVE_FAILURE"


class LineSearchFailure(SubDynError):
    error_code = "LINE_SEARCH_FAILURE"


class SimulationFailure(SubDynError):
    error_code = "SIMULATION_FAILURE"

    def __init__(self, message: str = "", frame: int = -1, **details):
        super().__init__(f"frame {frame}: {message}", frame=frame, **details)
        self.frame = frame


class UnknownScenario(SubDynError):
    error_code = "UNKNOWN_SCENARIO"


class BatchTooSmall(SubDynError):
    error_code = "BATCH_TOO_SMALL"


class RankDeficient(SubDynError):
    error_code = "RANK_DEFICIENT"


class DivergedLoss(SubDynError):
    error_code = "DIVERGED_LOSS"

    def __init__(self, message: str = "", report: Any = None, **details):
        super().__init__(message, **details)
        self.report = report


class MissingBcValues(SubDynError):
    error_code = "MISSING_BC_VALUES"


class NonFiniteLatent(SubDynError):
    error_code = "NON_FINITE_LATENT"

    def __init__(self, message: str = "", step: int = -1, **details):
        super().__init__(f"step {step}: {message}", step=step, **details)
        self.step = step


class LengthMismatch(SubDynError):
    error_code = "LENGTH_MISMATCH"


class ExportIoError(SubDynError):
    error_code = "EXPORT_IO_ERROR"


class ConfigError(SubDynError):
    error_code = "CONFIG_ERROR"


class TopologyKind(Enum):
    """Discretization families"""
    ROD_SET = "rod_set"
    TRI_MESH = "tri_mesh"
    TET_MESH = "tet_mesh"


class BcMode(Enum):
    """How Dirichlet conditions enter the full-space objective"""
    ELIMINATION = "elimination"
    PENALTY = "penalty"


@dataclass
class MaterialParams:
    """Elastic material and external load parameters"""
    youngs_modulus: float
    poisson_ratio: float
    density: float
    rod_radius: float = 0.0
    shell_thickness: float = 0.0
    gravity: Tuple[float, float, float] = (0.0, -9.81, 0.0)

    def __post_init__(self):
        if self.youngs_modulus <= 0:
            raise ConfigError("youngs_modulus must be positive")
        if not 0.0 < self.poisson_ratio < 0.5:
            raise ConfigError("poisson_ratio must lie in (0, 0.5)")
        if self.density <= 0:
            raise ConfigError("density must be positive")
        self.gravity = tuple(float(g) for g in self.gravity)

    @property
    def mu(self) -> float:
        return self.youngs_modulus / (2.0 * (1.0 + self.poisson_ratio))

    @property
    def lam(self) -> float:
        nu = self.poisson_ratio
        return self.youngs_modulus * nu / ((1.0 + nu) * (1.0 - 2.0 * nu))

    @property
    def gravity_vector(self) -> np.ndarray:
        return np.asarray(self.gravity, dtype=np.float64)

    @property
    def stretch_stiffness(self) -> float:
        """k_s = E * pi * r^2"""
        return self.youngs_modulus * np.pi * self.rod_radius ** 2

    @property
    def bend_stiffness(self) -> float:
        """k_b = E * pi * r^4 / 4"""
        return self.youngs_modulus * np.pi * self.rod_radius ** 4 / 4.0

    @property
    def hinge_stiffness(self) -> float:
        """Plate bending stiffness E h^3 / (12 (1 - nu^2))"""
        h = self.shell_thickness
        return self.youngs_modulus * h ** 3 / (12.0 * (1.0 - self.poisson_ratio ** 2))

    def to_dict(self) -> Dict[str, Any]:
        return {
            'youngs_modulus': self.youngs_modulus,
            'poisson_ratio': self.poisson_ratio,
            'density': self.density,
            'rod_radius': self.rod_radius,
            'shell_thickness': self.shell_thickness,
            'gravity': list(self.gravity),
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> 'MaterialParams':
        return cls(
            youngs_modulus=data['youngs_modulus'],
            poisson_ratio=data['poisson_ratio'],
            density=data['density'],
            rod_radius=data.get('rod_radius', 0.0),
            shell_thickness=data.get('shell_thickness', 0.0),
            gravity=tuple(data.get('gravity', (0.0, -9.81, 0.0))),
        )


@dataclass
class Topology:
    """Connectivity of a rod set, triangle mesh or tet mesh"""
    kind: TopologyKind
    num_vertices: int
    elements: np.ndarray
    strands: List[Tuple[int, int]] = field(default_factory=list)  # (start, stop) runs

    def __post_init__(self):
        self.elements = np.asarray(self.elements, dtype=np.int64)
        self.strands = [(int(a), int(b)) for a, b in self.strands]
        is_valid, error = TopologyValidator().validate(self)
        if not is_valid:
            raise InvalidTopology(error)

    @classmethod
    def rod_set(cls, strands: List[Tuple[int, int]]) -> 'Topology':
        """Build a rod set whose edges connect consecutive vertices of each strand"""
        edges = [(i, i + 1) for start, stop in strands for i in range(start, stop - 1)]
        num_vertices = max(stop for _, stop in strands) if strands else 0
        return cls(TopologyKind.ROD_SET, num_vertices,
                   np.asarray(edges, dtype=np.int64).reshape(-1, 2), strands)

    @property
    def dofs(self) -> int:
        return 3 * self.num_vertices

    def roots(self) -> np.ndarray:
        """First vertex of every strand"""
        return np.asarray([start for start, _ in self.strands], dtype=np.int64)

    def to_dict(self) -> Dict[str, Any]:
        return {
            'kind': self.kind.value,
            'num_vertices': self.num_vertices,
            'elements': self.elements.tolist(),
            'strands': [list(s) for s in self.strands],
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> 'Topology':
        kind = TopologyKind(data['kind'])
        width = {TopologyKind.ROD_SET: 2, TopologyKind.TRI_MESH: 3, TopologyKind.TET_MESH: 4}[kind]
        return cls(
            kind=kind,
            num_vertices=data['num_vertices'],
            elements=np.asarray(data['elements'], dtype=np.int64).reshape(-1, width),
            strands=[tuple(s) for s in data.get('strands', [])],
        )


class TopologyValidator:
    """Checks index ranges, degenerate elements and strand layout"""

    ELEMENT_WIDTH = {TopologyKind.ROD_SET: 2, TopologyKind.TRI_MESH: 3, TopologyKind.TET_MESH: 4}

    def validate(self, topology: Topology) -> Tuple[bool, str]:
        """
        Validate a topology

        Returns:
            Tuple of (is_valid, error_message)
        """
        elements = topology.elements
        width = self.ELEMENT_WIDTH[topology.kind]

        if elements.ndim != 2 or elements.shape[1] != width:
            return False, f"{topology.kind.value} elements must have {width} indices"

        if elements.size:
            if elements.min() < 0 or elements.max() >= topology.num_vertices:
                return False, "Element index out of range"
            sorted_elements = np.sort(elements, axis=1)
            if np.any(sorted_elements[:, 1:] == sorted_elements[:, :-1]):
                return False, "Degenerate element with a repeated vertex index"

        if topology.kind == TopologyKind.ROD_SET:
            return self._validate_strands(topology)

        return True, ""

    def _validate_strands(self, topology: Topology) -> Tuple[bool, str]:
        covered = np.zeros(topology.num_vertices, dtype=bool)
        for start, stop in topology.strands:
            if stop - start < 3:
                return False, f"Strand [{start}, {stop}) has fewer than 3 vertices"
            if start < 0 or stop > topology.num_vertices:
                return False, f"Strand [{start}, {stop}) out of range"
            if np.any(covered[start:stop]):
                return False, f"Strand [{start}, {stop}) overlaps another strand"
            covered[start:stop] = True
        return True, ""


STORAGE_DTYPE = np.dtype("<f4")


def to_storage_precision(values: np.ndarray) -> np.ndarray:
    """float64 copy holding only values that SDSQ1 stores exactly"""
    return np.asarray(values, dtype=np.float64).astype(STORAGE_DTYPE).astype(np.float64)


@dataclass
class Frame:
    """
    One timestep: flat positions and BC parameters

    Values are held at dataset storage precision so a sequence reads back from disk unchanged.
    """
    t: int
    x: np.ndarray
    p: np.ndarray

    def __post_init__(self):
        self.x = to_storage_precision(self.x)
        self.p = to_storage_precision(self.p)


@dataclass
class StateSequence:
    """Ordered frames sharing a topology and a uniform timestep"""
    frames: List[Frame]
    dt: float
    scenario: str
    topology: Optional[Topology] = None
    bc_dim: int = 0

    def __post_init__(self):
        for i, frame in enumerate(self.frames):
            if frame.t != i:
                raise ConfigError(f"Frame indices must be consecutive from 0 (got {frame.t} at {i})")
            if self.topology is not None and frame.x.shape != (self.topology.dofs,):
                raise ConfigError(f"Frame {i} has {frame.x.size} scalars, expected {self.topology.dofs}")
            if frame.p.shape != (self.bc_dim,):
                raise ConfigError(f"Frame {i} BC vector has length {frame.p.size}, expected {self.bc_dim}")

    def positions(self) -> np.ndarray:
        """(T, 3N) array of positions"""
        return np.stack([f.x for f in self.frames]) if self.frames else np.zeros((0, 0))

    def bc_params(self) -> np.ndarray:
        """(T, bc_dim) array of BC parameters"""
        return np.stack([f.p for f in self.frames]) if self.frames else np.zeros((0, self.bc_dim))

    def __len__(self) -> int:
        return len(self.frames)
