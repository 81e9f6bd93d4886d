import numpy as np
from typing import Dict, List, Optional, Tuple, Any
from dataclasses import dataclass, field
from sim_types import (
    Topology, TopologyKind, MaterialParams, DegenerateElement, InvalidTopology
)

_EMPTY_F = np.zeros(0)
_EMPTY_I = np.zeros((0, 0), dtype=np.int64)


@dataclass
class RestState:
    """
    Rest configuration X and the per-element quantities derived from it.

    Only the arrays relevant to the topology kind are populated; the rest stay empty.
    """
    positions: np.ndarray                                    # (N, 3)
    elements: np.ndarray = field(default_factory=lambda: _EMPTY_I)      # edges, triangles or tets
    edge_lengths: np.ndarray = field(default_factory=lambda: _EMPTY_F)
    bend_stencils: np.ndarray = field(default_factory=lambda: _EMPTY_I)  # (B, 3) rod vertex triples
    bend_rest_lengths: np.ndarray = field(default_factory=lambda: _EMPTY_F)  # (B, 2)
    tri_rest_inv: np.ndarray = field(default_factory=lambda: _EMPTY_F)   # (T, 2, 2)
    tri_areas: np.ndarray = field(default_factory=lambda: _EMPTY_F)
    hinges: np.ndarray = field(default_factory=lambda: _EMPTY_I)         # (H, 4)
    hinge_rest_angles: np.ndarray = field(default_factory=lambda: _EMPTY_F)
    hinge_edge_lengths: np.ndarray = field(default_factory=lambda: _EMPTY_F)
    hinge_areas: np.ndarray = field(default_factory=lambda: _EMPTY_F)   # one third of the two rest areas
    tet_rest_inv: np.ndarray = field(default_factory=lambda: _EMPTY_F)   # (T, 3, 3)
    tet_volumes: np.ndarray = field(default_factory=lambda: _EMPTY_F)

    @property
    def flat(self) -> np.ndarray:
        return self.positions.reshape(-1)


@dataclass
class SimObject:
    """Everything the energies need about one simulated body"""
    topology: Topology
    rest: RestState
    masses: np.ndarray
    material: MaterialParams
    dirichlet: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    name: str = ""

    def __post_init__(self):
        self.dirichlet = np.asarray(self.dirichlet, dtype=np.int64)
        if len(np.unique(self.dirichlet)) != len(self.dirichlet):
            raise InvalidTopology("Dirichlet vertex indices must be unique")
        if self.dirichlet.size and (self.dirichlet.min() < 0 or
                                    self.dirichlet.max() >= self.topology.num_vertices):
            raise InvalidTopology("Dirichlet vertex index out of range")

    @property
    def num_vertices(self) -> int:
        return self.topology.num_vertices

    @property
    def dofs(self) -> int:
        return self.topology.dofs

    def bbox_diagonal(self) -> float:
        X = self.rest.positions
        return float(np.linalg.norm(X.max(axis=0) - X.min(axis=0)))


def as_points(x: np.ndarray) -> np.ndarray:
    """View a flat (..., 3N) array as (..., N, 3)"""
    x = np.asarray(x, dtype=np.float64)
    return x.reshape(x.shape[:-1] + (-1, 3))


def dihedral_angles(points: np.ndarray, hinges: np.ndarray) -> np.ndarray:
    """
    Signed dihedral angle per hinge (p0, p1, p2, p3): p0-p1 is the shared edge,
    p2 lies on triangle (p0, p1, p2) and p3 on triangle (p1, p0, p3).

    Works on (N, 3) or batched (B, N, 3) points.
    """
    p0 = points[..., hinges[:, 0], :]
    p1 = points[..., hinges[:, 1], :]
    p2 = points[..., hinges[:, 2], :]
    p3 = points[..., hinges[:, 3], :]
    e = p1 - p0
    n_a = np.cross(e, p2 - p0)
    n_b = np.cross(p3 - p0, e)
    e_hat = e / np.linalg.norm(e, axis=-1, keepdims=True)
    sin_term = np.einsum('...i,...i->...', np.cross(n_a, n_b), e_hat)
    cos_term = np.einsum('...i,...i->...', n_a, n_b)
    return np.arctan2(sin_term, cos_term)


def extract_hinges(triangles: np.ndarray) -> np.ndarray:
    """
    Interior-edge hinges of a consistently oriented triangle list.

    Returns:
        (H, 4) array ordered by first appearance of the edge
    """
    half_edges: Dict[Tuple[int, int], List[Tuple[int, int, int]]] = {}
    order: List[Tuple[int, int]] = []
    for tri in triangles:
        a, b, c = (int(v) for v in tri)
        for u, v, w in ((a, b, c), (b, c, a), (c, a, b)):
            key = (min(u, v), max(u, v))
            if key not in half_edges:
                half_edges[key] = []
                order.append(key)
            half_edges[key].append((u, v, w))

    hinges = []
    for key in order:
        sides = half_edges[key]
        if len(sides) != 2:
            continue
        (u, v, w_a), (u2, v2, w_b) = sides
        if (u2, v2) != (v, u):
            raise InvalidTopology(f"Inconsistent triangle orientation across edge {key}")
        hinges.append((u, v, w_a, w_b))
    return np.asarray(hinges, dtype=np.int64).reshape(-1, 4)


def boundary_faces(topology: Topology, X: np.ndarray) -> np.ndarray:
    """Outward-oriented triangles that belong to exactly one tetrahedron"""
    points = np.asarray(X, dtype=np.float64).reshape(-1, 3)
    local_faces = ((1, 2, 3), (0, 3, 2), (0, 1, 3), (0, 2, 1))
    counts: Dict[Tuple[int, int, int], int] = {}
    oriented: Dict[Tuple[int, int, int], Tuple[int, int, int]] = {}
    for tet in topology.elements:
        a, b, c, d = points[tet]
        positive = np.dot(np.cross(b - a, c - a), d - a) > 0
        for f in local_faces:
            face = tuple(int(tet[i]) for i in f)
            if not positive:
                face = (face[0], face[2], face[1])
            key = tuple(sorted(face))
            counts[key] = counts.get(key, 0) + 1
            oriented.setdefault(key, face)
    faces = [oriented[k] for k, n in counts.items() if n == 1]
    return np.asarray(faces, dtype=np.int64).reshape(-1, 3)


def precompute_rest(topology: Topology, X: np.ndarray, density: float,
                    aux: Optional[Dict[str, Any]] = None) -> Tuple[RestState, np.ndarray]:
    """
    Precompute rest quantities and lumped vertex masses

    Args:
        topology: Validated topology
        X: Rest positions, flat (3N,) or (N, 3), meters
        density: Mass density (kg/m^3)
        aux: 'rod_radius' for rods, 'shell_thickness' for shells

    Returns:
        Tuple of (RestState, per-vertex masses)
    """
    aux = aux or {}
    if density <= 0:
        raise DegenerateElement("density must be positive")
    points = np.asarray(X, dtype=np.float64).reshape(-1, 3).copy()
    if points.shape[0] != topology.num_vertices:
        raise InvalidTopology(f"Expected {topology.num_vertices} rest positions, got {points.shape[0]}")

    masses = np.zeros(topology.num_vertices)
    rest = RestState(positions=points, elements=topology.elements)

    if topology.kind == TopologyKind.ROD_SET:
        radius = aux.get('rod_radius', 0.0)
        if radius <= 0:
            raise DegenerateElement("rod_radius must be positive")
        edges = topology.elements
        lengths = np.linalg.norm(points[edges[:, 1]] - points[edges[:, 0]], axis=1)
        if lengths.size and lengths.min() <= 0:
            raise DegenerateElement("Rod edge with non-positive rest length")
        edge_mass = density * np.pi * radius ** 2 * lengths
        np.add.at(masses, edges[:, 0], 0.5 * edge_mass)
        np.add.at(masses, edges[:, 1], 0.5 * edge_mass)
        rest.edge_lengths = lengths

        stencils = [(i - 1, i, i + 1) for start, stop in topology.strands
                    for i in range(start + 1, stop - 1)]
        stencils = np.asarray(stencils, dtype=np.int64).reshape(-1, 3)
        rest.bend_stencils = stencils
        rest.bend_rest_lengths = np.stack([
            np.linalg.norm(points[stencils[:, 1]] - points[stencils[:, 0]], axis=1),
            np.linalg.norm(points[stencils[:, 2]] - points[stencils[:, 1]], axis=1),
        ], axis=1)

    elif topology.kind == TopologyKind.TRI_MESH:
        thickness = aux.get('shell_thickness', 0.0)
        if thickness <= 0:
            raise DegenerateElement("shell_thickness must be positive")
        tris = topology.elements
        rest_inv, areas = _triangle_rest_metric(points, tris)
        tri_mass = density * thickness * areas
        for k in range(3):
            np.add.at(masses, tris[:, k], tri_mass / 3.0)
        rest.tri_rest_inv = rest_inv
        rest.tri_areas = areas

        hinges = extract_hinges(tris)
        rest.hinges = hinges
        if hinges.size:
            rest.hinge_rest_angles = dihedral_angles(points, hinges)
            rest.hinge_edge_lengths = np.linalg.norm(points[hinges[:, 1]] - points[hinges[:, 0]], axis=1)
            area_a = 0.5 * np.linalg.norm(np.cross(points[hinges[:, 1]] - points[hinges[:, 0]],
                                                   points[hinges[:, 2]] - points[hinges[:, 0]]), axis=1)
            area_b = 0.5 * np.linalg.norm(np.cross(points[hinges[:, 3]] - points[hinges[:, 0]],
                                                   points[hinges[:, 1]] - points[hinges[:, 0]]), axis=1)
            rest.hinge_areas = (area_a + area_b) / 3.0
        else:
            rest.hinge_rest_angles = np.zeros(0)
            rest.hinge_edge_lengths = np.zeros(0)
            rest.hinge_areas = np.zeros(0)

    else:
        tets = topology.elements
        Dm = np.stack([points[tets[:, k]] - points[tets[:, 0]] for k in (1, 2, 3)], axis=2)
        det = np.linalg.det(Dm)
        edge_scale = np.mean(np.linalg.norm(Dm, axis=1), axis=1)
        if tets.size and np.any(np.abs(det) <= 1e-12 * edge_scale ** 3):
            raise DegenerateElement("Tetrahedron with (near) singular rest shape")
        volumes = np.abs(det) / 6.0
        for k in range(4):
            np.add.at(masses, tets[:, k], density * volumes / 4.0)
        rest.tet_rest_inv = np.linalg.inv(Dm) if tets.size else np.zeros((0, 3, 3))
        rest.tet_volumes = volumes

    if np.any(masses <= 0):
        raise DegenerateElement("Vertex with non-positive lumped mass (isolated vertex?)")
    return rest, masses


def _triangle_rest_metric(points: np.ndarray, tris: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Inverse 2x2 rest edge matrices in each triangle's local frame, and rest areas"""
    e1 = points[tris[:, 1]] - points[tris[:, 0]]
    e2 = points[tris[:, 2]] - points[tris[:, 0]]
    normal = np.cross(e1, e2)
    twice_area = np.linalg.norm(normal, axis=1)
    areas = 0.5 * twice_area
    if tris.size and areas.min() <= 1e-14:
        raise DegenerateElement("Triangle with non-positive rest area")
    len1 = np.linalg.norm(e1, axis=1)
    t1 = e1 / len1[:, None]
    t2 = np.cross(normal / twice_area[:, None], t1)
    Dm = np.zeros((len(tris), 2, 2))
    Dm[:, 0, 0] = len1
    Dm[:, 0, 1] = np.einsum('ij,ij->i', e2, t1)
    Dm[:, 1, 1] = np.einsum('ij,ij->i', e2, t2)
    return np.linalg.inv(Dm) if len(tris) else np.zeros((0, 2, 2)), areas


def build_sim_object(topology: Topology, X: np.ndarray, material: MaterialParams,
                     dirichlet: Optional[np.ndarray] = None, name: str = "") -> SimObject:
    """Factory: precompute rest data and wrap it with the material and Dirichlet set"""
    aux = {'rod_radius': material.rod_radius, 'shell_thickness': material.shell_thickness}
    rest, masses = precompute_rest(topology, X, material.density, aux)
    return SimObject(topology=topology, rest=rest, masses=masses, material=material,
                     dirichlet=np.zeros(0, dtype=np.int64) if dirichlet is None else dirichlet,
                     name=name)
