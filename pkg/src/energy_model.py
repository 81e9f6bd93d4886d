"""
Incremental-potential energies with analytic gradients and per-element Hessians.

Every energy accepts a single configuration (3N,) or a batch (B, 3N). Values are
floats (single) or (B,) arrays (batch); gradients match the input shape. Element
Hessians are only produced for single configurations.
"""
import numpy as np
import scipy.sparse as sp
from typing import Dict, List, Optional, Tuple, Union, Mapping
from dataclasses import dataclass, field
from geometry import SimObject, RestState, as_points
from sim_types import (
    MaterialParams, TopologyKind, ZeroLengthEdge, AntiparallelEdges,
    DegenerateTriangle, DegenerateHinge
)


class EvaluationCounter:
    """Counts energy evaluations; rollouts assert it does not move"""

    def __init__(self):
        self.count = 0

    def tick(self):
        self.count += 1

    def reset(self):
        self.count = 0


EVALUATION_COUNTER = EvaluationCounter()


@dataclass
class HessianBlocks:
    """Dense per-element Hessians for elements with k vertices"""
    vertices: np.ndarray  # (E, k)
    blocks: np.ndarray    # (E, 3k, 3k)


@dataclass
class EnergyReport:
    """Value, gradient and optional Hessian pieces of one energy term (or a sum)"""
    value: Union[float, np.ndarray]
    gradient: np.ndarray
    element_hessians: List[HessianBlocks] = field(default_factory=list)
    hessian_diagonal: Optional[np.ndarray] = None
    components: Dict[str, Union[float, np.ndarray]] = field(default_factory=dict)

    def __add__(self, other: 'EnergyReport') -> 'EnergyReport':
        if self.hessian_diagonal is None:
            diagonal = other.hessian_diagonal
        elif other.hessian_diagonal is None:
            diagonal = self.hessian_diagonal
        else:
            diagonal = self.hessian_diagonal + other.hessian_diagonal
        components = dict(self.components)
        for name, value in other.components.items():
            components[name] = components.get(name, 0.0) + value
        return EnergyReport(
            value=self.value + other.value,
            gradient=self.gradient + other.gradient,
            element_hessians=self.element_hessians + other.element_hessians,
            hessian_diagonal=diagonal,
            components=components,
        )


BcTargets = Tuple[np.ndarray, np.ndarray]  # (vertex indices (K,), positions (K, 3) or (B, K, 3))


def _points(x: np.ndarray) -> Tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float64)
    batched = x.ndim == 2
    points = as_points(x if batched else x[None, :])
    return points, batched


def _report(values: np.ndarray, grad_points: np.ndarray, batched: bool,
            blocks: Optional[HessianBlocks] = None, name: str = "") -> EnergyReport:
    gradient = grad_points.reshape(grad_points.shape[0], -1)
    value = values if batched else float(values[0])
    report = EnergyReport(
        value=value,
        gradient=gradient if batched else gradient[0],
        element_hessians=[blocks] if blocks is not None else [],
    )
    if name:
        report.components[name] = value
    return report


def _scatter(grad: np.ndarray, vertices: np.ndarray, contributions: np.ndarray):
    """Accumulate (B, E, 3) contributions into (B, N, 3) in fixed element order"""
    np.add.at(grad, (slice(None), vertices), contributions)


def _skew(v: np.ndarray) -> np.ndarray:
    """Cross-product matrices for (..., 3) vectors"""
    out = np.zeros(v.shape[:-1] + (3, 3))
    out[..., 0, 1] = -v[..., 2]
    out[..., 0, 2] = v[..., 1]
    out[..., 1, 0] = v[..., 2]
    out[..., 1, 2] = -v[..., 0]
    out[..., 2, 0] = -v[..., 1]
    out[..., 2, 1] = v[..., 0]
    return out


def _dot(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return np.einsum('...i,...i->...', a, b)


def _check_hessian_request(batched: bool, hessian: bool):
    if batched and hessian:
        raise ValueError("Element Hessians are only available for a single configuration")


# ---------------------------------------------------------------------------
# Inertial / external terms
# ---------------------------------------------------------------------------

def inertial_energy(x_t: np.ndarray, x_prev: np.ndarray, x_prev2: np.ndarray,
                    M: np.ndarray, dt: float, hessian: bool = False) -> EnergyReport:
    """
    BDF1 inertial energy (1/(2 dt^2)) (x_t - y)^T M (x_t - y) with y = 2 x_prev - x_prev2

    Args:
        x_t, x_prev, x_prev2: Flat positions; any of them may be batched (B, 3N)
        M: Lumped vertex masses (N,)
        dt: Timestep in seconds
        hessian: Also return the diagonal Hessian M / dt^2
    """
    EVALUATION_COUNTER.tick()
    x_t = np.asarray(x_t, dtype=np.float64)
    batched = x_t.ndim == 2
    _check_hessian_request(batched, hessian)
    m3 = np.repeat(np.asarray(M, dtype=np.float64), 3)
    d = x_t - (2.0 * np.asarray(x_prev) - np.asarray(x_prev2))
    inv_dt2 = 1.0 / (dt * dt)
    values = 0.5 * inv_dt2 * np.sum(m3 * d * d, axis=-1)
    report = EnergyReport(
        value=values if batched else float(values),
        gradient=m3 * d * inv_dt2,
        hessian_diagonal=m3 * inv_dt2 if hessian else None,
    )
    report.components['inertial'] = report.value
    return report


def gravity_energy(x: np.ndarray, M: np.ndarray, g: np.ndarray) -> EnergyReport:
    """E = -sum_i m_i g^T x_i; constant gradient, zero Hessian"""
    EVALUATION_COUNTER.tick()
    points, batched = _points(x)
    M = np.asarray(M, dtype=np.float64)
    g = np.asarray(g, dtype=np.float64)
    values = -np.einsum('n,bni,i->b', M, points, g)
    grad = np.broadcast_to(-M[:, None] * g[None, :], points.shape).copy()
    return _report(values, grad, batched, name='external')


def bc_penalty_energy(x: np.ndarray, targets: Union[BcTargets, Mapping[int, np.ndarray]],
                      w_bc: float, hessian: bool = False) -> EnergyReport:
    """
    Quadratic Dirichlet penalty w_bc * sum_i ||x_i - x*_i||^2

    Args:
        x: Flat positions (single or batched)
        targets: (indices, positions) or a {vertex: 3-vector} map; batched
            positions (B, K, 3) are accepted for batched x
        w_bc: Penalty weight (> 0)
    """
    EVALUATION_COUNTER.tick()
    points, batched = _points(x)
    _check_hessian_request(batched, hessian)
    indices, positions = normalize_targets(targets)
    grad = np.zeros_like(points)
    if indices.size:
        diff = points[:, indices, :] - (positions if positions.ndim == 3 else positions[None])
        values = w_bc * np.sum(diff * diff, axis=(1, 2))
        grad[:, indices, :] = 2.0 * w_bc * diff
    else:
        values = np.zeros(points.shape[0])
    report = _report(values, grad, batched, name='bc')
    if hessian:
        diagonal = np.zeros(points.shape[1] * 3)
        dofs = (3 * indices[:, None] + np.arange(3)[None, :]).reshape(-1)
        diagonal[dofs] = 2.0 * w_bc
        report.hessian_diagonal = diagonal
    return report


def normalize_targets(targets: Union[BcTargets, Mapping[int, np.ndarray], None]) -> BcTargets:
    """Turn a vertex->position map or (indices, positions) pair into arrays"""
    if targets is None:
        return np.zeros(0, dtype=np.int64), np.zeros((0, 3))
    if isinstance(targets, Mapping):
        keys = sorted(targets)
        indices = np.asarray(keys, dtype=np.int64)
        positions = np.asarray([targets[k] for k in keys], dtype=np.float64).reshape(-1, 3)
        return indices, positions
    indices, positions = targets
    return np.asarray(indices, dtype=np.int64), np.asarray(positions, dtype=np.float64)


# ---------------------------------------------------------------------------
# Rods
# ---------------------------------------------------------------------------

def rod_stretch_energy(x: np.ndarray, rest: RestState, params: MaterialParams,
                       hessian: bool = False) -> EnergyReport:
    """E = sum_edges (k_s/2) (|e|/|e_bar| - 1)^2 |e_bar| with k_s = E pi r^2"""
    EVALUATION_COUNTER.tick()
    points, batched = _points(x)
    _check_hessian_request(batched, hessian)
    edges = rest.elements
    ks = params.stretch_stiffness
    L = rest.edge_lengths

    e = points[:, edges[:, 1], :] - points[:, edges[:, 0], :]
    length = np.linalg.norm(e, axis=-1)
    if length.size and length.min() < 1e-12:
        raise ZeroLengthEdge("Rod edge collapsed to zero length")
    strain = length / L - 1.0
    values = np.sum(0.5 * ks * strain ** 2 * L, axis=-1)

    e_hat = e / length[..., None]
    force = (ks * strain)[..., None] * e_hat
    grad = np.zeros_like(points)
    _scatter(grad, edges[:, 0], -force)
    _scatter(grad, edges[:, 1], force)

    blocks = None
    if hessian:
        eh, l0, s0 = e_hat[0], length[0], strain[0]
        outer = np.einsum('ei,ej->eij', eh, eh)
        K = ks * (outer / L[:, None, None] +
                  (s0 / l0)[:, None, None] * (np.eye(3)[None] - outer))
        H = np.zeros((len(edges), 6, 6))
        H[:, :3, :3] = K
        H[:, 3:, 3:] = K
        H[:, :3, 3:] = -K
        H[:, 3:, :3] = -K
        blocks = HessianBlocks(vertices=edges, blocks=H)
    return _report(values, grad, batched, blocks, name='elastic')


def rod_bend_energy(x: np.ndarray, rest: RestState, params: MaterialParams,
                    hessian: bool = False) -> EnergyReport:
    """
    Isotropic discrete-curvature bending without twist.

    kb_i = 2 (e_{i-1} x e_i) / (|e_bar_{i-1}| |e_bar_i| + e_{i-1} . e_i),
    E = sum_i (k_b / l_bar_i) |kb_i|^2; Gauss-Newton Hessian per stencil.
    """
    EVALUATION_COUNTER.tick()
    points, batched = _points(x)
    _check_hessian_request(batched, hessian)
    stencils = rest.bend_stencils
    grad = np.zeros_like(points)
    if stencils.size == 0:
        return _report(np.zeros(points.shape[0]), grad, batched,
                       HessianBlocks(stencils.reshape(0, 3), np.zeros((0, 9, 9))) if hessian else None,
                       name='elastic')

    kb = params.bend_stiffness
    L0 = rest.bend_rest_lengths[:, 0]
    L1 = rest.bend_rest_lengths[:, 1]
    l_bar = 0.5 * (L0 + L1)

    e0 = points[:, stencils[:, 1], :] - points[:, stencils[:, 0], :]
    e1 = points[:, stencils[:, 2], :] - points[:, stencils[:, 1], :]
    c = np.cross(e0, e1)
    d = L0 * L1 + _dot(e0, e1)
    if d.min() < 1e-12:
        raise AntiparallelEdges("Curvature binormal is singular for (anti)parallel folded edges")
    curvature = 2.0 * c / d[..., None]
    coeff = kb / l_bar
    values = np.sum(coeff * _dot(curvature, curvature), axis=-1)

    a = 2.0 * coeff[..., None] * curvature
    ca = _dot(c, a)[..., None]
    d_ = d[..., None]
    dE_de0 = (2.0 / d_) * np.cross(e1, a) - (2.0 / d_ ** 2) * ca * e1
    dE_de1 = -(2.0 / d_) * np.cross(e0, a) - (2.0 / d_ ** 2) * ca * e0
    _scatter(grad, stencils[:, 0], -dE_de0)
    _scatter(grad, stencils[:, 1], dE_de0 - dE_de1)
    _scatter(grad, stencils[:, 2], dE_de1)

    blocks = None
    if hessian:
        e0s, e1s, cs, ds = e0[0], e1[0], c[0], d[0][:, None, None]
        J0 = (2.0 / ds) * (-_skew(e1s)) - (2.0 / ds ** 2) * np.einsum('si,sj->sij', cs, e1s)
        J1 = (2.0 / ds) * _skew(e0s) - (2.0 / ds ** 2) * np.einsum('si,sj->sij', cs, e0s)
        J = np.concatenate([-J0, J0 - J1, J1], axis=2)  # (S, 3, 9)
        H = 2.0 * coeff[:, None, None] * np.einsum('ski,skj->sij', J, J)
        blocks = HessianBlocks(vertices=stencils, blocks=H)
    return _report(values, grad, batched, blocks, name='elastic')


# ---------------------------------------------------------------------------
# StVK (shell membrane and tetrahedra share the kernel)
# ---------------------------------------------------------------------------

def _stvk(points: np.ndarray, elements: np.ndarray, rest_inv: np.ndarray, measure: np.ndarray,
          mu: float, lam: float, hessian: bool) -> Tuple[np.ndarray, np.ndarray, Optional[np.ndarray]]:
    """
    Shared StVK kernel for elements with k+1 vertices and a k-dimensional rest frame.

    F = Ds Dm^-1 (3 x k), Green strain (F^T F - I)/2, psi = mu |eps|^2 + lam/2 tr(eps)^2,
    E = sum measure * psi.
    """
    k = elements.shape[1] - 1
    eye = np.eye(k)
    x0 = points[:, elements[:, 0], :]
    Ds = np.stack([points[:, elements[:, j + 1], :] - x0 for j in range(k)], axis=-1)  # (B,E,3,k)
    F = Ds @ rest_inv
    Ft = np.swapaxes(F, -1, -2)
    green = 0.5 * (Ft @ F - eye)
    tr = np.trace(green, axis1=-2, axis2=-1)
    psi = mu * np.sum(green * green, axis=(-2, -1)) + 0.5 * lam * tr ** 2
    values = np.sum(measure * psi, axis=-1)

    S = 2.0 * mu * green + lam * tr[..., None, None] * eye
    G = measure[:, None, None] * (F @ S) @ np.swapaxes(rest_inv, -1, -2)  # (B,E,3,k)
    grad = np.zeros_like(points)
    _scatter(grad, elements[:, 0], -np.sum(G, axis=-1))
    for j in range(k):
        _scatter(grad, elements[:, j + 1], G[..., j])

    H = None
    if hessian:
        F1, S1 = F[0], S[0]
        n = 3 * (k + 1)
        H = np.zeros((len(elements), n, n))
        for vertex in range(k + 1):
            row = -np.ones(k) if vertex == 0 else eye[vertex - 1]
            row_dm = row @ rest_inv  # (E, k)
            for axis in range(3):
                dF = np.zeros_like(F1)
                dF[:, axis, :] = row_dm
                dFt = np.swapaxes(dF, -1, -2)
                d_green = 0.5 * (dFt @ F1 + np.swapaxes(F1, -1, -2) @ dF)
                d_tr = np.trace(d_green, axis1=-2, axis2=-1)
                dS = 2.0 * mu * d_green + lam * d_tr[:, None, None] * eye
                dP = dF @ S1 + F1 @ dS
                dG = measure[:, None, None] * dP @ np.swapaxes(rest_inv, -1, -2)  # (E,3,k)
                column = np.concatenate(
                    [-np.sum(dG, axis=-1)] + [dG[..., j] for j in range(k)], axis=-1)
                H[:, :, 3 * vertex + axis] = column
        H = 0.5 * (H + np.swapaxes(H, -1, -2))
    return values, grad, H


def shell_membrane_energy(x: np.ndarray, rest: RestState, params: MaterialParams,
                          hessian: bool = False) -> EnergyReport:
    """StVK membrane energy sum A_bar h (mu |eps|^2 + lam/2 tr(eps)^2) over triangles"""
    EVALUATION_COUNTER.tick()
    points, batched = _points(x)
    _check_hessian_request(batched, hessian)
    tris = rest.elements
    if rest.tri_areas.size and rest.tri_areas.min() <= 1e-14:
        raise DegenerateTriangle("Triangle rest area below 1e-14")
    measure = rest.tri_areas * params.shell_thickness
    values, grad, H = _stvk(points, tris, rest.tri_rest_inv, measure,
                            params.mu, params.lam, hessian)
    blocks = HessianBlocks(vertices=tris, blocks=H) if hessian else None
    return _report(values, grad, batched, blocks, name='elastic')


def tet_stvk_energy(x: np.ndarray, rest: RestState, params: MaterialParams,
                    hessian: bool = False) -> EnergyReport:
    """StVK energy of linear tetrahedra; inverted elements stay finite"""
    EVALUATION_COUNTER.tick()
    points, batched = _points(x)
    _check_hessian_request(batched, hessian)
    tets = rest.elements
    values, grad, H = _stvk(points, tets, rest.tet_rest_inv, rest.tet_volumes,
                            params.mu, params.lam, hessian)
    blocks = HessianBlocks(vertices=tets, blocks=H) if hessian else None
    return _report(values, grad, batched, blocks, name='elastic')


# ---------------------------------------------------------------------------
# Hinge bending
# ---------------------------------------------------------------------------

def _dihedral_gradient(points: np.ndarray, hinges: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Signed dihedral angles (B, H) and their gradients (B, H, 4, 3)"""
    p0 = points[:, hinges[:, 0], :]
    p1 = points[:, hinges[:, 1], :]
    p2 = points[:, hinges[:, 2], :]
    p3 = points[:, hinges[:, 3], :]
    e = p1 - p0
    e_len2 = _dot(e, e)
    e_len = np.sqrt(e_len2)
    n_a = np.cross(e, p2 - p0)
    n_b = np.cross(p3 - p0, e)
    na2 = _dot(n_a, n_a)
    nb2 = _dot(n_b, n_b)
    if min(na2.min(), nb2.min()) < 1e-28 or e_len.min() < 1e-14:
        raise DegenerateHinge("Hinge triangle collapsed")
    e_hat = e / e_len[..., None]
    theta = np.arctan2(_dot(np.cross(n_a, n_b), e_hat), _dot(n_a, n_b))

    g2 = -(e_len / na2)[..., None] * n_a
    g3 = -(e_len / nb2)[..., None] * n_b
    alpha2 = (_dot(p2 - p0, e) / e_len2)[..., None]
    alpha3 = (_dot(p3 - p0, e) / e_len2)[..., None]
    g0 = -(1.0 - alpha2) * g2 - (1.0 - alpha3) * g3
    g1 = -alpha2 * g2 - alpha3 * g3
    return theta, np.stack([g0, g1, g2, g3], axis=-2)


def _dihedral_hessian(points: np.ndarray, hinges: np.ndarray) -> np.ndarray:
    """
    Hessians (H, 12, 12) of the signed dihedral angles of one (N, 3) configuration

    Exact derivative of the gradient in _dihedral_gradient, with the 12 DOFs ordered
    (p0, p1, p2, p3).
    """
    p0, p1, p2, p3 = (points[hinges[:, k]] for k in range(4))
    e, a, b = p1 - p0, p2 - p0, p3 - p0
    n_a = np.cross(e, a)
    n_b = np.cross(b, e)
    e_len2 = _dot(e, e)
    e_len = np.sqrt(e_len2)

    def offset(k: int) -> np.ndarray:
        # d(p_k - p0) as a (3, 12) selection
        selection = np.zeros((3, 12))
        selection[:, 0:3] = -np.eye(3)
        selection[:, 3 * k:3 * k + 3] = np.eye(3)
        return selection

    d_e, d_a, d_b = offset(1), offset(2), offset(3)
    j_len = (e / e_len[:, None]) @ d_e
    j_na = -_skew(a) @ d_e + _skew(e) @ d_a
    j_nb = _skew(b) @ d_e - _skew(e) @ d_b

    def inverse_square(n: np.ndarray):
        # n / |n|^2 and its Jacobian
        n2 = _dot(n, n)
        jac = (np.eye(3)[None] / n2[:, None, None]
               - 2.0 * np.einsum('hi,hj->hij', n, n) / (n2 ** 2)[:, None, None])
        return n / n2[:, None], jac

    f_a, jf_a = inverse_square(n_a)
    f_b, jf_b = inverse_square(n_b)
    g2 = -e_len[:, None] * f_a
    g3 = -e_len[:, None] * f_b
    j_g2 = -f_a[:, :, None] * j_len[:, None, :] - e_len[:, None, None] * (jf_a @ j_na)
    j_g3 = -f_b[:, :, None] * j_len[:, None, :] - e_len[:, None, None] * (jf_b @ j_nb)

    alpha2 = _dot(a, e) / e_len2
    alpha3 = _dot(b, e) / e_len2
    j_alpha2 = (e @ d_a + a @ d_e - 2.0 * alpha2[:, None] * (e @ d_e)) / e_len2[:, None]
    j_alpha3 = (e @ d_b + b @ d_e - 2.0 * alpha3[:, None] * (e @ d_e)) / e_len2[:, None]
    outer2 = g2[:, :, None] * j_alpha2[:, None, :]
    outer3 = g3[:, :, None] * j_alpha3[:, None, :]
    j_g0 = outer2 - (1.0 - alpha2)[:, None, None] * j_g2 + outer3 - (1.0 - alpha3)[:, None, None] * j_g3
    j_g1 = -outer2 - alpha2[:, None, None] * j_g2 - outer3 - alpha3[:, None, None] * j_g3

    hess = np.concatenate([j_g0, j_g1, j_g2, j_g3], axis=1)
    return 0.5 * (hess + np.swapaxes(hess, 1, 2))


def shell_hinge_bend_energy(x: np.ndarray, rest: RestState, params: MaterialParams,
                            hessian: bool = False) -> EnergyReport:
    """
    Discrete-shells hinge bending sum k (theta - theta_bar)^2 |e_bar|^2 / A_bar,
    k = E h^3 / (12 (1 - nu^2)); full per-hinge Hessian 2k(grad theta grad theta^T + (theta - theta_bar) hess theta)
    """
    EVALUATION_COUNTER.tick()
    points, batched = _points(x)
    _check_hessian_request(batched, hessian)
    hinges = rest.hinges
    grad = np.zeros_like(points)
    if hinges.size == 0:
        return _report(np.zeros(points.shape[0]), grad, batched,
                       HessianBlocks(hinges.reshape(0, 4), np.zeros((0, 12, 12))) if hessian else None,
                       name='elastic')
    if rest.hinge_areas.min() <= 0:
        raise DegenerateHinge("Hinge with non-positive rest area")

    coeff = params.hinge_stiffness * rest.hinge_edge_lengths ** 2 / rest.hinge_areas
    theta, dtheta = _dihedral_gradient(points, hinges)
    delta = theta - rest.hinge_rest_angles
    values = np.sum(coeff * delta ** 2, axis=-1)
    contrib = (2.0 * coeff * delta)[..., None, None] * dtheta  # (B, H, 4, 3)
    for j in range(4):
        _scatter(grad, hinges[:, j], contrib[..., j, :])

    blocks = None
    if hessian:
        g = dtheta[0].reshape(len(hinges), 12)
        second = _dihedral_hessian(points[0], hinges)
        H = 2.0 * coeff[:, None, None] * (np.einsum('hi,hj->hij', g, g)
                                          + delta[0][:, None, None] * second)
        blocks = HessianBlocks(vertices=hinges, blocks=H)
    return _report(values, grad, batched, blocks, name='elastic')


# ---------------------------------------------------------------------------
# Sums, projection, assembly
# ---------------------------------------------------------------------------

def elastic_energy(x: np.ndarray, sim_object: SimObject, params: Optional[MaterialParams] = None,
                   hessian: bool = False) -> EnergyReport:
    """Elastic terms for the object's topology kind"""
    params = params or sim_object.material
    rest = sim_object.rest
    kind = sim_object.topology.kind
    if kind == TopologyKind.ROD_SET:
        return (rod_stretch_energy(x, rest, params, hessian) +
                rod_bend_energy(x, rest, params, hessian))
    if kind == TopologyKind.TRI_MESH:
        return (shell_membrane_energy(x, rest, params, hessian) +
                shell_hinge_bend_energy(x, rest, params, hessian))
    return tet_stvk_energy(x, rest, params, hessian)


def total_incremental_potential(x_t: np.ndarray, x_prev: np.ndarray, x_prev2: np.ndarray,
                                sim_object: SimObject, params: Optional[MaterialParams],
                                bc: Optional[BcTargets], dt: float, w_bc: float = 0.0,
                                hessian: bool = False) -> EnergyReport:
    """
    Inertial + elastic + gravity (+ Dirichlet penalty when w_bc > 0 and targets are given)

    Returns:
        Summed EnergyReport; `components` holds the inertial / elastic / external / bc parts
    """
    params = params or sim_object.material
    report = inertial_energy(x_t, x_prev, x_prev2, sim_object.masses, dt, hessian)
    report = report + elastic_energy(x_t, sim_object, params, hessian)
    report = report + gravity_energy(x_t, sim_object.masses, params.gravity_vector)
    if bc is not None and w_bc > 0:
        report = report + bc_penalty_energy(x_t, bc, w_bc, hessian)
    for name in ('inertial', 'elastic', 'external', 'bc'):
        report.components.setdefault(name, 0.0 * report.value)
    return report


def project_pd(block: np.ndarray, eps: Optional[float] = None) -> np.ndarray:
    """
    Clamp the eigenvalues of a symmetric block to max(lambda_i, eps)

    Args:
        block: Square matrix (symmetrized before decomposition)
        eps: Clamp floor; defaults to 1e-8 * max(1, ||A||_inf)
    """
    return project_pd_blocks(np.asarray(block, dtype=np.float64)[None], eps)[0]


def project_pd_blocks(blocks: np.ndarray, eps: Optional[float] = None,
                      eps_rel: float = 1e-8) -> np.ndarray:
    """Vectorized project_pd over a stack (E, n, n)"""
    if blocks.shape[0] == 0:
        return blocks.copy()
    sym = 0.5 * (blocks + np.swapaxes(blocks, -1, -2))
    if eps is None:
        norm_inf = np.max(np.sum(np.abs(sym), axis=-1), axis=-1)
        floor = eps_rel * np.maximum(1.0, norm_inf)
    else:
        floor = np.full(sym.shape[0], float(eps))
    eigvals, eigvecs = np.linalg.eigh(sym)
    clamped = np.maximum(eigvals, floor[:, None])
    out = np.einsum('eij,ej,ekj->eik', eigvecs, clamped, eigvecs)
    return 0.5 * (out + np.swapaxes(out, -1, -2))


def assemble_hessian(report: EnergyReport, n_dofs: int, project: bool = True,
                     eps_rel: float = 1e-8) -> sp.csr_matrix:
    """Sparse global Hessian from element blocks (optionally PD-projected) plus diagonal terms"""
    rows, cols, data = [], [], []
    for hb in report.element_hessians:
        if hb.blocks.shape[0] == 0:
            continue
        blocks = project_pd_blocks(hb.blocks, eps_rel=eps_rel) if project else hb.blocks
        dofs = (3 * hb.vertices[:, :, None] + np.arange(3)[None, None, :]).reshape(len(hb.vertices), -1)
        n = dofs.shape[1]
        rows.append(np.repeat(dofs, n, axis=1).reshape(-1))
        cols.append(np.tile(dofs, (1, n)).reshape(-1))
        data.append(blocks.reshape(-1))
    if report.hessian_diagonal is not None:
        idx = np.arange(n_dofs)
        rows.append(idx)
        cols.append(idx)
        data.append(report.hessian_diagonal)
    if not data:
        return sp.csr_matrix((n_dofs, n_dofs))
    H = sp.coo_matrix((np.concatenate(data), (np.concatenate(rows), np.concatenate(cols))),
                      shape=(n_dofs, n_dofs))
    return H.tocsr()


class IncrementalPotential:
    """
    Callable objective x -> EnergyReport for one implicit Euler step

    Args:
        sim_object: Simulated body
        x_prev, x_prev2: Previous two frames (flat)
        dt: Timestep
        params: Material override (defaults to the object's material)
        bc: Penalty targets; ignored unless w_bc > 0
        w_bc: Penalty weight
    """

    def __init__(self, sim_object: SimObject, x_prev: np.ndarray, x_prev2: np.ndarray, dt: float,
                 params: Optional[MaterialParams] = None, bc: Optional[BcTargets] = None,
                 w_bc: float = 0.0):
        self.sim_object = sim_object
        self.x_prev = np.asarray(x_prev, dtype=np.float64)
        self.x_prev2 = np.asarray(x_prev2, dtype=np.float64)
        self.dt = dt
        self.params = params or sim_object.material
        self.bc = bc
        self.w_bc = w_bc

    @property
    def inertial_target(self) -> np.ndarray:
        """y = 2 x_prev - x_prev2"""
        return 2.0 * self.x_prev - self.x_prev2

    def __call__(self, x: np.ndarray, hessian: bool = False) -> EnergyReport:
        return total_incremental_potential(x, self.x_prev, self.x_prev2, self.sim_object,
                                           self.params, self.bc, self.dt, self.w_bc, hessian)
