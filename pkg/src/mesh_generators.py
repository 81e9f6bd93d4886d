"""
Procedural desk-scale meshes. Every generator returns (topology, rest positions (N, 3),
Dirichlet vertex indices).
"""
import itertools
import numpy as np
from typing import Optional, Tuple
from config import MESH_CONFIG
from sim_types import Topology, TopologyKind

MeshData = Tuple[Topology, np.ndarray, np.ndarray]

# Kuhn subdivision: one tet per axis ordering, all sharing the cell diagonal
_KUHN_ORDERS = list(itertools.permutations(range(3)))


def rod_grid(strands: int = MESH_CONFIG['rod_strands'],
             vertices_per_strand: int = MESH_CONFIG['rod_vertices_per_strand'],
             segment_length: float = MESH_CONFIG['rod_segment_length'],
             spacing: float = MESH_CONFIG['rod_strand_spacing']) -> MeshData:
    """
    Straight strands hanging along -y from roots on a grid in the y=0 plane

    Returns:
        Rod-set topology, rest positions, and root vertices as the Dirichlet set
    """
    columns = int(np.ceil(np.sqrt(strands)))
    points = []
    runs = []
    for s in range(strands):
        row, col = divmod(s, columns)
        root = np.array([col * spacing, 0.0, row * spacing])
        start = len(points)
        for k in range(vertices_per_strand):
            points.append(root + np.array([0.0, -k * segment_length, 0.0]))
        runs.append((start, start + vertices_per_strand))
    topology = Topology.rod_set(runs)
    return topology, np.asarray(points), topology.roots()


def cloth_grid(resolution: Tuple[int, int] = MESH_CONFIG['cloth_resolution'],
               size: Tuple[float, float] = MESH_CONFIG['cloth_size']) -> MeshData:
    """
    Vertical cloth sheet in the z=0 plane, top edge at y=0, pinned at the two top corners

    Triangles are counter-clockwise seen from +z so every interior edge is shared by
    two opposite half-edges.
    """
    nx, ny = resolution
    dx = size[0] / (nx - 1)
    dy = size[1] / (ny - 1)
    points = np.array([[c * dx, -r * dy, 0.0] for r in range(ny) for c in range(nx)])

    def vid(r, c):
        return r * nx + c

    tris = []
    for r in range(ny - 1):
        for c in range(nx - 1):
            a, b, lower, d = vid(r, c), vid(r, c + 1), vid(r + 1, c), vid(r + 1, c + 1)
            tris.append((a, lower, d))
            tris.append((a, d, b))
    topology = Topology(TopologyKind.TRI_MESH, nx * ny, np.asarray(tris))
    return topology, points, np.array([vid(0, 0), vid(0, nx - 1)], dtype=np.int64)


def tet_grid(cells: Tuple[int, int, int], cell_size: float,
             mask: Optional[np.ndarray] = None) -> Tuple[Topology, np.ndarray]:
    """
    Kuhn-subdivided hexahedral grid (6 tets per cell) restricted to the masked cells

    Vertices not touched by any kept cell are dropped and the rest renumbered in grid order.
    """
    nx, ny, nz = cells
    mask = np.ones(cells, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)

    def gid(i, j, k):
        return (i * (ny + 1) + j) * (nz + 1) + k

    tets = []
    for i, j, k in itertools.product(range(nx), range(ny), range(nz)):
        if not mask[i, j, k]:
            continue
        for order in _KUHN_ORDERS:
            corner = [i, j, k]
            path = [gid(*corner)]
            for axis in order:
                corner[axis] += 1
                path.append(gid(*corner))
            tets.append(path)
    tets = np.asarray(tets, dtype=np.int64).reshape(-1, 4)

    grid_points = np.array([[i, j, k] for i in range(nx + 1) for j in range(ny + 1)
                            for k in range(nz + 1)], dtype=np.float64) * cell_size
    used = np.unique(tets)
    remap = -np.ones(len(grid_points), dtype=np.int64)
    remap[used] = np.arange(len(used))
    topology = Topology(TopologyKind.TET_MESH, len(used), remap[tets])
    return topology, grid_points[used]


def beam_tet_grid(cells: Tuple[int, int, int] = MESH_CONFIG['beam_cells'],
                  cell_size: float = MESH_CONFIG['beam_cell_size']) -> MeshData:
    """Cantilever beam along +x, clamped at the x=0 face"""
    topology, points = tet_grid(cells, cell_size)
    fixed = np.flatnonzero(np.isclose(points[:, 0], 0.0))
    return topology, points, fixed


def two_lobe_solid(cell_size: float = MESH_CONFIG['lobe_cell_size']) -> MeshData:
    """Two 3x3x3 lobes stacked along y joined by a one-cell neck; the top face is the anchor"""
    mask = np.zeros((3, 7, 3), dtype=bool)
    mask[:, 0:3, :] = True
    mask[:, 4:7, :] = True
    mask[1, 3, 1] = True
    topology, points = tet_grid(mask.shape, cell_size, mask)
    anchor = np.flatnonzero(np.isclose(points[:, 1], points[:, 1].max()))
    return topology, points, anchor


def two_ear_solid(ear_cells: Tuple[int, int, int] = MESH_CONFIG['ear_cells'],
                  cell_size: float = MESH_CONFIG['ear_cell_size']) -> MeshData:
    """A base block with two upright ears; the bottom face of the base is the anchor"""
    ex, ey, ez = ear_cells
    base_height = 2
    gap = 2
    width = 2 * ex + gap
    mask = np.zeros((width, base_height + ey, ez), dtype=bool)
    mask[:, :base_height, :] = True
    mask[:ex, base_height:, :] = True
    mask[ex + gap:, base_height:, :] = True
    topology, points = tet_grid(mask.shape, cell_size, mask)
    anchor = np.flatnonzero(np.isclose(points[:, 1], 0.0))
    return topology, points, anchor
