import numpy as np
import pytest

import mesh_generators
from geometry import (
    as_points, boundary_faces, build_sim_object, dihedral_angles, extract_hinges, precompute_rest
)
from sim_types import (
    DegenerateElement, InvalidTopology, MaterialParams, Topology, TopologyKind
)


def test_rod_masses_follow_edge_volumes(rod_object):
    params = rod_object.material
    edge_mass = params.density * np.pi * params.rod_radius ** 2 * rod_object.rest.edge_lengths
    assert rod_object.masses.sum() == pytest.approx(edge_mass.sum())
    # interior vertices carry two half edges, tips one
    strand_masses = rod_object.masses[:5]
    assert strand_masses[1] == pytest.approx(2.0 * strand_masses[0])
    assert strand_masses[-1] == pytest.approx(strand_masses[0])


def test_rod_bend_stencils_stay_within_strands(rod_object):
    stencils = rod_object.rest.bend_stencils
    assert stencils.shape == (2 * 3, 3)
    for start, stop in rod_object.topology.strands:
        inside = (stencils[:, 0] >= start) & (stencils[:, 2] < stop)
        assert inside.sum() == stop - start - 2


def test_cloth_masses_and_hinges(cloth_object):
    params = cloth_object.material
    total_area = 0.3 * 0.2
    assert cloth_object.rest.tri_areas.sum() == pytest.approx(total_area)
    assert cloth_object.masses.sum() == pytest.approx(params.density * params.shell_thickness * total_area)
    # interior edges of a 4x3 grid: 3 horizontal, 4 vertical, 6 diagonals
    assert len(cloth_object.rest.hinges) == 13
    np.testing.assert_allclose(cloth_object.rest.hinge_rest_angles, 0.0, atol=1e-12)


def test_tet_masses_sum_to_volume(tet_object):
    volume = 2 * 0.05 ** 3
    assert tet_object.rest.tet_volumes.sum() == pytest.approx(volume)
    assert tet_object.masses.sum() == pytest.approx(1000.0 * volume)


def test_unit_tet_volume_and_masses():
    topology = Topology(TopologyKind.TET_MESH, 4, np.array([[0, 1, 2, 3]]))
    points = np.array([[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]])
    rest, masses = precompute_rest(topology, points, 1.0)
    assert rest.tet_volumes[0] == pytest.approx(1.0 / 6.0)
    np.testing.assert_allclose(masses, np.full(4, 1.0 / 24.0))


def test_two_edge_rod_masses():
    topology = Topology.rod_set([(0, 3)])
    points = np.array([[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [3.0, 0.0, 0.0]])
    radius, density = 0.1, 2.0
    _, masses = precompute_rest(topology, points, density, {'rod_radius': radius})
    section = density * np.pi * radius ** 2
    np.testing.assert_allclose(masses, section * np.array([0.5, 1.5, 1.0]))


def test_equilateral_triangle_masses():
    topology = Topology(TopologyKind.TRI_MESH, 3, np.array([[0, 1, 2]]))
    points = np.array([[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.5, np.sqrt(3.0) / 2.0, 0.0]])
    rest, masses = precompute_rest(topology, points, 10.0, {'shell_thickness': 0.01})
    assert rest.tri_areas[0] == pytest.approx(np.sqrt(3.0) / 4.0)
    np.testing.assert_allclose(masses, np.full(3, 10.0 * 0.01 * np.sqrt(3.0) / 12.0))
    assert rest.hinges.shape[0] == 0


def test_extract_hinges_two_triangles():
    hinges = extract_hinges(np.array([[0, 1, 2], [1, 0, 3]]))
    np.testing.assert_array_equal(hinges, [[0, 1, 2, 3]])


def test_extract_hinges_rejects_flipped_neighbour():
    with pytest.raises(InvalidTopology):
        extract_hinges(np.array([[0, 1, 2], [0, 1, 3]]))


def test_dihedral_angle_of_folded_pair():
    points = np.array([[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.5, 1.0, 0.0], [0.5, 0.0, 1.0]])
    hinges = np.array([[0, 1, 2, 3]])
    angle = dihedral_angles(points, hinges)[0]
    assert abs(angle) == pytest.approx(np.pi / 2)
    batched = dihedral_angles(np.stack([points, points]), hinges)
    assert batched.shape == (2, 1)


def test_boundary_faces_of_single_tet_point_outward():
    points = np.array([[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]])
    topology = Topology(TopologyKind.TET_MESH, 4, np.array([[0, 1, 2, 3]]))
    faces = boundary_faces(topology, points)
    assert len(faces) == 4
    centroid = points.mean(axis=0)
    for face in faces:
        a, b, c = points[face]
        normal = np.cross(b - a, c - a)
        assert np.dot(normal, a - centroid) > 0


def test_boundary_faces_of_cube_grid():
    topology, points = mesh_generators.tet_grid((1, 1, 1), 1.0)
    faces = boundary_faces(topology, points)
    # six sides, two triangles each
    assert len(faces) == 12


def test_as_points_reshapes_batches():
    assert as_points(np.zeros(6)).shape == (2, 3)
    assert as_points(np.zeros((4, 9))).shape == (4, 3, 3)


def test_zero_length_rest_edge_is_rejected():
    topology = Topology.rod_set([(0, 3)])
    points = np.array([[0.0, 0.0, 0.0], [0.0, 0.0, 0.0], [0.0, -1.0, 0.0]])
    with pytest.raises(DegenerateElement):
        precompute_rest(topology, points, 1.0, {'rod_radius': 0.01})


def test_missing_rod_radius_is_rejected():
    topology = Topology.rod_set([(0, 3)])
    points = np.array([[0.0, 0.0, 0.0], [0.0, -1.0, 0.0], [0.0, -2.0, 0.0]])
    with pytest.raises(DegenerateElement):
        precompute_rest(topology, points, 1.0, {})


def test_flat_tet_is_rejected():
    topology = Topology(TopologyKind.TET_MESH, 4, np.array([[0, 1, 2, 3]]))
    points = np.array([[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [1.0, 1.0, 0.0]])
    with pytest.raises(DegenerateElement):
        precompute_rest(topology, points, 1.0)


def test_wrong_vertex_count_is_rejected():
    topology = Topology(TopologyKind.TET_MESH, 4, np.array([[0, 1, 2, 3]]))
    with pytest.raises(InvalidTopology):
        precompute_rest(topology, np.zeros((3, 3)), 1.0)


def test_dirichlet_out_of_range_is_rejected():
    topology, points, _ = mesh_generators.beam_tet_grid(cells=(1, 1, 1), cell_size=0.1)
    material = MaterialParams(youngs_modulus=1e5, poisson_ratio=0.3, density=1000.0)
    with pytest.raises(InvalidTopology):
        build_sim_object(topology, points, material, np.array([0, 99]))
