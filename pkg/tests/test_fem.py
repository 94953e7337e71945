"""FEM building blocks: mesh, constraints, solver behaviour, snapshots."""
import numpy as np
import pytest

from retraction import fem
from retraction.fem import (
    APSet,
    GraspConstraint,
    InvalidResolutionError,
    MaterialParams,
    SupportPlane,
    TissueMesh,
    build_grid_mesh,
    reaction_force,
    solve_quasi_static,
    tet_volumes,
)


def test_grid_mesh_shape_and_volume(small_mesh):
    nx, ny, nz = 7, 7, 2
    assert small_mesh.n_nodes == nx * ny * nz
    assert small_mesh.elements.shape == ((nx - 1) * (ny - 1) * (nz - 1) * 6, 4)
    vols = tet_volumes(small_mesh.rest_positions, small_mesh.elements)
    assert np.all(vols > 0)
    assert vols.sum() == pytest.approx(60.0 * 60.0 * 5.0)
    assert small_mesh.top_z == pytest.approx(2.5)
    assert small_mesh.bottom_z == pytest.approx(-2.5)


def test_grid_mesh_rejects_degenerate_resolution():
    with pytest.raises(InvalidResolutionError):
        build_grid_mesh(resolution=(1, 4, 2))


def test_surface_triangles_close_the_boundary(small_mesh):
    tris = small_mesh.surface_triangles()
    # a closed triangulated surface of the slab: 2*(cells per face) triangles
    nx, ny, nz = 7, 7, 2
    expected = 2 * 2 * ((nx - 1) * (ny - 1) + (nx - 1) * (nz - 1) + (ny - 1) * (nz - 1))
    assert len(tris) == expected


def test_apset_is_a_sorted_unique_value_type():
    aps = APSet((5, 3, 3, 9))
    assert aps.node_ids == (3, 5, 9)
    assert len(aps) == 3
    assert 5 in aps and 4 not in aps
    assert aps.add(4).node_ids == (3, 4, 5, 9)
    assert aps.remove(3).node_ids == (5, 9)
    assert aps == APSet((9, 5, 3))


def test_material_validation():
    with pytest.raises(ValueError):
        MaterialParams(young_modulus=0.0)
    with pytest.raises(ValueError):
        MaterialParams(poisson_ratio=0.5)


def test_grasp_bind_picks_surface_cluster(small_mesh):
    g = GraspConstraint.bind(small_mesh, (0.0, 0.0), radius=6.0)
    surf = set(int(i) for i in small_mesh.surface_node_ids)
    assert set(int(i) for i in g.node_ids) <= surf
    assert len(g.node_ids) >= 1
    targets = g.node_targets()
    assert targets.shape == (len(g.node_ids), 3)
    # moving the target translates every cluster node target rigidly
    g.target = g.target + np.array([0.0, 0.0, 3.0])
    assert np.allclose(g.node_targets() - targets, [0.0, 0.0, 3.0])


def test_gravity_sag_is_downward_and_bounded(small_mesh):
    mesh = small_mesh.copy()
    aps = APSet(tuple(range(7)))  # one bottom edge row
    support = SupportPlane(z=mesh.bottom_z)
    out, ff = solve_quasi_static(mesh, MaterialParams(), aps, support=support)
    dz = out.current_positions[:, 2] - mesh.rest_positions[:, 2]
    assert dz.min() < 0  # it sags
    assert dz.min() > -3.0  # the support plane catches it
    assert np.allclose(out.current_positions[list(aps.node_ids)],
                       mesh.rest_positions[list(aps.node_ids)])
    assert ff.max_magnitude > 0


def test_gravity_without_constraints_is_rejected(small_mesh):
    with pytest.raises(ValueError):
        solve_quasi_static(small_mesh.copy(), MaterialParams(), APSet(()))


def test_support_plane_force_profile():
    sp = SupportPlane(z=0.0, stiffness=1e4, width=0.05)
    deep = sp.force_z(np.array([-1.0 * fem.MM]))[0]
    assert deep == pytest.approx(1e4 * 1.0 * fem.MM, rel=1e-3)  # linear when buried
    above = sp.force_z(np.array([1.0 * fem.MM]))[0]
    assert above < 1e-6 * deep  # vanishes above the plane
    assert sp.tangent_zz(np.array([-1.0 * fem.MM]))[0] == pytest.approx(1e4, rel=1e-3)


def test_reaction_force_sums_nodes():
    ff = fem.ForceField.from_forces(np.array([[1.0, 0, 0], [0, 2.0, 0], [3.0, 0, 0]]))
    assert np.allclose(reaction_force(ff, [0, 2]), [4.0, 0.0, 0.0])
    assert fem.max_tissue_force(ff) == pytest.approx(3.0)


def test_solver_determinism(small_mesh):
    aps = APSet(tuple(range(7)))
    runs = []
    for _ in range(2):
        mesh = small_mesh.copy()
        g = GraspConstraint.bind(mesh, (10.0, 10.0), radius=6.0)
        g.target = g.target + np.array([0.0, 0.0, 4.0])
        out, ff = solve_quasi_static(mesh, MaterialParams(), aps, g,
                                     support=SupportPlane(z=mesh.bottom_z))
        runs.append((out.current_positions.tobytes(), ff.per_node_force.tobytes()))
    assert runs[0] == runs[1]


def test_snapshot_roundtrip(tmp_path, small_mesh):
    path = tmp_path / "mesh.txt"
    fem.write_mesh_snapshot(small_mesh, path)
    verts, tets = fem.read_mesh_snapshot(path)
    assert np.allclose(verts, small_mesh.current_positions, atol=1e-6)
    assert np.array_equal(tets, small_mesh.elements)


def test_force_csv(tmp_path):
    ff = fem.ForceField.from_forces(np.array([[1.0, -2.0, 0.5]]))
    path = tmp_path / "forces.csv"
    fem.write_force_csv(ff, path)
    lines = path.read_text().splitlines()
    assert lines[0] == "node_id,fx,fy,fz"
    assert lines[1].startswith("0,1.0")
