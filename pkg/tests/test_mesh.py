import numpy as np
import pytest

from softgrasp import mesh as msh
from softgrasp.mesh import (
    MaterialParams,
    MeshError,
    TetMesh,
    load_mesh,
    make_primitive,
    mass_properties,
    surface_euler_characteristic,
    write_node_ele,
)

UNIT_TET_NODES = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0], [0, 0, 1]], dtype=float)

# unit cube split into 5 tets: four corner tets of volume 1/6 plus the
# central regular tet of volume 1/3 (sums to 1 analytically)
CUBE_NODES = np.array(
    [[x, y, z] for z in (0, 1) for y in (0, 1) for x in (0, 1)], dtype=float
)[:, :]
CUBE_5TETS = np.array(
    [[0, 1, 2, 4], [3, 1, 2, 7], [5, 1, 4, 7], [6, 2, 4, 7], [1, 2, 4, 7]]
)


def write_node_ele_files(tmp_path, nodes, tets, name="m"):
    base = str(tmp_path / name)
    write_node_ele(TetMesh(nodes, tets), base)
    return base


def test_single_tet_file(tmp_path):
    base = write_node_ele_files(tmp_path, UNIT_TET_NODES, [[0, 1, 2, 3]])
    m = load_mesh(base)
    assert m.n_nodes == 4
    assert m.n_tets == 1
    assert len(m.surface_tris) == 4
    assert m.total_volume == pytest.approx(1 / 6, rel=1e-12)


def test_inverted_tet_reordered(tmp_path):
    base = str(tmp_path / "inv")
    with open(base + ".node", "w") as fh:
        fh.write("4 3\n")
        for i, p in enumerate(UNIT_TET_NODES):
            fh.write(f"{i} {p[0]} {p[1]} {p[2]}\n")
    with open(base + ".ele", "w") as fh:
        fh.write("1 4\n0 0 1 3 2\n")  # negative volume order
    m = load_mesh(base)
    assert m.tet_volumes[0] > 0
    assert m.total_volume == pytest.approx(1 / 6, rel=1e-12)


def test_cube_five_tets_volume(tmp_path):
    base = write_node_ele_files(tmp_path, CUBE_NODES, CUBE_5TETS)
    m = load_mesh(base)
    assert m.n_tets == 5
    # oracle: analytic volumes of the five tets
    expected = 4 * (1 / 6) + 1 / 3
    assert m.total_volume == pytest.approx(expected, abs=1e-12)
    assert surface_euler_characteristic(m) == 2


def test_degenerate_tet_rejected():
    nodes = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0], [0.5, 0.5, 0]])
    with pytest.raises(MeshError, match="element 0"):
        TetMesh(nodes, [[0, 1, 2, 3]])


def test_bad_indices_rejected():
    with pytest.raises(MeshError):
        TetMesh(UNIT_TET_NODES, [[0, 1, 2, 7]])


def test_msh_reader(tmp_path):
    path = tmp_path / "m.msh"
    lines = [
        "$MeshFormat", "2.2 0 8", "$EndMeshFormat",
        "$Nodes", "4",
        "1 0 0 0", "2 1 0 0", "3 0 1 0", "4 0 0 1",
        "$EndNodes",
        "$Elements", "2",
        "1 2 2 0 1 1 2 3",       # a surface triangle, must be ignored
        "2 4 2 0 1 1 2 3 4",     # the tet
        "$EndElements",
    ]
    path.write_text("\n".join(lines) + "\n")
    m = load_mesh(str(path))
    assert m.n_tets == 1
    assert m.total_volume == pytest.approx(1 / 6, rel=1e-12)


def test_node_ele_roundtrip(tmp_path):
    m = make_primitive("prism", dict(lx=0.02, ly=0.03, lz=0.01), 1)
    base = str(tmp_path / "rt")
    write_node_ele(m, base)
    m2 = load_mesh(base + ".node")
    np.testing.assert_array_equal(m.tets, m2.tets)
    np.testing.assert_allclose(m.nodes, m2.nodes, rtol=0, atol=0)


# --- primitives ------------------------------------------------------------


def test_prism_volume_exact():
    m = make_primitive("prism", dict(lx=0.08, ly=0.04, lz=0.02), 1)
    assert abs(m.total_volume - 6.4e-5) < 1e-9


def test_spheroid_volume_analytic():
    a, c = 0.03, 0.05
    m = make_primitive("spheroid", dict(a=a, c=c), 3)
    exact = 4 / 3 * np.pi * a * a * c
    assert abs(m.total_volume - exact) / exact < 0.05


def test_ring_is_cup_without_base():
    dims = dict(radius=0.03, height=0.08, wall=0.005)
    cup = make_primitive("cup", dims, 2)
    ring = make_primitive("ring", dims, 2)
    assert ring.n_nodes < cup.n_nodes


def test_wall_thickness_rejected():
    with pytest.raises(MeshError, match="wall"):
        make_primitive("cup", dict(radius=0.03, height=0.08, wall=0.015), 2)


@pytest.mark.parametrize(
    "kind,dims,chi",
    [
        ("prism", dict(lx=0.08, ly=0.04, lz=0.02), 2),
        ("spheroid", dict(a=0.03, c=0.05), 2),
        ("cylinder", dict(radius=0.03, height=0.1), 2),
        ("cup", dict(radius=0.03, height=0.08, wall=0.005), 2),
        ("ring", dict(radius=0.03, height=0.04, wall=0.005), 0),  # torus
        ("flask", dict(a=0.03, b=0.02, height=0.09, wall=0.005), 4),  # 2 shells
    ],
)
def test_primitive_surface_topology(kind, dims, chi):
    m = make_primitive(kind, dims, 2)
    assert surface_euler_characteristic(m) == chi
    # every face is incident to 1 tet (boundary) or 2 (interior)
    faces = m.tets[:, msh._TET_FACES].reshape(-1, 3)
    _, counts = np.unique(np.sort(faces, axis=1), axis=0, return_counts=True)
    assert set(counts) <= {1, 2}
    assert (m.tet_volumes > 0).all()


# --- mass properties -------------------------------------------------------


def test_mass_unit_cube():
    m = TetMesh(CUBE_NODES, CUBE_5TETS)
    mass, com, lumped = mass_properties(m, 1000.0)
    assert mass == pytest.approx(1000.0, rel=1e-12)
    np.testing.assert_allclose(com, [0.5, 0.5, 0.5], atol=1e-12)
    assert lumped.sum() == pytest.approx(mass, rel=1e-12)


def test_mass_single_tet():
    m = TetMesh(UNIT_TET_NODES, [[0, 1, 2, 3]])
    mass, _, _ = mass_properties(m, 6.0)
    assert mass == pytest.approx(1.0, rel=1e-12)


def test_mass_prism():
    m = make_primitive("prism", dict(lx=0.08, ly=0.04, lz=0.02), 2)
    mass, _, lumped = mass_properties(m, 1000.0)
    assert mass == pytest.approx(0.064, rel=1e-9)
    assert lumped.sum() == pytest.approx(mass, rel=1e-12)


def test_mass_invariant_to_reorder_and_rigid_motion():
    rng = np.random.default_rng(7)
    m = make_primitive("spheroid", dict(a=0.03, c=0.05), 2)
    mass, com, _ = mass_properties(m, 1234.0)

    perm = rng.permutation(m.n_nodes)
    inv = np.argsort(perm)
    m2 = TetMesh(m.nodes[perm], inv[m.tets])
    mass2, com2, _ = mass_properties(m2, 1234.0)
    assert mass2 == pytest.approx(mass, rel=1e-12)
    np.testing.assert_allclose(com2, com, atol=1e-12)

    # rigid motion: mass exact, com transforms covariantly
    from scipy.spatial.transform import Rotation

    r = Rotation.from_rotvec([0.3, -0.2, 0.9]).as_matrix()
    t = np.array([0.1, -0.05, 0.2])
    m3 = m.transformed(rotation=r, translation=t)
    mass3, com3, _ = mass_properties(m3, 1234.0)
    assert mass3 == pytest.approx(mass, rel=1e-10)
    np.testing.assert_allclose(com3, r @ com + t, atol=1e-12)


# --- material params -------------------------------------------------------


def test_material_validation():
    MaterialParams(1000, 2e4, 0.3, 0.7)
    with pytest.raises(ValueError):
        MaterialParams(poisson=0.5)
    with pytest.raises(ValueError):
        MaterialParams(youngs_modulus=0)
    with pytest.raises(ValueError):
        MaterialParams(friction=-0.1)


def test_rest_on_plane():
    m = make_primitive("prism", dict(lx=0.08, ly=0.04, lz=0.02), 1)
    placed = m.rest_on_plane(0.0)
    assert placed.nodes[:, 2].min() == pytest.approx(0.0, abs=1e-15)


def test_ray_surface_hits_sphere():
    m = make_primitive("spheroid", dict(a=0.03, c=0.03), 3)
    t, idx = msh.ray_surface_hits(m, [0, 0, -1.0], [0, 0, 1.0])
    assert len(t) == 2
    # entry and exit near the two poles
    assert t[0] == pytest.approx(1.0 - 0.03, abs=1e-3)
    assert t[1] == pytest.approx(1.0 + 0.03, abs=1e-3)
