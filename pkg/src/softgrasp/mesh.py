"""Tetrahedral meshes: representation, primitive generators, queries, file I/O.

Meshes are desk-scale (meters, up to a few thousand nodes) and immutable once
built, so they can be shared freely across parallel grasp evaluations.
"""

import math
from dataclasses import dataclass

import numpy as np

# Tets below this volume are too ill-conditioned for the FEM element matrices.
MIN_TET_VOLUME = 1e-12

# Outward-oriented faces of a positively oriented tet (v0, v1, v2, v3).
_TET_FACES = np.array([[0, 2, 1], [0, 1, 3], [0, 3, 2], [1, 2, 3]])


class MeshError(ValueError):
    """Raised for unparseable files, degenerate elements, or bad parameters."""


@dataclass(frozen=True)
class MaterialParams:
    """Homogeneous isotropic material of a deformable object.

    Attributes
    ----------
    density : float
        Mass density in kg/m^3.
    youngs_modulus : float
        Young's modulus E in Pa.
    poisson : float
        Poisson's ratio, in [0, 0.5).
    friction : float
        Coulomb friction coefficient against gripper and platform.
    """

    density: float = 1000.0
    youngs_modulus: float = 2e4
    poisson: float = 0.3
    friction: float = 0.7

    def __post_init__(self):
        if self.density <= 0:
            raise ValueError(f"density must be > 0, got {self.density}")
        if self.youngs_modulus <= 0:
            raise ValueError(f"youngs_modulus must be > 0, got {self.youngs_modulus}")
        if not 0 <= self.poisson < 0.5:
            raise ValueError(f"poisson must be in [0, 0.5), got {self.poisson}")
        if self.friction < 0:
            raise ValueError(f"friction must be >= 0, got {self.friction}")

    def lame(self):
        """Return the Lame parameters (lambda, mu) of the material."""
        e, nu = self.youngs_modulus, self.poisson
        lam = e * nu / ((1 + nu) * (1 - 2 * nu))
        mu = e / (2 * (1 + nu))
        return lam, mu


def _tet_volumes(nodes, tets):
    d = nodes[tets[:, 1:]] - nodes[tets[:, :1]]
    return np.linalg.det(d) / 6.0


class TetMesh:
    """Immutable tetrahedral volume mesh with derived boundary surface.

    Parameters
    ----------
    nodes : (n, 3) float array
        Vertex positions in meters.
    tets : (m, 4) int array
        Vertex indices per tetrahedron. Negative-volume tets are reordered;
        near-zero-volume tets are rejected.
    """

    def __init__(self, nodes, tets):
        nodes = np.ascontiguousarray(np.asarray(nodes, dtype=np.float64))
        tets = np.ascontiguousarray(np.asarray(tets, dtype=np.int64))
        if nodes.ndim != 2 or nodes.shape[1] != 3:
            raise MeshError(f"nodes must be (n, 3), got {nodes.shape}")
        if tets.ndim != 2 or tets.shape[1] != 4:
            raise MeshError(f"tets must be (m, 4), got {tets.shape}")
        if tets.size and (tets.min() < 0 or tets.max() >= len(nodes)):
            raise MeshError("tet indices out of range")
        if len(tets) == 0:
            raise MeshError("mesh has no tetrahedra")

        vols = _tet_volumes(nodes, tets)
        bad = np.nonzero(np.abs(vols) < MIN_TET_VOLUME)[0]
        if bad.size:
            raise MeshError(
                f"degenerate tet (|volume| < {MIN_TET_VOLUME} m^3) at element {bad[0]}"
            )
        flipped = vols < 0
        if flipped.any():
            tets = tets.copy()
            tets[flipped, 2], tets[flipped, 3] = (
                tets[flipped, 3].copy(),
                tets[flipped, 2].copy(),
            )
            vols = np.abs(vols)

        self.nodes = nodes
        self.tets = tets
        self.tet_volumes = vols
        self.surface_tris = _extract_surface(tets)
        for a in (self.nodes, self.tets, self.tet_volumes, self.surface_tris):
            a.setflags(write=False)

    @property
    def n_nodes(self):
        return len(self.nodes)

    @property
    def n_tets(self):
        return len(self.tets)

    @property
    def total_volume(self):
        return float(self.tet_volumes.sum())

    @property
    def surface_nodes(self):
        """Sorted indices of nodes on the boundary surface."""
        return np.unique(self.surface_tris)

    def surface_normals_areas(self, positions=None):
        """Outward unit normals and areas of the surface triangles.

        positions defaults to the rest nodes; pass deformed positions to query
        the deformed surface.
        """
        p = self.nodes if positions is None else positions
        t = self.surface_tris
        cross = np.cross(p[t[:, 1]] - p[t[:, 0]], p[t[:, 2]] - p[t[:, 0]])
        areas = 0.5 * np.linalg.norm(cross, axis=1)
        normals = cross / np.maximum(2 * areas[:, None], 1e-300)
        return normals, areas

    def transformed(self, rotation=None, translation=None):
        """Return a rigidly transformed copy (x -> R x + t)."""
        p = self.nodes
        if rotation is not None:
            p = p @ np.asarray(rotation, dtype=float).T
        if translation is not None:
            p = p + np.asarray(translation, dtype=float)
        return TetMesh(p, self.tets)

    def rest_on_plane(self, plane_z=0.0):
        """Return a copy translated so the lowest node sits on z = plane_z."""
        shift = np.array([0.0, 0.0, plane_z - self.nodes[:, 2].min()])
        return self.transformed(translation=shift)


def _extract_surface(tets):
    faces = tets[:, _TET_FACES].reshape(-1, 3)
    key = np.sort(faces, axis=1)
    _, inv, counts = np.unique(key, axis=0, return_inverse=True, return_counts=True)
    boundary = counts[inv] == 1
    return np.ascontiguousarray(faces[boundary])


def surface_euler_characteristic(mesh):
    """V - E + F of the boundary surface (2 per sphere-like shell)."""
    tris = mesh.surface_tris
    v = len(np.unique(tris))
    edges = np.sort(tris[:, [0, 1, 1, 2, 2, 0]].reshape(-1, 2), axis=1)
    e = len(np.unique(edges, axis=0))
    return v - e + len(tris)


def mass_properties(mesh, density):
    """Mass, center of mass, and per-node lumped masses of a mesh.

    Each tet's mass is split equally among its four vertices, which is the
    lumping the dynamics uses.

    Returns
    -------
    (mass, com, lumped) : (float, (3,) array, (n,) array)
    """
    if density <= 0:
        raise ValueError("density must be > 0")
    tet_mass = density * mesh.tet_volumes
    mass = float(tet_mass.sum())
    centroids = mesh.nodes[mesh.tets].mean(axis=1)
    com = (tet_mass[:, None] * centroids).sum(axis=0) / mass
    lumped = np.bincount(
        mesh.tets.ravel(),
        weights=np.repeat(tet_mass / 4.0, 4),
        minlength=mesh.n_nodes,
    )
    return mass, com, lumped


# ---------------------------------------------------------------------------
# primitive generators


def make_primitive(kind, dims, resolution=2):
    """Generate a watertight tet mesh of a named primitive.

    Parameters
    ----------
    kind : str
        One of prism, spheroid, cylinder, cup, ring, flask.
    dims : dict
        Size parameters in meters. prism: lx, ly, lz; spheroid: a (equatorial
        radius), c (polar radius); cylinder: radius, height; cup and ring:
        radius, height, wall; flask: a, b (cross-section radii), height, wall.
    resolution : int
        Subdivision level, >= 1. Wall thicknesses snap to the cell grid.
    """
    if resolution < 1:
        raise MeshError("resolution must be >= 1")
    dims = {k: float(v) for k, v in dims.items()}
    if any(v <= 0 for v in dims.values()):
        raise MeshError(f"dims must be positive, got {dims}")
    try:
        gen = _GENERATORS[kind]
    except KeyError:
        raise MeshError(f"unknown primitive kind {kind!r}") from None
    return gen(dims, int(resolution))


def _require(dims, *keys):
    missing = [k for k in keys if k not in dims]
    if missing:
        raise MeshError(f"missing dims {missing}")
    return [dims[k] for k in keys]


def _grid_nodes_cells(nx, ny, nz):
    """Regular (nx, ny, nz)-cell grid on the unit cube: nodes and hex cells."""
    xs = np.linspace(0.0, 1.0, nx + 1)
    ys = np.linspace(0.0, 1.0, ny + 1)
    zs = np.linspace(0.0, 1.0, nz + 1)
    gx, gy, gz = np.meshgrid(xs, ys, zs, indexing="ij")
    nodes = np.stack([gx.ravel(), gy.ravel(), gz.ravel()], axis=1)

    def nid(i, j, k):
        return (i * (ny + 1) + j) * (nz + 1) + k

    i, j, k = np.meshgrid(np.arange(nx), np.arange(ny), np.arange(nz), indexing="ij")
    i, j, k = i.ravel(), j.ravel(), k.ravel()
    corners = np.stack(
        [
            nid(i, j, k),
            nid(i + 1, j, k),
            nid(i, j + 1, k),
            nid(i + 1, j + 1, k),
            nid(i, j, k + 1),
            nid(i + 1, j, k + 1),
            nid(i, j + 1, k + 1),
            nid(i + 1, j + 1, k + 1),
        ],
        axis=1,
    )
    return nodes, corners


# Kuhn subdivision: six tets around the (000)-(111) diagonal. Shared cube
# faces get matching diagonals, so adjacent cells are conforming.
_KUHN = np.array(
    [
        [0, 1, 3, 7],
        [0, 3, 2, 7],
        [0, 2, 6, 7],
        [0, 6, 4, 7],
        [0, 4, 5, 7],
        [0, 5, 1, 7],
    ]
)


def _compact(nodes, tets):
    used, inv = np.unique(tets.ravel(), return_inverse=True)
    return nodes[used], inv.reshape(tets.shape)


def _prism(dims, res):
    lx, ly, lz = _require(dims, "lx", "ly", "lz")
    lmin = min(lx, ly, lz)
    n = [max(1, round(res * s / lmin)) for s in (lx, ly, lz)]
    nodes, cells = _grid_nodes_cells(*n)
    nodes = (nodes - 0.5) * np.array([lx, ly, lz])
    return TetMesh(nodes, cells[:, _KUHN].reshape(-1, 4))


def _ball_map(p):
    """Map the unit-max-norm cube onto the unit ball, radially."""
    linf = np.abs(p).max(axis=1)
    l2 = np.linalg.norm(p, axis=1)
    scale = np.where(l2 > 0, linf / np.maximum(l2, 1e-300), 0.0)
    return p * scale[:, None]


def _spheroid(dims, res):
    a, c = _require(dims, "a", "c")
    n = 2 * res
    nodes, cells = _grid_nodes_cells(n, n, n)
    nodes = _ball_map(2.0 * nodes - 1.0) * np.array([a, a, c])
    return TetMesh(nodes, cells[:, _KUHN].reshape(-1, 4))


def _disk_map(uv):
    linf = np.abs(uv).max(axis=1)
    l2 = np.linalg.norm(uv, axis=1)
    scale = np.where(l2 > 0, linf / np.maximum(l2, 1e-300), 0.0)
    return uv * scale[:, None]


def _cylinder_grid(rx, ry, height, res, keep=None, n_z=None):
    """Structured cylinder mesh with optional cell carving.

    The square cross-section grid is mapped radially onto an (elliptical)
    disk; max-norm level sets become concentric rings, so carving by ring
    index leaves clean cylindrical walls. keep(ring, n_rings, k, n_z) selects
    the cells retained.
    """
    n_r = 2 * res  # rings from axis to rim
    if n_z is None:
        n_z = max(1, round(n_r * height / (rx + ry)))
    nodes, cells = _grid_nodes_cells(2 * n_r, 2 * n_r, n_z)
    if keep is not None:
        centers = nodes[cells].mean(axis=1)
        ring = np.floor(
            np.abs(centers[:, :2] * (2 * n_r) - n_r).max(axis=1)
        ).astype(int)
        kz = np.floor(centers[:, 2] * n_z).astype(int)
        cells = cells[keep(ring, n_r, kz, n_z)]
        if len(cells) == 0:
            raise MeshError("carve predicate removed every cell")
    uv = _disk_map(2.0 * nodes[:, :2] - 1.0)
    nodes = np.column_stack([uv[:, 0] * rx, uv[:, 1] * ry, nodes[:, 2] * height])
    nodes, cells = _compact(nodes, cells)
    return TetMesh(nodes, cells[:, _KUHN].reshape(-1, 4))


def _cylinder(dims, res):
    r, h = _require(dims, "radius", "height")
    m = _cylinder_grid(r, r, h, res)
    return m.transformed(translation=[0, 0, -h / 2])


def _wall_cells(wall, extent, n_cells, limit):
    if wall >= limit:
        raise MeshError(f"wall {wall} must be < {limit} for these dims")
    return max(1, round(wall * n_cells / extent))


def _cup(dims, res):
    r, h, w = _require(dims, "radius", "height", "wall")
    n_r = 2 * res
    w_r = _wall_cells(w, r, n_r, r / 2)
    n_z = max(2, round(n_r * h / r))
    w_z = _wall_cells(w, h, n_z, h / 2)

    def keep(ring, nr, kz, nz):
        return (ring >= nr - w_r) | (kz < w_z)

    return _cylinder_grid(r, r, h, res, keep=keep, n_z=n_z)


def _ring(dims, res):
    r, h, w = _require(dims, "radius", "height", "wall")
    n_r = 2 * res
    w_r = _wall_cells(w, r, n_r, r / 2)
    n_z = max(2, round(n_r * h / r))

    def keep(ring, nr, kz, nz):
        return ring >= nr - w_r

    return _cylinder_grid(r, r, h, res, keep=keep, n_z=n_z)


def _flask(dims, res):
    a, b, h, w = _require(dims, "a", "b", "height", "wall")
    rmin = min(a, b)
    n_r = 2 * res
    w_r = _wall_cells(w, rmin, n_r, rmin / 2)
    n_z = max(3, round(n_r * h / rmin))
    w_z = _wall_cells(w, h, n_z, h / 2)

    def keep(ring, nr, kz, nz):
        return (ring >= nr - w_r) | (kz < w_z) | (kz >= nz - w_z)

    return _cylinder_grid(a, b, h, res, keep=keep, n_z=n_z)


_GENERATORS = {
    "prism": _prism,
    "spheroid": _spheroid,
    "cylinder": _cylinder,
    "cup": _cup,
    "ring": _ring,
    "flask": _flask,
}

PRIMITIVE_KINDS = tuple(_GENERATORS)


# ---------------------------------------------------------------------------
# geometric queries


def ray_surface_hits(mesh, origin, direction, positions=None, t_min=1e-9,
                     dedupe_tol=1e-9):
    """Intersect a ray with the boundary surface (Moller-Trumbore).

    Returns (t, tri_index) arrays sorted by t, keeping hits with t > t_min.
    Hits closer than dedupe_tol in t collapse to one (rays through shared
    edges or vertices would otherwise report one hit per incident triangle).
    """
    p = mesh.nodes if positions is None else positions
    tri = mesh.surface_tris
    v0 = p[tri[:, 0]]
    e1 = p[tri[:, 1]] - v0
    e2 = p[tri[:, 2]] - v0
    d = np.asarray(direction, dtype=float)
    o = np.asarray(origin, dtype=float)
    pvec = np.cross(d, e2)
    det = np.einsum("ij,ij->i", e1, pvec)
    ok = np.abs(det) > 1e-14
    inv = np.where(ok, 1.0 / np.where(ok, det, 1.0), 0.0)
    tvec = o - v0
    u = np.einsum("ij,ij->i", tvec, pvec) * inv
    qvec = np.cross(tvec, e1)
    v = np.einsum("ij,j->i", qvec, d) * inv
    t = np.einsum("ij,ij->i", e2, qvec) * inv
    eps = 1e-10
    hit = ok & (u >= -eps) & (v >= -eps) & (u + v <= 1 + eps) & (t > t_min)
    idx = np.nonzero(hit)[0]
    order = np.argsort(t[idx], kind="stable")
    ts, tris = t[idx][order], idx[order]
    if dedupe_tol and len(ts) > 1:
        keep = np.concatenate([[True], np.diff(ts) > dedupe_tol])
        ts, tris = ts[keep], tris[keep]
    return ts, tris


# ---------------------------------------------------------------------------
# file I/O


def _data_lines(path):
    with open(path) as fh:
        for line in fh:
            s = line.split("#", 1)[0].strip()
            if s:
                yield s


def _parse_indexed(path, n_cols, what):
    lines = _data_lines(path)
    try:
        header = next(lines).split()
        count = int(header[0])
    except (StopIteration, ValueError) as exc:
        raise MeshError(f"{path}: bad {what} header") from exc
    rows = np.empty((count, n_cols))
    for r in range(count):
        try:
            parts = next(lines).split()
            idx = int(parts[0])
            rows[r] = [float(v) for v in parts[1 : 1 + n_cols]]
        except (StopIteration, ValueError, IndexError) as exc:
            raise MeshError(f"{path}: bad {what} row {r}") from exc
        if idx != r:
            raise MeshError(f"{path}: {what} rows must be 0-based and in order")
    return rows


def _load_node_ele(base):
    nodes = _parse_indexed(base + ".node", 3, "node")
    tets = _parse_indexed(base + ".ele", 4, "ele").astype(np.int64)
    return TetMesh(nodes, tets)


def _load_msh(path):
    nodes, tets = None, []
    lines = iter(open(path).read().splitlines())
    for line in lines:
        tag = line.strip()
        if tag == "$Nodes":
            count = int(next(lines))
            nodes = np.empty((count, 3))
            for _ in range(count):
                parts = next(lines).split()
                nodes[int(parts[0]) - 1] = [float(v) for v in parts[1:4]]
        elif tag == "$Elements":
            count = int(next(lines))
            for _ in range(count):
                parts = next(lines).split()
                if int(parts[1]) == 4:  # 4-node tetrahedron
                    ntags = int(parts[2])
                    tets.append([int(v) - 1 for v in parts[3 + ntags : 7 + ntags]])
    if nodes is None or not tets:
        raise MeshError(f"{path}: no nodes or no tetrahedra found")
    return TetMesh(nodes, np.array(tets, dtype=np.int64))


def load_mesh(path, format=None):
    """Load a tet mesh from a node-ele pair or a msh v2 ASCII file.

    path may be the .node file, the .ele file, the common basename, or a
    .msh file. Negative-volume tets are silently reordered.
    """
    path = str(path)
    if format is None:
        format = "msh" if path.endswith(".msh") else "node-ele"
    if format == "msh":
        return _load_msh(path)
    if format == "node-ele":
        base = path
        for suffix in (".node", ".ele"):
            if base.endswith(suffix):
                base = base[: -len(suffix)]
        return _load_node_ele(base)
    raise MeshError(f"unknown mesh format {format!r}")


def write_node_ele(mesh, base):
    """Write a mesh as the canonical node-ele text pair (0-based indices)."""
    with open(base + ".node", "w") as fh:
        fh.write(f"{mesh.n_nodes} 3\n")
        for i, p in enumerate(mesh.nodes):
            fh.write(f"{i} {p[0]:.17g} {p[1]:.17g} {p[2]:.17g}\n")
    with open(base + ".ele", "w") as fh:
        fh.write(f"{mesh.n_tets} 4\n")
        for i, t in enumerate(mesh.tets):
            fh.write(f"{i} {t[0]} {t[1]} {t[2]} {t[3]}\n")
