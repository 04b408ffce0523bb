"""Corotational linear FEM on tet meshes with implicit backward-Euler stepping.

Constant-strain tetrahedra with per-element rotations extracted by polar
decomposition (stiffness warping). Time integration solves the backward-Euler
force balance with Newton iterations and a sparse direct factorization that is
reused across steps while the configuration changes slowly.
"""

import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .mesh import mass_properties

log = logging.getLogger(__name__)

GRAVITY = 9.81  # m/s^2

# Stiffness-proportional damping (seconds). Damps elastic vibration without
# touching rigid-body momentum, so ballistic motion stays exact.
STIFFNESS_DAMPING = 5e-3

NEWTON_TOL = 1e-6  # relative to the characteristic force
NEWTON_MAX_ITER = 20


class DegenerateElementError(ValueError):
    """Rest-shape matrix of an element is (near) singular."""


class InvertedElementError(ValueError):
    """Deformation gradient with non-positive determinant."""


class StepFailure(RuntimeError):
    """Newton did not reach the residual tolerance within the iteration cap."""

    def __init__(self, message, residual):
        super().__init__(message)
        self.residual = residual


@dataclass
class SimState:
    """Nodal positions/velocities and element Cauchy stress at one time."""

    positions: np.ndarray  # (n, 3) m
    velocities: np.ndarray  # (n, 3) m/s
    element_stress: np.ndarray  # (m, 3, 3) Pa, symmetric
    time: float = 0.0

    def copy(self):
        return SimState(
            self.positions.copy(),
            self.velocities.copy(),
            self.element_stress.copy(),
            self.time,
        )


def rest_state(model):
    return SimState(
        model.mesh.nodes.copy(),
        np.zeros_like(model.mesh.nodes),
        np.zeros((model.mesh.n_tets, 3, 3)),
        0.0,
    )


@dataclass
class FemModel:
    """Precomputed element data for one mesh and material."""

    mesh: object
    material: object
    rest_inverses: np.ndarray  # (m, 3, 3)
    element_stiffness: np.ndarray  # (m, 12, 12)
    lumped_masses: np.ndarray  # (n,)
    mass: float
    com: np.ndarray
    # assembly caches
    _scatter: np.ndarray = field(repr=False, default=None)
    _coo_rows: np.ndarray = field(repr=False, default=None)
    _coo_cols: np.ndarray = field(repr=False, default=None)
    _csr_pos: np.ndarray = field(repr=False, default=None)
    _csr_template: object = field(repr=False, default=None)

    @property
    def n_dof(self):
        return 3 * self.mesh.n_nodes


def build_model(mesh, material):
    """Precompute rest inverses and 12x12 stiffness blocks for every tet."""
    lam, mu = material.lame()
    nodes, tets = mesh.nodes, mesh.tets
    dm = np.transpose(nodes[tets[:, 1:]] - nodes[tets[:, :1]], (0, 2, 1))
    det = np.linalg.det(dm)
    if (np.abs(det) < 6 * 1e-12).any():
        raise DegenerateElementError("near-singular rest shape matrix")
    bm = np.linalg.inv(dm)
    vol = det / 6.0

    # gradients of the 4 linear shape functions: rows of bm and their negative sum
    g = np.empty((len(tets), 4, 3))
    g[:, 1:, :] = bm
    g[:, 0, :] = -bm.sum(axis=1)

    # strain-displacement matrix in Voigt order (xx, yy, zz, xy, yz, zx)
    b = np.zeros((len(tets), 6, 12))
    for a in range(4):
        gx, gy, gz = g[:, a, 0], g[:, a, 1], g[:, a, 2]
        c = 3 * a
        b[:, 0, c + 0] = gx
        b[:, 1, c + 1] = gy
        b[:, 2, c + 2] = gz
        b[:, 3, c + 0] = gy
        b[:, 3, c + 1] = gx
        b[:, 4, c + 1] = gz
        b[:, 4, c + 2] = gy
        b[:, 5, c + 0] = gz
        b[:, 5, c + 2] = gx

    c6 = np.zeros((6, 6))
    c6[:3, :3] = lam
    c6[np.arange(3), np.arange(3)] += 2 * mu
    c6[3:, 3:] = np.eye(3) * mu

    ke = np.einsum("eai,ab,ebj,e->eij", b, c6, b, vol, optimize=True)
    ke = 0.5 * (ke + np.transpose(ke, (0, 2, 1)))

    mass, com, lumped = mass_properties(mesh, material.density)
    model = FemModel(mesh, material, bm, ke, lumped, mass, com)
    _build_assembly_cache(model)
    return model


def _build_assembly_cache(model):
    tets = model.mesh.tets
    n = model.mesh.n_nodes
    dofs = (3 * tets[:, :, None] + np.arange(3)).reshape(len(tets), 12)
    model._scatter = dofs.ravel()

    rows = np.repeat(dofs, 12, axis=1).ravel()
    cols = np.tile(dofs, (1, 12)).ravel()
    # diagonal 3x3 node blocks appended so contact stiffness fits the pattern
    nd = (3 * np.arange(n)[:, None, None] + np.arange(3)[:, None] * 0 + 0)
    drows = np.repeat(3 * np.arange(n), 9) + np.repeat(
        np.tile(np.arange(3), (n, 1)).ravel(), 3
    )
    del nd
    drows = (3 * np.arange(n)[:, None] + np.repeat(np.arange(3), 3)self_dummy) if False else None
    # build node-diagonal block indices explicitly
    base = 3 * np.arange(n)
    br = (base[:, None] + np.repeat(np.arange(3), 3)[None, :]).ravel()
    bc = (base[:, None] + np.tile(np.arange(3), 3)[None, :]).ravel()
    rows = np.concatenate([rows, br])
    cols = np.concatenate([cols, bc])

    coo = sp.coo_matrix(
        (np.ones(len(rows)), (rows, cols)), shape=(3 * n, 3 * n)
    ).tocsr()
    coo.sort_indices()
    # map each coo entry to its csr data slot
    pos = np.empty(len(rows), dtype=np.int64)
    indptr, indices = coo.indptr, coo.indices
    for_start = indptr[rows]
    for_end = indptr[rows + 1]
    # searchsorted per entry within its row segment
    pos = for_start + np.array(
        [
            np.searchsorted(indices[s:e], c)
            for s, e, c in zip(for_start, for_end, cols)
        ]
    )
    model._coo_rows = rows
    model._coo_cols = cols
    model._csr_pos = pos
    template = coo
    template.data = np.zeros_like(template.data)
    model._csr_template = template


# ---------------------------------------------------------------------------
# kinematics and stress


def polar_rotation(f):
    """Rotation factor of the polar decomposition F = R S (det F must be > 0)."""
    f = np.asarray(f, dtype=float)
    if np.linalg.det(f) <= 0:
        raise InvertedElementError("deformation gradient has det <= 0")
    u, s, vt = np.linalg.svd(f)
    r = u @ vt
    if np.linalg.det(r) < 0:
        u[:, -1] *= -1
        r = u @ vt
    return r


def _polar_batch(f):
    """Rotations and symmetric factors for a stack of deformation gradients.

    Higham's scaled Newton iteration on the well-posed elements; SVD with
    singular-value clamping on inverted or non-converging ones (logged).
    """
    m = len(f)
    r = np.empty_like(f)
    s_out = np.empty_like(f)
    det = np.linalg.det(f)
    good = det > 1e-12
    n_bad = int((~good).sum())
    if n_bad:
        log.warning("clamping %d inverted/degenerate elements", n_bad)
        u, sig, vt = np.linalg.svd(f[~good])
        neg = np.linalg.det(u @ vt) < 0
        u[neg, :, -1] *= -1
        sig[neg, -1] *= -1
        sig = np.maximum(sig, 1e-8)
        r[~good] = u @ vt
        v = np.transpose(vt, (0, 2, 1))
        s_out[~good] = np.einsum("eij,ej,ekj->eik", v, sig, v)
    if good.any():
        x = f[good].copy()
        converged = np.zeros(len(x), dtype=bool)
        for _ in range(40):
            xinv = np.linalg.inv(x)
            gamma = np.sqrt(
                np.linalg.norm(xinv, axis=(1, 2)) / np.linalg.norm(x, axis=(1, 2))
            )
            xn = 0.5 * (
                gamma[:, None, None] * x
                + np.transpose(xinv, (0, 2, 1)) / gamma[:, None, None]
            )
            delta = np.abs(xn - x).max(axis=(1, 2))
            x = xn
            converged = delta < 1e-12
            if converged.all():
                break
        if not converged.all():
            bad = ~converged
            u, sig, vt = np.linalg.svd(f[good][bad])
            x[bad] = u @ vt
        r[good] = x
        s_out[good] = np.einsum("eji,ejk->eik", x, f[good])
        s_out[good] = 0.5 * (s_out[good] + np.transpose(s_out[good], (0, 2, 1)))
    return r, s_out


def element_kinematics(model, positions):
    """Per-element deformation gradient, rotation, and stretch (F, R, S)."""
    tets = model.mesh.tets
    ds = np.transpose(positions[tets[:, 1:]] - positions[tets[:, :1]], (0, 2, 1))
    f = ds @ model.rest_inverses
    r, s = _polar_batch(f)
    return f, r, s


def corotated_stress(model, positions):
    """World-frame Cauchy stress per element from the corotated linear law."""
    lam, mu = model.material.lame()
    _, r, s = element_kinematics(model, positions)
    eps = s - np.eye(3)
    tr = np.trace(eps, axis1=1, axis2=2)
    sigma_c = lam * tr[:, None, None] * np.eye(3) + 2 * mu * eps
    return np.einsum("eij,ejk,elk->eil", r, sigma_c, r)


def von_mises(sigma):
    """Von Mises equivalent stress of one or a stack of stress tensors."""
    sigma = np.asarray(sigma, dtype=float)
    single = sigma.ndim == 2
    if single:
        sigma = sigma[None]
    tr = np.trace(sigma, axis1=1, axis2=2) / 3.0
    dev = sigma - tr[:, None, None] * np.eye(3)
    vm = np.sqrt(1.5 * np.einsum("eij,eij->e", dev, dev))
    return float(vm[0]) if single else vm


def strain_energy(model, state):
    """Elastic potential energy 1/2 sigma:eps integrated over the mesh (J)."""
    lam, mu = model.material.lame()
    _, _, s = element_kinematics(model, state.positions)
    eps = s - np.eye(3)
    tr = np.trace(eps, axis1=1, axis2=2)
    dens = 0.5 * (lam * tr**2 + 2 * mu * np.einsum("eij,eij->e", eps, eps))
    return float((dens * model.mesh.tet_volumes).sum())


# ---------------------------------------------------------------------------
# forces and assembly


def _elastic_forces(model, positions, velocities=None, damping=0.0):
    """Internal corotational forces; damping folds -beta*K*v into the same pass."""
    tets = model.mesh.tets
    _, r, _ = element_kinematics(model, positions)
    x_eff = positions if not damping else positions + damping * velocities
    xe = x_eff[tets]  # (m, 4, 3)
    u_loc = np.einsum("eji,eaj->eai", r, xe) - model.mesh.nodes[tets]
    f_loc = -np.einsum("eij,ej->ei", model.element_stiffness, u_loc.reshape(-1, 12))
    f_world = np.einsum("eij,eaj->eai", r, f_loc.reshape(-1, 4, 3))
    f = np.bincount(
        model._scatter, weights=f_world.ravel(), minlength=model.n_dof
    )
    return f, r


def _warped_stiffness_data(model, rotations):
    """Element data for A = sum R Ke R^T in the cached sparsity layout."""
    k4 = model.element_stiffness.reshape(-1, 4, 3, 4, 3)
    w = np.einsum("eip,eapbq,ejq->eaibj", rotations, k4, rotations, optimize=True)
    return w.reshape(-1, 144).ravel()


def assemble_stiffness(model, rotations=None):
    """Global (warped) stiffness as CSR; identity rotations by default."""
    if rotations is None:
        rotations = np.broadcast_to(np.eye(3), (model.mesh.n_tets, 3, 3))
    vals = _warped_stiffness_data(model, rotations)
    vals = np.concatenate([vals, np.zeros(9 * model.mesh.n_nodes)])
    a = model._csr_template.copy()
    a.data = np.bincount(model._csr_pos, weights=vals, minlength=len(a.data))
    return a


def _constraint_dofs(kinematic_constraints):
    """Flatten (node, position) pairs into dof indices and target values."""
    if not kinematic_constraints:
        return np.empty(0, dtype=np.int64), np.empty(0)
    nodes, targets = [], []
    for node, pos in kinematic_constraints:
        nodes.append(int(node))
        targets.append(np.asarray(pos, dtype=float))
    nodes = np.asarray(nodes)
    dofs = (3 * nodes[:, None] + np.arange(3)).ravel()
    return dofs, np.concatenate(targets)


class ImplicitSolver:
    """Backward-Euler Newton stepper with factorization reuse.

    The Jacobian M/dt^2 + (1 + beta/dt) K_warp + contact stiffness is
    refactorized only when the contact set changes, rotations drift, or
    Newton convergence degrades; correctness rests on the exact residual.
    """

    def __init__(self, model, dt, damping=STIFFNESS_DAMPING, newton_tol=NEWTON_TOL,
                 max_iter=NEWTON_MAX_ITER):
        self.model = model
        self.dt = float(dt)
        self.damping = float(damping)
        self.newton_tol = newton_tol
        self.max_iter = max_iter
        self._lu = None
        self._fact_rotations = None
        self._fact_contact_key = None
        self._fact_constraint_key = None
        self._cdofs = np.empty(0, dtype=np.int64)
        self._cvals = np.empty(0)
        self._zero_mask = None
        self.n_factorizations = 0

    def set_constraints(self, constrained_dofs, values):
        self._cdofs = np.asarray(constrained_dofs, dtype=np.int64)
        self._cvals = np.asarray(values, dtype=float)
        self._lu = None

    def _mass_diag(self):
        return np.repeat(self.model.lumped_masses, 3)

    def _factorize(self, rotations, contact_stiff):
        model = self.model
        vals = _warped_stiffness_data(model, rotations) * (
            1.0 + self.damping / self.dt
        )
        diag_blocks = np.zeros((model.mesh.n_nodes, 3, 3))
        if contact_stiff is not None:
            idx, blocks = contact_stiff
            np.add.at(diag_blocks, idx, blocks)
        data = np.concatenate([vals, diag_blocks.ravel()])
        a = model._csr_template.copy()
        a.data = np.bincount(model._csr_pos, weights=data, minlength=len(a.data))
        a = a + sp.diags(self._mass_diag() / self.dt**2)
        a = a.tocsc()
        if len(self._cdofs):
            if self._zero_mask is None:
                mask_rows = np.isin(a.tocsr().indices, self._cdofs)
                self._zero_mask = None  # recomputed below per matrix
            a = a.tolil()
            a[self._cdofs, :] = 0.0
            a[:, self._cdofs] = 0.0
            a[self._cdofs, self._cdofs] = 1.0
            a = a.tocsc()
        self._lu = spla.splu(a)
        self._fact_rotations = rotations.copy()
        self.n_factorizations += 1

    def _needs_refactor(self, rotations, contact_key):
        if self._lu is None:
            return True
        if contact_key != self._fact_contact_key:
            return True
        drift = np.abs(rotations - self._fact_rotations).max()
        return drift > 0.3

    def step(self, state, external_forces=None, contact_hook=None):
        """Advance one backward-Euler step; returns the new SimState.

        contact_hook(positions, velocities) must return (forces (n,3),
        stiffness (idx, blocks) or None, key) where key identifies the
        active set for factorization reuse.
        """
        model, dt = self.model, self.dt
        n = model.mesh.n_nodes
        x_n = state.positions.reshape(-1)
        v_n = state.velocities.reshape(-1)
        mdiag = self._mass_diag()
        f_ext = (
            np.zeros(model.n_dof)
            if external_forces is None
            else np.asarray(external_forces, dtype=float).reshape(-1)
        )

        x = x_n + dt * v_n  # inertial predictor
        if len(self._cdofs):
            x[self._cdofs] = self._cvals

        def residual(xv):
            pos = xv.reshape(n, 3)
            vel = ((xv - x_n) / dt).reshape(n, 3)
            f_el, rot = _elastic_forces(model, pos, vel, self.damping)
            f_c = 0.0
            cstiff, ckey = None, None
            if contact_hook is not None:
                fc, cstiff, ckey = contact_hook(pos, vel)
                f_c = fc.reshape(-1)
            r = mdiag * (xv - x_n - dt * v_n) / dt**2 - f_el - f_ext - f_c
            f_scale = max(
                float(np.linalg.norm(f_ext + f_c)),
                float(np.linalg.norm(f_el)),
                model.mass * GRAVITY,
            )
            if len(self._cdofs):
                r[self._cdofs] = 0.0
            return r, rot, cstiff, ckey, f_scale

        r, rot, cstiff, ckey, f_scale = residual(x)
        tol = self.newton_tol * f_scale + 1e-12
        rnorm = np.linalg.norm(r)
        it = 0
        refactored_this_step = False
        while rnorm > tol:
            if it >= self.max_iter:
                raise StepFailure(
                    f"Newton stalled at residual {rnorm:.3e} (tol {tol:.3e})",
                    rnorm,
                )
            if self._needs_refactor(rot, ckey) or (it >= 3 and not refactored_this_step):
                self._factorize(rot, cstiff)
                self._fact_contact_key = ckey
                refactored_this_step = True
            dx = self._lu.solve(-r)
            step_scale = 1.0
            for _ in range(4):
                x_try = x + step_scale * dx
                if len(self._cdofs):
                    x_try[self._cdofs] = self._cvals
                r_try, rot_t, cstiff_t, ckey_t, f_scale = residual(x_try)
                if np.linalg.norm(r_try) < rnorm or step_scale <= 0.125:
                    break
                step_scale *= 0.5
            x, r, rot, cstiff, ckey = x_try, r_try, rot_t, cstiff_t, ckey_t
            tol = self.newton_tol * f_scale + 1e-12
            rnorm = np.linalg.norm(r)
            it += 1

        pos = x.reshape(n, 3)
        vel = ((x - x_n) / dt).reshape(n, 3)
        stress = corotated_stress(model, pos)
        return SimState(pos, vel, stress, state.time + dt)


def step(model, state, dt, external_forces=None, kinematic_constraints=None,
         damping=STIFFNESS_DAMPING, newton_tol=NEWTON_TOL, contact_hook=None):
    """Single backward-Euler step (stateless convenience wrapper).

    kinematic_constraints is an iterable of (node index, prescribed position);
    constrained nodes land exactly on their targets at the end of the step.
    """
    solver = ImplicitSolver(model, dt, damping=damping, newton_tol=newton_tol)
    dofs, vals = _constraint_dofs(kinematic_constraints)
    if len(dofs):
        solver.set_constraints(dofs, vals)
    return solver.step(state, external_forces=external_forces,
                       contact_hook=contact_hook)


def solve_static(model, external_forces, kinematic_constraints, max_iter=40,
                 tol=1e-9):
    """Static equilibrium positions under loads and nodal constraints.

    Newton on the corotational force balance; intended for the analytic
    benchmark problems (bar stretch, cantilever bending).
    """
    dofs, vals = _constraint_dofs(kinematic_constraints)
    f_ext = np.asarray(external_forces, dtype=float).reshape(-1)
    x = model.mesh.nodes.reshape(-1).copy()
    if len(dofs):
        x[dofs] = vals
    f_scale = max(float(np.linalg.norm(f_ext)), 1e-12)
    n = model.mesh.n_nodes
    for _ in range(max_iter):
        f_el, rot = _elastic_forces(model, x.reshape(n, 3))
        r = -f_el - f_ext
        if len(dofs):
            r[dofs] = 0.0
        if np.linalg.norm(r) <= tol * f_scale:
            return x.reshape(n, 3)
        a = assemble_stiffness(model, rot).tolil()
        if len(dofs):
            a[dofs, :] = 0.0
            a[:, dofs] = 0.0
            a[dofs, dofs] = 1.0
        dx = spla.splu(a.tocsc()).solve(-r)
        x = x + dx
        if len(dofs):
            x[dofs] = vals
    raise StepFailure("static solve did not converge", float(np.linalg.norm(r)))
