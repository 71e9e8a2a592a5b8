"""Periodic P1/P2 Lagrange spaces, quadrature, and assembly kernels.

Every weak-form kernel is evaluated element-wise with a single shared
quadrature rule and scattered into triplets, so two forms that must cancel
algebraically (transport against divergence, potential against energy) are
built from identical per-point arithmetic.

Kernels come in pairs: a ``local_*`` function returning the per-element dense
blocks, and a thin ``assemble_*`` wrapper scattering them into a CsrMatrix.
The nonlinear solver reuses the local arrays directly through a fixed sparsity
pattern, bypassing the triplet sort.

Vector-valued (velocity) degrees of freedom are stacked component-major:
global index c*ndof + a for component c in {0,1}.
"""

from dataclasses import dataclass
from typing import Callable

import numpy as np

from msfem.linalg import CsrMatrix, TripletBuffer, assemble_from_triplets
from msfem.mesh import PeriodicMesh


# ---------------------------------------------------------------------------
# quadrature

@dataclass
class QuadratureRule:
    """Barycentric points and weights on the reference triangle; weights sum to 1."""

    points: np.ndarray   # (nq, 3)
    weights: np.ndarray  # (nq,)
    degree: int

    @property
    def npoints(self) -> int:
        return len(self.weights)


def quadrature_degree5() -> QuadratureRule:
    """7-point rule, exact for polynomials up to degree 5."""
    s15 = np.sqrt(15.0)
    a1 = (6.0 - s15) / 21.0
    a2 = (6.0 + s15) / 21.0
    w1 = (155.0 - s15) / 1200.0
    w2 = (155.0 + s15) / 1200.0
    pts = [(1 / 3, 1 / 3, 1 / 3)]
    wts = [9.0 / 40.0]
    for a, w in ((a1, w1), (a2, w2)):
        b = 1.0 - 2.0 * a
        pts += [(b, a, a), (a, b, a), (a, a, b)]
        wts += [w, w, w]
    return QuadratureRule(np.array(pts), np.array(wts), degree=5)


# ---------------------------------------------------------------------------
# reference bases

def eval_basis(kind: str, bary) -> tuple[np.ndarray, np.ndarray]:
    """Values and reference-coordinate gradients of the Lagrange basis.

    The reference triangle has vertices (0,0), (1,0), (0,1) with barycentric
    coordinates (l0, l1, l2) = (1-x-y, x, y).  P2 edge functions are ordered
    (01, 12, 20) after the three vertex functions.
    """
    l0, l1, l2 = float(bary[0]), float(bary[1]), float(bary[2])
    if min(l0, l1, l2) < -1e-12 or abs(l0 + l1 + l2 - 1.0) > 1e-12:
        raise ValueError(f"invalid barycentric point {bary}")
    gl = np.array([[-1.0, -1.0], [1.0, 0.0], [0.0, 1.0]])
    if kind == "p1":
        vals = np.array([l0, l1, l2])
        return vals, gl.copy()
    if kind == "p2":
        l = np.array([l0, l1, l2])
        vals = np.empty(6)
        grads = np.empty((6, 2))
        for i in range(3):
            vals[i] = l[i] * (2.0 * l[i] - 1.0)
            grads[i] = (4.0 * l[i] - 1.0) * gl[i]
        for k, (i, j) in enumerate(((0, 1), (1, 2), (2, 0))):
            vals[3 + k] = 4.0 * l[i] * l[j]
            grads[3 + k] = 4.0 * (l[i] * gl[j] + l[j] * gl[i])
        return vals, grads
    raise ValueError(f"unknown element kind {kind!r}")


def tabulate(kind: str, quad: QuadratureRule) -> tuple[np.ndarray, np.ndarray]:
    """Basis values (nq, nloc) and reference gradients (nq, nloc, 2) at quad points."""
    vals = []
    grads = []
    for q in range(quad.npoints):
        v, g = eval_basis(kind, quad.points[q])
        vals.append(v)
        grads.append(g)
    return np.array(vals), np.array(grads)


# ---------------------------------------------------------------------------
# spaces and fields

class FeSpace:
    """Scalar P1 or P2 Lagrange space with periodic dof identification."""

    def __init__(self, mesh: PeriodicMesh, kind: str):
        if kind not in ("p1", "p2"):
            raise ValueError(f"unknown element kind {kind!r}")
        self.mesh = mesh
        self.kind = kind
        nv = mesh.num_vertices
        if kind == "p1":
            self.ndof = nv
            self.element_dofs = mesh.triangles.copy()
            self.dof_coords = mesh.vertices.copy()
            self.nloc = 3
        else:
            self.ndof = nv + mesh.num_edges
            self.element_dofs = np.hstack([mesh.triangles, nv + mesh.tri_edges])
            self.dof_coords = np.vstack([mesh.vertices, mesh.edge_midpoints])
            self.nloc = 6


@dataclass
class ScalarField:
    space: FeSpace
    coeffs: np.ndarray

    def __post_init__(self):
        if self.coeffs.shape != (self.space.ndof,):
            raise ValueError("coefficient length does not match space dimension")


@dataclass
class VectorField:
    """Two stacked scalar components on one space: coeffs[c*ndof + a]."""

    space: FeSpace
    coeffs: np.ndarray

    def __post_init__(self):
        if self.coeffs.shape != (2 * self.space.ndof,):
            raise ValueError("coefficient length does not match 2*ndof")

    def component(self, c: int) -> np.ndarray:
        n = self.space.ndof
        return self.coeffs[c * n:(c + 1) * n]


def interpolate_nodal(f: Callable, space: FeSpace) -> ScalarField:
    """Nodal interpolant: coefficient at each dof equals f at its representative point.

    f must accept numpy arrays (x, y); a scalar return value is broadcast.
    """
    x, y = space.dof_coords[:, 0], space.dof_coords[:, 1]
    vals = np.asarray(f(x, y), dtype=np.float64)
    if vals.ndim == 0:
        vals = np.full(space.ndof, float(vals))
    return ScalarField(space, vals)


def interpolate_nodal_vector(f: Callable, space: FeSpace) -> VectorField:
    """Nodal interpolant of a 2-vector function; f returns (fx, fy)."""
    x, y = space.dof_coords[:, 0], space.dof_coords[:, 1]
    fx, fy = f(x, y)
    fx = np.broadcast_to(np.asarray(fx, dtype=np.float64), (space.ndof,))
    fy = np.broadcast_to(np.asarray(fy, dtype=np.float64), (space.ndof,))
    return VectorField(space, np.concatenate([fx, fy]))


# ---------------------------------------------------------------------------
# assembly context

class Assembly:
    """Tabulated bases and element geometry for one Taylor-Hood pair."""

    def __init__(self, mesh: PeriodicMesh, quad: QuadratureRule | None = None):
        self.mesh = mesh
        self.quad = quad if quad is not None else quadrature_degree5()
        self.p1 = FeSpace(mesh, "p1")
        self.p2 = FeSpace(mesh, "p2")

        self.val1, gref1 = tabulate("p1", self.quad)
        self.val2, gref2 = tabulate("p2", self.quad)

        c = mesh.tri_coords
        jac = np.stack([c[:, 1] - c[:, 0], c[:, 2] - c[:, 0]], axis=-1)  # (ntri,2,2), columns
        det = jac[:, 0, 0] * jac[:, 1, 1] - jac[:, 0, 1] * jac[:, 1, 0]
        jinv = np.empty_like(jac)
        jinv[:, 0, 0] = jac[:, 1, 1]
        jinv[:, 0, 1] = -jac[:, 0, 1]
        jinv[:, 1, 0] = -jac[:, 1, 0]
        jinv[:, 1, 1] = jac[:, 0, 0]
        jinv /= det[:, None, None]

        self.areas = 0.5 * det
        self.wdet = self.areas[:, None] * self.quad.weights[None, :]   # (ntri, nq)
        # physical gradients: grad phi = J^{-T} gref
        self.grad1 = np.einsum("qlk,ekd->eqld", gref1, jinv)
        self.grad2 = np.einsum("qlk,ekd->eqld", gref2, jinv)
        # unwrapped physical quadrature coordinates
        self.points = np.einsum("ql,eld->eqd", self.quad.points, c)

    # -- field evaluation at quadrature points ------------------------------

    def eval_p1(self, coeffs: np.ndarray) -> np.ndarray:
        """(..., n1) coefficients -> (..., ntri, nq) values."""
        nodal = coeffs[..., self.p1.element_dofs]          # (..., ntri, 3)
        return np.einsum("qa,...ea->...eq", self.val1, nodal)

    def grad_p1(self, coeffs: np.ndarray) -> np.ndarray:
        nodal = coeffs[..., self.p1.element_dofs]
        return np.einsum("eqad,...ea->...eqd", self.grad1, nodal)

    def eval_p2_vector(self, coeffs: np.ndarray) -> np.ndarray:
        """(2*n2,) velocity coefficients -> (ntri, nq, 2) values."""
        n2 = self.p2.ndof
        comp = coeffs.reshape(2, n2)[:, self.p2.element_dofs]   # (2, ntri, 6)
        return np.einsum("qb,ceb->eqc", self.val2, comp)

    def grad_p2_vector(self, coeffs: np.ndarray) -> np.ndarray:
        """(2*n2,) -> (ntri, nq, 2, 2) with entry [.., c, d] = d u_c / d x_d."""
        n2 = self.p2.ndof
        comp = coeffs.reshape(2, n2)[:, self.p2.element_dofs]
        return np.einsum("eqbd,ceb->eqcd", self.grad2, comp)

    # -- scatter helpers -----------------------------------------------------

    def dofs_p2_vector(self) -> np.ndarray:
        """(ntri, 12) dof map for the stacked velocity, local index c*6+b."""
        n2 = self.p2.ndof
        d = self.p2.element_dofs
        return np.concatenate([d, d + n2], axis=1)


def integrate(ctx: Assembly, integrand) -> float:
    """Quadrature sum over all elements.

    integrand is either an (ntri, nq) array of point values, or a callable
    f(x, y) evaluated at the physical quadrature points.
    """
    if callable(integrand):
        vals = integrand(ctx.points[..., 0], ctx.points[..., 1])
        vals = np.broadcast_to(np.asarray(vals, dtype=np.float64), ctx.wdet.shape)
    else:
        vals = np.asarray(integrand)
    return float(np.sum(ctx.wdet * vals))


def _scatter(local: np.ndarray, test_dofs: np.ndarray, trial_dofs: np.ndarray,
             shape: tuple[int, int]) -> CsrMatrix:
    """Scatter (ntri, A, B) local blocks into a global CSR matrix."""
    ntri, A, B = local.shape
    rows = np.broadcast_to(test_dofs[:, :, None], (ntri, A, B))
    cols = np.broadcast_to(trial_dofs[:, None, :], (ntri, A, B))
    buf = TripletBuffer(*shape)
    buf.add(rows.ravel(), cols.ravel(), local.ravel())
    return assemble_from_triplets(buf)


def block_triplet_indices(test_dofs: np.ndarray, trial_dofs: np.ndarray,
                          row_offset: int = 0, col_offset: int = 0):
    """Row/col triplet index arrays matching the ravel order of local blocks."""
    ntri, A = test_dofs.shape
    B = trial_dofs.shape[1]
    rows = np.broadcast_to(test_dofs[:, :, None] + row_offset, (ntri, A, B))
    cols = np.broadcast_to(trial_dofs[:, None, :] + col_offset, (ntri, A, B))
    return rows.ravel(), cols.ravel()


# ---------------------------------------------------------------------------
# kernels: local element blocks

def local_mass(ctx: Assembly, kind: str) -> np.ndarray:
    val = ctx.val1 if kind == "p1" else ctx.val2
    return np.einsum("eq,qa,qb->eab", ctx.wdet, val, val)


def local_weighted_mass_p1(ctx: Assembly, w_quad: np.ndarray) -> np.ndarray:
    """<w phi_b, phi_a> on P1 with a scalar weight given at quadrature points."""
    return np.einsum("eq,qa,qb->eab", ctx.wdet * w_quad, ctx.val1, ctx.val1)


def local_stiffness_p1(ctx: Assembly, w_quad: np.ndarray) -> np.ndarray:
    """<w grad phi_b, grad phi_a> on P1 with scalar quadrature-point weight."""
    return np.einsum("eq,eqad,eqbd->eab", ctx.wdet * w_quad, ctx.grad1, ctx.grad1)


def local_transport(ctx: Assembly, rho_quad: np.ndarray) -> np.ndarray:
    """<rho phi2_b e_c, grad phi1_a>: P1 test x P2-vector trial, (ntri, 3, 12)."""
    loc = np.einsum("eq,qb,eqac->eacb", ctx.wdet * rho_quad, ctx.val2, ctx.grad1)
    ntri = loc.shape[0]
    return loc.reshape(ntri, 3, 12)


def local_convection(ctx: Assembly, w_quad: np.ndarray) -> np.ndarray:
    """<(w . grad) phi2_b, phi2_a> per velocity component, (ntri, 6, 6).

    w_quad has shape (ntri, nq, 2); the block is identical for both components.
    """
    wg = np.einsum("eqd,eqbd->eqb", w_quad, ctx.grad2)
    return np.einsum("eq,qa,eqb->eab", ctx.wdet, ctx.val2, wg)


def local_stress(ctx: Assembly, nu: float, lam: float) -> np.ndarray:
    """<S(grad u) : grad v> with S = nu (grad u + grad u^T) + lam (div u) I.

    Returns (ntri, 12, 12) in stacked component order; symmetric and PSD for
    lam >= -nu in two dimensions.
    """
    if nu <= 0.0:
        raise ValueError(f"shear viscosity must be positive, got {nu}")
    if lam < -nu:
        raise ValueError(f"bulk parameter must satisfy lam >= -nu, got {lam}")
    g = ctx.grad2
    gdot = np.einsum("eq,eqad,eqbd->eab", ctx.wdet, g, g)
    # cross[cu, cv, a, b] = int d_cu(phi_a) d_cv(phi_b)
    cross = np.einsum("eq,eqau,eqbv->euvab", ctx.wdet, g, g)
    ntri = g.shape[0]
    loc = np.zeros((ntri, 2, 6, 2, 6))
    for cv in range(2):
        for cu in range(2):
            term = nu * cross[:, cu, cv] + lam * cross[:, cv, cu]
            if cu == cv:
                term = term + nu * gdot
            loc[:, cv, :, cu, :] = term
    return loc.reshape(ntri, 12, 12)


def local_div_pressure(ctx: Assembly) -> np.ndarray:
    """<phi1_b, div(phi2_a e_c)>: P2-vector test x P1 trial, (ntri, 12, 3)."""
    loc = np.einsum("eq,qb,eqac->ecab", ctx.wdet, ctx.val1, ctx.grad2)
    ntri = loc.shape[0]
    return loc.reshape(ntri, 12, 3)


def local_weighted_vector_mass(ctx: Assembly, rho_quad: np.ndarray) -> np.ndarray:
    """<rho phi2_b e_c, phi2_a e_c>, (ntri, 6, 6) shared by both components."""
    return np.einsum("eq,qa,qb->eab", ctx.wdet * rho_quad, ctx.val2, ctx.val2)


def local_velocity_coupling(ctx: Assembly, u_quad: np.ndarray) -> np.ndarray:
    """<phi1_b u_c, phi2_a e_c>: P2-vector test x P1 trial, (ntri, 12, 3)."""
    loc = np.einsum("eqc,eq,qa,qb->ecab", u_quad, ctx.wdet, ctx.val2, ctx.val1)
    ntri = loc.shape[0]
    return loc.reshape(ntri, 12, 3)


def expand_component_diagonal(loc66: np.ndarray) -> np.ndarray:
    """Lift a per-component (ntri, 6, 6) block to the stacked (ntri, 12, 12) form."""
    ntri = loc66.shape[0]
    out = np.zeros((ntri, 12, 12))
    out[:, :6, :6] = loc66
    out[:, 6:, 6:] = loc66
    return out


# ---------------------------------------------------------------------------
# kernels: assembled matrices

def assemble_mass(ctx: Assembly, space: FeSpace) -> CsrMatrix:
    """Scalar mass matrix <phi_b, phi_a>."""
    loc = local_mass(ctx, space.kind)
    return _scatter(loc, space.element_dofs, space.element_dofs,
                    (space.ndof, space.ndof))


def assemble_weighted_block_stiffness(ctx: Assembly, coeff: np.ndarray) -> CsrMatrix:
    """N x N block matrix with blocks <C_ij grad phi_b, grad phi_a> on P1.

    coeff has shape (ntri, nq, N, N); global dof layout is species-major,
    index i*n1 + a.
    """
    N = coeff.shape[2]
    n1 = ctx.p1.ndof
    d1 = ctx.p1.element_dofs
    buf = TripletBuffer(N * n1, N * n1)
    for i in range(N):
        for j in range(N):
            loc = local_stiffness_p1(ctx, coeff[:, :, i, j])
            r, c = block_triplet_indices(d1, d1, i * n1, j * n1)
            buf.add(r, c, loc.ravel())
    return assemble_from_triplets(buf)


def assemble_weighted_block_mass(ctx: Assembly, coeff: np.ndarray) -> CsrMatrix:
    """N x N block matrix with blocks <C_ij phi_b, phi_a> on P1."""
    N = coeff.shape[2]
    n1 = ctx.p1.ndof
    d1 = ctx.p1.element_dofs
    buf = TripletBuffer(N * n1, N * n1)
    for i in range(N):
        for j in range(N):
            loc = local_weighted_mass_p1(ctx, coeff[:, :, i, j])
            r, c = block_triplet_indices(d1, d1, i * n1, j * n1)
            buf.add(r, c, loc.ravel())
    return assemble_from_triplets(buf)


def assemble_transport(ctx: Assembly, rho_coeffs: np.ndarray) -> CsrMatrix:
    """<rho phi2_b e_c, grad phi1_a> for a P1 density field rho.

    Shape (n1, 2*n2); the transpose realizes <rho grad mu, v> for P1 mu.
    """
    rho_quad = ctx.eval_p1(rho_coeffs)
    loc = local_transport(ctx, rho_quad)
    return _scatter(loc, ctx.p1.element_dofs, ctx.dofs_p2_vector(),
                    (ctx.p1.ndof, 2 * ctx.p2.ndof))


def assemble_skew_convection(ctx: Assembly, w_quad: np.ndarray) -> CsrMatrix:
    """Skew-symmetric convection matrix for weight field w = rho* u* at quad points.

    Assembles <(w . grad) phi_b e_c, phi_a e_c> and antisymmetrizes it
    algebraically, so B = -B^T holds bitwise.
    """
    loc = expand_component_diagonal(local_convection(ctx, w_quad))
    vd = ctx.dofs_p2_vector()
    A = _scatter(loc, vd, vd, (2 * ctx.p2.ndof, 2 * ctx.p2.ndof))
    a = A.to_scipy()
    b = ((a - a.T) * 0.5).tocsr()
    b.sort_indices()
    return CsrMatrix(A.nrows, A.ncols, b.indptr.astype(np.int64),
                     b.indices.astype(np.int64), b.data)


def assemble_stress(ctx: Assembly, nu: float, lam: float) -> CsrMatrix:
    """Viscous stress matrix <S(grad u), grad v> on the stacked velocity space."""
    loc = local_stress(ctx, nu, lam)
    vd = ctx.dofs_p2_vector()
    return _scatter(loc, vd, vd, (2 * ctx.p2.ndof, 2 * ctx.p2.ndof))


def assemble_div_pressure(ctx: Assembly) -> CsrMatrix:
    """<phi1_b, div v> with P2-vector test functions; transpose gives <div u, q>."""
    loc = local_div_pressure(ctx)
    return _scatter(loc, ctx.dofs_p2_vector(), ctx.p1.element_dofs,
                    (2 * ctx.p2.ndof, ctx.p1.ndof))


def assemble_weighted_vector_mass(ctx: Assembly, rho_quad: np.ndarray) -> CsrMatrix:
    """<rho u, v> on the stacked velocity space, weight given at quad points."""
    loc = expand_component_diagonal(local_weighted_vector_mass(ctx, rho_quad))
    vd = ctx.dofs_p2_vector()
    return _scatter(loc, vd, vd, (2 * ctx.p2.ndof, 2 * ctx.p2.ndof))


def assemble_p1_load(ctx: Assembly, g_quad: np.ndarray) -> np.ndarray:
    """Load vector <g, phi1_a> from quadrature-point values of g."""
    loc = np.einsum("eq,qa->ea", ctx.wdet * g_quad, ctx.val1)
    out = np.zeros(ctx.p1.ndof)
    np.add.at(out, ctx.p1.element_dofs.ravel(), loc.ravel())
    return out


def assemble_vector_load(ctx: Assembly, g_quad: np.ndarray) -> np.ndarray:
    """Load vector <g, v> on the stacked velocity space; g_quad is (ntri, nq, 2)."""
    loc = np.einsum("eqc,eq,qa->eca", g_quad, ctx.wdet, ctx.val2)
    out = np.zeros(2 * ctx.p2.ndof)
    np.add.at(out, ctx.dofs_p2_vector().ravel(), loc.reshape(loc.shape[0], 12).ravel())
    return out


# ---------------------------------------------------------------------------
# point evaluation (exact, used for inter-mesh comparison)

def locate_points(mesh: PeriodicMesh, pts: np.ndarray):
    """Locate points in the structured mesh: (triangle ids, barycentric coords).

    Coordinates are wrapped into [0,1) first, so unwrapped seam coordinates
    are fine.  Points on a diagonal are assigned to the lower triangle; the
    fields are continuous, so the choice does not matter.
    """
    n = mesh.n
    xy = pts - np.floor(pts)
    fx = xy[:, 0] * n
    fy = xy[:, 1] * n
    cx = np.minimum(np.floor(fx).astype(np.int64), n - 1)
    cy = np.minimum(np.floor(fy).astype(np.int64), n - 1)
    fx -= cx
    fy -= cy
    lower = fy <= fx
    tri = 2 * (cy * n + cx) + np.where(lower, 0, 1)
    bary = np.empty((pts.shape[0], 3))
    # lower: corners (0,0),(1,0),(1,1); upper: corners (0,0),(1,1),(0,1)
    bary[lower, 0] = 1.0 - fx[lower]
    bary[lower, 1] = fx[lower] - fy[lower]
    bary[lower, 2] = fy[lower]
    up = ~lower
    bary[up, 0] = 1.0 - fy[up]
    bary[up, 1] = fx[up]
    bary[up, 2] = fy[up] - fx[up]
    return tri, bary


def evaluate_at_points(space: FeSpace, coeffs: np.ndarray, pts: np.ndarray) -> np.ndarray:
    """Evaluate a finite element function at arbitrary points (exactly)."""
    tri, bary = locate_points(space.mesh, pts)
    if space.kind == "p1":
        vals = bary
    else:
        l0, l1, l2 = bary[:, 0], bary[:, 1], bary[:, 2]
        vals = np.stack([
            l0 * (2 * l0 - 1), l1 * (2 * l1 - 1), l2 * (2 * l2 - 1),
            4 * l0 * l1, 4 * l1 * l2, 4 * l2 * l0,
        ], axis=1)
    nodal = coeffs[space.element_dofs[tri]]       # (npts, nloc)
    return np.sum(vals * nodal, axis=1)
