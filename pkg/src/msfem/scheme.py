"""One implicit time step of the coupled mixture system, and the time march.

Unknowns at each step are the species densities rho_i and potentials mu_i
(P1), the velocity u (P2 vector), the pressure p (P1), and one scalar
multiplier pinning the pressure mean.  The step solves, against full nodal
test bases,

  (a) mass:      (1/tau)<rho_i' - rho_i, psi> - <rho_i u', grad psi>
                 + sum_j <M_ij(rho) grad mu_j', grad psi> = 0
  (b) potential: <mu_i' - df/drho_i(rho') - V_i p', xi> = 0
  (c) momentum:  (1/2tau)<u'(rho'-rho), v> + (1/tau)<rho (u'-u), v>
                 + b_skw(rho u; u', v) - <p', div v> + <S(grad u'), grad v>
                 + sum_i <rho_i grad(mu_i' - V_i p'), v> = 0
  (d) divergence: <div u', q> + sum_ij <V_i M_ij(rho) grad mu_j', grad q>
                 + m <q, 1> = 0,  and  <p', 1> = 0,

with primes on the new time level and transport/mobility/stress weights
frozen at the old one.  Freezing makes blocks (a) and (d) linear, which is
what carries mass conservation and the pointwise volume constraint through
the solve at roundoff accuracy.  The multiplier removes the one-dimensional
rank deficiency left by testing (d) against constants on the torus; it is
zero at any solution.

The Jacobian is analytic.  Its sparsity pattern is fixed per mesh, so the
Newton loop fills a precomputed CSC skeleton and refactorizes; only the
energy-Hessian blocks and the two bilinear velocity-density couplings change
between iterations.
"""

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from msfem import fespace as fes
from msfem import model
from msfem.fespace import Assembly
from msfem.linalg import (CsrMatrix, SingularMatrixError, TripletBuffer,
                          assemble_from_triplets)
from msfem.mesh import PeriodicMesh
from msfem.model import MixtureParams


class NewtonError(Exception):
    """Newton iteration failed; carries the last residual norm and step index."""

    def __init__(self, message, residual_norm=None, iterations=None, step=None):
        super().__init__(message)
        self.residual_norm = residual_norm
        self.iterations = iterations
        self.step = step


@dataclass
class SolverConfig:
    tau: float
    t_final: float
    newton_tol: float = 1e-9
    newton_max_iter: int = 25
    damping: float = 0.5
    max_halvings: int = 30

    def __post_init__(self):
        if self.tau <= 0.0:
            raise ValueError("time step must be positive")
        if self.t_final < self.tau * (1.0 - 1e-12):
            raise ValueError("final time must be at least one step")

    @property
    def num_steps(self) -> int:
        return max(int(round(self.t_final / self.tau)), 1)


@dataclass
class State:
    """Coefficients of all fields at one time level."""

    t: float
    rho: np.ndarray          # (N, n1)
    mu: np.ndarray           # (N, n1)
    u: np.ndarray            # (2*n2,)
    p: np.ndarray            # (n1,)
    multiplier: float = 0.0

    def copy(self) -> "State":
        return State(self.t, self.rho.copy(), self.mu.copy(),
                     self.u.copy(), self.p.copy(), self.multiplier)

    def min_nodal_density(self) -> float:
        return float(self.rho.min())


class Discretization:
    """Spaces, quadrature, step-independent matrices, and the unknown layout."""

    def __init__(self, mesh: PeriodicMesh, params: MixtureParams,
                 quad: fes.QuadratureRule | None = None):
        self.mesh = mesh
        self.params = params
        self.ctx = Assembly(mesh, quad)
        self.N = params.N
        self.n1 = self.ctx.p1.ndof
        self.n2 = self.ctx.p2.ndof

        N, n1, n2 = self.N, self.n1, self.n2
        self.rho_off = 0
        self.mu_off = N * n1
        self.u_off = 2 * N * n1
        self.p_off = 2 * N * n1 + 2 * n2
        self.m_off = self.p_off + n1
        self.dim = self.m_off + 1

        self.mass1 = fes.assemble_mass(self.ctx, self.ctx.p1)
        self.mass1_s = self.mass1.to_scipy()
        ones_quad = np.ones_like(self.ctx.wdet)
        self.mass2v = fes.assemble_weighted_vector_mass(self.ctx, ones_quad)
        self.mass2v_s = self.mass2v.to_scipy()
        nu, lam = model.stress_parameters(params)
        self.stress = fes.assemble_stress(self.ctx, nu, lam)
        self.stress_s = self.stress.to_scipy()
        self.div_p = fes.assemble_div_pressure(self.ctx)        # (2n2, n1)
        self.div_p_s = self.div_p.to_scipy()
        self.div_p_t = self.div_p_s.T.tocsr()
        self.bvec = fes.assemble_p1_load(self.ctx, ones_quad)   # <psi_a, 1>

        # local blocks reused by every Jacobian
        self._loc_mass1 = fes.local_mass(self.ctx, "p1")
        self._loc_stress = fes.local_stress(self.ctx, nu, lam)
        self._loc_div = fes.local_div_pressure(self.ctx)
        self._loc_b = np.einsum("eq,qa->ea", self.ctx.wdet, self.ctx.val1)

    # -- unknown vector layout ----------------------------------------------

    def pack(self, st: State) -> np.ndarray:
        x = np.empty(self.dim)
        x[self.rho_off:self.mu_off] = st.rho.ravel()
        x[self.mu_off:self.u_off] = st.mu.ravel()
        x[self.u_off:self.p_off] = st.u
        x[self.p_off:self.m_off] = st.p
        x[self.m_off] = st.multiplier
        return x

    def unpack(self, x: np.ndarray, t: float) -> State:
        N, n1 = self.N, self.n1
        return State(t,
                     x[self.rho_off:self.mu_off].reshape(N, n1).copy(),
                     x[self.mu_off:self.u_off].reshape(N, n1).copy(),
                     x[self.u_off:self.p_off].copy(),
                     x[self.p_off:self.m_off].copy(),
                     float(x[self.m_off]))

    def apply_update(self, st: State, delta: np.ndarray, alpha: float) -> State:
        N, n1 = self.N, self.n1
        return State(
            st.t,
            st.rho + alpha * delta[self.rho_off:self.mu_off].reshape(N, n1),
            st.mu + alpha * delta[self.mu_off:self.u_off].reshape(N, n1),
            st.u + alpha * delta[self.u_off:self.p_off],
            st.p + alpha * delta[self.p_off:self.m_off],
            st.multiplier + alpha * delta[self.m_off],
        )

    def update_l2_norm(self, delta: np.ndarray) -> float:
        """L2(domain) norm of a Newton update across all fields."""
        N, n1 = self.N, self.n1
        total = delta[self.m_off] ** 2
        fields = delta[self.rho_off:self.u_off].reshape(2 * N, n1)
        total += float(np.sum(fields * (self.mass1_s @ fields.T).T))
        du = delta[self.u_off:self.p_off]
        total += float(du @ (self.mass2v_s @ du))
        dp = delta[self.p_off:self.m_off]
        total += float(dp @ (self.mass1_s @ dp))
        return float(np.sqrt(total))


class StepOperators:
    """Matrices and local blocks frozen at the old time level (one per step)."""

    def __init__(self, disc: Discretization, old: State):
        ctx = disc.ctx
        params = disc.params
        self.old = old
        self.rho_old_quad = ctx.eval_p1(old.rho)            # (N, ntri, nq)
        self.total_old_quad = self.rho_old_quad.sum(axis=0)
        self.u_old_quad = ctx.eval_p2_vector(old.u)

        mob = model.mobility(np.moveaxis(self.rho_old_quad, 0, -1),
                             scale=params.mobility_scale)    # (ntri, nq, N, N)
        self.mobility_quad = mob

        N, n1, n2 = disc.N, disc.n1, disc.n2
        V = params.specific_volumes

        self.loc_stiff = [[fes.local_stiffness_p1(ctx, mob[:, :, i, j])
                           for j in range(N)] for i in range(N)]
        kv_weight = np.einsum("i,eqij->eqj", V, mob)
        self.loc_kv = [fes.local_stiffness_p1(ctx, kv_weight[:, :, j])
                       for j in range(N)]
        self.loc_transport = [fes.local_transport(ctx, self.rho_old_quad[i])
                              for i in range(N)]
        conv = fes.local_convection(
            ctx, self.total_old_quad[..., None] * self.u_old_quad)
        self.loc_skew = 0.5 * (conv - conv.transpose(0, 2, 1))
        self.loc_vmass_old = fes.local_weighted_vector_mass(ctx, self.total_old_quad)

        d1 = ctx.p1.element_dofs
        vd = ctx.dofs_p2_vector()

        buf = TripletBuffer(N * n1, N * n1)
        for i in range(N):
            for j in range(N):
                r, c = fes.block_triplet_indices(d1, d1, i * n1, j * n1)
                buf.add(r, c, self.loc_stiff[i][j].ravel())
        self.K_all = assemble_from_triplets(buf).to_scipy()

        buf = TripletBuffer(n1, N * n1)
        for j in range(N):
            r, c = fes.block_triplet_indices(d1, d1, 0, j * n1)
            buf.add(r, c, self.loc_kv[j].ravel())
        self.KV_all = assemble_from_triplets(buf).to_scipy()

        buf = TripletBuffer(N * n1, 2 * n2)
        for i in range(N):
            r, c = fes.block_triplet_indices(d1, vd, i * n1, 0)
            buf.add(r, c, self.loc_transport[i].ravel())
        self.T_all = assemble_from_triplets(buf).to_scipy()
        self.T_all_t = self.T_all.T.tocsr()

        buf = TripletBuffer(n1, 2 * n2)
        for i in range(N):
            r, c = fes.block_triplet_indices(d1, vd, 0, 0)
            buf.add(r, c, (V[i] * self.loc_transport[i]).ravel())
        self.TV = assemble_from_triplets(buf).to_scipy()
        self.TV_t = self.TV.T.tocsr()

        self.B_skew = fes.assemble_skew_convection(
            ctx, self.total_old_quad[..., None] * self.u_old_quad)
        self.B_skew_s = self.B_skew.to_scipy()
        self.Mv_old = fes.assemble_weighted_vector_mass(ctx, self.total_old_quad)
        self.Mv_old_s = self.Mv_old.to_scipy()


# ---------------------------------------------------------------------------
# residual

def residual(old: State, guess: State, disc: Discretization, tau: float,
             ops: StepOperators | None = None) -> np.ndarray:
    """Stacked residual of the step equations at the given guess.

    Raises model.DomainError when a guess density is nonpositive at a
    quadrature point; the Newton line search treats that as a rejection.
    """
    if ops is None:
        ops = StepOperators(disc, old)
    ctx = disc.ctx
    V = disc.params.specific_volumes
    N = disc.N

    rho_quad = ctx.eval_p1(guess.rho)                    # (N, ntri, nq)
    core = model.chemical_potential_core(np.moveaxis(rho_quad, 0, -1))

    mu_flat = guess.mu.ravel()
    R = np.empty(disc.dim)

    # (a) mass balance rows
    drho = guess.rho - old.rho
    ra = ((disc.mass1_s @ drho.T).T / tau).ravel()
    ra -= ops.T_all @ guess.u
    ra += ops.K_all @ mu_flat
    R[disc.rho_off:disc.mu_off] = ra

    # (b) potential rows
    mp = disc.mass1_s @ guess.p
    rb = (disc.mass1_s @ guess.mu.T).T
    for i in range(N):
        rb[i] -= fes.assemble_p1_load(ctx, core[:, :, i]) + V[i] * mp
    R[disc.mu_off:disc.u_off] = rb.ravel()

    # (c) momentum rows
    u_quad = ctx.eval_p2_vector(guess.u)
    drho_tot_quad = rho_quad.sum(axis=0) - ops.total_old_quad
    wload = fes.assemble_vector_load(ctx, drho_tot_quad[..., None] * u_quad)
    rc = (wload * (0.5 / tau)
          + (ops.Mv_old_s @ (guess.u - old.u)) / tau
          + ops.B_skew_s @ guess.u
          + disc.stress_s @ guess.u
          - disc.div_p_s @ guess.p
          + ops.T_all_t @ mu_flat
          - ops.TV_t @ guess.p)
    R[disc.u_off:disc.p_off] = rc

    # (d) divergence rows and the pressure-mean equation
    R[disc.p_off:disc.m_off] = (disc.div_p_t @ guess.u + ops.KV_all @ mu_flat
                                + guess.multiplier * disc.bvec)
    R[disc.m_off] = disc.bvec @ guess.p
    return R


# ---------------------------------------------------------------------------
# Jacobian: one canonical triplet stream shared by the reference and fast paths

def _jacobian_segments(disc: Discretization):
    """Triplet (rows, cols) for every Jacobian block, in canonical order.

    Returns (index_segments, nnz_total).  The value segments produced by
    _jacobian_frozen_values followed by _jacobian_varying_values match this
    order; blocks whose values change between Newton iterations come last.
    """
    ctx = disc.ctx
    N, n1 = disc.N, disc.n1
    d1 = ctx.p1.element_dofs
    vd = ctx.dofs_p2_vector()
    d2 = ctx.p2.element_dofs
    n2 = disc.n2
    segs = []

    # --- frozen within a step ---
    for i in range(N):                                   # (a) d rho_i
        segs.append(fes.block_triplet_indices(d1, d1, disc.rho_off + i * n1,
                                              disc.rho_off + i * n1))
    for i in range(N):                                   # (a) d u
        segs.append(fes.block_triplet_indices(d1, vd, disc.rho_off + i * n1,
                                              disc.u_off))
    for i in range(N):                                   # (a) d mu_j
        for j in range(N):
            segs.append(fes.block_triplet_indices(d1, d1, disc.rho_off + i * n1,
                                                  disc.mu_off + j * n1))
    for i in range(N):                                   # (b) d mu_i
        segs.append(fes.block_triplet_indices(d1, d1, disc.mu_off + i * n1,
                                              disc.mu_off + i * n1))
    for i in range(N):                                   # (b) d p
        segs.append(fes.block_triplet_indices(d1, d1, disc.mu_off + i * n1,
                                              disc.p_off))
    for c in range(2):                                   # (c) d u: old-mass + skew
        segs.append(fes.block_triplet_indices(d2, d2, disc.u_off + c * n2,
                                              disc.u_off + c * n2))
    segs.append(fes.block_triplet_indices(vd, vd, disc.u_off, disc.u_off))  # stress
    for i in range(N):                                   # (c) d mu_i
        segs.append(fes.block_triplet_indices(vd, d1, disc.u_off,
                                              disc.mu_off + i * n1))
    segs.append(fes.block_triplet_indices(vd, d1, disc.u_off, disc.p_off))  # (c) d p
    segs.append(fes.block_triplet_indices(d1, vd, disc.p_off, disc.u_off))  # (d) d u
    for j in range(N):                                   # (d) d mu_j
        segs.append(fes.block_triplet_indices(d1, d1, disc.p_off,
                                              disc.mu_off + j * n1))
    rows_b = (d1 + disc.p_off).ravel()                   # (d) d multiplier
    segs.append((rows_b, np.full(rows_b.size, disc.m_off, dtype=np.int64)))
    cols_b = (d1 + disc.p_off).ravel()                   # mean row, d p
    segs.append((np.full(cols_b.size, disc.m_off, dtype=np.int64), cols_b))

    # --- varying between Newton iterations ---
    for i in range(N):                                   # (b) d rho_j: Hessian
        for j in range(N):
            segs.append(fes.block_triplet_indices(d1, d1, disc.mu_off + i * n1,
                                                  disc.rho_off + j * n1))
    for c in range(2):                                   # (c) d u: density defect
        segs.append(fes.block_triplet_indices(d2, d2, disc.u_off + c * n2,
                                              disc.u_off + c * n2))
    for j in range(N):                                   # (c) d rho_j
        segs.append(fes.block_triplet_indices(vd, d1, disc.u_off,
                                              disc.rho_off + j * n1))

    nnz = sum(r.size for r, _ in segs)
    return segs, nnz


def _jacobian_frozen_values(disc: Discretization, ops: StepOperators,
                            tau: float) -> list[np.ndarray]:
    """Value segments for the step-frozen Jacobian blocks, canonical order."""
    N = disc.N
    V = disc.params.specific_volumes
    vals = []
    vals += [(disc._loc_mass1 / tau).ravel()] * N
    vals += [(-ops.loc_transport[i]).ravel() for i in range(N)]
    for i in range(N):
        for j in range(N):
            vals.append(ops.loc_stiff[i][j].ravel())
    vals += [disc._loc_mass1.ravel()] * N
    vals += [(-V[i] * disc._loc_mass1).ravel() for i in range(N)]
    cu = ops.loc_vmass_old / tau + ops.loc_skew
    vals += [cu.ravel()] * 2
    vals.append(disc._loc_stress.ravel())
    vals += [ops.loc_transport[i].transpose(0, 2, 1).ravel() for i in range(N)]
    mom_p = -disc._loc_div.copy()
    for i in range(N):
        mom_p -= V[i] * ops.loc_transport[i].transpose(0, 2, 1)
    vals.append(mom_p.ravel())
    vals.append(disc._loc_div.transpose(0, 2, 1).ravel())
    vals += [ops.loc_kv[j].ravel() for j in range(N)]
    vals.append(disc._loc_b.ravel())
    vals.append(disc._loc_b.ravel())
    return vals


def _jacobian_varying_values(disc: Discretization, ops: StepOperators,
                             guess: State, tau: float) -> list[np.ndarray]:
    """Value segments for the guess-dependent Jacobian blocks, canonical order."""
    ctx = disc.ctx
    N = disc.N
    rho_quad = ctx.eval_p1(guess.rho)
    hess = model.energy_hessian(np.moveaxis(rho_quad, 0, -1))   # (ntri,nq,N,N)
    vals = []
    for i in range(N):
        for j in range(N):
            vals.append((-fes.local_weighted_mass_p1(ctx, hess[:, :, i, j])).ravel())
    drho_tot = rho_quad.sum(axis=0) - ops.total_old_quad
    mv = fes.local_weighted_vector_mass(ctx, drho_tot) * (0.5 / tau)
    vals += [mv.ravel()] * 2
    u_quad = ctx.eval_p2_vector(guess.u)
    cu = fes.local_velocity_coupling(ctx, u_quad) * (0.5 / tau)
    vals += [cu.ravel()] * N
    return vals


def jacobian(old: State, guess: State, disc: Discretization, tau: float,
             ops: StepOperators | None = None) -> CsrMatrix:
    """Analytic Jacobian of the residual with respect to all unknowns."""
    if ops is None:
        ops = StepOperators(disc, old)
    segs, _ = _jacobian_segments(disc)
    vals = (_jacobian_frozen_values(disc, ops, tau)
            + _jacobian_varying_values(disc, ops, guess, tau))
    buf = TripletBuffer(disc.dim, disc.dim)
    for (r, c), v in zip(segs, vals):
        buf.add(r, c, v)
    return assemble_from_triplets(buf)


class JacobianAssembler:
    """Fixed-pattern CSC assembler with a fill-reducing symmetric permutation.

    The triplet index stream is computed once; each Newton iteration only
    recomputes values and bin-counts them into the CSC data array before
    handing the matrix to SuperLU.
    """

    def __init__(self, disc: Discretization):
        self.disc = disc
        segs, _ = _jacobian_segments(disc)
        rows = np.concatenate([r for r, _ in segs])
        cols = np.concatenate([c for _, c in segs])

        self.perm = _dissection_permutation(disc)
        self.iperm = np.empty_like(self.perm)
        self.iperm[self.perm] = np.arange(disc.dim)
        rows = self.iperm[rows]
        cols = self.iperm[cols]

        order = np.lexsort((rows, cols))
        rs, cs = rows[order], cols[order]
        new_group = np.empty(rs.size, dtype=bool)
        new_group[0] = True
        np.not_equal(cs[1:], cs[:-1], out=new_group[1:])
        new_group[1:] |= rs[1:] != rs[:-1]
        group_id = np.cumsum(new_group) - 1
        self.pos = np.empty(rs.size, dtype=np.int64)
        self.pos[order] = group_id
        starts = np.flatnonzero(new_group)
        self.indices = rs[starts].astype(np.int32)
        counts = np.zeros(disc.dim + 1, dtype=np.int64)
        np.add.at(counts, cs[starts] + 1, 1)
        self.indptr = np.cumsum(counts).astype(np.int32)
        self.nnz = starts.size

    def matrix(self, frozen_vals: list[np.ndarray],
               varying_vals: list[np.ndarray]) -> sp.csc_matrix:
        values = np.concatenate(frozen_vals + varying_vals)
        data = np.bincount(self.pos, weights=values, minlength=self.nnz)
        return sp.csc_matrix((data, self.indices, self.indptr),
                             shape=(self.disc.dim, self.disc.dim))

    def factor_and_solve(self, A: sp.csc_matrix, rhs: np.ndarray) -> np.ndarray:
        """Solve A x = rhs in the permuted ordering; verifies the backward error.

        Threshold pivoting inside the dissection ordering is fast but can in
        principle lose accuracy; if the linear residual is not at roundoff
        level the system is refactorized with full partial pivoting.
        """
        rhs_p = rhs[self.perm]
        try:
            lu = spla.splu(A, permc_spec="NATURAL",
                           options=dict(SymmetricMode=True, DiagPivotThresh=0.001))
            x_p = lu.solve(rhs_p)
            rnorm = np.linalg.norm(rhs_p)
            lin_res = np.linalg.norm(A @ x_p - rhs_p)
            if not np.isfinite(lin_res) or lin_res > 1e-8 * (rnorm + 1e-300):
                raise RuntimeError("threshold-pivot solve lost accuracy")
        except RuntimeError:
            try:
                lu = spla.splu(A, permc_spec="MMD_AT_PLUS_A")
            except RuntimeError as exc:
                raise SingularMatrixError(str(exc)) from exc
            x_p = lu.solve(rhs_p)
        x = np.empty_like(x_p)
        x[self.perm] = x_p
        return x


def _dissection_permutation(disc: Discretization) -> np.ndarray:
    """Geometric nested-dissection ordering of all unknowns.

    Every unknown except the multiplier sits at a mesh location, and two dofs
    couple only when they share an element.  Elements span exactly one grid
    cell per axis, so the dofs lying on a single grid line x = c (or y = c)
    already separate the two sides; cutting a periodic axis needs two such
    lines.  Grid coordinates are exact binary fractions, making the equality
    tests below safe.  Chunks are emitted location-major so all fields at one
    point stay adjacent, and the dense multiplier row goes last.
    """
    N = disc.N
    p1c = disc.ctx.p1.dof_coords
    p2c = disc.ctx.p2.dof_coords
    xy = np.vstack([np.tile(p1c, (2 * N, 1)), np.tile(p2c, (2, 1)), p1c])
    # exact integer coordinates in units of h/2; grid lines are even values
    coords = np.round(xy * (2 * disc.mesh.n)).astype(np.int64)

    chunks: list[np.ndarray] = []
    post: list[np.ndarray] = []
    stack = [(np.arange(coords.shape[0]), True, True)]
    while stack:
        idx, perx, pery = stack.pop()
        if idx.size <= 64:
            chunks.append(idx)
            continue
        x = coords[idx]
        ext = x.max(axis=0) - x.min(axis=0)
        if perx or pery:
            d = 0 if (perx and (not pery or ext[0] >= ext[1])) else 1
        else:
            d = int(ext[1] > ext[0])
        lo = int(x[:, d].min())
        hi = int(x[:, d].max())
        mid = ((lo + (hi - lo) // 2 + 1) // 2) * 2
        if (perx, pery)[d]:
            cut_lo = ((lo + 1) // 2) * 2
            sep = (x[:, d] == cut_lo) | (x[:, d] == mid)
            a = (x[:, d] > cut_lo) & (x[:, d] < mid)
            b = ~sep & ~a
        else:
            sep = x[:, d] == mid
            a = x[:, d] < mid
            b = x[:, d] > mid
        if not a.any() or not b.any() or not sep.any():
            chunks.append(idx)
            continue
        newper = (perx and d != 0, pery and d != 1)
        post.append(idx[sep])
        stack.append((idx[a], *newper))
        stack.append((idx[b], *newper))
    # children separators must precede their parents: reverse discovery order
    order = np.concatenate(chunks + post[::-1])
    return np.concatenate([order, [disc.m_off]]).astype(np.int64)


# ---------------------------------------------------------------------------
# Newton iteration

def newton_solve(old: State, cfg: SolverConfig, disc: Discretization,
                 ops: StepOperators | None = None,
                 assembler: JacobianAssembler | None = None,
                 stats: dict | None = None) -> State:
    """Advance one time step: solve the coupled system by damped Newton.

    The initial guess is the old state (potentials and pressure carried
    over).  Each update is halved until all nodal densities stay positive
    and the residual norm decreases; convergence is declared when the
    L2(domain) norm of the applied update falls below cfg.newton_tol.

    Raises NewtonError on nonconvergence (carries the last residual norm)
    and SingularMatrixError if the Jacobian is rank deficient.
    """
    if ops is None:
        ops = StepOperators(disc, old)
    tau = cfg.tau
    guess = old.copy()
    res = residual(old, guess, disc, tau, ops)
    rnorm = float(np.linalg.norm(res))
    frozen = None
    iterations = 0

    for iterations in range(1, cfg.newton_max_iter + 1):
        if assembler is not None:
            if frozen is None:
                frozen = _jacobian_frozen_values(disc, ops, tau)
            A = assembler.matrix(frozen,
                                 _jacobian_varying_values(disc, ops, guess, tau))
            delta = assembler.factor_and_solve(A, -res)
        else:
            from msfem.linalg import lu_solve
            delta = lu_solve(jacobian(old, guess, disc, tau, ops), -res)

        update_norm = disc.update_l2_norm(delta)
        alpha = 1.0
        accepted = False
        for _ in range(cfg.max_halvings + 1):
            candidate = disc.apply_update(guess, delta, alpha)
            if candidate.min_nodal_density() <= 0.0:
                alpha *= cfg.damping
                continue
            if alpha * update_norm <= cfg.newton_tol:
                # converged: the applied update is below tolerance
                guess = candidate
                if stats is not None:
                    stats["iterations"] = iterations
                    stats["residual_norm"] = rnorm
                return guess
            try:
                res_new = residual(old, candidate, disc, tau, ops)
            except model.DomainError:
                alpha *= cfg.damping
                continue
            rnorm_new = float(np.linalg.norm(res_new))
            if rnorm_new < rnorm:
                guess = candidate
                res = res_new
                rnorm = rnorm_new
                accepted = True
                break
            alpha *= cfg.damping
        if not accepted:
            raise NewtonError(
                f"line search stalled after {cfg.max_halvings} halvings",
                residual_norm=rnorm, iterations=iterations)

    raise NewtonError(
        f"no convergence in {cfg.newton_max_iter} iterations",
        residual_norm=rnorm, iterations=iterations)


# ---------------------------------------------------------------------------
# initial data and time march

@dataclass
class InitialData:
    """Pointwise initial data: N-1 independent densities and the velocity.

    The last density is derived from the volume constraint, so the constraint
    holds exactly at every node.  Velocity returns a component pair.
    """

    densities: list
    velocity: object


def initial_state(data: InitialData, params: MixtureParams,
                  disc: Discretization) -> State:
    """Interpolate initial data nodally; potentials start at df/drho, p at 0."""
    N, n1 = disc.N, disc.n1
    if len(data.densities) != N - 1:
        raise ValueError(f"expected {N - 1} density functions, got {len(data.densities)}")
    V = params.specific_volumes
    rho = np.empty((N, n1))
    for i, f in enumerate(data.densities):
        rho[i] = fes.interpolate_nodal(f, disc.ctx.p1).coeffs
    partial = np.einsum("i,ia->a", V[:-1], rho[:-1])
    rho[N - 1] = (1.0 - partial) / V[N - 1]
    if np.any(rho[N - 1] <= 0.0):
        raise ValueError("derived density is nonpositive at a node; "
                         "initial data violates the volume constraint budget")
    u = fes.interpolate_nodal_vector(data.velocity, disc.ctx.p2).coeffs
    mu = model.chemical_potential_core(rho.T).T.copy()
    return State(0.0, rho, mu, u, np.zeros(n1), 0.0)


class Trajectory:
    """Time-march output: per-step diagnostics and optionally all states."""

    def __init__(self, initial: State, store_states: bool):
        self.store_states = store_states
        self.initial = initial
        self.states: list[State] = [initial] if store_states else []
        self.diagnostics: list = []
        self.final: State = initial

    def record(self, state: State, diag) -> None:
        self.final = state
        if self.store_states:
            self.states.append(state)
        self.diagnostics.append(diag)


def run(initial: State, cfg: SolverConfig, disc: Discretization,
        sink=None, store_states: bool = False, observer=None) -> Trajectory:
    """March n = T/tau steps, emitting per-step diagnostics.

    sink, when given, is called with each StepDiagnostics record; observer
    additionally receives the accepted state.  Newton failures propagate as
    NewtonError with the failing step index attached.
    """
    from msfem import diagnostics as diag_mod

    steady = diag_mod.steady_state_from(initial, disc)
    assembler = JacobianAssembler(disc)
    traj = Trajectory(initial, store_states)
    old = initial
    for step in range(1, cfg.num_steps + 1):
        ops = StepOperators(disc, old)
        try:
            new = newton_solve(old, cfg, disc, ops, assembler)
        except NewtonError as err:
            err.step = step
            raise
        new.t = initial.t + step * cfg.tau
        record = diag_mod.step_diagnostics(old, new, disc, cfg.tau, steady, ops)
        if sink is not None:
            sink(record)
        if observer is not None:
            observer(new, record)
        traj.record(new, record)
        old = new
    return traj
