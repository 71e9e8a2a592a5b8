"""Runtime verification quantities: masses, constraint, energy split, errors.

Every integral here uses the same quadrature rule as the assembly kernels.
That is what makes the energy audit exact: the kinetic telescope, the
convexity defect, and the dissipation pairings then cancel against the
solved equations at solver accuracy instead of at quadrature accuracy.
"""

from dataclasses import dataclass, field

import numpy as np

from msfem import fespace as fes
from msfem import model
from msfem.scheme import Discretization, State, StepOperators, Trajectory


@dataclass
class SteadyState:
    """Homogeneous large-time state: mean densities and mass-weighted mean velocity."""

    rho_inf: np.ndarray   # (N,)
    u_inf: np.ndarray     # (2,)


@dataclass
class StepDiagnostics:
    """Per-step record of conservation, constraint, and energy quantities."""

    t: float
    partial_masses: np.ndarray
    constraint_max: float
    min_nodal_density: float
    e_kin: float
    e_int: float
    e_total: float
    d_num: float
    visc_dissipation: float
    diff_dissipation: float
    energy_balance_residual: float
    e_rel: float
    div_defect: float


@dataclass
class ErrorReport:
    """Per-level errors against a reference trajectory, plus convergence orders."""

    levels: list
    spacings: list
    err_rho: list
    err_mu: list
    err_u: list
    err_p: list
    eoc_rho: list = field(default_factory=list)
    eoc_mu: list = field(default_factory=list)
    eoc_u: list = field(default_factory=list)
    eoc_p: list = field(default_factory=list)

    def finalize(self):
        self.eoc_rho = eoc(self.err_rho, self.spacings)
        self.eoc_mu = eoc(self.err_mu, self.spacings)
        self.eoc_u = eoc(self.err_u, self.spacings)
        self.eoc_p = eoc(self.err_p, self.spacings)
        return self


def steady_state_from(initial: State, disc: Discretization) -> SteadyState:
    ctx = disc.ctx
    rho_inf = disc.bvec @ initial.rho.T                    # integrals over |Omega|=1
    rho_quad = ctx.eval_p1(initial.rho).sum(axis=0)
    u_quad = ctx.eval_p2_vector(initial.u)
    mom = np.array([fes.integrate(ctx, rho_quad * u_quad[..., c]) for c in range(2)])
    return SteadyState(rho_inf, mom / rho_inf.sum())


def total_energy(state: State, disc: Discretization) -> tuple[float, float]:
    """(kinetic, internal) energy integrals of a state."""
    ctx = disc.ctx
    rho_quad = ctx.eval_p1(state.rho)
    u_quad = ctx.eval_p2_vector(state.u)
    e_kin = 0.5 * fes.integrate(ctx, rho_quad.sum(axis=0) * np.sum(u_quad**2, axis=-1))
    e_int = fes.integrate(ctx, model.internal_energy(np.moveaxis(rho_quad, 0, -1)))
    return e_kin, e_int


def numerical_dissipation(old: State, new: State, disc: Discretization,
                          tau: float) -> float:
    """Kinetic defect plus the convexity defect of the internal energy.

    (1/2tau) ||rho_old^{1/2} (u' - u)||^2
      + (1/tau) [ sum_i <df/drho_i(rho'), rho_i' - rho_i> - <f(rho') - f(rho), 1> ]

    Nonnegative whenever the old densities are nonnegative, by convexity.
    """
    ctx = disc.ctx
    rho_old = ctx.eval_p1(old.rho)
    rho_new = ctx.eval_p1(new.rho)
    du = ctx.eval_p2_vector(new.u) - ctx.eval_p2_vector(old.u)
    kinetic = 0.5 * fes.integrate(ctx, rho_old.sum(axis=0) * np.sum(du**2, axis=-1))

    new_last = np.moveaxis(rho_new, 0, -1)
    core_new = model.chemical_potential_core(new_last)
    f_new = model.internal_energy(new_last)
    f_old = model.internal_energy(np.moveaxis(rho_old, 0, -1))
    pairing = fes.integrate(ctx, np.einsum("eqi,ieq->eq", core_new, rho_new - rho_old))
    internal = pairing - fes.integrate(ctx, f_new - f_old)
    return (kinetic + internal) / tau


def relative_energy(state: State, steady: SteadyState, disc: Discretization) -> float:
    """Bregman-type distance to the homogeneous steady state plus kinetic mismatch."""
    if np.any(steady.rho_inf <= 0.0):
        raise model.DomainError("steady densities must be positive")
    ctx = disc.ctx
    rho_quad = ctx.eval_p1(state.rho)
    model._check_positive(rho_quad)
    total = rho_quad.sum(axis=0)
    total_inf = steady.rho_inf.sum()
    bregman = (rho_quad * np.log(rho_quad / steady.rho_inf[:, None, None])).sum(axis=0)
    bregman -= total * np.log(total / total_inf)
    du = ctx.eval_p2_vector(state.u) - steady.u_inf
    kinetic = 0.5 * total * np.sum(du**2, axis=-1)
    return fes.integrate(ctx, bregman + kinetic)


def divergence_defect(state: State, disc: Discretization) -> float:
    """Norm of <div u, q> over P1 test functions, constants projected out."""
    d = disc.div_p_t @ state.u
    b = disc.bvec
    d = d - b * (b @ d) / (b @ b)
    return float(np.linalg.norm(d))


def step_diagnostics(old: State, new: State, disc: Discretization, tau: float,
                     steady: SteadyState,
                     ops: StepOperators | None = None) -> StepDiagnostics:
    """All per-step verification quantities for an accepted step old -> new."""
    if ops is None:
        ops = StepOperators(disc, old)
    V = disc.params.specific_volumes
    masses = disc.bvec @ new.rho.T
    constraint = float(np.max(np.abs(V @ new.rho - 1.0)))
    e_kin, e_int = total_energy(new, disc)
    e_kin_old, e_int_old = total_energy(old, disc)
    visc = float(new.u @ (disc.stress_s @ new.u))
    mu_flat = new.mu.ravel()
    diff = float(mu_flat @ (ops.K_all @ mu_flat))
    d_num = numerical_dissipation(old, new, disc, tau)
    balance = ((e_kin + e_int) - (e_kin_old + e_int_old)) / tau + visc + diff + d_num
    return StepDiagnostics(
        t=new.t,
        partial_masses=masses,
        constraint_max=constraint,
        min_nodal_density=new.min_nodal_density(),
        e_kin=e_kin,
        e_int=e_int,
        e_total=e_kin + e_int,
        d_num=d_num,
        visc_dissipation=visc,
        diff_dissipation=diff,
        energy_balance_residual=float(balance),
        e_rel=relative_energy(new, steady, disc),
        div_defect=divergence_defect(new, disc),
    )


# ---------------------------------------------------------------------------
# inter-mesh errors and convergence orders

def prolong_scalar(space: fes.FeSpace, coeffs: np.ndarray,
                   fine_space: fes.FeSpace) -> np.ndarray:
    """Exact evaluation of a coarse FE function at the fine dof coordinates."""
    return fes.evaluate_at_points(space, coeffs, fine_space.dof_coords)


def error_norms(traj: Trajectory, ref: Trajectory, disc: Discretization,
                ref_disc: Discretization, tau: float) -> dict:
    """L2-in-space error quantities of a trajectory against a finer reference.

    Coarse fields are evaluated exactly at the fine dofs (power-of-two levels
    nest), so the only content of these numbers is the discretization gap:
    max-in-time norms for densities and velocity, time-summed norms for
    potentials and pressure.  The initial states coincide by construction and
    are excluded.
    """
    if ref_disc.mesh.n % disc.mesh.n != 0:
        raise ValueError("reference mesh does not nest the coarse mesh")
    if len(traj.states) != len(ref.states):
        raise ValueError("trajectories have mismatched snapshot grids")
    for a, b in zip(traj.states, ref.states):
        if abs(a.t - b.t) > 1e-12:
            raise ValueError("trajectories have mismatched snapshot times")
    if not traj.states:
        raise ValueError("trajectories must store states for error evaluation")

    p1c, p2c = disc.ctx.p1, disc.ctx.p2
    p1f, p2f = ref_disc.ctx.p1, ref_disc.ctx.p2
    M1 = ref_disc.mass1_s
    M2v = ref_disc.mass2v_s
    n2f = ref_disc.n2

    def l2sq_p1(e):
        return float(e @ (M1 @ e))

    err_rho_sq = 0.0
    err_u_sq = 0.0
    sum_mu = 0.0
    sum_p = 0.0
    for st, rf in zip(traj.states[1:], ref.states[1:]):
        rho_sq = 0.0
        mu_sq = 0.0
        for i in range(disc.N):
            rho_sq += l2sq_p1(prolong_scalar(p1c, st.rho[i], p1f) - rf.rho[i])
            mu_sq += l2sq_p1(prolong_scalar(p1c, st.mu[i], p1f) - rf.mu[i])
        eu = np.concatenate([
            fes.evaluate_at_points(p2c, st.u[:disc.n2], p2f.dof_coords),
            fes.evaluate_at_points(p2c, st.u[disc.n2:], p2f.dof_coords),
        ]) - rf.u
        u_sq = float(eu @ (M2v @ eu))
        p_sq = l2sq_p1(prolong_scalar(p1c, st.p, p1f) - rf.p)
        err_rho_sq = max(err_rho_sq, rho_sq)
        err_u_sq = max(err_u_sq, u_sq)
        sum_mu += mu_sq
        sum_p += p_sq
    return {
        "err_rho": np.sqrt(err_rho_sq),
        "err_mu": np.sqrt(tau * sum_mu),
        "err_u": np.sqrt(err_u_sq),
        "err_p": np.sqrt(tau * sum_p),
    }


def eoc(errors, spacings) -> list:
    """Experimental orders between consecutive levels; None where undefined."""
    if len(errors) != len(spacings):
        raise ValueError("need one spacing per error")
    orders: list = [None]
    for k in range(1, len(errors)):
        if errors[k] == 0.0 or errors[k - 1] == 0.0:
            orders.append(None)
        else:
            orders.append(float(np.log(errors[k - 1] / errors[k])
                                / np.log(spacings[k - 1] / spacings[k])))
    return orders
