"""Mixture closures: ideal-gas energy density, chemical potentials, mobility.

The internal energy density f(rho) = sum_i rho_i log(rho_i / rho) is convex
and positively homogeneous of degree one, which drives the structural
identities the solver monitors: Euler's relation sum_i rho_i df/drho_i = f,
the Gibbs-Duhem relation -f + sum_i rho_i mu_i = p under the volume
constraint, and a Hessian that annihilates rho itself.

All functions here accept either a single composition vector of shape (N,) or
a batch with the species axis last, e.g. (ntri, nq, N); outputs carry the same
leading axes.  Derivatives are closed-form, not numerical.
"""

from dataclasses import dataclass

import numpy as np


class DomainError(ValueError):
    """A closure was evaluated outside its domain (nonpositive density)."""


@dataclass
class MixtureParams:
    """Physical data: species count, specific volumes, viscosities, mobility scale."""

    N: int
    specific_volumes: np.ndarray
    shear_viscosity: float
    bulk_viscosity: float = 0.0
    mobility_scale: float = 1.0

    def __post_init__(self):
        self.specific_volumes = np.asarray(self.specific_volumes, dtype=np.float64)
        if self.N < 2:
            raise ValueError(f"need at least 2 components, got {self.N}")
        if self.specific_volumes.shape != (self.N,):
            raise ValueError("specific volume count does not match component count")
        if np.any(self.specific_volumes <= 0.0):
            raise ValueError("specific volumes must be positive")
        if self.shear_viscosity <= 0.0:
            raise ValueError("shear viscosity must be positive")
        if self.bulk_viscosity < -self.shear_viscosity:
            raise ValueError("bulk parameter must be >= -shear viscosity")
        if self.mobility_scale <= 0.0:
            raise ValueError("mobility scale must be positive")

    @property
    def v_min(self) -> float:
        return float(self.specific_volumes.min())

    @property
    def v_max(self) -> float:
        return float(self.specific_volumes.max())


def _check_positive(rho: np.ndarray):
    if np.any(rho <= 0.0) or not np.all(np.isfinite(rho)):
        raise DomainError("densities must be positive and finite")


def internal_energy(rho) -> np.ndarray | float:
    """f(rho) = sum_i rho_i log(rho_i / rho); nonpositive since rho_i <= rho."""
    rho = np.asarray(rho, dtype=np.float64)
    _check_positive(rho)
    total = rho.sum(axis=-1, keepdims=True)
    out = np.sum(rho * np.log(rho / total), axis=-1)
    return float(out) if out.ndim == 0 else out


def chemical_potential_core(rho) -> np.ndarray:
    """df/drho_i = log(rho_i / rho); the pressure part V_i p is added by the scheme."""
    rho = np.asarray(rho, dtype=np.float64)
    _check_positive(rho)
    total = rho.sum(axis=-1, keepdims=True)
    return np.log(rho / total)


def energy_hessian(rho) -> np.ndarray:
    """H_ij = delta_ij / rho_i - 1 / rho; symmetric PSD with H rho = 0."""
    rho = np.asarray(rho, dtype=np.float64)
    _check_positive(rho)
    N = rho.shape[-1]
    total = rho.sum(axis=-1)
    H = np.zeros(rho.shape[:-1] + (N, N))
    H -= (1.0 / total)[..., None, None]
    idx = np.arange(N)
    H[..., idx, idx] += 1.0 / rho
    return H


def mobility(rho, scale: float = 1.0) -> np.ndarray:
    """Onsager matrix M_ij = scale * (rho_i delta_ij - rho_i rho_j / rho).

    Symmetric, positive semidefinite, rows and columns summing to zero.
    Admits nonnegative (not just positive) compositions as long as the total
    density is positive.
    """
    rho = np.asarray(rho, dtype=np.float64)
    if np.any(rho < 0.0) or not np.all(np.isfinite(rho)):
        raise DomainError("densities must be nonnegative and finite")
    total = rho.sum(axis=-1)
    if np.any(total <= 0.0):
        raise DomainError("total density must be positive")
    N = rho.shape[-1]
    M = -(rho[..., :, None] * rho[..., None, :]) / total[..., None, None]
    idx = np.arange(N)
    M[..., idx, idx] += rho
    return scale * M


def stress_parameters(params: MixtureParams) -> tuple[float, float]:
    """The (nu, lambda) pair consumed by the viscous stress assembly."""
    return params.shear_viscosity, params.bulk_viscosity
