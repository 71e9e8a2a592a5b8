"""Finite element solver for quasi-incompressible multicomponent mixture flow.

The package simulates an N-species mixture on the periodic unit square:
cross-diffusion driven by chemical potential gradients (Onsager mobility),
coupled to the Navier-Stokes momentum balance under the volume constraint
sum_i V_i rho_i = 1.  The time discretization conserves the partial masses,
keeps the constraint exact at the nodes, and dissipates the discrete energy;
all three properties are monitored at runtime.
"""

from msfem.mesh import PeriodicMesh, build_uniform_periodic_mesh, mesh_level_to_resolution
from msfem.model import MixtureParams

__all__ = [
    "PeriodicMesh",
    "build_uniform_periodic_mesh",
    "mesh_level_to_resolution",
    "MixtureParams",
]

__version__ = "0.1.0"
