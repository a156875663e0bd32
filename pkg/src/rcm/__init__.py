"""Random conductance models on Z^d: environments, walks, electrostatics,
correctors, heat kernels, gradient fields and homogenization."""

__version__ = "0.1.0"

from .env import (Distribution, Environment, EnvironmentLaw, LatticeDomain, build_environment,
                  build_trap_environment, make_rng)
from .errors import RCMError

__all__ = ["Distribution", "Environment", "EnvironmentLaw", "LatticeDomain", "RCMError",
           "build_environment", "build_trap_environment", "make_rng", "__version__"]
