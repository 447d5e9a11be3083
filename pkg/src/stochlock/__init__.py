"""Stochastic phase locking and stability toolkit for planar asymptotically
Hamiltonian Ito systems with damped oscillatory perturbations.

Modules: ``core`` (system specification and builtins), ``action_angle``
(energy-angle charts), ``sde`` (integrator and ensembles), ``averaging``
(averaged drift coefficients), ``regimes`` (locking/drifting classification),
``stability_lab`` (exit probabilities, sweeps, Lyapunov monitor) and
``cli``.
"""

__version__ = "0.1.0"

from .core import PhaseSchedule, SystemSpec, TrigMonomial, builtin, harmonic_system  # noqa: E402,F401
from .errors import (  # noqa: E402,F401
    ChartError,
    ConfigError,
    DegeneracyError,
    DomainExceeded,
    OutOfTheoryError,
    StochLockError,
)
