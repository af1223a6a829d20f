"""
viscosity-lab: Resonances by Vanishing Viscosity
================================================

Galerkin spectra of regularized transfer operators on tori, epsilon -> 0
continuation of their eigenvalues, spectral projectors, correlation
expansions and the dynamical diagnostics that frame them.
"""

__version__ = "0.1.0"
__author__ = "viscosity-lab developers"

from .continuation import Branch, BranchStatus, TruncationPolicy, extrapolate, sweep
from .eigensolver import ResonanceSet, Window, dense_spectrum, shift_invert_arnoldi
from .exceptions import (
    ArgumentError,
    ConfigError,
    ContourError,
    EvaluationError,
    LabError,
    PreconditionError,
    SolverError,
)
from .generator_assembly import (
    FourierTruncation,
    OperatorMatrix,
    assemble_flow_generator,
    assemble_noisy_koopman,
)
from .phase_models import FlowField, MapSystem, builtin_field, cat_map


def main(argv=None) -> int:
    """Console entry point, see viscosity_lab.orchestrator."""
    from .orchestrator import main as run_main

    return run_main(argv)


__all__ = [
    "ArgumentError",
    "Branch",
    "BranchStatus",
    "ConfigError",
    "ContourError",
    "EvaluationError",
    "FlowField",
    "FourierTruncation",
    "LabError",
    "MapSystem",
    "OperatorMatrix",
    "PreconditionError",
    "ResonanceSet",
    "SolverError",
    "TruncationPolicy",
    "Window",
    "assemble_flow_generator",
    "assemble_noisy_koopman",
    "builtin_field",
    "cat_map",
    "dense_spectrum",
    "extrapolate",
    "main",
    "shift_invert_arnoldi",
    "sweep",
]
