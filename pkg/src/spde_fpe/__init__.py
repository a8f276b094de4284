"""Spectral Galerkin simulation of semilinear stochastic heat equations on (0, 1).

Drift regularisation, Lyapunov and moment estimates, and the weak
Fokker-Planck identity are exposed as executable checks.
"""
__version__ = "0.1.0"

from .spectral import EigenSystem, build_eigensystem, to_grid, to_spectral, norm_triple  # noqa: E402
from .noise import CovarianceSpec, RngStream, Verdict  # noqa: E402
from .drift import DriftModel, preset, PRESETS  # noqa: E402
from .solver import SolverConfig, Scheme, integrate_path, integrate_ensemble  # noqa: E402
from .harness import ExperimentSpec, ExperimentReport, run_experiment, persist_run, load_run  # noqa: E402

__all__ = [
    "EigenSystem", "build_eigensystem", "to_grid", "to_spectral", "norm_triple",
    "CovarianceSpec", "RngStream", "Verdict", "DriftModel", "preset", "PRESETS",
    "SolverConfig", "Scheme", "integrate_path", "integrate_ensemble",
    "ExperimentSpec", "ExperimentReport", "run_experiment", "persist_run", "load_run",
]
