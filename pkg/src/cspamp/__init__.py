"""Message passing for random constraint satisfaction, driven by Parisi-type PDE solutions."""

from ._kernels import BACKEND
from .engine import RunConfig, RunResult, run
from .instance import CspInstance, index_regularize, sample_csp, sample_index_regular
from .parisi import GridConfig, StepFunction, minimize_alg, solve_pde
from .predicate import MixturePolynomial, Predicate, fourier_transform, mixture, named

__version__ = "0.1.0"

__all__ = [
    "BACKEND", "CspInstance", "GridConfig", "MixturePolynomial", "Predicate", "RunConfig",
    "RunResult", "StepFunction", "fourier_transform", "index_regularize", "minimize_alg",
    "mixture", "named", "run", "sample_csp", "sample_index_regular", "solve_pde",
]
