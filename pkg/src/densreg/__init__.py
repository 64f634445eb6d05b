"""Diffeomorphic density matching: Fisher-Rao geometry, optimal information
transport sampling, weighted density registration and alpha-mass fitting."""

from .errors import DensregError, FoldError, NumericalError, ValidationError
from .fields import (
    CLAMPED,
    FORWARD,
    INVERSE,
    PERIODIC,
    Density,
    DiffeoMap,
    Grid,
    JacobianField,
    ScalarField,
    VectorField,
    compose,
    divergence,
    gradient,
    interp_scalar,
    jacobian_det,
    normalize,
    pushforward_alpha,
)
from .spectral import PoissonPlan, inv_laplacian, inv_laplacian_vec, laplacian
from .geometry import fr_distance, fr_geodesic, fr_geodesic_velocity, hellinger_sq, p_mass, total_mass
from .oit import OitConfig, OitResult, draw_samples, oit_solve
from .wddr import WddrConfig, WddrState, energy, penalty_sigmoid, register, sobolev_gradient
from .alpha import AlphaFitReport, SubjectSeries, fit_alpha
from .synth import make_density, make_diffeo

__version__ = "0.1.0"

__all__ = [
    "DensregError",
    "FoldError",
    "NumericalError",
    "ValidationError",
    "CLAMPED",
    "FORWARD",
    "INVERSE",
    "PERIODIC",
    "Density",
    "DiffeoMap",
    "Grid",
    "JacobianField",
    "ScalarField",
    "VectorField",
    "compose",
    "divergence",
    "gradient",
    "interp_scalar",
    "jacobian_det",
    "normalize",
    "pushforward_alpha",
    "PoissonPlan",
    "inv_laplacian",
    "inv_laplacian_vec",
    "laplacian",
    "fr_distance",
    "fr_geodesic",
    "fr_geodesic_velocity",
    "hellinger_sq",
    "p_mass",
    "total_mass",
    "OitConfig",
    "OitResult",
    "draw_samples",
    "oit_solve",
    "WddrConfig",
    "WddrState",
    "energy",
    "penalty_sigmoid",
    "register",
    "sobolev_gradient",
    "AlphaFitReport",
    "SubjectSeries",
    "fit_alpha",
    "make_density",
    "make_diffeo",
]
