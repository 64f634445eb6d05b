"""Masses, Fisher-Rao distance and geodesics, and the Hellinger functional."""

from __future__ import annotations

import math
from typing import Optional

import numpy as np

from .errors import ValidationError
from .fields import Density, ScalarField, normalize

__all__ = [
    "total_mass",
    "p_mass",
    "fr_distance",
    "fr_geodesic",
    "fr_geodesic_velocity",
    "geodesic_coefficients",
    "hellinger_sq",
    "normalize",
]

TOL_MASS = 1e-6
TOL_THETA = 1e-8
TOL_ANTIPODAL = 1e-8


def _mask_weights(rho: Density, mask) -> np.ndarray:
    w = rho.grid.weights
    if mask is None:
        return w
    m = np.asarray(mask.values if isinstance(mask, ScalarField) else mask)
    if m.shape != rho.grid.dims:
        raise ValidationError(f"mask shape {m.shape} does not match grid dims {rho.grid.dims}")
    return w * m.astype(bool)


def total_mass(rho: Density, mask=None) -> float:
    """Quadrature of ``rho`` over the whole grid or a boolean ``mask``."""
    if mask is None:
        return rho.total_mass
    return float(np.sum(_mask_weights(rho, mask) * rho.values))


def p_mass(rho: Density, p: float, mask=None) -> float:
    """``int rho**p dx`` over the grid or the masked region."""
    if not p > 0:
        raise ValidationError(f"p must be > 0, got {p}")
    vals = rho.values if p == 1 else rho.values**p
    return float(np.sum(_mask_weights(rho, mask) * vals))


def _common_mass(rho0: Density, rho1: Density, tol_mass: float) -> float:
    rho0.grid.require_same(rho1.grid, "densities")
    m0, m1 = rho0.total_mass, rho1.total_mass
    if m0 <= 0 or m1 <= 0:
        raise ValidationError(f"densities must have positive mass, got {m0} and {m1}")
    if abs(m0 - m1) > tol_mass * max(m0, m1):
        raise ValidationError(f"mass mismatch: {m0!r} vs {m1!r} (relative tolerance {tol_mass})")
    return math.sqrt(m0 * m1)


def _cos_theta(rho0: Density, rho1: Density, tol_mass: float) -> float:
    mass = _common_mass(rho0, rho1, tol_mass)
    overlap = rho0.grid.integrate(np.sqrt(rho0.values * rho1.values))
    return min(1.0, max(-1.0, overlap / mass))


def fr_distance(rho0: Density, rho1: Density, tol_mass: float = TOL_MASS) -> float:
    """Fisher-Rao distance ``arccos(int sqrt(rho0 rho1) / M)`` in radians.

    Both densities must carry the same total mass ``M`` (see
    :func:`densreg.fields.normalize`).
    """
    return math.acos(_cos_theta(rho0, rho1, tol_mass))


def geodesic_coefficients(theta: float, t: float, tol_theta: float = TOL_THETA):
    """Return ``(a, b, da, db)`` so that ``sqrt(rho(t)) = a sqrt(rho0) + b sqrt(rho1)``."""
    if theta < tol_theta:
        return 1.0 - t, t, -1.0, 1.0
    if theta >= math.pi - TOL_ANTIPODAL:
        raise ValidationError(f"antipodal densities (theta = {theta}); geodesic is not unique")
    s = math.sin(theta)
    a = math.sin((1.0 - t) * theta) / s
    b = math.sin(t * theta) / s
    da = -theta * math.cos((1.0 - t) * theta) / s
    db = theta * math.cos(t * theta) / s
    return a, b, da, db


def _check_t(t: float) -> None:
    if not 0.0 <= t <= 1.0:
        raise ValidationError(f"t must lie in [0, 1], got {t}")


def fr_geodesic(rho0: Density, rho1: Density, t: float, tol_mass: float = TOL_MASS,
                tol_theta: float = TOL_THETA) -> Density:
    """Point ``rho(t)`` on the Fisher-Rao geodesic from ``rho0`` to ``rho1``."""
    _check_t(t)
    theta = fr_distance(rho0, rho1, tol_mass)
    a, b, _, _ = geodesic_coefficients(theta, t, tol_theta)
    root = a * np.sqrt(rho0.values) + b * np.sqrt(rho1.values)
    return Density(ScalarField(rho0.grid, root * root))


def fr_geodesic_velocity(rho0: Density, rho1: Density, t: float, tol_mass: float = TOL_MASS,
                         tol_theta: float = TOL_THETA) -> ScalarField:
    """Closed-form time derivative of :func:`fr_geodesic` at ``t``."""
    _check_t(t)
    theta = fr_distance(rho0, rho1, tol_mass)
    a, b, da, db = geodesic_coefficients(theta, t, tol_theta)
    r0 = np.sqrt(rho0.values)
    r1 = np.sqrt(rho1.values)
    return ScalarField(rho0.grid, 2.0 * (a * r0 + b * r1) * (da * r0 + db * r1))


def hellinger_sq(I0: ScalarField, I1: ScalarField, mask: Optional[np.ndarray] = None) -> float:
    """``int (sqrt(I0) - sqrt(I1))**2 dx`` for nonnegative fields."""
    I0 = I0.field if isinstance(I0, Density) else I0
    I1 = I1.field if isinstance(I1, Density) else I1
    I0.grid.require_same(I1.grid, "images")
    if np.any(I0.values < 0) or np.any(I1.values < 0):
        raise ValidationError("hellinger_sq needs nonnegative fields")
    diff = np.sqrt(I0.values) - np.sqrt(I1.values)
    w = I0.grid.weights if mask is None else I0.grid.weights * np.asarray(mask, dtype=bool)
    return float(np.sum(w * diff * diff))
