"""Deterministic synthetic densities, maps with closed-form Jacobians, and intensity series.

Every generator evaluates closed-form expressions at the grid nodes; nothing
here calls the finite-difference or spectral machinery it is used to test.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .alpha import SubjectSeries
from .errors import FoldError, ValidationError
from .fields import PERIODIC, Density, DiffeoMap, Grid, ScalarField, VectorField


@dataclass(frozen=True)
class SyntheticCase:
    name: str
    kind: str  # "density" | "diffeo"
    builder: Callable
    jacobian: str = ""  # closed form of |D phi| for diffeo cases
    description: str = ""


def torus_grid(n: int, ndim: int = 2) -> Grid:
    """The periodic box ``[-pi, pi)**ndim`` with ``n`` nodes per axis."""
    return Grid((n,) * ndim, (2 * math.pi / n,) * ndim, (-math.pi,) * ndim, PERIODIC)


def _center(grid: Grid, params: dict) -> np.ndarray:
    c = params.get("center")
    if c is None:
        return np.asarray(grid.origin) + 0.5 * np.asarray(grid.extent)
    return np.broadcast_to(np.asarray(c, dtype=float), (grid.ndim,))


def relative_coords(grid: Grid, center) -> np.ndarray:
    """``x - center`` at every node; minimum-image convention on periodic grids."""
    x = grid.node_coords()
    c = np.reshape(center, (-1,) + (1,) * grid.ndim)
    rel = x - c
    if grid.periodic:
        L = np.reshape(grid.extent, (-1,) + (1,) * grid.ndim)
        rel = rel - L * np.round(rel / L)
    return rel


# ---------------------------------------------------------------------------
# densities


def _uniform(grid, params):
    mass = params.get("mass", 1.0)
    return np.full(grid.dims, mass / grid.volume)


def banana_raw(x, y):
    """Unnormalized banana profile without its additive offset."""
    return 3.0 * np.exp(-(x**2) - 10.0 * (y - x**2 / 2.0 + 1.0) ** 2)


def _banana(grid, params):
    if grid.ndim != 2:
        raise ValidationError("banana density is two-dimensional")
    ratio = params.get("ratio", 100.0)
    x, y = grid.node_coords()
    g = banana_raw(x, y)
    gmax, gmin = g.max(), g.min()
    # offset c with (gmax + c) / (gmin + c) == ratio
    offset = (gmax - ratio * gmin) / (ratio - 1.0)
    rho = g + offset
    return rho * (params.get("mass", 1.0) / grid.integrate(rho))


def _gauss_bump(grid, params):
    c = _center(grid, params)
    width = params.get("width", 0.1 * min(grid.extent))
    amp = params.get("amplitude", 1.0)
    background = params.get("background", 0.0)
    r2 = np.sum(relative_coords(grid, c) ** 2, axis=0)
    return background + amp * np.exp(-r2 / (2.0 * width**2))


def gauss_bump_mass(grid: Grid, params: dict) -> float:
    """Closed-form integral of the gauss-bump case over the whole domain (tails negligible)."""
    width = params.get("width", 0.1 * min(grid.extent))
    amp = params.get("amplitude", 1.0)
    background = params.get("background", 0.0)
    return background * grid.volume + amp * (2.0 * math.pi * width**2) ** (grid.ndim / 2.0)


def _two_level(grid, params):
    lo, hi = params.get("low", 0.5), params.get("high", 1.5)
    rho = np.full(grid.dims, lo)
    half = [slice(None)] * grid.ndim
    half[0] = slice(grid.dims[0] // 2, None)
    rho[tuple(half)] = hi
    return rho


# ---------------------------------------------------------------------------
# maps


def _translation(grid, params):
    shift = np.broadcast_to(np.asarray(params.get("shift", 0.0), dtype=float), (grid.ndim,))
    disp = np.broadcast_to(np.reshape(shift, (-1,) + (1,) * grid.ndim), (grid.ndim,) + grid.dims).copy()
    return disp, np.ones(grid.dims)


def _shear(grid, params):
    if grid.ndim < 2:
        raise ValidationError("shear needs at least two axes")
    if grid.periodic:
        raise ValidationError("shear displacement is not periodic; use a clamped grid")
    gamma = params.get("gamma", 0.1)
    src = params.get("along", 1)
    dst = params.get("axis", 0)
    rel = relative_coords(grid, _center(grid, params))
    disp = np.zeros((grid.ndim,) + grid.dims)
    disp[dst] = gamma * rel[src]
    return disp, np.ones(grid.dims)


def _radial_bump(grid, params):
    amp = params.get("amplitude", 0.3)
    width = params.get("width", 0.15 * min(grid.extent))
    rel = relative_coords(grid, _center(grid, params))
    r2 = np.sum(rel**2, axis=0)
    g = np.exp(-r2 / (2.0 * width**2))
    disp = amp * g * rel
    d = grid.ndim
    # worst case of g (1 - r^2/w^2) over r is -2 exp(-3/2), at r^2 = 3 w^2
    if amp <= -1.0 or amp * (-2.0 * math.exp(-1.5)) <= -1.0:
        raise FoldError(f"radial-bump amplitude {amp} folds the map")
    jac = (1.0 + amp * g) ** (d - 1) * (1.0 + amp * g * (1.0 - r2 / width**2))
    return disp, jac


def _swirl(grid, params):
    if grid.ndim < 2:
        raise ValidationError("swirl needs at least two axes")
    amp = params.get("amplitude", 0.5)
    width = params.get("width", 0.15 * min(grid.extent))
    rel = relative_coords(grid, _center(grid, params))
    r2 = rel[0] ** 2 + rel[1] ** 2
    theta = amp * np.exp(-r2 / (2.0 * width**2))
    cos, sin = np.cos(theta), np.sin(theta)
    disp = np.zeros((grid.ndim,) + grid.dims)
    disp[0] = cos * rel[0] - sin * rel[1] - rel[0]
    disp[1] = sin * rel[0] + cos * rel[1] - rel[1]
    # rotation by an angle depending only on the radius preserves area
    return disp, np.ones(grid.dims)


CASES = {
    "uniform": SyntheticCase("uniform", "density", _uniform, description="constant, mass 1 by default"),
    "banana": SyntheticCase("banana", "density", _banana,
                            description="3 exp(-x^2 - 10 (y - x^2/2 + 1)^2) + c, max/min = ratio, unit mass"),
    "gauss-bump": SyntheticCase("gauss-bump", "density", _gauss_bump,
                                description="background + amplitude exp(-|x-c|^2 / 2 w^2)"),
    "two-level": SyntheticCase("two-level", "density", _two_level,
                               description="low on the first half of axis 0, high on the second"),
    "translation": SyntheticCase("translation", "diffeo", _translation, "1"),
    "shear": SyntheticCase("shear", "diffeo", _shear, "1"),
    "radial-bump": SyntheticCase("radial-bump", "diffeo", _radial_bump,
                                 "(1 + a g)^(d-1) (1 + a g (1 - r^2/w^2)), g = exp(-r^2 / 2 w^2)"),
    "swirl": SyntheticCase("swirl", "diffeo", _swirl, "1"),
}


def _case(name: str, kind: str) -> SyntheticCase:
    case = CASES.get(name)
    if case is None or case.kind != kind:
        known = sorted(k for k, c in CASES.items() if c.kind == kind)
        raise ValidationError(f"unknown {kind} case {name!r}; known: {', '.join(known)}")
    return case


def make_density(name: str, grid: Grid, params: Optional[dict] = None, floor: float = 0.0) -> Density:
    values = _case(name, "density").builder(grid, dict(params or {}))
    return Density(ScalarField(grid, values), floor)


def make_diffeo(name: str, grid: Grid, params: Optional[dict] = None, direction: str = "forward") -> DiffeoMap:
    """A synthetic map with its exact Jacobian determinant attached."""
    disp, jac = _case(name, "diffeo").builder(grid, dict(params or {}))
    if np.any(jac <= 0):
        raise FoldError(f"{name} with {params} folds at {int(np.sum(jac <= 0))} nodes")
    return DiffeoMap(grid, VectorField(grid, disp), ScalarField(grid, jac), direction)


def radial_bump_point_map(points, center, amplitude: float, width: float, extent=None) -> np.ndarray:
    """Evaluate the radial-bump map at arbitrary points (rows of ``points``)."""
    pts = np.asarray(points, dtype=float)
    rel = pts - np.asarray(center, dtype=float)
    if extent is not None:
        L = np.asarray(extent, dtype=float)
        rel = rel - L * np.round(rel / L)
    g = np.exp(-np.sum(rel**2, axis=1) / (2.0 * width**2))
    return pts + amplitude * g[:, None] * rel


def make_series(M: float, volumes, alpha_true: float, subject_id: str = "synthetic",
                ndim: int = 3, box: int = 4, background: float = 0.0) -> SubjectSeries:
    """Constant-intensity phases ``I_t = (M / V_t)**(1 / alpha_true)`` on box masks.

    Each phase lives on its own periodic grid whose spacing is chosen so the
    ``box**ndim`` mask has exactly volume ``V_t``.
    """
    vols = [float(v) for v in volumes]
    if any(not v > 0 for v in vols):
        raise ValidationError("volumes must be positive")
    if not alpha_true > 0:
        raise ValidationError("alpha_true must be > 0")
    n = 2 * box
    samples = []
    for V in vols:
        h = (V / box**ndim) ** (1.0 / ndim)
        grid = Grid((n,) * ndim, (h,) * ndim, None, PERIODIC)
        mask = np.zeros(grid.dims, dtype=bool)
        mask[(slice(box // 2, box // 2 + box),) * ndim] = True
        V_real = float(np.sum(grid.weights[mask]))
        vals = np.full(grid.dims, background)
        vals[mask] = (M / V_real) ** (1.0 / alpha_true)
        samples.append((ScalarField(grid, vals), mask))
    return SubjectSeries(samples, subject_id)


def gauss_bump_at(points, grid: Grid, params: dict) -> np.ndarray:
    """Closed-form gauss-bump density at absolute positions ``points`` shaped ``(d, ...)``."""
    c = np.reshape(_center(grid, params), (-1,) + (1,) * (np.ndim(points) - 1))
    width = params.get("width", 0.1 * min(grid.extent))
    rel = np.asarray(points) - c
    if grid.periodic:
        L = np.reshape(grid.extent, c.shape)
        rel = rel - L * np.round(rel / L)
    return params.get("background", 0.0) + params.get("amplitude", 1.0) * np.exp(
        -np.sum(rel**2, axis=0) / (2.0 * width**2)
    )


def warped_pair(grid: Grid, bump: dict, warp: dict):
    """Images ``(I0, I1, psi)`` with ``I1`` a gauss bump and ``I0 = |D psi| I1 o psi``.

    ``psi`` is a radial-bump map, so pushing ``I0`` forward by ``psi`` gives
    back ``I1`` exactly and ``psi^-1`` is the ideal registration result.
    Both images are evaluated in closed form at the nodes.
    """
    I1 = make_density("gauss-bump", grid, bump)
    psi = make_diffeo("radial-bump", grid, warp)
    I0 = psi.jac_det.values * gauss_bump_at(psi.positions(), grid, bump)
    return Density(ScalarField(grid, I0)), I1, psi


def warp_landmarks(grid: Grid, warp: dict, n: int = 50, radius: float = 1.5, seed: int = 0):
    """Corresponding point sets ``(source, target)`` for a radial-bump warp.

    Targets are uniform in a disk (ball) around the warp center in the frame
    of ``I0``; sources are their images under ``psi``, so ``psi^-1`` maps
    every source onto its target.
    """
    rng = np.random.Generator(np.random.PCG64(seed))
    c = _center(grid, warp)
    d = grid.ndim
    direction = rng.standard_normal((n, d))
    direction /= np.linalg.norm(direction, axis=1, keepdims=True)
    r = radius * rng.random(n) ** (1.0 / d)
    target = c + r[:, None] * direction
    width = warp.get("width", 0.15 * min(grid.extent))
    source = radial_bump_point_map(target, c, warp.get("amplitude", 0.3), width,
                                   grid.extent if grid.periodic else None)
    return source, target
