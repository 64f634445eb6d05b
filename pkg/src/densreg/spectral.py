"""Inverse discrete Laplacian on periodic (FFT) and clamped (DCT-I, Neumann) grids.

The symbol is that of the 3-point second difference per axis, so applying
:func:`laplacian_values` to a solution reproduces the mean-free source to
rounding.
"""

from __future__ import annotations

import os

import numpy as np
import scipy.fft

from .errors import ValidationError
from .fields import Grid, ScalarField, VectorField


def fft_workers() -> int:
    """Worker count for scipy.fft, from ``DENSREG_THREADS`` (0 or unset = all cores)."""
    raw = os.environ.get("DENSREG_THREADS", "0").strip() or "0"
    try:
        n = int(raw)
    except ValueError:
        raise ValidationError(f"DENSREG_THREADS must be an integer, got {raw!r}") from None
    return -1 if n <= 0 else n


class PoissonPlan:
    """Precomputed Laplacian eigenvalues for one grid.

    Solves are pure: the plan holds no mutable workspace and can be shared
    between threads.
    """

    def __init__(self, grid: Grid):
        self.grid = grid
        d = grid.ndim
        symbols = []
        for ax, (n, h) in enumerate(zip(grid.dims, grid.spacing)):
            if grid.periodic:
                k = np.arange(n // 2 + 1) if ax == d - 1 else np.arange(n)
                theta = 2.0 * np.pi * k / n
            else:
                theta = np.pi * np.arange(n) / (n - 1)
            lam = -(2.0 / h**2) * (1.0 - np.cos(theta))
            shape = [1] * d
            shape[ax] = lam.size
            symbols.append(lam.reshape(shape))
        eig = sum(symbols[1:], symbols[0])
        zero = (0,) * d
        inv = np.zeros_like(eig)
        nz = np.ones(eig.shape, dtype=bool)
        nz[zero] = False
        inv[nz] = 1.0 / eig[nz]
        self.eigenvalues = eig
        self._inverse = inv

    def solve(self, values: np.ndarray) -> np.ndarray:
        """Apply the inverse Laplacian over the trailing ``ndim`` axes of ``values``."""
        d = self.grid.ndim
        if values.shape[values.ndim - d :] != self.grid.dims:
            raise ValidationError(f"array shape {values.shape} does not match plan grid {self.grid.dims}")
        axes = tuple(range(values.ndim - d, values.ndim))
        workers = fft_workers()
        if self.grid.periodic:
            spec = scipy.fft.rfftn(values, axes=axes, workers=workers)
            spec *= self._inverse
            return scipy.fft.irfftn(spec, s=self.grid.dims, axes=axes, workers=workers)
        spec = scipy.fft.dctn(values, type=1, axes=axes, workers=workers)
        spec *= self._inverse
        return scipy.fft.idctn(spec, type=1, axes=axes, workers=workers)


def inv_laplacian(plan: PoissonPlan, s: ScalarField) -> ScalarField:
    """Solve ``Lap f = s - mean(s)`` with ``mean(f) = 0``."""
    plan.grid.require_same(s.grid, "plan and source")
    return ScalarField(s.grid, plan.solve(s.values))


def inv_laplacian_vec(plan: PoissonPlan, u: VectorField) -> VectorField:
    """Componentwise :func:`inv_laplacian`."""
    plan.grid.require_same(u.grid, "plan and source")
    return VectorField(u.grid, plan.solve(u.values))


def laplacian_values(values: np.ndarray, grid: Grid) -> np.ndarray:
    """The discrete Laplacian stencil (5-point in 2D, 7-point in 3D).

    Clamped grids use mirror ghost nodes (``f[-1] = f[1]``), i.e. a homogeneous
    Neumann condition.
    """
    out = np.zeros_like(values, dtype=float)
    for ax, h in enumerate(grid.spacing):
        if grid.periodic:
            fwd = np.roll(values, -1, axis=ax)
            bwd = np.roll(values, 1, axis=ax)
        else:
            pad = [(0, 0)] * values.ndim
            pad[ax] = (1, 1)
            ext = np.pad(values, pad, mode="reflect")
            n = values.shape[ax]
            fwd = np.take(ext, np.arange(2, n + 2), axis=ax)
            bwd = np.take(ext, np.arange(0, n), axis=ax)
        out += (fwd - 2.0 * values + bwd) / h**2
    return out


def laplacian(field: ScalarField) -> ScalarField:
    return ScalarField(field.grid, laplacian_values(field.values, field.grid))
