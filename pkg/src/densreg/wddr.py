"""Weighted diffeomorphic density registration (WDDR).

Minimizes

    E1 = int (sqrt(J) - 1)**2 * f o phi^-1 dx
    E2 = int (sqrt(J * I0 o phi^-1) - sqrt(I1))**2 dx,    J = |D phi^-1|

by an Euler gradient flow in the Sobolev metric ``<-Lap u, v>``.  Only the
inverse map and its Jacobian determinant are tracked.

Perturbation convention: ``phi_s = (id + s v) o phi``, i.e.
``phi_s^-1 = phi^-1 o (id - s v)``.  The right-hand side ``u`` satisfies
``dE/ds = <u, v>``; the Sobolev gradient is ``w = (-Lap)^-1 u`` and one flow
step is ``phi^-1 <- phi^-1 o (id + eps w)``.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, NamedTuple, Optional

import numpy as np

from .errors import FoldError, NumericalError, ValidationError
from .fields import (
    INVERSE,
    Density,
    DiffeoMap,
    Grid,
    ScalarField,
    VectorField,
    det_values,
    div_values,
    grad_values,
    jacobian_det,
    jacobian_matrix,
    warp_values,
)
from .spectral import PoissonPlan

log = logging.getLogger(__name__)

FORMS = ("adjoint", "paper")


def penalty_sigmoid(I0: ScalarField, center: float, sharpness: float) -> ScalarField:
    """Volume-change weight ``1 / (1 + exp(-sharpness (I0 - center)))``."""
    if not sharpness > 0:
        raise ValidationError(f"sigmoid sharpness must be > 0, got {sharpness}")
    z = sharpness * (I0.values - center)
    # tanh form avoids overflow in exp for large |z|
    return ScalarField(I0.grid, 0.5 * (1.0 + np.tanh(0.5 * z)))


@dataclass
class WddrConfig:
    step: float = 0.01
    iterations: int = 1000
    sigmoid_center: float = 0.0
    sigmoid_sharpness: float = 1.0
    floor: float = 0.0
    resync_every: int = 500
    report_every: int = 100
    form: str = "adjoint"
    backtracking: bool = False
    max_halvings: int = 20
    tol_energy: float = 1e-8

    def __post_init__(self):
        if not self.step > 0:
            raise ValidationError(f"step must be > 0, got {self.step}")
        if int(self.iterations) < 0:
            raise ValidationError(f"iterations must be >= 0, got {self.iterations}")
        if not self.sigmoid_sharpness > 0:
            raise ValidationError(f"sigmoid sharpness must be > 0, got {self.sigmoid_sharpness}")
        if int(self.resync_every) < 0:
            raise ValidationError("resync_every must be >= 0")
        if self.form not in FORMS:
            raise ValidationError(f"unknown gradient form {self.form!r}; choose from {', '.join(FORMS)}")
        self.iterations = int(self.iterations)
        self.resync_every = int(self.resync_every)
        self.report_every = int(self.report_every)


class EnergyRecord(NamedTuple):
    iteration: int
    E1: float
    E2: float
    E: float


@dataclass
class WddrState:
    phi_inv: DiffeoMap
    jac_det: ScalarField
    trace: list = field(default_factory=list)
    step: float = 0.0

    @classmethod
    def identity(cls, grid: Grid) -> "WddrState":
        return cls(DiffeoMap.identity(grid, INVERSE), ScalarField(grid, np.ones(grid.dims)))

    @property
    def grid(self) -> Grid:
        return self.phi_inv.grid

    def jac_drift(self) -> float:
        """Max relative deviation of the tracked determinant from a finite-difference recomputation."""
        fresh = jacobian_det(self.phi_inv).values
        return float(np.max(np.abs(self.jac_det.values - fresh) / np.abs(fresh)))

    def deformed(self, I0: Density) -> ScalarField:
        """``J * I0 o phi^-1``: the source pushed forward by the current map."""
        G = warp_values(I0.values, self.grid, self.phi_inv.displacement.values)
        return ScalarField(self.grid, self.jac_det.values * G)


@dataclass
class _Composed:
    """Fields of the state in the target frame."""

    F: np.ndarray  # f o phi^-1
    G: np.ndarray  # I0 o phi^-1
    J: np.ndarray  # |D phi^-1|


def _compose_fields(state: WddrState, f: ScalarField, I0: Density) -> _Composed:
    disp = state.phi_inv.displacement.values
    grid = state.grid
    stack = warp_values(np.stack([f.values, I0.values]), grid, disp)
    return _Composed(stack[0], stack[1], state.jac_det.values)


def energy_terms(c: _Composed, I1: np.ndarray, grid: Grid):
    if np.any(c.J <= 0):
        raise FoldError("tracked Jacobian determinant is not positive")
    e1 = grid.integrate((np.sqrt(c.J) - 1.0) ** 2 * c.F)
    e2 = grid.integrate((np.sqrt(c.J * c.G) - np.sqrt(I1)) ** 2)
    return e1, e2, e1 + e2


def energy(state: WddrState, f: ScalarField, I0: Density, I1: Density):
    """Return ``(E1, E2, E)`` for the current state.

    ``E2`` is the full Hellinger form, including the term that is constant
    under exact mass conservation.
    """
    c = _compose_fields(state, f, I0)
    return energy_terms(c, I1.values, state.grid)


def _rhs_adjoint(c: _Composed, I1: np.ndarray, grid: Grid) -> np.ndarray:
    # exact adjoint of the discrete energy under central differences
    sJ = np.sqrt(c.J)
    eF = (sJ - 1.0) ** 2
    eJ = c.F * (1.0 - 1.0 / sJ) + c.G - np.sqrt(c.G * I1 / c.J)
    eG = c.J - np.sqrt(c.J * I1 / c.G)
    stack = grad_values(np.stack([c.J * eJ, c.F, c.J, c.G]), grid)
    return stack[:, 0] - eF * stack[:, 1] - eJ * stack[:, 2] - eG * stack[:, 3]


def _rhs_paper(c: _Composed, I1: np.ndarray, grid: Grid) -> np.ndarray:
    sA = np.sqrt(c.J * c.G)
    sI1 = np.sqrt(I1)
    g = grad_values(np.stack([c.F * (1.0 - np.sqrt(c.J)), sA, sI1]), grid)
    return -g[:, 0] - sA * g[:, 2] + g[:, 1] * sI1


def _rhs(c: _Composed, I1: np.ndarray, grid: Grid, form: str) -> np.ndarray:
    if np.any(c.G <= 0) or np.any(I1 <= 0):
        raise ValidationError("images must be strictly positive; set a floor")
    return _rhs_adjoint(c, I1, grid) if form == "adjoint" else _rhs_paper(c, I1, grid)


def _check_inputs(I0: Density, I1: Density, f: ScalarField):
    I0.grid.require_same(I1.grid, "source and target images")
    I0.grid.require_same(f.grid, "source image and penalty weight")
    if np.any(f.values < 0):
        raise ValidationError("penalty weight f must be nonnegative")


def l2_gradient(state: WddrState, f: ScalarField, I0: Density, I1: Density, form: str = "adjoint") -> VectorField:
    """The right-hand side ``u`` with ``dE/ds = <u, v>`` for ``phi_s^-1 = phi^-1 o (id - s v)``.

    ``form="adjoint"`` is the exact derivative of the discretized energy;
    ``form="paper"`` assembles the continuum expression term by term and
    agrees with it up to the discretization error of the gradient stencil.
    """
    _check_inputs(I0, I1, f)
    c = _compose_fields(state, f, I0)
    return VectorField(state.grid, _rhs(c, I1.values, state.grid, form))


def sobolev_gradient(state: WddrState, f: ScalarField, I0: Density, I1: Density,
                     form: str = "adjoint", plan: Optional[PoissonPlan] = None) -> VectorField:
    """``(-Lap)^-1 u``: the gradient of ``E`` in the Sobolev metric (an ascent direction)."""
    u = l2_gradient(state, f, I0, I1, form)
    plan = plan or PoissonPlan(state.grid)
    return VectorField(state.grid, -plan.solve(u.values))


def perturbed_energy(state: WddrState, f: ScalarField, I0: Density, I1: Density, v, s: float):
    """Energy after moving the state along ``phi_s^-1 = phi^-1 o (id - s v)``.

    The composed fields are resampled directly, ``F o (id - s v)`` etc., and
    the Jacobian picks up ``det(I - s Dv)``; this is the perturbation whose
    derivative :func:`l2_gradient` returns.
    """
    grid = state.grid
    c = _compose_fields(state, f, I0)
    d = -s * np.asarray(v, dtype=float)
    F, G, J = warp_values(np.stack([c.F, c.G, c.J]), grid, d)
    J = J * det_values(jacobian_matrix(d, grid))
    return energy_terms(_Composed(F, G, J), I1.values, grid)


def _advance(state: WddrState, w: np.ndarray, eps: float) -> WddrState:
    grid = state.grid
    d = eps * w
    step_det = det_values(jacobian_matrix(d, grid))
    if np.any(step_det <= 0):
        where = np.unravel_index(int(np.argmin(step_det)), grid.dims)
        raise FoldError(f"update folds at node {where}", location=where)
    disp = d + warp_values(state.phi_inv.displacement.values, grid, d)
    # |D(phi^-1 o (id + eps w))| = J o (id + eps w) * det(I + eps Dw) ~ ... * exp(eps div w)
    jac = warp_values(state.jac_det.values, grid, d) * np.exp(eps * div_values(w, grid))
    return WddrState(DiffeoMap(grid, VectorField(grid, disp), None, INVERSE), ScalarField(grid, jac),
                     state.trace, state.step)


def _resync(state: WddrState, it: int) -> WddrState:
    fresh = jacobian_det(state.phi_inv)
    if fresh.folded:
        where = np.unravel_index(int(np.argmin(fresh.values)), state.grid.dims)
        raise FoldError(f"map folded by iteration {it} at node {where}", step=it, location=where)
    return WddrState(state.phi_inv, ScalarField(state.grid, fresh.values), state.trace, state.step)


def register(I0: Density, I1: Density, f: Optional[ScalarField] = None, cfg: Optional[WddrConfig] = None,
             callback: Optional[Callable[[int, WddrState], None]] = None) -> WddrState:
    """Run the WDDR gradient flow from the identity.

    ``f`` defaults to ``penalty_sigmoid(I0, cfg.sigmoid_center, cfg.sigmoid_sharpness)``.
    ``trace[j]`` holds the energies after ``j`` updates, so a run of ``n``
    iterations has ``n + 1`` records.  Raises :class:`NumericalError` on a
    non-finite energy and :class:`FoldError` if an update or a resync finds a
    non-positive determinant (with backtracking, only after the last halving).
    """
    cfg = cfg or WddrConfig()
    if cfg.floor > 0:
        I0 = Density(I0.field, cfg.floor)
        I1 = Density(I1.field, cfg.floor)
    if f is None:
        f = penalty_sigmoid(I0.field, cfg.sigmoid_center, cfg.sigmoid_sharpness)
    _check_inputs(I0, I1, f)
    if not (I0.positive and I1.positive):
        raise ValidationError("images must be strictly positive; set a floor")
    grid = I0.grid
    plan = PoissonPlan(grid)
    I1v = I1.values
    eps = float(cfg.step)
    tol = None

    state = WddrState.identity(grid)
    state.step = eps
    c = _compose_fields(state, f, I0)
    e = energy_terms(c, I1v, grid)
    state.trace.append(EnergyRecord(0, *e))
    tol = cfg.tol_energy * max(e[2], np.finfo(float).tiny)

    for it in range(1, cfg.iterations + 1):
        w = -plan.solve(_rhs(c, I1v, grid, cfg.form))
        trial_eps = eps
        for halving in range(cfg.max_halvings + 1):
            try:
                new = _advance(state, w, trial_eps)
                if cfg.resync_every and it % cfg.resync_every == 0:
                    new = _resync(new, it)
                c_new = _compose_fields(new, f, I0)
                e_new = energy_terms(c_new, I1v, grid)
            except FoldError:
                # with backtracking a folding trial step is rejected like an energy increase
                if not cfg.backtracking or halving == cfg.max_halvings:
                    raise
                trial_eps *= 0.5
                continue
            if not all(math.isfinite(x) for x in e_new):
                raise NumericalError(f"non-finite energy at iteration {it}")
            if not cfg.backtracking or e_new[2] <= e[2] + tol:
                break
            trial_eps *= 0.5
        else:
            log.warning("iteration %d: energy rose after %d halvings", it, cfg.max_halvings)
        state, c, e = new, c_new, e_new
        state.step = trial_eps
        state.trace.append(EnergyRecord(it, *e))
        if cfg.report_every and it % cfg.report_every == 0:
            log.info("iter %d  E1=%.6g  E2=%.6g  E=%.6g", it, *e)
        if callback is not None:
            callback(it, state)
    return state
