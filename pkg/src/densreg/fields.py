"""Grids, scalar/vector fields, densities and discretized diffeomorphisms.

Conventions
-----------
* Grids are node-centered.  Node ``i`` along axis ``a`` sits at
  ``origin[a] + i * spacing[a]``.
* Arrays are indexed ``values[i, j, k]`` with axis 0 = x.  Vector fields
  carry a leading component axis: ``values[c, i, j, k]``.
* Periodic grids wrap at ``dims * spacing``; clamped grids end at the last
  node and clamp lookups to the domain hull.
* Maps are stored as identity plus displacement, ``map(x) = x + u(x)``.
  On a periodic grid ``u`` is itself periodic.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from dataclasses import field as dc_field
from functools import cached_property
from typing import Optional

import numpy as np

from .errors import FoldError, ValidationError

PERIODIC = "periodic"
CLAMPED = "clamped"
FORWARD = "forward"
INVERSE = "inverse"


@dataclass(frozen=True)
class Grid:
    """Rectangular node-centered sampling lattice in 1 to 3 dimensions."""

    dims: tuple
    spacing: tuple
    origin: Optional[tuple] = None
    bc: str = PERIODIC

    def __post_init__(self):
        dims = tuple(int(n) for n in np.atleast_1d(self.dims))
        if not 1 <= len(dims) <= 3:
            raise ValidationError(f"grid must have 1 to 3 axes, got {len(dims)}")
        spacing = np.broadcast_to(np.asarray(self.spacing, dtype=float), (len(dims),))
        origin = self.origin
        if origin is None:
            origin = np.zeros(len(dims))
        origin = np.broadcast_to(np.asarray(origin, dtype=float), (len(dims),))
        if any(n < 2 for n in dims):
            raise ValidationError(f"all dims must be >= 2, got {dims}")
        if not np.all(np.isfinite(spacing)) or np.any(spacing <= 0):
            raise ValidationError(f"spacing must be positive, got {tuple(spacing)}")
        if not np.all(np.isfinite(origin)):
            raise ValidationError("origin must be finite")
        if self.bc not in (PERIODIC, CLAMPED):
            raise ValidationError(f"bc must be 'periodic' or 'clamped', got {self.bc!r}")
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "spacing", tuple(float(h) for h in spacing))
        object.__setattr__(self, "origin", tuple(float(o) for o in origin))

    @property
    def ndim(self) -> int:
        return len(self.dims)

    @property
    def size(self) -> int:
        return int(np.prod(self.dims))

    @property
    def periodic(self) -> bool:
        return self.bc == PERIODIC

    @property
    def cell_volume(self) -> float:
        return float(np.prod(self.spacing))

    @property
    def extent(self) -> tuple:
        """Physical length of the domain along each axis."""
        if self.periodic:
            return tuple(n * h for n, h in zip(self.dims, self.spacing))
        return tuple((n - 1) * h for n, h in zip(self.dims, self.spacing))

    @property
    def volume(self) -> float:
        return float(np.prod(self.extent))

    @property
    def cell_diagonal(self) -> float:
        return float(np.sqrt(np.sum(np.square(self.spacing))))

    @cached_property
    def weights(self) -> np.ndarray:
        """Quadrature weights: cell volume per node, trapezoid halving on clamped faces."""
        w = np.full(self.dims, self.cell_volume)
        if not self.periodic:
            for ax in range(self.ndim):
                edge = [slice(None)] * self.ndim
                edge[ax] = 0
                w[tuple(edge)] *= 0.5
                edge[ax] = -1
                w[tuple(edge)] *= 0.5
        w.flags.writeable = False
        return w

    @cached_property
    def index_coords(self) -> np.ndarray:
        """Node indices as floats, shape ``(ndim, *dims)``."""
        idx = np.indices(self.dims, dtype=float)
        idx.flags.writeable = False
        return idx

    def node_coords(self) -> np.ndarray:
        """Physical node coordinates, shape ``(ndim, *dims)``."""
        h = np.reshape(self.spacing, (-1,) + (1,) * self.ndim)
        o = np.reshape(self.origin, (-1,) + (1,) * self.ndim)
        return o + h * self.index_coords

    def axis_coords(self, axis: int) -> np.ndarray:
        return self.origin[axis] + self.spacing[axis] * np.arange(self.dims[axis])

    def integrate(self, values) -> float:
        return float(np.sum(self.weights * values))

    def mean(self, values) -> float:
        return self.integrate(values) / self.volume

    def wrap(self, points) -> np.ndarray:
        """Fold physical points back into ``[origin, origin + extent)`` on periodic axes."""
        pts = np.asarray(points, dtype=float)
        if not self.periodic:
            return pts
        o = np.asarray(self.origin)
        L = np.asarray(self.extent)
        return o + np.mod(pts - o, L)

    def require_same(self, other: "Grid", what: str = "fields") -> None:
        if self != other:
            raise ValidationError(
                f"grid mismatch between {what}: dims {list(self.dims)} vs {list(other.dims)}, "
                f"spacing {list(self.spacing)} vs {list(other.spacing)}, bc {self.bc} vs {other.bc}"
            )

    def _to_index(self, points: np.ndarray) -> np.ndarray:
        # (m, d) physical -> (d, m) index units
        o = np.asarray(self.origin)[:, None]
        h = np.asarray(self.spacing)[:, None]
        return (points.T - o) / h


@dataclass(frozen=True)
class ScalarField:
    grid: Grid
    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.shape != self.grid.dims:
            raise ValidationError(f"scalar field shape {v.shape} does not match grid dims {self.grid.dims}")
        if not np.all(np.isfinite(v)):
            raise ValidationError("scalar field contains non-finite values")
        object.__setattr__(self, "values", v)

    def integrate(self) -> float:
        return self.grid.integrate(self.values)

    def mean(self) -> float:
        return self.grid.mean(self.values)


@dataclass(frozen=True)
class JacobianField(ScalarField):
    """Jacobian determinant with a fold count (nodes where det <= 0)."""

    folds: int = 0

    @property
    def folded(self) -> bool:
        return self.folds > 0


@dataclass(frozen=True)
class VectorField:
    grid: Grid
    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        want = (self.grid.ndim,) + self.grid.dims
        if v.shape != want:
            raise ValidationError(f"vector field shape {v.shape} does not match {want}")
        if not np.all(np.isfinite(v)):
            raise ValidationError("vector field contains non-finite values")
        object.__setattr__(self, "values", v)

    @classmethod
    def zeros(cls, grid: Grid) -> "VectorField":
        return cls(grid, np.zeros((grid.ndim,) + grid.dims))

    def component(self, i: int) -> ScalarField:
        return ScalarField(self.grid, self.values[i])

    def l2_norm(self) -> float:
        return float(np.sqrt(self.grid.integrate(np.sum(self.values**2, axis=0))))


@dataclass(frozen=True)
class Density:
    """A nonnegative scalar field, clamped to ``floor`` at construction, with cached mass."""

    field: ScalarField
    floor: float = 0.0
    total_mass: float = dc_field(init=False)

    def __post_init__(self):
        if not np.isfinite(self.floor) or self.floor < 0:
            raise ValidationError(f"density floor must be >= 0, got {self.floor}")
        if np.any(self.field.values < self.floor):
            v = np.maximum(self.field.values, self.floor)
            object.__setattr__(self, "field", ScalarField(self.field.grid, v))
        object.__setattr__(self, "total_mass", self.field.integrate())

    @classmethod
    def from_values(cls, grid: Grid, values, floor: float = 0.0) -> "Density":
        return cls(ScalarField(grid, values), floor)

    @classmethod
    def from_image(cls, image: ScalarField, floor: Optional[float] = None, rel_floor: float = 1e-6) -> "Density":
        """Wrap raw intensities; default floor is ``rel_floor`` times the mean intensity."""
        if floor is None:
            floor = rel_floor * abs(image.mean())
        return cls(image, floor)

    @property
    def grid(self) -> Grid:
        return self.field.grid

    @property
    def values(self) -> np.ndarray:
        return self.field.values

    @property
    def positive(self) -> bool:
        return bool(np.all(self.values > 0))

    def scaled(self, factor: float) -> "Density":
        return Density(ScalarField(self.grid, self.values * factor), self.floor * factor)


def normalize(rho: Density, mass: float = 1.0) -> Density:
    """Scale ``rho`` to the requested total mass."""
    if rho.total_mass <= 0:
        raise ValidationError("cannot normalize a density with zero mass")
    return rho.scaled(mass / rho.total_mass)


@dataclass(frozen=True)
class DiffeoMap:
    """``map(x) = x + displacement(x)`` with an optionally tracked Jacobian determinant."""

    grid: Grid
    displacement: VectorField
    jac_det: Optional[ScalarField] = None
    direction: str = FORWARD

    def __post_init__(self):
        self.grid.require_same(self.displacement.grid, "map and displacement")
        if self.direction not in (FORWARD, INVERSE):
            raise ValidationError(f"direction must be 'forward' or 'inverse', got {self.direction!r}")
        if self.jac_det is not None:
            self.grid.require_same(self.jac_det.grid, "map and jac_det")
            if np.any(self.jac_det.values <= 0):
                raise ValidationError("tracked Jacobian determinant must be positive")

    @classmethod
    def identity(cls, grid: Grid, direction: str = FORWARD) -> "DiffeoMap":
        return cls(grid, VectorField.zeros(grid), ScalarField(grid, np.ones(grid.dims)), direction)

    @classmethod
    def from_displacement(cls, grid: Grid, disp, jac_det=None, direction: str = FORWARD) -> "DiffeoMap":
        jac = None if jac_det is None else ScalarField(grid, jac_det)
        return cls(grid, VectorField(grid, disp), jac, direction)

    @property
    def is_identity(self) -> bool:
        if np.any(self.displacement.values != 0):
            return False
        return self.jac_det is None or bool(np.all(self.jac_det.values == 1))

    def with_jac_det(self, jac: Optional[ScalarField]) -> "DiffeoMap":
        return DiffeoMap(self.grid, self.displacement, jac, self.direction)

    def with_computed_jac_det(self) -> "DiffeoMap":
        jac = jacobian_det(self)
        if jac.folded:
            raise FoldError(f"map folds at {jac.folds} nodes")
        return self.with_jac_det(ScalarField(self.grid, jac.values))

    def positions(self) -> np.ndarray:
        """Absolute image of every node, shape ``(ndim, *dims)`` (not wrapped)."""
        return self.grid.node_coords() + self.displacement.values

    def __call__(self, points) -> np.ndarray:
        """Evaluate the map at physical points of shape ``(m, ndim)``.

        Results are not wrapped on periodic grids; use ``grid.wrap``.
        """
        pts = _as_points(points, self.grid.ndim)
        if len(pts) == 0:
            return pts
        if not self.grid.periodic:
            pts = _clamp_points(self.grid, pts)
        u = multilinear(self.displacement.values, self.grid._to_index(pts), self.grid.periodic)
        return pts + u.T


# ---------------------------------------------------------------------------
# interpolation


def multilinear(stack: np.ndarray, idx: np.ndarray, periodic: bool) -> np.ndarray:
    """Multilinear lookup of ``stack`` (shape ``(c, *dims)``) at index coordinates.

    ``idx`` has shape ``(d, ...)``; the result has shape ``(c, ...)``.  Periodic
    lookups wrap, others clamp to ``[0, n-1]``.  Exact at integer coordinates.
    """
    dims = stack.shape[1:]
    d = len(dims)
    out_shape = (stack.shape[0],) + idx.shape[1:]
    idx = idx.reshape(d, -1)
    lo, hi, frac = [], [], []
    for ax in range(d):
        n = dims[ax]
        u = idx[ax]
        if periodic:
            u = np.mod(u, n)
            i0 = np.floor(u)
            t = u - i0
            i0 = i0.astype(np.intp) % n
            i1 = i0 + 1
            i1[i1 == n] = 0
        else:
            u = np.clip(u, 0.0, n - 1.0)
            i0 = np.minimum(np.floor(u).astype(np.intp), n - 2)
            t = u - i0
            i1 = i0 + 1
        lo.append(i0)
        hi.append(i1)
        frac.append(t)

    flat = stack.reshape(stack.shape[0], -1)
    strides = np.cumprod((1,) + dims[::-1])[:-1][::-1]
    out = np.zeros((stack.shape[0], idx.shape[1]))
    for corner in itertools.product((0, 1), repeat=d):
        w = None
        lin = None
        for ax, c in enumerate(corner):
            wa = frac[ax] if c else 1.0 - frac[ax]
            ia = (hi[ax] if c else lo[ax]) * strides[ax]
            w = wa if w is None else w * wa
            lin = ia if lin is None else lin + ia
        out += w * flat[:, lin]
    return out.reshape(out_shape)


def _as_points(points, ndim: int) -> np.ndarray:
    pts = np.asarray(points, dtype=float)
    if pts.size == 0:
        return np.zeros((0, ndim))
    if pts.ndim == 1:
        pts = pts[:, None] if ndim == 1 else pts.reshape(1, -1)
    if pts.shape[1] != ndim:
        raise ValidationError(f"points must have {ndim} coordinates, got shape {pts.shape}")
    if not np.all(np.isfinite(pts)):
        raise ValidationError("points must be finite")
    return pts


def _clamp_points(grid: Grid, pts: np.ndarray) -> np.ndarray:
    lo = np.asarray(grid.origin)
    return np.clip(pts, lo, lo + np.asarray(grid.extent))


def interp_scalar(field: ScalarField, points) -> np.ndarray:
    """Multilinear interpolation of ``field`` at physical ``points`` (shape ``(m, ndim)``)."""
    grid = field.grid
    pts = _as_points(points, grid.ndim)
    if len(pts) == 0:
        return np.zeros(0)
    if not grid.periodic:
        pts = _clamp_points(grid, pts)
    return multilinear(field.values[None], grid._to_index(pts), grid.periodic)[0]


def warp_values(stack: np.ndarray, grid: Grid, disp: np.ndarray) -> np.ndarray:
    """Sample ``stack`` at ``x + disp(x)`` for every node ``x``.

    ``stack`` is ``(c, *dims)`` or ``dims``-shaped; the output matches.
    """
    scalar = stack.ndim == grid.ndim
    s = stack[None] if scalar else stack
    h = np.reshape(grid.spacing, (-1,) + (1,) * grid.ndim)
    out = multilinear(s, grid.index_coords + disp / h, grid.periodic)
    return out[0] if scalar else out


def warp_scalar(field: ScalarField, phi: DiffeoMap) -> ScalarField:
    """The composition ``field o phi`` sampled on the grid."""
    field.grid.require_same(phi.grid, "field and map")
    return ScalarField(field.grid, warp_values(field.values, phi.grid, phi.displacement.values))


# ---------------------------------------------------------------------------
# discrete vector calculus


def _check_stencil(grid: Grid) -> None:
    if min(grid.dims) < 3:
        raise ValidationError(f"central differences need >= 3 nodes per axis, got {grid.dims}")


def partial(values: np.ndarray, grid: Grid, axis: int) -> np.ndarray:
    """Second-order derivative along grid ``axis``; leading batch axes are allowed."""
    h = grid.spacing[axis]
    ax = values.ndim - grid.ndim + axis
    if grid.periodic:
        return (np.roll(values, -1, axis=ax) - np.roll(values, 1, axis=ax)) / (2.0 * h)
    return np.gradient(values, h, axis=ax, edge_order=2)


def grad_values(values: np.ndarray, grid: Grid) -> np.ndarray:
    """Gradient, shape ``(d, *values.shape)``."""
    return np.stack([partial(values, grid, ax) for ax in range(grid.ndim)])


def div_values(values: np.ndarray, grid: Grid) -> np.ndarray:
    out = partial(values[0], grid, 0)
    for ax in range(1, grid.ndim):
        out = out + partial(values[ax], grid, ax)
    return out


def gradient(field: ScalarField) -> VectorField:
    _check_stencil(field.grid)
    return VectorField(field.grid, grad_values(field.values, field.grid))


def divergence(v: VectorField) -> ScalarField:
    _check_stencil(v.grid)
    return ScalarField(v.grid, div_values(v.values, v.grid))


def det_values(mat: np.ndarray) -> np.ndarray:
    """Determinant of a field of small matrices, ``mat`` shaped ``(d, d, ...)``."""
    d = mat.shape[0]
    if d == 1:
        return mat[0, 0].copy()
    if d == 2:
        return mat[0, 0] * mat[1, 1] - mat[0, 1] * mat[1, 0]
    return (
        mat[0, 0] * (mat[1, 1] * mat[2, 2] - mat[1, 2] * mat[2, 1])
        - mat[0, 1] * (mat[1, 0] * mat[2, 2] - mat[1, 2] * mat[2, 0])
        + mat[0, 2] * (mat[1, 0] * mat[2, 1] - mat[1, 1] * mat[2, 0])
    )


def jacobian_matrix(disp: np.ndarray, grid: Grid) -> np.ndarray:
    """``I + D(disp)`` by central differences, shape ``(d, d, *dims)``; row = component."""
    d = grid.ndim
    mat = np.empty((d, d) + grid.dims)
    for i in range(d):
        for j in range(d):
            mat[i, j] = partial(disp[i], grid, j)
        mat[i, i] += 1.0
    return mat


def jacobian_det(phi: DiffeoMap) -> JacobianField:
    """Finite-difference Jacobian determinant of ``x + displacement(x)``.

    Folds are reported through ``JacobianField.folds`` rather than raised.
    """
    _check_stencil(phi.grid)
    det = det_values(jacobian_matrix(phi.displacement.values, phi.grid))
    return JacobianField(phi.grid, det, folds=int(np.count_nonzero(det <= 0)))


# ---------------------------------------------------------------------------
# maps acting on maps and densities


def compose(outer: DiffeoMap, inner: DiffeoMap, direction: Optional[str] = None) -> DiffeoMap:
    """``outer o inner``: the result sends ``x`` to ``outer(inner(x))``.

    The outer displacement is interpolated at ``inner(x)``.  The Jacobian of the
    result is not computed.
    """
    outer.grid.require_same(inner.grid, "composed maps")
    grid = outer.grid
    d_in = inner.displacement.values
    d_out = warp_values(outer.displacement.values, grid, d_in)
    return DiffeoMap(grid, VectorField(grid, d_in + d_out), None, direction or outer.direction)


def pushforward_alpha(rho: Density, phi_inv: DiffeoMap, alpha: float = 1.0) -> Density:
    """The alpha-action ``|D phi^-1|^alpha * rho o phi^-1``.

    ``phi_inv`` is the inverse map and must carry its Jacobian determinant.
    """
    if phi_inv.jac_det is None:
        raise ValidationError("pushforward_alpha needs phi_inv with a tracked jac_det")
    if not alpha > 0:
        raise ValidationError(f"alpha must be > 0, got {alpha}")
    rho.grid.require_same(phi_inv.grid, "density and map")
    warped = warp_values(rho.values, phi_inv.grid, phi_inv.displacement.values)
    jac = phi_inv.jac_det.values
    factor = jac if alpha == 1 else jac**alpha
    return Density(ScalarField(rho.grid, factor * warped))
