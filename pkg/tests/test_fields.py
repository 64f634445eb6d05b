import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from densreg import (
    CLAMPED,
    PERIODIC,
    Density,
    DiffeoMap,
    Grid,
    ScalarField,
    ValidationError,
    VectorField,
    compose,
    divergence,
    gradient,
    interp_scalar,
    jacobian_det,
    pushforward_alpha,
)
from densreg.geometry import p_mass
from densreg.spectral import laplacian_values
from densreg.synth import make_density, make_diffeo, torus_grid


def line_grid(n=64):
    return Grid((n, 4), (2 * math.pi / n, 1.0), (0.0, 0.0), PERIODIC)


# --- grid and containers ----------------------------------------------------


def test_grid_rejects_bad_shapes():
    with pytest.raises(ValidationError):
        Grid((1, 4), (1.0, 1.0))
    with pytest.raises(ValidationError):
        Grid((4, 4), (1.0, -1.0))
    with pytest.raises(ValidationError):
        Grid((4, 4, 4, 4), 1.0)
    with pytest.raises(ValidationError):
        Grid((4, 4), 1.0, bc="reflect")


def test_clamped_weights_are_trapezoid(unit_box):
    w = unit_box.weights / unit_box.cell_volume
    assert w[0, 0] == 0.25 and w[0, 5] == 0.5 and w[5, 5] == 1.0
    assert unit_box.integrate(np.ones(unit_box.dims)) == pytest.approx(1.0, rel=1e-14)


def test_scalar_field_validates(unit_torus):
    with pytest.raises(ValidationError):
        ScalarField(unit_torus, np.zeros((3, 3)))
    bad = np.zeros(unit_torus.dims)
    bad[0, 0] = np.nan
    with pytest.raises(ValidationError):
        ScalarField(unit_torus, bad)


def test_density_floor_clamps(unit_torus):
    rho = Density.from_values(unit_torus, np.zeros(unit_torus.dims), floor=1e-3)
    assert rho.positive
    assert rho.total_mass == pytest.approx(1e-3)


# --- interpolation ----------------------------------------------------------


def test_interp_constant(unit_torus, rng):
    f = ScalarField(unit_torus, np.full(unit_torus.dims, 3.25))
    pts = rng.uniform(-2, 2, size=(100, 2))
    np.testing.assert_allclose(interp_scalar(f, pts), 3.25, rtol=1e-15)


def test_interp_affine_clamped(unit_box, rng):
    x, y = unit_box.node_coords()
    f = ScalarField(unit_box, 2.0 * x - 0.5 * y + 0.3)
    pts = rng.uniform(0.0, 1.0, size=(200, 2))
    expect = 2.0 * pts[:, 0] - 0.5 * pts[:, 1] + 0.3
    np.testing.assert_allclose(interp_scalar(f, pts), expect, atol=1e-13)


def test_interp_periodic_wrap():
    g = line_grid()
    x, _ = g.node_coords()
    f = ScalarField(g, np.sin(x))
    q = np.array([[0.37, 1.5], [2.9, 0.25]])
    shifted = q + np.array([2 * math.pi, 0.0])
    np.testing.assert_allclose(interp_scalar(f, shifted), interp_scalar(f, q), atol=1e-12)


def test_interp_exact_at_nodes(unit_torus, rng):
    vals = rng.standard_normal(unit_torus.dims)
    f = ScalarField(unit_torus, vals)
    pts = unit_torus.node_coords().reshape(2, -1).T
    np.testing.assert_array_equal(interp_scalar(f, pts), vals.ravel())


def test_interp_errors_and_empty(unit_torus):
    f = ScalarField(unit_torus, np.ones(unit_torus.dims))
    assert interp_scalar(f, np.zeros((0, 2))).shape == (0,)
    with pytest.raises(ValidationError):
        interp_scalar(f, [[np.inf, 0.0]])


@settings(max_examples=40, deadline=None)
@given(
    coef=st.lists(st.floats(-5, 5), min_size=4, max_size=4),
    px=st.floats(0.0, 1.0),
    py=st.floats(0.0, 1.0),
)
def test_interp_reproduces_bilinear(coef, px, py):
    g = Grid((9, 9), (0.125, 0.125), (0.0, 0.0), CLAMPED)
    a, b, c, d = coef
    x, y = g.node_coords()
    f = ScalarField(g, a + b * x + c * y + d * x * y)
    got = interp_scalar(f, [[px, py]])[0]
    assert got == pytest.approx(a + b * px + c * py + d * px * py, abs=1e-12)


# --- gradient and divergence ------------------------------------------------


def test_gradient_constant_is_zero(unit_torus):
    grad = gradient(ScalarField(unit_torus, np.full(unit_torus.dims, 7.0)))
    assert np.all(grad.values == 0)


def test_gradient_of_sine():
    g = line_grid()
    x, _ = g.node_coords()
    grad = gradient(ScalarField(g, np.sin(x)))
    assert np.max(np.abs(grad.values[0] - np.cos(x))) <= 4e-3
    assert np.max(np.abs(grad.values[1])) == 0


def test_gradient_affine_clamped_exact(unit_box):
    x, y = unit_box.node_coords()
    grad = gradient(ScalarField(unit_box, 3.0 * x - 2.0 * y))
    np.testing.assert_allclose(grad.values[0], 3.0, atol=1e-12)
    np.testing.assert_allclose(grad.values[1], -2.0, atol=1e-12)


def test_gradient_second_order_convergence():
    errs = []
    for n in (32, 64, 128):
        g = line_grid(n)
        x, _ = g.node_coords()
        grad = gradient(ScalarField(g, np.sin(x)))
        errs.append(np.max(np.abs(grad.values[0] - np.cos(x))))
    orders = np.log2(np.array(errs[:-1]) / np.array(errs[1:]))
    assert np.all(orders > 1.9)


def test_divergence_examples(unit_torus):
    assert np.all(divergence(VectorField(unit_torus, np.ones((2,) + unit_torus.dims))).values == 0)
    g = line_grid()
    x, _ = g.node_coords()
    v = np.stack([np.sin(x), np.zeros_like(x)])
    assert np.max(np.abs(divergence(VectorField(g, v)).values - np.cos(x))) <= 4e-3


def test_div_grad_matches_spectral_laplacian():
    g = torus_grid(64)
    x, y = g.node_coords()
    f = np.sin(x) * np.cos(2 * y) + 0.5 * np.cos(x + y)
    dg = divergence(gradient(ScalarField(g, f))).values
    lap = laplacian_values(f, g)
    assert np.max(np.abs(dg - lap)) <= 1e-2 * np.max(np.abs(lap))


def test_stencil_needs_three_nodes():
    g = Grid((2, 8), (1.0, 1.0))
    with pytest.raises(ValidationError):
        gradient(ScalarField(g, np.zeros(g.dims)))


# --- Jacobian determinant ---------------------------------------------------


def test_jacobian_identity(unit_torus):
    jac = jacobian_det(DiffeoMap.identity(unit_torus))
    assert np.all(jac.values == 1.0) and not jac.folded


def test_jacobian_linear_scaling(unit_box):
    s = 1.3
    x = unit_box.node_coords()
    jac = jacobian_det(DiffeoMap.from_displacement(unit_box, (s - 1.0) * x))
    np.testing.assert_allclose(jac.values[1:-1, 1:-1], s**2, rtol=1e-13)


def test_jacobian_shear(unit_box):
    _, y = unit_box.node_coords()
    disp = np.stack([0.4 * y, np.zeros_like(y)])
    jac = jacobian_det(DiffeoMap.from_displacement(unit_box, disp))
    np.testing.assert_allclose(jac.values, 1.0, atol=1e-13)


def test_jacobian_translation_invariant():
    g = torus_grid(48)
    phi = make_diffeo("radial-bump", g, {"amplitude": 0.4, "width": 0.7})
    moved = DiffeoMap(g, VectorField(g, phi.displacement.values + np.array([0.3, -1.1])[:, None, None]))
    np.testing.assert_allclose(jacobian_det(moved).values, jacobian_det(phi).values, atol=1e-13)


def test_jacobian_flags_folds(unit_box):
    x = unit_box.node_coords()
    disp = np.stack([-2.0 * x[0], np.zeros_like(x[1])])
    jac = jacobian_det(DiffeoMap.from_displacement(unit_box, disp))
    assert jac.folded and jac.folds == unit_box.size


# --- composition ------------------------------------------------------------


def test_compose_with_identity_is_bitwise():
    g = torus_grid(32)
    phi = make_diffeo("swirl", g, {"amplitude": 0.6, "width": 0.8})
    out = compose(phi, DiffeoMap.identity(g))
    np.testing.assert_array_equal(out.displacement.values, phi.displacement.values)
    assert out.jac_det is None


def test_compose_translations():
    g = torus_grid(32)
    a, b = np.array([0.7, -0.2]), np.array([1.1, 0.45])
    ta = make_diffeo("translation", g, {"shift": a.tolist()})
    tb = make_diffeo("translation", g, {"shift": b.tolist()})
    out = compose(tb, ta)
    np.testing.assert_allclose(out.displacement.values, np.broadcast_to((a + b)[:, None, None], (2, 32, 32)), atol=1e-12)


def test_compose_grid_mismatch():
    with pytest.raises(ValidationError):
        compose(DiffeoMap.identity(torus_grid(16)), DiffeoMap.identity(torus_grid(32)))


def _flow_points(pts, vel, t_total, steps):
    """RK4 on a stationary closed-form velocity."""
    h = t_total / steps
    p = pts.copy()
    for _ in range(steps):
        k1 = vel(p)
        k2 = vel(p + 0.5 * h * k1)
        k3 = vel(p + 0.5 * h * k2)
        k4 = vel(p + h * k3)
        p = p + h / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
    return p


def test_compose_inverse_pair():
    g = torus_grid(64)

    def vel(p):
        x, y = p
        return np.stack([0.3 * np.sin(y) + 0.2 * np.cos(x), 0.25 * np.sin(x + y)])

    x = g.node_coords()
    fwd = DiffeoMap(g, VectorField(g, _flow_points(x, vel, 1.0, 40) - x))
    bwd = DiffeoMap(g, VectorField(g, _flow_points(x, vel, -1.0, 40) - x))
    for a, b in ((fwd, bwd), (bwd, fwd)):
        err = compose(a, b).displacement.values
        assert np.max(np.abs(err)) <= 2 * max(g.spacing)


def test_map_call_matches_grid_positions():
    g = torus_grid(32)
    phi = make_diffeo("radial-bump", g, {"amplitude": 0.5, "width": 0.9})
    nodes = g.node_coords().reshape(2, -1).T
    np.testing.assert_allclose(phi(nodes), phi.positions().reshape(2, -1).T, atol=1e-14)


# --- pushforward ------------------------------------------------------------


def test_pushforward_identity():
    g = torus_grid(32)
    rho = make_density("gauss-bump", g, {"width": 0.5, "background": 0.2})
    out = pushforward_alpha(rho, DiffeoMap.identity(g), 0.7)
    np.testing.assert_array_equal(out.values, rho.values)


def test_pushforward_constant_compression():
    g = torus_grid(16)
    c, alpha = 0.8, 0.6
    phi_inv = DiffeoMap(g, VectorField.zeros(g), ScalarField(g, np.full(g.dims, c)))
    rho = Density.from_values(g, np.ones(g.dims))
    np.testing.assert_allclose(pushforward_alpha(rho, phi_inv, alpha).values, c**alpha, rtol=1e-15)


def test_pushforward_requires_jacobian():
    g = torus_grid(16)
    rho = Density.from_values(g, np.ones(g.dims))
    with pytest.raises(ValidationError):
        pushforward_alpha(rho, DiffeoMap(g, VectorField.zeros(g)), 1.0)
    with pytest.raises(ValidationError):
        pushforward_alpha(rho, DiffeoMap.identity(g), 0.0)


@pytest.mark.parametrize("alpha", [0.5, 0.75, 1.0])
def test_pushforward_conserves_inverse_alpha_mass(alpha):
    g = torus_grid(128)
    rho = make_density("gauss-bump", g, {"width": 0.6, "background": 0.3, "amplitude": 2.0})
    phi_inv = make_diffeo("radial-bump", g, {"amplitude": 0.4, "width": 0.8, "center": [0.3, -0.2]}, "inverse")
    out = pushforward_alpha(rho, phi_inv, alpha)
    before, after = p_mass(rho, 1 / alpha), p_mass(out, 1 / alpha)
    assert abs(after - before) <= 5e-3 * before
