import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from densreg import PERIODIC, Grid, ScalarField, ValidationError
from densreg.alpha import SubjectSeries, alpha_grid, fit_alpha, log_mass_volume, regress_slope
from densreg.synth import make_series


def scaled(series, c):
    return SubjectSeries([(ScalarField(v.grid, c * v.values), m) for v, m in series.samples], series.subject_id)


def test_regression_examples():
    v = np.array([0.1, 0.5, 0.9, 1.4])
    a, b, r2 = regress_slope(v, -v + 3)
    assert a == pytest.approx(-1, abs=1e-12) and b == pytest.approx(3, abs=1e-12) and r2 == pytest.approx(1, abs=1e-12)
    a, b, r2 = regress_slope([0.0, 2.0], [1.0, 5.0])
    assert (a, b, r2) == (2.0, 1.0, 1.0)
    assert regress_slope(v, np.full(4, 2.5))[0] == 0.0
    with pytest.raises(ValidationError):
        regress_slope([1.0, 1.0], [0.0, 1.0])


def test_constant_intensity_gives_flat_d():
    g1 = Grid((8, 8), (1.0, 1.0), None, PERIODIC)
    g2 = Grid((8, 8), (1.3, 1.3), None, PERIODIC)
    m1 = np.zeros(g1.dims, bool)
    m1[:4] = True
    m2 = np.zeros(g2.dims, bool)
    m2[:6] = True
    s = SubjectSeries([(ScalarField(g1, np.full(g1.dims, 2.5)), m1), (ScalarField(g2, np.full(g2.dims, 2.5)), m2)])
    v, d = log_mass_volume(s, 1.0)
    np.testing.assert_allclose(d, math.log(2.5), rtol=1e-14)
    assert regress_slope(v, d)[0] == pytest.approx(0.0, abs=1e-12)


@pytest.mark.parametrize("alpha_true", [0.5, 0.7, 1.0])
def test_constructed_slopes(alpha_true):
    s = make_series(2.0, [0.8, 1.1, 1.7, 2.4], alpha_true)
    v, d = log_mass_volume(s, alpha_true)
    assert regress_slope(v, d)[0] == pytest.approx(-1.0, abs=1e-12)
    # at alpha = 1 the slope is -1 / alpha_true
    v, d = log_mass_volume(s, 1.0)
    assert regress_slope(v, d)[0] == pytest.approx(-1.0 / alpha_true, abs=1e-12)


def test_fit_recovers_seventy_percent():
    s = make_series(2.0, [0.8, 1.1, 1.7, 2.4], 0.7)
    assert abs(fit_alpha([s], 0.3, 1.2, 0.01).alpha_star - 0.70) <= 0.01


def test_conserving_subject_gives_one():
    s = make_series(5.0, [1.0, 1.2, 1.9], 1.0)
    report = fit_alpha([s])
    assert report.alpha_star == pytest.approx(1.0, abs=1e-12)
    assert report.slope_mean_at_1 == pytest.approx(-1.0, abs=1e-12)


def test_objective_minimum_is_global():
    subjects = [make_series(2.0 + k, [0.9, 1.3 + 0.1 * k, 2.0], a) for k, a in enumerate((0.55, 0.62, 0.7))]
    report = fit_alpha(subjects, 0.4, 0.9, 0.01)
    best = report.objective[np.argmin(np.abs(report.alphas - report.alpha_star))]
    assert np.all(best <= report.objective)
    assert report.alphas[0] <= report.alpha_star <= report.alphas[-1]


def test_ties_go_to_smaller_alpha():
    # a subject with constant intensity has slope 0 for every alpha: a flat objective
    g = Grid((4, 4), (1.0, 1.0))
    m = np.ones(g.dims, bool)
    g2 = Grid((4, 4), (2.0, 2.0))
    s = SubjectSeries([(ScalarField(g, np.ones(g.dims)), m), (ScalarField(g2, np.ones(g2.dims)), m)])
    assert fit_alpha([s], 0.3, 0.6, 0.1).alpha_star == 0.3


@settings(max_examples=25, deadline=None)
@given(c=st.floats(1e-3, 1e3), alpha=st.floats(0.3, 1.2))
def test_scale_covariance(c, alpha):
    s = make_series(2.0, [0.8, 1.3, 2.1], 0.6)
    v, d = log_mass_volume(s, alpha)
    v2, d2 = log_mass_volume(scaled(s, c), alpha)
    np.testing.assert_array_equal(v, v2)
    np.testing.assert_allclose(d2 - d, alpha * math.log(c), atol=1e-12)
    assert regress_slope(v2, d2)[0] == pytest.approx(regress_slope(v, d)[0], abs=1e-10)


def test_mask_additivity():
    g = Grid((8, 8), (1.0, 1.0))
    vol = ScalarField(g, np.full(g.dims, 3.0))
    a = np.zeros(g.dims, bool)
    a[:2] = True
    b = np.zeros(g.dims, bool)
    b[4:6] = True
    g2 = Grid((8, 8), (1.5, 1.5))
    other = (ScalarField(g2, np.full(g2.dims, 1.0)), a)
    d_single = log_mass_volume(SubjectSeries([(vol, a), other]), 0.8)[1][0]
    d_merged = log_mass_volume(SubjectSeries([(vol, a | b), other]), 0.8)[1][0]
    assert d_merged == pytest.approx(d_single, abs=1e-14)


def test_degenerate_subject_is_excluded():
    good = make_series(2.0, [0.8, 1.4, 2.0], 0.7, subject_id="good")
    g = Grid((4, 4), (1.0, 1.0))
    m = np.ones(g.dims, bool)
    flat = SubjectSeries([(ScalarField(g, np.ones(g.dims)), m), (ScalarField(g, 2 * np.ones(g.dims)), m)], "flat")
    with pytest.warns(RuntimeWarning):
        report = fit_alpha([good, flat])
    assert report.excluded == ["flat"]
    assert len(report.warnings) == 1
    assert [s.subject_id for s in report.subjects] == ["good"]


def test_grid_and_input_validation():
    assert alpha_grid(0.3, 1.2, 0.005).size == 181
    with pytest.raises(ValidationError):
        alpha_grid(0.0, 1.0, 0.1)
    with pytest.raises(ValidationError):
        fit_alpha([])
    g = Grid((4, 4), (1.0, 1.0))
    with pytest.raises(ValidationError):
        SubjectSeries([(ScalarField(g, np.ones(g.dims)), np.zeros(g.dims, bool))] * 2)


def test_report_dict_roundtrip():
    s = make_series(2.0, [0.8, 1.4, 2.0], 0.7, subject_id="s1")
    d = fit_alpha([s]).to_dict()
    assert d["subjects"][0]["id"] == "s1"
    assert d["grid"]["count"] == 181
