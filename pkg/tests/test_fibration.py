from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from krflow.fibration import (BOUNDED_TYPES, FibrationConfig, KodairaModel, consistent_density,
                              cutoff, delta_invariant, model_density, period_field,
                              section_field, smoothed_point_mass, synthetic_period)
from krflow.grid import BaseGrid, ScalarField, base_form, hessian_array, integrate_array
from krflow.weil_petersson import wp_form


def test_model_validation():
    with pytest.raises(ValueError):
        KodairaModel("I5")
    with pytest.raises(ValueError):
        KodairaModel("Ib", b=0)
    with pytest.raises(ValueError):
        KodairaModel("mI0", m=2, tau0=-1j)
    assert KodairaModel("mI0", m=3).expected_exponent == pytest.approx(-4.0 / 3.0)
    assert KodairaModel("Ib", b=2).expected_exponent == 0.0
    assert KodairaModel("mIb", m=2, b=1).has_log


def test_period_fields():
    g = BaseGrid("annulus", 16, 16, -2.0, -0.1)
    y, tag = period_field(KodairaModel("Ib", b=3), g)
    assert np.allclose(y.values, -(3 / (2 * np.pi)) * np.log(g.radius()))
    assert tag == "unipotent T^3"
    # mIb with b on the m-fold cover and Ib* on the double cover share the Ib profile scale
    ym, _ = period_field(KodairaModel("mIb", m=2, b=1), g)
    assert np.allclose(ym.values, -(1 / (2 * np.pi)) * np.log(g.radius()))
    ys, tag = period_field(KodairaModel("IbStar", b=1), g)
    assert np.allclose(ys.values, ym.values) and tag == "-T^1"
    for kind in BOUNDED_TYPES:
        yb, _ = period_field(KodairaModel(kind, c=0.1), g)
        assert np.all(yb.values > 0)
    with pytest.raises(ValueError):
        period_field(KodairaModel("Ib", b=1), BaseGrid("annulus", 16, 16, -1.0, 0.0))
    with pytest.raises(ValueError):
        period_field(KodairaModel("Ib", b=1), BaseGrid("torus", 16, 16))


def test_delta_invariant():
    assert delta_invariant(2, 0, []) == (Fraction(0), False)
    assert delta_invariant(0, 0, [2, 3, 7]) == (Fraction(1, 42), True)
    assert delta_invariant(1, 1, [2]) == (Fraction(3, 2), True)
    with pytest.raises(ValueError):
        delta_invariant(0, 0, [0])


@settings(max_examples=60, deadline=None)
@given(st.floats(0, 3), st.floats(0, 3))
def test_cutoff_monotone_and_bounded(a, b):
    lo, hi = sorted((a, b))
    assert cutoff(lo) <= cutoff(hi) + 1e-15
    assert 0 <= cutoff(hi) <= 1
    if hi <= 0.5:
        assert cutoff(hi) == pytest.approx(hi)
    if lo >= 1.5:
        assert cutoff(lo) == 1.0


def test_section_field():
    g = BaseGrid("torus", 32, 32)
    sec = section_field([0.5 + 0.5j], g, 0.3)
    v = sec.values.values
    assert v[16, 16] == pytest.approx(np.finfo(float).tiny)
    assert v.max() == 1.0 and np.all(v > 0)
    ann = section_field([0j], BaseGrid("annulus", 16, 16, -1.0, 0.0), 0.3)
    assert np.all(ann.values.values <= 1.0)
    with pytest.raises(ValueError):
        section_field([1.5 + 0j], g, 0.3)


def test_point_mass_is_normalized():
    g = BaseGrid("torus", 64, 64)
    assert integrate_array(smoothed_point_mass(g, 0.25 + 0.75j, 0.03), g) == pytest.approx(1.0)


def test_consistent_density_solves_its_equation():
    # 128^2 resolves the smoothed divisor, so no Nyquist content is lost
    g = BaseGrid("torus", 128, 128)
    y = synthetic_period(g)
    cfg = FibrationConfig(g, y, 1.0, base_form(g, 1.0), multiple_fibers=((0.5 + 0.5j, 2),),
                          synthetic=True)
    wp = wp_form(y)
    F = consistent_density(cfg, wp)
    assert F.consistent and F.chi_scale > 0
    lam = F.chi.gss
    divisor = 2 * np.pi * 0.5 * smoothed_point_mass(g, 0.5 + 0.5j, cfg.eps_h / 14) / 2
    lhs = hessian_array(np.log(F.values), g)[0]
    assert np.max(np.abs(lhs - (lam - wp.gss - divisor))) <= 1e-8
    assert integrate_array(F.values * lam, g) == pytest.approx(integrate_array(lam, g))


def test_consistent_density_without_multiple_fibers_is_flagged():
    g = BaseGrid("torus", 32, 32)
    y = synthetic_period(g)
    cfg = FibrationConfig(g, y, 1.0, base_form(g, 1.0), synthetic=True)
    assert not consistent_density(cfg, wp_form(y)).consistent


def test_annulus_consistent_density_closed_form():
    errs, mid = [], []
    for n in (32, 64, 128):
        g = BaseGrid("annulus", n, 16, -1.5, -0.2)
        y, _ = period_field(KodairaModel("Ib", b=1), g)
        cfg = FibrationConfig(g, y, 1.0, base_form(g, 1.0))
        wp = wp_form(y)
        F = consistent_density(cfg, wp)
        lhs = hessian_array(np.log(F.values), g)[0]
        err = np.abs(lhs - (1.0 - wp.gss))
        errs.append(np.max(err[3:-3]))
        mid.append(np.max(err[n // 2]))
    # fourth order in the interior; one-sided boundary rows converge more slowly
    assert mid[1] <= mid[0] / 12 and mid[2] <= mid[1] / 12
    assert errs[1] <= errs[0] / 4 and errs[2] <= errs[1] / 4
    with pytest.raises(ValueError):
        consistent_density(cfg, wp_form(ScalarField(g, y.values + 1.0)))


def test_model_density_reduces_to_period():
    g = BaseGrid("annulus", 32, 16, -3.0, -0.1)
    model = KodairaModel("mI0", m=1, c=0.3)
    F = model_density(model, g, smooth=(0.0, 0.0))
    y, _ = period_field(model, g)
    assert np.allclose(F.values, y.values, rtol=1e-13)
    refined = F.builder(1)
    assert refined.grid.rho_min == pytest.approx(-3.0 - np.log(2.0))


def test_fibration_config_validation():
    g = BaseGrid("torus", 16, 16)
    y = ScalarField(g, np.ones(g.shape))
    with pytest.raises(ValueError):
        FibrationConfig(g, ScalarField(g, -np.ones(g.shape)), 1.0, base_form(g, 1.0))
    with pytest.raises(ValueError):
        FibrationConfig(g, y, 0.0, base_form(g, 1.0))
    with pytest.raises(ValueError):
        FibrationConfig(g, y, 1.0, base_form(g, 1.0), multiple_fibers=((0.5j, 0),))
