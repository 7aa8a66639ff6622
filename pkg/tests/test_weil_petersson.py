import numpy as np
import pytest

from krflow.fibration import FibrationConfig, KodairaModel, period_field, synthetic_period
from krflow.grid import BaseGrid, ScalarField, base_form
from krflow.weil_petersson import (HODGE_CONSTANT, HodgeMetricSample, exact_wp,
                                   hcan_curvature_check, hcan_norm, ib_exact_wp, wp_form)


def test_wp_form_matches_closed_form_on_torus():
    g = BaseGrid("torus", 32, 32)
    x1, _ = g.mesh()
    y = 2 + 0.3 * np.cos(2 * np.pi * x1)
    y1 = -0.6 * np.pi * np.sin(2 * np.pi * x1)
    y11 = -1.2 * np.pi**2 * np.cos(2 * np.pi * x1)
    # -d_s d_sbar log y = -(log y)'' / 4 for a function of x1 only
    expected = -(y11 / y - y1**2 / y**2) / 4
    assert np.max(np.abs(wp_form(ScalarField(g, y)).gss - expected)) <= 1e-11


def test_wp_form_is_scale_invariant():
    g = BaseGrid("torus", 16, 16)
    y = synthetic_period(g).values
    a = wp_form(ScalarField(g, y)).gss
    assert np.array_equal(a, wp_form(ScalarField(g, 4.0 * y)).gss)
    with pytest.raises(ValueError):
        wp_form(ScalarField(g, y - 2.0))


def test_log_models_match_closed_form():
    g = BaseGrid("annulus", 64, 16, -2.0, -0.3)
    for model in (KodairaModel("Ib", b=1), KodairaModel("Ib", b=4)):
        y, _ = period_field(model, g)
        diff = np.abs(wp_form(y).gss - exact_wp(model, g))[3:-3]
        assert np.max(diff) <= 1e-9
    assert np.array_equal(ib_exact_wp(g, 1), ib_exact_wp(g, 3))


def test_holomorphic_period_converges_to_closed_form():
    model = KodairaModel("II", c=0.3)
    errs = []
    for n in (32, 64):
        g = BaseGrid("annulus", n, 32, -3.0, 0.0)
        y, _ = period_field(model, g)
        errs.append(np.max(np.abs(wp_form(y).gss - exact_wp(model, g))[3:-3]))
    assert errs[1] <= errs[0] / 8


def test_hodge_norms_ratio_is_area():
    g = BaseGrid("torus", 16, 16)
    y = synthetic_period(g)
    sample = hcan_norm(FibrationConfig(g, y, 1.7, base_form(g, 1.0), synthetic=True), (8, 8))
    assert np.allclose(sample.ratio, 1.7)
    assert np.allclose(sample.hwp, HODGE_CONSTANT * y.values)
    assert hcan_curvature_check(sample) == 0.0


def test_hcan_curvature_rejects_nonconstant_factor():
    g = BaseGrid("torus", 16, 16)
    y = synthetic_period(g)
    bad = HodgeMetricSample(y, 2 * y.values, y.values**2, 1.0)
    with pytest.raises(ValueError, match="base-constant"):
        hcan_curvature_check(bad)
