"""Weil-Petersson form from period data and the Hodge-metric curvature identity."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .grid import HermitianField, ScalarField, gradient_array, hessian_array

# int_{fundamental domain} i dz ^ dzbar = HODGE_CONSTANT * Im tau
HODGE_CONSTANT = 2.0


def log_hessian_array(y: np.ndarray, grid) -> np.ndarray:
    """``d_s d_sbar log y`` as ``(d dbar y) / y - |d_s y|^2 / y^2``.

    The quotient form is exactly homogeneous of degree zero under scalings
    of ``y`` by powers of two.
    """
    (ys,) = gradient_array(y, grid)
    hy = hessian_array(y, grid)[0]
    return hy / y - (ys.real**2 + ys.imag**2) / y**2


def wp_form(y_tau: ScalarField) -> HermitianField:
    """``omega_WP = -i d dbar log y_tau``; density against ``dx ^ dy`` is
    ``-Lap(log y_tau) / 2``."""
    y = y_tau.values
    if not np.all(y > 0):
        raise ValueError("y_tau must be positive")
    return HermitianField(y_tau.grid, -log_hessian_array(y, y_tau.grid)[None])


@dataclass
class HodgeMetricSample:
    """Norms of ``dz`` under the Weil-Petersson and canonical Hodge metrics.

    ``hwp = int dz ^ dzbar`` over the fiber and ``hcan = hwp / int omega_SF``.
    ``y`` is the shared discrete period field both curvatures derive from.
    """

    y: ScalarField
    hwp: np.ndarray
    hcan: np.ndarray
    area: float
    convention: float = HODGE_CONSTANT
    exact_wp: Optional[np.ndarray] = None

    @property
    def ratio(self) -> np.ndarray:
        return self.hwp / self.hcan


def hcan_norm(config, fiber_res=(16, 16)) -> HodgeMetricSample:
    """``|dz|^2`` for ``h_WP`` and ``h_can`` by fiber quadrature."""
    from .semiflat import fiber_area_quadrature, semiflat_form

    sf = semiflat_form(config)
    m1, m2 = fiber_res
    y = config.y.values
    # i dz ^ dzbar = 2 dx dy on a fundamental domain of area y
    hwp = np.broadcast_to((HODGE_CONSTANT * y)[..., None, None], y.shape + (m1, m2)).mean(axis=(2, 3))
    hcan = hwp / fiber_area_quadrature(sf, fiber_res)
    return HodgeMetricSample(config.y, hwp, hcan, float(config.area))


def hcan_curvature(sample: HodgeMetricSample) -> np.ndarray:
    """``Ric(h_can) = -i d dbar log |dz|^2_{h_can}``.

    ``|dz|^2_{h_can}`` is ``(2/A) y_tau`` with a base-constant factor; the
    factor is checked to be constant and its Hessian is zero, so the
    curvature is taken from the shared ``log y_tau``.
    """
    y = sample.y.values
    factor = sample.hcan / y
    spread = np.ptp(factor) / np.max(np.abs(factor))
    if spread > 1e-10:
        raise ValueError(f"h_can / y_tau is not base-constant (relative spread {spread:.3g})")
    return -log_hessian_array(y, sample.y.grid)


def hcan_curvature_check(sample: HodgeMetricSample, wp: Optional[HermitianField] = None,
                         margin: int = 3) -> float:
    """Sup-norm of ``Ric(h_can) - omega_WP``.

    ``wp`` defaults to :func:`wp_form` of the sample's period field, or to
    ``sample.exact_wp`` when that closed form is attached.  Annulus charts
    drop ``margin`` rows at each radial boundary.
    """
    grid = sample.y.grid
    ric = hcan_curvature(sample)
    if wp is not None:
        ref = wp.gss
    elif sample.exact_wp is not None:
        ref = sample.exact_wp
    else:
        ref = wp_form(sample.y).gss
    diff = np.abs(ric - ref)
    if grid.chart == "annulus":
        diff = diff[margin:grid.n1 - margin]
    return float(np.max(diff))


def ib_exact_wp(grid, b: int = 1) -> np.ndarray:
    """Closed-form ``g_ss`` of ``omega_WP`` for ``y = -(b/2pi) log|s|``:
    ``1 / (4 |s|^2 log^2 |s|)``, independent of ``b``."""
    r = grid.radius()
    return 1.0 / (4 * r**2 * np.log(r) ** 2)


def exact_wp(model, grid) -> np.ndarray:
    """Closed-form ``g_ss`` of ``omega_WP`` for a Kodaira model on an annulus.

    Log-type periods give ``1 / (4 |s|^2 log^2 |s|)``.  For
    ``y = Im f(s)`` with ``f = tau0 + c s^k`` holomorphic, ``log y`` has
    ``d dbar log y = -|f'|^2 / (4 y^2)``.
    """
    from .fibration import _BOUNDED_TABLE

    if model.has_log:
        return ib_exact_wp(grid)
    s = grid.points()
    c = complex(model.c)
    if model.kind == "mI0":
        tau0, k = complex(model.tau0), model.h
    else:
        tau0, k, _ = _BOUNDED_TABLE[model.kind]
        if model.kind == "I0*":
            tau0 = complex(model.tau0)
    f = tau0 + c * s**k
    fp = c * k * s ** (k - 1)
    return np.abs(fp) ** 2 / (4 * f.imag**2)
