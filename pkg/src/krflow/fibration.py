"""Model elliptic fibrations: period data, sections, and consistent densities."""

from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from .grid import (WEDGE_JACOBIAN, BaseGrid, HermitianField, ScalarField, base_form,
                   hessian_array, integrate_array, poisson_solve)
from .semiflat import DensityField

BOUNDED_TYPES = ("I0*", "II", "III", "IV", "IV*", "III*", "II*")
MODEL_KINDS = ("mI0", "Ib", "mIb", "IbStar") + BOUNDED_TYPES

_RHO = np.exp(1j * np.pi / 3)
# elliptic point of the period and the power of s in the bounded profile
_BOUNDED_TABLE = {
    "I0*": (1j, 1, "order 2"),
    "II": (_RHO, 1, "order 6"),
    "III": (1j, 1, "order 4"),
    "IV": (_RHO, 2, "order 3"),
    "IV*": (_RHO, 1, "order 3"),
    "III*": (1j, 2, "order 4"),
    "II*": (_RHO, 2, "order 6"),
}


@dataclass(frozen=True)
class KodairaModel:
    """Local model of a singular fiber.

    ``mI0`` uses ``tau = tau0 + c w^(m h)`` with ``w^m = s``; ``Ib`` and
    ``mIb`` have ``tau = (b / 2 pi i) log s`` on the appropriate cover;
    ``IbStar`` is the quotient of the ``I_2b`` model by ``w -> -w``.
    """

    kind: str
    m: int = 1
    b: int = 0
    h: int = 1
    tau0: complex = 1j
    c: complex = 0.1

    def __post_init__(self):
        if self.kind not in MODEL_KINDS:
            raise ValueError(f"unknown Kodaira model {self.kind!r}")
        if self.m < 1 or self.h < 1:
            raise ValueError("m and h must be >= 1")
        if self.kind in ("Ib", "mIb", "IbStar") and self.b < 1:
            raise ValueError("b must be >= 1 for Ib-type models")
        if complex(self.tau0).imag <= 0:
            raise ValueError("Im tau0 must be positive")
        if not np.isfinite(complex(self.c)):
            raise ValueError("c must be finite")

    @property
    def multiplicity(self) -> int:
        return self.m if self.kind in ("mI0", "mIb") else 1

    @property
    def has_log(self) -> bool:
        return self.kind in ("Ib", "mIb", "IbStar")

    @property
    def expected_exponent(self) -> float:
        m = self.multiplicity
        return -2.0 * (m - 1) / m


@dataclass
class DivisorSection:
    points: tuple
    eps: float
    values: ScalarField


@dataclass
class FibrationConfig:
    """Model geometry over a base grid."""

    grid: BaseGrid
    y: ScalarField
    area: float
    chi: HermitianField
    monodromy: str = "trivial"
    multiple_fibers: tuple = ()
    eps_h: float = 0.3
    synthetic: bool = False
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if not np.all(self.y.values > 0):
            raise ValueError("y_tau must be positive at every grid point")
        if not self.area > 0:
            raise ValueError("fiber area must be positive")
        if not integrate_array(self.chi.gss, self.grid) > 0:
            raise ValueError("chi must have positive integral")
        for s, m in self.multiple_fibers:
            if m < 1:
                raise ValueError("multiplicities must be >= 1")
            _check_on_chart(complex(s), self.grid)


def _check_on_chart(s: complex, grid: BaseGrid):
    if grid.chart == "torus":
        if not (0 <= s.real < 1 and 0 <= s.imag < 1):
            raise ValueError(f"marked point {s} lies outside the torus chart [0,1)^2")
    elif abs(s) != 0:
        raise ValueError(f"annulus charts only carry the marked point s = 0, got {s}")


# ----------------------------------------------------------------------------
# period data


def period_field(model: KodairaModel, grid: BaseGrid):
    """Sample ``Im tau`` for ``model``; returns ``(y_tau, monodromy tag)``."""
    if grid.chart == "torus":
        if model.kind in ("Ib", "mIb", "IbStar") or complex(model.c) != 0:
            raise ValueError("torus charts only carry constant period models")
        y = np.full(grid.shape, complex(model.tau0).imag)
        return _checked(ScalarField(grid, y)), "trivial"
    s = grid.points()
    r = np.abs(s)
    k = model.kind
    if k in ("Ib", "mIb", "IbStar") and np.any(r >= 1):
        raise ValueError("Ib-type models need |s| < 1 at every grid point (Im tau <= 0)")
    if k == "mI0":
        y = (complex(model.tau0) + complex(model.c) * s**model.h).imag
        tag = "trivial" if model.m == 1 else f"order {model.m} on the base, trivial on the cover"
    elif k == "Ib":
        y = -(model.b / (2 * np.pi)) * np.log(r)
        tag = f"unipotent T^{model.b}"
    elif k == "mIb":
        # I_{mb} on the m-fold cover w^m = s
        w = r ** (1.0 / model.m)
        y = -(model.m * model.b / (2 * np.pi)) * np.log(w)
        tag = f"unipotent T^{model.b}"
    elif k == "IbStar":
        # I_{2b} on the double cover w^2 = s
        w = np.sqrt(r)
        y = -(2 * model.b / (2 * np.pi)) * np.log(w)
        tag = f"-T^{model.b}"
    else:
        tau0, power, tag = _BOUNDED_TABLE[k]
        if k == "I0*":
            tau0 = complex(model.tau0)
        y = (tau0 + complex(model.c) * s**power).imag
    return _checked(ScalarField(grid, y)), tag


def _checked(y: ScalarField) -> ScalarField:
    if not np.all(y.values > 0):
        raise ValueError("Im tau must be positive at every grid point")
    return y


def synthetic_period(grid: BaseGrid, amplitude=0.2, mode=(1, 0), mean=1.0) -> ScalarField:
    """Smooth non-holomorphic ``y_tau = mean + amplitude cos(2 pi k.x)`` on a torus."""
    if grid.chart != "torus":
        raise ValueError("synthetic periods are defined on torus charts")
    x1, x2 = grid.mesh()
    return _checked(ScalarField(grid, mean + amplitude * np.cos(2 * np.pi * (mode[0] * x1 + mode[1] * x2))))


# ----------------------------------------------------------------------------
# Kodaira dimension


def delta_invariant(chi_O: int, genus: int, multiplicities) -> tuple[Fraction, bool]:
    """``delta = chi(O) + 2g - 2 + sum(1 - 1/m_i)`` and the verdict ``delta > 0``."""
    if genus < 0:
        raise ValueError("genus must be >= 0")
    total = Fraction(chi_O) + 2 * genus - 2
    for m in multiplicities:
        if int(m) < 1:
            raise ValueError("multiplicities must be >= 1")
        total += 1 - Fraction(1, int(m))
    return total, total > 0


# ----------------------------------------------------------------------------
# divisor sections


def cutoff(x):
    """Monotone C^1 cutoff: identity on [0, 1/2], equal to 1 beyond 3/2."""
    x = np.asarray(x, dtype=float)
    t = np.clip(x - 0.5, 0.0, 1.0)
    return np.where(x <= 0.5, x, 0.5 + t - 0.5 * t**2)


def periodic_distance(grid: BaseGrid, s: complex) -> np.ndarray:
    x1, x2 = grid.mesh()
    dx = (x1 - s.real + 0.5) % 1.0 - 0.5
    dy = (x2 - s.imag + 0.5) % 1.0 - 0.5
    return np.hypot(dx, dy)


def section_field(points, grid: BaseGrid, eps: float) -> DivisorSection:
    """``|S|_h^2`` built from marked points.

    Torus: product of ``cutoff(d(s, s_i)^2 / eps^2)``.  Annulus:
    ``min(1, |s|^2)``.
    """
    if not eps > 0:
        raise ValueError("smoothing scale must be positive")
    pts = tuple(complex(p) for p in points)
    for p in pts:
        _check_on_chart(p, grid)
    if grid.chart == "annulus":
        vals = np.minimum(1.0, grid.radius() ** 2)
    else:
        vals = np.ones(grid.shape)
        for p in pts:
            vals = vals * cutoff(periodic_distance(grid, p) ** 2 / eps**2)
        vals = np.maximum(vals, np.finfo(float).tiny)
    return DivisorSection(pts, float(eps), ScalarField(grid, vals))


def smoothed_point_mass(grid: BaseGrid, s: complex, width: float) -> np.ndarray:
    """Periodized Gaussian with unit discrete mass against ``dx ^ dy``."""
    d = periodic_distance(grid, s)
    g = np.exp(-0.5 * (d / width) ** 2)
    return g / integrate_array(g, grid)


# ----------------------------------------------------------------------------
# consistency construction


def consistent_density(config: FibrationConfig, wp: HermitianField,
                       current_width: float | None = None) -> DensityField:
    """Density ``F = e^v`` with ``i d dbar v = chi + Ric(chi) - omega_WP - D``.

    ``D`` is the multiple-fiber divisor ``sum 2 pi (1 - 1/m_i) [s_i]``
    smoothed by Gaussians of width ``eps_h / 14``.  On torus charts ``chi``
    is rescaled by the positive constant that makes the right-hand side
    integrate to zero; without multiple fibers no such constant exists, so
    ``chi`` is kept, the mean is removed, and the result is flagged
    inconsistent.  ``F`` is normalized so that ``int F chi = int chi``.
    """
    grid = config.grid
    lam = config.chi.gss
    if not np.all(lam > 0):
        raise ValueError("chi must be strictly positive")
    if grid.chart == "annulus":
        return _annulus_consistent_density(config, wp)
    width = current_width if current_width is not None else config.eps_h / 14.0
    # all terms as g_ss coefficients (density against dx^dy is twice this)
    ric = -hessian_array(np.log(lam), grid)[0]
    divisor = np.zeros(grid.shape)
    for s, m in config.multiple_fibers:
        divisor += 2 * np.pi * (1 - 1 / m) * smoothed_point_mass(grid, complex(s), width) / 2
    fixed = integrate_array(wp.gss + divisor - ric, grid)
    base = integrate_array(lam, grid)
    scale = fixed / base
    consistent = bool(scale > 1e-8 and any(m > 1 for _, m in config.multiple_fibers))
    if not consistent:
        scale = 1.0
    lam_s = scale * lam
    rhs = lam_s + ric - wp.gss - divisor
    # i d dbar v has coefficient Lap(v) / 4
    v, mean = poisson_solve(ScalarField(grid, 4.0 * rhs), return_mean=True)
    F = np.exp(v.values)
    F *= integrate_array(lam_s, grid) / integrate_array(F * lam_s, grid)
    ann = tuple((complex(s), -2.0 * (m - 1) / m, False) for s, m in config.multiple_fibers)
    return DensityField(grid, F, ann, consistent=consistent, chi=base_form(grid, lam_s),
                        chi_scale=float(scale), residual_mean=float(mean / 4.0))


def _annulus_consistent_density(config, wp):
    """Closed form on annuli for flat ``chi = lam0 i ds ^ dsbar``.

    ``v = lam0 |s|^2 + log y_tau`` solves ``i d dbar v = chi - omega_WP`` when
    ``omega_WP = -i d dbar log y_tau``; no compatibility constraint applies.
    """
    from .weil_petersson import wp_form

    grid = config.grid
    lam = config.chi.gss
    if np.ptp(lam) > 0:
        raise ValueError("annulus consistency requires a flat base form")
    if config.multiple_fibers:
        raise ValueError("annulus consistency does not support multiple fibers")
    ref = wp_form(config.y)
    if np.max(np.abs(ref.gss - wp.gss)) > 1e-10 * max(1.0, np.max(np.abs(ref.gss))):
        raise ValueError("omega_WP does not match the configured period field")
    lam0 = float(lam.flat[0])
    F = np.exp(lam0 * grid.radius() ** 2) * config.y.values
    F *= integrate_array(lam, grid) / integrate_array(F * lam, grid)
    return DensityField(grid, F, consistent=True, chi=base_form(grid, lam), chi_scale=1.0)


# ----------------------------------------------------------------------------
# model volume forms near a singular fiber


def model_volume(model: KodairaModel, grid: BaseGrid, area: float = 1.0, lam: float = 1.0,
                 smooth=(0.2, 0.05)) -> ScalarField:
    """Fiber-constant profile of a smooth volume form in the ``(s, z)`` chart.

    ``Omega`` is smooth and nonvanishing on the total space of the model; in
    the base coordinate ``s`` the ``m``-fold cover contributes the Jacobian
    ``|s|^(-2(m-1)/m)``.  The smooth factor is ``1 + c1 Re s + c2 |s|^2``.
    The scale is chosen so that ``F = y_tau`` for ``m = 1`` and trivial
    smooth factor.
    """
    if grid.chart != "annulus":
        raise ValueError("model volumes are sampled on annulus charts")
    s = grid.points()
    r = np.abs(s)
    m = model.multiplicity
    cover = r ** (-2.0 * (m - 1) / m)
    g = 1 + smooth[0] * s.real + smooth[1] * r**2
    return ScalarField(grid, 2 * WEDGE_JACOBIAN * lam * (area / 2) * cover * g)


def model_density(model: KodairaModel, grid: BaseGrid, area: float = 1.0,
                  smooth=(0.2, 0.05)) -> DensityField:
    """``F`` of a local model, with a builder refining the grid and shrinking the
    inner radius by half per level."""
    from .semiflat import density_from_volume, semiflat_form

    y, tag = period_field(model, grid)
    chi = base_form(grid, 1.0)
    cfg = FibrationConfig(grid, y, area, chi, monodromy=tag)
    sf = semiflat_form(cfg)
    F = density_from_volume(model_volume(model, grid, area, 1.0, smooth), sf, chi)
    F.annotations = ((0j, model.expected_exponent, model.has_log),)
    F.chi = chi

    def builder(level: int) -> DensityField:
        hr = grid.spacing[0] / 2**level
        rho_min = grid.rho_min - level * np.log(2.0)
        n1 = int(round((grid.rho_max - rho_min) / hr)) + 1
        n1 += n1 % 2
        g2 = BaseGrid("annulus", n1, grid.n2 * 2**level, rho_min, grid.rho_max)
        out = model_density(model, g2, area, smooth)
        out.builder = None
        return out

    F.builder = builder
    return F
