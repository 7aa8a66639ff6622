"""Semi-flat forms, the base density F, and its singular asymptotics."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .grid import (WEDGE_JACOBIAN, BaseGrid, HermitianField, ScalarField, TotalGrid,
                   fiber_mean, integrate_array, spectral_derivatives)


@dataclass
class SemiflatData:
    """Semi-flat form data over the base.

    ``a`` is the ``g_zz`` coefficient ``A / (2 y_tau)``; the potential
    ``rho_SF = A (Im z)^2 / y_tau`` is recorded for total-space assembly.
    """

    a: ScalarField
    y: ScalarField
    area: float
    potential: str = "A*(Im z)^2/y_tau"

    @property
    def grid(self):
        return self.a.grid


@dataclass
class DensityField:
    """Positive base density ``F`` with optional singularity annotations.

    ``annotations`` holds ``(s_i, exponent, log_factor)`` triples.  When
    produced by the consistency construction, ``consistent`` is set and
    ``chi`` carries the rescaled base form.  ``builder(level)`` rebuilds the
    same profile on a refined grid (used by :func:`lp_check`).
    """

    grid: BaseGrid
    values: np.ndarray
    annotations: tuple = ()
    consistent: bool = False
    chi: Optional[HermitianField] = None
    chi_scale: float = 1.0
    residual_mean: float = 0.0
    builder: Optional[Callable[[int], "DensityField"]] = field(default=None, repr=False)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.shape != self.grid.shape:
            raise ValueError("density shape does not match grid")
        if not np.all(self.values > 0):
            raise ValueError("density must be positive at every grid point")


def semiflat_form(config) -> SemiflatData:
    """Fiber coefficient ``a = A / (2 y_tau)`` of the semi-flat form."""
    y = config.y.values
    if not np.all(y > 0):
        raise ValueError("y_tau must be positive")
    return SemiflatData(ScalarField(config.grid, config.area / (2.0 * y)), config.y,
                        float(config.area))


def fiber_area_quadrature(sf: SemiflatData, fiber_res=(16, 16)) -> np.ndarray:
    """Fiber area by quadrature over the unit-square fundamental domain.

    The unit square maps onto the fundamental domain of ``Z + Z tau`` with
    constant Jacobian ``Im tau``; ``i dz ^ dzbar = 2 dx dy``.
    """
    m1, m2 = fiber_res
    integrand = np.broadcast_to((2.0 * sf.a.values * sf.y.values)[..., None, None],
                                sf.a.values.shape + (m1, m2))
    return integrand.sum(axis=(2, 3)) / (m1 * m2)


def semiflat_total(sf: SemiflatData, total: TotalGrid) -> HermitianField:
    """Assemble ``i d dbar rho_SF`` on a total grid.

    With ``q = 1 / y_tau`` and ``x4 = Im z`` on the fundamental domain:
    ``g_zz = A q / 2``, ``g_ss = A x4^2 d_s d_sbar q`` and
    ``g_zs = -i A x4 d_sbar q``.  For constant ``y_tau`` only ``g_zz``
    survives and the field is periodic.
    """
    if sf.grid != total.base:
        raise ValueError("semi-flat data and total grid have different bases")
    A = sf.area
    q = 1.0 / sf.y.values
    q1, q2, q11, q22 = spectral_derivatives(q, [(0,), (1,), (0, 0), (1, 1)])
    x4 = total.mesh()[3]
    comps = np.zeros((4,) + total.shape)
    comps[0] = (sf.a.values)[:, :, None, None]
    comps[1] = A * x4**2 * ((q11 + q22) / 4)[:, :, None, None]
    # d_sbar q = (q1 + i q2) / 2, so g_zs = A x4 (q2 - i q1) / 2
    comps[2] = A * x4 * (q2 / 2)[:, :, None, None]
    comps[3] = -A * x4 * (q1 / 2)[:, :, None, None]
    return HermitianField(total, comps)


def density_from_volume(omega: ScalarField, sf: SemiflatData, chi: HermitianField,
                        fiber_tol: float = 1e-8) -> DensityField:
    """Base density ``F = Omega / (2 omega_SF ^ chi)``.

    ``omega`` is a density against ``dx1..dx4`` (on a total grid) or a
    fiber-constant base profile of that density.  ``2 omega_SF ^ chi`` has
    density ``2 a lambda J`` with ``J`` the wedge Jacobian.
    """
    vals = omega.values
    if np.any(vals <= 0):
        raise ValueError("Omega must be positive")
    if isinstance(omega.grid, TotalGrid):
        logv = np.log(vals)
        spread = float(np.max(logv.max(axis=(2, 3)) - logv.min(axis=(2, 3))))
        if spread > fiber_tol:
            raise ValueError(f"log Omega varies along fibers by {spread:.3g} > {fiber_tol:g}")
        vals = fiber_mean(vals)
    lam = chi.gss if not chi.total else chi.gss[:, :, 0, 0]
    denom = 2.0 * sf.a.values * lam * WEDGE_JACOBIAN
    F = vals / denom
    if not np.all(F > 0):
        raise ValueError("non-positive density ratio")
    return DensityField(sf.grid, F)


# ----------------------------------------------------------------------------
# asymptotics


@dataclass
class ExponentFit:
    exponent: float
    log_flag: bool
    fit_residual: float
    log_coefficient: float
    shells: int

    def __iter__(self):
        return iter((self.exponent, self.log_flag, self.fit_residual))


def radial_shells(F: DensityField, center=0j, r_min=None, r_max=None):
    """Angle-averaged shells ``(r, mean F)``.

    Annulus charts use grid rows (the two boundary rows are dropped).  On
    torus charts nodes are binned by periodic distance to ``center`` with
    bin width equal to the grid spacing.
    """
    g = F.grid
    if g.chart == "annulus":
        if abs(center) > 0:
            raise ValueError("annulus shells are centered at s = 0")
        r = np.exp(g.axes()[0])[1:-1]
        fbar = F.values[1:-1].mean(axis=1)
    else:
        x1, x2 = g.mesh()
        dx = (x1 - center.real + 0.5) % 1.0 - 0.5
        dy = (x2 - center.imag + 0.5) % 1.0 - 0.5
        d = np.hypot(dx, dy)
        h = g.spacing[0]
        idx = np.floor(d / h).astype(int)
        nb = int(0.5 / h)
        r, fbar = [], []
        for k in range(1, nb):
            sel = idx == k
            if np.any(sel):
                r.append(float(d[sel].mean()))
                fbar.append(float(F.values[sel].mean()))
        r, fbar = np.array(r), np.array(fbar)
    keep = np.ones(r.shape, bool)
    if r_min is not None:
        keep &= r >= r_min
    if r_max is not None:
        keep &= r <= r_max
    keep &= r < 1.0
    return r[keep], fbar[keep]


def fit_singular_exponent(F: DensityField, center=0j, r_min=None, r_max=None,
                          log_threshold: float = 0.5) -> ExponentFit:
    """Fit ``log Fbar = c + alpha log r + beta log(-log r)`` over shells.

    ``alpha`` is the power exponent; ``log_flag`` reports ``beta`` above
    ``log_threshold``.  The residual is the RMS misfit of the joint fit.
    """
    r, fbar = radial_shells(F, center, r_min, r_max)
    if r.size < 4:
        raise ValueError(f"only {r.size} usable radial shells (need >= 4)")
    lr = np.log(r)
    X = np.column_stack([np.ones_like(lr), lr, np.log(-lr)])
    coef, *_ = np.linalg.lstsq(X, np.log(fbar), rcond=None)
    resid = float(np.sqrt(np.mean((X @ coef - np.log(fbar)) ** 2)))
    return ExponentFit(float(coef[1]), bool(coef[2] > log_threshold), resid,
                       float(coef[2]), int(r.size))


@dataclass
class LpResult:
    values: list
    ratios: list
    verdict: str

    def __iter__(self):
        return iter((self.ratios, self.verdict))


def lp_check(F: DensityField, p: float, refinements: int = 3) -> LpResult:
    """Track ``int F^p chi`` over successively refined grids.

    ``F.builder(k)`` must return the profile at refinement level ``k`` with
    the smoothing scale shrunk proportionally.  Verdict ``integrable`` when
    successive values change by less than 5%, ``divergent`` when each grows
    by at least 1.5x, ``inconclusive`` otherwise.
    """
    if p < 1:
        raise ValueError("p must be >= 1")
    if refinements and F.builder is None:
        raise ValueError("lp_check needs a density with a refinement builder")
    fields = [F] + [F.builder(k) for k in range(1, refinements + 1)]
    vals = []
    for f in fields:
        lam = f.chi.gss if f.chi is not None else 1.0
        vals.append(integrate_array(f.values**p * 2.0 * lam, f.grid))
    ratios = [b / a for a, b in zip(vals, vals[1:])]
    if all(abs(q - 1) < 0.05 for q in ratios):
        verdict = "integrable"
    elif ratios and all(q >= 1.5 for q in ratios):
        verdict = "divergent"
    else:
        verdict = "inconclusive"
    return LpResult(vals, ratios, verdict)
