"""Degenerating Calabi-Yau family on a product torus fibration.

For ``omega_t = chi + t omega_1`` solve

    (omega_t + i d dbar phi_t)^2 / Omega = C_t,   int phi_t Omega = 0,

with ``Omega`` normalized to unit mass and ``C_t`` the discrete class volume
``int 2 J det(omega_t) / int Omega``.  As ``t -> 0`` the potentials converge to
the pullback of the base solution of ``Delta_chi phi_0 = F - 1``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import scipy.fft as sfft
import scipy.sparse.linalg as spla

from .fibration import DivisorSection, FibrationConfig, section_field
from .gke import GKEProblem, NewtonDivergence, solve_gke
from .grid import (WEDGE_JACOBIAN, BaseGrid, HermitianField, PositivityError, ScalarField,
                   TotalGrid, _multipliers, base_form, check_positive, det_array, fft_workers,
                   fiber_area, fiber_form, fiber_mean, hessian_array, integrate_array,
                   inverse_array, pullback, trace_array)
from .semiflat import DensityField, semiflat_form

REGION_THRESHOLD = 0.3


def family_schedule(t_min: float = 1e-3, per_decade: int = 3):
    """Geometric schedule from 1 down to ``t_min`` (both included)."""
    if not 0 < t_min <= 1:
        raise ValueError("t_min must lie in (0, 1]")
    n = int(round(-np.log10(t_min) * per_decade))
    return tuple(float(t) for t in np.logspace(0.0, np.log10(t_min), n + 1))


@dataclass
class FamilyProblem:
    """Family data on ``total``.

    ``omega_density`` is rescaled to unit mass on construction (``mass``
    keeps the original).  ``omega1`` must have fiber area ``config.area``.
    """

    total: TotalGrid
    chi: HermitianField
    omega1: HermitianField
    omega_density: np.ndarray
    config: FibrationConfig
    section: DivisorSection
    schedule: tuple = field(default_factory=family_schedule)
    tol: float = 1e-11
    max_iter: int = 40
    max_halvings: int = 30
    krylov_tol: float = 1e-12
    mass: float = field(default=1.0, init=False)

    def __post_init__(self):
        if self.chi.grid != self.total or self.omega1.grid != self.total:
            raise ValueError("forms must live on the total grid")
        dens = np.asarray(self.omega_density, dtype=float)
        if dens.shape != self.total.shape:
            raise ValueError("Omega has the wrong shape")
        if not np.all(dens > 0):
            raise ValueError("Omega must be positive")
        self.mass = integrate_array(dens, self.total)
        self.omega_density = dens / self.mass
        self.schedule = tuple(float(t) for t in self.schedule)
        if not self.schedule or any(t <= 0 for t in self.schedule):
            raise ValueError("schedule entries must be positive")
        if any(b >= a for a, b in zip(self.schedule, self.schedule[1:])):
            raise ValueError("schedule must be strictly decreasing")
        area = fiber_area(self.omega1, self.config.y.values)
        err = float(np.max(np.abs(area - self.config.area)))
        if err > 1e-10 * self.config.area:
            raise ValueError(f"omega1 fiber area differs from A by {err:.3g}")
        for t in self.schedule:
            check_positive(self.reference(t).comps, f"omega_t at t={t:g}")

    def reference(self, t: float) -> HermitianField:
        return HermitianField(self.total, self.chi.comps + t * self.omega1.comps)

    def class_volume(self, t: float) -> float:
        """``C_t = int 2 J det(omega_t) / int Omega`` (``int Omega = 1``)."""
        det = det_array(self.reference(t).comps)
        return 2.0 * WEDGE_JACOBIAN * integrate_array(det, self.total) \
            / integrate_array(self.omega_density, self.total)

    def region(self) -> np.ndarray:
        return self.section.values.values >= REGION_THRESHOLD


def make_family_problem(base: BaseGrid, fiber_res=(8, 8), lam=1.0, density=1.0,
                        area: float = 1.0, omega1_base=1.0, points=(), eps_h: float = 0.3,
                        **kwargs) -> FamilyProblem:
    """Product model: ``chi = lam ds``, ``omega_1 = omega_SF + omega1_base ds``.

    ``density`` is either a base array (pulled back) or a total-space array;
    it multiplies the flat volume form ``2 omega_SF ^ chi``.
    """
    total = TotalGrid(base, *fiber_res)
    lam = np.broadcast_to(np.asarray(lam, dtype=float), base.shape)
    a = area / 2.0
    chi = pullback(total, lam)
    omega1 = fiber_form(total, a) + pullback(total, np.broadcast_to(np.asarray(omega1_base, float),
                                                                    base.shape))
    dens = np.asarray(density, dtype=float)
    if dens.shape == base.shape or dens.ndim == 0:
        dens = np.broadcast_to(dens, base.shape)[:, :, None, None] * np.ones(total.shape)
    Omega = 2.0 * WEDGE_JACOBIAN * a * lam[:, :, None, None] * dens
    y = ScalarField(base, np.ones(base.shape))
    cfg = FibrationConfig(base, y, area, base_form(base, lam), eps_h=eps_h, synthetic=True)
    return FamilyProblem(total, chi, omega1, Omega, cfg, section_field(points, base, eps_h),
                         **kwargs)


@dataclass
class FamilyLeg:
    """Solution at one scheduled ``t`` with its diagnostics."""

    t: float
    phi: np.ndarray
    class_volume: float
    iterations: int
    residual: float
    krylov_iterations: int
    mass_error: float
    normalization: float
    fiber_norm: float
    history: list


@dataclass
class FamilySolution:
    legs: list
    problem: FamilyProblem

    @property
    def times(self) -> np.ndarray:
        return np.array([leg.t for leg in self.legs])

    def column(self, name) -> np.ndarray:
        return np.array([getattr(leg, name) for leg in self.legs])


def family_residual(phi: np.ndarray, t: float, problem: FamilyProblem):
    """``log(2 J det(omega_t + i d dbar phi)) - log(C_t Omega)`` and the metric."""
    comps = problem.reference(t).comps + hessian_array(phi, problem.total)
    check_positive(comps, f"omega_t + i d dbar phi at t={t:g}")
    res = np.log(2.0 * WEDGE_JACOBIAN * det_array(comps)) \
        - np.log(problem.class_volume(t) * problem.omega_density)
    return res, comps


class _KrylovSystem:
    """Linearization ``delta -> tr_omega(i d dbar delta)`` made invertible.

    The constant mode and the Nyquist planes (both annihilated by the
    spectral Hessian) are mapped to themselves; their right-hand-side
    components are dropped from the update.  The preconditioner inverts the
    constant-coefficient operator with mean inverse-metric entries.
    """

    def __init__(self, comps, total: TotalGrid):
        self.total = total
        self.shape = total.shape
        self.inv = inverse_array(comps)
        k1, k2, k3, k4 = _multipliers(self.shape, (1.0,) * 4)
        fib = ((k3 * k3 + k4 * k4) / 4).real
        bas = ((k1 * k1 + k2 * k2) / 4).real
        self.null = (fib + bas) == 0
        cz = float(np.mean(self.inv[0]))
        cs = float(np.mean(self.inv[1]))
        sym = cz * fib + cs * bas
        self.sym = np.where(self.null, 1.0, sym)
        self.count = 0

    def _split(self, v):
        hat = sfft.rfftn(v, workers=fft_workers())
        hat_null = np.where(self.null, hat, 0.0)
        return hat, hat_null

    def matvec(self, v):
        v = v.reshape(self.shape)
        _, hat_null = self._split(v)
        nullpart = sfft.irfftn(hat_null, s=self.shape, workers=fft_workers())
        H = hessian_array(v - nullpart, self.total)
        out = (self.inv[0] * H[0] + self.inv[1] * H[1]
               + 2 * (self.inv[2] * H[2] + self.inv[3] * H[3])) + nullpart
        return out.ravel()

    def precond(self, v):
        hat = sfft.rfftn(v.reshape(self.shape), workers=fft_workers())
        return sfft.irfftn(hat / self.sym, s=self.shape, workers=fft_workers()).ravel()

    def solve(self, rhs, tol):
        n = rhs.size
        A = spla.LinearOperator((n, n), matvec=self.matvec, dtype=float)
        M = spla.LinearOperator((n, n), matvec=self.precond, dtype=float)

        def count(_):
            self.count += 1

        x, info = spla.gmres(A, rhs.ravel(), rtol=tol, atol=0.0, restart=60, maxiter=20,
                             M=M, callback=count, callback_type="pr_norm")
        if info < 0:
            raise NewtonDivergence(f"GMRES breakdown (info={info})")
        x = x.reshape(self.shape)
        _, hat_null = self._split(x)
        return x - sfft.irfftn(hat_null, s=self.shape, workers=fft_workers())


def _normalize(phi, problem):
    w = problem.omega_density
    return phi - integrate_array(phi * w, problem.total) / integrate_array(w, problem.total)


def _solve_leg(phi, t, problem: FamilyProblem):
    """Damped Newton-Krylov at fixed ``t``; returns ``(phi, history, krylov)``."""
    try:
        res, comps = family_residual(phi, t, problem)
    except PositivityError as exc:
        raise NewtonDivergence(f"initial guess not admissible at t={t:g}: {exc}", t=t) from exc
    norm = float(np.max(np.abs(res)))
    history = [norm]
    krylov = 0
    polished = False
    for _ in range(problem.max_iter):
        if norm <= problem.tol:
            if polished:
                break
            polished = True
        system = _KrylovSystem(comps, problem.total)
        delta = system.solve(-res, problem.krylov_tol)
        krylov += system.count
        step = 1.0
        accepted = False
        for _ in range(problem.max_halvings):
            trial = phi + step * delta
            try:
                r_new, c_new = family_residual(trial, t, problem)
            except PositivityError:
                step *= 0.5
                continue
            n_new = float(np.max(np.abs(r_new)))
            if n_new < norm or (polished and n_new <= problem.tol):
                accepted = True
                break
            step *= 0.5
        if not accepted:
            if norm <= problem.tol:
                break
            raise NewtonDivergence(f"line search failed at t={t:g} (residual {norm:.3g})",
                                   history, t)
        phi, res, comps, norm = trial, r_new, c_new, n_new
        history.append(norm)
    if norm > problem.tol:
        raise NewtonDivergence(f"no convergence at t={t:g}: residual {norm:.3g} after "
                               f"{len(history) - 1} iterations", history, t)
    return _normalize(phi, problem), history, krylov


def solve_family(problem: FamilyProblem, init=None) -> FamilySolution:
    """Solve down the schedule with warm starts."""
    total = problem.total
    phi = np.zeros(total.shape) if init is None else np.asarray(init, dtype=float)
    legs = []
    for t in problem.schedule:
        phi, hist, krylov = _solve_leg(phi, t, problem)
        comps = problem.reference(t).comps + hessian_array(phi, total)
        det = det_array(comps)
        C = problem.class_volume(t)
        mass = 2.0 * WEDGE_JACOBIAN * integrate_array(det, total)
        legs.append(FamilyLeg(
            t=t, phi=phi.copy(), class_volume=C, iterations=len(hist) - 1,
            residual=hist[-1], krylov_iterations=krylov,
            mass_error=abs(mass - C * integrate_array(problem.omega_density, total)) / abs(mass),
            normalization=integrate_array(phi * problem.omega_density, total),
            fiber_norm=float(np.max(comps[0])), history=hist))
    return FamilySolution(legs, problem)


def collapse_slope(solution: FamilySolution, decades: float = 1.0) -> float:
    """Slope of ``log sup g_zz`` against ``log t`` over the last ``decades``."""
    t = solution.times
    v = solution.column("fiber_norm")
    sel = t <= t[-1] * 10**decades * (1 + 1e-12)
    if np.sum(sel) < 2:
        raise ValueError("need at least two legs in the fitting window")
    slope, _ = np.polyfit(np.log(t[sel]), np.log(v[sel]), 1)
    return float(slope)


def limit_density(problem: FamilyProblem) -> DensityField:
    """Fiber average of ``Omega / (2 omega_SF ^ chi)`` as a base density."""
    sf = semiflat_form(problem.config)
    lam = problem.chi.gss[:, :, 0, 0]
    F = fiber_mean(problem.omega_density) / (2.0 * WEDGE_JACOBIAN * sf.a.values * lam)
    return DensityField(problem.config.grid, F)


@dataclass
class LimitCheck:
    limit_residual: float
    wp_residual: Optional[float]
    phi0: ScalarField
    consistency: float
    note: str = ""


def limit_check(solution: FamilySolution, config: Optional[FibrationConfig] = None, wp=None,
                force: bool = False, consistency_tol: float = 1e-8) -> LimitCheck:
    """Compare the last leg with the pullback of the base limit ``phi_0``.

    ``phi_0`` solves ``Delta_chi phi_0 = F - 1`` and is shifted so that its
    pullback has zero ``Omega``-mean.  The curvature residual
    ``sup |Ric(chi + i d dbar phi_0) - omega_WP|`` is only reported when
    ``i d dbar log(lam F) + omega_WP`` vanishes (the consistent case) or
    with ``force``; otherwise ``wp_residual`` is ``None``.
    """
    from .weil_petersson import wp_form

    problem = solution.problem
    config = problem.config if config is None else config
    base = config.grid
    lam = problem.chi.gss[:, :, 0, 0]
    F = limit_density(problem)
    sol = solve_gke(GKEProblem(base, base_form(base, lam), F, lam=0))
    phi0 = sol.phi.values
    w = problem.omega_density
    shift = integrate_array(phi0[:, :, None, None] * w, problem.total) / integrate_array(w, problem.total)
    phi0 = phi0 - shift
    last = solution.legs[-1].phi
    region = problem.region()
    diff = np.abs(last - phi0[:, :, None, None]).max(axis=(2, 3))
    limit = float(np.max(diff[region]))
    wp_coeff = (wp_form(config.y).gss if wp is None else wp.gss)
    consistency = float(np.max(np.abs(hessian_array(np.log(lam * F.values), base)[0] + wp_coeff)))
    if consistency > consistency_tol and not force:
        return LimitCheck(limit, None, ScalarField(base, phi0), consistency,
                          "density is not consistent with omega_WP; curvature check skipped")
    metric = lam + hessian_array(phi0, base)[0]
    ric = -hessian_array(np.log(metric), base)[0]
    return LimitCheck(limit, float(np.max(np.abs(ric - wp_coeff))), ScalarField(base, phi0),
                      consistency)
