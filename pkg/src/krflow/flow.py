"""Reduced Kaehler-Ricci flow on a fibered torus with estimate monitors.

The unknown is a potential ``phi`` on the total space with
``omega(t) = omega_t + i d dbar phi`` and ``omega_t = chi + e^-t (omega0 - chi)``.
It evolves by ``d phi/dt = log(e^t omega^2 / Omega) - phi`` with
``omega^2 = 2 J det(g) dx1..dx4``.
"""

from __future__ import annotations

import math
import time
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np
import scipy.fft as sfft

from .fibration import DivisorSection, FibrationConfig, periodic_distance, section_field
from .grid import (WEDGE_JACOBIAN, BaseGrid, HermitianField, PositivityError, ScalarField,
                   TotalGrid, _multipliers, base_form, check_positive, det_array, fft_workers,
                   fiber_area, fiber_form, fiber_mean, gradient_array, hessian_array,
                   inverse_array, max_eigenvalue, min_eigenvalue, pullback, trace_array)

REGION_THRESHOLD = 0.3


class FlowAbort(RuntimeError):
    """A step could not keep ``omega(t)`` positive after the allowed retries."""

    def __init__(self, message, t=None, point=None, min_eig=None):
        super().__init__(message)
        self.t = t
        self.point = point
        self.min_eig = min_eig


@dataclass
class FlowProblem:
    """Data of a flow run on ``total``.

    ``chi`` and ``omega0`` are total-space Hermitian fields; ``omega_density``
    is ``Omega`` against ``dx1..dx4``.  ``chi_b`` is the base coefficient of
    the form used by the Schwarz monitor and ``schwarz_mask`` the base region
    where it is evaluated.  ``seed`` is the potential part of ``omega0``
    (``omega0 - i d dbar seed`` is then the seed-free initial form).
    """

    total: TotalGrid
    chi: HermitianField
    omega0: HermitianField
    omega_density: np.ndarray
    config: FibrationConfig
    section: DivisorSection
    t_max: float = 12.0
    dt: float = 0.02
    scheme: str = "implicit"
    monitor_every: float = 0.25
    c_cfl: float = 0.2
    max_halvings: int = 10
    chi_b: Optional[np.ndarray] = None
    schwarz_mask: Optional[np.ndarray] = None
    seed: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.chi.grid != self.total or self.omega0.grid != self.total:
            raise ValueError("forms must live on the total grid")
        self.omega_density = np.asarray(self.omega_density, dtype=float)
        if self.omega_density.shape != self.total.shape:
            raise ValueError("Omega has the wrong shape")
        if not np.all(self.omega_density > 0):
            raise ValueError("Omega must be positive")
        check_positive(self.omega0.comps, "omega0")
        if np.any(min_eigenvalue(self.chi.comps) < -1e-14):
            raise ValueError("chi must be semi-positive")
        if not np.all(self.chi.gss > 0):
            raise ValueError("chi must be positive on the base factor")
        if self.scheme not in ("rk4", "implicit"):
            raise ValueError(f"unknown scheme {self.scheme!r}")
        if self.chi_b is None:
            self.chi_b = self.chi.gss[:, :, 0, 0].copy()
        if self.schwarz_mask is None:
            self.schwarz_mask = self.region()

    @property
    def area(self) -> float:
        return float(self.config.area)

    def region(self) -> np.ndarray:
        """Base mask ``{|S|_h^2 >= 0.3}``."""
        return self.section.values.values >= REGION_THRESHOLD

    @property
    def log_omega(self) -> np.ndarray:
        return np.log(self.omega_density)


@dataclass
class FlowState:
    t: float
    phi: np.ndarray
    omega: Optional[HermitianField] = None
    phidot: Optional[np.ndarray] = None
    dt: float = 0.0
    retries: int = 0
    steps: int = 0


@dataclass
class MonitorRecord:
    t: float
    phi_sup: float
    phi_inf: float
    phidot_sup: float
    phidot_inf: float
    phidot_region_sup: float
    u_sup: float
    u_inf: float
    tr_chi_sup: float
    tr_omega0_sup: float
    fiber_area_min: float
    fiber_area_max: float
    fiber_osc_sup: float
    fiber_lap_inf: float
    fiber_lap_sup: float
    fiber_norm: float
    scalar_inf: float
    scalar_sup: float
    scalar_gap: float
    twist_sup: float
    schwarz: float
    schwarz_u_sup: float
    grad_phidot_sup: float
    limit_gap: float
    dt: float
    retries: int

    def as_dict(self) -> dict:
        return asdict(self)


@dataclass
class MonitorSeries:
    """Ordered monitor records with run metadata (config hash, grid, wall time)."""

    records: list = field(default_factory=list)
    summary: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    def append(self, record: MonitorRecord) -> None:
        if self.records and not record.t > self.records[-1].t:
            raise ValueError(f"monitor times must increase ({record.t} after {self.records[-1].t})")
        self.records.append(record)

    def column(self, name) -> np.ndarray:
        return np.array([getattr(r, name) for r in self.records], dtype=float)

    @property
    def names(self):
        return list(MonitorRecord.__dataclass_fields__)


# ----------------------------------------------------------------------------
# problem construction


def seed_potential(total: TotalGrid, kind: str = "zero", amplitude: float = 0.0,
                   seed: int = 0) -> np.ndarray:
    """Initial potentials: ``zero``, ``random`` (band-limited, all directions)
    or ``fiber`` (adversarial fiber-dependent modes).

    Nonzero seeds are scaled so that the eigenvalues of ``i d dbar seed`` are
    bounded by ``amplitude`` in absolute value.
    """
    x1, x2, x3, x4 = total.mesh()
    if kind == "zero":
        return np.zeros(total.shape)
    rng = np.random.default_rng(seed)
    out = np.zeros(total.shape)
    if kind == "random":
        for _ in range(6):
            k = rng.integers(-2, 3, size=4)
            ph = rng.uniform(0, 2 * np.pi)
            out += rng.normal() * np.cos(2 * np.pi * (k[0] * x1 + k[1] * x2 + k[2] * x3 + k[3] * x4) + ph)
    elif kind == "fiber":
        for _ in range(4):
            k = rng.integers(1, 3, size=2)
            ph = rng.uniform(0, 2 * np.pi)
            out += rng.normal() * np.cos(2 * np.pi * (k[0] * x3 + k[1] * x4) + ph) \
                * (1 + 0.5 * np.cos(2 * np.pi * x1))
    else:
        raise ValueError(f"unknown seed kind {kind!r}")
    H = hessian_array(out, total)
    size = max(float(np.max(max_eigenvalue(H))), float(-np.min(min_eigenvalue(H))))
    return amplitude * out / size


def make_flow_problem(base: BaseGrid, fiber_res=(16, 16), lam=1.0, density=1.0,
                      area: float = 1.0, seed_phi=None, points=(), eps_h: float = 0.3,
                      **kwargs) -> FlowProblem:
    """Product model with ``tau = i``: ``chi = lam i ds ^ dsbar``,
    ``omega0 = chi + omega_SF + i d dbar seed`` and
    ``Omega = F * (2 omega_SF ^ chi)`` for a base density ``F``."""
    total = TotalGrid(base, *fiber_res)
    lam = np.broadcast_to(np.asarray(lam, dtype=float), base.shape)
    F = np.broadcast_to(np.asarray(density, dtype=float), base.shape)
    a = area / 2.0
    chi = pullback(total, lam)
    omega0 = chi + fiber_form(total, a)
    if seed_phi is not None:
        omega0 = omega0 + HermitianField(total, hessian_array(np.asarray(seed_phi), total))
    Omega = (2.0 * WEDGE_JACOBIAN * a * lam * F)[:, :, None, None] * np.ones(total.shape)
    y = ScalarField(base, np.ones(base.shape))
    cfg = FibrationConfig(base, y, area, base_form(base, lam), eps_h=eps_h, synthetic=True)
    section = section_field(points, base, eps_h)
    seed = None if seed_phi is None else np.array(seed_phi, dtype=float)
    return FlowProblem(total, chi, omega0, Omega, cfg, section, seed=seed, **kwargs)


def reference_flow_problem(base_n: int = 32, fiber_n: int = 16, amplitude: float = 0.02,
                           eps_h: float = 0.45, seed_kind: str = "fiber",
                           seed_amplitude: float = 0.2, seed: int = 1, chi_b=None,
                           schwarz_mask=None, dt: float = 0.05, **kwargs) -> FlowProblem:
    """Desk-scale reference model on the product torus.

    ``lam = 1 + amplitude sin(2 pi x2)``; the density is
    ``exp(amplitude cos(2 pi x1))`` times a Gaussian bump (width 0.06,
    height 0.3) at the marked point ``0.5 + 0.5i``.  For small ``amplitude``
    the twist ``chi - i d dbar log Omega`` stays positive and the Schwarz form
    defaults to the flat ``chi_b = 1``.  Random seeds are capped at a tenth
    of the smallest eigenvalue of the seed-free initial form.
    """
    base = BaseGrid("torus", base_n, base_n)
    x1, x2 = base.mesh()
    point = 0.5 + 0.5j
    d = periodic_distance(base, point)
    F = np.exp(amplitude * np.cos(2 * np.pi * x1)) * (1 + 0.3 * np.exp(-d**2 / (2 * 0.06**2)))
    lam = 1 + amplitude * np.sin(2 * np.pi * x2)
    total = TotalGrid(base, fiber_n, fiber_n)
    if seed_kind == "random":
        seed_amplitude = min(seed_amplitude, 0.1 * min(0.5, float(lam.min())))
    seed_phi = seed_potential(total, seed_kind, seed_amplitude, seed)
    if chi_b is None:
        chi_b = np.ones(base.shape)
    return make_flow_problem(base, (fiber_n, fiber_n), lam=lam, density=F, seed_phi=seed_phi,
                             points=[point], eps_h=eps_h, chi_b=chi_b,
                             schwarz_mask=schwarz_mask, dt=dt, **kwargs)


def negative_patch(base: BaseGrid, beta: float = 0.1, level: float = 0.5):
    """Schwarz form ``exp(-beta cos(2 pi x1))`` and the patch ``cos(2 pi x1) > level``.

    Its Gauss curvature is ``-pi^2 beta cos(2 pi x1) e^(beta cos)`` which is
    negative on the patch; returns ``(chi_b, mask, K)`` with ``K`` the minimum
    of ``-curvature`` over the patch.
    """
    x1, _ = base.mesh()
    chi_b = np.exp(-beta * np.cos(2 * np.pi * x1))
    mask = np.cos(2 * np.pi * x1) > level
    if not np.any(mask):
        raise ValueError("empty patch")
    kappa = -gauss_curvature(chi_b, base)
    K = float(np.min(kappa[mask]))
    if K <= 0:
        raise ValueError("chi_b is not negatively curved on the patch")
    return chi_b, mask, K


# ----------------------------------------------------------------------------
# evolution


def reference_metric(problem: FlowProblem, t: float) -> HermitianField:
    """``omega_t = chi + e^-t (omega0 - chi)``."""
    if t < 0:
        raise ValueError("t must be nonnegative")
    e = math.exp(-t)
    return HermitianField(problem.total, problem.chi.comps + e * (problem.omega0.comps - problem.chi.comps))


def _evaluate(phi: np.ndarray, t: float, problem: FlowProblem, check: bool = True):
    comps = reference_metric(problem, t).comps + hessian_array(phi, problem.total)
    if check:
        check_positive(comps, f"omega({t:g})")
    det = det_array(comps)
    rhs = t + np.log(2.0 * WEDGE_JACOBIAN * det) - problem.log_omega - phi
    return comps, rhs


def flow_rhs(state: FlowState, problem: FlowProblem) -> ScalarField:
    """``log(e^t 2 J det(omega) / Omega) - phi``; raises on lost positivity."""
    _, rhs = _evaluate(state.phi, state.t, problem)
    return ScalarField(problem.total, rhs)


def initial_state(problem: FlowProblem, phi0=None) -> FlowState:
    phi = np.zeros(problem.total.shape) if phi0 is None else np.array(phi0, dtype=float)
    comps, rhs = _evaluate(phi, 0.0, problem)
    return FlowState(0.0, phi, HermitianField(problem.total, comps), rhs, problem.dt)


def cfl_step(comps: np.ndarray, total: TotalGrid, c_cfl: float = 0.2) -> float:
    """``c h^2 min(eig) / max(eig)`` over the grid."""
    h = min(total.spacing)
    return c_cfl * h * h * float(np.min(min_eigenvalue(comps)) / np.max(max_eigenvalue(comps)))


def _rk4(state, problem, dt):
    p, t = state.phi, state.t
    k1 = state.phidot if state.phidot is not None else _evaluate(p, t, problem)[1]
    k2 = _evaluate(p + 0.5 * dt * k1, t + 0.5 * dt, problem)[1]
    k3 = _evaluate(p + 0.5 * dt * k2, t + 0.5 * dt, problem)[1]
    k4 = _evaluate(p + dt * k3, t + dt, problem)[1]
    return p + dt * (k1 + 2 * k2 + 2 * k3 + k4) / 6.0


def _stabilizer(comps, total):
    """Symbol ``c_z S_fiber + c_s S_base - 1`` (``S`` are the ``d d-bar`` symbols).

    Each ``c`` is the mean of the matching inverse-metric diagonal entry,
    raised to ``0.6`` of its maximum when needed: stiff modes are then damped
    by factors ``1 - g/c`` inside ``(-1, 1)``, and slaved fiber modes see no
    mismatch once the fiber metric is flat.
    """
    inv = inverse_array(comps)
    cz = max(float(np.mean(inv[0])), 0.6 * float(np.max(inv[0])))
    cs = max(float(np.mean(inv[1])), 0.6 * float(np.max(inv[1])))
    k1, k2, k3, k4 = _multipliers(total.shape, (1.0,) * 4)
    sym = cz * (k3 * k3 + k4 * k4).real / 4 + cs * (k1 * k1 + k2 * k2).real / 4 - 1.0
    return sym


def _implicit(state, problem, dt):
    """Linearly implicit Euler: ``(1 - dt L) (phi_new - phi) = dt N``
    with ``L`` a constant-coefficient operator dominating the linearization.

    ``N`` is the right-hand side at ``phi_n`` with the reference metric taken
    at ``t + dt``, so fiber modes slaved to ``omega_t`` do not lag behind.
    With a seed in ``omega0`` the step is taken for ``psi = phi + e^-t seed``,
    which solves the same equation with the seed-free initial form; this keeps
    the slaved equilibrium of the fiber modes at rest.
    """
    total = problem.total
    t0, t1 = state.t, state.t + dt
    seed = problem.seed if problem.seed is not None else 0.0
    psi = state.phi + math.exp(-t0) * seed
    # omega at (t1, phi_n) from the cached omega(t0)
    comps = state.omega.comps + reference_metric(problem, t1).comps \
        - reference_metric(problem, t0).comps
    if problem.seed is not None:
        comps = comps + (math.exp(-t0) - math.exp(-t1)) * hessian_array(problem.seed, total)
    check_positive(comps, f"omega({t1:g})")
    N = t1 + np.log(2.0 * WEDGE_JACOBIAN * det_array(comps)) - problem.log_omega - psi
    sym = _stabilizer(comps, total)
    hat = sfft.rfftn(dt * N, workers=fft_workers())
    incr = sfft.irfftn(hat / (1.0 - dt * sym), s=total.shape, workers=fft_workers())
    return psi + incr - math.exp(-t1) * seed


def step(state: FlowState, problem: FlowProblem, dt: Optional[float] = None,
         scheme: Optional[str] = None) -> FlowState:
    """Advance one accepted step; halve ``dt`` on positivity failure.

    ``rk4``: classical explicit Runge-Kutta with ``dt = min(dt_user, dt_cfl)``.
    ``implicit``: stabilized linearly implicit Euler at ``dt_user``.
    """
    scheme = scheme or problem.scheme
    if state.omega is None or state.phidot is None:
        comps, rhs = _evaluate(state.phi, state.t, problem)
        state = FlowState(state.t, state.phi, HermitianField(problem.total, comps), rhs,
                          state.dt, state.retries, state.steps)
    dt = problem.dt if dt is None else dt
    if scheme == "rk4":
        dt = min(dt, cfl_step(state.omega.comps, problem.total, problem.c_cfl))
    elif scheme != "implicit":
        raise ValueError(f"unknown scheme {scheme!r}")
    retries = 0
    last = None
    for _ in range(problem.max_halvings + 1):
        try:
            phi = _rk4(state, problem, dt) if scheme == "rk4" else _implicit(state, problem, dt)
            comps, rhs = _evaluate(phi, state.t + dt, problem)
        except PositivityError as exc:
            last = exc
            dt *= 0.5
            retries += 1
            continue
        return FlowState(state.t + dt, phi, HermitianField(problem.total, comps), rhs, dt,
                         state.retries + retries, state.steps + 1)
    raise FlowAbort(f"positivity lost after {problem.max_halvings} halvings at t={state.t:g}: {last}",
                    state.t, last.point, last.min_eig)


# ----------------------------------------------------------------------------
# monitors


def _pull(base_array, total):
    return np.broadcast_to(np.asarray(base_array)[:, :, None, None], total.shape)


def split_hessian(values: np.ndarray, total: TotalGrid) -> np.ndarray:
    """Complex Hessian of a total-space array as base Hessian of its fiber
    mean plus total Hessian of the fluctuation.

    Mathematically identical to :func:`hessian_array`; it keeps FFT round-off
    in fiber-constant parts out of the fiber components, which the collapsing
    metric amplifies by ``e^t``.
    """
    mean = fiber_mean(values)
    out = hessian_array(values - mean[:, :, None, None], total)
    out[1] += hessian_array(mean, total.base)[0][:, :, None, None]
    return out


def scalar_curvatures(comps, t: float, problem: FlowProblem):
    """Scalar curvature by two routes, in extended precision.

    ``direct``: ``-tr_omega i d dbar log det``.  ``identity``:
    ``-Lap_omega u - tr_omega(i d dbar log Omega)`` with
    ``u = log(e^t omega^2 / Omega)``.  Fiber second derivatives are amplified
    by ``e^t`` in the trace, so the Hessians run in ``longdouble``.
    """
    total = problem.total
    g = comps.astype(np.longdouble)
    logdet = np.log(det_array(g))
    log_om = problem.log_omega.astype(np.longdouble)
    u = np.longdouble(t) + np.log(np.longdouble(2.0 * WEDGE_JACOBIAN)) + logdet - log_om
    direct = -trace_array(g, split_hessian(logdet, total))
    ident = -trace_array(g, split_hessian(u, total)) - trace_array(g, split_hessian(log_om, total))
    return direct.astype(float), ident.astype(float)


def gauss_curvature(coeff: np.ndarray, grid: BaseGrid) -> np.ndarray:
    """``K`` with ``Ric(chi_b) = K chi_b``: ``-(d d-bar log coeff) / coeff``."""
    return -hessian_array(np.log(coeff), grid)[0] / coeff


def _schwarz_terms(comps, problem):
    total = problem.total
    chib = pullback(total, problem.chi_b).comps
    uS = trace_array(comps, chib)
    lap = trace_array(comps, split_hessian(uS, total))
    kappa = np.maximum(0.0, -gauss_curvature(problem.chi_b, total.base))
    return uS, lap, _pull(kappa, total)


def schwarz_residual(prev: FlowState, state: FlowState, problem: FlowProblem) -> float:
    """Max over the marked region of ``du_S/dt - Lap u_S - u_S + kappa u_S^2``
    with ``u_S = tr_omega chi_b``; spatial terms averaged over both states."""
    mask = _pull(problem.schwarz_mask, problem.total)
    if not np.any(mask):
        raise ValueError("Schwarz region is empty")
    dt = state.t - prev.t
    if dt <= 0:
        raise ValueError("states must be consecutive in time")
    u0, l0, kap = _schwarz_terms(prev.omega.comps, problem)
    u1, l1, _ = _schwarz_terms(state.omega.comps, problem)
    dudt = (u1 - u0) / dt
    rest = 0.5 * ((l0 + u0 - kap * u0**2) + (l1 + u1 - kap * u1**2))
    return float(np.max((dudt - rest)[mask]))


def schwarz_max(state: FlowState, problem: FlowProblem) -> float:
    """``sup u_S`` over the marked region."""
    uS, _, _ = _schwarz_terms(state.omega.comps, problem)
    return float(np.max(uS[_pull(problem.schwarz_mask, problem.total)]))


def schwarz_bound_check(times, u_max, K: float, fit_fraction: float = 0.5):
    """Fit the smallest ``C`` with ``u_max <= 1 / (K - C e^-t)`` on the first
    ``fit_fraction`` of the samples and test the bound on all of them.

    Returns ``(C, dominates, worst_margin)``; samples where ``K - C e^-t <= 0``
    impose no constraint.
    """
    times = np.asarray(times, float)
    u_max = np.asarray(u_max, float)
    if K <= 0:
        raise ValueError("K must be positive")
    n = max(1, int(round(fit_fraction * times.size)))
    C = float(np.max((K - 1.0 / u_max[:n]) * np.exp(times[:n])))
    denom = K - C * np.exp(-times)
    with np.errstate(divide="ignore"):
        bound = np.where(denom > 0, 1.0 / np.where(denom > 0, denom, 1.0), np.inf)
    margin = bound - u_max
    return C, bool(np.all(margin >= -1e-12)), float(np.min(margin))


def monitors(state: FlowState, problem: FlowProblem, phi_inf=None,
             prev: Optional[FlowState] = None) -> MonitorRecord:
    total = problem.total
    comps = state.omega.comps
    phi = state.phi
    pd = state.phidot
    region = _pull(problem.region(), total)
    u = pd + phi
    tr_chi = trace_array(comps, problem.chi.comps)
    tr0 = trace_array(problem.omega0.comps, comps)
    y = problem.config.y.values
    area = fiber_area(HermitianField(total, comps), y) / (math.exp(-state.t) * problem.area)
    osc = np.ptp(phi, axis=(2, 3))
    ref0 = problem.omega0.comps[0]
    lap_fiber = hessian_array(phi, total)[0] / ref0
    direct, ident = scalar_curvatures(comps, state.t, problem)
    twist = trace_array(comps, problem.chi.comps - split_hessian(problem.log_omega, total))
    dz, ds = gradient_array(pd, total)
    inv0 = inverse_array(problem.omega0.comps)
    grad = inv0[0] * np.abs(dz) ** 2 + inv0[1] * np.abs(ds) ** 2 \
        + 2 * np.real((inv0[2] + 1j * inv0[3]) * np.conj(dz) * ds)
    grad = np.sqrt(np.maximum(grad, 0.0))
    if phi_inf is None:
        gap = float(np.max(np.abs(phi[region])))
    else:
        gap = float(np.max(np.abs(phi - _pull(phi_inf, total))[region]))
    fnorm = float(np.max(comps[0][region]))
    sch = schwarz_residual(prev, state, problem) if prev is not None else float("nan")
    return MonitorRecord(
        t=state.t, phi_sup=float(phi.max()), phi_inf=float(phi.min()),
        phidot_sup=float(pd.max()), phidot_inf=float(pd.min()),
        phidot_region_sup=float(np.max(np.abs(pd[region]))),
        u_sup=float(u.max()), u_inf=float(u.min()),
        tr_chi_sup=float(tr_chi.max()), tr_omega0_sup=float(tr0.max()),
        fiber_area_min=float(area.min()), fiber_area_max=float(area.max()),
        fiber_osc_sup=float(osc.max()),
        fiber_lap_inf=float(lap_fiber.min()), fiber_lap_sup=float(lap_fiber.max()),
        fiber_norm=fnorm,
        scalar_inf=float(direct.min()), scalar_sup=float(direct.max()),
        scalar_gap=float(np.max(np.abs(direct - ident))),
        twist_sup=float(np.max(np.abs(twist))),
        schwarz=sch, schwarz_u_sup=schwarz_max(state, problem),
        grad_phidot_sup=float(np.max(grad[region])), limit_gap=gap,
        dt=state.dt, retries=state.retries)


# ----------------------------------------------------------------------------
# driver


def limit_potential(problem: FlowProblem):
    """Companion base solution ``phi_inf`` of ``Delta_chi phi = F e^phi - 1``."""
    from .gke import GKEProblem, solve_gke
    from .semiflat import density_from_volume, semiflat_form

    base = problem.total.base
    sf = semiflat_form(problem.config)
    F = density_from_volume(ScalarField(problem.total, problem.omega_density), sf,
                            problem.config.chi)
    sol = solve_gke(GKEProblem(base, problem.config.chi, F))
    return sol.phi.values


def fit_decay(times, values, window=None):
    """Slope of ``log(values)`` against ``t`` over ``[t0, t1]``."""
    t = np.asarray(times, float)
    v = np.asarray(values, float)
    if window is not None:
        sel = (t >= window[0] - 1e-12) & (t <= window[1] + 1e-12)
        t, v = t[sel], v[sel]
    if t.size < 2:
        raise ValueError("need at least two samples to fit a decay rate")
    slope, _ = np.polyfit(t, np.log(v), 1)
    return float(slope)


def run_flow(problem: FlowProblem, phi0=None, phi_inf=None, snapshot_every: Optional[float] = None,
             progress=None):
    """Integrate to ``t_max``; returns ``(MonitorSeries, snapshots)``.

    Monitors are recorded every ``monitor_every`` in time (each record's
    Schwarz entry uses the step that reaches it; the ``t = 0`` entry uses an
    auxiliary CFL-limited RK4 step, since the first implicit step carries the
    initial-layer error).  Snapshots are ``(t, phi)`` pairs.  The summary's
    ``fiber_area_error`` is the worst fiber-area deviation over every
    accepted step, not only the monitored ones.
    """
    start = time.perf_counter()
    if phi_inf is None:
        phi_inf = limit_potential(problem)
    state = initial_state(problem, phi0)
    series = MonitorSeries()
    snaps = []
    eps = 1e-9
    next_mon = problem.monitor_every
    next_snap = snapshot_every if snapshot_every else None
    if snapshot_every:
        snaps.append((0.0, state.phi.copy()))
    first = None
    prev = state
    area_err = 0.0
    while state.t < problem.t_max - eps:
        dt = min(problem.dt, problem.t_max - state.t)
        if next_mon is not None:
            dt = min(dt, max(next_mon - state.t, eps))
        prev, state = state, step(state, problem, dt=dt)
        area = fiber_area(state.omega, problem.config.y.values) / (math.exp(-state.t) * problem.area)
        area_err = max(area_err, float(np.max(np.abs(area - 1.0))))
        if first is None:
            first = monitors(prev, problem, phi_inf, prev=None)
            probe = step(prev, problem, dt=dt, scheme="rk4")
            first.schwarz = schwarz_residual(prev, probe, problem)
            series.append(first)
        if state.t >= next_mon - eps or state.t >= problem.t_max - eps:
            series.append(monitors(state, problem, phi_inf, prev=prev))
            next_mon += problem.monitor_every
            if progress:
                progress(series.records[-1])
        if next_snap is not None and state.t >= next_snap - eps:
            snaps.append((state.t, state.phi.copy()))
            next_snap += snapshot_every
    t = series.column("t")
    fn = series.column("fiber_norm")
    window = (max(0.0, problem.t_max - 4.0), problem.t_max)
    series.summary = {
        "decay_exponent": fit_decay(t, fn, window) if np.sum(t >= window[0]) >= 2 else float("nan"),
        "limit_gap": series.records[-1].limit_gap,
        "phidot_region_sup": series.records[-1].phidot_region_sup,
        "steps": state.steps,
        "retries": state.retries,
        "fiber_area_error": area_err,
        "runtime": time.perf_counter() - start,
    }
    series.meta.update(grid=tuple(problem.total.shape), wall_time=series.summary["runtime"])
    return series, snaps
