"""Generalized Kaehler-Einstein equation on the base.

``lam = -1``: ``Delta_chi phi = F e^phi - 1``, i.e. ``chi + i d dbar phi = F e^phi chi``.
``lam = 0``:  ``Delta_chi phi = F - 1`` with zero mean.
Here ``Delta_chi phi = (d_s d_sbar phi) / chi_ss``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import scipy.fft as sfft
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .grid import (BaseGrid, HermitianField, PositivityError, ScalarField, _laplacian_symbol,
                   angular_matrix, check_positive, fft_workers, hessian_array, integrate_array,
                   poisson_solve, radial_matrix)
from .semiflat import DensityField


class NewtonDivergence(RuntimeError):
    def __init__(self, message, history=None, t=None):
        super().__init__(message)
        self.history = list(history or [])
        self.t = t


@dataclass
class GKEProblem:
    grid: BaseGrid
    chi: HermitianField
    F: DensityField
    lam: int = -1
    tol: Optional[float] = None
    max_iter: int = 50
    continuity_steps: int = 8
    max_halvings: int = 30
    divergence_window: int = 5

    def __post_init__(self):
        if self.lam not in (-1, 0):
            raise ValueError("lam must be -1 or 0")
        if not np.all(self.chi.gss > 0):
            raise ValueError("chi must be positive")
        if self.F.grid != self.grid or self.chi.grid != self.grid:
            raise ValueError("problem fields live on different grids")
        if self.tol is None:
            self.tol = residual_floor(self.grid)

    @property
    def density(self) -> np.ndarray:
        return self.F.values


@dataclass
class GKESolution:
    phi: ScalarField
    omega: HermitianField
    history: list
    problem: GKEProblem
    path: list = field(default_factory=list)

    @property
    def iterations(self) -> int:
        return len(self.history) - 1


# ----------------------------------------------------------------------------
# residuals and linear solves


def residual_floor(grid: BaseGrid, base: float = 1e-10) -> float:
    """Default Newton tolerance: ``base``, raised on annulus charts to a
    multiple of the round-off in ``e^(-2 rho) / h^2`` second differences."""
    if grid.chart == "torus":
        return base
    h = grid.spacing[0]
    amp = np.exp(-2.0 * grid.rho_min) / h**2
    return max(base, 1e3 * np.finfo(float).eps * amp)


def equation_residual(phi: np.ndarray, problem: GKEProblem, F: Optional[np.ndarray] = None):
    """Pointwise residual ``Delta_chi phi - F e^phi + 1`` (``lam = -1``)."""
    F = problem.density if F is None else F
    H = hessian_array(phi, problem.grid)[0]
    return H / problem.chi.gss - F * np.exp(phi) + 1.0


def _residual_vector(phi, problem, F):
    """Residual including annulus boundary rows (outer Dirichlet, inner
    extrapolated radial average)."""
    R = equation_residual(phi, problem, F)
    if problem.grid.chart == "annulus":
        R[-1] = phi[-1]
        R[0] = phi[0] - (2 * phi[1].mean() - phi[2].mean())
    return R


class _TorusOperator:
    """Solve ``-H psi + c psi = b`` by preconditioned CG (``H = d_s d_sbar``)."""

    def __init__(self, grid, c):
        self.shape = grid.shape
        self.c = c
        self.sym = -_laplacian_symbol(self.shape).real / 4.0
        self.pre = 1.0 / (self.sym + float(np.mean(c)))

    def matvec(self, v):
        v = v.reshape(self.shape)
        H = hessian_array(v, BaseGrid("torus", *self.shape))[0]
        return (-H + self.c * v).ravel()

    def precond(self, v):
        v = v.reshape(self.shape)
        hat = sfft.rfft2(v, workers=fft_workers())
        return sfft.irfft2(hat * self.pre, s=self.shape, workers=fft_workers()).ravel()

    def solve(self, b):
        n = b.size
        A = spla.LinearOperator((n, n), matvec=self.matvec, dtype=float)
        M = spla.LinearOperator((n, n), matvec=self.precond, dtype=float)
        x, info = spla.cg(A, b.ravel(), rtol=1e-14, atol=1e-300, maxiter=1000, M=M)
        if info > 0:
            # fall back to whatever CG reached; Newton damping absorbs the error
            pass
        return x.reshape(self.shape)


def _annulus_blocks(grid: BaseGrid, inner: str = "extrapolate"):
    """Scaled Laplacian, boundary-row mask and boundary-condition rows.

    The inner row either matches the linear extrapolation of the next two
    row averages (``extrapolate``) or has zero mean radial flux (``flux``).
    The harmonic ``log |s|`` satisfies the extrapolation condition, so the
    zeroth-order-free ``lam = 0`` problem needs the flux condition.
    """
    if inner not in ("extrapolate", "flux"):
        raise ValueError(f"unknown inner boundary condition {inner!r}")
    n1, n2 = grid.shape
    h = grid.spacing[0]
    rho = grid.axes()[0]
    D2r = radial_matrix(n1, h, 2)
    D2t = sp.csr_matrix(angular_matrix(n2, 2))
    lap = sp.kron(D2r, sp.eye(n2)) + sp.kron(sp.eye(n1), D2t)
    scale = sp.diags(np.repeat(np.exp(-2 * rho) / 4, n2))
    H = (scale @ lap).tocsr()
    # boundary rows
    rows = np.zeros(n1 * n2, bool)
    rows[:n2] = True
    rows[-n2:] = True
    bc = sp.lil_matrix((n1 * n2, n1 * n2))
    for j in range(n2):
        bc[j, j] = 1.0
        if inner == "extrapolate":
            bc[j, n2:2 * n2] = -2.0 / n2
            bc[j, 2 * n2:3 * n2] = 1.0 / n2
        else:
            # one-sided second-order d_rho phi = 0 for the row average
            bc[j, n2:2 * n2] = -4.0 / (3 * n2)
            bc[j, 2 * n2:3 * n2] = 1.0 / (3 * n2)
        k = (n1 - 1) * n2 + j
        bc[k, k] = 1.0
    return H, rows, bc.tocsr()


def _annulus_newton_matrix(grid, H, rows, bc, lam, c):
    keep = sp.diags((~rows).astype(float))
    J = keep @ (sp.diags(1.0 / lam.ravel()) @ H - sp.diags(c.ravel())) + bc
    return J.tocsc()


# ----------------------------------------------------------------------------
# solvers


def _newton(problem: GKEProblem, phi0: np.ndarray, F: np.ndarray, t=None):
    grid = problem.grid
    lam = problem.chi.gss
    phi = np.array(phi0, dtype=float, copy=True)
    R = _residual_vector(phi, problem, F)
    norm = float(np.max(np.abs(R)))
    history = [norm]
    bad = 0
    blocks = _annulus_blocks(grid) if grid.chart == "annulus" else None
    polished = False
    for _ in range(problem.max_iter):
        if norm <= problem.tol:
            if polished:
                break
            # one extra step once converged pushes the error to round-off
            polished = True
        c = F * np.exp(phi)
        if blocks is None:
            step = _TorusOperator(grid, lam * c).solve(lam * R)
        else:
            J = _annulus_newton_matrix(grid, *blocks, lam, c)
            step = -spla.spsolve(J, R.ravel()).reshape(grid.shape)
        alpha = 1.0
        accepted = False
        for _ in range(problem.max_halvings + 1):
            trial = phi + alpha * step
            Rt = _residual_vector(trial, problem, F)
            nt = float(np.max(np.abs(Rt)))
            if np.isfinite(nt) and nt < norm:
                accepted = True
                break
            alpha *= 0.5
        if not accepted and norm <= problem.tol:
            break
        if not accepted:
            bad += 1
            if bad >= problem.divergence_window:
                raise NewtonDivergence(
                    f"residual failed to decrease for {bad} consecutive damped steps"
                    + ("" if t is None else f" at t={t:g}"), history + [nt], t)
            if not np.isfinite(nt):
                continue
        else:
            bad = 0
        phi, R, norm = trial, Rt, nt
        history.append(norm)
    if norm > problem.tol:
        raise NewtonDivergence(f"Newton did not converge: residual {norm:.3g}"
                               + ("" if t is None else f" at t={t:g}"), history, t)
    return phi, history


def _omega(problem, phi) -> HermitianField:
    H = hessian_array(phi, problem.grid)
    return HermitianField(problem.grid, problem.chi.comps + H)


def _check_solution(problem, phi):
    omega = _omega(problem, phi)
    mask = np.ones(problem.grid.shape, bool)
    if problem.grid.chart == "annulus":
        mask[[0, -1]] = False  # boundary rows carry boundary conditions, not the equation
    comps = np.where(mask, omega.comps, 1.0)
    try:
        check_positive(comps, "omega_inf")
    except PositivityError as exc:
        raise PositivityError(f"solution lost positivity: {exc}", exc.point, exc.min_eig) from None
    return omega


def normalize_for_poisson(problem: GKEProblem) -> np.ndarray:
    """Rescale ``F`` so that ``int (F - 1) chi = 0``."""
    lam = problem.chi.gss
    F = problem.density
    return F * integrate_array(lam, problem.grid) / integrate_array(F * lam, problem.grid)


def solve_gke(problem: GKEProblem, init=None) -> GKESolution:
    """Solve the base equation by damped Newton (``lam = -1``) or one
    Poisson solve (``lam = 0``)."""
    grid = problem.grid
    lam = problem.chi.gss
    if problem.lam == 0:
        F = normalize_for_poisson(problem)
        if grid.chart == "torus":
            phi = poisson_solve(ScalarField(grid, 4.0 * lam * (F - 1.0))).values
        else:
            H, rows, bc = _annulus_blocks(grid, inner="flux")
            J = _annulus_newton_matrix(grid, H, rows, bc, lam, np.zeros(grid.shape))
            rhs = np.where(rows.reshape(grid.shape), 0.0, F - 1.0)
            phi = spla.spsolve(J, rhs.ravel()).reshape(grid.shape)
        H = hessian_array(phi, grid)[0]
        res = np.abs(H / lam - (F - 1.0))
        if grid.chart == "annulus":
            res = res[1:-1]  # boundary rows carry boundary conditions
        res = float(np.max(res))
        return GKESolution(ScalarField(grid, phi), _omega(problem, phi), [res], problem)
    phi0 = np.zeros(grid.shape) if init is None else np.asarray(init, dtype=float)
    phi, hist = _newton(problem, phi0, problem.density)
    return GKESolution(ScalarField(grid, phi), _check_solution(problem, phi), hist, problem)


def path_times(steps: int, ratio: float = 0.5):
    """Geometric schedule ``1, r, r^2, ..., r^(steps-1), 0``."""
    return [ratio**k for k in range(steps)] + [0.0]


def continuity_path(problem: GKEProblem, steps: Optional[int] = None, ratio: float = 0.5,
                    init=None) -> GKESolution:
    """Follow ``Delta_chi phi_t = e^phi (1/F + t)^(-1) - 1`` from ``t = 1`` to 0."""
    if problem.lam != -1:
        raise ValueError("the continuity path is defined for lam = -1")
    steps = problem.continuity_steps if steps is None else steps
    F = problem.density
    phi = np.zeros(problem.grid.shape) if init is None else np.asarray(init, dtype=float)
    path = []
    history = []
    for t in path_times(steps, ratio):
        Ft = F / (1.0 + t * F)
        phi, hist = _newton(problem, phi, Ft, t=t)
        path.append({"t": t, "iterations": len(hist) - 1, "residual": hist[-1],
                     "phi": phi.copy()})
        history = hist
    sol = GKESolution(ScalarField(problem.grid, phi), _check_solution(problem, phi), history,
                      problem, path)
    return sol


def uniqueness_probe(problem: GKEProblem, inits) -> float:
    """Maximum pairwise sup-distance of solutions started from ``inits``."""
    if problem.lam != -1:
        raise ValueError("uniqueness probes use lam = -1")
    inits = list(inits)
    if len(inits) < 2:
        raise ValueError("need at least two initial guesses")
    sols = []
    for g in inits:
        g = np.broadcast_to(np.asarray(g, dtype=float), problem.grid.shape)
        sols.append(solve_gke(problem, init=g).phi.values)
    dist = 0.0
    for i in range(len(sols)):
        for j in range(i + 1, len(sols)):
            dist = max(dist, float(np.max(np.abs(sols[i] - sols[j]))))
    return dist


def curvature_residual(sol: GKESolution, wp: HermitianField, section=None,
                       force: bool = False, threshold: float = 0.3, margin: int = 3) -> float:
    """Sup of ``|Ric(omega_inf) + omega_inf - omega_WP|`` on ``{|S|^2 >= threshold}``.

    ``omega_inf = F e^phi chi`` and ``Ric = -i d dbar log(F e^phi chi_ss)``.
    Refuses densities not produced by the consistency construction unless
    ``force`` is set.  Annulus charts drop ``margin`` rows at each end.
    """
    problem = sol.problem
    if not problem.F.consistent and not force:
        raise ValueError("density is not consistent; the curvature identity is not expected "
                         "to hold (pass force=True to evaluate anyway)")
    grid = problem.grid
    lam = problem.chi.gss
    phi = sol.phi.values
    logd = np.log(problem.density) + phi + np.log(lam)
    ric = -hessian_array(logd, grid)[0]
    res = np.abs(ric + np.exp(logd) - wp.gss)
    mask = np.ones(grid.shape, bool)
    if section is not None:
        mask &= section.values.values >= threshold
    if grid.chart == "annulus":
        mask[:margin] = False
        mask[grid.n1 - margin:] = False
    if not np.any(mask):
        raise ValueError("evaluation region is empty")
    return float(np.max(res[mask]))
