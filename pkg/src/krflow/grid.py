"""Periodic and annular grids with complex-differential operators.

Conventions used throughout the package:

* A chart coordinate ``w = x + i y`` has ``d_w d_wbar f = (f_xx + f_yy) / 4``.
* ``i dw ^ dwbar = 2 dx ^ dy``.  A base (1,1)-form ``i g dw ^ dwbar`` therefore
  has density ``2 g`` against ``dx ^ dy``.
* Hermitian fields store coefficients ``g_{a b}`` of ``i g_{a b} dw_a ^ dw_b``.
  On the total space the order is ``(g_zz, g_ss, Re g_zs, Im g_zs)`` with
  fiber coordinate ``z = x3 + i x4`` and base coordinate ``s = x1 + i x2``.
* ``(i dz ^ dzbar) ^ (i ds ^ dsbar) = WEDGE_JACOBIAN dx1 dx2 dx3 dx4`` and
  ``omega^2 = 2 det(g) (i dz ^ dzbar) ^ (i ds ^ dsbar)``.  Volume forms such as
  ``Omega`` are stored as densities against ``dx1 dx2 dx3 dx4``.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
import scipy.fft as sfft

WEDGE_JACOBIAN = 4.0


def fft_workers() -> int:
    """Thread count for FFT kernels, read from ``KRFLOW_THREADS`` (default 1)."""
    try:
        return max(1, int(os.environ.get("KRFLOW_THREADS", "1")))
    except ValueError:
        return 1


class PositivityError(ValueError):
    """Raised when a Hermitian field that must be positive is not."""

    def __init__(self, message, point=None, min_eig=None):
        super().__init__(message)
        self.point = point
        self.min_eig = min_eig


# ----------------------------------------------------------------------------
# grids


@dataclass(frozen=True)
class BaseGrid:
    """Grid on the base curve.

    ``chart="torus"``: ``n1 x n2`` nodes on ``[0, 1)^2`` with ``s = x1 + i x2``.
    ``chart="annulus"``: ``n1`` radial nodes (both ends included) on
    ``[rho_min, rho_max]`` and ``n2`` angular nodes, ``s = exp(rho + i theta)``.
    """

    chart: str
    n1: int
    n2: int
    rho_min: float = -1.0
    rho_max: float = 0.0

    def __post_init__(self):
        if self.chart not in ("torus", "annulus"):
            raise ValueError(f"unknown chart {self.chart!r}")
        for n in (self.n1, self.n2):
            if n < 8 or n % 2:
                raise ValueError(f"resolution {n} must be even and >= 8")
        if self.chart == "annulus":
            if not self.rho_min < 0:
                raise ValueError("rho_min must be negative")
            if not self.rho_min < self.rho_max <= 0:
                raise ValueError("need rho_min < rho_max <= 0")

    @property
    def shape(self):
        return (self.n1, self.n2)

    @property
    def size(self):
        return self.n1 * self.n2

    @property
    def spacing(self):
        if self.chart == "torus":
            return (1.0 / self.n1, 1.0 / self.n2)
        return ((self.rho_max - self.rho_min) / (self.n1 - 1), 2 * np.pi / self.n2)

    def axes(self):
        """1-D coordinate arrays along each grid direction."""
        if self.chart == "torus":
            return np.arange(self.n1) / self.n1, np.arange(self.n2) / self.n2
        rho = np.linspace(self.rho_min, self.rho_max, self.n1)
        theta = 2 * np.pi * np.arange(self.n2) / self.n2
        return rho, theta

    def mesh(self):
        a, b = self.axes()
        return np.meshgrid(a, b, indexing="ij")

    def points(self) -> np.ndarray:
        """Complex coordinate ``s`` at every node."""
        a, b = self.mesh()
        if self.chart == "torus":
            return a + 1j * b
        return np.exp(a + 1j * b)

    def radius(self) -> np.ndarray:
        return np.abs(self.points())

    def refined(self, factor=2, **changes):
        kw = dict(chart=self.chart, n1=self.n1 * factor, n2=self.n2 * factor,
                  rho_min=self.rho_min, rho_max=self.rho_max)
        if self.chart == "annulus":
            kw["n1"] = (self.n1 - 1) * factor + 1
            kw["n1"] += kw["n1"] % 2
        kw.update(changes)
        return BaseGrid(**kw)


@dataclass(frozen=True)
class TotalGrid:
    """Torus base times the unit-square fiber; all four directions periodic."""

    base: BaseGrid
    m1: int
    m2: int

    def __post_init__(self):
        if self.base.chart != "torus":
            raise ValueError("total-space grids require a torus base")
        for n in (self.m1, self.m2):
            if n < 8 or n % 2:
                raise ValueError(f"fiber resolution {n} must be even and >= 8")

    @property
    def shape(self):
        return (self.base.n1, self.base.n2, self.m1, self.m2)

    @property
    def size(self):
        return int(np.prod(self.shape))

    @property
    def spacing(self):
        return self.base.spacing + (1.0 / self.m1, 1.0 / self.m2)

    def mesh(self):
        axes = [np.arange(n) / n for n in self.shape]
        return np.meshgrid(*axes, indexing="ij")


@dataclass
class ScalarField:
    grid: BaseGrid | TotalGrid
    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.shape != self.grid.shape:
            raise ValueError(f"field shape {self.values.shape} != grid shape {self.grid.shape}")


@dataclass
class HermitianField:
    """Pointwise Hermitian matrices; see module docstring for storage order."""

    grid: BaseGrid | TotalGrid
    comps: np.ndarray
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.comps = np.asarray(self.comps, dtype=float)
        k = 4 if isinstance(self.grid, TotalGrid) else 1
        if self.comps.shape != (k,) + self.grid.shape:
            raise ValueError(f"expected components of shape {(k,) + self.grid.shape}")

    @property
    def total(self) -> bool:
        return isinstance(self.grid, TotalGrid)

    @property
    def gzz(self):
        return self.comps[0]

    @property
    def gss(self):
        return self.comps[1] if self.total else self.comps[0]

    @property
    def gzs(self):
        return self.comps[2] + 1j * self.comps[3]

    def __add__(self, other):
        return HermitianField(self.grid, self.comps + other.comps)

    def __sub__(self, other):
        return HermitianField(self.grid, self.comps - other.comps)

    def scaled(self, c):
        return HermitianField(self.grid, c * self.comps)


def base_form(grid: BaseGrid, coeff) -> HermitianField:
    """Base (1,1)-form ``i coeff ds ^ dsbar``."""
    return HermitianField(grid, np.broadcast_to(coeff, grid.shape)[None].copy())


def pullback(total: TotalGrid, base_coeff) -> HermitianField:
    """Pull back a base coefficient to a fiber-constant total-space form."""
    comps = np.zeros((4,) + total.shape)
    comps[1] = np.asarray(base_coeff)[:, :, None, None]
    return HermitianField(total, comps)


def fiber_form(total: TotalGrid, coeff) -> HermitianField:
    """Total-space form ``i coeff dz ^ dzbar`` (coeff broadcast over the grid)."""
    comps = np.zeros((4,) + total.shape)
    comps[0] = coeff
    return HermitianField(total, comps)


# ----------------------------------------------------------------------------
# spectral and finite-difference machinery


@lru_cache(maxsize=64)
def _ik(n: int, length: float = 1.0, real_axis: bool = False) -> np.ndarray:
    """First-derivative multipliers ``i k`` with the Nyquist mode zeroed."""
    if real_axis:
        k = np.arange(n // 2 + 1, dtype=float)
    else:
        k = np.fft.fftfreq(n, 1.0 / n)
    k = k * (2 * np.pi / length)
    k[np.abs(np.round(k * length / (2 * np.pi))) == n // 2] = 0.0
    out = 1j * k
    out.setflags(write=False)
    return out


def _multipliers(shape, lengths):
    """Broadcastable ``i k`` arrays for an ``rfftn`` transform of ``shape``."""
    d = len(shape)
    out = []
    for ax, (n, L) in enumerate(zip(shape, lengths)):
        m = _ik(n, L, real_axis=(ax == d - 1))
        sh = [1] * d
        sh[ax] = m.size
        out.append(m.reshape(sh))
    return out


def spectral_derivatives(values: np.ndarray, orders, lengths=None):
    """Spectral derivatives of a periodic real array.

    ``orders`` is a list of tuples of axis indices; ``(0, 2)`` means
    ``d_0 d_2``.  Second derivatives are products of first-derivative
    multipliers, so discrete integration by parts holds exactly.
    """
    shape = values.shape
    lengths = lengths or (1.0,) * len(shape)
    ik = _multipliers(shape, lengths)
    axes = tuple(range(len(shape)))
    hat = sfft.rfftn(values, axes=axes, workers=fft_workers())
    res = []
    for o in orders:
        mult = 1.0
        for ax in o:
            mult = mult * ik[ax]
        res.append(sfft.irfftn(hat * mult, s=shape, axes=axes, workers=fft_workers()))
    return res


def fd_weights(offsets, deriv: int) -> np.ndarray:
    """Finite-difference weights on integer ``offsets`` (unit spacing)."""
    offsets = np.asarray(offsets, dtype=float)
    n = offsets.size
    A = np.vander(offsets, n, increasing=True).T
    rhs = np.zeros(n)
    rhs[deriv] = float(np.prod(np.arange(1, deriv + 1)))
    return np.linalg.solve(A, rhs)


@lru_cache(maxsize=32)
def radial_stencils(n: int, deriv: int):
    """Fourth-order stencils along a non-periodic axis of ``n`` nodes.

    Returns a list of ``(row, columns, weights)`` for unit spacing.  Interior
    rows use centered 5-point stencils; the two rows at each end use
    one-sided 6-point stencils.
    """
    if n < 8:
        raise ValueError(f"radial resolution {n} too small for the boundary stencils (need >= 8)")
    rows = []
    for i in range(n):
        if 2 <= i <= n - 3:
            cols = np.arange(i - 2, i + 3)
        elif i < 2:
            cols = np.arange(0, 6)
        else:
            cols = np.arange(n - 6, n)
        rows.append((i, cols, fd_weights(cols - i, deriv)))
    return rows


def radial_derivative(values: np.ndarray, h: float, deriv: int) -> np.ndarray:
    """Apply the fourth-order radial stencil along axis 0."""
    out = np.zeros_like(values)
    for i, cols, w in radial_stencils(values.shape[0], deriv):
        out[i] = np.tensordot(w, values[cols], axes=(0, 0))
    return out / h**deriv


def radial_matrix(n: int, h: float, deriv: int):
    """Sparse matrix of :func:`radial_derivative`."""
    import scipy.sparse as sp

    r, c, v = [], [], []
    for i, cols, w in radial_stencils(n, deriv):
        r.extend([i] * cols.size)
        c.extend(cols)
        v.extend(w / h**deriv)
    return sp.csr_matrix((v, (r, c)), shape=(n, n))


def angular_derivatives(values: np.ndarray, orders):
    """Spectral derivatives along axis 1 (period ``2 pi``)."""
    n = values.shape[1]
    ik = _ik(n, 2 * np.pi, real_axis=True)[None, :]
    hat = sfft.rfft(values, axis=1, workers=fft_workers())
    return [sfft.irfft(hat * ik**k, n=n, axis=1, workers=fft_workers()) for k in orders]


def angular_matrix(n: int, deriv: int) -> np.ndarray:
    """Dense matrix of the spectral angular derivative."""
    eye = np.eye(n)
    return angular_derivatives(eye.T, [deriv])[0].T


def _check_finite(values):
    if not np.all(np.isfinite(values)):
        bad = np.argwhere(~np.isfinite(values))[0]
        raise ValueError(f"non-finite value at grid index {tuple(int(i) for i in bad)}")


# ----------------------------------------------------------------------------
# operations


def hessian_array(values: np.ndarray, grid) -> np.ndarray:
    """Complex Hessian components of a raw array (see :func:`complex_hessian`)."""
    if isinstance(grid, TotalGrid):
        shape = values.shape
        k1, k2, k3, k4 = _multipliers(shape, (1.0,) * 4)
        hat = sfft.rfftn(values, workers=fft_workers())
        mults = [(k3 * k3 + k4 * k4) / 4, (k1 * k1 + k2 * k2) / 4,
                 (k3 * k1 + k4 * k2) / 4, (k3 * k2 - k4 * k1) / 4]
        return np.stack([sfft.irfftn(hat * m, s=shape, workers=fft_workers()) for m in mults])
    if grid.chart == "torus":
        a, b = spectral_derivatives(values, [(0, 0), (1, 1)])
        return ((a + b) / 4)[None]
    h = grid.spacing[0]
    rho = grid.axes()[0][:, None]
    frr = radial_derivative(values, h, 2)
    (ftt,) = angular_derivatives(values, [2])
    return (np.exp(-2 * rho) * (frr + ftt) / 4)[None]


def complex_hessian(phi: ScalarField) -> HermitianField:
    """Matrix of mixed complex second derivatives of ``phi``.

    Torus charts are differentiated spectrally.  Annulus charts combine
    spectral angular derivatives with fourth-order radial differences and
    convert from ``(rho, theta)`` to ``s`` by the chain rule:
    ``d_s d_sbar = exp(-2 rho) (d_rho^2 + d_theta^2) / 4``.
    """
    _check_finite(phi.values)
    return HermitianField(phi.grid, hessian_array(phi.values, phi.grid))


def gradient_array(values: np.ndarray, grid):
    """Holomorphic derivatives as complex arrays: ``(d_z f, d_s f)`` or ``(d_s f,)``."""
    if isinstance(grid, TotalGrid):
        f1, f2, f3, f4 = spectral_derivatives(values, [(0,), (1,), (2,), (3,)])
        return (f3 - 1j * f4) / 2, (f1 - 1j * f2) / 2
    if grid.chart == "torus":
        f1, f2 = spectral_derivatives(values, [(0,), (1,)])
        return ((f1 - 1j * f2) / 2,)
    rho, theta = grid.mesh()
    fr = radial_derivative(values, grid.spacing[0], 1)
    (ft,) = angular_derivatives(values, [1])
    # d_s = exp(-(rho + i theta)) (d_rho - i d_theta) / 2
    return (np.exp(-(rho + 1j * theta)) * (fr - 1j * ft) / 2,)


def det_array(comps: np.ndarray) -> np.ndarray:
    if comps.shape[0] == 1:
        return comps[0].copy()
    return comps[0] * comps[1] - (comps[2] ** 2 + comps[3] ** 2)


def ma_density(g: HermitianField) -> ScalarField:
    """Pointwise determinant of ``g``.

    On the total space this is the density of ``omega^2 / 2`` against
    ``(i dz ^ dzbar) ^ (i ds ^ dsbar)``; on the base it is the coefficient of
    ``omega`` against ``i ds ^ dsbar``.  Multiply by :data:`WEDGE_JACOBIAN`
    (total) or 2 (base) for densities against Lebesgue measure.
    """
    return ScalarField(g.grid, det_array(g.comps))


def min_eigenvalue(comps: np.ndarray) -> np.ndarray:
    if comps.shape[0] == 1:
        return comps[0]
    a, b = comps[0], comps[1]
    return 0.5 * (a + b) - np.sqrt(0.25 * (a - b) ** 2 + comps[2] ** 2 + comps[3] ** 2)


def max_eigenvalue(comps: np.ndarray) -> np.ndarray:
    if comps.shape[0] == 1:
        return comps[0]
    a, b = comps[0], comps[1]
    return 0.5 * (a + b) + np.sqrt(0.25 * (a - b) ** 2 + comps[2] ** 2 + comps[3] ** 2)


def check_positive(comps: np.ndarray, what="metric"):
    lam = min_eigenvalue(comps)
    if not np.all(lam > 0):
        idx = np.unravel_index(int(np.argmin(np.where(np.isnan(lam), -np.inf, lam))), lam.shape)
        v = float(lam[idx])
        raise PositivityError(
            f"{what} not positive definite at grid index {tuple(int(i) for i in idx)}: "
            f"minimum eigenvalue {v:.6g}", point=tuple(int(i) for i in idx), min_eig=v)


def inverse_array(comps: np.ndarray) -> np.ndarray:
    """Components of the inverse matrix ``g^{-1}`` in the same storage order."""
    if comps.shape[0] == 1:
        return 1.0 / comps
    det = det_array(comps)
    return np.stack([comps[1] / det, comps[0] / det, -comps[2] / det, -comps[3] / det])


def trace_array(comps: np.ndarray, alpha: np.ndarray) -> np.ndarray:
    """``g^{a b} alpha_{a b}`` for raw component arrays (no positivity check)."""
    if comps.shape[0] == 1:
        return alpha[0] / comps[0]
    det = det_array(comps)
    cross = comps[2] * alpha[2] + comps[3] * alpha[3]
    return (comps[1] * alpha[0] + comps[0] * alpha[1] - 2 * cross) / det


def trace_pair(g: HermitianField, alpha: HermitianField) -> ScalarField:
    """Pointwise trace ``g^{a b} alpha_{a b}``; ``g`` must be positive definite."""
    if g.grid != alpha.grid:
        raise ValueError("fields live on different grids")
    check_positive(g.comps)
    return ScalarField(g.grid, trace_array(g.comps, alpha.comps))


def _laplacian_symbol(shape):
    ik = _multipliers(shape, (1.0,) * len(shape))
    sym = 0.0
    for m in ik:
        sym = sym + m * m
    return sym


def poisson_solve(rhs: ScalarField, return_mean: bool = False):
    """Zero-mean solution of ``Laplacian psi = rhs`` on a periodic chart.

    The mean of ``rhs`` is removed first; with ``return_mean`` the removed
    mean is returned alongside the solution.  Modes annihilated by the
    discrete Laplacian (the mean and the Nyquist lines) are set to zero.
    """
    grid = rhs.grid
    if isinstance(grid, BaseGrid) and grid.chart != "torus":
        raise ValueError("poisson_solve supports torus charts only")
    _check_finite(rhs.values)
    mean = float(np.mean(rhs.values))
    shape = rhs.values.shape
    axes = tuple(range(len(shape)))
    hat = sfft.rfftn(rhs.values - mean, axes=axes, workers=fft_workers())
    sym = _laplacian_symbol(shape).real
    sym = np.broadcast_to(sym, hat.shape)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.where(sym != 0, hat / np.where(sym != 0, sym, 1.0), 0.0)
    psi = sfft.irfftn(out, s=shape, axes=axes, workers=fft_workers())
    psi -= np.mean(psi)
    res = ScalarField(grid, psi)
    return (res, mean) if return_mean else res


def laplacian_array(values: np.ndarray) -> np.ndarray:
    """Euclidean Laplacian of a periodic array (spectral)."""
    d = spectral_derivatives(values, [(i, i) for i in range(values.ndim)])
    return sum(d)


def quadrature_weights(grid: BaseGrid) -> np.ndarray:
    """Area weights: periodic trapezoid, with ``|s|^2`` Jacobian on annuli."""
    if grid.chart == "torus":
        return np.full(grid.shape, 1.0 / grid.size)
    hr, ht = grid.spacing
    w = np.full(grid.n1, hr)
    w[0] = w[-1] = hr / 2
    rho = grid.axes()[0]
    return np.broadcast_to((w * np.exp(2 * rho))[:, None] * ht, grid.shape)


def integrate_array(values: np.ndarray, grid) -> float:
    if isinstance(grid, TotalGrid):
        return float(np.mean(values))
    return float(np.sum(values * quadrature_weights(grid)))


def integrate(f: ScalarField) -> float:
    """Chart-aware quadrature of ``f`` against Lebesgue measure of the chart."""
    return integrate_array(f.values, f.grid)


def fiber_mean(values: np.ndarray) -> np.ndarray:
    """Average over the two fiber directions of a total-space array."""
    return values.mean(axis=(2, 3))


def fiber_area(g: HermitianField, y_tau=1.0) -> np.ndarray:
    """``int_fiber g`` at each base point.

    The unit square parametrizes the fundamental domain of ``Z + Z tau``
    with Jacobian ``Im tau``; with ``i dz ^ dzbar = 2 dx dy`` the fiber
    area is ``2 Im(tau) mean(g_zz)``.
    """
    return 2.0 * np.asarray(y_tau) * fiber_mean(g.gzz)
