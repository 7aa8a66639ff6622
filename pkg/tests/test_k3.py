import numpy as np
import pytest

from krflow.grid import BaseGrid, TotalGrid
from krflow.k3 import (family_schedule, limit_check, limit_density, make_family_problem,
                       solve_family)


def dft_first_derivative(n):
    k = np.fft.fftfreq(n, 1.0 / n) * 2 * np.pi
    k[n // 2] = 0.0
    return np.real(np.fft.ifft(1j * k[:, None] * np.fft.fft(np.eye(n), axis=0), axis=0))


def kron_op(shape, axes):
    """Dense operator applying the spectral first derivative along each of ``axes``."""
    out = np.ones((1, 1))
    for k, n in enumerate(shape):
        m = np.eye(n)
        for a in axes:
            if a == k:
                m = dft_first_derivative(n) @ m
        out = np.kron(out, m)
    return out


def null_modes(shape):
    """Orthonormal modes at frequency 0 or Nyquist on every axis."""
    idx = np.meshgrid(*[np.arange(n) for n in shape], indexing="ij")
    modes = []
    for bits in np.ndindex(2, 2, 2, 2):
        v = np.ones(shape)
        for b, i in zip(bits, idx):
            v = v * (-1.0) ** (b * i)
        modes.append(v.ravel() / np.sqrt(v.size))
    return np.array(modes).T


def dense_family_leg(problem, t, iters=15):
    """Reference Newton with dense spectral matrices; null modes are pinned."""
    shape = problem.total.shape
    hz = (kron_op(shape, (2, 2)) + kron_op(shape, (3, 3))) / 4
    hs = (kron_op(shape, (0, 0)) + kron_op(shape, (1, 1))) / 4
    hre = (kron_op(shape, (2, 0)) + kron_op(shape, (3, 1))) / 4
    him = (kron_op(shape, (2, 1)) - kron_op(shape, (3, 0))) / 4
    N = null_modes(shape)
    ref = (problem.chi.comps + t * problem.omega1.comps).reshape(4, -1)
    omega = problem.omega_density.ravel()
    det_ref = ref[0] * ref[1] - ref[2] ** 2 - ref[3] ** 2
    C = 8.0 * det_ref.mean() / omega.mean()
    phi = np.zeros(omega.size)
    for _ in range(iters):
        g = ref + np.stack([hz @ phi, hs @ phi, hre @ phi, him @ phi])
        det = g[0] * g[1] - g[2] ** 2 - g[3] ** 2
        res = np.log(8.0 * det) - np.log(C * omega)
        if np.max(np.abs(res)) <= 1e-14:
            break
        J = (g[1][:, None] * hz + g[0][:, None] * hs
             - 2 * (g[2][:, None] * hre + g[3][:, None] * him)) / det[:, None]
        delta = np.linalg.solve(J + N @ N.T, -res)
        phi = phi + delta - N @ (N.T @ delta)
    phi -= np.sum(phi * omega) / np.sum(omega)
    return phi.reshape(shape), float(np.max(np.abs(res)))


def wavy_density(total):
    x1, x2, x3, x4 = total.mesh()
    return (1 + 0.2 * np.cos(2 * np.pi * x1)) * (1 + 0.1 * np.cos(2 * np.pi * (x3 + x4))) \
        * (1 + 0.05 * np.sin(2 * np.pi * x2))


def test_newton_krylov_matches_dense_reference():
    base = BaseGrid("torus", 8, 8)
    total = TotalGrid(base, 8, 8)
    problem = make_family_problem(base, (8, 8), density=wavy_density(total), schedule=(0.5,))
    ref, res = dense_family_leg(problem, 0.5)
    assert res <= 1e-11
    leg = solve_family(problem).legs[-1]
    assert np.max(np.abs(leg.phi - ref)) <= 1e-9


def test_schedule():
    s = family_schedule(1e-3, 3)
    assert len(s) == 10 and s[0] == 1.0 and s[-1] == pytest.approx(1e-3)
    assert all(b < a for a, b in zip(s, s[1:]))
    assert family_schedule(1.0) == (1.0,)
    with pytest.raises(ValueError):
        family_schedule(0.0)


def test_problem_validation():
    base = BaseGrid("torus", 8, 8)
    with pytest.raises(ValueError):
        make_family_problem(base, schedule=(0.1, 0.5))
    with pytest.raises(ValueError):
        make_family_problem(base, density=-1.0)
    p = make_family_problem(base, density=5.0)
    assert p.mass == pytest.approx(5.0 * 8.0 * 0.5)
    assert np.mean(p.omega_density) == pytest.approx(1.0)


def test_family_diagnostics():
    base = BaseGrid("torus", 8, 8)
    total = TotalGrid(base, 8, 8)
    sol = solve_family(make_family_problem(base, density=wavy_density(total),
                                           schedule=family_schedule(1e-2, 2)))
    assert np.max(sol.column("mass_error")) <= 1e-12
    assert np.max(np.abs(sol.column("normalization"))) <= 1e-14
    assert np.max(sol.column("residual")) <= 1e-11
    # the class volume of chi + t omega_1 is C_0 + O(t)
    C = sol.column("class_volume")
    assert np.all(np.diff(C) < 0)


def test_warm_start_saves_iterations():
    base = BaseGrid("torus", 8, 8)
    total = TotalGrid(base, 8, 8)
    dens = wavy_density(total)
    warm = solve_family(make_family_problem(base, density=dens, schedule=family_schedule(1e-2, 2)))
    cold = solve_family(make_family_problem(base, density=dens, schedule=(warm.legs[-1].t,)))
    assert np.max(np.abs(cold.legs[0].phi - warm.legs[-1].phi)) <= 1e-9
    assert warm.legs[-1].iterations <= cold.legs[0].iterations


def test_limit_potential_is_linear_in_density_perturbation():
    base = BaseGrid("torus", 16, 16)
    x1, x2 = base.mesh()
    g = np.cos(2 * np.pi * x1) * np.sin(2 * np.pi * x2)
    phis = []
    for eps in (0.05, 0.1):
        p = make_family_problem(base, density=1 + eps * g, schedule=(1.0,))
        lc = limit_check(solve_family(p))
        phis.append(lc.phi0.values - lc.phi0.values.mean())
    assert np.max(np.abs(phis[1] - 2 * phis[0])) <= 1e-12


def test_limit_density_and_wp_skip():
    base = BaseGrid("torus", 8, 8)
    total = TotalGrid(base, 8, 8)
    p = make_family_problem(base, density=wavy_density(total), schedule=(1.0,))
    F = limit_density(p)
    ratio = F.values / wavy_density(total).mean(axis=(2, 3))
    assert np.ptp(ratio) <= 1e-12 * ratio.max()
    lc = limit_check(solve_family(p))
    assert lc.wp_residual is None and "skipped" in lc.note
    forced = limit_check(solve_family(p), force=True)
    assert forced.wp_residual is not None
