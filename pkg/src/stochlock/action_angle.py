"""Energy-angle charts of the limiting Hamiltonian system.

The chart maps (E, phi) to the point reached at time phi/nu(E) on the level
curve H = E, starting from the section {x2 = 0, x1 > 0}.  For H = |x|^2/2 the
map is explicit; otherwise orbits are integrated numerically and stored as
Fourier series in phi whose coefficients are cubic splines in sqrt(E).
"""

from __future__ import annotations

import csv
from pathlib import Path

import numpy as np
from scipy.integrate import solve_ivp
from scipy.interpolate import CubicSpline, make_interp_spline
from scipy.optimize import brentq

from .core import PhaseSchedule, SystemSpec
from .errors import ChartError

TWO_PI = 2.0 * np.pi


def wrap_angle(a):
    """Reduce to (-pi, pi]."""
    a = np.asarray(a, dtype=float)
    r = np.mod(a + np.pi, TWO_PI) - np.pi
    return np.where(r == -np.pi, np.pi, r)


def chart_geometry_from_derivatives(XE, Xp, XEE, XEp, Xpp):
    """Gradients and Hessians of E(x) and phi(x) from derivatives of x(E, phi).

    Returns (grad_H, grad_Phi, hess_H, hess_Phi) with the trailing shapes (2,)
    and (2, 2).  Uses d(J^-1) = -J^-1 dJ J^-1 for the Jacobian J = dx/d(E,phi).
    """
    J = np.stack([XE, Xp], axis=-1)
    G = np.linalg.inv(J)                      # G[c, a] = d c / d x_a
    dJ = (np.stack([XEE, XEp], axis=-1), np.stack([XEp, Xpp], axis=-1))
    dG = [-G @ dJc @ G for dJc in dJ]         # d G / d c
    hess = []
    for F in (0, 1):
        Hm = sum(dG[c][..., F, :][..., None, :] * G[..., c, :][..., :, None] for c in (0, 1))
        hess.append(0.5 * (Hm + np.swapaxes(Hm, -1, -2)))
    return G[..., 0, :], G[..., 1, :], hess[0], hess[1]


class OrbitChart:
    """Common interface; see HarmonicChart and NumericChart."""

    analytic_flag = False
    energy_cap: float
    nu0: float

    def nu(self, E):
        raise NotImplementedError

    def point(self, E, phi):
        raise NotImplementedError

    def energy(self, x):
        raise NotImplementedError

    def angle(self, x):
        raise NotImplementedError

    def derivatives(self, E, phi):
        raise NotImplementedError

    def geometry(self, x):
        """(grad_H, grad_Phi, hess_H, hess_Phi) at states x (..., 2)."""
        x = np.asarray(x, dtype=float)
        E = self.energy(x)
        phi = self.angle(x)
        _, XE, Xp, XEE, XEp, Xpp = self.derivatives(E, phi)
        return chart_geometry_from_derivatives(XE, Xp, XEE, XEp, Xpp)

    def _check_range(self, E):
        E = np.asarray(E, dtype=float)
        if np.any(E < 0) or np.any(E > self.energy_cap * (1 + 1e-12)):
            raise ChartError(f"energy outside chart range [0, {self.energy_cap}]")
        return E


class HarmonicChart(OrbitChart):
    """Closed-form chart for H = |x|^2/2: x = sqrt(2E) (cos phi, -sin phi)."""

    analytic_flag = True

    def __init__(self, energy_cap: float, grid_size: int = 64, n_samples: int = 64):
        self.energy_cap = float(energy_cap)
        self.nu0 = 1.0
        self.energy_grid = np.linspace(self.energy_cap / grid_size, self.energy_cap, grid_size)
        self.period_table = np.full(grid_size, TWO_PI)
        self.frequency_table = np.ones(grid_size)
        tt = np.linspace(0.0, TWO_PI, n_samples, endpoint=False)
        r = np.sqrt(2.0 * self.energy_grid)[:, None]
        self.sample_phases = tt
        self.orbit_samples = np.stack([r * np.cos(tt), -r * np.sin(tt)], axis=-1)

    def nu(self, E):
        return np.ones_like(np.asarray(E, dtype=float))

    def point(self, E, phi):
        E = self._check_range(E)
        r = np.sqrt(2.0 * E)
        return np.stack(np.broadcast_arrays(r * np.cos(phi), -r * np.sin(phi)), axis=-1)

    def energy(self, x):
        x = np.asarray(x, dtype=float)
        return 0.5 * (x[..., 0] ** 2 + x[..., 1] ** 2)

    def angle(self, x):
        x = np.asarray(x, dtype=float)
        return np.mod(np.arctan2(-x[..., 1], x[..., 0]), TWO_PI)

    def derivatives(self, E, phi):
        E, phi = np.broadcast_arrays(np.asarray(E, float), np.asarray(phi, float))
        r = np.sqrt(2.0 * E)
        c, s = np.cos(phi), np.sin(phi)
        u = np.stack([c, -s], axis=-1)        # direction of the point
        w = np.stack([-s, -c], axis=-1)       # d u / d phi
        rr = r[..., None]
        with np.errstate(divide="ignore", invalid="ignore"):
            X = rr * u
            XE = u / rr
            XEE = -u / rr ** 3
            XEp = w / rr
        Xp = rr * w
        Xpp = -rr * u
        return X, XE, Xp, XEE, XEp, Xpp

    def geometry(self, x):
        x = np.asarray(x, dtype=float)
        x1, x2 = x[..., 0], x[..., 1]
        r2 = x1 * x1 + x2 * x2
        grad_H = x.copy()
        grad_Phi = np.stack([x2 / r2, -x1 / r2], axis=-1)
        hess_H = np.broadcast_to(np.eye(2), x.shape[:-1] + (2, 2)).copy()
        r4 = r2 * r2
        hxx = -2.0 * x1 * x2 / r4
        hxy = (x1 * x1 - x2 * x2) / r4
        hess_Phi = np.stack([np.stack([hxx, hxy], -1), np.stack([hxy, -hxx], -1)], -2)
        return grad_H, grad_Phi, hess_H, hess_Phi


class NumericChart(OrbitChart):
    """Chart built from integrated orbits of the limiting field."""

    analytic_flag = False

    def __init__(self, rho_grid, nu_table, coeffs, energy_cap, nu0=1.0, hamiltonian=None,
                 hamiltonian_gradient=None, hamiltonian_hessian=None):
        # coeffs: complex array (n_rho, 2, n_modes) of Fourier coefficients c_n with
        # x_a(phi) = Re sum_n c_n exp(i n phi), n = 0..n_modes-1 (one-sided)
        self.rho_grid = np.asarray(rho_grid, dtype=float)
        self.energy_cap = float(energy_cap)
        self.nu0 = float(nu0)
        self.hamiltonian = hamiltonian
        self.hamiltonian_gradient = hamiltonian_gradient
        self.hamiltonian_hessian = hamiltonian_hessian
        self.coeffs = np.asarray(coeffs, dtype=complex)
        self.n_modes = self.coeffs.shape[-1]
        # quintic in rho keeps second derivatives (Hessians of the angle) accurate
        k = min(5, len(self.rho_grid) - 1)
        stacked = np.stack([self.coeffs.real, self.coeffs.imag], axis=-1)
        self._coef_spline_ri = make_interp_spline(self.rho_grid, stacked, k=max(1, k), axis=0)
        self._nu_spline = CubicSpline(self.rho_grid, np.asarray(nu_table, dtype=float))
        pos = self.rho_grid > 0
        self.energy_grid = self.rho_grid[pos] ** 2
        self.frequency_table = np.asarray(nu_table, dtype=float)[pos]
        self.period_table = TWO_PI / self.frequency_table
        n = 64
        self.sample_phases = np.linspace(0.0, TWO_PI, n, endpoint=False)
        self.orbit_samples = np.stack(
            [self.point(E, self.sample_phases) for E in self.energy_grid], axis=0)

    def nu(self, E):
        E = self._check_range(E)
        return self._nu_spline(np.sqrt(E))

    def _series(self, rho, phi, d_rho, d_phi):
        # returns sum_n c_n^(d_rho)(rho) (i n)^d_phi e^{i n phi}, real part, shape (..., 2)
        rho = np.asarray(rho, dtype=float)
        phi = np.asarray(phi, dtype=float)
        rho, phi = np.broadcast_arrays(rho, phi)
        flat_r = rho.ravel()
        flat_p = phi.ravel()
        out = np.empty(flat_r.shape + (2,))
        n = np.arange(self.n_modes)
        fac = (1j * n) ** d_phi
        for lo in range(0, flat_r.size, 4096):
            sl = slice(lo, lo + 4096)
            cri = self._coef_spline_ri(flat_r[sl], d_rho)      # (P, 2, M, 2)
            c = cri[..., 0] + 1j * cri[..., 1]
            e = np.exp(1j * np.outer(flat_p[sl], n))           # (P, M)
            out[sl] = np.real(np.einsum("pam,pm->pa", c * fac, e))
        return out.reshape(rho.shape + (2,))

    def point(self, E, phi):
        E = self._check_range(E)
        return self._series(np.sqrt(E), phi, 0, 0)

    def energy(self, x):
        return np.asarray(self.hamiltonian(np.asarray(x, dtype=float)), dtype=float)

    def angle(self, x, iterations: int = 12, tol: float = 1e-7):
        x = np.asarray(x, dtype=float)
        E = self._check_range(self.energy(x))
        rho = np.sqrt(E)
        phi = np.mod(np.arctan2(-x[..., 1], x[..., 0]), TWO_PI)
        for _ in range(iterations):
            X = self._series(rho, phi, 0, 0)
            Xp = self._series(rho, phi, 0, 1)
            Xpp = self._series(rho, phi, 0, 2)
            d = X - x
            g = np.sum(d * Xp, axis=-1)
            gp = np.sum(Xp * Xp, axis=-1) + np.sum(d * Xpp, axis=-1)
            phi = phi - g / gp
        resid = np.linalg.norm(self._series(rho, phi, 0, 0) - x, axis=-1)
        scale = np.maximum(np.linalg.norm(x, axis=-1), 1e-300)
        if np.any(resid > tol * np.maximum(scale, 1.0)):
            raise ChartError(f"angle inversion failed, residual {resid.max():.3e}")
        return np.mod(phi, TWO_PI)

    def derivatives(self, E, phi):
        E = self._check_range(E)
        rho = np.sqrt(E)
        rho_b = np.broadcast_to(rho, np.broadcast_shapes(np.shape(rho), np.shape(phi)))[..., None]
        X = self._series(rho, phi, 0, 0)
        Xr = self._series(rho, phi, 1, 0)
        Xrr = self._series(rho, phi, 2, 0)
        Xp = self._series(rho, phi, 0, 1)
        Xrp = self._series(rho, phi, 1, 1)
        Xpp = self._series(rho, phi, 0, 2)
        # d/dE = (1/(2 rho)) d/drho
        XE = Xr / (2.0 * rho_b)
        XEE = Xrr / (4.0 * rho_b ** 2) - Xr / (4.0 * rho_b ** 3)
        XEp = Xrp / (2.0 * rho_b)
        return X, XE, Xp, XEE, XEp, Xpp

    def geometry(self, x):
        gH, gP, hH, hP = super().geometry(x)
        x = np.asarray(x, dtype=float)
        # the Hamiltonian itself is known exactly; only the angle needs the chart
        if self.hamiltonian_gradient is not None:
            gH = np.asarray(self.hamiltonian_gradient(x), dtype=float)
            if self.hamiltonian_hessian is not None:
                hH = np.asarray(self.hamiltonian_hessian(x), dtype=float)
            else:
                hH = _fd_jacobian(self.hamiltonian_gradient, x)
        return gH, gP, hH, hP


def _fd_jacobian(f, x, h=1e-6):
    cols = []
    for a in range(2):
        e = np.zeros(2)
        e[a] = h
        cols.append((np.asarray(f(x + e)) - np.asarray(f(x - e))) / (2 * h))
    J = np.stack(cols, axis=-1)
    return 0.5 * (J + np.swapaxes(J, -1, -2))


def _limiting_rhs(spec: SystemSpec):
    def rhs(_t, y):
        g = np.asarray(spec.hamiltonian_gradient(np.asarray(y)), dtype=float)
        return [g[1], -g[0]]
    return rhs


def _section_point(spec: SystemSpec, E: float) -> float:
    H1 = lambda x1: float(spec.hamiltonian(np.array([x1, 0.0]))) - E
    r0 = spec.domain_radius
    if H1(r0) <= 0:
        raise ChartError(f"level set H={E} leaves the r0-ball along the section")
    return brentq(H1, 0.0, r0, xtol=1e-15, rtol=1e-15)


def _integrate_orbit(spec: SystemSpec, E: float, n_samples: int, max_periods: float = 20.0):
    x1 = _section_point(spec, E)
    rhs = _limiting_rhs(spec)

    def back_to_section(t, y):
        return y[1]
    back_to_section.direction = -1.0
    guess = TWO_PI / spec.nu0
    sol = solve_ivp(rhs, (0.0, max_periods * guess), [x1, 0.0], method="DOP853",
                    rtol=1e-12, atol=1e-14, events=back_to_section)
    times = [t for t in sol.t_events[0] if t > 0.25 * guess]
    if not times:
        raise ChartError(f"orbit at E={E} did not close within {max_periods} nominal periods")
    T = float(times[0])
    ts = np.linspace(0.0, T, n_samples, endpoint=False)
    sol2 = solve_ivp(rhs, (0.0, T), [x1, 0.0], method="DOP853", rtol=1e-12, atol=1e-14,
                     t_eval=ts)
    return T, sol2.y.T


def build_chart(spec: SystemSpec, grid_size: int = 48, n_samples: int = 128, energy_cap=None):
    """Chart for the limiting system of ``spec`` (closed form if harmonic)."""
    E0 = float(spec.energy_cap if energy_cap is None else energy_cap)
    if spec.harmonic:
        return HarmonicChart(E0, grid_size)
    rho = np.linspace(0.0, np.sqrt(E0), grid_size + 1)
    nus = [spec.nu0]
    coeffs = [np.zeros((2, n_samples // 2), dtype=complex)]
    for r in rho[1:]:
        E = r * r
        T, X = _integrate_orbit(spec, E, n_samples)
        nu = TWO_PI / T
        if nu == 0 or not np.isfinite(nu):
            raise ChartError(f"zero frequency at E={E}")
        F = np.fft.fft(X, axis=0) / n_samples            # (M, 2)
        half = n_samples // 2
        c = np.empty((2, half), dtype=complex)
        c[:, 0] = F[0].real
        c[:, 1:] = 2.0 * F[1:half].T
        nus.append(nu)
        coeffs.append(c)
    return NumericChart(rho, np.array(nus), np.array(coeffs), E0, spec.nu0, spec.hamiltonian,
                        spec.hamiltonian_gradient, spec.hamiltonian_hessian)


def to_energy_angle(chart: OrbitChart, x):
    """(E, phi) with phi in [0, 2 pi)."""
    E = chart.energy(x)
    if np.any(np.asarray(E) <= 0) or np.any(np.asarray(E) > chart.energy_cap * (1 + 1e-12)):
        raise ChartError("energy outside (0, E0]")
    return E, chart.angle(x)


def from_energy_angle(chart: OrbitChart, E, phi):
    return chart.point(E, phi)


def amplitude_phase(chart: OrbitChart, schedule: PhaseSchedule, ell: int, x, t):
    """R = t^(ell/q) sqrt(H(x)),  theta = Phi(x) - S(t)/kappa reduced to (-pi, pi]."""
    E = chart.energy(x)
    R = np.asarray(t, dtype=float) ** (ell / schedule.q) * np.sqrt(E)
    theta = wrap_angle(chart.angle(x) - schedule.phase(t) / schedule.kappa)
    return R, theta


def export_chart(chart: OrbitChart, directory) -> list:
    """Write chart.csv (E, T, nu) and orbit_samples.csv (E, phi, x1, x2)."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    p1 = d / "chart.csv"
    with open(p1, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["E", "T", "nu"])
        for E, T, nu in zip(chart.energy_grid, chart.period_table, chart.frequency_table):
            w.writerow([repr(float(E)), repr(float(T)), repr(float(nu))])
    p2 = d / "orbit_samples.csv"
    with open(p2, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["E", "phi", "x1", "x2"])
        for E, orbit in zip(chart.energy_grid, chart.orbit_samples):
            for ph, (a, b) in zip(chart.sample_phases, orbit):
                w.writerow([repr(float(E)), repr(float(ph)), repr(float(a)), repr(float(b))])
    return [p1, p2]


def import_chart(directory, hamiltonian, energy_cap=None, nu0=1.0, hamiltonian_gradient=None,
                 hamiltonian_hessian=None) -> NumericChart:
    """Rebuild a NumericChart from files written by export_chart."""
    d = Path(directory)
    tab = np.loadtxt(d / "chart.csv", delimiter=",", skiprows=1, ndmin=2)
    samp = np.loadtxt(d / "orbit_samples.csv", delimiter=",", skiprows=1, ndmin=2)
    Es = tab[:, 0]
    M = samp.shape[0] // len(Es)
    X = samp[:, 2:4].reshape(len(Es), M, 2)
    F = np.fft.fft(X, axis=1) / M
    half = M // 2
    c = np.empty((len(Es), 2, half), dtype=complex)
    c[:, :, 0] = F[:, 0, :].real
    c[:, :, 1:] = 2.0 * np.swapaxes(F[:, 1:half, :], 1, 2)
    rho = np.concatenate([[0.0], np.sqrt(Es)])
    c = np.concatenate([np.zeros((1, 2, half), dtype=complex), c], axis=0)
    nus = np.concatenate([[nu0], tab[:, 2]])
    cap = float(Es[-1] if energy_cap is None else energy_cap)
    return NumericChart(rho, nus, c, cap, nu0, hamiltonian, hamiltonian_gradient,
                        hamiltonian_hessian)
