"""Amplitude/phase-difference fields, the averaging transformation and the averaged system.

Variables: with E = t^(-2l/q) R^2 and phi = theta + S/kappa, Ito's formula
turns the planar system into drift/diffusion fields for (R, theta) whose
t^(-k/q) coefficients f_{1,k}, f_{2,k}, gamma_{1,k}, gamma_{2,k} are periodic
in theta (period 2 pi) and S (period 2 pi kappa).  A near-identity change

    v = R + sum_k t^(-k/q) v_k(R, theta, S),   psi = theta + sum_k t^(-k/q) psi_k

removes the S-dependence of the drift order by order; the resulting
S-independent coefficients Lambda_k(v, psi), Omega_k(v, psi) form the
averaged system.  Orders k <= 2 are implemented.

Numerics: fields are sampled on a tensor grid in (theta, S) at each R and
handled as 2-D FFT tables; S-averages are zeroth S-modes, the homological
equation is solved mode-wise, theta/S derivatives are spectral and
R-derivatives use a centred stencil R(1 +- h).  Amplitude dependence is
stored as Chebyshev interpolants on [0, R_max] of the field divided by R^p,
so the small-amplitude limit is regular.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Dict, Optional, Sequence

import numpy as np
from numpy.polynomial import chebyshev as C

from .action_angle import HarmonicChart, build_chart
from .core import SystemSpec
from .errors import (ClassificationAmbiguous, ConfigError, DegeneracyError,
                     HomologicalSolvabilityError, OutOfTheoryError, UnsupportedOrderError)

TWO_PI = 2.0 * np.pi
DEFAULT_PROBES = (1e-2, 10 ** -2.5, 1e-3)


# ---------------------------------------------------------------------------
# spectral helpers


def _spectral_derivative(values, axis, period, order=1):
    """d^order/dx^order of samples on a uniform periodic grid along ``axis``."""
    n = values.shape[axis]
    k = np.fft.fftfreq(n, d=1.0 / n) * (TWO_PI / period)
    if n % 2 == 0:
        k[n // 2] = 0.0
    shape = [1] * values.ndim
    shape[axis] = n
    F = np.fft.fft(values, axis=axis)
    F = F * ((1j * k) ** order).reshape(shape)
    return np.fft.ifft(F, axis=axis).real


class TrigSeries:
    """Real 2 pi-periodic function from uniform samples: sum_n c_n e^{i n psi}."""

    def __init__(self, samples):
        samples = np.asarray(samples, dtype=float)
        n = samples.size
        F = np.fft.fft(samples) / n
        self.n_samples = n
        half = n // 2
        # one-sided coefficients: f = c0 + sum_{j>=1} Re(2 F_j e^{ij psi}) (Nyquist halved)
        c = np.zeros(half + 1, dtype=complex)
        c[0] = F[0].real
        c[1:half] = 2.0 * F[1:half]
        if n % 2 == 0:
            c[half] = F[half].real
        else:
            c[half] = 2.0 * F[half]
        tol = 1e-15 * max(1.0, np.abs(c).max())
        c[np.abs(c) < tol] = 0.0
        self.coeffs = c

    def __call__(self, psi, derivative: int = 0):
        psi = np.asarray(psi, dtype=float)
        j = np.arange(self.coeffs.size)
        fac = self.coeffs * (1j * j) ** derivative
        if self.n_samples % 2 == 0 and derivative % 2 == 1:
            fac = fac.copy()
            fac[-1] = 0.0
        ph = np.exp(1j * np.multiply.outer(psi, j))
        return (ph @ fac).real

    def derivative(self, psi, order: int = 1):
        return self(psi, derivative=order)

    def sup_norm(self):
        grid = np.linspace(0.0, TWO_PI, 4 * self.n_samples, endpoint=False)
        return float(np.abs(self(grid)).max())

    def is_zero(self, tol=1e-12):
        return float(np.abs(self.coeffs).sum()) < tol


def cheb_nodes(n: int, r_max: float) -> np.ndarray:
    """First-kind Chebyshev nodes on (0, r_max), increasing."""
    k = np.arange(n)
    u = -np.cos((2 * k + 1) * np.pi / (2 * n))
    return 0.5 * r_max * (u + 1.0)


class PeriodicField:
    """Field Z(R, theta, S) stored as 2-D Fourier tables over (theta, S) per R node.

    ``coefficients[i]`` is the normalized FFT table (n_theta, n_S) of
    Z(r_grid[i], ., .) / r_grid[i]^r_power.  The R-dependence is interpolated
    by a Chebyshev polynomial when the grid is a Chebyshev grid on
    (0, r_max), otherwise by a cubic spline.  Evaluated values are real.
    """

    def __init__(self, r_grid, samples, kappa: int = 1, r_power: int = 0,
                 r_max: Optional[float] = None, trim: float = 1e-14):
        self.r_grid = np.asarray(r_grid, dtype=float)
        samples = np.asarray(samples, dtype=float)
        if samples.ndim == 2:
            samples = samples[:, :, None]
        self.kappa = int(kappa)
        self.r_power = int(r_power)
        self.n_theta, self.n_S = samples.shape[1:]
        self.theta_modes = self.n_theta // 2
        self.s_modes = self.n_S // 2
        self.r_max = r_max
        scaled = samples / self.r_grid[:, None, None] ** self.r_power
        self.coefficients = np.fft.fft2(scaled, axes=(1, 2)) / (self.n_theta * self.n_S)
        amp = np.abs(self.coefficients).max(axis=0)
        keep = amp > trim * max(amp.max(), 1e-300)
        if not keep.any():
            keep[0, 0] = True
        ia, ib = np.nonzero(keep)
        self._ja = np.fft.fftfreq(self.n_theta, d=1.0 / self.n_theta)[ia]
        self._jb = np.fft.fftfreq(self.n_S, d=1.0 / self.n_S)[ib] / self.kappa
        table = self.coefficients[:, ia, ib]                  # (n_r, n_keep)
        if r_max is not None:
            u = 2.0 * self.r_grid / r_max - 1.0
            deg = len(self.r_grid) - 1
            self._cheb = C.chebfit(u, table, deg)             # (deg+1, n_keep)
            self._spline = None
        else:
            from scipy.interpolate import CubicSpline
            self._cheb = None
            self._spline = CubicSpline(self.r_grid, table, axis=0) if len(self.r_grid) > 1 else None
            self._const = table[0]

    def _mode_values(self, R):
        R = np.asarray(R, dtype=float)
        if self._cheb is not None:
            u = 2.0 * R / self.r_max - 1.0
            return C.chebval(u, self._cheb).T if np.ndim(R) else C.chebval(u, self._cheb)
        if self._spline is None:
            return np.broadcast_to(self._const, np.shape(R) + self._const.shape)
        return self._spline(R)

    def __call__(self, R, theta, S=0.0):
        R, theta, S = np.broadcast_arrays(np.asarray(R, float), np.asarray(theta, float),
                                          np.asarray(S, float))
        flat = [a.ravel() for a in (R, theta, S)]
        out = np.empty(flat[0].size)
        for lo in range(0, out.size, 8192):
            sl = slice(lo, lo + 8192)
            c = np.atleast_2d(self._mode_values(flat[0][sl]))
            ph = np.exp(1j * (np.multiply.outer(flat[1][sl], self._ja)
                              + np.multiply.outer(flat[2][sl], self._jb)))
            out[sl] = (c * ph).sum(axis=-1).real
        return (out * flat[0] ** self.r_power).reshape(R.shape)

    def mean_S(self) -> "PeriodicField":
        """Average over S in [0, 2 pi kappa): the zeroth S-mode."""
        n_theta = self.n_theta
        vals = np.fft.ifft(self.coefficients[:, :, 0], axis=1).real * n_theta
        samples = vals * self.r_grid[:, None] ** self.r_power
        return PeriodicField(self.r_grid, samples[:, :, None], self.kappa, self.r_power,
                             self.r_max)

    def samples(self):
        """Values on the (r, theta, S) grid."""
        vals = np.fft.ifft2(self.coefficients, axes=(1, 2)).real * (self.n_theta * self.n_S)
        return vals * self.r_grid[:, None, None] ** self.r_power

    def tail_energy(self, fraction: float = 0.25) -> float:
        """Energy in the outer ``fraction`` of theta and S modes (truncation residual)."""
        ja = np.abs(np.fft.fftfreq(self.n_theta, d=1.0 / self.n_theta))
        jb = np.abs(np.fft.fftfreq(self.n_S, d=1.0 / self.n_S))
        outer = (ja[:, None] > (1 - fraction) * self.n_theta / 2) | \
                (jb[None, :] > (1 - fraction) * self.n_S / 2)
        return float((np.abs(self.coefficients[:, outer]) ** 2).sum())


def grid_mean_S(values):
    """S-mean of grid samples (..., n_theta, n_S)."""
    return values.mean(axis=-1)


def average_over_S(field):
    """S-average of a PeriodicField (returns a PeriodicField without S-dependence)
    or of a raw sample table (..., n_theta, n_S)."""
    if isinstance(field, PeriodicField):
        return field.mean_S()
    return grid_mean_S(np.asarray(field, dtype=float))


def solve_homological(field_zero_mean, s0: float, kappa: int = 1, tol: float = 1e-9):
    """Zero-mean solution w of s0 dw/dS = g for S-periodic g with zero S-mean.

    Accepts a PeriodicField or grid samples (..., n_S) with S spanning
    [0, 2 pi kappa).  Mode j (frequency j/kappa) is divided by i s0 j/kappa.
    """
    if isinstance(field_zero_mean, PeriodicField):
        pf = field_zero_mean
        w = solve_homological(pf.samples(), s0, pf.kappa, tol)
        return PeriodicField(pf.r_grid, w, pf.kappa, pf.r_power, pf.r_max)
    g = np.asarray(field_zero_mean, dtype=float)
    n = g.shape[-1]
    F = np.fft.fft(g, axis=-1)
    mean = np.abs(F[..., 0]).max() / n
    scale = max(1.0, np.abs(g).max())
    if mean > tol * scale:
        raise HomologicalSolvabilityError(
            f"homological input has non-zero S-mean {mean:.3e} (tolerance {tol * scale:.1e})")
    j = np.fft.fftfreq(n, d=1.0 / n) / kappa
    if n % 2 == 0:
        F[..., n // 2] = 0.0
    with np.errstate(divide="ignore", invalid="ignore"):
        W = np.where(j != 0, F / (1j * s0 * j), 0.0)
    return np.fft.ifft(W, axis=-1).real


# ---------------------------------------------------------------------------
# polar fields


def _contract_tr(Ai, Hs, Aj):
    """tr(Ai^T Hs Aj) over trailing (2, 2)."""
    return np.einsum("...ac,...ab,...bc->...", Ai, Hs, Aj)


class _Engine:
    """Samples the amplitude/phase-difference fields on the (theta, S) grid at given R."""

    def __init__(self, spec: SystemSpec, chart, ell: int, n_theta: int, n_S: int,
                 max_order: int = 2, eps_nodes: int = 14, eps_degree: int = 9):
        self.spec = spec
        self.chart = chart
        self.ell = int(ell)
        self.q = spec.q
        self.kappa = spec.kappa
        self.s = spec.schedule.s
        self.s0 = self.s[0]
        self.K = int(max_order)
        self.theta = np.linspace(0.0, TWO_PI, n_theta, endpoint=False)
        self.S = np.linspace(0.0, TWO_PI * self.kappa, n_S, endpoint=False)
        self.phi = self.theta[:, None] + self.S[None, :] / self.kappa
        self._S_grid = np.broadcast_to(self.S[None, :], self.phi.shape)
        self._nu_const = getattr(chart, "analytic_flag", False) or self._nu_is_const()
        if self.ell == 0 and not self._nu_const:
            raise OutOfTheoryError(
                "frequency nu(E) is not constant: a positive well index (scaling exponent) is "
                "required")
        # one-sided Chebyshev nodes in (0, eps_max] for the t^(-1/q) expansion (l > 0)
        self.eps_max = 0.25
        n = eps_nodes
        self.eps_nodes = 0.5 * self.eps_max * (1 - np.cos((2 * np.arange(n) + 1) * np.pi / (2 * n)))
        self.eps_degree = eps_degree

    def _nu_is_const(self):
        Es = np.linspace(0.05, 0.9, 5) * self.chart.energy_cap
        return bool(np.all(np.abs(np.asarray(self.chart.nu(Es)) - self.chart.nu0) < 1e-9))

    def s_rate(self, k):
        """Coefficient of t^(-k/q) in S'(t) - s0."""
        if k > self.q:
            return 0.0
        return self.s[k] * self.spec.schedule.rate_factor(k)

    def _pushforward(self, E):
        """b and beta coefficients (orders 1..K) of dE and dphi at E on the grid."""
        x = self.chart.point(np.full(self.phi.shape, E), self.phi)
        gH, gP, hH, hP = self.chart.geometry(x)
        a = {}
        A = {}
        for k in range(1, self.K + 1):
            if k <= self.spec.truncation_order:
                a[k], A[k] = self.spec.order_coefficients(x, self._S_grid, k)
            else:
                a[k], A[k] = np.zeros(x.shape), np.zeros(x.shape[:-1] + (2, 2))
        b1, b2, be1, be2 = {}, {}, {}, {}
        for k in range(1, self.K + 1):
            b1[k] = np.einsum("...a,...a->...", gH, a[k])
            b2[k] = np.einsum("...a,...a->...", gP, a[k])
            for i in range(1, k):
                j = k - i
                b1[k] = b1[k] + 0.5 * _contract_tr(A[i], hH, A[j])
                b2[k] = b2[k] + 0.5 * _contract_tr(A[i], hP, A[j])
            be1[k] = np.einsum("...a,...ac->...c", gH, A[k])
            be2[k] = np.einsum("...a,...ac->...c", gP, A[k])
        return b1, b2, be1, be2

    def fields(self, R):
        """f1[k], f2[k] (n_theta, n_S) and gamma1[k], gamma2[k] (n_theta, n_S, 2), k=1..K."""
        if self.ell == 0:
            return self._fields_exact(R)
        return self._fields_fitted(R)

    def _fields_exact(self, R):
        E = R * R
        b1, b2, be1, be2 = self._pushforward(E)
        f1, f2, g1, g2 = {}, {}, {}, {}
        for k in range(1, self.K + 1):
            corr = 0.0
            for i in range(1, k):
                corr = corr + np.einsum("...c,...c->...", be1[i], be1[k - i])
            f1[k] = b1[k] / (2.0 * R) - corr / (8.0 * R ** 3)
            f2[k] = b2[k] - self.s_rate(k) / self.kappa
            g1[k] = be1[k] / (2.0 * R)
            g2[k] = be2[k]
        return f1, f2, g1, g2

    def _full_series(self, R, eps):
        """Total R and theta drift/diffusion at t^(-1/q) = eps (excluding the l R/q term)."""
        E = eps ** (2 * self.ell) * R * R
        b1, b2, be1, be2 = self._pushforward(E)
        B1 = sum(eps ** k * b1[k] for k in b1)
        B2 = sum(eps ** k * b2[k] for k in b2)
        # second-order terms in eps of the products are built from the truncated series,
        # so components above order K are discarded by the polynomial fit.
        G1 = sum(eps ** k * be1[k] for k in be1)
        G2 = sum(eps ** k * be2[k] for k in be2)
        sqE = math.sqrt(E)
        dR = (B1 / (2.0 * sqE) - np.einsum("...c,...c->...", G1, G1) / (8.0 * sqE ** 3)) / eps ** self.ell
        nu = np.asarray(self.chart.nu(E), dtype=float) if not self._nu_const else self.chart.nu0
        dth = (nu - self.chart.nu0) + B2 - sum(eps ** k * self.s_rate(k) for k in range(1, self.K + 1)) / self.kappa
        gR = G1 / (2.0 * sqE) / eps ** self.ell
        return dR, dth, gR, G2

    def _fields_fitted(self, R):
        vals = [self._full_series(R, e) for e in self.eps_nodes]
        V = np.vander(self.eps_nodes, self.eps_degree + 1, increasing=True)
        pinv = np.linalg.pinv(V)                              # (deg+1, n_nodes)

        def coeff(idx, k):
            stack = np.stack([v[idx] for v in vals], axis=0)
            return np.tensordot(pinv[k], stack, axes=(0, 0))

        f1, f2, g1, g2 = {}, {}, {}, {}
        for k in range(1, self.K + 1):
            f1[k] = coeff(0, k) + (self.ell * R / self.q if k == self.q else 0.0)
            f2[k] = coeff(1, k)
            g1[k] = coeff(2, k)
            g2[k] = coeff(3, k)
        return f1, f2, g1, g2

    # -- averaging at a single amplitude -------------------------------------------------

    def order1(self, R, fields=None):
        f1, f2, _, _ = fields if fields is not None else self.fields(R)
        L1 = f1[1].mean(axis=1)
        O1 = f2[1].mean(axis=1)
        v1 = solve_homological(L1[:, None] - f1[1], self.s0, self.kappa)
        p1 = solve_homological(O1[:, None] - f2[1], self.s0, self.kappa)
        return L1, O1, v1, p1

    def order2(self, R, rel_step=1e-4):
        F = self.fields(R)
        f1, f2, _, _ = F
        L1, O1, v1, p1 = self.order1(R, F)
        Rp, Rm = R * (1 + rel_step), R * (1 - rel_step)
        up = self.order1(Rp)
        um = self.order1(Rm)
        dR = [(a - b) / (Rp - Rm) for a, b in zip(up, um)]  # d/dR of (L1, O1, v1, p1)
        dL1_th = _spectral_derivative(L1, 0, TWO_PI)
        dO1_th = _spectral_derivative(O1, 0, TWO_PI)
        dv1_th = _spectral_derivative(v1, 0, TWO_PI)
        dp1_th = _spectral_derivative(p1, 0, TWO_PI)
        per_S = TWO_PI * self.kappa
        dv1_S = _spectral_derivative(v1, 1, per_S)
        dp1_S = _spectral_derivative(p1, 1, per_S)
        c1 = self.s_rate(1) if self.q >= 1 else 0.0
        d1q = 1.0 if self.q == 1 else 0.0
        shift = d1q * (2 - self.q) / self.q
        transport_L = v1 * dR[0][:, None] + p1 * dL1_th[:, None]
        transport_O = v1 * dR[1][:, None] + p1 * dO1_th[:, None]
        adv_v = f1[1] * dR[2] + f2[1] * dv1_th + c1 * dv1_S - shift * v1
        adv_p = f1[1] * dR[3] + f2[1] * dp1_th + c1 * dp1_S - shift * p1
        tf1 = transport_L - adv_v
        tf2 = transport_O - adv_p
        g1 = f1[2] - tf1
        g2 = f2[2] - tf2
        L2 = g1.mean(axis=1)
        O2 = g2.mean(axis=1)
        v2 = solve_homological(L2[:, None] - g1, self.s0, self.kappa)
        p2 = solve_homological(O2[:, None] - g2, self.s0, self.kappa)
        return (L1, O1, v1, p1), (L2, O2, v2, p2)

    def averaged_at(self, R, N):
        if N == 1:
            return (self.order1(R),)
        return self.order2(R)


# ---------------------------------------------------------------------------
# public data types


@dataclass(frozen=True)
class PolarFields:
    """f_{1,k}, f_{2,k}, gamma_{1,k}, gamma_{2,k} (k = 1..K) as PeriodicFields."""

    f1: Dict[int, PeriodicField]
    f2: Dict[int, PeriodicField]
    gamma1: Dict[int, list]
    gamma2: Dict[int, list]
    r_grid: np.ndarray


def _resolve_chart(spec, chart):
    if chart is None:
        chart = build_chart(spec)
    return chart


def polar_fields(spec: SystemSpec, chart=None, ell: Optional[int] = None, r_grid=None,
                 theta_modes: int = 8, s_modes: int = 8, max_order: int = 2,
                 r_max: Optional[float] = None, n_r: int = 24) -> PolarFields:
    """Amplitude/phase-difference coefficient fields on an R grid (R > 0)."""
    chart = _resolve_chart(spec, chart)
    ell = spec.well_index if ell is None else ell
    kappa = spec.kappa
    eng = _Engine(spec, chart, ell, 4 * theta_modes, 4 * s_modes * kappa, max_order)
    if r_grid is None:
        r_max = r_max or min(1.0, 0.9 * math.sqrt(chart.energy_cap))
        r_grid = cheb_nodes(n_r, r_max)
        cheb_max = r_max
    else:
        r_grid = np.asarray(r_grid, dtype=float)
        if np.any(r_grid <= 0):
            raise ConfigError("R grid must be strictly positive (fields are singular at R = 0)")
        cheb_max = None
    samples = [eng.fields(R) for R in r_grid]
    f1, f2, g1, g2 = {}, {}, {}, {}
    for k in range(1, max_order + 1):
        f1[k] = PeriodicField(r_grid, [s[0][k] for s in samples], kappa, 1, cheb_max)
        f2[k] = PeriodicField(r_grid, [s[1][k] for s in samples], kappa, 0, cheb_max)
        g1[k] = [PeriodicField(r_grid, [s[2][k][..., j] for s in samples], kappa, 1, cheb_max)
                 for j in (0, 1)]
        g2[k] = [PeriodicField(r_grid, [s[3][k][..., j] for s in samples], kappa, 0, cheb_max)
                 for j in (0, 1)]
    return PolarFields(f1, f2, g1, g2, r_grid)


@dataclass(frozen=True, eq=False)
class AveragedSystem:
    """Averaged drift coefficients Lambda_k(v, psi), Omega_k(v, psi), k = 1..N.

    Lambda_k / v and Omega_k are Chebyshev-in-v x Fourier-in-psi tables on
    [0, v_max].  After :func:`fit_small_amplitude` the leading indices and the
    small-amplitude coefficient functions are filled in; coefficient
    functions are :class:`TrigSeries` (callable on psi, with derivatives).
    """

    N: int
    q: int
    kappa: int
    well_index: int
    v_max: float
    Lambda: Dict[int, PeriodicField]
    Omega: Dict[int, PeriodicField]
    transform: Dict[str, Dict[int, PeriodicField]]
    psi_grid: np.ndarray
    name: str = "custom"
    n: Optional[int] = None
    m: Optional[int] = None
    shape: Optional[str] = None
    h: Optional[int] = None
    l: Optional[int] = None
    lambda_n: Optional[TrigSeries] = None
    lambda_nh: Optional[TrigSeries] = None
    lambda_nl: Optional[TrigSeries] = None
    omega_m0: Optional[TrigSeries] = None
    omega_m1: Optional[TrigSeries] = None
    lam: Dict[int, TrigSeries] = field(default_factory=dict)
    omega0: Dict[int, TrigSeries] = field(default_factory=dict)
    omega1: Dict[int, TrigSeries] = field(default_factory=dict)
    exponents: Dict[int, float] = field(default_factory=dict)
    norms: Dict[str, float] = field(default_factory=dict)
    probes: tuple = DEFAULT_PROBES
    _engine: object = None

    # evaluation ---------------------------------------------------------------------------
    def Lambda_k(self, k, v, psi):
        if k not in self.Lambda:
            return np.zeros(np.broadcast(np.asarray(v), np.asarray(psi)).shape)
        return self.Lambda[k](v, psi)

    def Omega_k(self, k, v, psi):
        if k not in self.Omega:
            return np.zeros(np.broadcast(np.asarray(v), np.asarray(psi)).shape)
        return self.Omega[k](v, psi)

    def exact_at(self, v, N=None):
        """(Lambda_k, Omega_k) on the psi grid at amplitude v, computed directly (not interpolated)."""
        res = self._engine.averaged_at(float(v), N or self.N)
        return [(r[0], r[1]) for r in res]

    def drift(self, u, phi, t, N=None):
        """Truncated averaged drift sum_{k<=N} t^(-k/q) (Lambda_k, Omega_k)."""
        N = N or self.N
        du = 0.0
        dp = 0.0
        for k in range(1, N + 1):
            w = t ** (-k / self.q)
            du = du + w * self.Lambda_k(k, u, phi)
            dp = dp + w * self.Omega_k(k, u, phi)
        return du, dp

    def transformed(self, R, theta, t, S):
        """Near-identity change (V_N, Psi_N) at (R, theta), time t and fast phase S."""
        V = np.asarray(R, dtype=float).copy()
        P = np.asarray(theta, dtype=float).copy()
        for k, fld in self.transform.get("v", {}).items():
            V = V + t ** (-k / self.q) * fld(R, theta, S)
        for k, fld in self.transform.get("psi", {}).items():
            P = P + t ** (-k / self.q) * fld(R, theta, S)
        return V, P

    def summary(self) -> dict:
        return {"name": self.name, "N": self.N, "q": self.q, "kappa": self.kappa,
                "well_index": self.well_index, "n": self.n, "m": self.m, "shape": self.shape,
                "h": self.h, "l": self.l,
                "exponents": {str(k): v for k, v in self.exponents.items()},
                "norms": self.norms}


def averaged_system(spec: SystemSpec, chart=None, ell: Optional[int] = None, N: int = 2,
                    theta_modes: int = 8, s_modes: int = 8, v_max: Optional[float] = None,
                    n_v: int = 32, fit: bool = True, probes=DEFAULT_PROBES) -> AveragedSystem:
    """Averaged system up to order N (N <= 2), fitted at small amplitude unless fit=False."""
    if N > 2:
        raise UnsupportedOrderError("averaging is implemented for orders N <= 2")
    if N < 1:
        raise ConfigError("N must be >= 1")
    chart = _resolve_chart(spec, chart)
    ell = spec.well_index if ell is None else int(ell)
    kappa = spec.kappa
    n_theta = 4 * theta_modes
    eng = _Engine(spec, chart, ell, n_theta, 4 * s_modes * kappa, max_order=max(N, 2))
    if v_max is None:
        v_max = min(2.0, 0.9 * math.sqrt(chart.energy_cap))
    nodes = cheb_nodes(n_v, v_max)
    per_node = [eng.averaged_at(R, N) for R in nodes]
    Lam, Om, tv, tp = {}, {}, {}, {}
    for k in range(1, N + 1):
        Lk = np.stack([pn[k - 1][0] for pn in per_node])       # (n_v, n_theta)
        Ok = np.stack([pn[k - 1][1] for pn in per_node])
        Lam[k] = PeriodicField(nodes, Lk, 1, 1, v_max)
        Om[k] = PeriodicField(nodes, Ok, 1, 0, v_max)
        tv[k] = PeriodicField(nodes, np.stack([pn[k - 1][2] for pn in per_node]), kappa, 1, v_max)
        tp[k] = PeriodicField(nodes, np.stack([pn[k - 1][3] for pn in per_node]), kappa, 0, v_max)
    avg = AveragedSystem(N=N, q=spec.q, kappa=kappa, well_index=ell, v_max=float(v_max),
                         Lambda=Lam, Omega=Om, transform={"v": tv, "psi": tp},
                         psi_grid=eng.theta.copy(), name=spec.name, _engine=eng)
    if fit:
        avg = fit_small_amplitude(avg, probes)
    return avg


def _lagrange_at_zero(xs, ys):
    """Value and derivative at 0 of the interpolating polynomial through (xs, ys)."""
    xs = np.asarray(xs, float)
    coef = np.polyfit(xs, ys, len(xs) - 1)                   # highest degree first
    return coef[-1], coef[-2] if len(xs) > 1 else 0.0


def fit_small_amplitude(avg: AveragedSystem, v_probe: Sequence[float] = DEFAULT_PROBES,
                        tol: float = 1e-9) -> AveragedSystem:
    """Fit leading powers of v and extract the small-amplitude coefficient functions."""
    v_probe = np.sort(np.asarray(v_probe, dtype=float))[::-1]
    if v_probe.size < 3 or np.any(v_probe <= 0):
        raise ConfigError("need at least three positive amplitude probes")
    eng = avg._engine
    data = [avg.exact_at(v) for v in v_probe]                # [probe][order-1] -> (L, O)
    N = avg.N
    Lp = {k: np.stack([d[k - 1][0] for d in data]) for k in range(1, N + 1)}   # (n_probe, n_psi)
    Op = {k: np.stack([d[k - 1][1] for d in data]) for k in range(1, N + 1)}
    # norms of Lambda_k / v and Omega_k over probes and the tabulated range
    vv = np.linspace(0.0, avg.v_max, 9)[1:]
    grid = avg.psi_grid
    norms = {}
    for k in range(1, N + 1):
        tabL = np.abs(avg.Lambda[k](vv[:, None], grid[None, :]) / vv[:, None]).max()
        tabO = np.abs(avg.Omega[k](vv[:, None], grid[None, :])).max()
        norms[f"Lambda{k}"] = float(max(tabL, np.abs(Lp[k] / v_probe[:, None]).max()))
        norms[f"Omega{k}"] = float(max(tabO, np.abs(Op[k]).max()))
    scale = max([1.0] + list(norms.values()))
    thr = tol * scale
    nz_L = [k for k in range(1, N + 1) if norms[f"Lambda{k}"] >= 10 * thr]
    nz_O = [k for k in range(1, N + 1) if norms[f"Omega{k}"] >= 10 * thr]
    exps = {}
    for k in nz_L:
        sup = np.abs(Lp[k]).max(axis=1)
        if np.any(sup <= 0):
            raise ClassificationAmbiguous(f"Lambda_{k} vanishes at a probe amplitude")
        exps[k] = float(np.polyfit(np.log(v_probe), np.log(sup), 1)[0])
    lam, om0, om1 = {}, {}, {}
    for k in nz_L:
        e = exps[k]
        p = 1 if abs(e - 1) <= 0.05 else int(round(e))
        if p != 1 and abs(e - p) > 0.1:
            raise ClassificationAmbiguous(
                f"leading power of Lambda_{k} is {e:.3f}, not close to an integer "
                f"(probes {list(v_probe)}, sup norms {list(np.abs(Lp[k]).max(axis=1))})")
        g = Lp[k] / v_probe[:, None] ** p
        lam[k] = TrigSeries(np.array([_lagrange_at_zero(v_probe, g[:, i])[0]
                                      for i in range(g.shape[1])]))
    for k in nz_O:
        vals = np.array([_lagrange_at_zero(v_probe, Op[k][:, i]) for i in range(Op[k].shape[1])])
        om0[k] = TrigSeries(vals[:, 0])
        om1[k] = TrigSeries(vals[:, 1])
    n = nz_L[0] if nz_L else None
    m = nz_O[0] if nz_O else None
    shape = h = l = None
    lambda_n = lambda_nh = lambda_nl = None
    if n is not None:
        e = exps[n]
        if abs(e - 1) <= 0.05:
            shape = "linear"
            lambda_n = lam[n]
        else:
            h = int(round(e))
            if h < 2:
                raise ClassificationAmbiguous(f"leading power {e:.3f} of Lambda_{n} below 1")
            shape = "strictly_nonlinear"
            lambda_nh = lam[n]
            lambda_n = lam[n]
            for k in nz_L:
                if k > n and abs(exps[k] - 1) <= 0.05:
                    l = k - n
                    lambda_nl = lam[k]
                    break
    omega_m0 = om0.get(m) if m is not None else None
    omega_m1 = om1.get(m) if m is not None else None
    if omega_m0 is not None and omega_m0.sup_norm() < thr:
        raise DegeneracyError(
            f"omega_{m},0 vanishes identically at well index {avg.well_index}; choose another "
            "well index")
    return replace(avg, n=n, m=m, shape=shape, h=h, l=l, lambda_n=lambda_n, lambda_nh=lambda_nh,
                   lambda_nl=lambda_nl, omega_m0=omega_m0, omega_m1=omega_m1, lam=lam,
                   omega0=om0, omega1=om1, exponents=exps, norms=norms,
                   probes=tuple(float(v) for v in v_probe))


def check_zero_mean_transform(avg: AveragedSystem, tol: float = 1e-10) -> float:
    """Max |<v_k>_S|, |<psi_k>_S| over the stored transform tables."""
    worst = 0.0
    for kind in ("v", "psi"):
        for fld in avg.transform.get(kind, {}).values():
            worst = max(worst, float(np.abs(fld.coefficients[:, :, 0]).max()))
    return worst


def export_averaged(avg: AveragedSystem, directory, n_psi: int = 64) -> list:
    """Write lambda/omega tables (CSV) and the index summary (JSON)."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    psi = np.linspace(0.0, TWO_PI, n_psi, endpoint=False)
    cols = {"lambda_n": avg.lambda_n if avg.shape == "linear" else None,
            "lambda_nh": avg.lambda_nh, "lambda_nl": avg.lambda_nl,
            "omega_m0": avg.omega_m0, "omega_m1": avg.omega_m1}
    p = d / "averaged_tables.csv"
    with open(p, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["psi"] + list(cols))
        vals = {k: (f(psi) if f is not None else None) for k, f in cols.items()}
        for i, ps in enumerate(psi):
            w.writerow([repr(float(ps))] + ["" if vals[k] is None else repr(float(vals[k][i]))
                                            for k in cols])
    s = d / "averaged_summary.json"
    with open(s, "w") as fh:
        json.dump(avg.summary(), fh, indent=2, sort_keys=True)
    return [p, s]
