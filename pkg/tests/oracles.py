"""Independent reference computations used by the test-suite.

Nothing here imports the package: each oracle recomputes its quantity from
first principles (exact transition laws, hand-derived closed forms,
adaptive quadrature of hand-written Ito drifts).
"""

from __future__ import annotations

import math

import numpy as np
from scipy import integrate

# ---------------------------------------------------------------------------
# exactly solvable SDEs


def ou_coupled_increments(rng, h, size):
    """Jointly Gaussian (dW, I) for one step of length h, where
    I = int_0^h exp(-(h - s)) dW(s) is the stochastic convolution of the OU
    process dx = -x dt + sigma dW.  Var dW = h, Var I = (1 - e^{-2h})/2,
    Cov(dW, I) = 1 - e^{-h}."""
    v_w = h
    v_i = 0.5 * (1.0 - math.exp(-2.0 * h))
    c = 1.0 - math.exp(-h)
    L = np.linalg.cholesky(np.array([[v_w, c], [c, v_i]]))
    z = rng.standard_normal(size + (2,))
    out = z @ L.T
    return out[..., 0], out[..., 1]


def ou_exact_step(x, h, sigma, I):
    return math.exp(-h) * x + sigma * I


def ou_mean(x0, t):
    return x0 * math.exp(-t)


def gbm_exact(x0, a, b, t, W):
    """Exact solution of dx = a x dt + b x dW driven by W(t)."""
    return x0 * np.exp((a - 0.5 * b * b) * t + b * W)


def fit_slope(xs, ys):
    return float(np.polyfit(np.log(xs), np.log(ys), 1)[0])


# ---------------------------------------------------------------------------
# harmonic energy-angle chart, x = sqrt(2E) (cos phi, -sin phi)


def harmonic_point(E, phi):
    r = math.sqrt(2.0 * E)
    return np.array([r * math.cos(phi), -r * math.sin(phi)])


def harmonic_energy_angle(x):
    E = 0.5 * (x[0] ** 2 + x[1] ** 2)
    return E, math.atan2(-x[1], x[0]) % (2.0 * math.pi)


# ---------------------------------------------------------------------------
# hand-written models: order-k coefficient functions of t^(-k/q)


class Model:
    """drift[k](x, S) -> (2,), noise[k](x, S) -> (2, 2), rate[k] = coefficient
    of t^(-k/q) in S'(t) (k >= 1), kappa = resonance multiple."""

    def __init__(self, q, kappa, drift, noise, rate):
        self.q, self.kappa = q, kappa
        self.drift, self.noise, self.rate = drift, noise, rate


def _c2(c0, c1):
    return lambda x, S: np.array([[0.0, 0.0], [0.0, (c0 + c1 * math.cos(S)) * x[0]]])


def ex1_model(p=1, a0=0.0, a1=0.0, b0=0.0, b1=0.0, c0=0.0, c1=0.0, s0=1, s2=0.0):
    """dx2 = (-x1 + t^-1 (a(S) x1 + b(S) x2)) dt + t^(-p/2) c(S) x1 dw2."""
    lin = lambda x, S: np.array([0.0, (a0 + a1 * math.cos(S)) * x[0]
                                 + (b0 + b1 * math.cos(S)) * x[1]])
    if p == 1:        # t^(-1/2) and t^(-1): q = 2
        return Model(2, s0, {2: lin}, {1: _c2(c0, c1)}, {1: 0.0, 2: s2})
    # p = 2: everything is O(t^-1); q = 1
    return Model(1, s0, {1: lin}, {1: _c2(c0, c1)}, {1: s2})


def ex2_model(a0=0.0, a1=0.0, b0=0.0, b1=0.0, c0=0.0, c1=0.0, s0=1, s1=0.0, s2=0.0):
    """dx2 = (-x1 + t^-1/2 a(S) x1^2 x2/(1+|x|^2) + t^-1 b(S) x2) dt + t^-1/2 c(S) x1 dw2."""
    nl = lambda x, S: np.array([0.0, (a0 + a1 * math.cos(S)) * x[0] ** 2 * x[1]
                                / (1.0 + x[0] ** 2 + x[1] ** 2)])
    damp = lambda x, S: np.array([0.0, (b0 + b1 * math.cos(S)) * x[1]])
    # S = s0 t + s1 t^(1/2) + s2 log t  ->  S' = s0 + (s1/2) t^(-1/2) + s2 t^-1
    return Model(2, s0, {1: nl, 2: damp}, {1: _c2(c0, c1)}, {1: 0.5 * s1, 2: s2})


def _polar_geometry(x):
    """Gradient/Hessian of R = sqrt(H) = |x|/sqrt 2 and of Phi = atan2(-x2, x1)."""
    r2 = x @ x
    r = math.sqrt(r2)
    gR = x / (r * math.sqrt(2.0))
    hR = (np.eye(2) - np.outer(x, x) / r2) / (r * math.sqrt(2.0))
    gP = np.array([x[1], -x[0]]) / r2
    x1, x2 = x
    hxx = -2.0 * x1 * x2 / r2 ** 2
    hxy = (x1 * x1 - x2 * x2) / r2 ** 2
    hP = np.array([[hxx, hxy], [hxy, -hxx]])
    return gR, hR, gP, hP


def polar_drift(model, k, R, theta, S):
    """Order-k coefficient of the Ito drift of (R, theta = Phi - S/kappa)."""
    phi = theta + S / model.kappa
    x = math.sqrt(2.0) * R * np.array([math.cos(phi), -math.sin(phi)])
    gR, hR, gP, hP = _polar_geometry(x)
    a = model.drift[k](x, S) if k in model.drift else np.zeros(2)
    fR = gR @ a
    fP = gP @ a - model.rate.get(k, 0.0) / model.kappa
    for i, Ai in model.noise.items():
        j = k - i
        if j in model.noise:
            Aj = model.noise[j](x, S)
            Ai_ = Ai(x, S)
            fR += 0.5 * np.trace(Ai_.T @ hR @ Aj)
            fP += 0.5 * np.trace(Ai_.T @ hP @ Aj)
    return fR, fP


def first_order_average(model, k, psi, R=1e-3, power=1):
    """(<f_R,k>_S / R^power, <f_theta,k>_S) at amplitude R by adaptive quadrature over
    one fast period.  At small R this is the leading coefficient pair whenever the
    lower-order averaging corrections are of higher degree in R."""
    per = 2.0 * math.pi * model.kappa
    lam = integrate.quad(lambda S: polar_drift(model, k, R, psi, S)[0], 0.0, per,
                         limit=200, epsabs=1e-14, epsrel=1e-12)[0] / per
    om = integrate.quad(lambda S: polar_drift(model, k, R, psi, S)[1], 0.0, per,
                        limit=200, epsabs=1e-14, epsrel=1e-12)[0] / per
    return lam / R ** power, om


def leading_coefficients(model, k, psi, power=1, R=(1e-3, 2e-3)):
    """Richardson-extrapolated (R -> 0) version of first_order_average."""
    (l1, o1), (l2, o2) = (first_order_average(model, k, psi, r, power) for r in R)
    w = (R[1] / R[0]) ** 2
    return (w * l1 - l2) / (w - 1.0), (w * o1 - o2) / (w - 1.0)


# ---------------------------------------------------------------------------
# closed forms for the harmonic model examples


def ex1_p1_s01(psi, a0=0, b0=0, c0=0, c1=0, s2=0):
    lam = (16 * b0 + 6 * c0 ** 2 + 3 * c1 ** 2 + 2 * c1 ** 2 * np.cos(2 * psi)) / 32
    om = -(8 * a0 + 16 * s2 + c1 ** 2 * np.sin(2 * psi)) / 16
    return lam, om


def ex1_p1_s02(psi, a0=0, a1=0, b0=0, b1=0, c0=0, c1=0, s2=0):
    lam = (32 * b0 + 12 * c0 ** 2 + 6 * c1 ** 2 + c1 ** 2 * np.cos(4 * psi)
           - 16 * (a1 * np.sin(2 * psi) + (b1 - c0 * c1) * np.cos(2 * psi))) / 64
    om = -(16 * (a0 + s2) + c1 ** 2 * np.sin(4 * psi)
           + 8 * (a1 * np.cos(2 * psi) - (b1 - c0 * c1) * np.sin(2 * psi))) / 32
    return lam, om


def ex1_p1_s03(b0=0, c0=0, c1=0, a0=0, s2=0):
    return (16 * b0 + 6 * c0 ** 2 + 3 * c1 ** 2) / 32, -(3 * a0 + 2 * s2) / 6


def ex1_p2_s01(b0=0, a0=0, s2=0):
    return b0 / 2, -(a0 + 2 * s2) / 2


def _d1_delta1(a1, b1):
    d1 = math.hypot(a1, b1)
    return d1, math.acos(a1 / d1)


def ex1_p2_s02_stated(psi, a0=0, a1=0, b0=0, b1=0, s2=0):
    """Reference forms: lambda_1 = (2 b0 - d1 sin(2psi+delta1))/4,
    omega_10 = -(a0 + s2 + 8 d1 cos(2psi+delta1))/4."""
    d1, de = _d1_delta1(a1, b1)
    lam = (2 * b0 - d1 * np.sin(2 * psi + de)) / 4
    om = -(a0 + s2 + 8 * d1 * np.cos(2 * psi + de)) / 4
    return lam, om


def ex1_p2_s02_derived(psi, a0=0, a1=0, b0=0, b1=0, s2=0):
    """Hand derivation: omega_10 = -(2(a0+s2) + d1 cos(2psi+delta1))/4."""
    d1, de = _d1_delta1(a1, b1)
    lam = (2 * b0 - d1 * np.sin(2 * psi + de)) / 4
    om = -(2 * (a0 + s2) + d1 * np.cos(2 * psi + de)) / 4
    return lam, om


def ex2_forms(psi, a0=0, b0=0, c0=0, c1=0, s1=0, s2=0):
    """(lambda_13, omega_10, lambda_2, omega_20)."""
    lam13 = a0 / 4 + 0 * psi
    om10 = -s1 / 2 + 0 * psi
    lam2 = (48 * b0 + 18 * c0 ** 2 + 9 * c1 ** 2 + 6 * c1 ** 2 * np.cos(2 * psi)) / 96
    om20 = -s2 - c1 ** 2 * np.sin(2 * psi) / 16
    return lam13, om10, lam2, om20


def ex0_threshold(c1):
    """Locking threshold of ex0 (p=1, s0=1): b* = -5 c1^2/16."""
    return -5.0 * c1 ** 2 / 16.0


def ex1_p1_s01_locking_threshold(a0, c0, c1, s2=0.0):
    """Stable iff lambda_2(phi0) < 0 at the attracting zero of omega_20.

    omega_20 = 0 gives sin 2phi0 = -(8a0+16s2)/c1^2, attracting when
    cos 2phi0 > 0, so cos 2phi0 = sqrt(1 - sin^2)."""
    s = -(8 * a0 + 16 * s2) / c1 ** 2
    cos2 = math.sqrt(1 - s * s)
    return -(6 * c0 ** 2 + 3 * c1 ** 2 + 2 * c1 ** 2 * cos2) / 16


def ex1_p1_s01_phase(a0, c1, s2=0.0):
    return 0.5 * math.asin(-(8 * a0 + 16 * s2) / c1 ** 2)
