"""Convergence measurements pairing the package integrator with exact oracles."""

from __future__ import annotations

import math

import numpy as np

from oracles import fit_slope, gbm_exact, ou_coupled_increments, ou_exact_step, ou_mean
from stochlock.sde import ItoSystem, integrate_increments

DTS = tuple(2.0 ** -k for k in range(6, 13))


def ou_system(sigma):
    """dx = -x dt + sigma dW in each component (two independent copies)."""
    return ItoSystem(lambda x, t: -np.asarray(x),
                     lambda x, t: sigma * np.broadcast_to(np.eye(2), np.shape(x)[:-1] + (2, 2)))


def ou_strong_errors(sigma=1.0, x0=1.0, n_paths=2000, dts=DTS, seed=11, scheme="split"):
    """E|X_dt(1) - x(1)| with the exact solution sampled jointly with the increments."""
    sys_ = ou_system(sigma)
    errs = []
    for dt in dts:
        rng = np.random.default_rng([seed, int(round(1 / dt))])
        n = int(round(1 / dt))
        exact = np.full((n_paths, 2), x0)
        incs = []
        for _ in range(n):
            dW, I = ou_coupled_increments(rng, dt, (n_paths, 2))
            exact = ou_exact_step(exact, dt, sigma, I)
            incs.append(dW)
        num = integrate_increments(sys_, np.full((n_paths, 2), x0), 0.0, dt, incs, scheme)
        errs.append(float(np.mean(np.abs(num - exact))))
    return np.array(errs)


def ou_weak_errors(sigma=1.0, x0=1.0, n_pairs=500, dts=DTS, seed=12, scheme="split"):
    """|E X_dt(1) - x0 e^-1| with antithetic increment pairs."""
    sys_ = ou_system(sigma)
    errs = []
    for dt in dts:
        rng = np.random.default_rng([seed, int(round(1 / dt))])
        n = int(round(1 / dt))

        def incs():
            for _ in range(n):
                z = rng.standard_normal((n_pairs, 2)) * math.sqrt(dt)
                yield np.concatenate([z, -z])

        num = integrate_increments(sys_, np.full((2 * n_pairs, 2), x0), 0.0, dt, incs(), scheme)
        errs.append(abs(float(num[:, 0].mean()) - ou_mean(x0, 1.0)))
    return np.array(errs)


def gbm_strong_errors(a=-0.5, b=1.0, x0=1.0, n_paths=2000, dts=DTS, seed=13):
    sys_ = ItoSystem(lambda x, t: a * np.asarray(x),
                     lambda x, t: b * np.asarray(x)[..., :, None] * np.eye(2))
    errs = []
    for dt in dts:
        rng = np.random.default_rng([seed, int(round(1 / dt))])
        n = int(round(1 / dt))
        dWs = rng.standard_normal((n, n_paths, 2)) * math.sqrt(dt)
        W = dWs.sum(axis=0)
        num = integrate_increments(sys_, np.full((n_paths, 2), x0), 0.0, dt, dWs)
        errs.append(float(np.mean(np.abs(num - gbm_exact(x0, a, b, 1.0, W)))))
    return np.array(errs)


def slope(errs, dts=DTS):
    return fit_slope(np.asarray(dts), np.asarray(errs))
