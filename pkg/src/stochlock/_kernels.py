"""Compiled stepping kernel for harmonic systems with trig-monomial perturbations.

The kernel advances one path through a block of pre-drawn standard normals.
All bookkeeping (stop statistic, running supremum, recorded states, window
averages of exp(2i theta)) is done in-kernel so long horizons stay cheap.
The Python driver in :mod:`stochlock.sde` owns the random stream and block
layout; this module only sees arrays.
"""

from __future__ import annotations

import math

import numpy as np
from numba import njit

# indices into the per-path scalar state vector
SUP, LAST_DIFF, HAS_ANGLE, WIN_RE, WIN_IM, WIN_W, EXITED, EXIT_STEP, TAB_PTR, REC_PTR = range(10)
N_SCALARS = 10

RULE_NONE, RULE_NORM, RULE_D, RULE_DTILDE = 0, 1, 2, 3
EXIT_NONE, EXIT_DOMAIN, EXIT_THRESHOLD = 0, 1, 2

TWO_PI = 2.0 * math.pi


@njit(cache=True, nogil=True)
def _wrap(a):
    r = (a + math.pi) % TWO_PI - math.pi
    if r == -math.pi:
        r = math.pi
    return r


@njit(cache=True, nogil=True)
def _table_value(tab_t, tab_v, t, ptr):
    # piecewise-linear interpolation with a forward-moving pointer; clamps at the ends
    n = tab_t.shape[0]
    if n == 0:
        return 0.0, ptr
    if t <= tab_t[0]:
        return tab_v[0], ptr
    if t >= tab_t[n - 1]:
        return tab_v[n - 1], n - 1
    while ptr + 1 < n and tab_t[ptr + 1] <= t:
        ptr += 1
    w = (t - tab_t[ptr]) / (tab_t[ptr + 1] - tab_t[ptr])
    return tab_v[ptr] * (1.0 - w) + tab_v[ptr + 1] * w, ptr


@njit(cache=True, nogil=True)
def advance(x, scal, j0, nsteps, final, t0, dt, normals,
            m_order, m_tgt, m_coef, m_p1, m_p2, m_harm, m_kind, m_sat,
            trunc, q, s, kappa, split, r0,
            rule, eps1, weight_exp, ell, kappa_dec,
            tab_t, tab_phi, tab_u, rec_idx, rec_out, win_t0, win_t1):
    """Observe grid points j0..j0+nsteps-1 (+ one more if ``final``) and step between them.

    Returns 1 if the path has exited, else 0.  ``x`` and ``scal`` are updated in place.
    """
    sq = math.sqrt(dt)
    cdt = math.cos(dt)
    sdt = math.sin(dt)
    nm = m_order.shape[0]
    maxk = trunc
    tqk = np.empty(maxk + 1)
    mval = np.empty(nm)
    ptr = int(scal[TAB_PTR])
    rp = int(scal[REC_PTR])
    nrec = rec_idx.shape[0]
    total = nsteps + (1 if final else 0)
    for jj in range(total):
        j = j0 + jj
        t = t0 + j * dt
        x1 = x[0]
        x2 = x[1]
        r2 = x1 * x1 + x2 * x2
        # domain check (also catches overflow)
        if not (r2 <= r0 * r0):
            scal[EXITED] = EXIT_DOMAIN
            scal[EXIT_STEP] = j
            if rp < nrec and rec_idx[rp] == j:
                rec_out[rp, 0] = x1
                rec_out[rp, 1] = x2
                rp += 1
            break
        lt = math.log(t)
        tq = math.exp(-lt / q)
        S = s[q] * lt
        tk = t
        for k in range(q):
            S += s[k] * tk
            tk *= tq
        # observation
        need_angle = rule == RULE_D or rule == RULE_DTILDE or (win_t0 <= t and t < win_t1)
        diff = 0.0
        if need_angle:
            if r2 > 0.0:
                phi = math.atan2(-x2, x1)
                diff = _wrap(phi - S / kappa)
                scal[HAS_ANGLE] = 1.0
            else:
                diff = scal[LAST_DIFF]
        stat = 0.0
        if rule != RULE_NONE:
            amp_scale = math.exp(lt * ell / q)
            if rule == RULE_NORM:
                stat = amp_scale * math.sqrt(r2)
                if weight_exp != 0.0:
                    stat *= math.exp(-weight_exp * lt)
            else:
                pe, ptr2 = _table_value(tab_t, tab_phi, t, ptr)
                ue = 0.0
                if rule == RULE_DTILDE:
                    ue, ptr2 = _table_value(tab_t, tab_u, t, ptr)
                ptr = ptr2
                if r2 > 0.0:
                    ad = _wrap(diff - pe)
                elif scal[HAS_ANGLE] > 0.0:
                    ad = _wrap(diff - pe)
                else:
                    ad = 0.0  # amplitude-only distance before any angle is defined
                if rule == RULE_D:
                    stat = math.sqrt(amp_scale * amp_scale * 0.5 * r2 + ad * ad)
                    if weight_exp != 0.0:
                        stat *= math.exp(-weight_exp * lt)
                else:
                    dev = amp_scale * math.sqrt(0.5 * r2) - ue
                    wgt = math.exp(kappa_dec * lt)
                    stat = math.sqrt(wgt * wgt * dev * dev + ad * ad)
            if stat > scal[SUP]:
                scal[SUP] = stat
        if r2 > 0.0 and need_angle:
            scal[LAST_DIFF] = diff
        while rp < nrec and rec_idx[rp] == j:
            rec_out[rp, 0] = x1
            rec_out[rp, 1] = x2
            rp += 1
        if rule != RULE_NONE and stat > eps1:
            scal[EXITED] = EXIT_THRESHOLD
            scal[EXIT_STEP] = j
            break
        if win_t0 <= t and t < win_t1 and r2 > 0.0:
            scal[WIN_RE] += math.cos(2.0 * diff) * dt
            scal[WIN_IM] += math.sin(2.0 * diff) * dt
            scal[WIN_W] += dt
        if jj >= nsteps:
            break
        # step from t_j to t_j + dt
        tqk[0] = 1.0
        for k in range(1, maxk + 1):
            tqk[k] = tqk[k - 1] * tq
        for i in range(nm):
            k = m_order[i]
            if k > trunc:
                mval[i] = 0.0
                continue
            v = m_coef[i] * tqk[k]
            for _ in range(m_p1[i]):
                v *= x1
            for _ in range(m_p2[i]):
                v *= x2
            h = m_harm[i]
            if h != 0:
                if m_kind[i] == 0:
                    v *= math.cos(h * S)
                else:
                    v *= math.sin(h * S)
            elif m_kind[i] == 1:
                v = 0.0
            for _ in range(m_sat[i]):
                v /= 1.0 + r2
            mval[i] = v
        a1 = 0.0
        a2 = 0.0
        A11 = 0.0
        A12 = 0.0
        A21 = 0.0
        A22 = 0.0
        for i in range(nm):
            g = m_tgt[i]
            v = mval[i]
            if g == 0:
                a1 += v
            elif g == 1:
                a2 += v
            elif g == 2:
                A11 += v
            elif g == 3:
                A12 += v
            elif g == 4:
                A21 += v
            else:
                A22 += v
        z1 = normals[jj, 0] * sq
        z2 = normals[jj, 1] * sq
        y1 = x1 + a1 * dt + A11 * z1 + A12 * z2
        y2 = x2 + a2 * dt + A21 * z1 + A22 * z2
        if split:
            x[0] = y1 * cdt + y2 * sdt
            x[1] = -y1 * sdt + y2 * cdt
        else:
            x[0] = y1 + x2 * dt
            x[1] = y2 - x1 * dt
    scal[TAB_PTR] = ptr
    scal[REC_PTR] = rp
    return 1 if scal[EXITED] != EXIT_NONE else 0


def monomial_arrays(monomials):
    """Pack TrigMonomial objects into the flat arrays the kernel consumes."""
    n = len(monomials)
    order = np.empty(n, np.int64)
    tgt = np.empty(n, np.int64)
    coef = np.empty(n)
    p1 = np.empty(n, np.int64)
    p2 = np.empty(n, np.int64)
    harm = np.empty(n, np.int64)
    kind = np.empty(n, np.int64)
    sat = np.empty(n, np.int64)
    for i, m in enumerate(monomials):
        order[i] = m.order
        if m.target[0] == "drift":
            tgt[i] = m.target[1]
        else:
            tgt[i] = 2 + 2 * m.target[1] + m.target[2]
        coef[i] = m.coef
        p1[i], p2[i] = m.powers
        harm[i] = m.harmonic
        kind[i] = 0 if m.kind == "cos" else 1
        sat[i] = m.saturation
    return order, tgt, coef, p1, p2, harm, kind, sat
