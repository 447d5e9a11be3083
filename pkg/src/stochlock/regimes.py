"""Regime classification (phase locking vs. drifting), stability conditions and the
truncated deterministic averaged system.

Locked phases are the simple zeros phi0 of the leading phase coefficient
omega_{m,0}; they attract when its slope there is negative.  The stability
of the equilibrium is then decided by the sign of the amplitude
coefficients at phi0 (locking) or uniformly in psi (drifting):

=========  ==========  ==============================================
regime     shape       condition
=========  ==========  ==============================================
locking    linear      lambda_n(phi0) < 0                     ("Th2")
locking    nonlinear   lambda_{n,h}(phi0) < 0, lambda_{n+l}(phi0) < 0 ("Th3a")
locking    nonlinear   lambda_{n,h}(phi0) < 0, lambda_{n+l}(phi0) > 0,
                       n + l = m  (slowly decaying locked solution) ("Th3b")
drifting   linear      lambda_n(psi) < 0 for all psi          ("Th4")
drifting   nonlinear   lambda_{n,h} < 0 and lambda_{n+l} < 0 everywhere ("Th5")
=========  ==========  ==============================================

The labels name the corresponding stability statements; they are kept as
short identifiers in reports.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from fractions import Fraction
from typing import Callable, Dict, List, Optional

import numpy as np
from scipy.integrate import solve_ivp

from .action_angle import wrap_angle
from .averaging import AveragedSystem, TrigSeries
from .core import _num
from .errors import ConfigError, DegeneracyError, OutOfTheoryError

TWO_PI = 2.0 * np.pi


@dataclass(frozen=True)
class LockedPhase:
    phi0: float
    vartheta_m: float
    attracting: bool

    def to_dict(self):
        return {"phi0": self.phi0, "vartheta_m": self.vartheta_m, "attracting": self.attracting}


def find_roots(series: TrigSeries, n_grid: int = 512, xtol: float = 1e-10,
               zero_tol: float = 1e-12, slope_tol: float = 1e-9) -> List[LockedPhase]:
    """All simple zeros of a 2 pi-periodic series, with slopes.

    Sign changes are bracketed on an ``n_grid``-point grid over [0, 2 pi),
    refined by bisection to ``xtol`` and polished by two Newton steps.
    """
    scale = max(series.sup_norm(), 1e-300)
    grid = np.linspace(0.0, TWO_PI, n_grid, endpoint=False)
    vals = series(grid)
    sgn = np.where(np.abs(vals) <= zero_tol * scale, 0, np.sign(vals)).astype(int)
    roots = []
    h = grid[1] - grid[0]
    for i in range(n_grid):
        a, b = grid[i], grid[i] + h
        sa, sb = sgn[i], sgn[(i + 1) % n_grid]
        if sa == 0:
            roots.append(a)
            continue
        if sb == 0 or sa == sb:
            continue
        fa = vals[i]
        lo, hi = a, b
        while hi - lo > xtol:
            mid = 0.5 * (lo + hi)
            fm = float(series(mid))
            if fm == 0.0:
                lo = hi = mid
                break
            if np.sign(fm) == np.sign(fa):
                lo, fa = mid, fm
            else:
                hi = mid
        roots.append(0.5 * (lo + hi))
    out = []
    for r in roots:
        for _ in range(2):
            d = float(series.derivative(r))
            if d != 0.0:
                step = float(series(r)) / d
                if abs(step) < 10 * xtol:
                    r = r - step
        r = float(wrap_angle(r))
        if any(abs(float(wrap_angle(r - o.phi0))) < 1e-7 for o in out):
            continue
        slope = float(series.derivative(r))
        if abs(slope) < slope_tol * scale:
            raise DegeneracyError(f"degenerate locked phase at {r:.6f}: slope {slope:.3e}")
        out.append(LockedPhase(r, slope, slope < 0))
    if not out and float(np.abs(vals).min()) <= 1e3 * zero_tol * scale:
        raise DegeneracyError("phase coefficient touches zero without changing sign")
    return sorted(out, key=lambda p: p.phi0)


def find_locked_phases(avg: AveragedSystem, **kw) -> List[LockedPhase]:
    """Zeros of omega_{m,0} with slopes vartheta_m; empty list in the drifting case."""
    if avg.omega_m0 is None:
        raise DegeneracyError("averaged system has no non-zero phase coefficient")
    return find_roots(avg.omega_m0, **kw)


@dataclass
class RegimeReport:
    regime: str
    locked_phases: List[LockedPhase]
    applicable_theorem: str
    stable: bool
    weight_exponent: float = 0.0
    decay_exponent: Optional[float] = None
    u0: Optional[float] = None
    thresholds: Dict[str, dict] = field(default_factory=dict)
    per_phase: List[dict] = field(default_factory=list)
    n: Optional[int] = None
    m: Optional[int] = None
    q: Optional[int] = None
    shape: Optional[str] = None
    h: Optional[int] = None
    l: Optional[int] = None
    mu: Optional[float] = None
    p: Optional[int] = None
    horizon_branch: Optional[str] = None
    notes: List[str] = field(default_factory=list)

    @property
    def attracting_phases(self):
        return [lp for lp in self.locked_phases if lp.attracting]

    def to_dict(self):
        d = asdict(self)
        d["locked_phases"] = [lp.to_dict() for lp in self.locked_phases]
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True, default=float)

    def verdict(self) -> str:
        """One-line human-readable verdict."""
        th = self.thresholds.get("b0")
        if self.applicable_theorem == "Th3b":
            extra = f" (b0 > {_fmt(th['value'])})" if th else ""
            return (f"{self.regime}; slowly decaying locked solution u0 t^(-{_fmt(self.decay_exponent)})"
                    f", stable in the decaying-amplitude distance{extra}")
        if th is not None and th.get("value") is not None:
            word = "iff" if th.get("regime", self.regime) == "locking" else "if"
            expr = th.get("expression")
            val = _fmt(th["value"])
            tail = f" (= {expr})" if expr and expr != val else ""
            return f"{self.regime}; stable {word} b0 < {val}{tail}"
        return f"{self.regime}; {'stable' if self.stable else 'not shown stable'}"

    def to_text(self) -> str:
        lines = [f"regime: {self.regime}",
                 f"indices: n={self.n} m={self.m} q={self.q} shape={self.shape} h={self.h} "
                 f"l={self.l}",
                 f"applicable theorem: {self.applicable_theorem}",
                 f"stable: {self.stable}",
                 f"weight exponent: {self.weight_exponent}"]
        for lp in self.locked_phases:
            lines.append(f"locked phase: phi0={lp.phi0:.12g} vartheta={lp.vartheta_m:.12g} "
                         f"attracting={lp.attracting}")
        if self.decay_exponent is not None:
            lines.append(f"decay exponent: {self.decay_exponent:.12g}  u0: {self.u0:.12g}")
        for name, th in self.thresholds.items():
            lines.append(f"threshold {name}: {th.get('value')!r} ({th.get('kind')}) "
                         f"{th.get('expression', '')}".rstrip())
        if self.horizon_branch:
            lines.append(f"horizon branch: {self.horizon_branch}")
        for n in self.notes:
            lines.append(f"note: {n}")
        lines.append(f"verdict: {self.verdict()}")
        return "\n".join(lines)


def _fmt(x) -> str:
    """Short exact-looking rendering: simple rationals as p/q, otherwise 12 significant digits."""
    if x is None:
        return "None"
    fr = Fraction(float(x)).limit_denominator(1024)
    if abs(float(fr) - float(x)) <= 1e-12 * max(1.0, abs(float(x))):
        return str(fr.numerator) if fr.denominator == 1 else f"{fr.numerator}/{fr.denominator}"
    return f"{float(x):.12g}"


def _horizon_branch(p, q):
    if p is None:
        return None
    if 2 * p < q:
        return "2p<q"
    if 2 * p == q:
        return "2p=q"
    return "2p>q"


def classify(avg: AveragedSystem, mu: Optional[float] = None, p: Optional[int] = None,
             spec=None, n_check: int = 2048) -> RegimeReport:
    """Regime, applicable stability statement and thresholds for a fitted averaged system."""
    if avg.m is None or avg.n is None:
        raise DegeneracyError("averaged system has vanishing amplitude or phase coefficients")
    q = avg.q
    if avg.m > q:
        raise OutOfTheoryError(f"leading phase order m={avg.m} exceeds q={q}")
    locked = find_locked_phases(avg)
    attracting = [lp for lp in locked if lp.attracting]
    psi = np.linspace(0.0, TWO_PI, n_check, endpoint=False)
    rep = RegimeReport(regime="locking" if attracting else "drifting", locked_phases=locked,
                       applicable_theorem="none", stable=False, n=avg.n, m=avg.m, q=q,
                       shape=avg.shape, h=avg.h, l=avg.l, mu=mu, p=p,
                       horizon_branch=_horizon_branch(p, q))
    if locked and not attracting:
        rep.regime = "degenerate"
        return rep
    n, m = avg.n, avg.m
    if rep.regime == "locking":
        per = []
        for lp in attracting:
            f = lp.phi0
            if avg.shape == "linear":
                ln = float(avg.lambda_n(f))
                ok = ln < 0
                per.append({"phi0": f, "theorem": "Th2", "lambda_n": ln, "stable": ok})
            else:
                lnh = float(avg.lambda_nh(f))
                lnl = float(avg.lambda_nl(f)) if avg.lambda_nl is not None else None
                entry = {"phi0": f, "lambda_nh": lnh, "lambda_nl": lnl}
                if lnl is not None and lnh < 0 and lnl < 0:
                    entry.update(theorem="Th3a", stable=True)
                elif (lnl is not None and lnh < 0 and lnl > 0 and n + avg.l == m and m <= q):
                    kd = avg.l / ((avg.h - 1) * q)
                    add = kd if n + avg.l == q else 0.0
                    entry.update(theorem="Th3b", stable=True, kappa_dec=kd,
                                 u0=((lnl + add) / abs(lnh)) ** (1.0 / (avg.h - 1)))
                else:
                    entry.update(theorem="none", stable=False)
                per.append(entry)
        rep.per_phase = per
        theorems = {e["theorem"] for e in per}
        rep.applicable_theorem = per[0]["theorem"] if len(theorems) == 1 else "mixed"
        rep.stable = all(e["stable"] for e in per)
        if rep.applicable_theorem == "mixed":
            rep.notes.append("attracting phases satisfy different stability statements")
        if avg.shape == "linear":
            rep.weight_exponent = 0.0 if n <= m else (n - m) / (2.0 * q)
        elif avg.l is not None:
            rep.weight_exponent = 0.0 if n + avg.l <= m else (n + avg.l - m) / (2.0 * q)
        p3b = [e for e in per if e["theorem"] == "Th3b"]
        if p3b:
            rep.decay_exponent = p3b[0]["kappa_dec"]
            rep.u0 = p3b[0]["u0"]
            rep.weight_exponent = 0.0
    else:
        if avg.shape == "linear":
            mx = float(avg.lambda_n(psi).max())
            rep.applicable_theorem = "Th4"
            rep.stable = mx < 0
            rep.per_phase = [{"max_lambda_n": mx}]
        else:
            mh = float(avg.lambda_nh(psi).max())
            ml = float(avg.lambda_nl(psi).max()) if avg.lambda_nl is not None else math.inf
            rep.applicable_theorem = "Th5"
            rep.stable = mh < 0 and ml < 0
            rep.per_phase = [{"max_lambda_nh": mh, "max_lambda_nl": ml}]
        rep.weight_exponent = 0.0
        if not rep.stable:
            rep.applicable_theorem = "none"
    if spec is not None:
        cf = closed_form_threshold(spec)
        if cf is not None:
            rep.thresholds["b0"] = cf
    return rep


def stability_margin(avg: AveragedSystem, n_check: int = 2048) -> float:
    """Quantity whose negativity is the stability condition in the b0-affine builtins.

    Locking/linear: max over attracting phases of lambda_n(phi0).
    Locking/nonlinear: max over attracting phases of lambda_{n+l}(phi0).
    Drifting: max over psi of lambda_n (linear) or lambda_{n+l} (nonlinear).
    """
    locked = [lp for lp in find_locked_phases(avg) if lp.attracting]
    target = avg.lambda_n if avg.shape == "linear" else avg.lambda_nl
    if target is None:
        raise DegeneracyError("no linear amplitude coefficient available")
    if locked:
        return max(float(target(lp.phi0)) for lp in locked)
    psi = np.linspace(0.0, TWO_PI, n_check, endpoint=False)
    return float(target(psi).max())


def numeric_threshold(build: Callable[[float], AveragedSystem], probes=(-1.0, 0.0, 1.0),
                      affine_tol: float = 1e-8) -> dict:
    """Solve margin(b) = 0 assuming affine dependence, from averaged systems built at probes.

    ``build(value)`` returns the fitted averaged system with the parameter set
    to ``value``.  Affinity is checked at the third probe.
    """
    if len(probes) < 3:
        raise ConfigError("need three probe values to check affinity")
    vals = [stability_margin(build(float(b))) for b in probes[:3]]
    b0, b1, b2 = probes[:3]
    slope = (vals[1] - vals[0]) / (b1 - b0)
    if slope == 0:
        raise DegeneracyError("stability margin does not depend on the parameter")
    pred = vals[0] + slope * (b2 - b0)
    if abs(pred - vals[2]) > affine_tol * max(1.0, abs(vals[2])):
        raise DegeneracyError("stability margin is not affine in the parameter")
    value = b0 - vals[0] / slope
    return {"value": float(value), "kind": "numeric", "slope": float(slope),
            "condition": "stable iff parameter " + ("<" if slope > 0 else ">") + " value"}


def closed_form_threshold(spec) -> Optional[dict]:
    """Closed-form b0 threshold for builtin examples, when one is known."""
    name = getattr(spec, "name", None)
    P = {k: _num(v) for k, v in dict(getattr(spec, "params", {})).items()}
    g = lambda k: P.get(k, 0.0)
    s0 = g("s0") if "s0" in P else 1.0
    if name in ("ex0", "ex1"):
        p = int(P.get("p", 1))
        a0, a1, b1, c0, c1, s2 = g("a0"), g("a1"), g("b1"), g("c0"), g("c1"), g("s2")
        if p == 1:
            if s0 == 1:
                w = 8 * a0 + 16 * s2
                if abs(w) < c1 ** 2:
                    return _th(-(6 * c0 ** 2 + 3 * c1 ** 2) / 16 - math.sqrt(c1 ** 4 - w ** 2) / 8,
                               "locking", "-(6c0^2+3c1^2)/16 - sqrt(c1^4-(8a0+16s2)^2)/8",
                               "-5c1^2/16" if name == "ex0" else None)
                if abs(w) > c1 ** 2:
                    return _th(-(6 * c0 ** 2 + 5 * c1 ** 2) / 16, "drifting",
                               "-(6c0^2+5c1^2)/16")
                return None
            if s0 == 2:
                if a1 != 0 or b1 != 0 or c0 != 0:
                    return None
                w = 16 * (a0 + s2)
                if abs(w) < c1 ** 2:
                    return _th(-3 * c1 ** 2 / 16 - math.sqrt(c1 ** 4 - w ** 2) / 32, "locking",
                               "-3c1^2/16 - sqrt(c1^4-256(a0+s2)^2)/32")
                if abs(w) > c1 ** 2:
                    return _th(-7 * c1 ** 2 / 32, "drifting", "-7c1^2/32")
                return None
            if s0 == 3:
                if 3 * a0 + 2 * s2 == 0:
                    return None
                return _th(-(6 * c0 ** 2 + 3 * c1 ** 2) / 16, "drifting", "-(6c0^2+3c1^2)/16")
            return None
        if p == 2:
            if s0 == 1:
                if a0 + 2 * s2 == 0:
                    return None
                return _th(0.0, "drifting", "0")
            if s0 == 2:
                d1 = math.hypot(a1, b1)
                w = 2 * (a0 + s2)
                if abs(w) < d1:
                    return _th(-0.5 * math.sqrt(d1 ** 2 - w ** 2), "locking",
                               "-sqrt(d1^2-4(a0+s2)^2)/2")
                if abs(w) > d1:
                    return _th(-d1 / 2, "drifting", "-d1/2")
            return None
    if name == "ex2":
        if s0 != 1:
            return None
        a0, c0, c1, s1, s2 = g("a0"), g("c0"), g("c1"), g("s1"), g("s2")
        if a0 >= 0:
            return None
        if s1 == 0 and 16 * abs(s2) < c1 ** 2:
            return _th(-(6 * c0 ** 2 + 3 * c1 ** 2 + 2 * math.sqrt(c1 ** 4 - 256 * s2 ** 2)) / 16,
                       "locking", "-(6c0^2+3c1^2+2 sqrt(c1^4-256 s2^2))/16")
        if s1 != 0 or 16 * abs(s2) > c1 ** 2:
            return _th(-(6 * c0 ** 2 + 5 * c1 ** 2) / 16, "drifting", "-(6c0^2+5c1^2)/16")
    return None


def _th(value, regime, expression, short=None):
    return {"value": float(value), "kind": "closed_form", "regime": regime,
            "expression": short or expression, "general_expression": expression}


# ---------------------------------------------------------------------------
# truncated averaged system


@dataclass
class TruncatedTrajectory:
    t: np.ndarray
    u: np.ndarray
    phi: np.ndarray
    status: str
    sol: object = None

    def __call__(self, t):
        """Dense output (u, phi) at times t."""
        tau = np.log(np.asarray(t, dtype=float))
        y = self.sol(tau)
        return y[0], y[1]

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t", "u", "phi"])
            for a, b, c in zip(self.t, self.u, self.phi):
                w.writerow([repr(float(a)), repr(float(b)), repr(float(c))])


def solve_truncated(avg: AveragedSystem, u0: float, phi0: float, t_start: float, t_end: float,
                    N: Optional[int] = None, n_out: int = 400, rtol: float = 1e-10,
                    atol: float = 1e-13) -> TruncatedTrajectory:
    """Integrate du/dt = sum t^(-k/q) Lambda_k(u, phi), dphi/dt = sum t^(-k/q) Omega_k.

    Integration runs in log-time tau = log t (the natural clock of the
    averaged system).  Leaving the tabulated range [0, v_max] ends the
    integration with status "exit".
    """
    if not (t_end > t_start > 0):
        raise ConfigError("need t_end > t_start > 0")
    if not (0 <= u0 <= avg.v_max):
        raise ConfigError(f"initial amplitude {u0} outside [0, {avg.v_max}]")
    N = N or max(avg.n or 1, avg.m or 1)
    N = min(N, avg.N)

    def rhs(tau, y):
        t = math.exp(tau)
        u = min(max(y[0], 0.0), avg.v_max)
        du, dp = avg.drift(u, y[1], t, N)
        return [t * float(du), t * float(dp)]

    def leave_high(tau, y):
        return avg.v_max - y[0]

    def leave_low(tau, y):
        return y[0] + 1e-300 if u0 > 0 else 1.0

    leave_high.terminal = True
    leave_low.terminal = True
    tau = np.linspace(math.log(t_start), math.log(t_end), n_out)
    sol = solve_ivp(rhs, (tau[0], tau[-1]), [float(u0), float(phi0)], method="DOP853",
                    t_eval=tau, dense_output=True, rtol=rtol, atol=atol,
                    events=(leave_high, leave_low))
    status = "ok" if sol.status == 0 else ("exit" if sol.status == 1 else "failed")
    return TruncatedTrajectory(np.exp(sol.t), sol.y[0], sol.y[1], status, sol.sol)


def reference_solution(avg: AveragedSystem, report: RegimeReport, t_start: float, t_end: float,
                       eps: float = 1e-2, phase_index: int = 0):
    """(phi_eps, u_eps) reference functions for the distances, from the truncated system.

    Started at (0, phi0 + eps) in the linear case and at
    (u0 t_start^(-kappa_dec), phi0 + eps) when a slowly decaying locked
    solution exists.
    """
    att = report.attracting_phases
    if not att:
        raise ConfigError("reference solution needs an attracting locked phase")
    phi0 = att[phase_index].phi0
    if report.u0 is not None:
        ustart = report.u0 * t_start ** (-report.decay_exponent)
    else:
        ustart = 0.0
    return solve_truncated(avg, ustart, phi0 + eps, t_start, t_end)
