"""Monte Carlo checks of stochastic stability: weighted distances, exit
probabilities, horizon formulas, threshold sweeps and a Lyapunov-function
(supermartingale) monitor.
"""

from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np
from scipy.stats import norm as _normal

from .action_angle import build_chart, wrap_angle
from .averaging import averaged_system
from .errors import ConfigError, DegeneracyError
from .regimes import RegimeReport, classify, reference_solution
from .sde import RngStream, StopRule, simulate_ensemble

QUANTILES = (0.05, 0.25, 0.5, 0.75, 0.95)


# ---------------------------------------------------------------------------
# configuration and statistics


@dataclass
class EnsembleConfig:
    n_paths: int = 400
    dt: float = 0.05
    t_s: float = 1.0
    horizon: object = 1.0e4          # duration, or "auto"
    delta: float = 0.05
    eps1: float = 0.5
    eps2: float = 0.1
    master_seed: int = 0
    weight_exponent: Optional[float] = None   # None: take it from the regime report
    workers: int = 1
    scheme: str = "split"
    horizon_cap: Optional[float] = None       # used when the horizon formula is infinite
    C0: Optional[float] = None
    ref_eps: float = 0.0                       # offset of the reference locked solution

    def __post_init__(self):
        if not (0 < self.delta < self.eps1):
            raise ConfigError(f"need 0 < delta < eps1, got delta={self.delta}, eps1={self.eps1}")
        if int(self.n_paths) < 1:
            raise ConfigError("n_paths must be >= 1")
        if not self.dt > 0 or not self.t_s > 0:
            raise ConfigError("dt and t_s must be positive")
        if not (isinstance(self.horizon, str) and self.horizon == "auto"):
            if not float(self.horizon) > 0:
                raise ConfigError("horizon must be positive or 'auto'")

    def to_dict(self):
        return asdict(self)


def wilson_interval(k: int, n: int, level: float = 0.95):
    """Wilson score interval for a binomial proportion."""
    if n <= 0:
        raise ConfigError("empty sample")
    z = float(_normal.ppf(0.5 + level / 2))
    p = k / n
    den = 1 + z * z / n
    centre = (p + z * z / (2 * n)) / den
    half = z * math.sqrt(p * (1 - p) / n + z * z / (4 * n * n)) / den
    lo = 0.0 if k == 0 else max(0.0, centre - half)
    hi = 1.0 if k == n else min(1.0, centre + half)
    return lo, hi


@dataclass
class ExitStats:
    n_paths: int
    n_exit: int
    exit_fraction: float
    interval: tuple
    sup_stat_quantiles: Dict[str, float]
    exit_times: List[Optional[float]]
    exit_reasons: Dict[str, int] = field(default_factory=dict)
    horizon: float = 0.0
    distance: str = "d"
    weight_exponent: float = 0.0
    notes: List[str] = field(default_factory=list)

    @property
    def upper(self):
        return self.interval[1]

    @property
    def lower(self):
        return self.interval[0]

    def exit_time_quantiles(self):
        ts = np.array([t for t in self.exit_times if t is not None])
        if ts.size == 0:
            return {}
        return {f"q{int(100 * q):02d}": float(np.quantile(ts, q)) for q in QUANTILES}

    def rows(self):
        out = [("n_paths", self.n_paths), ("n_exit", self.n_exit),
               ("exit_fraction", self.exit_fraction), ("ci_lower", self.lower),
               ("ci_upper", self.upper), ("horizon", self.horizon), ("distance", self.distance),
               ("weight_exponent", self.weight_exponent)]
        out += [(f"sup_stat_{k}", v) for k, v in self.sup_stat_quantiles.items()]
        out += [(f"exit_time_{k}", v) for k, v in self.exit_time_quantiles().items()]
        out += [(f"reason_{k}", v) for k, v in sorted(self.exit_reasons.items())]
        return out

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["key", "value"])
            for k, v in self.rows():
                w.writerow([k, repr(v) if isinstance(v, float) else v])


def _stats_from_trajectories(trajs, horizon, distance, weight):
    n = len(trajs)
    reasons: Dict[str, int] = {}
    for tr in trajs:
        reasons[tr.exit_reason] = reasons.get(tr.exit_reason, 0) + 1
    k = sum(1 for tr in trajs if tr.exit_reason != "none")
    sups = np.array([tr.sup_stat for tr in trajs])
    quant = {f"q{int(100 * q):02d}": float(np.quantile(sups, q)) for q in QUANTILES}
    return ExitStats(n_paths=n, n_exit=k, exit_fraction=k / n, interval=wilson_interval(k, n),
                     sup_stat_quantiles=quant, exit_times=[tr.exit_time for tr in trajs],
                     exit_reasons=reasons, horizon=float(horizon), distance=distance,
                     weight_exponent=float(weight))


# ---------------------------------------------------------------------------
# distances


def _energy_angle(chart, x):
    x = np.asarray(x, float)
    if chart is None:
        H = 0.5 * np.sum(x * x, axis=-1)
        Phi = np.arctan2(-x[..., 1], x[..., 0])
        return H, Phi
    return np.asarray(chart.energy(x)), np.asarray(chart.angle(x))


def distance_d(chart, schedule, ell: int, phi_eps: Callable, x, t: float, last_angle=None):
    """sqrt(t^(2 ell/q) H(x) + wrap(Phi(x) - S(t)/kappa - phi_eps(t))^2).

    ``chart=None`` means the harmonic chart.  At x = 0 the angle falls back
    to ``last_angle`` (the last defined value of Phi - S/kappa); without one
    the distance is amplitude-only.
    """
    H, Phi = _energy_angle(chart, x)
    amp2 = t ** (2.0 * ell / schedule.q) * H
    ang = _angle_term(schedule, Phi, H, t, phi_eps, last_angle)
    return np.sqrt(amp2 + ang * ang)


def distance_dtilde(chart, schedule, ell: int, kappa_dec: float, u_eps: Callable,
                    phi_eps: Callable, x, t: float, last_angle=None):
    """sqrt(t^(2 kd) (t^(ell/q) sqrt H - u_eps(t))^2 + wrap(Phi - S/kappa - phi_eps)^2)."""
    H, Phi = _energy_angle(chart, x)
    dev = t ** (ell / schedule.q) * np.sqrt(H) - u_eps(t)
    ang = _angle_term(schedule, Phi, H, t, phi_eps, last_angle)
    return np.sqrt(t ** (2.0 * kappa_dec) * dev * dev + ang * ang)


def _angle_term(schedule, Phi, H, t, phi_eps, last_angle):
    rel = wrap_angle(Phi - schedule.phase(t) / schedule.kappa)
    if last_angle is not None:
        rel = np.where(H > 0, rel, last_angle)
        return np.abs(wrap_angle(rel - phi_eps(t)))
    return np.where(H > 0, np.abs(wrap_angle(rel - phi_eps(t))), 0.0)


# ---------------------------------------------------------------------------
# noise bound and horizon


def noise_bound_mu(spec, radii=(1e-3, 0.05, 0.3), n_dir: int = 24, n_S: int = 32,
                   t_grid=None, tol: float = 0.05):
    """Smallest mu with tr(A^T A) <= mu^2 t^(-2p/q) |x|^2 on a sample grid.

    Returns (mu, p_check); p_check is False when the fitted decay of
    max tr(A^T A)/|x|^2 in t is slower than t^(-2p/q).
    """
    q = spec.q
    p = spec.noise_order
    if t_grid is None:
        t_grid = np.geomspace(1.0, 1e4, 9)
    ang = np.linspace(0, 2 * np.pi, n_dir, endpoint=False)
    S = np.linspace(0, 2 * np.pi * spec.kappa, n_S, endpoint=False)
    xs = np.concatenate([r * np.stack([np.cos(ang), np.sin(ang)], -1) for r in radii])
    r2 = np.sum(xs * xs, -1)
    X = xs[:, None, :]
    SS = S[None, :]
    orders = sorted({tm.order for tm in spec.terms if tm.diffusion_coeff is not None})
    if not orders:
        return 0.0, True
    Ak = {k: spec.order_coefficients(np.broadcast_to(X, (len(xs), n_S, 2)),
                                     np.broadcast_to(SS, (len(xs), n_S)), k)[1] for k in orders}
    M = []
    for t in t_grid:
        A = sum(t ** (-k / q) * Ak[k] for k in orders)
        tr = np.einsum("...ij,...ij->...", A, A)
        M.append(float((tr / r2[:, None]).max()))
    M = np.array(M)
    if np.all(M == 0):
        return 0.0, True
    mu = float(np.sqrt((M * np.asarray(t_grid) ** (2.0 * p / q)).max()))
    slope = float(np.polyfit(np.log(t_grid), np.log(M), 1)[0])
    return mu, bool(slope <= -2.0 * p / q + tol)


def horizon_T(p: int, q: int, delta: float, mu: float, C0: float, t_s: float):
    """Horizon over which smallness is guaranteed; math.inf in the 2p > q branch."""
    if 2 * p > q:
        return math.inf
    if mu == 0:
        return math.inf
    z = C0 * delta * delta / (mu * mu)
    if 2 * p < q:
        return z
    return t_s * math.expm1(z)


def zeta_p(t, p: int, q: int, T: float, t_s: float, t_star: Optional[float] = None):
    """Positive compensator function vanishing at t_s + T."""
    t = np.asarray(t, float)
    t_star = t_s if t_star is None else t_star
    end = T + t_s
    if 2 * p < q:
        return t_star ** (-2.0 * p / q) * (end - t)
    if 2 * p == q:
        return np.log(end / t)
    a = 1.0 - 2.0 * p / q
    return (end ** a - t ** a) / a


def theorem_recipe(report: RegimeReport, eps1: float, eps2: float, c_star: float = 1.0) -> dict:
    """Initial radius delta from the probability target (the horizon and t_s need constants)."""
    th = report.applicable_theorem
    c_plus = max(1.0, c_star)
    if th in ("Th2", "Th3a", "Th4", "Th5"):
        scale = 12.0 if report.weight_exponent == 0 and th in ("Th2", "Th3a") else 12.0 * c_plus
        return {"delta": eps1 * math.sqrt(eps2 / scale), "theorem": th,
                "note": "t_s and the horizon depend on proof constants; take them from config"}
    if th == "Th3b":
        return {"delta": eps1 * math.sqrt(eps2 / 12.0), "theorem": th,
                "note": "same recipe in the slowly decaying locked regime"}
    raise DegeneracyError(f"no stability statement applies (theorem {th!r})")


# ---------------------------------------------------------------------------
# exit probabilities


def _reference_tables(avg, report, t_s, t_end, ref_eps, n=4000):
    ref = reference_solution(avg, report, t_s, t_end, eps=ref_eps)
    tt = np.geomspace(t_s, t_end, n)
    u, ph = ref(tt)
    return ref, tt, ph, u


def _horizon(cfg: EnsembleConfig, spec, avg=None, report=None):
    if cfg.horizon != "auto":
        return float(cfg.horizon)
    mu, _ = noise_bound_mu(spec)
    C0 = cfg.C0
    if C0 is None:
        if avg is None or report is None:
            raise ConfigError("horizon 'auto' needs C0 or an averaged system and report")
        const = estimate_constants(spec, avg, report, cfg, mu=mu)
        C3 = const["C1"] + const["C2"]
        if C3 <= 0:
            C0 = math.inf
        elif 2 * spec.noise_order < spec.q:
            C0 = 2.0 * cfg.t_s ** (2.0 * spec.noise_order / spec.q) / C3
        else:
            C0 = 2.0 / C3
    T = horizon_T(spec.noise_order, spec.q, cfg.delta, mu, C0, cfg.t_s)
    if not math.isfinite(T):
        if cfg.horizon_cap is None:
            raise ConfigError("horizon is infinite; set horizon_cap or an explicit horizon")
        T = float(cfg.horizon_cap)
    return T


def initial_sampler(spec, cfg: EnsembleConfig, distance: str, report=None, ref=None,
                    chart=None):
    """Sampler path -> x0 on the delta-sphere of the chosen distance at t_s."""
    sched = spec.schedule
    q = sched.q
    ell = spec.well_index
    t_s = cfg.t_s
    S0 = sched.phase(t_s)
    amp_scale = t_s ** (ell / q)

    def point(sqrtH, Phi):
        if chart is None:
            r = math.sqrt(2.0) * sqrtH
            return np.array([r * math.cos(Phi), -r * math.sin(Phi)])
        return np.asarray(chart.point(sqrtH * sqrtH, Phi), float).reshape(2)

    if distance == "norm":
        def sample(i):
            g = RngStream(cfg.master_seed, i).generator(purpose=1)
            a = g.uniform(0, 2 * math.pi)
            r = cfg.delta / amp_scale
            x = np.array([r * math.cos(a), r * math.sin(a)])
            if chart is not None:
                E = float(chart.energy(x))
                return point(math.sqrt(E), float(chart.angle(x)))
            return x
        return sample
    if ref is None:
        raise ConfigError(f"distance {distance!r} needs a reference locked solution")
    u_s, phi_s = (float(v) for v in ref(t_s))
    if distance == "d":
        def sample(i):
            g = RngStream(cfg.master_seed, i).generator(purpose=1)
            a = g.uniform(-math.pi / 2, math.pi / 2)
            amp = cfg.delta * math.cos(a)
            return point(amp / amp_scale, S0 / sched.kappa + phi_s + cfg.delta * math.sin(a))
        return sample
    if distance == "dtilde":
        kd = report.decay_exponent

        def sample(i):
            g = RngStream(cfg.master_seed, i).generator(purpose=1)
            a = g.uniform(0, 2 * math.pi)
            amp = max(u_s + cfg.delta * math.cos(a) * t_s ** (-kd), 0.0)
            return point(amp / amp_scale, S0 / sched.kappa + phi_s + cfg.delta * math.sin(a))
        return sample
    raise ConfigError(f"unknown distance {distance!r}")


def _chart_for(spec, chart):
    if getattr(spec, "harmonic", False):
        return None
    return chart if chart is not None else build_chart(spec)


def make_stop_rule(spec, avg, report, cfg: EnsembleConfig, distance: str, t_end: float,
                   chart=None):
    """Stop rule and reference solution for the chosen distance."""
    ch = _chart_for(spec, chart)
    w = cfg.weight_exponent
    if w is None:
        w = report.weight_exponent if (report is not None and distance == "d") else 0.0
    if distance == "norm":
        return StopRule("norm", eps1=cfg.eps1, weight_exponent=w, well_index=spec.well_index,
                        chart=ch), None, w
    if report is None or avg is None:
        raise ConfigError(f"distance {distance!r} needs an averaged system and a regime report")
    if not report.attracting_phases:
        raise ConfigError(f"distance {distance!r} needs a locking regime")
    if distance == "dtilde" and report.u0 is None:
        raise ConfigError("distance 'dtilde' needs a slowly decaying locked solution")
    ref, tt, ph, uu = _reference_tables(avg, report, cfg.t_s, t_end, cfg.ref_eps)
    if distance == "d":
        rule = StopRule("d", eps1=cfg.eps1, weight_exponent=w, well_index=spec.well_index,
                        table_times=tt, phi_values=ph, chart=ch)
    elif distance == "dtilde":
        rule = StopRule("dtilde", eps1=cfg.eps1, well_index=spec.well_index,
                        kappa_dec=report.decay_exponent, table_times=tt, phi_values=ph,
                        u_values=uu, chart=ch)
        w = 0.0
    else:
        raise ConfigError(f"unknown distance {distance!r}")
    return rule, ref, w


def exit_probability(spec, avg, report: Optional[RegimeReport], cfg: EnsembleConfig,
                     distance: str = "d", chart=None, record=2) -> ExitStats:
    """Fraction of paths whose weighted distance exceeds eps1 before t_s + horizon."""
    T = _horizon(cfg, spec, avg, report)
    t_end = cfg.t_s + T
    rule, ref, w = make_stop_rule(spec, avg, report, cfg, distance, t_end, chart)
    sampler = initial_sampler(spec, cfg, distance, report, ref, rule.chart)
    trajs = simulate_ensemble(spec, sampler, cfg.t_s, t_end, cfg.dt, cfg.n_paths,
                              cfg.master_seed, rule, workers=cfg.workers, scheme=cfg.scheme,
                              record=record)
    return _stats_from_trajectories(trajs, T, distance, w)


# ---------------------------------------------------------------------------
# threshold sweep


@dataclass
class SweepResult:
    parameter: str
    values: List[float]
    fractions: List[float]
    intervals: List[tuple]
    monotone: bool
    bracket: Optional[tuple]
    estimate: Optional[float]
    analytic: Optional[float]
    notes: List[str] = field(default_factory=list)

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["value", "exit_fraction", "ci_lower", "ci_upper"])
            for v, f, (lo, hi) in sorted(zip(self.values, self.fractions, self.intervals)):
                w.writerow([repr(float(v)), repr(float(f)), repr(float(lo)), repr(float(hi))])


def threshold_sweep(family: Callable[[float], object], cfg: EnsembleConfig, grid: Sequence[float],
                    parameter: str = "b0", distance: str = "norm", n_bisect: int = 3,
                    analytic: Optional[float] = None, level: float = 0.5) -> SweepResult:
    """Locate where the exit fraction crosses ``level`` as the parameter increases.

    ``family(value)`` returns the system spec.  The grid is evaluated first;
    if the curve is monotone (non-decreasing up to overlapping intervals) the
    crossing bracket is refined by bisection and the estimate is the linear
    interpolation of the final bracket.
    """
    grid = sorted(float(g) for g in grid)
    if len(grid) == 0:
        raise ConfigError("threshold sweep needs at least one grid point")
    cache: Dict[float, ExitStats] = {}

    def run(v):
        if v not in cache:
            spec = family(v)
            avg = report = None
            if distance != "norm":
                avg = averaged_system(spec)
                report = classify(avg, spec=spec)
            cache[v] = exit_probability(spec, avg, report, cfg, distance)
        return cache[v]

    for v in grid:
        run(v)
    vals = list(grid)
    fr = [cache[v].exit_fraction for v in vals]
    iv = [cache[v].interval for v in vals]
    monotone = all(iv[i + 1][1] >= iv[i][0] for i in range(len(vals) - 1))
    res = SweepResult(parameter, vals, fr, iv, monotone, None, None, analytic)
    if not monotone:
        res.notes.append("exit fraction is not monotone in the parameter; no boundary reported")
        return res
    idx = [i for i in range(len(vals) - 1) if fr[i] < level <= fr[i + 1]]
    if not idx:
        res.notes.append("exit fraction does not cross the level on the grid")
        return res
    lo, hi = vals[idx[0]], vals[idx[0] + 1]
    for _ in range(int(n_bisect)):
        mid = 0.5 * (lo + hi)
        if run(mid).exit_fraction < level:
            lo = mid
        else:
            hi = mid
    flo, fhi = cache[lo].exit_fraction, cache[hi].exit_fraction
    est = lo + (hi - lo) * (level - flo) / (fhi - flo) if fhi != flo else 0.5 * (lo + hi)
    allv = sorted(cache)
    res.values = allv
    res.fractions = [cache[v].exit_fraction for v in allv]
    res.intervals = [cache[v].interval for v in allv]
    res.bracket = (lo, hi)
    res.estimate = float(est)
    return res


# ---------------------------------------------------------------------------
# Lyapunov monitor


@dataclass
class MonitorResult:
    variant: str
    t_bins: np.ndarray
    mean_U: np.ndarray
    stderr: np.ndarray
    violation_fraction: float
    stopped_fraction: np.ndarray
    constants: Dict[str, float]
    per_path_nonincreasing: Optional[np.ndarray] = None
    U_paths: Optional[np.ndarray] = None

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t_bin", "mean_U", "stderr", "stopped_fraction"])
            for row in zip(self.t_bins, self.mean_U, self.stderr, self.stopped_fraction):
                w.writerow([repr(float(v)) for v in row])


class _TransformedCoordinates:
    """(U1, U2) = (V_N, Psi_N) evaluated at (t^(l/q) sqrt H, Phi - S/kappa, t)."""

    def __init__(self, spec, avg, chart=None):
        self.spec = spec
        self.avg = avg
        self.chart = chart
        self.sched = spec.schedule

    def __call__(self, x, t):
        x = np.atleast_2d(np.asarray(x, float))
        t = np.broadcast_to(np.asarray(t, float), x.shape[:-1])
        H, Phi = _energy_angle(self.chart, x)
        S = self.sched.phase(t)
        R = t ** (self.spec.well_index / self.sched.q) * np.sqrt(np.maximum(H, 0.0))
        theta = wrap_angle(Phi - S / self.sched.kappa)
        V, P = self.avg.transformed(R, theta, t, S)
        return np.asarray(V, float), np.asarray(P, float), theta

    def gradients(self, x, t, h=1e-6):
        """Central-difference gradients of U1, U2 with respect to x, shapes (P, 2)."""
        x = np.atleast_2d(np.asarray(x, float))
        g1 = np.empty_like(x)
        g2 = np.empty_like(x)
        for j in range(2):
            e = np.zeros(2)
            e[j] = h
            Vp, Pp, _ = self(x + e, t)
            Vm, Pm, _ = self(x - e, t)
            g1[:, j] = (Vp - Vm) / (2 * h)
            g2[:, j] = wrap_angle(Pp - Pm) / (2 * h)
        return g1, g2


def _sample_states(spec, cfg, n_r=6, n_a=24):
    q = spec.q
    rmax = math.sqrt(2.0) * cfg.eps1 * cfg.t_s ** (-spec.well_index / q)
    rr = np.linspace(rmax / n_r, rmax, n_r)
    aa = np.linspace(0, 2 * np.pi, n_a, endpoint=False)
    return np.concatenate([r * np.stack([np.cos(aa), np.sin(aa)], -1) for r in rr])


def _monitor_times(cfg, T, n=8):
    return np.geomspace(cfg.t_s, cfg.t_s + T, n)


def estimate_constants(spec, avg, report, cfg: EnsembleConfig, mu=None, T=None,
                       chart=None, ref=None) -> Dict[str, float]:
    """Empirical levels for the proof constants C, C1, C2 on a sample grid.

    C bounds |U2 - Phi + S/kappa| t^(1/q); C1, C2 bound Z_i t^(2p/q) / mu^2
    with Z_i = |A^T grad U_i|^2.  With a reference solution ``ref`` of a
    slowly decaying locked regime the tilde constants are added.
    """
    if mu is None:
        mu, _ = noise_bound_mu(spec)
    if T is None:
        T = float(cfg.horizon) if cfg.horizon != "auto" else 1e4
    q, p = spec.q, spec.noise_order
    tc = _TransformedCoordinates(spec, avg, _chart_for(spec, chart))
    xs = _sample_states(spec, cfg)
    C = 0.0
    C1 = C2 = 0.0
    for t in _monitor_times(cfg, T):
        V, P, theta = tc(xs, t)
        C = max(C, float(np.abs(wrap_angle(P - theta)).max()) * t ** (1.0 / q))
        if mu > 0:
            A = spec.diffusion(xs, t)
            g1, g2 = tc.gradients(xs, t)
            z1 = np.sum(np.einsum("pij,pi->pj", A, g1) ** 2, -1)
            z2 = np.sum(np.einsum("pij,pi->pj", A, g2) ** 2, -1)
            fac = t ** (2.0 * p / q) / mu ** 2
            C1 = max(C1, float(z1.max()) * fac)
            C2 = max(C2, float(z2.max()) * fac)
    out = {"C": C, "C1": C1, "C2": C2, "mu": float(mu)}
    if ref is not None and report is not None and report.decay_exponent is not None and mu > 0:
        # around the slowly decaying locked solution: |t^kd (U1 - u_eps)| <= eps1
        kd = report.decay_exponent
        aa = np.linspace(0, 2 * np.pi, 24, endpoint=False)
        Ct1 = Ct2 = 0.0
        for t in _monitor_times(cfg, T):
            u_e, _ = ref(t)
            amps = np.clip(float(u_e) + cfg.eps1 * t ** (-kd) * np.linspace(-1, 1, 7), 1e-6, None)
            r = math.sqrt(2.0) * amps * t ** (-spec.well_index / q)
            xt = np.concatenate([ri * np.stack([np.cos(aa), np.sin(aa)], -1) for ri in r])
            A = spec.diffusion(xt, t)
            g1, g2 = tc.gradients(xt, t)
            z1 = t ** (2 * kd) * np.sum(np.einsum("pij,pi->pj", A, g1) ** 2, -1)
            z2 = np.sum(np.einsum("pij,pi->pj", A, g2) ** 2, -1)
            fac = t ** (2.0 * p / q) / mu ** 2
            Ct1 = max(Ct1, float(z1.max()) * fac)
            Ct2 = max(Ct2, float(z2.max()) * fac)
        out.update(C1_tilde=Ct1, C2_tilde=Ct2)
    return out


def _lyapunov_parameters(avg, report, variant):
    lp = report.attracting_phases[0]
    phi0, th = lp.phi0, abs(lp.vartheta_m)
    chi = 1.0 + (avg.omega_m1.sup_norm() if avg.omega_m1 is not None else 0.0)
    out = {"chi_m": chi, "vartheta_m": th}
    if variant == "Uast2":
        lam = avg.lambda_n if avg.shape == "linear" else avg.lambda_nl
        out["c_star"] = abs(float(lam(phi0))) * th / (4 * chi * chi)
        nn = avg.n if avg.shape == "linear" else avg.n + avg.l
        out["power"] = (nn - avg.m) / avg.q
    if variant == "tilde":
        h, kd, u0 = avg.h, report.decay_exponent, report.u0
        lnl, lnh = avg.lambda_nl, avg.lambda_nh
        add = kd if avg.n + avg.l == avg.q else 0.0
        A1 = float(lnl(phi0)) + add + h * float(lnh(phi0)) * u0 ** (h - 1)
        A2 = float(lnl.derivative(phi0)) * u0 + float(lnh.derivative(phi0)) * u0 ** h
        K = th * abs(A1) / (1 + 4 * abs(A2)) ** 2
        out.update(A1=A1, A2=A2, K=K, K1=min(1.0, K))
    return out


def default_variant(avg, report) -> str:
    if report.applicable_theorem == "Th3b":
        return "tilde"
    nn = avg.n if avg.shape == "linear" else avg.n + (avg.l or 0)
    return "Uast1" if nn < avg.m else "Uast2"


def lyapunov_monitor(spec, avg, report: RegimeReport, cfg: EnsembleConfig,
                     variant: Optional[str] = None, constants: Optional[dict] = None,
                     n_bins: int = 40, chart=None, tilde_energy: float = 1.0,
                     keep_paths: bool = False) -> MonitorResult:
    """Ensemble mean of U_*(x(tau_t), tau_t) for the process stopped at the domain exit.

    The diagnostic is the fraction of successive bins where the mean rises
    by more than the standard error of the later bin.
    """
    if not report.attracting_phases:
        raise ConfigError("the Lyapunov monitor needs a locking regime")
    variant = variant or default_variant(avg, report)
    if variant not in ("Uast1", "Uast2", "tilde"):
        raise ConfigError(f"unknown Lyapunov variant {variant!r}")
    T = _horizon(cfg, spec, avg, report)
    t_end = cfg.t_s + T
    ch = _chart_for(spec, chart)
    distance = "dtilde" if variant == "tilde" else "d"
    rule, ref, _ = make_stop_rule(spec, avg, report, cfg, distance, t_end, chart)
    const = dict(constants or {})
    needed = ("C", "C1", "C2") + (("C1_tilde", "C2_tilde") if variant == "tilde" else ())
    if any(k not in const for k in needed):
        est = estimate_constants(spec, avg, report, cfg, T=T, chart=chart,
                                 ref=ref if variant == "tilde" else None)
        for k in needed:
            const.setdefault(k, est.get(k, 0.0))
    if "mu" not in const:
        const["mu"] = noise_bound_mu(spec)[0]
    missing = [k for k in needed + ("mu",) if not np.isfinite(const.get(k, np.nan))]
    if missing:
        raise ConfigError(f"Lyapunov monitor constants missing or invalid: {missing}")
    const.update(_lyapunov_parameters(avg, report, variant))
    sampler = initial_sampler(spec, cfg, distance, report, ref, rule.chart)
    bins = np.geomspace(cfg.t_s, t_end, n_bins)
    trajs = simulate_ensemble(spec, sampler, cfg.t_s, t_end, cfg.dt, cfg.n_paths,
                              cfg.master_seed, rule, workers=cfg.workers, scheme=cfg.scheme,
                              record=bins)
    P = len(trajs)
    X = np.empty((P, n_bins, 2))
    Tt = np.empty((P, n_bins))
    stopped = np.zeros((P, n_bins), bool)
    for i, tr in enumerate(trajs):
        for b, tb in enumerate(bins):
            if tr.exit_time is not None and tb >= tr.exit_time:
                X[i, b] = tr.final_state
                Tt[i, b] = tr.exit_time
                stopped[i, b] = True
            else:
                j = int(np.searchsorted(tr.times, tb - 0.5 * tr.dt))
                j = min(j, len(tr.times) - 1)
                X[i, b] = tr.states[j]
                Tt[i, b] = tr.times[j]
    tc = _TransformedCoordinates(spec, avg, ch)
    U = _lyapunov_values(tc, ref, report, spec, cfg, T, const, variant, X.reshape(-1, 2),
                         Tt.reshape(-1), tilde_energy).reshape(P, n_bins)
    mean = U.mean(axis=0)
    se = U.std(axis=0, ddof=1) / math.sqrt(P) if P > 1 else np.zeros(n_bins)
    viol = np.sum(np.diff(mean) > se[1:]) / max(1, n_bins - 1)
    noninc = np.all(np.diff(U, axis=1) <= 1e-12 * np.maximum(1.0, np.abs(U[:, :-1])), axis=1)
    return MonitorResult(variant, bins, mean, se, float(viol), stopped.mean(axis=0), const,
                         noninc, U if keep_paths else None)


def _lyapunov_values(tc, ref, report, spec, cfg, T, const, variant, X, t, tilde_energy):
    q, p = spec.q, spec.noise_order
    V, Psi, _ = tc(X, t)
    u_e, phi_e = ref(t)
    ang = wrap_angle(Psi - phi_e)
    C, C1, C2, mu = const["C"], const["C1"], const["C2"], const["mu"]
    z = zeta_p(t, p, q, T, cfg.t_s)
    if variant == "Uast1":
        return V * V + ang * ang + C * C * t ** (-2.0 / q) + mu * mu * (C1 + C2) * z
    if variant == "Uast2":
        w = const["c_star"] * t ** (-const["power"])
        return V * V + mu * mu * C1 * z + w * (ang * ang + C * C * t ** (-2.0 / q)
                                               + mu * mu * C2 * z)
    kd = report.decay_exponent
    U1 = t ** kd * (V - u_e)
    K, K1 = const["K"], const["K1"]
    Ct = (1.0 + tilde_energy) * C * C
    Ct1 = const.get("C1_tilde", C1)
    Ct2 = const.get("C2_tilde", C2)
    return K * U1 * U1 + ang * ang + K1 * Ct * t ** (-2.0 / q) + mu * mu * (K * Ct1 + Ct2) * z
