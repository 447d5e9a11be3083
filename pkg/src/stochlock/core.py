"""Model layer: the fast-phase schedule, perturbation terms and system specs.

A system is the planar Ito equation

    dx = a(x, t) dt + A(x, t) dw,

with a = a0 + sum_k t^(-k/q) a_k(x, S(t)) and A = sum_k t^(-k/q) A_k(x, S(t)),
where a0 = (dH/dx2, -dH/dx1) is the limiting Hamiltonian field and S(t) is the
fast phase.  All coefficient callables are vectorized: states have shape
(..., 2), drift values (..., 2) and diffusion values (..., 2, 2).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction
from typing import Callable, Mapping, Optional, Sequence

import numpy as np

from .errors import DomainExceeded, ParameterError

Array = np.ndarray


def as_state(x) -> Array:
    """Coerce to a float array with trailing dimension 2 and finite entries."""
    arr = np.asarray(x, dtype=float)
    if arr.shape[-1:] != (2,):
        raise ValueError(f"planar state must have trailing dimension 2, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError("planar state has non-finite components")
    return arr


def _num(v) -> float:
    if isinstance(v, Fraction):
        return v.numerator / v.denominator
    return float(v)


@dataclass(frozen=True)
class PhaseSchedule:
    """Fast phase S(t) = sum_{k<q} s_k t^(1-k/q) + s_q log t.

    ``s`` holds the q+1 coefficients s_0..s_q and ``resonance_multiple`` is the
    integer kappa with s_0 = kappa * nu(0).
    """

    q: int
    s: tuple
    resonance_multiple: int = 1

    def __post_init__(self):
        if int(self.q) != self.q or self.q < 1:
            raise ParameterError(f"q must be a positive integer, got {self.q}")
        if len(self.s) != self.q + 1:
            raise ParameterError(f"schedule needs q+1={self.q + 1} coefficients, got {len(self.s)}")
        if int(self.resonance_multiple) != self.resonance_multiple or self.resonance_multiple < 1:
            raise ParameterError("resonance multiple must be a positive integer")
        object.__setattr__(self, "s", tuple(_num(v) for v in self.s))

    @property
    def kappa(self) -> int:
        return int(self.resonance_multiple)

    def phase(self, t):
        t = np.asarray(t, dtype=float)
        q = self.q
        out = self.s[q] * np.log(t)
        for k in range(q):
            out = out + self.s[k] * t ** (1.0 - k / q)
        return out

    def rate(self, t):
        """S'(t)."""
        t = np.asarray(t, dtype=float)
        q = self.q
        out = self.s[q] / t
        for k in range(q):
            out = out + self.s[k] * (1.0 - k / q) * t ** (-k / q)
        return out

    def rate_factor(self, k: int) -> float:
        """Coefficient of s_k t^(-k/q) in S'(t): 1 - k/q, or 1 for the log term."""
        if k == self.q:
            return 1.0
        return 1.0 - k / self.q

    def check_resonance(self, nu0: float = 1.0, tol: float = 1e-12) -> None:
        if abs(self.s[0] - self.resonance_multiple * nu0) > tol:
            raise ParameterError(
                f"resonance condition violated: s0={self.s[0]} but kappa*nu(0)="
                f"{self.resonance_multiple * nu0}"
            )


@dataclass(frozen=True)
class TrigMonomial:
    """One monomial  coef * x1^p1 * x2^p2 * trig(n S) / (1 + |x|^2)^sat.

    ``target`` is ("drift", i) or ("diffusion", i, j) with zero-based indices.
    """

    order: int
    target: tuple
    coef: float
    powers: tuple = (1, 0)
    harmonic: int = 0
    kind: str = "cos"
    saturation: int = 0

    def __post_init__(self):
        object.__setattr__(self, "coef", _num(self.coef))
        object.__setattr__(self, "target", tuple(self.target))
        object.__setattr__(self, "powers", tuple(int(p) for p in self.powers))
        if self.order < 1:
            raise ParameterError("monomial order must be >= 1")
        if sum(self.powers) < 1 or min(self.powers) < 0:
            raise ParameterError("monomials must vanish at the origin (total degree >= 1)")
        if self.kind not in ("cos", "sin"):
            raise ParameterError(f"trig kind must be cos or sin, got {self.kind!r}")
        if self.harmonic < 0 or self.saturation < 0:
            raise ParameterError("harmonic and saturation must be non-negative")
        kind = self.target[0] if self.target else None
        if kind == "drift":
            ok = len(self.target) == 2 and self.target[1] in (0, 1)
        elif kind == "diffusion":
            ok = len(self.target) == 3 and self.target[1] in (0, 1) and self.target[2] in (0, 1)
        else:
            ok = False
        if not ok:
            raise ParameterError(f"bad monomial target {self.target!r}")

    def value(self, x: Array, S) -> Array:
        x1 = x[..., 0]
        x2 = x[..., 1]
        trig = np.cos if self.kind == "cos" else np.sin
        val = self.coef * x1 ** self.powers[0] * x2 ** self.powers[1] * trig(self.harmonic * np.asarray(S))
        if self.saturation:
            val = val / (1.0 + x1 * x1 + x2 * x2) ** self.saturation
        return val


@dataclass(frozen=True)
class PerturbationTerm:
    """Coefficients a_k(x, S) and A_k(x, S) of a fixed order k.

    Either callable may be None, meaning identically zero.
    """

    order: int
    drift_coeff: Optional[Callable] = None
    diffusion_coeff: Optional[Callable] = None

    def drift(self, x: Array, S) -> Array:
        if self.drift_coeff is None:
            return np.zeros(np.shape(x))
        return np.broadcast_to(np.asarray(self.drift_coeff(x, S), dtype=float), np.shape(x))

    def diffusion(self, x: Array, S) -> Array:
        shape = np.shape(x)[:-1] + (2, 2)
        if self.diffusion_coeff is None:
            return np.zeros(shape)
        return np.broadcast_to(np.asarray(self.diffusion_coeff(x, S), dtype=float), shape)


def terms_from_monomials(monomials: Sequence[TrigMonomial]) -> tuple:
    """Group monomials by order into vectorized PerturbationTerm objects."""
    orders = sorted({m.order for m in monomials})
    terms = []
    for k in orders:
        drift_m = [m for m in monomials if m.order == k and m.target[0] == "drift"]
        diff_m = [m for m in monomials if m.order == k and m.target[0] == "diffusion"]

        def drift(x, S, _ms=tuple(drift_m)):
            out = np.zeros(np.broadcast_shapes(np.shape(x), np.shape(S) + (2,)))
            for m in _ms:
                out[..., m.target[1]] += m.value(x, S)
            return out

        def diffusion(x, S, _ms=tuple(diff_m)):
            shape = np.broadcast_shapes(np.shape(x), np.shape(S) + (2,))[:-1] + (2, 2)
            out = np.zeros(shape)
            for m in _ms:
                out[..., m.target[1], m.target[2]] += m.value(x, S)
            return out

        terms.append(PerturbationTerm(k, drift if drift_m else None, diffusion if diff_m else None))
    return tuple(terms)


def harmonic_hamiltonian(x):
    x = np.asarray(x, dtype=float)
    return 0.5 * (x[..., 0] ** 2 + x[..., 1] ** 2)


def harmonic_gradient(x):
    return np.array(x, dtype=float)


def harmonic_hessian(x):
    shape = np.shape(x)[:-1] + (2, 2)
    return np.broadcast_to(np.eye(2), shape).copy()


@dataclass(frozen=True, eq=False)
class SystemSpec:
    """Perturbed planar Ito system; immutable once built."""

    hamiltonian: Callable
    hamiltonian_gradient: Callable
    schedule: PhaseSchedule
    terms: tuple = ()
    truncation_order: Optional[int] = None
    domain_radius: float = 5.0
    energy_cap: Optional[float] = None
    noise_order: int = 1
    well_index: int = 0
    nu0: float = 1.0
    harmonic: bool = False
    hamiltonian_hessian: Optional[Callable] = None
    name: str = "custom"
    params: Mapping = field(default_factory=dict)
    monomials: Optional[tuple] = None

    def __post_init__(self):
        object.__setattr__(self, "terms", tuple(self.terms))
        if self.truncation_order is None:
            top = max((t.order for t in self.terms), default=0)
            object.__setattr__(self, "truncation_order", top)
        if self.energy_cap is None:
            object.__setattr__(self, "energy_cap", 0.5 * self.domain_radius ** 2)
        if self.domain_radius <= 0:
            raise ParameterError("domain radius must be positive")
        if self.noise_order < 1 or self.well_index < 0:
            raise ParameterError("noise order must be >= 1 and well index >= 0")
        self.schedule.check_resonance(self.nu0)

    @property
    def q(self) -> int:
        return self.schedule.q

    @property
    def kappa(self) -> int:
        return self.schedule.kappa

    def order_coefficients(self, x: Array, S, k: int):
        """(a_k(x,S), A_k(x,S)) summed over all terms of order k."""
        x = np.asarray(x, dtype=float)
        shape = np.broadcast_shapes(np.shape(x), np.shape(S) + (2,))
        a = np.zeros(shape)
        A = np.zeros(shape[:-1] + (2, 2))
        for term in self.terms:
            if term.order == k:
                a = a + term.drift(x, S)
                A = A + term.diffusion(x, S)
        return a, A

    def limiting_field(self, x: Array) -> Array:
        g = np.asarray(self.hamiltonian_gradient(x), dtype=float)
        return np.stack([g[..., 1], -g[..., 0]], axis=-1)

    def perturbation_drift(self, x: Array, t: float) -> Array:
        S = self.schedule.phase(t)
        out = np.zeros(np.shape(x))
        for term in self.terms:
            if term.order <= self.truncation_order and term.drift_coeff is not None:
                out = out + t ** (-term.order / self.q) * term.drift(x, S)
        return out

    def drift(self, x: Array, t: float) -> Array:
        return self.limiting_field(x) + self.perturbation_drift(x, t)

    def diffusion(self, x: Array, t: float) -> Array:
        S = self.schedule.phase(t)
        out = np.zeros(np.shape(x)[:-1] + (2, 2))
        for term in self.terms:
            if term.order <= self.truncation_order and term.diffusion_coeff is not None:
                out = out + t ** (-term.order / self.q) * term.diffusion(x, S)
        return out

    def has_noise(self) -> bool:
        return any(t.diffusion_coeff is not None for t in self.terms)


def _check_pre(spec: SystemSpec, x, t):
    if not t > 0:
        raise ValueError("time must be positive")
    x = as_state(x)
    if np.any(np.hypot(x[..., 0], x[..., 1]) > spec.domain_radius):
        raise DomainExceeded(f"|x| exceeds domain radius {spec.domain_radius}")
    return x


def eval_drift(spec: SystemSpec, x, t: float) -> Array:
    """a0(x) + sum_{k <= truncation} t^(-k/q) a_k(x, S(t))."""
    return spec.drift(_check_pre(spec, x, t), t)


def eval_diffusion(spec: SystemSpec, x, t: float) -> Array:
    """sum_{k <= truncation} t^(-k/q) A_k(x, S(t))."""
    return spec.diffusion(_check_pre(spec, x, t), t)


_EX_ALLOWED = {
    "ex0": {"b0", "c1", "s0", "p"},
    "ex1": {"a0", "a1", "b0", "b1", "c0", "c1", "s0", "s2", "p"},
    "ex2": {"a0", "a1", "b0", "b1", "c0", "c1", "s0", "s1", "s2"},
}


def _positive_int(v, what):
    f = _num(v)
    if f != int(f) or f < 1:
        raise ParameterError(f"{what} must be a positive integer, got {v}")
    return int(f)


def builtin_monomials(name: str, params: Mapping):
    """Monomial table, q and schedule coefficients for a builtin example."""
    P = {k: _num(v) for k, v in params.items() if k != "p"}
    g = lambda key: P.get(key, 0.0)
    mons = []
    if name in ("ex0", "ex1"):
        p = _positive_int(params.get("p", 1), "p")
        if p not in (1, 2):
            raise ParameterError(f"noise exponent p must be 1 or 2, got {p}")
        # t^-1 sits at order 2 of t^(-1/2) when p=1; with p=2 every term is O(t^-1), so q=1
        q = 2 if p == 1 else 1
        kd = q
        kn = 1
        for coef, pw, n in ((g("a0"), (1, 0), 0), (g("a1"), (1, 0), 1),
                            (g("b0"), (0, 1), 0), (g("b1"), (0, 1), 1)):
            if coef:
                mons.append(TrigMonomial(kd, ("drift", 1), coef, pw, n))
        for coef, n in ((g("c0"), 0), (g("c1"), 1)):
            if coef:
                mons.append(TrigMonomial(kn, ("diffusion", 1, 1), coef, (1, 0), n))
        s0 = params.get("s0", 1)
        s = (s0, 0.0, g("s2")) if q == 2 else (s0, g("s2"))
    elif name == "ex2":
        q = 2
        for coef, n in ((g("a0"), 0), (g("a1"), 1)):
            if coef:
                mons.append(TrigMonomial(1, ("drift", 1), coef, (2, 1), n, saturation=1))
        for coef, n in ((g("b0"), 0), (g("b1"), 1)):
            if coef:
                mons.append(TrigMonomial(2, ("drift", 1), coef, (0, 1), n))
        for coef, n in ((g("c0"), 0), (g("c1"), 1)):
            if coef:
                mons.append(TrigMonomial(1, ("diffusion", 1, 1), coef, (1, 0), n))
        s0 = params.get("s0", 1)
        s = (s0, g("s1"), g("s2"))
    else:
        raise ParameterError(f"unknown builtin {name!r}")
    return tuple(mons), q, s


def builtin(name: str, domain_radius: float = 5.0, **params) -> SystemSpec:
    """Builtin example systems ex0, ex1, ex2 with harmonic H = |x|^2/2.

    Parameter names: a0, a1, b0, b1, c0, c1 (coefficient amplitudes), s0, s1,
    s2 (schedule) and p (noise exponent, ex0/ex1 only).  For p=1 the t^-1
    terms are at order 2 (q=2); for p=2 all terms are O(t^-1) and q=1.
    """
    if name not in _EX_ALLOWED:
        raise ParameterError(f"unknown builtin {name!r}; choose from {sorted(_EX_ALLOWED)}")
    unknown = set(params) - _EX_ALLOWED[name]
    if unknown:
        raise ParameterError(f"unknown parameters for {name}: {sorted(unknown)}")
    mons, q, s = builtin_monomials(name, params)
    kappa = _positive_int(s[0], "s0 (resonance multiple, nu(0)=1)")
    return harmonic_system(mons, PhaseSchedule(q, s, kappa), name=name, params=dict(params),
                           domain_radius=domain_radius)


def harmonic_system(monomials, schedule: PhaseSchedule, name="custom", params=None,
                    domain_radius=5.0, noise_order=None, truncation_order=None) -> SystemSpec:
    """System with H = |x|^2/2 and trig-polynomial perturbation."""
    monomials = tuple(monomials)
    if noise_order is None:
        orders = [m.order for m in monomials if m.target[0] == "diffusion"]
        # tr(A^T A) ~ t^(-2 k/q) for the leading noise order k, so p = k
        noise_order = min(orders) if orders else 1
    return SystemSpec(
        hamiltonian=harmonic_hamiltonian,
        hamiltonian_gradient=harmonic_gradient,
        hamiltonian_hessian=harmonic_hessian,
        schedule=schedule,
        terms=terms_from_monomials(monomials),
        truncation_order=truncation_order,
        domain_radius=domain_radius,
        noise_order=noise_order,
        well_index=0,
        nu0=1.0,
        harmonic=True,
        name=name,
        params=dict(params or {}),
        monomials=monomials,
    )
