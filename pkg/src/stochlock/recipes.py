"""Figure-reproduction recipes.

Each recipe fixes a builtin system and the parameter sets of one reference
figure.  Initial data are not given there; recipes start every path at
radius 0.3 and angle 0 (x0 = (0.3, 0)) at t = 1, and plots are labelled
illustrative.  ``k`` values list one stable and one unstable choice on
either side of the threshold.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Dict, List, Optional, Tuple

from .errors import ConfigError

MU = Fraction(1, 2)


@dataclass(frozen=True)
class Recipe:
    fig_id: str
    builtin: str
    variants: Tuple[Tuple[str, Dict], ...]
    t_end: float = 1.0e4
    dt: float = 0.05
    n_paths: int = 5
    x0: Tuple[float, float] = (0.3, 0.0)
    phi0: Optional[float] = None
    amp_ref: Optional[Tuple[float, float]] = None     # (u0 in |x| units, decay exponent)
    show_phase: bool = True
    stamp: str = ""
    notes: List[str] = field(default_factory=list)


def _ex11(k):
    mu = MU
    return {"p": 1, "s0": 1, "a0": mu * mu / 16, "b0": k * mu * mu / 16, "c1": mu}


def _ex12(k):
    return {"p": 1, "s0": 1, "a0": Fraction(1, 2), "b0": Fraction(k, 16), "c1": 1}


def _ex22(k):
    mu = MU
    return {"a0": -1, "a1": 1, "b1": 1, "b0": k * mu * mu / 16, "c1": mu}


RECIPES: Dict[str, Recipe] = {
    "fig-12": Recipe(
        "fig-12", "ex0",
        (("c1=0, b0=-0.2", {"p": 1, "b0": Fraction(-1, 5), "c1": 0}),
         ("c1=1, p=2, b0=-0.2", {"p": 2, "b0": Fraction(-1, 5), "c1": 1}),
         ("c1=1, p=1, b0=-0.2", {"p": 1, "b0": Fraction(-1, 5), "c1": 1})),
        show_phase=False, stamp="b0=-0.2 in all panels"),
    "fig-ex11": Recipe(
        "fig-ex11", "ex1", (("k=-8", _ex11(-8)), ("k=-2", _ex11(-2))),
        phi0=-math.pi / 12, stamp="k in {-8, -2}, mu=0.5; stable iff k < -(3+sqrt 3)"),
    "fig-ex12": Recipe(
        "fig-ex12", "ex1", (("k=-7", _ex12(-7)), ("k=-3", _ex12(-3))),
        stamp="k in {-7, -3}; stable iff k < -5"),
    "fig-ex13": Recipe(
        "fig-ex13", "ex1",
        (("b0=-1.5", {"p": 2, "s0": 2, "a1": 2, "c1": 1, "b0": Fraction(-3, 2)}),
         ("b0=-0.5", {"p": 2, "s0": 2, "a1": 2, "c1": 1, "b0": Fraction(-1, 2)})),
        phi0=-math.pi / 4, stamp="a1=2, c1=1, s0=2, p=2; locked phase stable iff b0 < -1"),
    "fig-ex21": Recipe(
        "fig-ex21", "ex2",
        (("b0=-2", {"a0": Fraction(-1, 10), "a1": 1, "b1": 1, "s1": 1, "c1": 2, "b0": -2}),
         ("b0=0", {"a0": Fraction(-1, 10), "a1": 1, "b1": 1, "s1": 1, "c1": 2, "b0": 0})),
        show_phase=False, stamp="a0=-0.1, a1=b1=s1=1, c1=2; stable if b0 < -1.25"),
    "fig-ex22": Recipe(
        "fig-ex22", "ex2", (("k=-8", _ex22(-8)), ("k=-2", _ex22(-2))),
        phi0=0.0, stamp="k in {-8, -2}, mu=0.5; b*=-5mu^2/16"),
    "fig-ex23": Recipe(
        "fig-ex23", "ex2", (("b0=3mu^2/16", _ex22(3)),), t_end=1.0e6,
        phi0=0.0, amp_ref=(math.sqrt(2.5), 0.25),
        stamp="b0=3mu^2/16, mu=0.5; dashed |x| = sqrt(5/2) t^(-1/4)"),
}


def get_recipe(fig_id: str) -> Recipe:
    try:
        return RECIPES[fig_id]
    except KeyError:
        raise ConfigError(f"unknown figure recipe {fig_id!r} "
                          f"(available: {', '.join(sorted(RECIPES))})") from None
