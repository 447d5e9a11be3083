import json
import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

import oracles as O
from stochlock.action_angle import wrap_angle
from stochlock.averaging import TrigSeries, averaged_system
from stochlock.core import builtin
from stochlock.errors import DegeneracyError, OutOfTheoryError
from stochlock.regimes import (classify, closed_form_threshold, find_locked_phases, find_roots,
                               numeric_threshold, reference_solution, solve_truncated,
                               stability_margin)

PSI = np.linspace(0.0, 2 * np.pi, 64, endpoint=False)
MU = 0.5


def _avg(name, **P):
    sp = builtin(name, **P)
    return sp, averaged_system(sp)


def _ex11(k):
    return dict(p=1, s0=1, a0=MU ** 2 / 16, b0=k * MU ** 2 / 16, c1=MU)


@pytest.fixture(scope="module")
def ex0():
    return _avg("ex0", b0=-1.0, c1=1.0)


def test_ex0_locked_phases(ex0):
    _, avg = ex0
    roots = find_locked_phases(avg)
    got = sorted(float(wrap_angle(r.phi0)) % (2 * np.pi) for r in roots)
    np.testing.assert_allclose(got, [0, np.pi / 2, np.pi, 3 * np.pi / 2], atol=1e-10)
    att = [r for r in roots if r.attracting]
    assert sorted(round(r.phi0 % (2 * np.pi), 9) for r in att) == [0.0, round(np.pi, 9)]
    for r in att:
        assert r.vartheta_m == pytest.approx(-1 / 8, abs=1e-9)
    for r in roots:
        assert r.vartheta_m == pytest.approx(-np.cos(2 * r.phi0) / 8, abs=1e-9)


def test_fig_ex11_locked_phase():
    _, avg = _avg("ex1", **_ex11(-8))
    att = [r for r in find_locked_phases(avg) if r.attracting]
    assert any(abs(wrap_angle(r.phi0 + np.pi / 12)) < 1e-8 for r in att)
    assert any(abs(wrap_angle(r.phi0 + np.pi / 12 - np.pi)) < 1e-8 for r in att)
    assert O.ex1_p1_s01_phase(MU ** 2 / 16, MU) == pytest.approx(-np.pi / 12, abs=1e-15)


def test_fig_ex13_locked_phase():
    _, avg = _avg("ex1", p=2, s0=2, a1=2, c1=1, b0=-1.5)
    att = [r for r in find_locked_phases(avg) if r.attracting]
    assert any(abs(wrap_angle(r.phi0 + np.pi / 4)) < 1e-8 for r in att)
    # slope of the hand-derived phase coefficient: d1 sin(2 phi0 + delta1)/2 = -1
    lp = [r for r in att if abs(wrap_angle(r.phi0 + np.pi / 4)) < 1e-8][0]
    assert lp.vartheta_m == pytest.approx(-1.0, abs=1e-8)


def test_fig_ex13_stated_phase_slope():
    _, avg = _avg("ex1", p=2, s0=2, a1=2, c1=1, b0=-1.5)
    lp = [r for r in find_locked_phases(avg)
          if r.attracting and abs(wrap_angle(r.phi0 + np.pi / 4)) < 1e-8][0]
    assert lp.vartheta_m == pytest.approx(8 * math.sin(2 * lp.phi0), abs=1e-6)


@settings(max_examples=25, deadline=None)
@given(st.floats(-math.pi, math.pi))
def test_shifting_coefficients_shifts_locked_phases(c):
    _, avg = _avg("ex1", **_ex11(-8))
    base = find_roots(avg.omega_m0)
    grid = np.linspace(0, 2 * np.pi, 256, endpoint=False)
    shifted = find_roots(TrigSeries(avg.omega_m0(grid - c)))
    assert len(shifted) == len(base)
    for r in base:
        match = [s for s in shifted if abs(wrap_angle(s.phi0 - r.phi0 - c)) < 1e-8]
        assert len(match) == 1 and match[0].attracting == r.attracting
        assert match[0].vartheta_m == pytest.approx(r.vartheta_m, abs=1e-9)


def test_pi_symmetry_without_odd_noise_harmonics():
    _, avg = _avg("ex1", p=1, s0=1, a0=0.01, b0=-0.5, c1=0.6)
    roots = find_locked_phases(avg)
    phases = [float(r.phi0) for r in roots]
    for p in phases:
        assert min(abs(wrap_angle(p + np.pi - q)) for q in phases) < 1e-8


def test_find_roots_errors_and_drifting():
    assert find_roots(TrigSeries(1.0 + 0.5 * np.sin(PSI))) == []
    with pytest.raises(DegeneracyError):
        find_roots(TrigSeries(1.0 + np.sin(PSI)))                 # touches zero
    with pytest.raises(DegeneracyError):
        find_roots(TrigSeries(np.sin(PSI) ** 3))                  # vanishing slope


# --- classification -------------------------------------------------------------------


def test_ex0_classification_and_threshold(ex0):
    sp, avg = ex0
    rep = classify(avg, mu=1.0, p=1, spec=sp)
    assert rep.regime == "locking" and rep.applicable_theorem == "Th2" and rep.stable
    assert rep.weight_exponent == 0.0 and rep.horizon_branch == "2p=q"
    assert rep.thresholds["b0"]["value"] == -5 / 16
    assert rep.verdict() == "locking; stable iff b0 < -5/16 (= -5c1^2/16)"
    num = numeric_threshold(lambda b: averaged_system(builtin("ex0", b0=b, c1=1.0)))
    assert num["value"] == pytest.approx(-5 / 16, abs=1e-8)
    assert num["condition"] == "stable iff parameter < value"
    assert json.loads(rep.to_json())["applicable_theorem"] == "Th2"
    assert "verdict: locking" in rep.to_text()


def test_ex0_unstable_side():
    sp, avg = _avg("ex0", b0=0.0, c1=1.0)
    rep = classify(avg, spec=sp)
    assert rep.regime == "locking" and not rep.stable
    assert stability_margin(avg) == pytest.approx(5 / 32, abs=1e-9)


def test_fig_ex11_threshold():
    build = lambda b: averaged_system(builtin("ex1", **{**_ex11(0), "b0": b}))
    num = numeric_threshold(build)
    assert num["value"] / (MU ** 2 / 16) == pytest.approx(-(3 + math.sqrt(3)), abs=1e-6)
    cf = closed_form_threshold(builtin("ex1", **_ex11(-8)))
    assert cf["value"] / (MU ** 2 / 16) == pytest.approx(-(3 + math.sqrt(3)), abs=1e-12)
    assert cf["value"] == pytest.approx(O.ex1_p1_s01_locking_threshold(MU ** 2 / 16, 0, MU))


@pytest.mark.parametrize("P,expect_regime", [
    (dict(p=1, s0=1, a0=0.1, c0=0.3, c1=0.5), "drifting"),
    (dict(p=1, s0=2, a0=0.01, c1=0.7), "locking"),
    (dict(p=1, s0=2, a0=0.1, c1=0.7), "drifting"),
    (dict(p=1, s0=3, a0=0.2, c0=0.3, c1=0.5), "drifting"),
    (dict(p=2, s0=1, a0=0.2, c1=0.5), "drifting"),
    (dict(p=2, s0=2, a1=0.4, b1=0.3, a0=0.05, c1=0.5), "locking"),
])
def test_closed_form_thresholds_match_numeric(P, expect_regime):
    sp = builtin("ex1", b0=-2.0, **P)
    cf = closed_form_threshold(sp)
    assert cf["regime"] == expect_regime
    # probes stay on one side of any order change (for p=2, s0=1 the leading order jumps at b0=0)
    num = numeric_threshold(lambda b: averaged_system(builtin("ex1", b0=b, **P)),
                            probes=(-1.5, -1.0, -0.5))
    assert num["value"] == pytest.approx(cf["value"], abs=5e-9)
    rep = classify(averaged_system(sp), spec=sp)
    assert rep.regime == expect_regime and rep.stable


def test_verdict_strings():
    sp = builtin("ex1", p=1, s0=3, a0=0.2, c0=0.5, c1=1.0, b0=-1)
    rep = classify(averaged_system(sp), spec=sp)
    val = -(6 * 0.25 + 3) / 16
    assert rep.verdict() == f"drifting; stable if b0 < {Fraction(val).limit_denominator()}" \
                            " (= -(6c0^2+3c1^2)/16)"
    sp = builtin("ex1", p=1, s0=1, a0=0.5, c0=0.5, c1=1.0, b0=-1)
    rep = classify(averaged_system(sp), spec=sp)
    assert rep.applicable_theorem == "Th4"
    assert rep.verdict().startswith("drifting; stable if b0 < -13/32 (= -(6c0^2+5c1^2)/16)")


def test_fig_ex23_slowly_decaying_regime():
    sp, avg = _avg("ex2", a0=-1, a1=1, b1=1, c1=MU, b0=3 * MU ** 2 / 16)
    rep = classify(avg, mu=MU, p=1, spec=sp)
    assert rep.applicable_theorem == "Th3b" and rep.stable
    assert rep.decay_exponent == pytest.approx(0.25)
    lam2 = float(avg.lambda_nl(0.0))
    assert lam2 == pytest.approx(MU ** 2 / 4, abs=1e-8)
    assert rep.u0 == pytest.approx(math.sqrt((4 * lam2 + 1) / 1.0), rel=1e-6)
    assert rep.u0 == pytest.approx(math.sqrt(1.25), rel=1e-6)
    assert rep.verdict().startswith("locking; slowly decaying locked solution u0 t^(-1/4)")


def test_ex2_th3a_and_th5():
    sp, avg = _avg("ex2", a0=-1, a1=1, b1=1, c1=MU, b0=-1.0)
    rep = classify(avg, spec=sp)
    assert rep.applicable_theorem == "Th3a" and rep.stable
    num = numeric_threshold(lambda b: averaged_system(
        builtin("ex2", a0=-1, a1=1, b1=1, c1=MU, b0=b)))
    assert num["value"] == pytest.approx(rep.thresholds["b0"]["value"], abs=5e-9)
    sp, avg = _avg("ex2", a0=-1, b0=-1, c1=0.5, s1=1)
    rep = classify(avg, spec=sp)
    assert rep.regime == "drifting" and rep.applicable_theorem == "Th5" and rep.stable
    assert rep.thresholds["b0"]["value"] == pytest.approx(-5 * 0.25 / 16)


def test_out_of_theory_and_degenerate():
    with pytest.raises(OutOfTheoryError):
        classify(averaged_system(builtin("ex1", p=2, b0=-0.3, c1=0.5)))
    sp = builtin("ex0", b0=-1, c1=0)
    with pytest.raises(DegeneracyError):
        classify(averaged_system(sp), spec=sp)


# --- truncated averaged dynamics -----------------------------------------------------------


def test_truncated_locking_convergence(ex0):
    _, avg = ex0
    rep = classify(avg)
    phi0 = rep.attracting_phases[0].phi0
    tr = solve_truncated(avg, 0.1, phi0 + 0.5, 1.0, 1e6)
    assert tr.status == "ok"
    tt = np.geomspace(1e2, 1e6, 20)
    _, ph = tr(tt)
    rate = -np.polyfit(np.log(tt), np.log(np.abs(ph - phi0)), 1)[0]
    floor = min(abs(rep.attracting_phases[0].vartheta_m), 1 / avg.q) / 2 - 0.05
    assert rate >= floor and rate == pytest.approx(1 / 8, abs=0.01)


def test_truncated_drifting_growth():
    _, avg = _avg("ex2", a0=-1, b0=-1, c1=0.5, s1=1)
    tr = solve_truncated(avg, 0.1, 0.0, 1.0, 1e6)
    tt = np.geomspace(1e2, 1e6, 20)
    _, ph = tr(tt)
    assert np.all(np.diff(np.abs(ph)) > 0)
    assert np.polyfit(np.log(tt), np.log(np.abs(ph)), 1)[0] == pytest.approx(0.5, abs=0.02)


def test_truncated_slow_decay_and_reference(tmp_path):
    _, avg = _avg("ex2", a0=-1, a1=1, b1=1, c1=MU, b0=3 * MU ** 2 / 16)
    rep = classify(avg)
    u0, ts = rep.u0, 10.0
    tr = solve_truncated(avg, 1.2 * u0 * ts ** -0.25, 0.0, ts, 1e6)
    u, _ = tr(1e6)
    assert float(u) * 1e6 ** 0.25 == pytest.approx(u0, rel=0.05)
    ref = reference_solution(avg, rep, 1.0, 1e4)
    assert ref.status == "ok"
    tr.write_csv(tmp_path / "t.csv")
    assert (tmp_path / "t.csv").read_text().startswith("t,u,phi")


def test_truncated_domain_exit():
    _, avg = _avg("ex0", b0=1.0, c1=1.0)
    tr = solve_truncated(avg, 0.5, 0.0, 1.0, 1e8)
    assert tr.status == "exit"
