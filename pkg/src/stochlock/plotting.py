"""Static SVG plots of sample paths: |x(t)| on log-log axes and the phase
difference theta(t) = Phi(x) - S(t)/kappa on a log time axis."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .action_angle import wrap_angle  # noqa: E402


def phase_difference(traj, schedule):
    x = traj.states
    Phi = np.arctan2(-x[:, 1], x[:, 0])
    return wrap_angle(Phi - schedule.phase(traj.times) / schedule.kappa)


def plot_paths(groups, schedule, path, *, phi0=None, amp_ref=None, title="", stamp="",
               show_phase=True, illustrative=True):
    """Write an SVG figure.

    ``groups`` is a list of (label, trajectories).  ``amp_ref=(u0, kd)`` adds
    the dashed curve |x| = u0 t^(-kd); ``phi0`` adds dashed lines theta = phi0
    and phi0 - pi (both attracting phases).
    """
    plt.rcParams["svg.hashsalt"] = "stochlock"
    ncol = 2 if show_phase else 1
    fig, axes = plt.subplots(1, ncol, figsize=(5.2 * ncol, 3.8), squeeze=False)
    ax_a = axes[0, 0]
    colours = plt.rcParams["axes.prop_cycle"].by_key()["color"]
    tmin, tmax = np.inf, 0.0
    for gi, (label, trajs) in enumerate(groups):
        c = colours[gi % len(colours)]
        for i, tr in enumerate(trajs):
            r = np.hypot(tr.states[:, 0], tr.states[:, 1])
            ok = (tr.times > 0) & (r > 0)
            ax_a.plot(tr.times[ok], r[ok], color=c, lw=0.7, alpha=0.8,
                      label=label if i == 0 else None)
            if ok.any():
                tmin, tmax = min(tmin, tr.times[ok].min()), max(tmax, tr.times[ok].max())
            if show_phase:
                th = phase_difference(tr, schedule)
                axes[0, 1].plot(tr.times, th, ",", color=c, alpha=0.6,
                                label=label if i == 0 else None)
    if amp_ref is not None and tmax > 0:
        u0, kd = amp_ref
        tt = np.geomspace(tmin, tmax, 200)
        ax_a.plot(tt, u0 * tt ** (-kd), "k--", lw=1.2, label=f"{u0:.4g} t^(-{kd:g})")
    ax_a.set_xscale("log")
    ax_a.set_yscale("log")
    ax_a.set_xlabel("t")
    ax_a.set_ylabel("|x(t)|")
    if show_phase:
        ax_p = axes[0, 1]
        ax_p.set_xscale("log")
        ax_p.set_ylim(-np.pi, np.pi)
        ax_p.set_xlabel("t")
        ax_p.set_ylabel("theta(t)")
        if phi0 is not None:
            for v in (phi0, wrap_angle(phi0 + np.pi)):
                ax_p.axhline(float(v), color="k", ls="--", lw=1.2)
    for ax in axes.ravel():
        if ax.get_legend_handles_labels()[0]:
            ax.legend(fontsize=7, loc="best")
    full = title + (" (illustrative initial data)" if illustrative else "")
    if stamp:
        full += "\n" + stamp
    fig.suptitle(full, fontsize=9)
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)
    return path
