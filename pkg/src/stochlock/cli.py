"""Command-line front end.

Subcommands: average, classify, simulate, sweep, monitor, reproduce.  Each
run writes its outputs plus a ``manifest.json`` into one run directory; a
failed run removes a directory it created.  Exit status: 0 success, 2
configuration, 3 numerical degeneracy, 4 out-of-theory, 5 chart, 6 domain,
1 other package errors.
"""

from __future__ import annotations

import argparse
import datetime as _dt
import json
import os
import shutil
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .averaging import averaged_system, export_averaged
from .config import canonical_json, config_digest, load_config, system_from_config
from .errors import ConfigError, StochLockError
from .regimes import classify, solve_truncated
from .sde import simulate_ensemble, write_path_csv, write_summary_csv


def _now():
    return _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")


class RunDir:
    """Output directory with manifest; removed on failure if this run created it."""

    def __init__(self, root, command, cfg, seed):
        self.path = Path(root)
        self.command = command
        self.cfg = cfg
        self.seed = seed
        self.created = False
        self.outputs = []
        self.started = _now()

    def __enter__(self):
        if not self.path.exists():
            self.path.mkdir(parents=True)
            self.created = True
        return self

    def file(self, name):
        p = self.path / name
        p.parent.mkdir(parents=True, exist_ok=True)
        self.outputs.append(str(Path(name)))
        return p

    def __exit__(self, exc_type, exc, tb):
        if exc_type is not None:
            if self.created:
                shutil.rmtree(self.path, ignore_errors=True)
            else:
                for name in self.outputs:
                    try:
                        os.remove(self.path / name)
                    except OSError:
                        pass
            return False
        manifest = {"command": self.command, "config_digest": config_digest(self.cfg),
                    "config": json.loads(canonical_json(self.cfg)), "master_seed": self.seed,
                    "code_version": __version__, "started": self.started, "finished": _now(),
                    "outputs": sorted(self.outputs)}
        (self.path / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
        return False


def _outdir(args, command, cfg):
    if args.outdir:
        return args.outdir
    return os.path.join("runs", f"{command}-{config_digest(cfg)[:12]}")


def _seed(args, cfg):
    return int(args.seed) if args.seed is not None else int(cfg.get("seed", 0))


def _avg_kwargs(cfg):
    a = dict(cfg.get("averaging", {}))
    out = {}
    for k in ("N", "theta_modes", "s_modes", "n_v"):
        if k in a:
            out[k] = int(a[k])
    if "v_max" in a:
        out["v_max"] = float(a["v_max"])
    if "ell" in a:
        out["ell"] = int(a["ell"])
    return out


def _average(cfg):
    spec = system_from_config(cfg)
    return spec, averaged_system(spec, **_avg_kwargs(cfg))


def _classify(cfg):
    spec, avg = _average(cfg)
    c = cfg.get("classify", {})
    report = classify(avg, mu=c.get("mu"), p=int(c.get("p", spec.noise_order)), spec=spec)
    return spec, avg, report


def _ensemble_config(cfg, seed, workers, section="ensemble"):
    from .stability_lab import EnsembleConfig

    e = dict(cfg.get(section, {}))
    e.pop("distance", None)
    try:
        return EnsembleConfig(master_seed=seed, workers=workers, **e)
    except TypeError as exc:
        raise ConfigError(f"{section}: {exc}") from exc


# ---------------------------------------------------------------------------
# commands


def cmd_average(args, cfg, run):
    spec, avg = _average(cfg)
    for name in export_averaged(avg, run.path):
        run.outputs.append(os.path.basename(name))
    s = avg.summary()
    print(f"n={s['n']} m={s['m']} h={s['h']} l={s['l']} shape={s['shape']}")


def cmd_classify(args, cfg, run):
    spec, avg, report = _classify(cfg)
    run.file("report.json").write_text(report.to_json())
    text = report.to_text()
    run.file("report.txt").write_text(text + "\n")
    if "truncated" in cfg:
        tcfg = cfg["truncated"]
        phi0 = float(tcfg.get("phi0", report.attracting_phases[0].phi0
                              if report.attracting_phases else 0.0))
        tr = solve_truncated(avg, float(tcfg.get("u0", 0.0)), phi0,
                             float(tcfg.get("t_start", 1.0)), float(tcfg.get("t_end", 1e6)),
                             n_out=int(tcfg.get("n_out", 400)))
        tr.write_csv(run.file("truncated.csv"))
    print(text)


def _x0_sampler(x0):
    x0 = np.asarray(x0, float)
    return lambda i: x0


def cmd_simulate(args, cfg, run):
    from . import plotting
    from .stability_lab import exit_probability

    spec = system_from_config(cfg)
    seed = _seed(args, cfg)
    s = cfg.get("simulate")
    if s is None and "ensemble" not in cfg:
        raise ConfigError("simulate needs a 'simulate' or 'ensemble' section")
    if s is not None:
        t0, t_end, dt = s.get("t0", 1.0), s.get("t_end", 1e3), s.get("dt", 0.05)
        n = int(s.get("n_paths", 5))
        trajs = simulate_ensemble(spec, _x0_sampler(s.get("x0", [0.3, 0.0])), t0, t_end, dt, n,
                                  seed, workers=args.workers, scheme=s.get("scheme", "split"),
                                  record=s.get("record", 2000))
        for tr in trajs:
            write_path_csv(tr, run.file(f"paths/path_{tr.path_index:04d}.csv"))
        write_summary_csv(trajs, run.file("summary.csv"))
        if s.get("plot", True):
            plotting.plot_paths([(spec.name, trajs)], spec.schedule, run.file("paths.svg"),
                                title=spec.name, stamp=_stamp(cfg))
    if "ensemble" in cfg:
        ecfg = _ensemble_config(cfg, seed, args.workers)
        distance = cfg["ensemble"].get("distance", "norm")
        avg = report = None
        if distance != "norm":
            spec, avg, report = _classify(cfg)
        st = exit_probability(spec, avg, report, ecfg, distance)
        st.write_csv(run.file("exitstats.csv"))
        print(f"exit fraction {st.exit_fraction:.4f} "
              f"(95% interval {st.lower:.4f}..{st.upper:.4f}) over {st.n_paths} paths")


def _stamp(cfg):
    p = cfg.get("system", {}).get("params", {})
    return ", ".join(f"{k}={v}" for k, v in sorted(p.items()))


def cmd_sweep(args, cfg, run):
    from .stability_lab import threshold_sweep
    from .regimes import closed_form_threshold

    if "sweep" not in cfg:
        raise ConfigError("sweep needs a 'sweep' section")
    sw = cfg["sweep"]
    seed = _seed(args, cfg)
    ecfg = _ensemble_config(cfg, seed, args.workers)
    par = sw.get("parameter", "b0")
    distance = cfg.get("ensemble", {}).get("distance", "norm")
    analytic = sw.get("analytic")
    if analytic is None:
        th = closed_form_threshold(system_from_config(cfg))
        analytic = th["value"] if (th and par == "b0") else None
    res = threshold_sweep(lambda v: system_from_config(cfg, {par: v}), ecfg, sw["grid"],
                          parameter=par, distance=distance, n_bisect=int(sw.get("n_bisect", 3)),
                          analytic=analytic, level=float(sw.get("level", 0.5)))
    res.write_csv(run.file("sweep.csv"))
    run.file("sweep.json").write_text(json.dumps(
        {"parameter": res.parameter, "bracket": res.bracket, "estimate": res.estimate,
         "analytic": res.analytic, "monotone": res.monotone, "notes": res.notes},
        indent=2, sort_keys=True))
    print(f"empirical boundary {res.estimate} bracket {res.bracket} analytic {res.analytic}")


def cmd_monitor(args, cfg, run):
    from .stability_lab import lyapunov_monitor

    spec, avg, report = _classify(cfg)
    seed = _seed(args, cfg)
    ecfg = _ensemble_config(cfg, seed, args.workers)
    m = dict(cfg.get("monitor", {}))
    variant = m.get("variant", "auto")
    res = lyapunov_monitor(spec, avg, report, ecfg,
                           variant=None if variant == "auto" else variant,
                           constants=m.get("constants"), n_bins=int(m.get("n_bins", 40)),
                           tilde_energy=float(m.get("tilde_energy", 1.0)))
    res.write_csv(run.file("monitor.csv"))
    run.file("monitor.json").write_text(json.dumps(
        {"variant": res.variant, "violation_fraction": res.violation_fraction,
         "constants": {k: float(v) for k, v in res.constants.items()},
         "all_paths_nonincreasing": bool(np.all(res.per_path_nonincreasing))},
        indent=2, sort_keys=True))
    print(f"variant {res.variant}: monotonicity violations in "
          f"{100 * res.violation_fraction:.1f}% of bins")


def cmd_reproduce(args, cfg, run):
    from . import plotting
    from .core import builtin
    from .recipes import get_recipe

    rec = get_recipe(args.fig_id)
    seed = _seed(args, cfg)
    n_paths = args.paths or rec.n_paths
    t_end = args.t_end or rec.t_end
    groups = []
    sched = None
    for vi, (label, params) in enumerate(rec.variants):
        spec = builtin(rec.builtin, **params)
        sched = spec.schedule
        trajs = simulate_ensemble(spec, _x0_sampler(rec.x0), 1.0, t_end, rec.dt, n_paths,
                                  seed + vi, workers=args.workers, record=2000)
        for tr in trajs:
            write_path_csv(tr, run.file(f"paths/v{vi}_path_{tr.path_index:04d}.csv"))
        groups.append((label, trajs))
    plotting.plot_paths(groups, sched, run.file(f"{rec.fig_id}.svg"), phi0=rec.phi0,
                        amp_ref=rec.amp_ref, title=rec.fig_id, stamp=rec.stamp,
                        show_phase=rec.show_phase)
    print(f"{rec.fig_id}: {len(groups)} parameter set(s), {n_paths} path(s) each")


COMMANDS = {"average": cmd_average, "classify": cmd_classify, "simulate": cmd_simulate,
            "sweep": cmd_sweep, "monitor": cmd_monitor, "reproduce": cmd_reproduce}


def build_parser():
    p = argparse.ArgumentParser(prog="stochlock", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="master seed (overrides config)")
    common.add_argument("--workers", type=int, default=1, help="worker threads for ensembles")
    common.add_argument("--outdir", default=None, help="run directory")
    sub = p.add_subparsers(dest="command", required=True)
    for name in ("average", "classify", "simulate", "sweep", "monitor"):
        sp = sub.add_parser(name, parents=[common], help=f"{name} from a YAML config")
        sp.add_argument("config", help="YAML configuration file")
    rp = sub.add_parser("reproduce", parents=[common], help="run a figure recipe")
    rp.add_argument("fig_id", help="figure id, e.g. fig-ex11")
    rp.add_argument("--config", default=None, help="optional YAML config (seed only)")
    rp.add_argument("--paths", type=int, default=None, help="paths per parameter set")
    rp.add_argument("--t-end", type=float, default=None, help="final time")
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        if args.workers < 1:
            raise ConfigError("--workers must be >= 1")
        if args.command == "reproduce":
            cfg = load_config(args.config) if args.config else {"seed": 0}
            cfg = dict(cfg, recipe=args.fig_id, paths=args.paths, t_end=args.t_end)
        else:
            cfg = load_config(args.config)
        if args.seed is not None:
            cfg["seed"] = int(args.seed)
        if args.command == "reproduce":
            from .recipes import get_recipe

            get_recipe(args.fig_id)
        elif "system" not in cfg:
            raise ConfigError("config has no 'system' section")
        with RunDir(_outdir(args, args.command, cfg), args.command, cfg, _seed(args, cfg)) as run:
            COMMANDS[args.command](args, cfg, run)
            print(f"outputs in {run.path}")
        return 0
    except StochLockError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
