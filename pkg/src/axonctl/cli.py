"""Command-line entry point: ``axonctl <subcommand> [options]``."""

from __future__ import annotations

import argparse
import csv
import itertools
import json
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__
from .checks import format_table, run_checks
from .config import ConfigError, ScenarioConfig, build_config, load_config
from .controller import GainError, default_gains, hurwitz_check, make_controller
from .diagnostics import WeightSelectionError, annotate_trajectory, fit_decay
from .kernels import (KernelSolverError, PhiKernel, build_kernel_set, dump_kernels, k_eval,
                      kernel_residuals)
from .model import ParameterError, compute_steady_state, system_matrices
from .simulator import (DelayLineError, DomainCollapseError, run_closed_loop, summary,
                        write_summary)

EXIT_FAILURE = 1  # verify found failing checks
EXIT_ERROR = 2  # validation or solver error

_HANDLED = (ConfigError, ParameterError, GainError, KernelSolverError, DelayLineError,
            DomainCollapseError, WeightSelectionError, ValueError, OSError)


def solver_settings(cfg: ScenarioConfig) -> dict:
    k = cfg.kernels
    return {
        "N": cfg.sim.N, "dt": cfg.sim.dt, "scheme": cfg.sim.scheme, "mode": cfg.sim.mode,
        "kernel_tol_l": k["tol_l"] or cfg.plant.l_s / 200,
        "kernel_nx": int(round(cfg.plant.D_e / cfg.sim.dt)), "kernel_ny": cfg.sim.N + 1,
        "point_term": _flag(k["point_term"], True), "blend": _flag(k["blend"], True),
        "version": __version__,
    }


def _flag(v, default):
    return default if v is None else bool(v)


def _provenance(cfg):
    return {"config_hash": cfg.hash(), "solver": solver_settings(cfg)}


def _gains(cfg):
    return cfg.gains or default_gains(system_matrices(cfg.plant))


def _controller(cfg, mode):
    k = cfg.kernels
    return make_controller(mode, cfg.plant, _gains(cfg), N=cfg.sim.N, dt=cfg.sim.dt,
                           tol_l=k["tol_l"], point_term=_flag(k["point_term"], True),
                           blend=_flag(k["blend"], True))


def simulate_one(cfg: ScenarioConfig, mode: str | None = None):
    """Run one scenario; returns (trajectory, summary dict)."""
    mode = mode or cfg.sim.mode
    sim = cfg.sim if mode == cfg.sim.mode else cfg.with_values({("sim", "mode"): mode}).sim
    traj = run_closed_loop(sim, cfg.plant, _controller(cfg, mode))
    extra = dict(_provenance(cfg))
    extra["solver"]["mode"] = mode
    d = cfg.diagnostics
    fit = None
    if _flag(d["enabled"], True) and mode == "compensated" and traj.termination == "completed":
        report = annotate_trajectory(traj, _gains(cfg), d["l_bar"], d["kernel_tol"])
        extra["diagnostics"] = report
        fit = report.get("decay_Z")
    elif len(traj) >= 3 and traj.termination == "completed":
        try:
            fit = fit_decay(traj.t, traj.norms()[:, 3], d["transient"] or 0.1).as_dict()
        except ValueError:
            fit = None
    return traj, summary(traj, fit, extra)


def cmd_steady_state(cfg, out: Path, args):
    p = cfg.plant
    ss = compute_steady_state(p)
    mats = system_matrices(p)
    data = {
        "lambda_plus": ss.lambda_plus, "lambda_minus": ss.lambda_minus,
        "K_plus": ss.K_plus, "K_minus": ss.K_minus, "q_s_star": ss.q_s_star,
        "c_eq_0": float(ss.c_eq(0.0)), "c_eq_l_s": float(ss.c_eq(p.l_s)),
        "a_tilde": mats.a_tilde, "beta": mats.beta, "kappa": mats.kappa,
        "C": mats.C, "k_n": ss.k_n, "h_n": ss.h_n(p.r_g),
        "admits_domain_bound": p.admits_domain_bound(cfg.diagnostics["l_bar"] or 1.5 * p.l_s),
        "params": p.as_dict(), "config_hash": cfg.hash(),
    }
    write_summary(out / "steady_state.json", data)
    for key in ("lambda_plus", "lambda_minus", "K_plus", "K_minus", "q_s_star"):
        print(f"{key:14s} {data[key]: .12e}")
    return 0


def cmd_kernels(cfg, out: Path, args):
    p = cfg.plant
    mats = system_matrices(p)
    gains = _gains(cfg)
    ok, eig, _ = hurwitz_check(mats, gains)
    if not ok:
        raise GainError(f"A + B K is not Hurwitz: eigenvalues {eig}")
    phi = PhiKernel(mats, gains.as_array(), p.D, p.a, p.g)
    k = cfg.kernels
    l_snap = k["l_snap"] or p.l_s
    ks = build_kernel_set(l_snap, mats, phi, p, k["nx"], k["ny"], _flag(k["point_term"], True))
    qp, pp = out / cfg.output["kernel_q"], out / cfg.output["kernel_psi"]
    dump_kernels(ks, qp, pp)
    x = np.linspace(0.0, l_snap, 101)
    report = {
        "l_snap": l_snap, "nx": k["nx"], "ny": k["ny"], "gains": gains.as_array(),
        "closed_loop_eigenvalues": [[float(e.real), float(e.imag)] for e in eig],
        "diag_k_error": float(np.max(np.abs(k_eval(x, x, phi, mats.B, p.D) + 1.0 / p.l_c))),
        "residuals_smooth": kernel_residuals(ks.smooth, mats, p),
        "config_hash": cfg.hash(),
    }
    if ks.point is not None:
        report["residuals_point"] = kernel_residuals(ks.point, mats, p)
    write_summary(out / "kernels.json", report)
    for name, val in report["residuals_smooth"].items():
        print(f"{name:18s} {val:.3e}")
    print(f"wrote {qp} and {pp}")
    return 0


def cmd_simulate(cfg, out: Path, args):
    traj, summ = simulate_one(cfg)
    traj.to_csv(out / cfg.output["trajectory"])
    write_summary(out / cfg.output["summary"], summ)
    _print_run(cfg.sim.mode, summ)
    return 0 if traj.termination == "completed" else EXIT_ERROR


def _print_run(label, s):
    fit = s.get("decay_fit") or {}
    rate = fit.get("rate")
    tail = f" rate {rate:.4f} (R^2 {fit['r2']:.4f})" if rate is not None else ""
    print(f"{label:14s} {s['termination']:10s} |z2| {abs(s['initial']['z2']):.3e} -> "
          f"{abs(s['final']['z2']):.3e}{tail}")


def cmd_compare(cfg, out: Path, args):
    joint = {}
    for mode in ("compensated", "uncompensated"):
        traj, summ = simulate_one(cfg, mode)
        traj.to_csv(out / f"trajectory_{mode}.csv")
        joint[mode] = summ
        _print_run(mode, summ)

    def rate(s):
        if s["termination"] != "completed" or not s.get("decay_fit"):
            return None
        return s["decay_fit"]["rate"]

    rc, ru = rate(joint["compensated"]), rate(joint["uncompensated"])
    joint["comparison"] = {
        "rate_compensated": rc, "rate_uncompensated": ru,
        "compensated_faster": rc is not None and (ru is None or ru < rc),
        **_provenance(cfg),
    }
    write_summary(out / cfg.output["summary"], joint)
    return 0


def _sweep_job(job):
    values, point = job
    cfg = build_config(values)
    try:
        _, summ = simulate_one(cfg)
        err = ""
    except _HANDLED as exc:
        summ, err = None, f"{type(exc).__name__}: {exc}"
    return point, cfg, summ, err


def sweep_jobs(cfg: ScenarioConfig):
    names = [f"{s}.{k}" for s, k, _ in cfg.axes]
    jobs = []
    for combo in itertools.product(*(vals for _, _, vals in cfg.axes)):
        vals = {s: dict(v) for s, v in cfg.values.items()}
        for (sec, key, _), val in zip(cfg.axes, combo):
            vals[sec][key] = val
        jobs.append((vals, dict(zip(names, combo))))
    return names, jobs


def cmd_sweep(cfg, out: Path, args):
    if not cfg.axes:
        raise ConfigError("[sweep] axes is empty")
    names, jobs = sweep_jobs(cfg)
    workers = args.workers or cfg.workers
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            results = list(ex.map(_sweep_job, jobs))
    else:
        results = [_sweep_job(j) for j in jobs]
    cols = names + ["termination", "z2_initial", "z2_final", "H1_initial", "H1_final",
                    "rate", "r2", "error", "config_hash"]
    rows, summaries = [], []
    for point, rcfg, s, err in results:
        if s is None:
            rows.append([*point.values(), "error", "", "", "", "", "", "", err, rcfg.hash()])
            summaries.append({"point": point, "error": err, **_provenance(rcfg)})
            continue
        fit = s.get("decay_fit") or {}
        rows.append([*point.values(), s["termination"], s["initial"]["z2"], s["final"]["z2"],
                     s["initial"]["norm_u_H1"], s["final"]["norm_u_H1"], fit.get("rate", ""),
                     fit.get("r2", ""), s["message"], s["config_hash"]])
        summaries.append({"point": point, **s})
    with open(out / cfg.output["sweep"], "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(cols)
        for r in rows:
            w.writerow([f"{v:.12e}" if isinstance(v, float) else v for v in r])
    write_summary(out / "sweep.json", {"runs": summaries, "sweep_config_hash": cfg.hash()})
    for r in rows:
        print(", ".join(str(v) for v in r[:len(names) + 1]))
    return 0


def cmd_verify(cfg, out: Path, args):
    results = run_checks(seed=cfg.sim.seed or 0)
    print(format_table(results))
    return 0 if all(r.ok for r in results) else EXIT_FAILURE


COMMANDS = {
    "steady-state": (cmd_steady_state, "equilibrium profile constants"),
    "kernels": (cmd_kernels, "solve and dump the gain kernels with residuals"),
    "simulate": (cmd_simulate, "one closed-loop run"),
    "compare": (cmd_compare, "compensated vs uncompensated runs"),
    "sweep": (cmd_sweep, "grid of runs over the [sweep] axes"),
    "verify": (cmd_verify, "quick invariant suite"),
}


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="INI file overlaid on the defaults")
    common.add_argument("--out-dir", type=Path, default=Path("."), help="output directory")
    common.add_argument("--workers", type=int, default=None, help="sweep worker processes")
    common.add_argument("--seed", type=int, default=None, help="perturbation seed")
    common.add_argument("--override", action="append", default=[], metavar="SECTION.KEY=VALUE",
                        help="set one config value (repeatable)")
    ap = argparse.ArgumentParser(prog="axonctl",
                                 description="Delay-compensated axon growth control.")
    ap.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = ap.add_subparsers(dest="command", required=True)
    for name, (_, help_) in COMMANDS.items():
        sub.add_parser(name, parents=[common], help=help_)
    return ap


def _report_error(exc, command):
    msg = {"error": type(exc).__name__, "command": command, "message": str(exc)}
    if isinstance(exc, ParameterError):
        msg["violations"] = exc.violations
    print(json.dumps(msg, sort_keys=True), file=sys.stderr)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.workers is not None and args.workers < 1:
            raise ConfigError("--workers must be >= 1")
        cfg = load_config(args.config, args.override, args.seed)
        args.out_dir.mkdir(parents=True, exist_ok=True)
        fn, _ = COMMANDS[args.command]
        return fn(cfg, args.out_dir, args)
    except _HANDLED as exc:
        _report_error(exc, args.command)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
