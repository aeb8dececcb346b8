"""Command-line entry point: ``bandshare {run,compare,sweep-stepsize,validate}``.

Exit codes: 0 success, 2 invalid configuration (or failed validation),
3 numerical solver failure.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import os
import platform
import sys
import tempfile

import numpy as np
import scipy

from . import __version__, kernels
from .experiment import (
    POLICIES,
    ConfigError,
    compare_policies,
    load_config,
    run_policy,
    sweep_step_sizes,
    validate_experiment,
)
from .scenario import percentile_satisfaction
from .sharing import SolverError

log = logging.getLogger("bandshare")

EXIT_OK, EXIT_CONFIG, EXIT_SOLVER = 0, 2, 3


def fmt(x):
    """Serialise a number with full double precision (17 significant digits)."""
    if isinstance(x, (bool, np.bool_)):
        return str(int(x))
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if x is None or (isinstance(x, float) and np.isnan(x)):
        return ""
    return format(float(x), ".17g")


def write_csv(path, header, rows):
    """Write atomically: temp file in the same directory, then rename."""
    d = os.path.dirname(os.path.abspath(path))
    os.makedirs(d, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=d, suffix=".tmp")
    with os.fdopen(fd, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for row in rows:
            w.writerow([v if isinstance(v, str) else fmt(v) for v in row])
    os.replace(tmp, path)


def write_manifest(out_dir, exp, command, extra=None):
    manifest = {
        "command": command,
        "seed": exp.scenario.seed,
        "config_hash": exp.config_hash(),
        "versions": {
            "bandshare": __version__,
            "python": platform.python_version(),
            "numpy": np.__version__,
            "scipy": scipy.__version__,
            "kernel_backend": kernels.BACKEND,
        },
    }
    manifest.update(extra or {})
    path = os.path.join(out_dir, "manifest.json")
    fd, tmp = tempfile.mkstemp(dir=out_dir, suffix=".tmp")
    with os.fdopen(fd, "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True, default=str)
    os.replace(tmp, path)


def hyperperiod_rows(trace, cfg):
    R, O, _ = cfg.sharing_shape
    cols = [f"shared_slots_r{r + 1}_j{j + 1}_i{i + 1}" for r in range(R) for j in range(O) for i in range(O)]
    header = ["hyperperiod", "total_qoe", *cols, "grad_norm", "max_queue"]
    rows = []
    for t in range(trace.num_hyperperiods):
        rows.append([t + 1, trace.hyperperiod_qoe[t], *np.asarray(trace.sharing[t]).ravel(),
                     trace.grad_norm[t], trace.max_queue[t]])
    return header, rows


def client_rows(trace, cfg):
    header = ["client_id", "operator", "region", "client", "arrivals", "satisfied_fraction", "final_queue"]
    rows = []
    if trace.arrivals is None:
        return header, rows
    frac = percentile_satisfaction(trace)
    for i, r, n in np.ndindex(*cfg.client_shape):
        rows.append([f"o{i + 1}r{r + 1}n{n + 1}", i + 1, r + 1, n + 1, int(trace.arrivals[i, r, n]),
                     frac[i, r, n], trace.final_queue[i, r, n]])
    return header, rows


def period_rows(trace, cfg):
    O, R, N = cfg.client_shape
    header = ["period", "total_qoe"] + [f"tau_o{i + 1}r{r + 1}n{n + 1}" for i, r, n in np.ndindex(O, R, N)]
    rows = [[k + 1, q, *np.asarray(tau).ravel()]
            for k, (q, tau) in enumerate(zip(trace.period_qoe, trace.period_tau or []))]
    return header, rows


def apply_overrides(exp, args):
    spec = exp.scenario
    if getattr(args, "seed_override", None) is not None:
        spec = dataclasses.replace(spec, seed=args.seed_override)
    if getattr(args, "horizon", None) is not None:
        if args.horizon < 0:
            raise ConfigError("--horizon: must be >= 0")
        spec = dataclasses.replace(spec, horizon=args.horizon)
    changes = {"scenario": spec}
    if getattr(args, "policy", None) is not None:
        changes["policy"] = args.policy
    if getattr(args, "out_dir", None) is not None:
        changes["out_dir"] = args.out_dir
    if getattr(args, "detail", None) is not None:
        changes["detail"] = args.detail
    return dataclasses.replace(exp, **changes)


def cmd_run(exp):
    run = run_policy(exp)
    os.makedirs(exp.out_dir, exist_ok=True)
    write_csv(os.path.join(exp.out_dir, "hyperperiod.csv"), *hyperperiod_rows(run.trace, exp.system))
    write_csv(os.path.join(exp.out_dir, "clients.csv"), *client_rows(run.trace, exp.system))
    if exp.detail == "period":
        write_csv(os.path.join(exp.out_dir, "periods.csv"), *period_rows(run.trace, exp.system))
    extra = {"policy": exp.policy, "horizon": exp.scenario.horizon}
    if run.opt_objective is not None:
        extra["opt_objective"] = run.opt_objective
    write_manifest(exp.out_dir, exp, "run", extra)
    print(f"{exp.policy}: {run.trace.num_hyperperiods} hyperperiods -> {exp.out_dir}")
    return EXIT_OK


def cmd_compare(exp, policies):
    rows = compare_policies(exp, policies)
    os.makedirs(exp.out_dir, exist_ok=True)
    write_csv(os.path.join(exp.out_dir, "compare.csv"),
              ["rate_low", "rate_high", "policy", "long_run_qoe", "improvement", "relative"],
              [[r.rate_low, r.rate_high, r.policy, r.qoe, r.improvement, r.relative] for r in rows])
    write_manifest(exp.out_dir, exp, "compare", {"policies": list(policies or exp.compare.policies)})
    for r in rows:
        unit = "%" if r.relative else " (abs)"
        print(f"({r.rate_low:g}, {r.rate_high:g}) {r.policy:>10}: {r.improvement:+.3f}{unit}")
    return EXIT_OK


def cmd_sweep(exp, steps, variable):
    rows, summaries = sweep_step_sizes(exp, steps, variable)
    os.makedirs(exp.out_dir, exist_ok=True)
    write_csv(os.path.join(exp.out_dir, "sweep.csv"),
              ["label", "hyperperiod", "total_qoe", "smoothed_qoe"],
              [[r.label, r.hyperperiod, r.total_qoe, r.smoothed_qoe] for r in rows])
    write_csv(os.path.join(exp.out_dir, "sweep_summary.csv"),
              ["label", "step_size", "schedule", "opt_objective", "final_qoe", "final_gap",
               "signed_gap", "iters_to_5pct", "reached_2pct"],
              [[s.label, s.step_size, s.schedule, s.opt_objective, s.final_qoe, s.final_gap,
                s.signed_gap, s.iters_to_5pct, s.reached_2pct] for s in summaries])
    write_manifest(exp.out_dir, exp, "sweep-stepsize")
    for s in summaries:
        print(f"{s.label:>22}: final gap {s.final_gap:.4f}, within 5% after {s.iters_to_5pct}")
    return EXIT_OK


def cmd_validate(exp):
    report = validate_experiment(exp)
    for m in report.messages:
        print(m)
    print("validate:", "pass" if report.ok else "FAIL")
    return EXIT_OK if report.ok else EXIT_CONFIG


def _parse_steps(values):
    steps, variable = [], False
    for v in values:
        if v == "variable":
            variable = True
        else:
            try:
                x = float(v)
            except ValueError:
                raise ConfigError(f"--eta: not a number or 'variable': {v!r}") from None
            if x < 0:
                raise ConfigError("--eta: step sizes must be >= 0")
            steps.append(x)
    return steps, variable


def build_parser():
    p = argparse.ArgumentParser(prog="bandshare", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", required=True, help="YAML experiment file")
        sp.add_argument("--seed-override", type=int, default=None)
        sp.add_argument("--horizon", type=int, default=None, help="hyperperiods to simulate")
        sp.add_argument("--out-dir", default=None)
        sp.add_argument("--detail", choices=("hyperperiod", "period"), default=None)

    sp = sub.add_parser("run", help="run one policy")
    common(sp)
    sp.add_argument("--policy", choices=POLICIES, default=None)
    sp = sub.add_parser("compare", help="improvement over no sharing across rate pairs")
    common(sp)
    sp.add_argument("--policy", dest="policies", action="append", choices=POLICIES,
                    help="repeat for each policy (default: config's list)")
    sp = sub.add_parser("sweep-stepsize", help="convergence for several step sizes")
    common(sp)
    sp.add_argument("--eta", nargs="+", default=None, help="step sizes and/or 'variable'")
    sp = sub.add_parser("validate", help="schema, polytope and feasibility smoke test")
    common(sp)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        exp = apply_overrides(load_config(args.config), args)
        if args.command == "run":
            return cmd_run(exp)
        if args.command == "compare":
            policies = args.policies or list(exp.compare.policies)
            if len(policies) < 2:
                raise ConfigError("compare: at least two policies are required")
            return cmd_compare(exp, policies)
        if args.command == "sweep-stepsize":
            steps, variable = (None, None) if args.eta is None else _parse_steps(args.eta)
            return cmd_sweep(exp, steps, variable)
        return cmd_validate(exp)
    except ConfigError as exc:
        print(f"invalid config: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except SolverError as exc:
        print(f"solver error: {exc}", file=sys.stderr)
        return EXIT_SOLVER


if __name__ == "__main__":
    sys.exit(main())
