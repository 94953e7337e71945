"""Command-line interface for the retraction experiment pipeline.

Subcommands: calibrate (peak-force threshold over every shipped scenario),
plan (pre-operative plan for one scenario), run (execute one scenario with a
perturbation mode), report (aggregate finished run directories into a
median/IQR table) and replay (re-print a recorded tick log).

Exit status is 0 whenever an outcome was recorded (including fail and abort
runs); harness errors (bad scenario file, unreliable calibration, no
feasible plan) exit nonzero.
"""
from __future__ import annotations

import argparse
import csv
import os
import sys

from . import harness
from .executive import ExecOptions, ForceGuardConfig
from .harness import (
    CalibrationUnreliableError,
    NoFeasiblePreopPlanError,
    ScenarioConfig,
    ScenarioFormatError,
    SuiteRun,
    ReportTable,
)


def _build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="retraction",
        description="Deliberative tissue-retraction experiments on simulated scenarios.",
    )
    p.add_argument("--seed", type=int, default=None, help="override the scenario seed")
    p.add_argument(
        "--mesh-res", type=int, nargs=3, metavar=("NX", "NY", "NZ"), default=None,
        help="override the mesh resolution",
    )
    p.add_argument("--config-dir", default=None, help="scenario directory (default: shipped set)")
    p.add_argument("--out", default=".", help="output directory")
    sub = p.add_subparsers(dest="command", required=True)

    sub.add_parser("calibrate", help="run every scenario x grasp point and emit the force threshold")

    sp = sub.add_parser("plan", help="generate the pre-operative plan for one scenario")
    sp.add_argument("scenario", help="scenario name or file path")
    sp.add_argument("--epsilon", type=float, default=0.3, help="force threshold [N]")

    sr = sub.add_parser("run", help="execute one scenario under a perturbation mode")
    sr.add_argument("scenario", help="scenario name or file path")
    sr.add_argument("--mode", choices=("fewer", "more", "same"), default="same")
    sr.add_argument("--ablation", action="store_true", help="disable monitoring and learning")
    sr.add_argument("--epsilon", type=float, default=0.3, help="force threshold [N]")

    st = sub.add_parser("report", help="aggregate run directories into a median/IQR table")
    st.add_argument("run_dirs", nargs="+", help="directories produced by `run`")

    sy = sub.add_parser("replay", help="re-print the tick log of a run directory")
    sy.add_argument("run_dir")
    return p


def _load_scenario(args, name: str) -> ScenarioConfig:
    if os.path.isfile(name):
        cfg = ScenarioConfig.load(name)
    else:
        d = args.config_dir or harness.default_config_dir()
        path = os.path.join(d, name if name.endswith(".txt") else name + ".txt")
        if not os.path.isfile(path):
            raise ScenarioFormatError(f"no scenario {name!r} in {d}")
        cfg = ScenarioConfig.load(path)
    if args.seed is not None:
        cfg.seed = args.seed
    if args.mesh_res is not None:
        cfg.resolution = tuple(args.mesh_res)
    return cfg


def _apply_overrides(args, configs):
    for cfg in configs:
        if args.seed is not None:
            cfg.seed = args.seed
        if args.mesh_res is not None:
            cfg.resolution = tuple(args.mesh_res)
    return configs


def cmd_calibrate(args) -> int:
    configs = _apply_overrides(args, harness.load_configs(args.config_dir))
    os.makedirs(args.out, exist_ok=True)
    out_csv = os.path.join(args.out, "calibration_forces.csv")
    eps = harness.calibrate_epsilon(configs, out_csv=out_csv)
    print(f"epsilon = {eps:.6f} N  (force log: {out_csv})")
    return 0


def cmd_plan(args) -> int:
    cfg = _load_scenario(args, args.scenario)
    scenario = harness.build_scenario(cfg)
    plan, best = harness.generate_preop_plan(scenario, args.epsilon)
    os.makedirs(args.out, exist_ok=True)
    path = os.path.join(args.out, f"{cfg.name}_preop_plan.csv")
    plan.write_csv(path)
    print(f"plan: {' '.join(a.name for a in plan)}")
    print(
        f"grasp point: {plan.grasp_point()}  predicted visibility: {best['visibility']:.3f}  "
        f"predicted F_max: {best['f_max']:.3f} N  actions: {best['actions']}"
    )
    print(f"written to {path}")
    return 0


_ROW_FIELDS = (
    "config", "mode", "pipeline", "outcome", "visibility",
    "actions", "over_force", "f_max", "triggers", "successes",
)


def _write_suite_row(run: SuiteRun, out_dir: str) -> None:
    with open(os.path.join(out_dir, "suite_row.csv"), "w") as fh:
        fh.write(",".join(_ROW_FIELDS) + "\n")
        fh.write(",".join(str(getattr(run, f)) for f in _ROW_FIELDS) + "\n")


def _read_suite_row(run_dir: str) -> SuiteRun:
    with open(os.path.join(run_dir, "suite_row.csv")) as fh:
        row = list(csv.DictReader(fh))[0]
    return SuiteRun(
        config=row["config"], mode=row["mode"], pipeline=row["pipeline"],
        outcome=row["outcome"], visibility=float(row["visibility"]),
        actions=int(row["actions"]), over_force=int(row["over_force"]),
        f_max=float(row["f_max"]), triggers=int(row["triggers"]),
        successes=int(row["successes"]),
    )


def cmd_run(args) -> int:
    cfg = _load_scenario(args, args.scenario)
    os.makedirs(args.out, exist_ok=True)
    run = harness.run_case(
        cfg, args.mode, args.epsilon, ablation=args.ablation, out_dir=args.out,
    )
    _write_suite_row(run, args.out)
    print(
        f"{run.config} [{run.mode}/{run.pipeline}]: {run.outcome}  "
        f"visibility {100.0 * run.visibility:.1f}%  actions {run.actions}  "
        f"F>eps ticks {run.over_force}  F_max {run.f_max:.3f} N"
    )
    return 0


def cmd_report(args) -> int:
    runs = [_read_suite_row(d) for d in args.run_dirs]
    table = ReportTable(runs=runs)
    table.save(args.out)
    print(table.to_text(), end="")
    return 0


def cmd_replay(args) -> int:
    path = os.path.join(args.run_dir, "ticks.csv")
    with open(path) as fh:
        rows = list(csv.reader(fh))
    widths = [max(len(r[i]) for r in rows) for i in range(len(rows[0]))]
    for r in rows:
        print("  ".join(v.ljust(w) for v, w in zip(r, widths)))
    return 0


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    handlers = {
        "calibrate": cmd_calibrate,
        "plan": cmd_plan,
        "run": cmd_run,
        "report": cmd_report,
        "replay": cmd_replay,
    }
    try:
        return handlers[args.command](args)
    except (ScenarioFormatError, CalibrationUnreliableError, NoFeasiblePreopPlanError,
            FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
