"""Command-line interface.

Subcommands map onto scenario presets; every run writes CSV/JSON (and PNG
figures) into the output directory plus a per-run report JSON, then a
summary.  The exit code is 0 exactly when every check in every report
passed.  ``--threads`` only affects speed: chunk results are reduced in a
fixed order, so outputs are identical for any thread count.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

from .config import ExperimentConfig, config_hash, load_config
from .engine import build_reference_cloud, write_cloud
from .errors import MflabError
from .report import CheckRecord, RunReport, emit_report
from .scenarios import preset_config, run_scenario, run_sweep

ENV_OUT = "MFLAB_OUT"

_COMMAND_SCENARIO = {
    "simulate": "simulate",
    "kl-bound": "kl-forward",
    "reversed": "reversed",
    "oracle": "oracle-validation",
    "concentration": "concentration",
    "dpi-suite": "dpi-suite",
}


def _add_common(sub):
    sub.add_argument("--config", metavar="PATH", help="experiment config file")
    sub.add_argument("--out", metavar="DIR", help="output directory "
                     f"(default: config value, or ${ENV_OUT})")
    sub.add_argument("--seed", type=int, metavar="U64", help="override master seed")
    sub.add_argument("--threads", type=int, default=1, metavar="COUNT",
                     help="worker threads (speed only, never results)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mflab",
        description="Monte Carlo laboratory for mean-field particle systems",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_text in (
        ("simulate", "run one interacting realization and report path diagnostics"),
        ("kl-bound", "forward drift-mismatch divergence bound vs theory envelope"),
        ("reversed", "reversed divergence functional along mean-field paths"),
        ("oracle", "linear-kernel validation against the exact Gaussian oracle"),
        ("concentration", "exponential moment of the centered pair statistic"),
        ("dpi-suite", "data-processing, Fenchel-Young, Pinsker and scaling checks"),
        ("sweep", "run the sweep list (N, m, T, or eta) from the config"),
        ("report", "merge report JSONs from a directory into one summary"),
    ):
        p = sub.add_parser(name, help=help_text)
        _add_common(p)
        if name == "simulate":
            p.add_argument("--dump-cloud", metavar="PATH",
                           help="also build the reference cloud and dump it")
    return parser


def _resolve_config(args, command: str) -> ExperimentConfig:
    if args.config:
        cfg = load_config(args.config)
        if command in _COMMAND_SCENARIO:
            cfg = cfg.with_overrides(scenario=_COMMAND_SCENARIO[command])
    else:
        cfg = preset_config(_COMMAND_SCENARIO.get(command, "kl-forward"))
    if args.seed is not None:
        cfg = cfg.with_overrides(master_seed=args.seed)
    return cfg


def _resolve_outdir(args, cfg: ExperimentConfig) -> str:
    if args.out:
        return args.out
    env = os.environ.get(ENV_OUT)
    if env:
        return env
    return cfg.directory


def _finish(reports, outdir) -> int:
    return emit_report(reports, outdir)


def _cmd_report(args) -> int:
    outdir = args.out or os.environ.get(ENV_OUT) or "out"
    reports = []
    for name in sorted(os.listdir(outdir)):
        if not (name.startswith("report-") and name.endswith(".json")):
            continue
        with open(os.path.join(outdir, name), "r", encoding="utf-8") as fh:
            data = json.load(fh)
        rep = RunReport(
            scenario=data["scenario"],
            config_hash=data["config_hash"],
            master_seed=data["master_seed"],
            records=[
                CheckRecord(
                    name=r["name"], value=r["value"], passed=r["passed"],
                    std_error=r.get("std_error"), bound=r.get("bound"),
                    note=r.get("note", ""),
                )
                for r in data["records"]
            ],
            outputs=data.get("outputs", []),
            wall_clock_s=data.get("wall_clock_s", 0.0),
        )
        reports.append(rep)
    return emit_report(reports, outdir)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "report":
            return _cmd_report(args)
        cfg = _resolve_config(args, args.command)
        outdir = _resolve_outdir(args, cfg)
        os.makedirs(outdir, exist_ok=True)
        if args.command == "sweep":
            reports = run_sweep(cfg, outdir, threads=args.threads)
        else:
            reports = [run_scenario(cfg, outdir, threads=args.threads)]
        if args.command == "simulate" and getattr(args, "dump_cloud", None):
            cloud = build_reference_cloud(
                cfg.build_params(), cfg.build_kernel(), cfg.build_init(),
                cfg.build_grid(), cfg.M, cfg.build_rng(),
                refine_iters=cfg.refine_iters, order=cfg.order,
            )
            write_cloud(args.dump_cloud, cloud)
            reports[0].outputs.append(os.path.basename(args.dump_cloud))
        code = _finish(reports, outdir)
        for rep in reports:
            for rec in rep.records:
                status = "pass" if rec.passed else "FAIL"
                print(f"[{status}] {rep.scenario}: {rec.name} = {rec.value:.6g}")
        print(f"summary written to {outdir} (config {config_hash(cfg)})")
        return code
    except MflabError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
