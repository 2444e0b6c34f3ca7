"""Command-line entry point.

Subcommands:

* ``run``          simulate one scenario, fuse under one strategy, and write
                   all timeline CSVs, the error report, and figures;
* ``compare``      run several strategies on the same scenario and write a
                   side-by-side comparison;
* ``shootout``     evaluate all four consistency metrics on identical
                   windows and write the metric timeline;
* ``gen-scenario`` write the default scenario file for editing.

Exit codes: 0 success, 1 usage error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import sys
from pathlib import Path

import numpy as np
import yaml

from . import __version__
from .consensus import ConsensusConfig
from .metrics import MetricConfig
from .pipeline import (
    PipelineConfig,
    metric_timelines,
    parse_strategy,
    run_pipeline,
)
from .report import (
    compute_error_report,
    render_run_figures,
    render_shootout_figure,
    write_comparison_csv,
    write_decision_csv,
    write_error_csv,
    write_fused_csv,
    write_metric_csv,
    write_shootout_csv,
)
from .signals import dump_streams
from .sim import default_indoor_scenario, load_scenario, save_scenario, simulate

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_RUNTIME = 2


class UsageError(ValueError):
    pass


class _Parser(argparse.ArgumentParser):
    """argparse exits with code 2 on bad flags; the CLI contract wants 1."""

    def error(self, message):
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="consensusfusion",
                     description="consistency-gated multi-sensor fusion")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, strategy_default=None):
        p.add_argument("--scenario", type=Path, default=None,
                       help="scenario YAML (default: built-in indoor scenario)")
        p.add_argument("--seed", type=int, default=None,
                       help="override the scenario seed")
        p.add_argument("--threshold", type=float, default=None,
                       help="consistency threshold (default 0.1)")
        p.add_argument("--out", type=Path, required=True,
                       help="output directory")
        if strategy_default is not None:
            p.add_argument("--strategy", default=strategy_default,
                           help="fusion strategy: consensus, naive, or "
                                "single:<sensor_id> (comma-separated for "
                                "compare)")

    common(sub.add_parser("run", help="fuse one scenario"),
           strategy_default="consensus")
    common(sub.add_parser("compare", help="compare fusion strategies"),
           strategy_default="consensus,single:lio,naive")
    common(sub.add_parser("shootout",
                          help="side-by-side metric timelines"))
    gen = sub.add_parser("gen-scenario", help="write the default scenario")
    gen.add_argument("--seed", type=int, default=None)
    gen.add_argument("--out", type=Path, required=True,
                     help="output scenario YAML path")
    return parser


def _load(args) -> "Scenario":
    if args.scenario is not None:
        if not args.scenario.exists():
            raise UsageError(f"scenario file not found: {args.scenario}")
        scenario = load_scenario(args.scenario)
    else:
        scenario = default_indoor_scenario()
    if args.seed is not None:
        scenario.seed = int(args.seed)
    return scenario


def _pipeline_config(args) -> PipelineConfig:
    cfg = PipelineConfig()
    if getattr(args, "threshold", None) is not None:
        if args.threshold <= 0:
            raise UsageError("--threshold must be positive")
        cfg.consensus = ConsensusConfig(threshold=float(args.threshold))
    return cfg


def _write_resolved_config(outdir: Path, scenario, cfg: PipelineConfig,
                           strategies: list[str]) -> None:
    resolved = {
        "version": __version__,
        "scenario_name": scenario.name,
        "seed": int(scenario.seed),
        "strategies": strategies,
        "pipeline": dataclasses.asdict(cfg),
    }
    with open(outdir / "config.yaml", "w") as f:
        yaml.safe_dump(resolved, f, sort_keys=True)


def _safe_name(strategy: str) -> str:
    return strategy.replace(":", "_")


def cmd_run(args) -> int:
    scenario = _load(args)
    cfg = _pipeline_config(args)
    strategy = parse_strategy(args.strategy)
    outdir = args.out
    outdir.mkdir(parents=True, exist_ok=True)

    sim = simulate(scenario)
    result = run_pipeline(sim, cfg, strategy=strategy)
    report = compute_error_report(result.output, sim.truth,
                                  switch_count=len(result.switches),
                                  strategy=strategy)

    save_scenario(scenario, outdir / "scenario.yaml")
    _write_resolved_config(outdir, scenario, cfg, [strategy])
    dump_streams(sim.sensors, outdir / "streams.csv")
    write_fused_csv(result.output, outdir / "fused.csv")
    write_metric_csv(result.matrices, outdir / "metrics.csv")
    write_decision_csv(result.decisions, outdir / "decisions.csv")
    write_error_csv(report, outdir / "errors.csv")
    render_run_figures(outdir, result.output, sim.truth, report,
                       matrices=result.matrices,
                       threshold=cfg.consensus.threshold)
    print(f"{strategy}: ATE pos {report.ate_pos_rmse:.4f} m, "
          f"rot {np.degrees(report.ate_rot_rmse):.3f} deg, "
          f"{report.switch_count} switches -> {outdir}")
    return EXIT_OK


def cmd_compare(args) -> int:
    strategies = [parse_strategy(s) for s in args.strategy.split(",") if s]
    if len(strategies) < 2:
        raise UsageError("compare needs at least two comma-separated "
                         "strategies")
    scenario = _load(args)
    cfg = _pipeline_config(args)
    outdir = args.out
    outdir.mkdir(parents=True, exist_ok=True)

    sim = simulate(scenario)
    save_scenario(scenario, outdir / "scenario.yaml")
    _write_resolved_config(outdir, scenario, cfg, strategies)
    reports = []
    for strategy in strategies:
        result = run_pipeline(sim, cfg, strategy=strategy)
        report = compute_error_report(result.output, sim.truth,
                                      switch_count=len(result.switches),
                                      strategy=strategy)
        reports.append(report)
        name = _safe_name(strategy)
        write_fused_csv(result.output, outdir / f"fused_{name}.csv")
        write_error_csv(report, outdir / f"errors_{name}.csv")
        print(f"{strategy}: ATE pos {report.ate_pos_rmse:.4f} m, "
              f"{report.switch_count} switches")
    write_comparison_csv(reports, outdir / "comparison.csv")
    return EXIT_OK


def cmd_shootout(args) -> int:
    scenario = _load(args)
    threshold = args.threshold if args.threshold is not None else 0.1
    if threshold <= 0:
        raise UsageError("--threshold must be positive")
    outdir = args.out
    outdir.mkdir(parents=True, exist_ok=True)

    sim = simulate(scenario)
    rows = metric_timelines(sim)
    save_scenario(scenario, outdir / "scenario.yaml")
    write_shootout_csv(rows, outdir / "shootout.csv")
    # render the pair with the strongest excursion, where the metric
    # separation is most visible
    peak = {}
    for r in rows:
        if r["metric"] == "cm" and r["value"] >= 0.0:
            peak[r["pair"]] = max(peak.get(r["pair"], 0.0), r["value"])
    pair = max(sorted(peak), key=lambda p: peak[p]) if peak else None
    if pair is not None:
        render_shootout_figure(outdir, rows, pair, threshold=threshold)
    print(f"shootout: {len(rows)} rows -> {outdir}")
    return EXIT_OK


def cmd_gen_scenario(args) -> int:
    scenario = default_indoor_scenario()
    if args.seed is not None:
        scenario.seed = int(args.seed)
    args.out.parent.mkdir(parents=True, exist_ok=True)
    save_scenario(scenario, args.out)
    print(f"wrote {args.out}")
    return EXIT_OK


_COMMANDS = {
    "run": cmd_run,
    "compare": cmd_compare,
    "shootout": cmd_shootout,
    "gen-scenario": cmd_gen_scenario,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ValueError as exc:
        # bad strategy strings and malformed scenario values are usage errors
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:  # runtime failure
        print(f"runtime failure: {type(exc).__name__}: {exc}",
              file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
