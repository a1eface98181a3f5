"""Command-line frontend for compatient.

    python cli.py run --builtin H --out out/
    python cli.py cohort --out out/cohort
    python cli.py sweep --param age --values 20,45,70 --out out/sweep
"""

from pathlib import Path
from typing import List, Optional, Sequence
import argparse
import logging
import os
import random
import sys

import numpy as np
from pydantic import ValidationError

from algos.circulation_algo import CirculationParams
from algos.io_algo import (ConfigError, load_cohort_manifest, load_overrides, load_scenario, staged_output,
                           write_metrics, write_table_csv, write_timeseries_csv)
from algos.kernel_algo import IntegratorConfig, SimulationError
from algos.plot_algo import plot_overlay, write_scenario_plots
from algos.scenario_algo import (CohortResult, ScenarioResult, builtin_cohort, builtin_scenario, run_cohort,
                                 run_scenario, sweep, with_beats)
from schemas import ScenarioConfig

logger = logging.getLogger("compatient")

PARAMS_ENV = "COMPATIENT_PARAMS"
OVERLAY_BEATS = 5

DISCLAIMER = """\
compatient composes pharmacokinetic, renin-angiotensin, glucose-insulin,
inflammation and circulation models into computational patients.

This software is a research tool. It has not been validated and should not be
used for clinical purposes."""

EPILOG = """\
Disclaimer: the models and parameters are illustrative; this tool has not been
validated and should not be used for clinical purposes.

Parameter overrides are read from --params FILE or from the file named in the
COMPATIENT_PARAMS environment variable (lines of '<module>.<parameter> = value')."""


def _common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--out", required=True, help="output directory")
    parser.add_argument("--rtol", type=float, default=None, help="relative tolerance of the adaptive solver")
    parser.add_argument("--atol", type=float, default=None, help="absolute tolerance of the adaptive solver")
    parser.add_argument("--beats", type=int, default=None, help="cardiac beats to simulate")
    parser.add_argument("--seedless", action="store_true",
                        help="fail if the run draws from any global random generator")
    parser.add_argument("--format", choices=("csv", "csv+svg"), default=None, dest="fmt",
                        help="bundle contents (default: csv+svg, or the scenario's own setting)")
    parser.add_argument("--params", default=None, help=f"parameter override file (default: ${PARAMS_ENV})")
    parser.add_argument("--jobs", type=int, default=1, help="parallel scenarios for cohort and sweep")
    parser.add_argument("-v", "--verbose", action="count", default=0, help="-v for info, -vv for debug")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="compatient", description=DISCLAIMER, epilog=EPILOG,
                                     formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run one scenario", description=DISCLAIMER, epilog=EPILOG,
                         formatter_class=argparse.RawDescriptionHelpFormatter)
    source = run.add_mutually_exclusive_group(required=True)
    source.add_argument("--builtin", metavar="LABEL", help="builtin scenario (H, D, R, C+T, V, C+V, C+V+T, C+V+3T)")
    source.add_argument("--scenario", metavar="FILE", help="key-value scenario file")
    _common(run)

    cohort = sub.add_parser("cohort", help="run a cohort and compare it", description=DISCLAIMER, epilog=EPILOG,
                            formatter_class=argparse.RawDescriptionHelpFormatter)
    cohort.add_argument("--manifest", metavar="FILE", default=None,
                        help="file listing scenario files (default: the eight builtin patients)")
    _common(cohort)

    sweep_cmd = sub.add_parser("sweep", help="run one scenario per value of a profile field",
                               description=DISCLAIMER, epilog=EPILOG,
                               formatter_class=argparse.RawDescriptionHelpFormatter)
    base = sweep_cmd.add_mutually_exclusive_group()
    base.add_argument("--builtin", metavar="LABEL", default=None, help="base scenario (default C+V)")
    base.add_argument("--scenario", metavar="FILE", help="base scenario file")
    sweep_cmd.add_argument("--param", required=True, help="profile field, e.g. age or profile.acei_dose")
    sweep_cmd.add_argument("--values", required=True, help="comma-separated values, e.g. 20,45,70")
    _common(sweep_cmd)
    return parser


def configure_logging(verbose: int) -> None:
    level = logging.WARNING if verbose == 0 else logging.INFO if verbose == 1 else logging.DEBUG
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)


def integrator_from_args(args) -> IntegratorConfig:
    update = {k: v for k, v in (("rtol", args.rtol), ("atol", args.atol)) if v is not None}
    try:
        return IntegratorConfig(**update)
    except ValidationError as exc:
        err = exc.errors()[0]
        raise ConfigError(str(err["loc"][0]), err["msg"]) from None


def apply_cli_settings(cfg: ScenarioConfig, args) -> ScenarioConfig:
    update = {}
    if args.beats is not None:
        cfg = with_beats(cfg, args.beats)
    if args.fmt is not None:
        update["output"] = cfg.output.model_copy(update={"format": args.fmt})
    return cfg.model_copy(update=update) if update else cfg


def _scenario(args) -> ScenarioConfig:
    if args.scenario:
        return load_scenario(args.scenario)
    label = args.builtin or "C+V"
    try:
        return builtin_scenario(label)
    except KeyError:
        labels = [c.label for c in builtin_cohort()]
        raise ConfigError("builtin", f"unknown builtin scenario {label!r}; choose from {labels}") from None


def parse_values(text: str) -> List[float]:
    values = []
    for chunk in (c.strip() for c in text.split(",")):
        if not chunk:
            continue
        try:
            values.append(float(chunk))
        except ValueError:
            raise ConfigError("values", f"{chunk!r} is not a number") from None
    if not values:
        raise ConfigError("values", "sweep needs at least one value")
    return values


def _overlay_period(result: ScenarioResult) -> float:
    return result.series["circulation"].scalars.get("period_s", CirculationParams().T)


def write_run_bundle(result: ScenarioResult, out_dir: Path) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    label = result.label
    for module, series in result.series.items():
        write_timeseries_csv(series, out_dir / f"{label}_{module}.csv")
    write_metrics(result.metrics, out_dir / f"{label}_metrics.txt", result.daily)
    if result.config.output.format == "csv+svg":
        period = _overlay_period(result) if "circulation" in result.series else CirculationParams().T
        write_scenario_plots(result.series, label, out_dir, period=period)


def write_cohort_bundle(cohort: CohortResult, out_dir: Path, with_plots: bool) -> None:
    for label in cohort.order:
        if label in cohort.results:
            write_run_bundle(cohort.results[label], out_dir / label)
    write_table_csv(cohort.comparison(), out_dir / "comparison.csv")
    if with_plots:
        done = [cohort.results[label] for label in cohort.order if label in cohort.results]
        circulation = {r.label: r.series["circulation"] for r in done if "circulation" in r.series}
        if circulation:
            last = OVERLAY_BEATS * max(_overlay_period(r) for r in done if "circulation" in r.series)
            plot_overlay(circulation, "P_pcp", "pulmonary capillary pressure (mmHg)",
                         out_dir / "overlay_pulmonary.svg", time_column="time_s", last=last)
        coupling = {r.label: r.series["coupling"] for r in done if "coupling" in r.series}
        if coupling:
            plot_overlay(coupling, "IR", "inflammation score", out_dir / "overlay_inflammation.svg")
    if cohort.failures:
        lines = [f"{label}: {cohort.failures[label]}" for label in cohort.order if label in cohort.failures]
        (out_dir / "failures.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")


def _random_state():
    state = np.random.get_state()
    return random.getstate(), state[0], state[1].tobytes(), state[2:]


def cmd_run(args, overrides, integrator) -> int:
    cfg = apply_cli_settings(_scenario(args), args)
    result = run_scenario(cfg, overrides, integrator)
    with staged_output(args.out) as stage:
        write_run_bundle(result, stage)
    return 0


def cmd_cohort(args, overrides, integrator) -> int:
    configs = load_cohort_manifest(args.manifest) if args.manifest else builtin_cohort()
    configs = [apply_cli_settings(cfg, args) for cfg in configs]
    cohort = run_cohort(configs, overrides, integrator, jobs=args.jobs)
    logger.info("cohort: %d of %d scenarios completed", len(cohort.results), len(configs))
    with_plots = (args.fmt or "csv+svg") == "csv+svg"
    with staged_output(args.out) as stage:
        write_cohort_bundle(cohort, stage, with_plots)
    for label, message in cohort.failures.items():
        print(f"numerical failure: {message}", file=sys.stderr)
    return 1 if cohort.failures else 0


def cmd_sweep(args, overrides, integrator) -> int:
    values = parse_values(args.values)
    base = apply_cli_settings(_scenario(args), args)
    cohort, table = sweep(base, args.param, values, overrides, integrator, jobs=args.jobs)
    logger.info("sweep %s over %d values", args.param, len(values))
    name = args.param.split(".")[-1]
    with staged_output(args.out) as stage:
        write_table_csv(table, stage / f"sweep_{name}.csv")
    for label, message in cohort.failures.items():
        print(f"numerical failure: {message}", file=sys.stderr)
    return 1 if cohort.failures else 0


COMMANDS = {"run": cmd_run, "cohort": cmd_cohort, "sweep": cmd_sweep}


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    configure_logging(args.verbose)
    before = _random_state() if args.seedless else None
    try:
        integrator = integrator_from_args(args)
        overrides = load_overrides(args.params or os.environ.get(PARAMS_ENV) or None)
        code = COMMANDS[args.command](args, overrides, integrator)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except SimulationError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 1
    if before is not None and _random_state() != before:
        print("numerical failure: run consumed global random state under --seedless", file=sys.stderr)
        return 1
    return code


if __name__ == "__main__":
    sys.exit(main())
