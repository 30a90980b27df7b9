"""Command-line entry point.

Subcommands:

    run            execute one scenario and write reports
    sweep          run the threshold or window sweep (CSV + figure by default)
    list-profiles  built-in microarchitecture profile names
    dump-trace     print a scenario's generated trace programs

Exit codes: 0 on success, 1 when the scenario reports a structural failure
or is unsupported on the profile, 2 on configuration errors.
"""

from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path

from .config import (BUILTIN_PROFILE_NAMES, ConfigError,
                     MicroarchProfile, ScenarioId, ScenarioSpec,
                     builtin_profile, load_profile, load_scenario,
                     validate_scenario)
from .report import emit_report, summary_text
from .scenarios import run_scenario, scenario_traces
from .trace import dump_trace

OUT_DIR_ENV = "BHSIM_OUT_DIR"


def _load_profile_arg(value: str) -> MicroarchProfile:
    if value in BUILTIN_PROFILE_NAMES:
        return builtin_profile(value)
    path = Path(value)
    if path.exists():
        return load_profile(path.read_text())
    raise ConfigError(
        f"unknown profile {value!r}: not a built-in "
        f"({', '.join(BUILTIN_PROFILE_NAMES)}) and no such file")


def _build_spec(args) -> ScenarioSpec:
    profile = _load_profile_arg(args.profile)
    scenario_ids = {s.value for s in ScenarioId}
    if args.scenario in scenario_ids:
        spec = ScenarioSpec(ScenarioId(args.scenario), profile)
    else:
        path = Path(args.scenario)
        if not path.exists():
            raise ConfigError(
                f"unknown scenario {args.scenario!r}: not one of "
                f"{sorted(scenario_ids)} and no such file")
        spec = load_scenario(path.read_text(), profile=profile)
    if args.trials is not None:
        spec.trials = args.trials
    if args.seed is not None:
        spec.seed = args.seed
    if args.noise is not None:
        spec.noise = args.noise
    return validate_scenario(spec)


def _add_run_flags(sub: argparse.ArgumentParser) -> None:
    sub.add_argument("--profile", required=True,
                     help="built-in profile name or profile file path")
    sub.add_argument("--scenario", required=True,
                     help="scenario id or scenario file path")
    sub.add_argument("--trials", type=int, default=None)
    sub.add_argument("--seed", type=lambda s: int(s, 0), default=None)
    sub.add_argument("--noise", type=float, default=None,
                     help="contention probability per trial, in [0, 1]")
    sub.add_argument("--out", default=None,
                     help=f"output directory (default ./bhsim-out or ${OUT_DIR_ENV})")
    sub.add_argument("--jobs", type=int, default=1,
                     help="trial-level worker processes")
    sub.add_argument("--format", choices=("json", "csv", "both"), default="json")
    sub.add_argument("--no-figures", action="store_true",
                     help="skip figure rendering")


def _cmd_run(args) -> int:
    spec = _build_spec(args)
    result = run_scenario(spec, jobs=max(1, args.jobs))
    outdir = Path(args.out or os.environ.get(OUT_DIR_ENV, "bhsim-out"))
    written = emit_report(result, spec, outdir, formats=args.format,
                          figures=not args.no_figures)
    sys.stdout.write(summary_text(result))
    for kind, path in sorted(written.items()):
        print(f"wrote {kind:16s} {path}")
    return 0 if result.status == "ok" else 1


def _cmd_sweep(args) -> int:
    if args.scenario not in ("threshold-sweep", "window-sweep"):
        raise ConfigError("sweep expects --scenario threshold-sweep or window-sweep")
    if args.format == "json":
        args.format = "both"
    return _cmd_run(args)


def _cmd_list_profiles(_args) -> int:
    for name in BUILTIN_PROFILE_NAMES:
        print(name)
    return 0


def _cmd_dump_trace(args) -> int:
    spec = _build_spec(args)
    traces = scenario_traces(spec)
    if args.phase is not None:
        if args.phase not in traces:
            raise ConfigError(
                f"unknown phase {args.phase!r}; have {sorted(traces)}")
        traces = {args.phase: traces[args.phase]}
    for name, prog in traces.items():
        print(f"# phase: {name}")
        sys.stdout.write(dump_trace(prog))
        print()
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="bhsim",
        description="history-based branch prediction side-channel simulator")
    sub = parser.add_subparsers(dest="command", required=True)

    run_p = sub.add_parser("run", help="run one scenario")
    _add_run_flags(run_p)
    run_p.set_defaults(fn=_cmd_run)

    sweep_p = sub.add_parser("sweep", help="run a threshold or window sweep")
    _add_run_flags(sweep_p)
    sweep_p.set_defaults(fn=_cmd_sweep)

    list_p = sub.add_parser("list-profiles", help="list built-in profiles")
    list_p.set_defaults(fn=_cmd_list_profiles)

    dump_p = sub.add_parser("dump-trace", help="print generated trace programs")
    _add_run_flags(dump_p)
    dump_p.add_argument("--phase", default=None,
                        help="dump only this named phase")
    dump_p.set_defaults(fn=_cmd_dump_trace)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
