"""Command-line interface.

One entry point, one subcommand per workflow: exact two-player analysis,
Monte Carlo simulation of arbitrary protocol profiles, the stationary
equilibrium scan, prefix indifference checks, the two impossibility probes,
and the deadline efficiency experiment.

Conventions shared by all commands:

* ``--config FILE`` loads defaults from a JSON object; explicit flags
  override config values.
* Results go to stdout as JSON; ``--out PATH`` additionally writes a file
  (``--format json|csv``) atomically via a temp file and rename.
* The resolved seed is echoed on stderr and embedded in the JSON output, so
  every run can be replayed exactly. With ``--workers 1`` reruns are
  byte-identical.
* Exit codes: 0 success, 1 invalid usage or config, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import os
import sys
import tempfile
from typing import Optional

from . import chains, channel, deviations, experiments, protocols


class CliError(Exception):
    """Invalid usage, flags, or configuration."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CliError(message)


def _atomic_write(path: str, text: str) -> None:
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix=".part")
    try:
        with os.fdopen(fd, "w") as handle:
            handle.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _dump_json(doc) -> str:
    return json.dumps(doc, indent=2, sort_keys=True) + "\n"


def _csv_text(header, rows) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    writer.writerows(rows)
    return buf.getvalue()


def _load_protocol(value) -> protocols.ProtocolSpec:
    """Protocol from a parsed document, an inline JSON string, or a path."""
    if isinstance(value, dict):
        try:
            return protocols.from_json_dict(value)
        except (ValueError, KeyError, TypeError) as exc:
            raise CliError(f"invalid protocol document: {exc}") from exc
    text = value
    if not value.lstrip().startswith("{"):
        try:
            with open(value) as handle:
                text = handle.read()
        except OSError as exc:
            raise CliError(f"cannot read protocol file {value!r}: {exc}") from exc
    try:
        return protocols.from_json(text)
    except (ValueError, KeyError, TypeError) as exc:
        raise CliError(f"invalid protocol document: {exc}") from exc


def _parse_prefix(text: str) -> tuple:
    if not text or any(c not in "01" for c in text):
        raise CliError(f"prefix must be a non-empty string of 0s and 1s, got {text!r}")
    return tuple(int(c) for c in text)


def _emit(args, doc: dict, csv_payload: Optional[tuple] = None) -> None:
    sys.stdout.write(_dump_json(doc))
    if args.out:
        if args.format == "csv":
            if csv_payload is None:
                raise CliError("this command has no CSV output; use --format json")
            header, rows = csv_payload
            _atomic_write(args.out, _csv_text(header, rows))
        else:
            _atomic_write(args.out, _dump_json(doc))


def _resolved(args, command: str, **extra) -> dict:
    doc = {"command": command}
    doc.update(extra)
    return doc


def _echo_seed(seed) -> None:
    print(f"resolved seed: {seed}", file=sys.stderr)


def _resolve_workers(value) -> int:
    """Worker count: explicit flag value, else available parallelism."""
    if value is not None:
        if value < 1:
            raise CliError(f"--workers must be >= 1, got {value}")
        return value
    return os.cpu_count() or 1


def _profile_horizon(profile) -> int:
    """Default horizon; deadline profiles run through their deadline plus a
    grace interval instead of the generic 50-slots-per-player rule."""
    deadlines = [
        spec.params["schedule"].t0
        for spec in profile
        if spec.kind == protocols.ProtocolClass.DEADLINE
    ]
    if deadlines:
        return max(deadlines) + len(profile)
    return channel.default_horizon(len(profile))


# --- subcommand implementations -------------------------------------------


def _cmd_analyze_two_player(args) -> int:
    times = chains.hitting_times(chains.two_player_protocol_chain())
    success = {
        "after_transmission": chains.two_player_success_time(1),
        "after_quiet_slot": chains.two_player_success_time(0),
    }
    grid = chains.evaluate_policy_grid(args.grid_points)
    worst_a = max(abs(row[2] - 3.0) for row in grid)
    worst_e = max(abs(row[3] - 2.0) for row in grid)
    sample = {f"{p:.2f}": chains.stationary_two_player_latency(p) for p in (0.5, 2 / 3, 0.9)}
    doc = {
        "config": _resolved(args, "analyze-two-player", grid_points=args.grid_points),
        "hitting_times": times,
        "expected_success_time": success,
        "policy_grid": {
            "points": args.grid_points,
            "max_abs_deviation_from_3": worst_a,
            "max_abs_deviation_from_2": worst_e,
        },
        "stationary_pair_latency": sample,
    }
    rows = [(f"{pa:.6f}", f"{pe:.6f}", repr(ka), repr(ke)) for pa, pe, ka, ke in grid]
    _emit(args, doc, csv_payload=(("p_a", "p_e", "latency_from_A", "latency_from_E"), rows))
    return 0


def _profile_from_config(args) -> list:
    if args.protocols:
        specs = [_load_protocol(p) for p in args.protocols]
        if args.players and args.players != len(specs):
            raise CliError(
                f"--players {args.players} conflicts with {len(specs)} protocol entries"
            )
        return specs
    if not args.protocol:
        raise CliError("simulate needs --protocol (or \"protocols\" in the config)")
    if not args.players:
        raise CliError("simulate needs --players when a single --protocol is given")
    return [_load_protocol(args.protocol)] * args.players


def _cmd_simulate(args) -> int:
    profile = _profile_from_config(args)
    horizon = args.horizon or _profile_horizon(profile)
    workers = _resolve_workers(args.workers)
    _echo_seed(args.seed)
    stats = channel.estimate_latency(
        profile, args.trials, horizon, args.seed, workers=workers
    )
    doc = {
        "config": _resolved(
            args,
            "simulate",
            players=len(profile),
            trials=args.trials,
            horizon=horizon,
            seed=args.seed,
            workers=workers,
        ),
        "stats": stats.to_dict(),
    }
    csv_payload = None
    if args.out and args.format == "csv":
        rows = []
        for i, result in enumerate(
            channel.iter_trials(profile, args.trials, horizon, args.seed)
        ):
            for pid, t in enumerate(result.success_times):
                rows.append((i, pid, "" if t is None else t, int(t is not None)))
        csv_payload = (("trial", "player", "success_time", "finished"), rows)
    _emit(args, doc, csv_payload=csv_payload)
    return 0


def _cmd_scan_stationary(args) -> int:
    steps = int(round((args.stop - args.start) / args.step))
    grid = sorted({round(args.start + i * args.step, 12) for i in range(steps + 1)} | {2.0 / 3.0})
    points = deviations.stationary_equilibrium_scan(grid, tolerance=args.tolerance)
    indifferent = [p.p for p in points if p.verdict is deviations.Verdict.INDIFFERENT]
    doc = {
        "config": _resolved(
            args,
            "scan-stationary",
            start=args.start,
            stop=args.stop,
            step=args.step,
            tolerance=args.tolerance,
        ),
        "points": [
            {
                "p": pt.p,
                "baseline_latency": pt.baseline_latency,
                "best_deviation": pt.best_deviation,
                "best_latency": pt.best_latency,
                "max_gain": pt.max_gain,
                "verdict": pt.verdict.value,
            }
            for pt in points
        ],
        "indifferent_points": indifferent,
    }
    rows = [
        (repr(pt.p), repr(pt.baseline_latency), pt.best_deviation, repr(pt.best_latency), repr(pt.max_gain), pt.verdict.value)
        for pt in points
    ]
    _emit(args, doc, csv_payload=(("p", "baseline", "best_deviation", "best_latency", "max_gain", "verdict"), rows))
    return 0


def _cmd_prefix_check(args) -> int:
    base = _load_protocol(args.protocol) if args.protocol else protocols.make_two_player_equilibrium()
    prefix = _parse_prefix(args.prefix)
    _echo_seed(args.seed)
    try:
        report = deviations.check_prefix_indifference(
            base,
            prefix,
            n=args.players,
            method=args.method,
            trials=args.trials,
            horizon=args.horizon,
            base_seed=args.seed,
            workers=_resolve_workers(args.workers),
            require_consistent=not args.allow_inconsistent,
        )
    except ValueError as exc:
        raise CliError(str(exc)) from exc
    print(report.format_table(), file=sys.stderr)
    doc = {
        "config": _resolved(
            args,
            "prefix-check",
            prefix=list(prefix),
            players=args.players,
            method=args.method,
            trials=args.trials,
            seed=args.seed,
        ),
        "report": report.to_dict(),
    }
    _emit(args, doc)
    return 0


def _cmd_probe_blocking(args) -> int:
    spec = _load_protocol(args.protocol)
    _echo_seed(args.seed)
    report = deviations.blocking_slot_probe(
        spec,
        n=args.players,
        trials=args.trials,
        horizon=args.horizon,
        base_seed=args.seed,
        limit=args.limit,
    )
    print(report.format_table(), file=sys.stderr)
    doc = {
        "config": _resolved(
            args,
            "probe-blocking",
            players=args.players,
            trials=args.trials,
            seed=args.seed,
        ),
        "report": report.to_dict(),
    }
    _emit(args, doc)
    return 0


def _cmd_probe_backoff(args) -> int:
    spec = _load_protocol(args.protocol)
    _echo_seed(args.seed)
    report = deviations.backoff_zero_prefix_probe(
        spec,
        n=args.players,
        trials=args.trials,
        horizon=args.horizon,
        base_seed=args.seed,
    )
    print(report.format_table(), file=sys.stderr)
    doc = {
        "config": _resolved(
            args,
            "probe-backoff",
            players=args.players,
            trials=args.trials,
            seed=args.seed,
        ),
        "report": report.to_dict(),
    }
    _emit(args, doc)
    return 0


def _cmd_deadline_experiment(args) -> int:
    _echo_seed(args.seed)
    want_rows = bool(args.out and args.format == "csv")
    workers = _resolve_workers(args.workers)
    report = experiments.run_efficiency_experiment(
        args.n,
        args.beta,
        args.trials,
        seed=args.seed,
        workers=workers,
        collect_trials=want_rows,
    )
    doc = {
        "config": _resolved(
            args,
            "deadline-experiment",
            n=args.n,
            beta=args.beta,
            trials=args.trials,
            seed=args.seed,
            workers=workers,
        ),
        "report": report.to_dict(),
    }
    csv_payload = None
    if want_rows:
        header = ["trial", "finished", "max_latency"] + [
            f"pending_after_interval_{j}" for j in range(1, report.k + 2)
        ]
        rows = [
            [trial, int(finished), "" if finish is None else finish, *boundary]
            for trial, finished, finish, boundary in report.trial_rows
        ]
        csv_payload = (header, rows)
    _emit(args, doc, csv_payload=csv_payload)
    return 0


# --- parser wiring ---------------------------------------------------------


def _add_common(parser) -> None:
    parser.add_argument("--config", help="JSON file of defaults; flags override")
    parser.add_argument("--out", help="write results to this path")
    parser.add_argument("--format", choices=("json", "csv"), default="json")


def build_parser() -> _Parser:
    parser = _Parser(prog="contention", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("analyze-two-player", help="exact two-player chain analysis")
    p.add_argument("--grid-points", type=int, default=21)
    _add_common(p)
    p.set_defaults(func=_cmd_analyze_two_player)

    p = sub.add_parser("simulate", help="Monte Carlo latency estimate for a profile")
    p.add_argument("--players", "--n", type=int)
    p.add_argument("--protocol", help="protocol JSON (inline or file), same for all players")
    p.add_argument("--protocols", nargs="+", help="one protocol JSON per player")
    p.add_argument("--trials", type=int, default=10_000)
    p.add_argument("--horizon", type=int)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--workers", type=int, help="defaults to available parallelism")
    _add_common(p)
    p.set_defaults(func=_cmd_simulate)

    p = sub.add_parser("scan-stationary", help="deviation scan of the stationary family")
    p.add_argument("--start", type=float, default=0.05)
    p.add_argument("--stop", type=float, default=0.95)
    p.add_argument("--step", type=float, default=0.05)
    p.add_argument("--tolerance", type=float, default=1e-9)
    _add_common(p)
    p.set_defaults(func=_cmd_scan_stationary)

    p = sub.add_parser("prefix-check", help="indifference check for a consistent prefix")
    p.add_argument("--prefix", required=True, help="0/1 string, e.g. 011")
    p.add_argument("--protocol", help="base protocol JSON (default: two-player equilibrium)")
    p.add_argument("--players", "--n", type=int, default=2)
    p.add_argument("--method", choices=("analytic", "monte-carlo"), default="analytic")
    p.add_argument("--trials", type=int, default=100_000)
    p.add_argument("--horizon", type=int)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--workers", type=int, help="defaults to available parallelism")
    p.add_argument(
        "--allow-inconsistent",
        action="store_true",
        help="evaluate the deviation even when the prefix has probability 0 under the base",
    )
    _add_common(p)
    p.set_defaults(func=_cmd_prefix_check)

    p = sub.add_parser("probe-blocking", help="forced-slot deviation probe (age-based)")
    p.add_argument("--protocol", required=True)
    p.add_argument("--players", "--n", type=int, default=2)
    p.add_argument("--trials", type=int, default=100_000)
    p.add_argument("--horizon", type=int)
    p.add_argument("--limit", type=int)
    p.add_argument("--seed", type=int, default=0)
    _add_common(p)
    p.set_defaults(func=_cmd_probe_blocking)

    p = sub.add_parser("probe-backoff", help="quiet-prefix deviation probe (backoff)")
    p.add_argument("--protocol", required=True)
    p.add_argument("--players", "--n", type=int, default=2)
    p.add_argument("--trials", type=int, default=100_000)
    p.add_argument("--horizon", type=int)
    p.add_argument("--seed", type=int, default=0)
    _add_common(p)
    p.set_defaults(func=_cmd_probe_backoff)

    p = sub.add_parser("deadline-experiment", help="deadline-protocol efficiency run")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--beta", type=float, default=0.5)
    p.add_argument("--trials", type=int, default=10_000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--workers", type=int, help="defaults to available parallelism")
    _add_common(p)
    p.set_defaults(func=_cmd_deadline_experiment)

    return parser


def _merge_config(parser: _Parser, argv: list) -> argparse.Namespace:
    """Parse twice so explicit flags override config-file values."""
    first = parser.parse_args(argv)
    if not getattr(first, "config", None):
        return first
    try:
        with open(first.config) as handle:
            config = json.load(handle)
    except OSError as exc:
        raise CliError(f"cannot read config file {first.config!r}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise CliError(f"config file {first.config!r} is not valid JSON: {exc}") from exc
    if not isinstance(config, dict):
        raise CliError(f"config file {first.config!r} must hold a JSON object")
    subparser = None
    for action in parser._subparsers._group_actions:
        if isinstance(action, argparse._SubParsersAction):
            subparser = action.choices[first.command]
    known = {a.dest for a in subparser._actions}
    unknown = set(config) - known
    if unknown:
        raise CliError(f"config keys not understood by {first.command}: {sorted(unknown)}")
    subparser.set_defaults(**config)
    return parser.parse_args(argv)


def main(argv: Optional[list] = None) -> int:
    if argv is None:
        argv = sys.argv[1:]
    parser = build_parser()
    try:
        args = _merge_config(parser, list(argv))
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (ValueError, FileNotFoundError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except chains.InfiniteLatencyError as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # surface anything unexpected as a runtime failure
        print(f"runtime error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


def console_entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    console_entry()
