"""simctl: run, validate and summarize simulation scenarios.

Exit codes: 0 ok, 2 scenario validation failure, 3 I/O failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .errors import ParseError, ValidationError
from .reports import IoError, emit_reports, format_summary, summarize
from .scenario import load_scenario

EXIT_OK = 0
EXIT_INVALID = 2
EXIT_IO = 3

log = logging.getLogger("simctl")


def _load(path: str):
    """Scenario or an exit code. A missing file is an I/O failure, bad content a validation failure."""
    try:
        Path(path).read_bytes()
    except OSError as exc:
        print(f"error: cannot read {path}: {exc.strerror}", file=sys.stderr)
        return EXIT_IO
    try:
        return load_scenario(path)
    except ParseError as exc:
        print(f"invalid scenario: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except ValidationError as exc:
        print(f"invalid scenario {path}:", file=sys.stderr)
        for e in exc.errors:
            print(f"  - {e}", file=sys.stderr)
        return EXIT_INVALID


def cmd_validate(args) -> int:
    sc = _load(args.scenario)
    if isinstance(sc, int):
        return sc
    print(f"{args.scenario}: ok ({len(sc.rsus)} RSUs, {len(sc.vehicles)} vehicles, {len(sc.vrus)} VRUs, "
          f"seed {sc.seed})")
    return EXIT_OK


def cmd_run(args) -> int:
    from .sim import run  # deferred: validate and report do not need numpy-heavy imports

    sc = _load(args.scenario)
    if isinstance(sc, int):
        return sc
    if args.seed is not None and not 0 <= args.seed < 2**64:
        print("error: --seed must be an unsigned 64-bit integer", file=sys.stderr)
        return EXIT_INVALID
    if args.duration is not None and args.duration <= 0:
        print("error: --duration must be positive", file=sys.stderr)
        return EXIT_INVALID
    log.info("running %s (seed %s)", sc.name, sc.seed if args.seed is None else args.seed)
    metrics = run(sc, seed=args.seed, duration_s=args.duration)
    try:
        paths = emit_reports(metrics, args.out)
    except IoError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    print(f"wrote {len(paths)} files to {args.out} (run {metrics.run_id})")
    return EXIT_OK


def cmd_report(args) -> int:
    try:
        s = summarize(args.metrics_dir)
    except IoError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    sys.stdout.write(json.dumps(s, indent=2, sort_keys=True) + "\n" if args.json else format_summary(s))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="simctl", description="Vehicular network simulator")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="run a scenario and write report files")
    r.add_argument("scenario")
    r.add_argument("--out", required=True, help="output directory")
    r.add_argument("--seed", type=int, help="override the scenario seed")
    r.add_argument("--duration", type=float, help="simulated seconds (default: scenario duration)")
    r.set_defaults(fn=cmd_run)

    v = sub.add_parser("validate", help="check a scenario file and list every problem")
    v.add_argument("scenario")
    v.set_defaults(fn=cmd_validate)

    s = sub.add_parser("report", help="summarize a metrics directory")
    s.add_argument("metrics_dir")
    s.add_argument("--json", action="store_true", help="machine-readable output")
    s.set_defaults(fn=cmd_report)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())
