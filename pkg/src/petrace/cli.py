"""Command line: ``petrace run``, ``petrace attack`` and ``petrace gen-trace``."""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .config import ConfigError, SimConfig, load_config
from .sim.attacks import attack_linkability, attack_one_entry, attack_replay
from .sim.harness import run
from .sim.trace import TraceError, generate_trace, load_trace

ATTACKS = {"replay": attack_replay, "one-entry": attack_one_entry,
           "linkability": attack_linkability}


def _parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="petrace")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="simulate a contact trace end to end")
    p.add_argument("--trace", required=True, type=Path)
    p.add_argument("--config", type=Path)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--mode", choices=("stateful", "stateless"), default="stateful")
    p.add_argument("--report", type=Path, help="JSON report; a .tsv table is written beside it")
    p.add_argument("--parallel", action="store_true")
    p.add_argument("--rsa-bits", type=int, default=1024)

    a = sub.add_parser("attack", help="run an adversarial scenario")
    a.add_argument("--name", required=True, choices=sorted(ATTACKS))
    a.add_argument("--trace", required=True, type=Path)
    a.add_argument("--config", type=Path)
    a.add_argument("--seed", type=int, default=0)
    a.add_argument("--report", type=Path)
    a.add_argument("--rsa-bits", type=int, default=1024)

    g = sub.add_parser("gen-trace", help="write a synthetic contact trace")
    g.add_argument("--population", type=int, default=50)
    g.add_argument("--days", type=int, default=14)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--diagnosed", type=int, default=5)
    g.add_argument("--diagnosis-day", type=int,
                   help="day of the diagnoses (default: five sevenths into the horizon)")
    g.add_argument("--out", required=True, type=Path)
    return parser


def _config(path: Path | None) -> SimConfig:
    return load_config(path) if path else SimConfig()


def main(argv: list[str] | None = None) -> int:
    args = _parser().parse_args(argv)
    try:
        if args.command == "gen-trace":
            day = args.diagnosis_day
            if day is None:
                day = max(1, args.days * 5 // 7)
            trace = generate_trace(population=args.population, days=args.days,
                                   seed=args.seed, n_diagnosed=args.diagnosed,
                                   diagnosis_day=day)
            args.out.write_text(trace.dumps())
            return 0
        trace = load_trace(args.trace)
        config = _config(args.config)
    except (TraceError, ConfigError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2

    if args.command == "run":
        report = run(trace, config, args.seed, args.mode, parallel=args.parallel,
                     rsa_bits=args.rsa_bits)
        if args.report:
            args.report.write_text(report.to_json())
            args.report.with_suffix(".tsv").write_text(report.to_table())
        print(report.summary(), end="")
        return 0 if report.all_passed else 1

    verdict = ATTACKS[args.name](trace, config, args.seed, rsa_bits=args.rsa_bits)
    text = json.dumps({verdict.name: verdict.to_dict()}, sort_keys=True, indent=2)
    if args.report:
        args.report.write_text(text + "\n")
    print(text)
    print(f"[{verdict.verdict}] {verdict.name}")
    return 0 if verdict.passed else 1


if __name__ == "__main__":
    sys.exit(main())
