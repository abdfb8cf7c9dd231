"""Command-line entry points: attack, defend, analyze, sweep, report.

Exit codes: 0 success, 2 config error, 3 stage failure, 4 missing artifact.
"""

from __future__ import annotations

import argparse
import csv
import sys
from pathlib import Path

from . import harness
from .config import parse_config
from .errors import (
    ConfigError,
    DimensionError,
    DivergenceError,
    DomainError,
    FormatError,
    MissingArtifactError,
)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_STAGE = 3
EXIT_MISSING = 4

_STAGE_ERRORS = (DivergenceError, DimensionError, DomainError, FormatError)


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="tsbd",
        description="Desk-scale backdoor attack and two-stage defense harness.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p):
        p.add_argument("--config", required=True, help="experiment config file")
        p.add_argument("--out", required=True, help="run directory for artifacts")
        p.add_argument("--seed", type=int, default=None, help="override experiment.seed")

    p_attack = sub.add_parser("attack", help="poison the corpus and train the models")
    add_common(p_attack)

    p_defend = sub.add_parser("defend", help="run the two-stage defense")
    add_common(p_defend)
    p_defend.add_argument("--variant", default=None, help="reinit variant: v1, v2 or v3")
    p_defend.add_argument("--no-ft", action="store_true", help="skip fine-tuning (epochs 0)")
    p_defend.add_argument(
        "--vanilla-ft", action="store_true", help="plain fine-tuning (alpha 0)"
    )
    p_defend.add_argument(
        "--per-layer-ranking",
        action="store_true",
        help="rank neurons within each layer instead of globally",
    )

    p_analyze = sub.add_parser("analyze", help="emit observation statistics")
    add_common(p_analyze)

    p_sweep = sub.add_parser("sweep", help="repeat the defense across one axis")
    add_common(p_sweep)
    p_sweep.add_argument("--axis", required=True, help=f"one of {', '.join(harness.SWEEP_AXES)}")
    p_sweep.add_argument("--values", required=True, help="comma-separated axis values")

    p_report = sub.add_parser("report", help="print collected report rows")
    p_report.add_argument("--out", required=True, help="run directory to summarize")
    return parser


def _load_config(args):
    cfg, raw = parse_config(args.config)
    if args.seed is not None:
        if args.seed < 0:
            raise ConfigError("--seed must be non-negative")
        cfg = cfg.with_overrides(seed=args.seed)
    return cfg, raw


def _cmd_attack(args) -> int:
    cfg, raw = _load_config(args)
    arts = harness.run_attack(cfg)
    harness.write_attack(arts, cfg, raw, args.out)
    print(f"attack: acc={arts.acc_before:.4f} asr={arts.asr_before:.4f} -> {args.out}")
    return EXIT_OK


def _cmd_defend(args) -> int:
    cfg, raw = _load_config(args)
    overrides = {}
    if args.variant is not None:
        if args.variant.lower() not in ("v1", "v2", "v3"):
            raise ConfigError(f"--variant must be v1, v2 or v3, got {args.variant!r}")
        overrides["variant"] = args.variant.lower()
    if args.no_ft:
        overrides["ft_epochs"] = 0
    if args.vanilla_ft:
        overrides["ft_alpha"] = 0.0
    if args.per_layer_ranking:
        overrides["per_layer"] = True
    if overrides:
        cfg = cfg.with_overrides(**overrides)

    train_set, test_set, backdoored, _ = harness.load_attack(args.out)
    outcome = harness.run_defense(cfg, train_set, test_set, backdoored, out_dir=args.out)
    harness.write_defense(outcome, cfg, raw, args.out)
    r = outcome.report
    print(
        f"defend: acc {r.acc_before:.4f}->{r.acc_after:.4f} "
        f"asr {r.asr_before:.4f}->{r.asr_after:.4f} der={r.der:.4f}"
    )
    return EXIT_OK


def _cmd_analyze(args) -> int:
    cfg, raw = _load_config(args)
    train_set, test_set, backdoored, clean_model = harness.load_attack(args.out)
    tables = harness.run_analysis(cfg, train_set, test_set, backdoored, clean_model)
    harness.write_analysis(tables, cfg, raw, args.out)
    scope, r, n = tables.observation1_summary[0]
    mean_bd, mean_clean = tables.activeness_summary[0]
    print(f"analyze: nwc pearson({scope})={r:.4f} over {n} neurons")
    print(f"analyze: activeness backdoored={mean_bd:.6f} clean={mean_clean:.6f}")
    return EXIT_OK


def _cmd_sweep(args) -> int:
    cfg, raw = _load_config(args)
    if args.axis not in harness.SWEEP_AXES:
        raise ConfigError(f"--axis must be one of {', '.join(harness.SWEEP_AXES)}")
    try:
        values = [float(v) for v in args.values.split(",") if v.strip()]
    except ValueError as exc:
        raise ConfigError(f"--values: {exc}") from exc
    if not values:
        raise ConfigError("--values must list at least one number")
    rows = harness.run_sweep(cfg, raw, args.axis, values)
    harness.write_sweep(rows, cfg, raw, args.out)
    print(f"sweep: {len(rows)} runs over {args.axis} -> {args.out}")
    return EXIT_OK


def _cmd_report(args) -> int:
    out = Path(args.out)
    if not out.is_dir():
        raise MissingArtifactError(f"run directory not found: {out}")
    names = ["baseline.csv", "report.csv", "sweep.csv"]
    found = [n for n in names if (out / n).exists()]
    if not found:
        raise MissingArtifactError(f"no report rows under {out}")
    for name in found:
        with open(out / name, newline="") as fh:
            rows = list(csv.reader(fh))
        widths = [max(len(r[i]) for r in rows) for i in range(len(rows[0]))]
        print(f"== {name}")
        for row in rows:
            print("  ".join(v.ljust(w) for v, w in zip(row, widths)).rstrip())
    return EXIT_OK


_COMMANDS = {
    "attack": _cmd_attack,
    "defend": _cmd_defend,
    "analyze": _cmd_analyze,
    "sweep": _cmd_sweep,
    "report": _cmd_report,
}


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except MissingArtifactError as exc:
        print(f"missing artifact: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except _STAGE_ERRORS as exc:
        print(f"stage failure [{args.command}]: {exc}", file=sys.stderr)
        return EXIT_STAGE


if __name__ == "__main__":
    sys.exit(main())
