"""Command-line driver.

    epibandit run CONFIG [--seeds 1,2,3] [--out DIR] [--parallel N]
    epibandit compare CONFIG [CONFIG ...] --out DIR
    epibandit validate CONFIG

``--seeds`` accepts a comma list and ``a-b`` ranges, e.g. ``1-20`` or ``1,4,7-9``.
Exit status is 0 on success, 1 when validation reports findings and 2 on
configuration or I/O errors.
"""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from typing import Optional, Sequence

from . import experiment as ex
from .errors import BanditError, ConfigError
from .metrics import aggregate

log = logging.getLogger("epibandit")


def parse_seeds(text: str) -> tuple:
    seeds = []
    for part in text.split(","):
        part = part.strip()
        if not part:
            continue
        lo, sep, hi = part.partition("-")
        try:
            if sep:
                seeds.extend(range(int(lo), int(hi) + 1))
            else:
                seeds.append(int(part))
        except ValueError:
            raise argparse.ArgumentTypeError(f"bad seed list {text!r}") from None
    if not seeds:
        raise argparse.ArgumentTypeError("empty seed list")
    return tuple(seeds)


def _apply_overrides(cfg: ex.ExperimentConfig, args) -> ex.ExperimentConfig:
    changes = {}
    if args.seeds is not None:
        changes["seeds"] = args.seeds
    if getattr(args, "out", None) is not None:
        changes["output_dir"] = args.out
    if args.parallel is not None:
        changes["parallelism"] = args.parallel
    cfg = replace(cfg, **changes)
    ex._check_fields(cfg)
    return cfg


def _report(label: str, results) -> None:
    finals = [r.trace.final for r in results]
    if len(finals) >= 2:
        mean, se = aggregate(finals)
        print(f"{label}: final average regret {mean:.4f} +/- {se:.4f} over {len(finals)} seeds")
    else:
        print(f"{label}: final average regret {finals[0]:.4f} (seed {results[0].seed})")


def cmd_validate(args) -> int:
    cfg = _apply_overrides(ex.load_config(args.config), args)
    findings = ex.validate(cfg)
    for f in findings:
        print(f)
    if not findings:
        print("ok")
    return 1 if findings else 0


def cmd_run(args) -> int:
    cfg = _apply_overrides(ex.load_config(args.config), args)
    findings = ex.validate(cfg)
    if findings:
        for f in findings:
            print(f, file=sys.stderr)
        return 1
    results = ex.run(cfg)
    _report(cfg.label, results)
    print(f"wrote {cfg.output_dir}")
    return 0


def cmd_compare(args) -> int:
    configs = [_apply_overrides(ex.load_config(p), args) for p in args.configs]
    for cfg in configs:
        findings = ex.validate(cfg)
        if findings:
            for f in findings:
                print(f"{cfg.label}: {f}", file=sys.stderr)
            return 1
    out = args.out if args.out is not None else configs[0].output_dir
    all_results = ex.compare(configs, out)
    for label, results in all_results.items():
        _report(label, results)
    print(f"wrote {out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="epibandit", description="Batch contextual-bandit experiments.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def overrides(p, out=True):
        p.add_argument("--seeds", type=parse_seeds, help="seed list, e.g. 1-20 or 1,3,5")
        if out:
            p.add_argument("--out", help="output directory")
        p.add_argument("--parallel", type=int, help="worker processes (0 or 1 runs serially)")

    p = sub.add_parser("run", help="run one config over its seeds")
    p.add_argument("config")
    overrides(p)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("compare", help="run several policies and write combined tables")
    p.add_argument("configs", nargs="+")
    overrides(p)
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("validate", help="check a config without running it")
    p.add_argument("config")
    overrides(p, out=False)
    p.set_defaults(func=cmd_validate)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (BanditError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
