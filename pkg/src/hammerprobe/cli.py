"""Command-line entry point: ``hammerprobe <command> [--config F] [--seed N] [--out DIR]``."""

from __future__ import annotations

import argparse
import logging
import sys

from .config import ConfigError, ExperimentConfig
from .experiments import (ExperimentError, cmd_aslr_demo, cmd_attack, cmd_classify, cmd_profile,
                          cmd_report)
from .profiler import PageClass


def _load(args) -> ExperimentConfig:
    cfg = ExperimentConfig.load(args.config) if args.config else ExperimentConfig()
    changes = {}
    if args.seed is not None:
        changes["seed"] = args.seed
    if args.out is not None:
        changes["out"] = args.out
    return cfg.replace(experiment=changes) if changes else cfg


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="hammerprobe", description=__doc__)
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)
    for name, help_ in [("profile", "synthesize DRAM, profile it and write density/profile CSVs"),
                        ("classify", "class counts from a profile store"),
                        ("attack", "full key-recovery pipeline"),
                        ("aslr-demo", "location-inference frequency under stack randomization"),
                        ("report", "summarize a run directory and check it")]:
        p = sub.add_parser(name, help=help_)
        p.add_argument("--config", help="INI experiment config")
        p.add_argument("--seed", type=int)
        p.add_argument("--out", help="output directory")
        if name == "attack":
            p.add_argument("--privileged-audit", action="store_true",
                           help="add ground-truth columns (real key bits, accuracy)")
        if name == "aslr-demo":
            p.add_argument("--sizes", type=lambda s: [int(x) for x in s.split(",")],
                           help="comma-separated variable sizes in bytes")
        if name in ("classify", "report"):
            p.add_argument("run_dir", nargs="?", help="directory with prior outputs (default: --out)")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _load(args)
        out = cfg.experiment.out
        if args.command == "profile":
            runs = cmd_profile(cfg, out)
            for label, run in runs.items():
                print(f"{label}: {len(run.flippy)} flippy pages in {run.area_mb:.2f} MB "
                      f"({run.density_per_mb:.2f}/MB)")
        elif args.command == "classify":
            table = cmd_classify(args.run_dir or out)
            for label, counts in table.items():
                print(f"{label}: " + "  ".join(f"{k.value} {counts[k]}" for k in PageClass))
        elif args.command == "attack":
            rep = cmd_attack(cfg, out, args.privileged_audit)
            rec = rep.recovered
            print(f"decoded {rec.n_decoded}/256 bits using {rec.pages_used} pages, "
                  f"{rec.bits_per_hour:.1f} bits/hour simulated")
            if args.privileged_audit:
                print(f"accuracy {rep.accuracy:.4f}")
        elif args.command == "aslr-demo":
            for n, f in cmd_aslr_demo(cfg, out, args.sizes).items():
                print(f"n={n}: {f:.4f} (expected {16 / n:.4f})")
        elif args.command == "report":
            text, ok = cmd_report(args.run_dir or out)
            print(text, end="")
            return 0 if ok else 1
    except (ConfigError, ExperimentError, OSError) as e:
        print(f"hammerprobe: error: {e}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
