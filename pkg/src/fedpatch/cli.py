"""Command line entry point: ``fedpatch run|suite|report|validate``."""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import torch

from .config import PRESETS, ConfigValidationError
from .errors import ConfigurationError, FedPatchError
from .harness import load_configs, run_config, run_suite, with_seed
from .metrics import read_metrics, write_metrics
from .report import render_report

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2


def _seeds(text):
    return [int(s) for s in text.split(",") if s.strip()]


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=_seeds, default=None,
                        help="master seed, or a comma list to repeat each config per seed")
    common.add_argument("--out", default=None, help="output directory (default: experiment.output_dir)")
    common.add_argument("--preset", choices=sorted(PRESETS), default=None)
    common.add_argument("--threads", type=int, default=1, help="torch intra-op threads")
    common.add_argument("--set", dest="overrides", action="append", default=[], metavar="SECTION.KEY=VALUE",
                        help="override one config value (repeatable)")
    common.add_argument("-v", "--verbose", action="count", default=0)

    p = argparse.ArgumentParser(prog="fedpatch", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)
    r = sub.add_parser("run", parents=[common], help="run one or more config files")
    r.add_argument("configs", nargs="+", type=Path)
    s = sub.add_parser("suite", parents=[common], help="run every *.ini in a directory and write a report")
    s.add_argument("directory", type=Path)
    rep = sub.add_parser("report", parents=[common], help="render a markdown table from a metrics CSV")
    rep.add_argument("csv", type=Path)
    rep.add_argument("-o", "--output", type=Path, default=None)
    v = sub.add_parser("validate", parents=[common], help="check configs and print the resolved values")
    v.add_argument("configs", nargs="+", type=Path)
    return p


def _out_dir(args, cfg) -> Path:
    return Path(args.out) if args.out else Path(cfg.experiment.output_dir)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    torch.set_num_threads(max(1, args.threads))
    try:
        if args.command == "report":
            text = render_report(read_metrics(args.csv))
            if args.output:
                args.output.write_text(text)
            else:
                sys.stdout.write(text)
            return EXIT_OK
        paths = args.configs if args.command != "suite" else sorted(args.directory.glob("*.ini"))
        configs = load_configs(paths, args.preset, args.overrides)
        if args.command == "validate":
            for p, cfg in zip(paths, configs):
                print(f"# {p}\n{cfg.to_ini()}")
            return EXIT_OK
        if args.command == "suite":
            out = Path(args.out) if args.out else Path(configs[0].experiment.output_dir if configs else "runs")
            result = run_suite(configs, out, args.seed)
            for scenario, msg in result.failures:
                print(f"FAILED {scenario}: {msg}", file=sys.stderr)
            print(f"{len(result.rows)} runs written to {out}")
            return EXIT_RUNTIME if result.failures else EXIT_OK
        rows = []
        for cfg in configs:
            for seed in args.seed or [cfg.experiment.seed]:
                run_cfg = with_seed(cfg, seed)
                out = _out_dir(args, run_cfg)
                rl = run_config(run_cfg, out)
                rows.append(rl.final)
                print(f"{run_cfg.scenario_id}: MTA={rl.final.mta:.4f} BA={rl.final.ba:.4f} "
                      f"({rl.final.wall_time:.0f}s) -> {out / run_cfg.scenario_id}")
        if args.out:
            write_metrics(rows, Path(args.out) / "metrics.csv")
        return EXIT_OK
    except ConfigValidationError as exc:
        for e in exc.errors:
            print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except ConfigurationError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (FedPatchError, OSError) as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
