"""Command-line entry point: ``group-rlvr {gen,train,analyze,scan,verify}``.

Exit codes: 0 success, 2 configuration or input error, 3 verification
failure, 4 numeric instability.
"""

from __future__ import annotations

import os

# the thread cap has to reach the numerical libraries before they load
_cap = os.environ.get("GROUP_RLVR_THREADS", "")
if _cap.strip().isdigit() and int(_cap) > 0:
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ.setdefault(_var, _cap.strip())

import argparse  # noqa: E402
import sys  # noqa: E402
from dataclasses import replace  # noqa: E402

from .config import ExperimentConfig, load_config, preset  # noqa: E402
from .groups import GroupError  # noqa: E402
from .harness import (MetricsParseError, cmd_analyze, cmd_gen, cmd_scan, cmd_train,  # noqa: E402
                      thread_cap)
from .train import ConfigError, InstabilityError  # noqa: E402

EXIT_OK, EXIT_CONFIG, EXIT_VERIFY, EXIT_UNSTABLE = 0, 2, 3, 4


def _config(args) -> ExperimentConfig:
    base = preset(args.preset) if getattr(args, "preset", None) else ExperimentConfig()
    cfg = load_config(args.config, base) if getattr(args, "config", None) else base.validate()
    if getattr(args, "seed", None) is not None:
        cfg = replace(cfg, seed=args.seed)
    return cfg


def _out(args, cfg: ExperimentConfig) -> str:
    return args.out or cfg.out


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="group-rlvr", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, out=True):
        p.add_argument("--config", help="sectioned key = value config file")
        p.add_argument("--preset", choices=["fig4", "fig5a", "fig5b"], help="start from a bundled preset")
        p.add_argument("--seed", type=int, help="override the config seed")
        if out:
            p.add_argument("--out", help="output directory")

    p = sub.add_parser("gen", help="write an instance corpus")
    common(p)
    p.add_argument("--count", type=int, default=1000)

    p = sub.add_parser("train", help="run training and emit metrics, checkpoints and plots")
    common(p)
    p.add_argument("--quiet", action="store_true")

    p = sub.add_parser("analyze", help="phase timelines and regime labels from metrics files")
    p.add_argument("metrics", nargs="+")
    p.add_argument("--threshold", type=float, default=10.0)

    p = sub.add_parser("scan", help="reduced-dynamics runs over a grid of difficulty ratios")
    common(p)

    p = sub.add_parser("verify", help="run the invariant suites")
    p.add_argument("--level", choices=["fast", "full"], default="fast")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        thread_cap()
        if args.command == "gen":
            cfg = _config(args)
            path = cmd_gen(cfg, args.count, _out(args, cfg))
            print(path)
        elif args.command == "train":
            cfg = _config(args)
            log = None if args.quiet else (lambda msg: print(msg, flush=True))
            cmd_train(cfg, _out(args, cfg), log)
        elif args.command == "analyze":
            for analysis in cmd_analyze(args.metrics, args.threshold):
                print(analysis.text())
        elif args.command == "scan":
            cfg = _config(args)
            for rep in cmd_scan(cfg, _out(args, cfg)):
                print(rep.summary())
                print()
        elif args.command == "verify":
            from .verify import format_report, run_suite

            checks = run_suite(args.level, log=lambda c: print(c.line(), flush=True))
            print(format_report(checks))
            return EXIT_OK if all(c.passed for c in checks) else EXIT_VERIFY
    except (ConfigError, GroupError, MetricsParseError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except InstabilityError as exc:
        print(f"numeric instability: {exc}", file=sys.stderr)
        return EXIT_UNSTABLE
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
