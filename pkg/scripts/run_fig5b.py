"""Mixed-length run over horizons 5 and 35 on Z96, expected to stall on a long plateau.

    python scripts/run_fig5b.py --out runs/fig5b
"""

import argparse
import sys

from group_rlvr import cli


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--out", default="runs/fig5b")
    parser.add_argument("--seed", type=int)
    args = parser.parse_args()
    extra = [] if args.seed is None else ["--seed", str(args.seed)]
    code = cli.main(["train", "--preset", "fig5b", "--out", args.out, *extra])
    if code:
        return code
    return cli.main(["analyze", f"{args.out}/metrics.jsonl"])


if __name__ == "__main__":
    sys.exit(main())
