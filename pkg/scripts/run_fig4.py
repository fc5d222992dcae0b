"""Fixed-length runs at L = 5, 15 and 45 on Z96, followed by an analysis of the metrics.

    python scripts/run_fig4.py --out runs/fig4
"""

import argparse
import sys

from group_rlvr import cli


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--out", default="runs/fig4")
    parser.add_argument("--seed", type=int)
    args = parser.parse_args()
    extra = [] if args.seed is None else ["--seed", str(args.seed)]
    code = cli.main(["train", "--preset", "fig4", "--out", args.out, *extra])
    if code:
        return code
    return cli.main(["analyze", f"{args.out}/metrics.jsonl"])


if __name__ == "__main__":
    sys.exit(main())
