"""Mixed-length run over horizons 5, 15 and 45 on Z96, expected to hand off skills as a relay.

    python scripts/run_fig5a.py --out runs/fig5a
"""

import argparse
import sys

from group_rlvr import cli


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--out", default="runs/fig5a")
    parser.add_argument("--seed", type=int)
    args = parser.parse_args()
    extra = [] if args.seed is None else ["--seed", str(args.seed)]
    code = cli.main(["train", "--preset", "fig5a", "--out", args.out, *extra])
    if code:
        return code
    return cli.main(["analyze", f"{args.out}/metrics.jsonl"])


if __name__ == "__main__":
    sys.exit(main())
