"""Sweep the difficulty ratio with the reduced dynamics and label each run.

Writes scan.csv, one timeline CSV per ratio and a plateau chart.

    python scripts/run_scan.py --ratios 2 3 5 7 9 --out runs/scan
"""

import argparse
import sys
from pathlib import Path

from group_rlvr import cli

TEMPLATE = """[experiment]
group = {group}
C_B = {C_B}
dpos = 64
trainer = reduced-dynamics

[lengths]
L1 = {L1}
L_max = {L_max}

[dynamics]
lr = {lr}
steps = {steps}
q0 = 0
ratios = {ratios}
"""


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--ratios", type=float, nargs="+", default=[2, 3, 5, 7, 9])
    parser.add_argument("--group", default="D48")
    parser.add_argument("--C-B", dest="C_B", type=float, default=3.0)
    parser.add_argument("--L1", type=int, default=5)
    parser.add_argument("--L-max", dest="L_max", type=int, default=45)
    parser.add_argument("--lr", type=float, default=500.0)
    parser.add_argument("--steps", type=int, default=8000)
    parser.add_argument("--out", default="runs/scan")
    args = parser.parse_args()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    config = out / "scan.ini"
    config.write_text(TEMPLATE.format(group=args.group, C_B=args.C_B, L1=args.L1, L_max=args.L_max, lr=args.lr, steps=args.steps,
                                      ratios=", ".join(str(r) for r in args.ratios)))
    return cli.main(["scan", "--config", str(config), "--out", str(out)])


if __name__ == "__main__":
    sys.exit(main())
