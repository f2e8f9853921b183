"""Trainable-parameter count against feature width for a given band count.

    python3 scripts/param_budget.py [--bands 102] [--blocks 3]

Marks the widths whose totals fall inside the 0.30M to 0.36M budget.
"""
import argparse

from hdlsr.model import ModelConfig, param_count


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--bands", type=int, default=102)
    ap.add_argument("--blocks", type=int, default=3)
    ap.add_argument("--widths", type=int, nargs="+", default=list(range(32, 81, 4)))
    args = ap.parse_args()
    print("width\tparams\tin_budget")
    for f in args.widths:
        n = param_count(ModelConfig(bands=args.bands, width=f, num_residual_blocks=args.blocks))
        print(f"{f}\t{n}\t{'yes' if 300_000 <= n <= 360_000 else ''}")


if __name__ == "__main__":
    main()
