"""Interpolation-only baseline on a Chikusei cube (center crop 512, 128 patches, x2).

    python3 scripts/chikusei_baseline.py path/to/HyperspecVNIR_Chikusei_20140729.hdr

The cube itself is not distributed with this package.  The same measurement
runs as an acceptance test when HDLSR_CHIKUSEI points at the file.
"""
import argparse
from pathlib import Path

from hdlsr import data as D
from hdlsr.train import evaluate


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("cube", type=Path, help="ENVI header (.hdr) or HSC1 cube")
    ap.add_argument("--crop", type=int, default=512)
    ap.add_argument("--patch", type=int, default=128)
    ap.add_argument("--scale", type=int, default=2, choices=(2, 4, 8))
    args = ap.parse_args()
    pairs = D.prepare_pairs([("chikusei", D.load_cube(args.cube))], args.patch, args.scale, crop=args.crop)
    agg = evaluate(None, pairs).aggregate
    print(f"{len(pairs)} patches")
    for k, v in agg.items():
        print(f"{k}\t{v:.4f}")


if __name__ == "__main__":
    main()
