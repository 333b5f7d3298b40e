"""Baseline (CD+FD+D) vs. joint (CD+JD) cloud-side cost at the two evaluation resolutions.

    python scripts/compare_decoders.py [--out results/decoders]
"""

import argparse
import json
from pathlib import Path

from splitseg.analysis import decoder_comparison

SETTINGS = (((512, 512), 150), ((1024, 2048), 19))


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--dim", type=int, default=48)
    ap.add_argument("--out", help="write PREFIX.json")
    args = ap.parse_args()

    rows = []
    print(f"{'model':<28}{'resolution':>12}{'classes':>9}{'GFLOPs':>12}{'Mparams':>10}")
    for (h, w), s in SETTINGS:
        for rep in decoder_comparison(h, w, num_classes=s, d=args.dim):
            row = {"model": rep.label, "resolution": f"{w}x{h}", "classes": s,
                   "gflops": rep.macs / 1e9, "mparams": rep.params / 1e6}
            rows.append(row)
            print(f"{row['model']:<28}{row['resolution']:>12}{s:>9}{row['gflops']:>12.2f}{row['mparams']:>10.4f}")
        base, jd = rows[-2], rows[-1]
        print(f"{'':<28}{'reduction':>12}{'':>9}{base['gflops'] / jd['gflops']:>11.1f}x")
    if args.out:
        path = Path(args.out).with_suffix(".json")
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(rows, indent=2) + "\n")


if __name__ == "__main__":
    main()
