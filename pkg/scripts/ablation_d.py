"""Cloud-side size and cost of CD+JD as the internal dimension d varies (F tied to d).

    python scripts/ablation_d.py [--dims 16 32 48 64 96] [--classes 150] [--res 512x512]
"""

import argparse

from splitseg.analysis import count_flops
from splitseg.models import DecoderConfig


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--dims", type=int, nargs="+", default=[16, 32, 48, 64, 96])
    ap.add_argument("--classes", type=int, default=150)
    ap.add_argument("--res", default="512x512", help="HxW")
    args = ap.parse_args()
    h, w = (int(v) for v in args.res.split("x"))

    print(f"{'d':>4}{'Mparams':>10}{'GFLOPs':>10}{'attention %':>13}")
    for d in args.dims:
        rep = count_flops(DecoderConfig.joint(d=d, num_classes=args.classes), h, w)
        attn = rep.total("self_attention") + rep.total("cross_attention")
        print(f"{d:>4}{rep.params / 1e6:>10.4f}{rep.macs / 1e9:>10.3f}{100 * attn / rep.macs:>12.1f}%")


if __name__ == "__main__":
    main()
