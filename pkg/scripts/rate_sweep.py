"""Rate sweep for the untrained split model: scale the latent and watch bpp and map agreement.

Without trained weights there is no ground truth, so distortion is reported as the share of
pixels where the distributed map (decoded from Q(r)) agrees with the in-car map (decoded from r).

    python scripts/rate_sweep.py [--gains 2 4 8 16 32 64] [--images 8] [--res 128x128]
"""

import argparse
import json

import numpy as np

from splitseg.models import DecoderConfig
from splitseg.pipeline import SplitModel


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--gains", type=float, nargs="+", default=[2, 4, 8, 16, 32, 64])
    ap.add_argument("--images", type=int, default=8)
    ap.add_argument("--res", default="128x128", help="HxW, multiples of 32")
    ap.add_argument("--classes", type=int, default=19)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--json", action="store_true", help="one JSON record per gain")
    args = ap.parse_args()
    h, w = (int(v) for v in args.res.split("x"))
    cfg = DecoderConfig.joint(num_classes=args.classes)
    rng = np.random.default_rng(args.seed)
    images = [rng.random((3, h, w), dtype=np.float32) for _ in range(args.images)]

    if not args.json:
        print(f"{'gain':>6}{'bpp':>9}{'payload bpp':>13}{'est bpp':>9}{'agreement':>11}")
    for gain in args.gains:
        model = SplitModel.build(cfg, seed=args.seed, latent_gain=gain)
        bpp, payload, est, agree = [], [], [], []
        for x in images:
            c = model.car_encode(x)
            s = c.stream
            bpp.append(8 * len(s) / (h * w))
            payload.append(8 * s.payload_bytes / (h * w))
            est.append(model.codec.estimate_bits(c) / (h * w))
            agree.append(float(np.mean(model.distributed(x)[2] == model.in_car(x)[1])))
        rec = {"gain": gain, "bpp": float(np.mean(bpp)), "payload_bpp": float(np.mean(payload)),
               "estimated_bpp": float(np.mean(est)), "agreement": float(np.mean(agree))}
        if args.json:
            print(json.dumps(rec))
        else:
            print(f"{gain:>6g}{rec['bpp']:>9.4f}{rec['payload_bpp']:>13.4f}"
                  f"{rec['estimated_bpp']:>9.4f}{rec['agreement']:>11.3f}")


if __name__ == "__main__":
    main()
