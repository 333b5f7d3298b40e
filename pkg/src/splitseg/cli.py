"""Command line entry point: ``splitseg <command> ...``.

Exit codes: 0 ok, 2 usage, 3 I/O, 4 protocol, 5 verification failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .analysis import SCOPES, count_flops, decoder_comparison
from .codec import DecodeError, quantize
from .images import load_image, save_segmap
from .models import ConfigError, DecoderConfig
from .pipeline import TOPOLOGIES, SplitModel, check_image
from .tensor import load_tensor, save_tensor
from .transport import ADDR_ENV, SegServer, SessionConfig, TransportError, parse_addr, run_client

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_PROTOCOL, EXIT_VERIFY = 0, 2, 3, 4, 5
SEED_ENV = "SPLITSEG_SEED"
RATE_SLACK = 1.02
RATE_SLACK_BITS = 512

log = logging.getLogger("splitseg")


class UsageError(Exception):
    pass


class InputError(Exception):
    pass


class VerificationError(Exception):
    pass


def _emit(obj) -> None:
    print(json.dumps(obj, indent=2, sort_keys=True))


def _read(loader, path, what):
    try:
        return loader(path)
    except OSError as exc:
        raise InputError(f"cannot read {what} {path}: {exc.strerror or exc}") from None
    except ValueError as exc:
        raise InputError(f"invalid {what} {path}: {exc}") from None


def _write(writer, path, *args):
    try:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        writer(path, *args)
    except OSError as exc:
        raise InputError(f"cannot write {path}: {exc.strerror or exc}") from None


def _seed(args) -> int:
    if args.seed is not None:
        return args.seed
    raw = os.environ.get(SEED_ENV, "0")
    try:
        return int(raw)
    except ValueError:
        raise UsageError(f"{SEED_ENV}={raw!r} is not an integer") from None


def _res(text: str) -> tuple[int, int]:
    """'HxW' -> (H, W)."""
    try:
        h, w = (int(v) for v in text.lower().split("x"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected HxW, got {text!r}") from None
    if h <= 0 or w <= 0:
        raise argparse.ArgumentTypeError(f"resolution must be positive, got {text!r}")
    return h, w


def _config(args) -> DecoderConfig:
    """Key-value config file (if any) overridden by explicit flags."""
    text = ""
    if getattr(args, "config", None):
        text = _read(lambda p: Path(p).read_text(), args.config, "config file")
    variant = getattr(args, "variant", None)
    d = getattr(args, "dim", None)
    if variant in ("d", "baseline") and d is None:
        d = 256
    overrides = {"variant": variant, "d": d, "num_classes": getattr(args, "classes", None)}
    if variant in ("d", "baseline"):
        overrides["k"] = 4
    elif variant in ("jd", "joint"):
        overrides["k"] = 8
    if not text and variant is None:
        overrides["variant"] = "jd"
    try:
        return DecoderConfig.from_text(text, **overrides)
    except (ConfigError, TypeError) as exc:
        raise UsageError(f"invalid configuration: {exc}") from None


def _model(args) -> SplitModel:
    if getattr(args, "weights", None):
        return _read(SplitModel.load, args.weights, "weight file")
    return SplitModel.build(_config(args), seed=_seed(args))


# -- commands -----------------------------------------------------------------------

def cmd_build(args) -> int:
    model = SplitModel.build(_config(args), seed=_seed(args))
    _write(lambda p: model.save(p), args.out)
    _emit({"weights": str(args.out), "variant": model.config.variant,
           "params": model.params.trainable_count(), "model_id": model.codec.model_id})
    return EXIT_OK


def cmd_inspect(args) -> int:
    model = _model(args)
    cfg = model.config
    _emit({
        "config": {k: getattr(cfg, k) for k in ("variant", "d", "k", "channels", "groups", "num_classes")},
        "trainable_params": model.params.trainable_count(),
        "decoder_params": count_flops(cfg, 512, 512, "decoder").params,
        "cloud_params": count_flops(cfg, 512, 512, "cloud").params,
        "model_id": model.codec.model_id,
        "entries": len(model.params),
    })
    return EXIT_OK


def cmd_analyze(args) -> int:
    h, w = args.res
    if h % 32 or w % 32:
        raise UsageError(f"resolution {h}x{w} is not a multiple of 32")
    if args.compare:
        reports = decoder_comparison(h, w, num_classes=_config(args).num_classes, d=args.dim or 48)
        rows = [{"model": r.label, "resolution": f"{h}x{w}", "gflops": r.macs / 1e9,
                 "mparams": r.params / 1e6} for r in reports]
        if args.out:
            lines = ["model,resolution,gflops,mparams"]
            lines += [f"{r['model']},{r['resolution']},{r['gflops']:.3f},{r['mparams']:.5f}" for r in rows]
            _write(lambda p: Path(p).with_suffix(".csv").write_text("\n".join(lines) + "\n"), args.out)
            _write(lambda p: Path(p).with_suffix(".json").write_text(
                json.dumps([r.to_dict() for r in reports], indent=2)), args.out)
        _emit(rows)
        return EXIT_OK
    report = count_flops(_config(args), h, w, args.scope)
    if args.out:
        _write(lambda p: Path(p).with_suffix(".csv").write_text(report.to_csv()), args.out)
        _write(lambda p: Path(p).with_suffix(".json").write_text(report.to_json()), args.out)
    _emit({"model": report.label, "resolution": f"{h}x{w}", "scope": args.scope,
           "params": report.params, "macs": report.macs,
           "gflops": report.macs / 1e9, "mparams": report.params / 1e6})
    return EXIT_OK


def _latent_input(args, model: SplitModel) -> np.ndarray:
    if args.input:
        r = _read(load_tensor, args.input, "tensor")
    else:
        f = model.config.channels
        h, w = args.shape or (4, 4)
        rng = np.random.default_rng(_seed(args))
        r = (rng.standard_normal((f, h, w)) * args.scale).astype(np.float32)
    if r.ndim != 3:
        raise UsageError(f"latent tensor must be rank 3 (F, h, w), got {r.shape}")
    return r


def _rate_record(model: SplitModel, c) -> dict:
    s = c.stream
    pixels = s.height * s.width
    est = model.codec.estimate_bits(c)
    return {"bytes": len(s), "header_bytes": s.header_bytes, "payload_bytes": s.payload_bytes,
            "bpp": 8 * len(s) / pixels, "payload_bpp": 8 * s.payload_bytes / pixels,
            "estimated_bpp": est / pixels, "estimated_bits": est}


def cmd_encode(args) -> int:
    model = _model(args)
    r = _latent_input(args, model)
    try:
        c = model.codec.compress(r, image_size=args.image)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    _write(lambda p: Path(p).write_bytes(c.stream.to_bytes()), args.out)
    _emit(_rate_record(model, c))
    return EXIT_OK


def cmd_decode(args) -> int:
    model = _model(args)
    raw = _read(lambda p: Path(p).read_bytes(), args.input, "bitstream")
    r_hat = model.codec.decode(raw)
    _write(save_tensor, args.out, r_hat.astype(np.float32))
    _emit({"shape": list(r_hat.shape), "bytes": len(raw)})
    return EXIT_OK


def cmd_roundtrip(args) -> int:
    model = _model(args)
    r = _latent_input(args, model)
    try:
        c = model.codec.compress(r, image_size=args.image)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    raw = c.stream.to_bytes()
    if args.out:
        _write(lambda p: Path(p).write_bytes(raw), args.out)
    r_hat = model.codec.decode(raw)
    rec = _rate_record(model, c)
    rec["lossless"] = bool(np.array_equal(r_hat, quantize(r)))
    measured = 8 * c.stream.payload_bytes
    rec["rate_within_bound"] = bool(
        rec["estimated_bits"] <= measured <= rec["estimated_bits"] * RATE_SLACK + RATE_SLACK_BITS)
    _emit(rec)
    if not rec["lossless"]:
        raise VerificationError("decoded latent differs from the quantized input")
    if not rec["rate_within_bound"]:
        raise VerificationError(f"measured {measured} bits outside [{rec['estimated_bits']:.1f}, "
                                f"{rec['estimated_bits']:.1f}*{RATE_SLACK} + {RATE_SLACK_BITS}]")
    return EXIT_OK


def cmd_segment(args) -> int:
    model = _model(args)
    x = _read(load_image, args.image, "image")
    cfg = SessionConfig(args.topology, addr=args.addr, include_header=not args.payload_only)
    if cfg.distributed:
        try:
            cfg.endpoint
        except ValueError as exc:
            raise UsageError(str(exc)) from None
    try:
        stats, m = run_client(cfg, x, model)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    _write(save_segmap, args.out, m)
    record = {"topology": args.topology, "map": str(args.out), **stats.to_dict()}
    if args.stats:
        _write(lambda p: Path(p).write_text(json.dumps(record, indent=2) + "\n"), args.stats)
    _emit(record)
    return EXIT_OK


def cmd_serve(args) -> int:
    model = _model(args)
    addr = args.addr or os.environ.get(ADDR_ENV, "127.0.0.1:5051")
    try:
        endpoint = parse_addr(addr)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    try:
        server = SegServer(model, endpoint)
    except OSError as exc:
        raise InputError(f"cannot bind {addr}: {exc.strerror or exc}") from None
    host, port = server.address
    print(f"serving {model.config.variant} on {host}:{port}", flush=True)
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        server.close()
    return EXIT_OK


def cmd_bench(args) -> int:
    h, w = args.res
    cfg = _config(args)
    model = SplitModel.build(cfg, seed=_seed(args))
    topology = args.topology or ("in-car-jd" if cfg.is_joint else "in-car-baseline")
    if not model.supports(topology):
        raise UsageError(f"variant {cfg.variant} cannot run topology {topology}")
    x = np.random.default_rng(_seed(args)).random((3, h, w), dtype=np.float32)
    try:
        check_image(x)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    for i in range(args.iters):
        t0 = time.perf_counter()
        if topology.startswith("in-car"):
            model.in_car(x)
            nbytes = 0
        else:
            stream, _, _ = model.distributed(x)
            nbytes = len(stream)
        dt = time.perf_counter() - t0
        print(json.dumps({"iter": i, "topology": topology, "resolution": f"{h}x{w}",
                          "seconds": dt, "fps": 1.0 / dt, "bytes": nbytes}), flush=True)
    return EXIT_OK


# -- parser ---------------------------------------------------------------------------

def _model_flags(p: argparse.ArgumentParser, weights: bool = True) -> None:
    if weights:
        p.add_argument("--weights", help="SSJD weight container (otherwise built from the config and seed)")
    p.add_argument("--config", help="key = value file with DecoderConfig fields")
    p.add_argument("--variant", choices=("d", "jd", "baseline", "joint"))
    p.add_argument("--dim", type=int, help="internal dimension d")
    p.add_argument("--classes", type=int, help="number of classes S")
    p.add_argument("--seed", type=int, help=f"initialization seed (default ${SEED_ENV} or 0)")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="splitseg", description="Split car/cloud semantic segmentation toolkit.")
    ap.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("build", help="initialize a model and write its weight container")
    _model_flags(p, weights=False)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_build)

    p = sub.add_parser("inspect", help="summarize a weight container")
    _model_flags(p)
    p.set_defaults(func=cmd_inspect)

    p = sub.add_parser("analyze", help="parameter and MAC census")
    _model_flags(p, weights=False)
    p.add_argument("--res", type=_res, required=True, help="input resolution HxW")
    p.add_argument("--scope", choices=SCOPES, default="cloud")
    p.add_argument("--compare", action="store_true", help="baseline vs. joint decoder comparison")
    p.add_argument("--out", help="output prefix; writes PREFIX.csv and PREFIX.json")
    p.set_defaults(func=cmd_analyze)

    for name, func, helptext in (("encode", cmd_encode, "latent tensor -> bitstream"),
                                 ("roundtrip", cmd_roundtrip, "encode, decode and verify")):
        p = sub.add_parser(name, help=helptext)
        _model_flags(p)
        p.add_argument("--in", dest="input", help="SSTN latent tensor (otherwise random from --seed)")
        p.add_argument("--shape", type=_res, help="random latent grid hxw (default 4x4)")
        p.add_argument("--scale", type=float, default=4.0, help="std of the random latent")
        p.add_argument("--image", type=_res, help="image size HxW recorded in the header (default 8h x 8w)")
        p.add_argument("--out", required=name == "encode")
        p.set_defaults(func=func)

    p = sub.add_parser("decode", help="bitstream -> quantized latent tensor")
    _model_flags(p)
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_decode)

    p = sub.add_parser("segment", help="segment one image under a deployment topology")
    _model_flags(p)
    p.add_argument("--topology", choices=TOPOLOGIES, required=True)
    p.add_argument("--image", required=True, help="binary PPM/PGM image")
    p.add_argument("--addr", help=f"cloud HOST:PORT (default ${ADDR_ENV})")
    p.add_argument("--out", default="segmap.ssmp")
    p.add_argument("--stats", help="write ChannelStats JSON here")
    p.add_argument("--payload-only", action="store_true", help="exclude the header from bpp")
    p.set_defaults(func=cmd_segment)

    p = sub.add_parser("serve", help="run the cloud endpoint")
    _model_flags(p)
    p.add_argument("--addr", help=f"listen HOST:PORT (default ${ADDR_ENV})")
    p.set_defaults(func=cmd_serve)

    p = sub.add_parser("bench", help="wall-clock timing (informational)")
    _model_flags(p, weights=False)
    p.add_argument("--res", type=_res, default=(512, 512))
    p.add_argument("--iters", type=int, default=3)
    p.add_argument("--topology", choices=TOPOLOGIES)
    p.set_defaults(func=cmd_bench)
    return ap


def main(argv: list[str] | None = None) -> int:
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"splitseg: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except InputError as exc:
        print(f"splitseg: error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (DecodeError, TransportError) as exc:
        print(f"splitseg: protocol error: {exc}", file=sys.stderr)
        return EXIT_PROTOCOL
    except VerificationError as exc:
        print(f"splitseg: verification failed: {exc}", file=sys.stderr)
        return EXIT_VERIFY
    except OSError as exc:
        print(f"splitseg: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
