"""Parameter / MAC accounting and evaluation metrics.

FLOPs are reported under the MAC convention: one multiply-accumulate counts
as one FLOP. Batchnorm, ReLU, softmax and additions are not counted;
batchnorm contributes two trainable parameters per channel.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .models import DecoderConfig, SegModel

SCOPES = ("decoder", "cloud")


@dataclass(frozen=True)
class LayerCost:
    name: str
    kind: str
    params: int
    macs: int


@dataclass
class CostReport:
    entries: list[LayerCost] = field(default_factory=list)
    resolution: tuple[int, int] | None = None
    label: str = ""

    @property
    def params(self) -> int:
        return sum(e.params for e in self.entries)

    @property
    def macs(self) -> int:
        return sum(e.macs for e in self.entries)

    def total(self, kind: str) -> int:
        return sum(e.macs for e in self.entries if e.kind == kind)

    def select(self, prefix: str) -> list[LayerCost]:
        return [e for e in self.entries if e.name.startswith(prefix)]

    def to_dict(self) -> dict:
        return {
            "label": self.label,
            "resolution": list(self.resolution) if self.resolution else None,
            "entries": [asdict(e) for e in self.entries],
            "total_params": self.params,
            "total_macs": self.macs,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CostReport":
        res = tuple(d["resolution"]) if d.get("resolution") else None
        rep = cls([LayerCost(**e) for e in d["entries"]], res, d.get("label", ""))
        if rep.params != d.get("total_params", rep.params) or rep.macs != d.get("total_macs", rep.macs):
            raise ValueError("totals do not match the sum of entries")
        return rep

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    @classmethod
    def from_json(cls, text: str) -> "CostReport":
        return cls.from_dict(json.loads(text))

    def to_csv(self) -> str:
        buf = io.StringIO()
        res = "x".join(map(str, self.resolution)) if self.resolution else ""
        buf.write(f"# label={self.label}\n# resolution={res}\n")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["name", "kind", "params", "macs"])
        for e in self.entries:
            w.writerow([e.name, e.kind, e.params, e.macs])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "CostReport":
        meta, rows = {}, []
        for line in text.splitlines():
            if line.startswith("#"):
                k, _, v = line[1:].strip().partition("=")
                meta[k] = v
            elif line:
                rows.append(line)
        reader = csv.DictReader(rows)
        entries = [LayerCost(r["name"], r["kind"], int(r["params"]), int(r["macs"])) for r in reader]
        res = tuple(int(v) for v in meta["resolution"].split("x")) if meta.get("resolution") else None
        return cls(entries, res, meta.get("label", ""))


class _Census:
    """Accumulates analytic per-layer costs."""

    def __init__(self):
        self.entries: list[LayerCost] = []

    def add(self, name, kind, params=0, macs=0):
        self.entries.append(LayerCost(name, kind, int(params), int(macs)))

    def conv(self, name, cin, cout, k, hw, *, stride=1, groups=1, transposed=False, bias=True):
        params = cout * (cin // groups) * k * k + (cout if bias else 0)
        h, w = hw
        if transposed:
            macs = h * w * cin * (cout // groups) * k * k
            out = (h * stride, w * stride)
        else:
            out = (math.ceil(h / stride), math.ceil(w / stride))
            macs = out[0] * out[1] * cout * (cin // groups) * k * k
        self.add(name, "conv", params, macs)
        return out

    def bn(self, name, c):
        self.add(name, "bn", 2 * c, 0)

    def fc(self, name, rows, din, dout):
        self.add(name, "fc", din * dout + dout, rows * din * dout)

    def matmul(self, name, m, k, n, kind="attention"):
        self.add(name, kind, 0, m * k * n)

    def self_attention(self, prefix, d, hw):
        t = hw[0] * hw[1]
        for proj in ("query", "key", "value"):
            self.conv(f"{prefix}.{proj}", d, d, 1, hw)
            self.bn(f"{prefix}.{proj}_bn", d)
        self.matmul(f"{prefix}.qk", t, d, t, kind="self_attention")
        self.matmul(f"{prefix}.gv", t, t, d, kind="self_attention")
        self.conv(f"{prefix}.out", d, d, 1, hw)
        self.bn(f"{prefix}.out_bn", d)

    def cross_attention(self, prefix, d, s, hw):
        t = hw[0] * hw[1]
        self.add(f"{prefix}.class_tokens", "tokens", s * d, 0)
        self.fc(f"{prefix}.fc_query", t + s, d, d)
        self.fc(f"{prefix}.fc_key", s, d, d)
        self.matmul(f"{prefix}.scores", t + s, d, s, kind="cross_attention")
        self.matmul(f"{prefix}.gc", t, s, d, kind="cross_attention")

    def decoder(self, cfg: DecoderConfig, height: int, width: int, prefix="dec"):
        d, s = cfg.d, cfg.num_classes
        hw = (height // cfg.k, width // cfg.k)
        self.self_attention(f"{prefix}.cm.sa1", d, hw)
        self.conv(f"{prefix}.cm.skip", d, d, 1, hw)
        self.cross_attention(f"{prefix}.cm.cross", d, s, hw)
        self.self_attention(f"{prefix}.cm.sa2", d, hw)
        if cfg.is_joint:
            hw = self.conv(f"{prefix}.upconv", d, d, 5, hw, stride=cfg.stride, groups=cfg.groups, transposed=True)
            self.bn(f"{prefix}.upconv_bn", d)
        self.conv(f"{prefix}.head", d, s, 1, hw)
        # bilinear: 4 weighted taps per output element
        self.add(f"{prefix}.upsample", "interpolation", 0, 4 * s * height * width)

    def compression_decoder(self, cfg: DecoderConfig, height: int, width: int):
        f = cfg.channels
        hw = (math.ceil(height / 16), math.ceil(width / 16))
        self.add("em.scales", "entropy_model", f, 0)
        self.conv("hd.upconv1", f, f, 1, hw, transposed=True)
        self.bn("hd.upconv1_bn", f)
        self.conv("hd.upconv2", f, f, 3, hw, stride=2, transposed=True)
        self.bn("hd.upconv2_bn", f)

    def feature_decoder(self, cfg: DecoderConfig, height: int, width: int):
        f = cfg.channels
        hw = (height // 8, width // 8)
        self.conv("fd.upconv", f, f, 1, hw, transposed=True)
        self.bn("fd.upconv_bn", f)
        self.conv("fd.dwupconv", f, f, 3, hw, stride=2, groups=cfg.groups, transposed=True)
        self.bn("fd.dwupconv_bn", f)


def _config_of(model) -> DecoderConfig:
    if isinstance(model, DecoderConfig):
        return model
    if isinstance(model, SegModel):
        return model.config
    if hasattr(model, "config"):
        return model.config
    raise TypeError(f"cannot derive a DecoderConfig from {type(model).__name__}")


def _census(cfg: DecoderConfig, height: int, width: int, scope: str) -> _Census:
    if scope not in SCOPES:
        raise ValueError(f"scope must be one of {SCOPES}")
    c = _Census()
    if scope == "cloud":
        c.compression_decoder(cfg, height, width)
        if not cfg.is_joint:
            c.feature_decoder(cfg, height, width)
    c.decoder(cfg, height, width)
    return c


def _label(cfg: DecoderConfig, scope: str) -> str:
    dec = "JD" if cfg.is_joint else "D"
    if scope == "decoder":
        return f"{dec}(d={cfg.d},k={cfg.k},S={cfg.num_classes})"
    parts = "CD+JD" if cfg.is_joint else "CD+FD+D"
    return f"{parts}(d={cfg.d},k={cfg.k},S={cfg.num_classes})"


def count_params(model, scope: str = "cloud") -> CostReport:
    """Analytic trainable-parameter census (MACs left at zero)."""
    cfg = _config_of(model)
    # parameters do not depend on resolution; any grid divisible by 32 works
    c = _census(cfg, 32, 32, scope)
    entries = [LayerCost(e.name, e.kind, e.params, 0) for e in c.entries]
    return CostReport(entries, None, _label(cfg, scope))


def count_flops(model, height: int, width: int, scope: str = "cloud") -> CostReport:
    """Analytic MAC and parameter census at input resolution ``height x width``."""
    cfg = _config_of(model)
    if height % 32 or width % 32:
        raise ValueError(f"resolution {height}x{width} is not a multiple of 32")
    c = _census(cfg, height, width, scope)
    return CostReport(c.entries, (height, width), _label(cfg, scope))


def decoder_comparison(height: int, width: int, num_classes: int, d: int = 48) -> list[CostReport]:
    """Cloud-side cost of the baseline (CD+FD+D, d=256) next to CD+JD."""
    return [
        count_flops(DecoderConfig.baseline(num_classes=num_classes), height, width, "cloud"),
        count_flops(DecoderConfig.joint(d=d, num_classes=num_classes), height, width, "cloud"),
    ]


# -- metrics -----------------------------------------------------------------------

@dataclass(frozen=True)
class RDConfig:
    alpha: float

    def __post_init__(self):
        if not 0.0 < self.alpha < 1.0:
            raise ValueError(f"alpha must lie in (0, 1), got {self.alpha}")


def rd_loss(jdist: float, jrate: float, cfg: RDConfig) -> float:
    return cfg.alpha * jdist + (1.0 - cfg.alpha) * jrate


def cross_entropy(y: np.ndarray, gt: np.ndarray, ignore: int | None = None) -> float:
    """Mean of ``-ln y[gt_i, i]`` over counted pixels; ``gt`` holds 1-based labels."""
    y = np.asarray(y, dtype=np.float64)
    gt = np.asarray(gt)
    if y.ndim != 3 or y.shape[1:] != gt.shape:
        raise ValueError(f"prediction {y.shape} does not match labels {gt.shape}")
    mask = np.ones(gt.shape, bool) if ignore is None else gt != ignore
    labels = gt[mask].astype(np.int64) - 1
    if labels.size == 0:
        return 0.0
    if labels.min() < 0 or labels.max() >= y.shape[0]:
        raise ValueError("label outside 1..S")
    p = y.reshape(y.shape[0], -1)[:, mask.ravel()][labels, np.arange(labels.size)]
    nll = -np.log(np.maximum(p, np.finfo(np.float64).tiny))
    return float(np.maximum(nll, 0.0).mean())


class ConfusionMatrix:
    """S x S counts, rows = ground truth, columns = prediction (1-based labels)."""

    def __init__(self, num_classes: int, ignore: int | None = None):
        self.num_classes = num_classes
        self.ignore = ignore
        self.counts = np.zeros((num_classes, num_classes), dtype=np.int64)
        self.ignored = 0

    def update(self, pred: np.ndarray, gt: np.ndarray) -> "ConfusionMatrix":
        pred, gt = np.asarray(pred).ravel(), np.asarray(gt).ravel()
        if pred.shape != gt.shape:
            raise ValueError("prediction and ground truth differ in size")
        keep = np.ones(gt.shape, bool) if self.ignore is None else gt != self.ignore
        self.ignored += int((~keep).sum())
        p, g = pred[keep].astype(np.int64) - 1, gt[keep].astype(np.int64) - 1
        s = self.num_classes
        for name, a in (("prediction", p), ("ground truth", g)):
            if a.size and (a.min() < 0 or a.max() >= s):
                raise ValueError(f"{name} label outside 1..{s}")
        self.counts += np.bincount(g * s + p, minlength=s * s).reshape(s, s)
        return self

    def merge(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        out = ConfusionMatrix(self.num_classes, self.ignore)
        out.counts = self.counts + other.counts
        out.ignored = self.ignored + other.ignored
        return out

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def iou(self) -> np.ndarray:
        """Per-class IoU; NaN for classes absent from both maps."""
        tp = np.diag(self.counts).astype(np.float64)
        union = self.counts.sum(0) + self.counts.sum(1) - tp
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.where(union > 0, tp / union, np.nan)

    def miou(self) -> float:
        iou = self.iou()
        present = ~np.isnan(iou)
        return float(100.0 * iou[present].mean()) if present.any() else float("nan")


def miou(pred: np.ndarray, gt: np.ndarray, num_classes: int, ignore: int | None = None) -> float:
    """Mean IoU in percent over classes appearing in ``gt`` or ``pred``."""
    return ConfusionMatrix(num_classes, ignore).update(pred, gt).miou()
