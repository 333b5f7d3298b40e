"""Segmentation heads (baseline D, joint JD), feature encoder/decoder and the stub image encoder."""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields, replace

import numpy as np

from .attention import ContextMiningWeights, context_mining
from .params import Initializer, Params
from .tensor import ConvBN, ConvSpec, ShapeError, conv2d, softmax_channels, upsample

BASELINE = "baseline-D"
JOINT = "joint-JD"
VARIANTS = (BASELINE, JOINT)
_ALIASES = {"d": BASELINE, "baseline": BASELINE, "jd": JOINT, "joint": JOINT}


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class DecoderConfig:
    """Architecture hyperparameters.

    ``channels`` (F) is the width of z and r; both decoders consume those
    tensors directly, so it must equal the internal dim ``d``. ``groups``
    (G) of 0 means depthwise (G = channel count).
    """

    variant: str = JOINT
    d: int = 48
    k: int = 8
    channels: int = 0
    groups: int = 0
    num_classes: int = 150
    stride: int = 2
    in_channels: int = 3

    def __post_init__(self):
        variant = _ALIASES.get(self.variant, self.variant)
        object.__setattr__(self, "variant", variant)
        if not self.channels:
            object.__setattr__(self, "channels", self.d)
        if not self.groups:
            object.__setattr__(self, "groups", self.d)
        self.validate()

    def validate(self) -> None:
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        if self.variant == BASELINE and (self.d, self.k) != (256, 4):
            raise ConfigError(f"baseline-D requires d=256, k=4 (got d={self.d}, k={self.k})")
        if self.variant == JOINT and self.k != 8:
            raise ConfigError(f"joint-JD requires k=8 (got k={self.k})")
        if self.d < 1 or self.num_classes < 1:
            raise ConfigError("d and num_classes must be >= 1")
        if self.channels != self.d:
            raise ConfigError(f"codec channels F={self.channels} must equal d={self.d}")
        if self.d % self.groups:
            raise ConfigError(f"groups G={self.groups} must divide d={self.d}")
        if self.stride != 2:
            raise ConfigError("only stride 2 is supported")

    @classmethod
    def joint(cls, d: int = 48, num_classes: int = 150, **kw) -> "DecoderConfig":
        return cls(variant=JOINT, d=d, k=8, num_classes=num_classes, **kw)

    @classmethod
    def baseline(cls, num_classes: int = 19, **kw) -> "DecoderConfig":
        return cls(variant=BASELINE, d=256, k=4, num_classes=num_classes, **kw)

    @property
    def is_joint(self) -> bool:
        return self.variant == JOINT

    # plain-text key = value form
    def to_text(self) -> str:
        return "".join(f"{k} = {v}\n" for k, v in asdict(self).items())

    @classmethod
    def from_text(cls, text: str, **overrides) -> "DecoderConfig":
        known = {f.name: f.type for f in fields(cls)}
        values: dict = {}
        for lineno, line in enumerate(text.splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"line {lineno}: expected 'key = value'")
            key, val = (s.strip() for s in line.split("=", 1))
            key = key.replace("-", "_")
            if key not in known:
                raise ConfigError(f"line {lineno}: unknown key {key!r}")
            values[key] = val if key == "variant" else int(val)
        values.update({k: v for k, v in overrides.items() if v is not None})
        return cls(**values)

    def with_(self, **kw) -> "DecoderConfig":
        return replace(self, **kw)

    # compact numeric form stored inside weight containers
    def to_vector(self) -> np.ndarray:
        return np.array([VARIANTS.index(self.variant), self.d, self.k, self.channels, self.groups,
                         self.num_classes, self.stride, self.in_channels], dtype=np.float32)

    @classmethod
    def from_vector(cls, v) -> "DecoderConfig":
        v = [int(round(float(x))) for x in v]
        return cls(variant=VARIANTS[v[0]], d=v[1], k=v[2], channels=v[3], groups=v[4],
                   num_classes=v[5], stride=v[6], in_channels=v[7])


@dataclass(frozen=True, eq=False)
class Stack:
    layers: tuple

    def __call__(self, x: np.ndarray) -> np.ndarray:
        for layer in self.layers:
            x = layer(x)
        return x


@dataclass(frozen=True, eq=False)
class SegModel:
    """A task decoder: context mining, optional grouped up-conv (JD), 1x1 head, upsampling."""

    config: DecoderConfig
    context: ContextMiningWeights
    head: ConvSpec
    upconv: ConvBN | None = None
    upsample_factor: tuple[int, int] = (4, 4)

    def __post_init__(self):
        if self.config.is_joint != (self.upconv is not None):
            raise ShapeError("JD must carry exactly one grouped transposed conv, D none", axis="layers")

    def layer_census(self) -> list[str]:
        names = ["context_mining"]
        if self.upconv is not None:
            k = self.upconv.conv.kernel[0]
            names += [f"dwupconv{k}x{k}", "bn_relu"]
        names += ["conv1x1", "upsample", "argmax"]
        return names

    @classmethod
    def from_params(cls, p: Params, config: DecoderConfig, prefix: str = "dec") -> "SegModel":
        upconv = None
        if config.is_joint:
            upconv = ConvBN(
                p.conv(f"{prefix}.upconv", stride=config.stride, groups=config.groups, transposed=True),
                p.bn(f"{prefix}.upconv_bn"),
            )
        return cls(
            config=config,
            context=ContextMiningWeights.from_params(p, f"{prefix}.cm"),
            head=p.conv(f"{prefix}.head"),
            upconv=upconv,
        )


def init_decoder(ini: Initializer, config: DecoderConfig, prefix: str = "dec") -> None:
    d = config.d
    ContextMiningWeights.init(ini, f"{prefix}.cm", d, config.num_classes)
    if config.is_joint:
        ini.conv(f"{prefix}.upconv", d, d, 5, groups=config.groups, transposed=True)
        ini.bn(f"{prefix}.upconv_bn", d)
    ini.conv(f"{prefix}.head", d, config.num_classes, 1)


def build_model(config: DecoderConfig, seed: int) -> SegModel:
    ini = Initializer(seed)
    init_decoder(ini, config)
    return SegModel.from_params(ini.params, config)


def segment(model: SegModel, f: np.ndarray):
    """Run a decoder on features ``f`` of shape (d, H/k, W/k).

    Returns ``(y, m)``: per-pixel class probabilities (S, H, W) and the 1-based
    class map (H, W). Ties resolve to the lowest class index.
    """
    cfg = model.config
    if f.ndim != 3:
        raise ShapeError(f"expected (d, h, w) features, got {f.shape}", axis="rank")
    if f.shape[0] != cfg.d:
        raise ShapeError(f"features have {f.shape[0]} channels, decoder expects d={cfg.d}", axis="channels")
    n = context_mining(np.asarray(f, dtype=np.float32), model.context)
    if model.upconv is not None:
        n = model.upconv(n)
    y = softmax_channels(upsample(conv2d(n, model.head), model.upsample_factor))
    return y, argmax_map(y)


def argmax_map(y: np.ndarray) -> np.ndarray:
    return (np.argmax(y, axis=0) + 1).astype(np.int32)


# -- feature encoder / decoder ----------------------------------------------------

def init_feature_codec(ini: Initializer, config: DecoderConfig) -> None:
    f, g = config.channels, config.groups
    ini.conv("fe.dwconv", f, f, 3, groups=g)
    ini.bn("fe.dwconv_bn", f)
    ini.conv("fe.conv", f, f, 1)
    ini.bn("fe.conv_bn", f)
    ini.conv("fd.upconv", f, f, 1, transposed=True)
    ini.bn("fd.upconv_bn", f)
    ini.conv("fd.dwupconv", f, f, 3, groups=g, transposed=True)
    ini.bn("fd.dwupconv_bn", f)


def feature_encoder(p: Params, config: DecoderConfig) -> Stack:
    return Stack((
        ConvBN(p.conv("fe.dwconv", stride=config.stride, groups=config.groups), p.bn("fe.dwconv_bn")),
        ConvBN(p.conv("fe.conv"), p.bn("fe.conv_bn")),
    ))


def feature_decoder(p: Params, config: DecoderConfig) -> Stack:
    return Stack((
        ConvBN(p.conv("fd.upconv", transposed=True), p.bn("fd.upconv_bn")),
        ConvBN(p.conv("fd.dwupconv", stride=config.stride, groups=config.groups, transposed=True),
               p.bn("fd.dwupconv_bn")),
    ))


def feature_encode(z: np.ndarray, weights: Stack) -> np.ndarray:
    """Bottleneck features z (F, H/4, W/4) -> latent r (F, H/8, W/8)."""
    return weights(z)


def feature_decode(r_hat: np.ndarray, weights: Stack) -> np.ndarray:
    """Quantized latent (F, H/8, W/8) -> reconstructed z (F, H/4, W/4)."""
    return weights(np.asarray(r_hat, dtype=np.float32))


# -- stub image encoder -----------------------------------------------------------

def init_stub_encoder(ini: Initializer, config: DecoderConfig) -> None:
    c, f = config.in_channels, config.channels
    ini.conv("enc.conv1", c, f, 3)
    ini.bn("enc.conv1_bn", f)
    ini.conv("enc.conv2", f, f, 3)
    ini.bn("enc.conv2_bn", f)
    ini.conv("enc.conv3", f, f, 3)
    ini.bn("enc.conv3_bn", f)


def stub_encoder(p: Params) -> Stack:
    return Stack((
        ConvBN(p.conv("enc.conv1", stride=2), p.bn("enc.conv1_bn")),
        ConvBN(p.conv("enc.conv2", stride=2), p.bn("enc.conv2_bn")),
        ConvBN(p.conv("enc.conv3"), p.bn("enc.conv3_bn")),
    ))


def stub_encode(x: np.ndarray, weights: Stack) -> np.ndarray:
    """Image (C, H, W) -> bottleneck features (F, H/4, W/4)."""
    return weights(np.asarray(x, dtype=np.float32))
