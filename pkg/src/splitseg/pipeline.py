"""Car/cloud split pipeline: image encoder, feature codec and task decoder in one bundle."""

from __future__ import annotations

from functools import cached_property

import numpy as np

from .codec import Bitstream, Compressed, FeatureCodec, HyperWeights
from .models import (
    DecoderConfig,
    SegModel,
    feature_decode,
    feature_decoder,
    feature_encode,
    feature_encoder,
    init_decoder,
    init_feature_codec,
    init_stub_encoder,
    segment,
    stub_encode,
    stub_encoder,
)
from .params import Initializer, Params, load_params, save_params

CONFIG_KEY = "meta.config"
IN_CAR_BASELINE = "in-car-baseline"
IN_CAR_JD = "in-car-jd"
DISTRIBUTED_BASELINE = "distributed-baseline"
DISTRIBUTED_JD = "distributed-jd"
TOPOLOGIES = (IN_CAR_BASELINE, IN_CAR_JD, DISTRIBUTED_BASELINE, DISTRIBUTED_JD)
# Untrained encoders emit latents well inside (-0.5, 0.5), which would all
# quantize to zero; the output batchnorm scale of FE is raised to compensate.
DEFAULT_LATENT_GAIN = 16.0


def check_image(x: np.ndarray) -> None:
    if x.ndim != 3:
        raise ValueError(f"image must be (C, H, W), got {x.shape}")
    _, h, w = x.shape
    if h % 32 or w % 32 or h == 0 or w == 0:
        raise ValueError(f"image size {h}x{w} is not a positive multiple of 32")


class SplitModel:
    """All weights of one deployment, stored in a single SSJD container.

    A joint-JD bundle serves the in-car-jd and distributed-jd topologies,
    a baseline-D bundle the two baseline topologies.
    """

    def __init__(self, params: Params, config: DecoderConfig | None = None):
        if config is None:
            if CONFIG_KEY not in params:
                raise ValueError(f"weight container has no {CONFIG_KEY!r} entry")
            config = DecoderConfig.from_vector(params[CONFIG_KEY])
        self.config = config
        self.params = params
        self.params[CONFIG_KEY] = config.to_vector()

    @classmethod
    def build(cls, config: DecoderConfig, seed: int = 0, latent_gain: float = DEFAULT_LATENT_GAIN) -> "SplitModel":
        ini = Initializer(seed)
        init_stub_encoder(ini, config)
        init_feature_codec(ini, config)
        ini.params["fe.conv_bn.gamma"] = ini.params["fe.conv_bn.gamma"] * np.float32(latent_gain)
        HyperWeights.init(ini, config.channels)
        init_decoder(ini, config)
        return cls(ini.params, config)

    @classmethod
    def load(cls, path) -> "SplitModel":
        return cls(load_params(path))

    def save(self, path) -> None:
        save_params(path, self.params)

    @cached_property
    def encoder(self):
        return stub_encoder(self.params)

    @cached_property
    def fe(self):
        return feature_encoder(self.params, self.config)

    @cached_property
    def fd(self):
        return feature_decoder(self.params, self.config)

    @cached_property
    def codec(self) -> FeatureCodec:
        return FeatureCodec(self.params)

    @cached_property
    def decoder(self) -> SegModel:
        return SegModel.from_params(self.params, self.config)

    def supports(self, topology: str) -> bool:
        if topology not in TOPOLOGIES:
            raise ValueError(f"unknown topology {topology!r}")
        return topology.endswith("-jd") == self.config.is_joint

    # -- car side --------------------------------------------------------------

    def bottleneck(self, x: np.ndarray) -> np.ndarray:
        check_image(x)
        return stub_encode(x, self.encoder)

    def latent(self, x: np.ndarray) -> np.ndarray:
        return feature_encode(self.bottleneck(x), self.fe)

    def in_car(self, x: np.ndarray):
        """(y, m) computed entirely in the car."""
        if self.config.is_joint:
            return segment(self.decoder, self.latent(x))
        return segment(self.decoder, self.bottleneck(x))

    def car_encode(self, x: np.ndarray) -> Compressed:
        return self.codec.compress(self.latent(x), image_size=x.shape[1:])

    # -- cloud side ------------------------------------------------------------

    def decode_features(self, r_hat: np.ndarray) -> np.ndarray:
        """Quantized latent -> decoder input (r_hat itself for JD, FD(r_hat) for D)."""
        r_hat = np.asarray(r_hat, dtype=np.float32)
        if self.config.is_joint:
            return r_hat
        return feature_decode(r_hat, self.fd)

    def cloud(self, stream: Bitstream | bytes):
        r_hat = self.codec.decode(stream)
        return segment(self.decoder, self.decode_features(r_hat))

    def distributed(self, x: np.ndarray):
        """Single-process reference of the distributed topology: ``(stream, y, m)``."""
        c = self.car_encode(x)
        y, m = segment(self.decoder, self.decode_features(c.r_hat))
        return c.stream, y, m
