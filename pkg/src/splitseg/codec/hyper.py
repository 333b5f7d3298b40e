"""Hyper encoder / decoder producing the per-element Gaussian scales."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..models import Stack
from ..params import Initializer, Params
from ..tensor import DTYPE, ConvBN
from .entropy import FactorizedModel, GaussianConditional


@dataclass(frozen=True, eq=False)
class HyperWeights:
    encoder: Stack
    decoder: Stack
    channels: int

    @classmethod
    def from_params(cls, p: Params) -> "HyperWeights":
        enc = Stack((
            ConvBN(p.conv("he.conv1", stride=2), p.bn("he.conv1_bn")),
            ConvBN(p.conv("he.conv2"), p.bn("he.conv2_bn")),
        ))
        dec = Stack((
            ConvBN(p.conv("hd.upconv1", transposed=True), p.bn("hd.upconv1_bn")),
            ConvBN(p.conv("hd.upconv2", stride=2, transposed=True), p.bn("hd.upconv2_bn")),
        ))
        return cls(enc, dec, enc.layers[0].conv.in_channels)

    @staticmethod
    def init(ini: Initializer, channels: int) -> None:
        f = channels
        ini.conv("he.conv1", f, f, 3)
        ini.bn("he.conv1_bn", f)
        ini.conv("he.conv2", f, f, 1)
        ini.bn("he.conv2_bn", f)
        ini.conv("hd.upconv1", f, f, 1, transposed=True)
        ini.bn("hd.upconv1_bn", f)
        ini.conv("hd.upconv2", f, f, 3, transposed=True)
        ini.bn("hd.upconv2_bn", f)
        # Laplacian scales of the factorized hyper prior, one per channel
        ini.const("em.scales", np.linspace(0.5, 2.0, f))


def factorized_model(p: Params) -> FactorizedModel:
    return FactorizedModel(p["em.scales"])


def hyper_encode(r: np.ndarray, w: HyperWeights) -> np.ndarray:
    """Latent r (F, h, w) -> continuous hyper latent (F, ceil(h/2), ceil(w/2))."""
    return w.encoder(np.asarray(r, dtype=DTYPE))


def hyper_sigma(h_hat: np.ndarray, w: HyperWeights, gc: GaussianConditional,
                grid: tuple[int, int] | None = None) -> np.ndarray:
    """Scales for the main latent, cropped to ``grid`` and clamped to ``sigma_min``."""
    s = w.decoder(np.asarray(h_hat, dtype=DTYPE))
    if grid is not None:
        s = s[:, :grid[0], :grid[1]]
    return np.maximum(s.astype(np.float64), gc.sigma_min)
