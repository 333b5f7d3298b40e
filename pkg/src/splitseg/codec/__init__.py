"""Hyperprior feature codec with a bit-exact range coder."""

from .bitstream import (
    HEADER_SIZE,
    Bitstream,
    Compressed,
    DecodeError,
    FeatureCodec,
    compress,
    decode,
    decompress,
    encode,
    estimate_rate,
)
from .entropy import CodingTable, FactorizedModel, GaussianConditional, gaussian_pmf, pmf_to_freqs, quantize
from .hyper import HyperWeights, factorized_model, hyper_encode, hyper_sigma
from .rangecoder import RangeDecoder, RangeEncoder

__all__ = [
    "HEADER_SIZE", "Bitstream", "Compressed", "DecodeError", "FeatureCodec", "compress", "decode",
    "decompress", "encode", "estimate_rate", "CodingTable", "FactorizedModel", "GaussianConditional",
    "gaussian_pmf", "pmf_to_freqs", "quantize", "HyperWeights", "factorized_model", "hyper_encode",
    "hyper_sigma", "RangeDecoder", "RangeEncoder",
]
