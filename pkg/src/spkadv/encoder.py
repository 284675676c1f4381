"""On-device encoder: frame decimation followed by stacked bidirectional
recurrent layers.  Its output is the representation sent to the service."""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import layers as L

PREFIX = "enc"

# encode() call counter, for rough cost accounting only
TIMING = {"calls": 0, "seconds": 0.0}


@dataclass(frozen=True)
class EncoderConfig:
    input_dim: int = 16
    hidden_dim: int = 32
    num_layers: int = 2
    downsample_factor: int = 4

    def __post_init__(self):
        for name in ("input_dim", "hidden_dim", "num_layers", "downsample_factor"):
            if getattr(self, name) <= 0:
                raise ValueError(f"EncoderConfig.{name} must be positive")

    @property
    def output_dim(self) -> int:
        return 2 * self.hidden_dim


@dataclass
class EncodedRepr:
    frames: np.ndarray
    downsample_factor: int
    source_utterance_id: str = ""

    def __post_init__(self):
        if not np.all(np.isfinite(self.frames)):
            raise ad.NonFiniteError(f"non-finite encoding for {self.source_utterance_id!r}")


def init_encoder(rng: np.random.Generator, cfg: EncoderConfig) -> L.Params:
    params = {}
    in_dim = cfg.input_dim
    for i in range(cfg.num_layers):
        params.update(L.init_bidirectional(rng, f"{PREFIX}.l{i}", in_dim, cfg.hidden_dim))
        in_dim = cfg.output_dim
    return params


def encode_batch(params: L.Params, cfg: EncoderConfig, x, mask: np.ndarray):
    """(B, T, F) features -> ((B, T', 2H) node, (B, T') mask)."""
    x = x if isinstance(x, ad.Node) else ad.constant(x)
    if x.shape[1] == 0:
        raise ValueError("encode: empty sequence")
    if x.shape[-1] != cfg.input_dim:
        raise ad.ShapeError(f"encode: feature dim {x.shape[-1]} != {cfg.input_dim}")
    h, m = L.subsample(x, mask, cfg.downsample_factor)
    for i in range(cfg.num_layers):
        h = L.bidirectional_forward(params, f"{PREFIX}.l{i}", h, m)
    return h, m


def encode(params: L.Params, cfg: EncoderConfig, features: np.ndarray,
           utterance_id: str = "") -> EncodedRepr:
    features = np.asarray(features, dtype=ad.DTYPE)
    if features.ndim != 2 or features.shape[0] == 0:
        raise ValueError(f"encode: expected a non-empty (T, F) matrix, got {features.shape}")
    start = time.perf_counter()
    with ad.no_grad():
        phi, _ = encode_batch(params, cfg, features[None], np.ones((1, len(features)), bool))
    TIMING["calls"] += 1
    TIMING["seconds"] += time.perf_counter() - start
    return EncodedRepr(phi.value[0].copy(), cfg.downsample_factor, utterance_id)
