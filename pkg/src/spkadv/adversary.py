"""Speaker classifier over encoded frames.

Used twice: as the adversarial branch during training (behind a gradient
reversal node) and as the closed-set attacker, which retrains the same
architecture on a frozen representation.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import autodiff as ad
from . import layers as L
from .autodiff import Node

PREFIX = "adv"


@dataclass(frozen=True)
class AdversaryConfig:
    hidden_dim: int = 32
    num_layers: int = 1


class SpeakerTable:
    """Frozen bijection between speaker ids and class indices."""

    def __init__(self, speaker_ids: Sequence[str]):
        ids = list(speaker_ids)
        if len(set(ids)) != len(ids):
            raise ValueError("duplicate speaker ids")
        self._ids = tuple(ids)
        self._index = {s: i for i, s in enumerate(ids)}

    @property
    def speaker_ids(self) -> tuple[str, ...]:
        return self._ids

    def __len__(self):
        return len(self._ids)

    def index(self, speaker_id: str) -> int:
        return self._index[speaker_id]

    def __eq__(self, other):
        return isinstance(other, SpeakerTable) and self._ids == other._ids


def init_adversary(rng, in_dim: int, n_speakers: int, cfg: AdversaryConfig,
                   prefix: str = PREFIX) -> L.Params:
    params = {}
    for i in range(cfg.num_layers):
        params.update(L.init_bidirectional(rng, f"{prefix}.l{i}", in_dim, cfg.hidden_dim))
        in_dim = 2 * cfg.hidden_dim
    params.update(L.init_linear(rng, f"{prefix}.out", in_dim, n_speakers))
    return params


def adversary_forward(params: L.Params, phi: Node, mask: np.ndarray,
                      prefix: str = PREFIX) -> Node:
    """(B, T', D) -> (B, T', n_speakers) frame log-posteriors."""
    if phi.shape[1] == 0:
        raise ValueError("adversary: empty sequence")
    h = phi
    i = 0
    while f"{prefix}.l{i}.fwd.Wx" in params:
        h = L.bidirectional_forward(params, f"{prefix}.l{i}", h, mask)
        i += 1
    return ad.log_softmax(L.linear(params, f"{prefix}.out", h))


def adversary_loss_batch(log_post: Node, speakers: np.ndarray, mask: np.ndarray) -> Node:
    """Sum over unmasked frames of -log P(z | frame); shape (B,)."""
    B, T, K = log_post.shape
    speakers = np.asarray(speakers, dtype=np.int64)
    if speakers.min() < 0 or speakers.max() >= K:
        raise ValueError(f"speaker class outside 0..{K - 1}")
    if not mask.any(axis=1).all():
        raise ValueError("adversary_loss: all frames masked")
    idx = np.broadcast_to(speakers[:, None, None], (B, T, 1))
    picked = ad.reshape(ad.take(log_post, idx), (B, T))
    if not mask.all():
        picked = picked * ad.constant(mask.astype(ad.DTYPE))
    return -ad.sum_(picked, axis=1)


def adversary_loss(frame_log_posteriors, speaker: int, mask=None) -> Node:
    lp = frame_log_posteriors if isinstance(frame_log_posteriors, Node) \
        else ad.constant(frame_log_posteriors)
    T = lp.shape[0]
    mask = np.ones((1, T), bool) if mask is None else np.asarray(mask, bool).reshape(1, T)
    out = adversary_loss_batch(ad.reshape(lp, (1,) + lp.shape), np.array([speaker]), mask)
    return ad.reshape(out, ())


def utterance_speaker_decision(frame_log_posteriors: np.ndarray, mask=None):
    """Average frame log-posteriors over unmasked frames, then argmax
    (lowest class wins ties).  Returns ``(class, averaged log-distribution)``."""
    lp = np.asarray(frame_log_posteriors, dtype=float)
    mask = np.ones(len(lp), bool) if mask is None else np.asarray(mask, bool)
    avg = lp[mask].mean(axis=0)
    return int(np.argmax(avg)), avg
