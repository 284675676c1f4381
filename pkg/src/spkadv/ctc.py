"""CTC branch: vocabulary, log-space forward recursion, brute-force oracle,
greedy decoding."""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import autodiff as ad
from . import layers as L
from .autodiff import LOG_ZERO, Node

PREFIX = "ctc"
BLANK = 0


class TargetTooLongError(ValueError):
    """No alignment of the target fits in the available frames."""


@dataclass(frozen=True)
class Vocab:
    """Index 0 is the CTC blank, 1..K the characters, K+1 the attention
    end-of-sequence symbol (also fed as start-of-sequence)."""

    chars: tuple[str, ...]

    def __post_init__(self):
        if len(set(self.chars)) != len(self.chars):
            raise ValueError("vocab characters must be unique")
        if any(len(c) != 1 for c in self.chars):
            raise ValueError("vocab symbols must be single characters")

    blank_index = BLANK

    @property
    def eos(self) -> int:
        return len(self.chars) + 1

    @property
    def sos(self) -> int:
        return self.eos

    @property
    def ctc_size(self) -> int:
        return len(self.chars) + 1

    @property
    def att_size(self) -> int:
        return len(self.chars) + 2

    def encode(self, text: str) -> list[int]:
        index = {c: i + 1 for i, c in enumerate(self.chars)}
        try:
            return [index[c] for c in text]
        except KeyError as exc:
            raise ValueError(f"symbol {exc.args[0]!r} outside vocab") from None

    def decode(self, ids: Sequence[int]) -> str:
        return "".join(self.chars[i - 1] for i in ids if 1 <= i <= len(self.chars))


def augment(target: Sequence[int]) -> list[int]:
    """(y1..yM) -> (blank, y1, blank, ..., yM, blank)."""
    out = [BLANK]
    for y in target:
        out += [y, BLANK]
    return out


def min_frames(target: Sequence[int]) -> int:
    repeats = sum(1 for a, b in zip(target, target[1:]) if a == b)
    return len(target) + repeats


def init_ctc_head(rng, in_dim: int, vocab: Vocab) -> L.Params:
    return L.init_linear(rng, f"{PREFIX}.out", in_dim, vocab.ctc_size)


def ctc_log_probs(params: L.Params, phi: Node) -> Node:
    return ad.log_softmax(L.linear(params, f"{PREFIX}.out", phi))


def ctc_loss_batch(log_probs: Node, mask: np.ndarray, targets: Sequence[Sequence[int]]) -> Node:
    """Per-utterance CTC loss, shape (B,), from (B, T', V) log-posteriors."""
    B, T, V = log_probs.shape
    lengths = mask.sum(axis=1)
    for b, y in enumerate(targets):
        if any(not 1 <= s < V for s in y):
            raise ValueError(f"ctc: target symbol outside 1..{V - 1}")
        if min_frames(y) > lengths[b]:
            raise TargetTooLongError(
                f"target too long: {len(y)} symbols need {min_frames(y)} frames, "
                f"only {int(lengths[b])} available")

    S = max(3, max(2 * len(y) + 1 for y in targets))
    ext = np.zeros((B, S), dtype=np.int64)
    skip_add = np.full((B, S), LOG_ZERO)
    init_add = np.full((B, S), LOG_ZERO)
    for b, y in enumerate(targets):
        a = augment(y)
        ext[b, :len(a)] = a
        for s in range(2, len(a)):
            if a[s] != BLANK and a[s] != a[s - 2]:
                skip_add[b, s] = 0.0
        init_add[b, 0] = 0.0
        if y:
            init_add[b, 1] = 0.0

    emit = ad.take(log_probs, np.broadcast_to(ext[:, None, :], (B, T, S)))
    pad1 = ad.constant(np.full((B, 1), LOG_ZERO))
    pad2 = ad.constant(np.full((B, 2), LOG_ZERO))
    skip = ad.constant(skip_add)
    mf = mask.astype(ad.DTYPE)

    alpha = emit[:, 0] + ad.constant(init_add)
    for t in range(1, T):
        stay = alpha
        step = ad.concat([pad1, alpha[:, :-1]], axis=1)
        jump = ad.concat([pad2, alpha[:, :-2]], axis=1) + skip
        new = ad.logsumexp(ad.stack([stay, step, jump], axis=-1), axis=-1) + emit[:, t]
        if mf[:, t].all():
            alpha = new
        else:
            mt = ad.constant(np.broadcast_to(mf[:, t:t + 1], (B, S)))
            alpha = mt * new + (1.0 - mt) * alpha

    last = np.array([2 * len(y) for y in targets])
    ends = ad.take(alpha, np.stack([last, np.maximum(last - 1, 0)], axis=1))
    no_second = np.array([[0.0, LOG_ZERO if len(y) == 0 else 0.0] for y in targets])
    return -ad.logsumexp(ends + ad.constant(no_second), axis=-1)


def ctc_loss(log_probs, target: Sequence[int]) -> Node:
    """-ln P(target | frames) for a single (T', V) matrix of log-posteriors."""
    lp = log_probs if isinstance(log_probs, Node) else ad.constant(log_probs)
    if lp.ndim != 2:
        raise ad.ShapeError(f"ctc_loss: expected (T', V), got {lp.shape}")
    probs = np.exp(lp.value).sum(axis=-1)
    if np.max(np.abs(probs - 1.0)) > 1e-6:
        raise ValueError("ctc_loss: rows of exp(log_probs) must sum to 1")
    out = ctc_loss_batch(ad.reshape(lp, (1,) + lp.shape), np.ones((1, lp.shape[0]), bool), [target])
    return ad.reshape(out, ())


def collapse(path: Sequence[int]) -> list[int]:
    out, prev = [], None
    for s in path:
        if s != prev and s != BLANK:
            out.append(int(s))
        prev = s
    return out


def ctc_brute_force(probs: np.ndarray, target: Sequence[int], max_frames: int = 6) -> float:
    """-ln of the summed probability of every frame labelling that collapses to ``target``."""
    probs = np.asarray(probs, dtype=float)
    T, V = probs.shape
    if T > max_frames:
        raise ValueError(f"ctc_brute_force: {V}^{T} paths is too many to enumerate")
    target = list(target)
    total = 0.0
    for path in itertools.product(range(V), repeat=T):
        if collapse(path) == target:
            total += float(np.prod(probs[np.arange(T), path]))
    if total == 0.0:
        raise TargetTooLongError("target too long: no path collapses to it")
    return -np.log(total)


def ctc_greedy_decode(log_probs: np.ndarray) -> list[int]:
    lp = np.asarray(log_probs.value if isinstance(log_probs, Node) else log_probs)
    return collapse(np.argmax(lp, axis=-1).tolist())
