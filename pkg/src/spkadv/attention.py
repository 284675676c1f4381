"""Attention branch: location-aware attention, a one-layer recurrent decoder,
teacher-forced loss and beam search."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import autodiff as ad
from . import layers as L
from .autodiff import LOG_ZERO, Node
from .ctc import BLANK, Vocab

PREFIX = "att"


@dataclass(frozen=True)
class AttentionConfig:
    embed_dim: int = 16
    decoder_dim: int = 32
    attention_dim: int = 32
    conv_channels: int = 4
    conv_width: int = 3

    def __post_init__(self):
        if self.conv_width % 2 == 0:
            raise ValueError("conv_width must be odd")


@dataclass
class AttentionState:
    hidden: Node          # (B, decoder_dim)
    weights: Node         # (B, T') previous attention weights
    prev_symbol: np.ndarray  # (B,)


def init_attention(rng, enc_dim: int, vocab: Vocab, cfg: AttentionConfig) -> L.Params:
    p = {}
    A, C = cfg.attention_dim, cfg.conv_channels

    def par(name, value):
        p[f"{PREFIX}.{name}"] = ad.parameter(value, f"{PREFIX}.{name}")

    par("embed", rng.uniform(-0.1, 0.1, size=(vocab.att_size, cfg.embed_dim)))
    par("W", L.glorot(rng, cfg.decoder_dim, A))
    par("U", L.glorot(rng, enc_dim, A))
    par("b", np.zeros(A))
    par("conv", L.glorot(rng, cfg.conv_width, C))
    par("F", L.glorot(rng, C, A))
    par("v", L.glorot(rng, A, 1))
    p.update(L.init_recurrent(rng, f"{PREFIX}.dec", cfg.embed_dim + enc_dim, cfg.decoder_dim))
    p.update(L.init_linear(rng, f"{PREFIX}.out", cfg.decoder_dim + enc_dim, vocab.att_size))
    return p


def _over_time(x: Node, per_row: Node) -> Node:
    """(B, T, A) + (B, A) -> (B, T, A)."""
    return ad.swapaxes(ad.swapaxes(x, 0, 1) + per_row, 0, 1)


def project_encoder(params: L.Params, phi: Node) -> Node:
    return ad.matmul(phi, params[f"{PREFIX}.U"]) + params[f"{PREFIX}.b"]


def initial_weights(mask: np.ndarray) -> np.ndarray:
    m = mask.astype(ad.DTYPE)
    return m / m.sum(axis=1, keepdims=True)


def attend(params: L.Params, hidden: Node, prev_weights: Node, phi: Node,
           phi_proj: Node, mask: np.ndarray):
    """Location-aware attention; returns ``(context (B, D), weights (B, T'))``.

    score_t = v . tanh(W s + U phi_t + b + F conv(prev_weights)_t), softmax
    over unmasked frames.
    """
    B, T, D = phi.shape
    if prev_weights.shape != (B, T):
        raise ad.ShapeError(f"attend: weights {prev_weights.shape} != {(B, T)}")
    if not mask.any(axis=1).all():
        raise ValueError("attend: every sequence needs an unmasked frame")
    kernel = params[f"{PREFIX}.conv"]
    k = kernel.shape[0]
    half = k // 2
    zeros = ad.constant(np.zeros((B, half)))
    padded = ad.concat([zeros, prev_weights, zeros], axis=1)
    windows = ad.stack([padded[:, i:i + T] for i in range(k)], axis=-1)  # (B, T, k)
    loc = ad.matmul(ad.matmul(windows, kernel), params[f"{PREFIX}.F"])
    query = ad.matmul(hidden, params[f"{PREFIX}.W"])
    e = ad.tanh(_over_time(phi_proj + loc, query))
    scores = ad.reshape(ad.matmul(e, params[f"{PREFIX}.v"]), (B, T))
    if not mask.all():
        scores = scores + ad.constant(np.where(mask, 0.0, LOG_ZERO))
    weights = ad.softmax(scores)
    context = ad.reshape(ad.matmul(ad.reshape(weights, (B, 1, T)), phi), (B, D))
    return context, weights


def decoder_step(params: L.Params, state: AttentionState, phi: Node, phi_proj: Node,
                 mask: np.ndarray):
    """One decoding step; returns ``(log_posteriors (B, V), new state)``."""
    context, weights = attend(params, state.hidden, state.weights, phi, phi_proj, mask)
    emb = ad.embedding(params[f"{PREFIX}.embed"], state.prev_symbol)
    x = ad.concat([emb, context], axis=-1)
    Wx, Wh, b = (params[f"{PREFIX}.dec.{n}"] for n in ("Wx", "Wh", "b"))
    H = Wh.shape[0]
    gx = ad.matmul(x, Wx) + b
    hidden = L.gru_step(Wh, gx[:, :2 * H], gx[:, 2 * H:], state.hidden)
    logits = L.linear(params, f"{PREFIX}.out", ad.concat([hidden, context], axis=-1))
    return ad.log_softmax(logits), AttentionState(hidden, weights, state.prev_symbol)


def initial_state(params: L.Params, mask: np.ndarray, vocab: Vocab) -> AttentionState:
    B = mask.shape[0]
    H = params[f"{PREFIX}.dec.Wh"].shape[0]
    return AttentionState(ad.constant(np.zeros((B, H))), ad.constant(initial_weights(mask)),
                          np.full(B, vocab.sos, dtype=np.int64))


def attention_loss_batch(params: L.Params, phi: Node, mask: np.ndarray,
                         targets: Sequence[Sequence[int]], vocab: Vocab) -> Node:
    """Teacher-forced -sum_m ln P(y_m | y_<m, phi), eos step included; shape (B,)."""
    B = phi.shape[0]
    for y in targets:
        if any(not 1 <= s <= len(vocab.chars) for s in y):
            raise ValueError("attention: target symbol outside vocab")
    steps = max(len(y) for y in targets) + 1
    y_in = np.full((B, steps), vocab.eos, dtype=np.int64)
    y_out = np.full((B, steps), vocab.eos, dtype=np.int64)
    step_mask = np.zeros((B, steps))
    for b, y in enumerate(targets):
        y_in[b, 0] = vocab.sos
        y_in[b, 1:len(y) + 1] = y
        y_out[b, :len(y)] = y
        step_mask[b, :len(y) + 1] = 1.0

    phi_proj = project_encoder(params, phi)
    state = initial_state(params, mask, vocab)
    picked = []
    for t in range(steps):
        state.prev_symbol = y_in[:, t]
        logp, state = decoder_step(params, state, phi, phi_proj, mask)
        picked.append(ad.take(logp, y_out[:, t:t + 1]))
    ll = ad.reshape(ad.concat(picked, axis=1), (B, steps))
    if not step_mask.all():
        ll = ll * ad.constant(step_mask)
    return -ad.sum_(ll, axis=1)


def attention_loss(params: L.Params, phi, target: Sequence[int], vocab: Vocab) -> Node:
    phi = phi if isinstance(phi, Node) else ad.constant(phi)
    out = attention_loss_batch(params, ad.reshape(phi, (1,) + phi.shape),
                               np.ones((1, phi.shape[0]), bool), [target], vocab)
    return ad.reshape(out, ())


def beam_decode(params: L.Params, phi: np.ndarray, vocab: Vocab, beam_size: int = 4,
                max_len: int = 20) -> list[int]:
    """Length-bounded beam search; hypotheses end at eos (forced once ``max_len``
    symbols are out).  Score is the summed log-posterior, ties go to the
    lexicographically smallest index sequence."""
    if beam_size < 1:
        raise ValueError("beam_size must be >= 1")
    phi = np.asarray(phi, dtype=ad.DTYPE)
    T = phi.shape[0]
    allowed = [c for c in range(vocab.att_size) if c not in (BLANK,)]
    with ad.no_grad():
        hyps = [((), 0.0)]
        state = None
        finished = []
        for step in range(max_len + 1):
            K = len(hyps)
            phi_b = ad.constant(np.broadcast_to(phi, (K,) + phi.shape))
            mask = np.ones((K, T), bool)
            if state is None:
                state = initial_state(params, mask, vocab)
            phi_proj = project_encoder(params, phi_b)
            state.prev_symbol = np.array([h[-1] if h else vocab.sos for h, _ in hyps])
            logp, state = decoder_step(params, state, phi_b, phi_proj, mask)
            lp = logp.value
            cands = []
            for k, (toks, score) in enumerate(hyps):
                choices = [vocab.eos] if step == max_len else allowed
                for c in choices:
                    cands.append((score + lp[k, c], toks + (c,), k))
            cands.sort(key=lambda c: (-c[0], c[1]))
            live = []
            for score, toks, k in cands[:beam_size]:
                if toks[-1] == vocab.eos:
                    finished.append((score, toks[:-1]))
                else:
                    live.append((score, toks, k))
            if not live:
                break
            idx = np.array([k for _, _, k in live])
            state = AttentionState(ad.constant(state.hidden.value[idx]),
                                   ad.constant(state.weights.value[idx]), None)
            hyps = [(toks, score) for score, toks, _ in live]
    finished.sort(key=lambda f: (-f[0], f[1]))
    return list(finished[0][1])
