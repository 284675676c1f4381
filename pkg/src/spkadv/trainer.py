"""Loss composition, the four-stage schedule, the optimizer and checkpoints."""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import adversary as advmod
from . import attention as attmod
from . import autodiff as ad
from . import ctc as ctcmod
from . import encoder as encmod
from .adversary import AdversaryConfig, SpeakerTable
from .attention import AttentionConfig
from .ctc import Vocab
from .data import Batch, DataError, Utterance, batch as make_batches
from .encoder import EncoderConfig

log = logging.getLogger(__name__)

GROUP_PREFIX = {"theta_e": "enc.", "theta_c": "ctc.", "theta_a": "att.", "theta_s": "adv."}
STAGES = ("pretrain-asr", "pretrain-adv", "joint", "adv-refit")
STAGE_GROUPS = {
    "pretrain-asr": ("theta_e", "theta_c", "theta_a"),
    "pretrain-adv": ("theta_s",),
    "joint": ("theta_e", "theta_c", "theta_a", "theta_s"),
    "adv-refit": ("theta_s",),
}
STAGE_DATASET = {"pretrain-asr": "data-full", "pretrain-adv": "data-adv",
                 "joint": "data-adv", "adv-refit": "data-adv"}
DEFAULT_EPOCHS = {"pretrain-asr": 10, "pretrain-adv": 15, "joint": 15, "adv-refit": 5}

CKPT_MAGIC = b"SPKADVCK"
CKPT_VERSION = 1
LOG_COLUMNS = ("epoch", "stage", "L_c", "L_a", "L_spk", "objective")


def sub_seed(seed: int, name: str) -> int:
    """Deterministic per-component seed derived from the run seed."""
    digest = hashlib.sha256(f"{seed}/{name}".encode()).digest()
    return int.from_bytes(digest[:8], "little")


@dataclass(frozen=True)
class ModelConfig:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    attention: AttentionConfig = field(default_factory=AttentionConfig)
    adversary: AdversaryConfig = field(default_factory=AdversaryConfig)


@dataclass
class TrainConfig:
    lam: float = 0.5
    alpha: float = 0.0
    lr: float = 1e-3
    batch_size: int = 8
    epochs: dict[str, int] = field(default_factory=lambda: dict(DEFAULT_EPOCHS))
    seed: int = 0
    clip: float = 5.0
    stage: str = "pretrain-asr"
    # theta_s learns this much faster than the rest during the joint stage, so
    # the adversary keeps up with the moving encoder
    joint_adv_lr_scale: float = 10.0

    def __post_init__(self):
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError(f"lambda must be in [0, 1], got {self.lam}")
        if self.alpha < 0:
            raise ValueError(f"alpha must be >= 0, got {self.alpha}")
        if self.stage not in STAGES:
            raise ValueError(f"unknown stage {self.stage!r}")


class ModelParams:
    """The four disjoint parameter groups plus what is needed to rebuild them."""

    def __init__(self, groups: dict[str, dict[str, ad.Node]], config: ModelConfig,
                 vocab: Vocab, speakers: SpeakerTable):
        self.groups = groups
        self.config = config
        self.vocab = vocab
        self.speakers = speakers

    @classmethod
    def initialize(cls, config: ModelConfig, vocab: Vocab, speakers: SpeakerTable,
                   seed: int) -> "ModelParams":
        enc = config.encoder
        rng = lambda g: np.random.default_rng(sub_seed(seed, f"init/{g}"))  # noqa: E731
        groups = {
            "theta_e": encmod.init_encoder(rng("theta_e"), enc),
            "theta_c": ctcmod.init_ctc_head(rng("theta_c"), enc.output_dim, vocab),
            "theta_a": attmod.init_attention(rng("theta_a"), enc.output_dim, vocab,
                                             config.attention),
            "theta_s": advmod.init_adversary(rng("theta_s"), enc.output_dim, len(speakers),
                                             config.adversary),
        }
        return cls(groups, config, vocab, speakers)

    def all(self) -> dict[str, ad.Node]:
        out = {}
        for g in GROUP_PREFIX:
            out.update(self.groups[g])
        return out

    def snapshot(self) -> dict[str, np.ndarray]:
        return {k: v.value.copy() for k, v in self.all().items()}


# --------------------------------------------------------------------------
# losses


def asr_loss(ctc_loss, att_loss, lam: float):
    if not 0.0 <= lam <= 1.0:
        raise ValueError(f"lambda must be in [0, 1], got {lam}")
    return lam * ctc_loss + (1.0 - lam) * att_loss


@dataclass
class Losses:
    L_c: ad.Node | None = None
    L_a: ad.Node | None = None
    L_asr: ad.Node | None = None
    L_spk: ad.Node | None = None
    total: ad.Node | None = None      # what backward() is called on
    objective: float = 0.0            # the logged min-max value


def _targets(batch: Batch, vocab: Vocab) -> list[list[int]]:
    return [vocab.encode(t) for t in batch.transcripts]


def _batch_mean(per_utt: ad.Node) -> ad.Node:
    return ad.mean(per_utt)


def _speaker_classes(batch: Batch, speakers: SpeakerTable) -> np.ndarray:
    return np.array([speakers.index(s) for s in batch.speakers])


def asr_losses(params: ModelParams, phi: ad.Node, mask: np.ndarray, batch: Batch,
               lam: float) -> Losses:
    p = params.all()
    targets = _targets(batch, params.vocab)
    lp = ctcmod.ctc_log_probs(p, phi)
    L_c = _batch_mean(ctcmod.ctc_loss_batch(lp, mask, targets))
    L_a = _batch_mean(attmod.attention_loss_batch(p, phi, mask, targets, params.vocab))
    L_asr = asr_loss(L_c, L_a, lam)
    return Losses(L_c=L_c, L_a=L_a, L_asr=L_asr, total=L_asr, objective=float(L_asr.value))


def speaker_loss(params: ModelParams, phi: ad.Node, mask: np.ndarray, batch: Batch) -> ad.Node:
    p = params.groups["theta_s"]
    lp = advmod.adversary_forward(p, phi, mask)
    return _batch_mean(advmod.adversary_loss_batch(lp, _speaker_classes(batch, params.speakers),
                                                   mask))


def joint_objective(batch: Batch, params: ModelParams, cfg: TrainConfig,
                    with_adversary: bool = True) -> Losses:
    """Graph for min over ASR params, max over theta_s, of L_asr - alpha L_spk.

    ``total = L_asr + L_spk`` with a gradient-reversal node between the
    encoder output and the adversary, so one backward pass hands theta_s the
    plain dL_spk gradient and theta_e dL_asr - alpha dL_spk.
    """
    enc = params.groups["theta_e"]
    phi, mask = encmod.encode_batch(enc, params.config.encoder, batch.features, batch.mask)
    losses = asr_losses(params, phi, mask, batch, cfg.lam)
    if not with_adversary:
        return losses
    L_spk = speaker_loss(params, ad.gradient_reversal(phi, cfg.alpha), mask, batch)
    losses.L_spk = L_spk
    losses.total = losses.L_asr + L_spk
    losses.objective = float(losses.L_asr.value) - cfg.alpha * float(L_spk.value)
    return losses


def stage_losses(stage: str, batch: Batch, params: ModelParams, cfg: TrainConfig,
                 with_adversary: bool = True) -> Losses:
    if stage == "pretrain-asr":
        return joint_objective(batch, params, cfg, with_adversary=False)
    if stage == "joint":
        return joint_objective(batch, params, cfg, with_adversary=with_adversary)
    with ad.no_grad():
        phi, mask = encmod.encode_batch(params.groups["theta_e"], params.config.encoder,
                                        batch.features, batch.mask)
    L_spk = speaker_loss(params, ad.constant(phi.value), mask, batch)
    return Losses(L_spk=L_spk, total=L_spk, objective=float(L_spk.value))


# --------------------------------------------------------------------------
# optimizer


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def clip_by_norm(grads: dict[str, np.ndarray], max_norm: float) -> dict[str, np.ndarray]:
    norm = float(np.sqrt(sum(float(np.sum(g * g)) for g in grads.values())))
    if norm <= max_norm or norm == 0.0:
        return grads
    scale = max_norm / norm
    return {k: g * scale for k, g in grads.items()}


def optimizer_step(params: dict[str, ad.Node], grads: dict[str, np.ndarray], state: AdamState,
                   clip: float | None = 5.0, group: str = "params") -> None:
    """Clip ``grads`` to global norm ``clip`` then apply one Adam update."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise ad.NonFiniteError(f"non-finite gradient in group {group}, parameter {name}")
    if clip is not None:
        grads = clip_by_norm(grads, clip)
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1, c2 = 1.0 - b1 ** state.step, 1.0 - b2 ** state.step
    for name, node in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(node.value)
        m = state.m.get(name, np.zeros_like(g))
        v = state.v.get(name, np.zeros_like(g))
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        state.m[name], state.v[name] = m, v
        node.assign(node.value - state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps))


# --------------------------------------------------------------------------
# stages


@dataclass
class Dataset:
    name: str
    utterances: list[Utterance]


@dataclass
class LogRow:
    epoch: int
    stage: str
    L_c: float | None
    L_a: float | None
    L_spk: float | None
    objective: float


def _mean_or_none(values):
    values = [v for v in values if v is not None]
    return float(np.mean(values)) if values else None


def stage_lr(cfg: TrainConfig, stage: str, group: str) -> float:
    if stage == "joint" and group == "theta_s":
        return cfg.lr * cfg.joint_adv_lr_scale
    return cfg.lr


def run_stage(cfg: TrainConfig, params: ModelParams, dataset: Dataset,
              stage: str | None = None, with_adversary: bool = True,
              epochs: int | None = None, stop=None) -> list[LogRow]:
    """Train the stage's parameter groups in place; returns the per-epoch log.

    ``stop(epoch, row)`` is called after every epoch; a true result ends the
    stage early.
    """
    stage = stage or cfg.stage
    if stage not in STAGES:
        raise ValueError(f"unknown stage {stage!r}")
    if dataset.name != STAGE_DATASET[stage]:
        raise DataError(f"stage {stage} trains on {STAGE_DATASET[stage]}, got {dataset.name}")
    unknown = {u.speaker_id for u in dataset.utterances} - set(params.speakers.speaker_ids)
    if stage != "pretrain-asr" and unknown:
        raise DataError(f"speakers {sorted(unknown)} are not in the adversary's table")
    groups = STAGE_GROUPS[stage]
    if not with_adversary:
        groups = tuple(g for g in groups if g != "theta_s")
    states = {g: AdamState(lr=stage_lr(cfg, stage, g)) for g in groups}
    batches = make_batches(dataset.utterances, cfg.batch_size)
    rng = np.random.default_rng(sub_seed(cfg.seed, f"shuffle/{stage}"))
    n_epochs = cfg.epochs.get(stage, DEFAULT_EPOCHS[stage]) if epochs is None else epochs
    rows = []
    all_params = params.all()
    for epoch in range(n_epochs):
        order = rng.permutation(len(batches))
        acc = {"L_c": [], "L_a": [], "L_spk": [], "objective": []}
        for bi in order:
            for node in all_params.values():
                node.grad = None
            losses = stage_losses(stage, batches[bi], params, cfg, with_adversary)
            ad.backward(losses.total)
            for g in groups:
                group = params.groups[g]
                grads = {k: n.grad for k, n in group.items() if n.grad is not None}
                optimizer_step(group, grads, states[g], cfg.clip, group=g)
            for key in ("L_c", "L_a", "L_spk"):
                node = getattr(losses, key)
                acc[key].append(None if node is None else float(node.value))
            acc["objective"].append(losses.objective)
        row = LogRow(epoch, stage, _mean_or_none(acc["L_c"]), _mean_or_none(acc["L_a"]),
                     _mean_or_none(acc["L_spk"]), float(np.mean(acc["objective"])))
        log.info("%s epoch %d: objective %.4f", stage, epoch, row.objective)
        rows.append(row)
        if stop is not None and stop(epoch, row):
            break
    return rows


def loss_log_csv(rows: Sequence[LogRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(LOG_COLUMNS)
    for r in rows:
        w.writerow([r.epoch, r.stage] + ["" if v is None else repr(float(v))
                                         for v in (r.L_c, r.L_a, r.L_spk, r.objective)])
    return buf.getvalue()


# --------------------------------------------------------------------------
# checkpoints: magic, version, JSON header length, JSON header, float64 payload


def _config_to_dict(cfg: ModelConfig) -> dict:
    return asdict(cfg)


def _config_from_dict(d: dict) -> ModelConfig:
    return ModelConfig(EncoderConfig(**d["encoder"]), AttentionConfig(**d["attention"]),
                       AdversaryConfig(**d["adversary"]))


def save_checkpoint(path: Path, params: ModelParams, train_cfg: TrainConfig, stage: str,
                    extra: dict | None = None) -> None:
    tensors = params.all()
    index, payload, offset = [], bytearray(), 0
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name].value, dtype="<f8")
        index.append({"name": name, "shape": list(arr.shape), "offset": offset})
        payload += arr.tobytes()
        offset += arr.nbytes
    header = {
        "model": _config_to_dict(params.config),
        "train": asdict(train_cfg),
        "seed": train_cfg.seed,
        "stage": stage,
        "vocab": "".join(params.vocab.chars),
        "speakers": list(params.speakers.speaker_ids),
        "tensors": index,
        "extra": extra or {},
    }
    hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
    data = CKPT_MAGIC + struct.pack("<IQ", CKPT_VERSION, len(hbytes)) + hbytes + bytes(payload)
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    tmp.replace(path)


def load_checkpoint(path: Path) -> tuple[ModelParams, dict]:
    data = Path(path).read_bytes()
    if data[:8] != CKPT_MAGIC:
        raise DataError(f"{path}: not a checkpoint file")
    version, hlen = struct.unpack("<IQ", data[8:20])
    if version != CKPT_VERSION:
        raise DataError(f"{path}: unsupported checkpoint version {version}")
    header = json.loads(data[20:20 + hlen])
    base = 20 + hlen
    config = _config_from_dict(header["model"])
    vocab = Vocab(tuple(header["vocab"]))
    speakers = SpeakerTable(header["speakers"])
    params = ModelParams.initialize(config, vocab, speakers, seed=0)
    flat = params.all()
    for entry in header["tensors"]:
        n = int(np.prod(entry["shape"])) if entry["shape"] else 1
        arr = np.frombuffer(data, dtype="<f8", count=n, offset=base + entry["offset"])
        flat[entry["name"]].assign(arr.reshape(entry["shape"]).astype(np.float64))
    return params, header
