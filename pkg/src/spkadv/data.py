"""Synthetic speech-like corpora, split construction, trial lists and batching.

Content is rendered from per-symbol feature templates; speaker identity is a
per-speaker affine channel (offset, diagonal gain, spectral tilt) whose size
is set by ``speaker_strength``.  At strength 0 no speaker information exists.
"""

from __future__ import annotations

import json
import logging
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .ctc import Vocab, min_frames
from .layers import subsampled_length

log = logging.getLogger(__name__)

SPLITS = ("train-adv", "dev-adv", "test-adv", "train-extra", "open-set")

MANIFEST_MAGIC = "spkadv-manifest"
BLOB_MAGIC = b"SPKADVF1"
FORMAT_VERSION = 1


class DataError(ValueError):
    pass


@dataclass
class Utterance:
    id: str
    features: np.ndarray
    transcript: str
    speaker_id: str
    group: str = "A"

    @property
    def num_frames(self) -> int:
        return self.features.shape[0]


@dataclass(frozen=True)
class CorpusConfig:
    num_speakers: int = 24
    utts_per_speaker: int = 40
    chars: str = "abcdefgh"
    min_symbols: int = 2
    max_symbols: int = 5
    feature_dim: int = 16
    speaker_strength: float = 1.0
    noise_std: float = 0.3
    segment_frames: tuple[int, int] = (5, 8)
    gap_frames: tuple[int, int] = (0, 3)
    max_frames: int = 3000
    seed: int = 0


@dataclass
class Corpus:
    utterances: list[Utterance]
    vocab: Vocab
    config: CorpusConfig | None = None

    def by_id(self) -> dict[str, Utterance]:
        return {u.id: u for u in self.utterances}


def _speaker_channels(rng, n: int, F: int, strength: float):
    offsets = rng.normal(size=(n, F))
    log_gains = rng.normal(scale=0.25, size=(n, F))
    tilts = rng.normal(size=n)[:, None] * np.linspace(-1.0, 1.0, F)[None, :]
    group_offset = rng.normal(scale=0.5, size=(2, F))
    return (strength * offsets, np.exp(strength * log_gains), strength * tilts,
            strength * group_offset)


def _render(rng, symbols: list[int], templates: np.ndarray, silence: np.ndarray,
            cfg: CorpusConfig) -> np.ndarray:
    lo, hi = cfg.segment_frames
    glo, ghi = cfg.gap_frames
    segs = [np.tile(silence, (int(rng.integers(1, 4)), 1))]
    for i, s in enumerate(symbols):
        if i and symbols[i - 1] == s:
            gap = max(int(rng.integers(glo, ghi + 1)), 4)
        else:
            gap = int(rng.integers(glo, ghi + 1))
        if i and gap:
            segs.append(np.tile(silence, (gap, 1)))
        segs.append(np.tile(templates[s], (int(rng.integers(lo, hi + 1)), 1)))
    segs.append(np.tile(silence, (int(rng.integers(1, 4)), 1)))
    clean = np.concatenate(segs)
    return clean + rng.normal(scale=cfg.noise_std, size=clean.shape)


def generate_synthetic_corpus(cfg: CorpusConfig) -> Corpus:
    if cfg.num_speakers < 4:
        raise DataError("need at least 4 speakers")
    if cfg.speaker_strength < 0:
        raise DataError("speaker_strength must be >= 0")
    if not cfg.chars or cfg.min_symbols < 0 or cfg.max_symbols < cfg.min_symbols:
        raise DataError("vocab too small for requested transcripts")
    if cfg.segment_frames[0] < 4:
        raise DataError("segments shorter than 4 frames can vanish under subsampling")
    vocab = Vocab(tuple(cfg.chars))
    rng = np.random.default_rng(cfg.seed)
    F = cfg.feature_dim
    templates = np.zeros((len(cfg.chars) + 1, F))
    templates[1:] = rng.normal(size=(len(cfg.chars), F))
    silence = rng.normal(scale=0.2, size=F)
    offsets, gains, tilts, group_off = _speaker_channels(rng, cfg.num_speakers, F,
                                                         cfg.speaker_strength)
    width = len(str(cfg.num_speakers - 1))
    utts = []
    for s in range(cfg.num_speakers):
        spk = f"spk{s:0{width}d}"
        group = "AB"[s % 2]
        for u in range(cfg.utts_per_speaker):
            M = int(rng.integers(cfg.min_symbols, cfg.max_symbols + 1))
            symbols = rng.integers(1, len(cfg.chars) + 1, size=M).tolist()
            content = _render(rng, symbols, templates, silence, cfg)
            feats = content * gains[s] + offsets[s] + tilts[s] + group_off[s % 2]
            feats = feats[:cfg.max_frames]
            utts.append(Utterance(f"{spk}-u{u:03d}", feats, vocab.decode(symbols), spk, group))
    return Corpus(utts, vocab, cfg)


def check_feasible(utt: Utterance, vocab: Vocab, downsample: int) -> None:
    need = min_frames(vocab.encode(utt.transcript))
    have = subsampled_length(utt.num_frames, downsample)
    if need > have:
        raise DataError(f"{utt.id}: {have} encoded frames cannot carry "
                        f"{len(utt.transcript)} symbols")


# --------------------------------------------------------------------------
# splits


@dataclass(frozen=True)
class SplitScheme:
    adv_speakers: int = 8
    open_speakers: int = 6
    dev_per_speaker: int = 2
    test_per_speaker: int = 2


def _speakers_in_order(records) -> list[str]:
    return sorted({r.speaker_id for r in records})


def make_splits(records: Sequence, scheme: SplitScheme) -> dict[str, list[str]]:
    """Assign every utterance id to exactly one split.

    The first ``adv_speakers`` speakers (sorted id order) form the closed set:
    per speaker, ``test_per_speaker`` utterances go to test-adv,
    ``dev_per_speaker`` to dev-adv and the rest to train-adv.  The next
    ``open_speakers`` are held out for verification; the remainder are extra
    training speakers.
    """
    speakers = _speakers_in_order(records)
    if scheme.adv_speakers + scheme.open_speakers > len(speakers):
        raise DataError(f"scheme needs {scheme.adv_speakers + scheme.open_speakers} "
                        f"speakers, corpus has {len(speakers)}")
    adv = speakers[:scheme.adv_speakers]
    opn = set(speakers[scheme.adv_speakers:scheme.adv_speakers + scheme.open_speakers])
    per_spk: dict[str, list[str]] = {}
    for r in records:
        per_spk.setdefault(r.speaker_id, []).append(r.id)
    splits = {name: [] for name in SPLITS}
    need = scheme.dev_per_speaker + scheme.test_per_speaker + 1
    for spk in adv:
        ids = sorted(per_spk[spk])
        if len(ids) < max(need, 5):
            raise DataError(f"speaker {spk} has {len(ids)} utterances, needs >= {max(need, 5)}")
        t, d = scheme.test_per_speaker, scheme.dev_per_speaker
        splits["test-adv"] += ids[:t]
        splits["dev-adv"] += ids[t:t + d]
        splits["train-adv"] += ids[t + d:]
    for spk in speakers[scheme.adv_speakers:]:
        key = "open-set" if spk in opn else "train-extra"
        splits[key] += sorted(per_spk[spk])
    return splits


# --------------------------------------------------------------------------
# trials


@dataclass
class TrialSet:
    enrollment: dict[str, list[str]]
    trials: list[tuple[str, str, bool]]
    groups: dict[str, str] = field(default_factory=dict)

    @property
    def test_utterances(self) -> list[str]:
        return list(dict.fromkeys(u for _, u, _ in self.trials))


def build_trials(pool: Sequence[Utterance], enroll_budget_frames: int, seed: int) -> TrialSet:
    """Greedy per-speaker enrollment up to a frame budget; every remaining
    utterance becomes a test segment scored against every enrolled speaker."""
    by_spk: dict[str, list[Utterance]] = {}
    for u in pool:
        by_spk.setdefault(u.speaker_id, []).append(u)
    if len(by_spk) < 2:
        raise DataError("need at least 2 open-set speakers")
    rng = np.random.default_rng(seed)
    enrollment, tests, groups = {}, [], {}
    for spk in sorted(by_spk):
        utts = sorted(by_spk[spk], key=lambda u: u.id)
        order = rng.permutation(len(utts))
        chosen, frames, k = [], 0, 0
        while k < len(order) and frames < enroll_budget_frames:
            chosen.append(utts[order[k]])
            frames += utts[order[k]].num_frames
            k += 1
        rest = [utts[i] for i in order[k:]]
        if frames < enroll_budget_frames or not rest:
            log.warning("speaker %s excluded: %d frames available for enrollment, "
                        "%d left for trials", spk, frames, len(rest))
            continue
        enrollment[spk] = [u.id for u in chosen]
        groups[spk] = utts[0].group
        tests += sorted(rest, key=lambda u: u.id)
    if len(enrollment) < 2:
        raise DataError("fewer than 2 speakers have enough data for enrollment")
    spk_of = {u.id: u.speaker_id for u in pool}
    trials = [(spk, u.id, spk_of[u.id] == spk) for spk in enrollment for u in tests]
    return TrialSet(enrollment, trials, groups)


# --------------------------------------------------------------------------
# batching


@dataclass
class Batch:
    ids: list[str]
    features: np.ndarray        # (B, T, F), zero padded
    mask: np.ndarray            # (B, T) bool
    transcripts: list[str]
    speakers: list[str]

    def __len__(self):
        return len(self.ids)


def pad(utts: Sequence[Utterance], length: int | None = None) -> Batch:
    T = max(u.num_frames for u in utts) if length is None else length
    F = utts[0].features.shape[1]
    feats = np.zeros((len(utts), T, F))
    mask = np.zeros((len(utts), T), bool)
    for i, u in enumerate(utts):
        feats[i, :u.num_frames] = u.features
        mask[i, :u.num_frames] = True
    return Batch([u.id for u in utts], feats, mask, [u.transcript for u in utts],
                 [u.speaker_id for u in utts])


def batch(utts: Iterable[Utterance], max_batch: int) -> list[Batch]:
    """Sort by length, chunk into groups of ``max_batch``, pad within each."""
    if max_batch < 1:
        raise ValueError("max_batch must be >= 1")
    ordered = sorted(utts, key=lambda u: (u.num_frames, u.id))
    return [pad(ordered[i:i + max_batch]) for i in range(0, len(ordered), max_batch)]


# --------------------------------------------------------------------------
# on-disk format: line-delimited manifest + little-endian float64 blob


def write_corpus(directory: Path, corpus: Corpus, splits: dict[str, list[str]]) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    split_of = {uid: name for name, ids in splits.items() for uid in ids}
    blob = bytearray(BLOB_MAGIC + struct.pack("<I", FORMAT_VERSION))
    lines = []
    header = {"format": MANIFEST_MAGIC, "version": FORMAT_VERSION,
              "vocab": "".join(corpus.vocab.chars),
              "feature_dim": int(corpus.utterances[0].features.shape[1]),
              "config": _config_dict(corpus.config)}
    lines.append(json.dumps(header, sort_keys=True))
    for u in corpus.utterances:
        offset = len(blob)
        blob += u.features.astype("<f8").tobytes()
        lines.append(json.dumps({
            "id": u.id, "offset": offset, "frames": u.num_frames,
            "transcript": u.transcript, "speaker_id": u.speaker_id, "group": u.group,
            "split": split_of.get(u.id)}, sort_keys=True))
    _atomic_write(directory / "manifest.jsonl", ("\n".join(lines) + "\n").encode("utf-8"))
    _atomic_write(directory / "features.bin", bytes(blob))


def read_corpus(directory: Path) -> tuple[Corpus, dict[str, list[str]]]:
    directory = Path(directory)
    try:
        lines = (directory / "manifest.jsonl").read_text(encoding="utf-8").splitlines()
        blob = (directory / "features.bin").read_bytes()
    except OSError as exc:
        raise DataError(f"cannot read corpus in {directory}: {exc}") from exc
    header = json.loads(lines[0])
    if header.get("format") != MANIFEST_MAGIC or header.get("version") != FORMAT_VERSION:
        raise DataError(f"{directory}/manifest.jsonl: unsupported header {header}")
    if blob[:8] != BLOB_MAGIC or struct.unpack("<I", blob[8:12])[0] != FORMAT_VERSION:
        raise DataError(f"{directory}/features.bin: bad magic header")
    F = header["feature_dim"]
    vocab = Vocab(tuple(header["vocab"]))
    utts, splits = [], {name: [] for name in SPLITS}
    for line in lines[1:]:
        rec = json.loads(line)
        n = rec["frames"] * F
        feats = np.frombuffer(blob, dtype="<f8", count=n, offset=rec["offset"])
        utts.append(Utterance(rec["id"], feats.reshape(rec["frames"], F).astype(np.float64),
                              rec["transcript"], rec["speaker_id"], rec["group"]))
        if rec["split"] is not None:
            if rec["split"] not in splits:
                raise DataError(f"unknown split {rec['split']!r}")
            splits[rec["split"]].append(rec["id"])
    cfg = header.get("config")
    cfg = CorpusConfig(**{k: tuple(v) if isinstance(v, list) else v for k, v in cfg.items()}) \
        if cfg else None
    return Corpus(utts, vocab, cfg), splits


def _config_dict(cfg: CorpusConfig | None):
    return None if cfg is None else asdict(cfg)


def _atomic_write(path: Path, data: bytes) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    tmp.replace(path)
