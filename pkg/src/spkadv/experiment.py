"""End-to-end experiment plumbing shared by the CLI and the acceptance suite.

A run is: synthesize (or load) a corpus, pretrain the ASR branch, pretrain the
adversary, then for every alpha run the joint stage and the adversary refit
from the same pretrained snapshot.  Each resulting encoder is then attacked.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import adversary as advmod
from . import asr_eval
from . import attention as attmod
from . import ctc as ctcmod
from . import encoder as encmod
from . import speaker_eval as se
from .adversary import AdversaryConfig, SpeakerTable
from .data import Corpus, SplitScheme, Utterance, build_trials
from .trainer import ModelConfig, ModelParams, TrainConfig, Dataset, run_stage, sub_seed

log = logging.getLogger(__name__)

METRICS = ("wer", "cer", "acc", "eer", "eer-groups", "eer-plda", "silhouette")
DEFAULT_METRICS = ("wer", "acc", "eer", "silhouette")


@dataclass
class EvalConfig:
    attacker_epochs: int = 15
    attacker_lr: float = 3e-3
    enroll_budget_frames: int = 60
    decoder: str = "attention"      # or "ctc"
    beam_size: int = 4
    max_len: int = 12
    plda_iters: int = 10
    embedding: se.EmbeddingConfig = field(default_factory=se.EmbeddingConfig)


def datasets(corpus: Corpus, splits: dict[str, list[str]]) -> dict[str, list[Utterance]]:
    byid = corpus.by_id()
    get = lambda name: [byid[i] for i in splits[name]]  # noqa: E731
    out = {name: get(name) for name in splits}
    out["data-adv"] = out["train-adv"]
    out["data-full"] = out["train-adv"] + out["train-extra"]
    out["train-spkv"] = out["train-adv"] + out["train-extra"]
    return out


def adv_speakers(sets) -> SpeakerTable:
    return SpeakerTable(sorted({u.speaker_id for u in sets["train-adv"]}))


def train_models(corpus: Corpus, splits, model_cfg: ModelConfig, train_cfg: TrainConfig,
                 alphas, stages_log: list | None = None) -> dict[float, ModelParams]:
    """Shared pretraining, then joint + refit per alpha from the same snapshot."""
    sets = datasets(corpus, splits)
    params = ModelParams.initialize(model_cfg, corpus.vocab, adv_speakers(sets), train_cfg.seed)
    rows = run_stage(train_cfg, params, Dataset("data-full", sets["data-full"]), "pretrain-asr")
    rows += run_stage(train_cfg, params, Dataset("data-adv", sets["data-adv"]), "pretrain-adv")
    snap = params.snapshot()
    out = {}
    for alpha in alphas:
        p = ModelParams.initialize(model_cfg, corpus.vocab, params.speakers, train_cfg.seed)
        for k, node in p.all().items():
            node.assign(snap[k])
        cfg = TrainConfig(**{**train_cfg.__dict__, "alpha": float(alpha)})
        rows_a = run_stage(cfg, p, Dataset("data-adv", sets["data-adv"]), "joint")
        rows_a += run_stage(cfg, p, Dataset("data-adv", sets["data-adv"]), "adv-refit")
        if stages_log is not None:
            stages_log.append((alpha, rows + rows_a))
        out[float(alpha)] = p
    return out


# --------------------------------------------------------------------------
# representations


def represent(utts, params: ModelParams | None) -> list[se.Sample]:
    """Raw features when ``params`` is None, otherwise the encoder output phi."""
    if params is None:
        return [se.Sample(u.id, u.features, u.speaker_id) for u in utts]
    enc, cfg = params.groups["theta_e"], params.config.encoder
    return [se.Sample(u.id, encmod.encode(enc, cfg, u.features, u.id).frames, u.speaker_id)
            for u in utts]


def decode(params: ModelParams, utts, decoder: str = "attention", beam_size: int = 4,
           max_len: int = 12) -> list[str]:
    p, enc = params.all(), params.groups["theta_e"]
    hyps = []
    for u in utts:
        phi = encmod.encode(enc, params.config.encoder, u.features, u.id).frames
        if decoder == "ctc":
            with ctcmod.ad.no_grad():
                lp = ctcmod.ctc_log_probs(p, ctcmod.ad.constant(phi)).value
            ids = ctcmod.ctc_greedy_decode(lp)
        elif decoder == "attention":
            ids = attmod.beam_decode(p, phi, params.vocab, beam_size, max_len)
        else:
            raise ValueError(f"unknown decoder {decoder!r}")
        hyps.append(params.vocab.decode(ids))
    return hyps


def closed_set_acc(params: ModelParams | None, sets, cfg: EvalConfig, seed: int) -> float:
    """phi: the refit adversary of the checkpoint.  features: a fresh attacker
    with the same architecture trained on train-adv."""
    speakers = adv_speakers(sets)
    test = represent(sets["test-adv"], params)
    labels = [speakers.index(s.speaker_id) for s in test]
    if params is None:
        clf = se.train_closed_set_attacker(represent(sets["train-adv"], None), speakers,
                                           AdversaryConfig(), cfg.attacker_epochs,
                                           cfg.attacker_lr, 8, seed)
    else:
        clf = params.groups["theta_s"]
    return se.closed_set_accuracy(se.classify(clf, test), labels)


@dataclass
class OpenSetResult:
    eer: float
    eer_groups: dict[str, float]
    eer_plda: float
    silhouette: float
    scores: list[tuple[str, str, float, bool]]
    roc: se.EERResult


def open_set(params: ModelParams | None, sets, cfg: EvalConfig, seed: int,
             with_plda: bool = True) -> OpenSetResult:
    emb_cfg = se.EmbeddingConfig(**{**cfg.embedding.__dict__,
                                    "seed": sub_seed(seed, "xvector")})
    extractor = se.train_embedding_net(represent(sets["train-spkv"], params), emb_cfg)
    trials = build_trials(sets["open-set"], cfg.enroll_budget_frames, sub_seed(seed, "trials"))
    pool = {u.id: u for u in sets["open-set"]}
    needed = sorted({i for ids in trials.enrollment.values() for i in ids}
                    | set(trials.test_utterances))
    embs = {e.utterance_id: e for e in
            se.extract_embeddings(extractor, represent([pool[i] for i in needed], params))}
    models = {spk: se.enroll([embs[i] for i in ids], spk)
              for spk, ids in trials.enrollment.items()}
    scores = [(spk, utt, se.cosine_score(models[spk], embs[utt]), gen)
              for spk, utt, gen in trials.trials]
    roc = _eer(scores)
    groups = {}
    for g in sorted(set(trials.groups.values())):
        sub = [s for s in scores if trials.groups[s[0]] == g
               and trials.groups.get(pool[s[1]].speaker_id) == g]
        if any(s[3] for s in sub) and not all(s[3] for s in sub):
            groups[g] = 100.0 * _eer(sub).eer
    eer_plda = float("nan")
    if with_plda:
        train = se.extract_embeddings(extractor, represent(sets["train-spkv"], params))
        X = np.stack([e.normalized().vector for e in train])
        model = se.plda_train(X, [e.speaker_id for e in train], cfg.plda_iters)
        enr = {spk: np.mean([embs[i].normalized().vector for i in ids], axis=0)
               for spk, ids in trials.enrollment.items()}
        plda_scores = [(spk, utt, se.plda_score(model, enr[spk], embs[utt].normalized().vector),
                        gen) for spk, utt, gen in trials.trials]
        eer_plda = 100.0 * _eer(plda_scores).eer
    test_ids = trials.test_utterances
    sil = se.silhouette(np.stack([embs[i].vector for i in test_ids]),
                        [pool[i].speaker_id for i in test_ids])
    return OpenSetResult(100.0 * roc.eer, groups, eer_plda, sil, scores, roc)


def _eer(scores) -> se.EERResult:
    return se.eer([s for _, _, s, g in scores if g], [s for _, _, s, g in scores if not g])


def evaluate(params: ModelParams | None, sets, metrics, cfg: EvalConfig, seed: int) -> dict:
    """Metric name -> value (numbers, or a dict for eer-groups).  ASR metrics
    are undefined for raw features and come back as None."""
    unknown = [m for m in metrics if m not in METRICS]
    if unknown:
        raise ValueError(f"unknown metrics {unknown}; choose from {', '.join(METRICS)}")
    out = {}
    if {"wer", "cer"} & set(metrics):
        if params is None:
            out.update({m: None for m in ("wer", "cer") if m in metrics})
        else:
            test = sets["test-adv"]
            hyps = decode(params, test, cfg.decoder, cfg.beam_size, cfg.max_len)
            refs = [u.transcript for u in test]
            if "wer" in metrics:
                out["wer"] = asr_eval.wer(refs, hyps)
            if "cer" in metrics:
                out["cer"] = asr_eval.cer(refs, hyps)
    if "acc" in metrics:
        out["acc"] = closed_set_acc(params, sets, cfg, seed)
    if {"eer", "eer-groups", "eer-plda", "silhouette"} & set(metrics):
        res = open_set(params, sets, cfg, seed, with_plda="eer-plda" in metrics)
        full = {"eer": res.eer, "eer-groups": res.eer_groups, "eer-plda": res.eer_plda,
                "silhouette": res.silhouette}
        out.update({m: full[m] for m in metrics if m in full})
        out["_open_set"] = res
    return out
