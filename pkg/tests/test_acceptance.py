"""Acceptance suite: one PASS/FAIL line per criterion.

Run with ``pytest tests/test_acceptance.py -v`` (lines appear inline) or
``python tests/test_acceptance.py`` for just the summary.
"""

import itertools
import json
import statistics
import sys
import time
from fractions import Fraction
from functools import lru_cache
from pathlib import Path

import numpy as np
import pytest

from spkadv import adversary as advmod
from spkadv import asr_eval, cli, ctc, data
from spkadv import attention as attmod
from spkadv import autodiff as ad
from spkadv import encoder as encmod
from spkadv import experiment as X
from spkadv import layers as L
from spkadv import speaker_eval as se
from spkadv import trainer as tr

# tolerances and budgets
CTC_TOL, CTC_BUDGET = 1e-10, 60
GRAD_TOL, GRAD_BUDGET = 1e-4, 300
GRL_TOL = 1e-9
OVERFIT_CER, OVERFIT_EPOCHS, OVERFIT_BUDGET = 2.0, 200, 600
ACC_DROP, RAW_ACC_MIN, REPRO_BUDGET, REPRO_SEEDS = 30.0, 90.0, 1800, (0, 1, 2)
EER_SLACK = 5.0
PLDA_SLACK, PLDA_RECOVERY = 1e-8, 0.15
PAD_TOL = 1e-9


def report(n, ok, detail):
    line = f"CRITERION {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
    print("\n" + line if "pytest" in sys.modules else line, flush=True)
    return ok


# --------------------------------------------------------------------------
# 1. CTC oracle


def criterion_1():
    rng = np.random.default_rng(2024)
    start, worst, n = time.perf_counter(), 0.0, 0
    while n < 200:
        T, V, M = int(rng.integers(1, 5)), int(rng.integers(2, 4)), int(rng.integers(0, 3))
        y = rng.integers(1, V, size=M).tolist()
        if ctc.min_frames(y) > T:
            continue
        z = rng.normal(scale=2.0, size=(T, V))
        p = np.exp(z) / np.exp(z).sum(axis=1, keepdims=True)
        worst = max(worst, abs(ctc.ctc_loss(np.log(p), y).value - ctc.ctc_brute_force(p, y)))
        n += 1
    secs = time.perf_counter() - start
    return report(1, worst < CTC_TOL and secs < CTC_BUDGET,
                  f"CTC vs brute force, 200 instances: max |diff| {worst:.2e} "
                  f"(< {CTC_TOL:g}), {secs:.1f}s")


# --------------------------------------------------------------------------
# 2. gradient suite


def _grad_cases():
    rng = np.random.default_rng(7)
    vocab = ctc.Vocab(tuple("abc"))
    mask = np.array([[1, 1, 1, 1], [1, 1, 1, 0]], bool)
    x = rng.normal(size=(2, 4, 3))
    proj = lambda shape: ad.constant(np.random.default_rng(11).normal(size=shape))  # noqa: E731

    def randomize(p, scale=0.6):
        for node in p.values():
            node.assign(rng.normal(scale=scale, size=node.shape))
        return p

    lin = L.init_linear(rng, "lin", 3, 5)
    rec = randomize(L.init_recurrent(rng, "rec", 3, 4))
    bi = randomize(L.init_bidirectional(rng, "bi", 3, 3))
    enc_cfg = encmod.EncoderConfig(input_dim=3, hidden_dim=3, num_layers=2, downsample_factor=2)
    enc = encmod.init_encoder(rng, enc_cfg)
    att = randomize(attmod.init_attention(rng, 3, vocab, attmod.AttentionConfig(
        embed_dim=3, decoder_dim=4, attention_dim=4, conv_channels=2)), 0.5)
    adv = randomize(advmod.init_adversary(rng, 3, 3, advmod.AdversaryConfig(hidden_dim=3)))
    ctc_head = ctc.init_ctc_head(rng, 3, vocab)
    cases = {
        "linear": (lambda n: ad.sum_(ad.tanh(L.linear(lin, "lin", n)) * proj((2, 4, 5))), lin),
        "recurrent": (lambda n: ad.sum_(L.recurrent_forward(rec, "rec", n, mask)
                                        * proj((2, 4, 4))), rec),
        "bidirectional": (lambda n: ad.sum_(L.bidirectional_forward(bi, "bi", n, mask)
                                            * proj((2, 4, 6))), bi),
        "subsample": (lambda n: ad.sum_(ad.tanh(L.subsample(n, mask, 2)[0]) * proj((2, 2, 3))),
                      {}),
        "stats_pool": (lambda n: ad.sum_(L.stats_pool(n, mask) * proj((2, 6))), {}),
        "encoder": (lambda n: ad.sum_(encmod.encode_batch(enc, enc_cfg, n, mask)[0]
                                      * proj((2, 2, 6))), enc),
        "ctc_loss": (lambda n: ad.sum_(ctc.ctc_loss_batch(ctc.ctc_log_probs(ctc_head, n), mask,
                                                          [[1, 2], [3]])), ctc_head),
        "attention_loss": (lambda n: ad.sum_(attmod.attention_loss_batch(
            att, n, mask, [[1, 2, 1], [3]], vocab)), att),
        "adversarial_loss": (lambda n: ad.sum_(advmod.adversary_loss_batch(
            advmod.adversary_forward(adv, ad.gradient_reversal(n, 0.5), mask),
            np.array([0, 2]), mask)), adv),
    }
    return x, cases


def criterion_2():
    start = time.perf_counter()
    x, cases = _grad_cases()
    errs = {}
    for name, (f, params) in cases.items():
        if name == "adversarial_loss":
            # the reversal node makes the input gradient -alpha times the true
            # derivative by design; check the un-reversed graph w.r.t. inputs
            _, adv = cases[name]
            e_in = ad.grad_check(lambda n: ad.sum_(advmod.adversary_loss_batch(
                advmod.adversary_forward(adv, n, np.ones((2, 4), bool)), np.array([0, 2]),
                np.ones((2, 4), bool))), x)
        else:
            e_in = ad.grad_check(f, x)
        e_par = ad.grad_check_params(lambda: f(ad.constant(x)), list(params.values())) \
            if params else 0.0
        errs[name] = max(e_in, e_par)
    secs = time.perf_counter() - start
    worst = max(errs, key=errs.get)
    return report(2, errs[worst] < GRAD_TOL and secs < GRAD_BUDGET,
                  f"grad checks over {len(errs)} components: max rel err {errs[worst]:.2e} "
                  f"({worst}; < {GRAD_TOL:g}), {secs:.1f}s")


# --------------------------------------------------------------------------
# 3. gradient-reversal two-pass decomposition


def criterion_3():
    corpus = data.generate_synthetic_corpus(data.CorpusConfig(num_speakers=4, utts_per_speaker=3,
                                                              seed=1))
    speakers = advmod.SpeakerTable(sorted({u.speaker_id for u in corpus.utterances}))
    params = tr.ModelParams.initialize(tr.ModelConfig(), corpus.vocab, speakers, seed=1)
    batch = data.pad(corpus.utterances[:4])
    enc = params.groups["theta_e"]

    def grads(root):
        for n in params.all().values():
            n.grad = None
        ad.backward(root)
        return {k: n.grad.copy() for k, n in enc.items()}

    phi, mask = encmod.encode_batch(enc, params.config.encoder, batch.features, batch.mask)
    g_asr = grads(tr.asr_losses(params, phi, mask, batch, 0.5).L_asr)
    phi, mask = encmod.encode_batch(enc, params.config.encoder, batch.features, batch.mask)
    g_spk = grads(tr.speaker_loss(params, phi, mask, batch))
    worst = {}
    for alpha in (0.0, 0.5, 2.0):
        g = grads(tr.joint_objective(batch, params, tr.TrainConfig(alpha=alpha)).total)
        worst[alpha] = max(float(np.max(np.abs(g[k] - (g_asr[k] - alpha * g_spk[k])))) for k in g)
    ok = all(v <= GRL_TOL for v in worst.values())
    return report(3, ok, "theta_e grad == g_asr - alpha g_spk, max |diff| "
                  + ", ".join(f"alpha={a:g}: {v:.1e}" for a, v in worst.items())
                  + f" (<= {GRL_TOL:g})")


# --------------------------------------------------------------------------
# 4. overfit


def criterion_4():
    start = time.perf_counter()
    corpus = data.generate_synthetic_corpus(data.CorpusConfig(
        num_speakers=4, utts_per_speaker=5, chars="abcde", seed=0))
    speakers = advmod.SpeakerTable(sorted({u.speaker_id for u in corpus.utterances}))
    cfg = tr.TrainConfig(alpha=0.0)
    params = tr.ModelParams.initialize(tr.ModelConfig(), corpus.vocab, speakers, cfg.seed)
    utts = corpus.utterances
    refs = [u.transcript for u in utts]
    history = []

    def stop(epoch, row):
        if (epoch + 1) % 10:
            return False
        rate = asr_eval.cer(refs, X.decode(params, utts))
        history.append((epoch + 1, rate))
        return rate <= OVERFIT_CER

    tr.run_stage(cfg, params, tr.Dataset("data-full", utts), "pretrain-asr",
                 epochs=OVERFIT_EPOCHS, stop=stop)
    secs = time.perf_counter() - start
    ep, rate = history[-1]
    return report(4, rate <= OVERFIT_CER and secs < OVERFIT_BUDGET,
                  f"20 utts / 4 speakers / vocab 5: training-set CER {rate:.2f}% after {ep} "
                  f"epochs (<= {OVERFIT_CER:g}% within {OVERFIT_EPOCHS}), {secs:.0f}s")


# --------------------------------------------------------------------------
# 5 and 6. directional reproduction, shared runs


@lru_cache(maxsize=None)
def reproduction_runs():
    start = time.perf_counter()
    runs = []
    for seed in REPRO_SEEDS:
        corpus = data.generate_synthetic_corpus(data.CorpusConfig(seed=seed))
        splits = data.make_splits(corpus.utterances, data.SplitScheme())
        sets = X.datasets(corpus, splits)
        ecfg = X.EvalConfig()
        row = {"seed": seed,
               "features": X.evaluate(None, sets, ["acc", "eer"], ecfg, seed)}
        models = X.train_models(corpus, splits, tr.ModelConfig(), tr.TrainConfig(seed=seed),
                                [0.0, 2.0])
        for alpha, params in models.items():
            row[alpha] = X.evaluate(params, sets, ["cer", "acc", "eer"], ecfg, seed)
        for v in row.values():
            if isinstance(v, dict):
                v.pop("_open_set", None)
        runs.append(row)
        print(f"  seed {seed}: " + json.dumps({str(k): v for k, v in row.items()
                                               if k != "seed"}), flush=True)
    return runs, time.perf_counter() - start


def criterion_5():
    runs, secs = reproduction_runs()
    raw = statistics.median(r["features"]["acc"] for r in runs)
    acc0 = [r[0.0]["acc"] for r in runs]
    acc2 = [r[2.0]["acc"] for r in runs]
    drop = statistics.median(a - b for a, b in zip(acc0, acc2))
    ok = raw > RAW_ACC_MIN and drop >= ACC_DROP and secs < REPRO_BUDGET
    return report(5, ok, f"closed-set ACC alpha=0 {acc0} vs alpha=2 {acc2}: median drop "
                  f"{drop:.2f} (>= {ACC_DROP:g}); raw-feature ACC median {raw:.1f} "
                  f"(> {RAW_ACC_MIN:g}); {secs:.0f}s")


def criterion_6():
    runs, _ = reproduction_runs()
    e0 = [round(r[0.0]["eer"], 2) for r in runs]
    e2 = [round(r[2.0]["eer"], 2) for r in runs]
    change = statistics.median(r[2.0]["eer"] - r[0.0]["eer"] for r in runs)
    return report(6, change >= -EER_SLACK,
                  f"pooled EER % alpha=0 {e0} vs alpha=2 {e2}: median change {change:+.2f} "
                  f"(must not fall by more than {EER_SLACK:g})")


# --------------------------------------------------------------------------
# 7. EER oracle


def _eer_oracle(genuine, impostor):
    ths = sorted(set(genuine) | set(impostor)) + [float("inf")]
    pts = [(Fraction(sum(s >= t for s in impostor), len(impostor)),
            Fraction(sum(s < t for s in genuine), len(genuine))) for t in ths]
    best = min(max(p) for p in pts)
    for (x1, y1), (x2, y2) in itertools.combinations(pts, 2):
        d1, d2 = x1 - y1, x2 - y2
        if d1 * d2 < 0:
            best = min(best, x1 + d1 / (d1 - d2) * (x2 - x1))
    return best


def criterion_7():
    rng = np.random.default_rng(99)
    mismatches = 0
    for _ in range(100):
        g = rng.integers(0, 10, size=rng.integers(1, 9)).astype(float).tolist()
        i = rng.integers(0, 10, size=rng.integers(1, 9)).astype(float).tolist()
        mismatches += se.eer(g, i).eer != float(_eer_oracle(g, i))
    sep = se.eer([2.0, 3.0], [0.0, 1.0]).eer
    same = se.eer([1.0, 2.0, 3.0], [3.0, 2.0, 1.0]).eer
    ok = mismatches == 0 and sep == 0.0 and same == 0.5
    return report(7, ok, f"EER vs exhaustive sweep oracle: {mismatches}/100 mismatches; "
                  f"separated {sep}, identical {same}")


# --------------------------------------------------------------------------
# 8. PLDA


def criterion_8():
    worst_drop = 0.0
    for seed in range(10):
        rng = np.random.default_rng(seed)
        D = int(rng.integers(2, 5))
        A, B = rng.normal(size=(D, D)), rng.normal(size=(D, D))
        ys = rng.multivariate_normal(np.zeros(D), A @ A.T + 0.1 * np.eye(D), size=15)
        X_ = np.concatenate([y + rng.multivariate_normal(np.zeros(D), B @ B.T + 0.1 * np.eye(D),
                                                         size=4) for y in ys])
        lls = se.plda_train(X_, np.repeat(np.arange(15), 4), iters=20).log_likelihoods
        worst_drop = max(worst_drop, max(a - b for a, b in zip(lls, lls[1:])))
    rng = np.random.default_rng(0)
    Sb, Sw = np.array([[2.0, 0.6], [0.6, 1.0]]), np.array([[0.5, -0.1], [-0.1, 0.3]])
    ys = rng.multivariate_normal(np.zeros(2), Sb, size=400)
    X_ = np.concatenate([y + rng.multivariate_normal(np.zeros(2), Sw, size=5) for y in ys])
    m = se.plda_train(X_, np.repeat(np.arange(400), 5), iters=50)
    eb = np.linalg.norm(m.between - Sb) / np.linalg.norm(Sb)
    ew = np.linalg.norm(m.within - Sw) / np.linalg.norm(Sw)
    ok = worst_drop <= PLDA_SLACK and eb < PLDA_RECOVERY and ew < PLDA_RECOVERY
    return report(8, ok, f"EM worst likelihood drop {worst_drop:.1e} (<= {PLDA_SLACK:g}); "
                  f"recovery at n=2000: Sb {eb:.3f}, Sw {ew:.3f} (< {PLDA_RECOVERY:g})")


# --------------------------------------------------------------------------
# 9. WER oracle


def _recursive(ref, hyp):
    @lru_cache(maxsize=None)
    def d(i, j):
        if not i or not j:
            return i + j
        return min(d(i - 1, j - 1) + (ref[i - 1] != hyp[j - 1]), d(i - 1, j) + 1, d(i, j - 1) + 1)
    return d(len(ref), len(hyp))


def criterion_9():
    rng = np.random.default_rng(5)
    bad = 0
    for _ in range(100):
        ref = tuple(rng.integers(0, 4, size=rng.integers(0, 7)).tolist())
        hyp = tuple(rng.integers(0, 4, size=rng.integers(0, 7)).tolist())
        bad += asr_eval.edit_distance(ref, hyp).total != _recursive(ref, hyp)
    hand = [
        (["a b c"], ["a b c"], 0.0),
        (["a b c"], ["a x c d"], 200 / 3),
        (["a b", "c d e f"], ["a", "c d e f"], 100 / 6),
    ]
    hand_ok = all(abs(asr_eval.wer(r, h) - v) < 1e-12 for r, h, v in hand)
    return report(9, bad == 0 and hand_ok,
                  f"edit distance vs recursive oracle: {bad}/100 mismatches; "
                  f"pooled WER hand cases {'ok' if hand_ok else 'WRONG'}")


# --------------------------------------------------------------------------
# 10. determinism of cmd_train

TINY = """
[run]
seed = 11
[corpus]
num_speakers = 16
utts_per_speaker = 6
[encoder]
hidden_dim = 8
[train]
epochs = 2,2,2,1
alpha = 0.5
"""


def criterion_10(tmp: Path):
    (tmp / "c.ini").write_text(TINY)
    base = ["--config", str(tmp / "c.ini")]
    codes = [cli.main(["synth-data", *base, "--out", str(tmp / "d")])]
    for k in ("a", "b"):
        codes.append(cli.main(["train", *base, "--data", str(tmp / "d"), "--out", str(tmp / k)]))
    same = {f: (tmp / "a" / f).read_bytes() == (tmp / "b" / f).read_bytes()
            for f in ("checkpoint.bin", "losses.csv")}
    return report(10, codes == [0, 0, 0] and all(same.values()),
                  "two identical cmd_train runs: " + ", ".join(
                      f"{f} {'identical' if v else 'DIFFERENT'}" for f, v in same.items()))


# --------------------------------------------------------------------------
# 11. padding invariance


def criterion_11():
    corpus = data.generate_synthetic_corpus(data.CorpusConfig(num_speakers=6, utts_per_speaker=8,
                                                              seed=21))
    rng = np.random.default_rng(21)
    picks = [corpus.utterances[i] for i in rng.choice(len(corpus.utterances), 20, replace=False)]
    fillers = corpus.utterances
    speakers = advmod.SpeakerTable(sorted({u.speaker_id for u in corpus.utterances}))
    params = tr.ModelParams.initialize(tr.ModelConfig(), corpus.vocab, speakers, seed=21)
    samples = [se.Sample(u.id, u.features, u.speaker_id) for u in corpus.utterances]
    extractor = se.train_embedding_net(samples, se.EmbeddingConfig(epochs=2, seed=21))
    p = params.all()
    cfg = params.config.encoder

    def per_utt(batch):
        with ad.no_grad():
            phi, mask = encmod.encode_batch(params.groups["theta_e"], cfg, batch.features,
                                            batch.mask)
            tg = [corpus.vocab.encode(t) for t in batch.transcripts]
            out = {
                "ctc": ctc.ctc_loss_batch(ctc.ctc_log_probs(p, phi), mask, tg).value,
                "attention": attmod.attention_loss_batch(p, phi, mask, tg, corpus.vocab).value,
                "adversarial": advmod.adversary_loss_batch(
                    advmod.adversary_forward(p, phi, mask),
                    np.array([speakers.index(s) for s in batch.speakers]), mask).value,
            }
            emb = se._embedding_forward(extractor.params, ad.constant(batch.features), batch.mask)
            out["embedding"] = emb.value
            out["phi"] = [phi.value[b][mask[b]] for b in range(len(batch))]
        return out

    worst = {}
    for k, u in enumerate(picks):
        alone = per_utt(data.pad([u]))
        # longer batch-mates force padding of u
        mates = [v for v in fillers if v.num_frames > u.num_frames + 4 and v.id != u.id][:2]
        if not mates:
            mates = [v for v in fillers if v.id != u.id][:2]
            b = data.pad([u] + mates, length=max(v.num_frames for v in [u] + mates) + 7)
        else:
            b = data.pad([u] + mates)
        together = per_utt(b)
        for key in alone:
            diff = float(np.max(np.abs(np.asarray(alone[key][0]) - np.asarray(together[key][0]))))
            worst[key] = max(worst.get(key, 0.0), diff)
    ok = all(v <= PAD_TOL for v in worst.values())
    return report(11, ok, "20 utterances padded in batch, max |change| "
                  + ", ".join(f"{k} {v:.1e}" for k, v in worst.items()) + f" (<= {PAD_TOL:g})")


# --------------------------------------------------------------------------
# pytest entry points


@pytest.mark.parametrize("n", [1, 2, 3, 4, 7, 8, 9, 11])
def test_criterion(n, capsys):
    with capsys.disabled():
        assert globals()[f"criterion_{n}"]()


def test_criterion_10(tmp_path, capsys):
    with capsys.disabled():
        assert criterion_10(tmp_path)


@pytest.mark.parametrize("n", [5, 6])
def test_reproduction(n, capsys):
    with capsys.disabled():
        assert globals()[f"criterion_{n}"]()


if __name__ == "__main__":
    import tempfile
    results = []
    for n in range(1, 12):
        if n == 10:
            with tempfile.TemporaryDirectory() as d:
                results.append(criterion_10(Path(d)))
        else:
            results.append(globals()[f"criterion_{n}"]())
    print(f"{sum(results)}/{len(results)} criteria pass")
    sys.exit(0 if all(results) else 1)
