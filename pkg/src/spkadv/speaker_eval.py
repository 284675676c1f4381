"""Speaker attacks on a representation and the metrics they are scored with.

The open-set attacker is a small x-vector-style network (frame layers,
statistics pooling, bottleneck) trained on whatever sequences it is handed,
followed by cosine or two-covariance PLDA scoring.  The closed-set attacker
reuses the adversary architecture.
"""

from __future__ import annotations

import csv
import io
import struct
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Sequence

import numpy as np

from . import adversary as advmod
from . import autodiff as ad
from . import layers as L
from .adversary import AdversaryConfig, SpeakerTable
from .data import pad
from .trainer import AdamState, optimizer_step, sub_seed

EMB_MAGIC = b"SPKEMB01"


# --------------------------------------------------------------------------
# embedding extractor


@dataclass(frozen=True)
class EmbeddingConfig:
    frame_dims: tuple[int, ...] = (64, 64)
    embed_dim: int = 16
    epochs: int = 30
    lr: float = 3e-3
    batch_size: int = 16
    seed: int = 0


@dataclass
class Extractor:
    params: dict[str, ad.Node]
    config: EmbeddingConfig
    speakers: SpeakerTable
    input_dim: int


@dataclass
class Embedding:
    vector: np.ndarray
    utterance_id: str = ""
    speaker_id: str | None = None

    def __post_init__(self):
        self.vector = np.asarray(self.vector, dtype=float)
        if not np.all(np.isfinite(self.vector)):
            raise ad.NonFiniteError(f"non-finite embedding {self.utterance_id!r}")

    def normalized(self) -> "Embedding":
        n = np.linalg.norm(self.vector)
        if n == 0:
            raise ValueError(f"zero-norm embedding {self.utterance_id!r}")
        return Embedding(self.vector / n, self.utterance_id, self.speaker_id)


@dataclass
class Sample:
    """A (sequence, speaker) pair in whatever representation the attacker sees."""
    id: str
    features: np.ndarray
    speaker_id: str

    @property
    def num_frames(self):
        return self.features.shape[0]

    transcript = ""


def _embedding_forward(params, x: ad.Node, mask: np.ndarray) -> ad.Node:
    h = x
    i = 0
    while f"xv.f{i}.W" in params:
        h = ad.relu(L.linear(params, f"xv.f{i}", h))
        i += 1
    pooled = L.stats_pool(h, mask)
    return L.linear(params, "xv.emb", pooled)


def train_embedding_net(samples: Sequence[Sample], cfg: EmbeddingConfig) -> Extractor:
    """Cross-entropy training of frame stack -> stats pool -> bottleneck -> softmax."""
    speakers = SpeakerTable(sorted({s.speaker_id for s in samples}))
    if len(speakers) < 2:
        raise ValueError("embedding training needs at least 2 speakers")
    D = samples[0].features.shape[1]
    rng = np.random.default_rng(sub_seed(cfg.seed, "xvector/init"))
    params, in_dim = {}, D
    for i, width in enumerate(cfg.frame_dims):
        params.update(L.init_linear(rng, f"xv.f{i}", in_dim, width))
        in_dim = width
    params.update(L.init_linear(rng, "xv.emb", 2 * in_dim, cfg.embed_dim))
    params.update(L.init_linear(rng, "xv.out", cfg.embed_dim, len(speakers)))

    ordered = sorted(samples, key=lambda s: (s.num_frames, s.id))
    batches = [ordered[i:i + cfg.batch_size] for i in range(0, len(ordered), cfg.batch_size)]
    shuffle = np.random.default_rng(sub_seed(cfg.seed, "xvector/shuffle"))
    state = AdamState(lr=cfg.lr)
    for _ in range(cfg.epochs):
        for bi in shuffle.permutation(len(batches)):
            b = pad(batches[bi])
            for n in params.values():
                n.grad = None
            emb = _embedding_forward(params, ad.constant(b.features), b.mask)
            logp = ad.log_softmax(L.linear(params, "xv.out", ad.relu(emb)))
            z = np.array([speakers.index(s) for s in b.speakers])
            loss = -ad.mean(ad.take(logp, z[:, None]))
            ad.backward(loss)
            optimizer_step(params, {k: n.grad for k, n in params.items() if n.grad is not None},
                           state, clip=5.0, group="xvector")
    return Extractor(params, cfg, speakers, D)


def extract_embeddings(extractor: Extractor, samples: Sequence[Sample],
                       batch_size: int = 32) -> list[Embedding]:
    out = []
    with ad.no_grad():
        for i in range(0, len(samples), batch_size):
            chunk = samples[i:i + batch_size]
            b = pad(chunk)
            emb = _embedding_forward(extractor.params, ad.constant(b.features), b.mask).value
            out += [Embedding(e, s.id, s.speaker_id) for e, s in zip(emb, chunk)]
    return out


def extract_embedding(extractor: Extractor, sequence: np.ndarray, utterance_id: str = "",
                      mask=None) -> Embedding:
    seq = np.asarray(sequence, dtype=float)
    if seq.ndim != 2 or len(seq) == 0:
        raise ValueError("extract_embedding: expected a non-empty (T, D) sequence")
    mask = np.ones((1, len(seq)), bool) if mask is None else np.asarray(mask, bool)[None]
    with ad.no_grad():
        v = _embedding_forward(extractor.params, ad.constant(seq[None]), mask).value[0]
    return Embedding(v, utterance_id)


def enroll(embeddings: Sequence[Embedding], speaker_id: str | None = None) -> Embedding:
    """Mean of length-normalized embeddings, re-normalized."""
    if not embeddings:
        raise ValueError("enroll: no embeddings")
    mean = np.mean([e.normalized().vector for e in embeddings], axis=0)
    if np.linalg.norm(mean) < 1e-12:
        raise ValueError("enroll: embeddings cancel out (zero-norm mean)")
    return Embedding(mean, f"enroll:{speaker_id or ''}", speaker_id).normalized()


def cosine_score(enrollment: Embedding, test: Embedding) -> float:
    a, b = enrollment.vector, test.vector
    return float(a @ b / (np.linalg.norm(a) * np.linalg.norm(b)))


# --------------------------------------------------------------------------
# two-covariance PLDA:  x = mu + y + e,  y ~ N(0, Sb),  e ~ N(0, Sw)


class DegenerateCovarianceError(ValueError):
    pass


@dataclass
class PLDAModel:
    mean: np.ndarray
    between: np.ndarray
    within: np.ndarray
    log_likelihoods: list[float] = field(default_factory=list)


def _logdet(S):
    sign, val = np.linalg.slogdet(S)
    if sign <= 0:
        raise DegenerateCovarianceError("covariance is not positive definite")
    return val


def _group(X, labels):
    labels = np.asarray(labels)
    return [X[labels == k] for k in sorted(set(labels.tolist()))]


def plda_log_likelihood(model: PLDAModel, X: np.ndarray, labels) -> float:
    """Marginal log-likelihood of the data, speakers integrated out."""
    X = np.asarray(X, dtype=float)
    D = X.shape[1]
    Sw, Sb, mu = model.within, model.between, model.mean
    Sw_inv = np.linalg.inv(Sw)
    ld_w = _logdet(Sw)
    total = 0.0
    for Xk in _group(X, labels):
        n = len(Xk)
        xbar = Xk.mean(axis=0)
        R = Xk - xbar
        C = Sb + Sw / n
        d = xbar - mu
        total += (-0.5 * D * np.log(2 * np.pi) - 0.5 * _logdet(C)
                  - 0.5 * d @ np.linalg.solve(C, d))
        total += (-0.5 * (n - 1) * D * np.log(2 * np.pi) - 0.5 * (n - 1) * ld_w
                  - 0.5 * D * np.log(n) - 0.5 * np.sum((R @ Sw_inv) * R))
    return float(total)


def _em_step(model: PLDAModel, groups) -> PLDAModel:
    D = model.mean.shape[0]
    Sb_inv = np.linalg.inv(model.between)
    Sw_inv = np.linalg.inv(model.within)
    N = sum(len(g) for g in groups)
    K = len(groups)
    post = []
    for Xk in groups:
        n = len(Xk)
        C = np.linalg.inv(Sb_inv + n * Sw_inv)
        m = C @ Sw_inv @ (Xk - model.mean).sum(axis=0)
        post.append((C, m))
    mu = sum((Xk - m).sum(axis=0) for Xk, (_, m) in zip(groups, post)) / N
    Sb = sum(C + np.outer(m, m) for C, m in post) / K
    Sw = np.zeros((D, D))
    for Xk, (C, m) in zip(groups, post):
        R = Xk - mu - m
        Sw += R.T @ R + len(Xk) * C
    Sw /= N
    sym = lambda S: 0.5 * (S + S.T)  # noqa: E731
    return PLDAModel(mu, sym(Sb), sym(Sw))


def plda_init(X: np.ndarray, labels) -> PLDAModel:
    X = np.asarray(X, dtype=float)
    groups = _group(X, labels)
    D = X.shape[1]
    mu = X.mean(axis=0)
    means = np.array([g.mean(axis=0) for g in groups])
    Sw = sum((g - g.mean(axis=0)).T @ (g - g.mean(axis=0)) for g in groups) / len(X)
    Sb = np.cov(means.T, bias=True).reshape(D, D) + 1e-6 * np.eye(D)
    return PLDAModel(mu, Sb, Sw)


def plda_train(X: np.ndarray, labels, iters: int = 10, init: PLDAModel | None = None) -> PLDAModel:
    """EM for the two-covariance model; the per-iteration log-likelihoods are
    kept on the returned model."""
    X = np.asarray(X, dtype=float)
    labels = np.asarray(labels)
    groups = _group(X, labels)
    if len(groups) < 2:
        raise ValueError("PLDA needs at least 2 speakers")
    if max(len(g) for g in groups) < 2:
        raise ValueError("PLDA needs a speaker with at least 2 embeddings")
    D = X.shape[1]
    within_dof = len(X) - len(groups)
    scatter = sum((g - g.mean(axis=0)).T @ (g - g.mean(axis=0)) for g in groups)
    if within_dof < D or np.linalg.matrix_rank(scatter) < D:
        raise DegenerateCovarianceError(
            f"within-speaker scatter has rank {np.linalg.matrix_rank(scatter)} < {D}; "
            "reduce the embedding dimension or add utterances per speaker")
    model = init or plda_init(X, labels)
    lls = [plda_log_likelihood(model, X, labels)]
    for _ in range(iters):
        model = _em_step(model, groups)
        lls.append(plda_log_likelihood(model, X, labels))
    model.log_likelihoods = lls
    return model


def _gauss_logpdf(x, mean, cov):
    d = x - mean
    chol = np.linalg.cholesky(cov)
    z = np.linalg.solve(chol, d)
    return float(-0.5 * z @ z - np.log(np.diag(chol)).sum() - 0.5 * len(x) * np.log(2 * np.pi))


def plda_score(model: PLDAModel, enrollment, test) -> float:
    """log p(x1, x2 | same speaker) - log p(x1, x2 | different speakers)."""
    x1 = enrollment.vector if isinstance(enrollment, Embedding) else np.asarray(enrollment, float)
    x2 = test.vector if isinstance(test, Embedding) else np.asarray(test, float)
    D = model.mean.shape[0]
    if x1.shape != (D,) or x2.shape != (D,):
        raise ValueError(f"plda_score: expected dim {D}, got {x1.shape} and {x2.shape}")
    T = model.between + model.within
    B = model.between
    joint = np.block([[T, B], [B, T]])
    mu2 = np.concatenate([model.mean, model.mean])
    same = _gauss_logpdf(np.concatenate([x1, x2]), mu2, joint)
    diff = _gauss_logpdf(x1, model.mean, T) + _gauss_logpdf(x2, model.mean, T)
    return same - diff


# --------------------------------------------------------------------------
# equal error rate


@dataclass
class EERResult:
    eer: float
    threshold: float
    roc: list[tuple[float, float, float]]    # (threshold, FAR, FRR), threshold ascending


def _roc_counts(genuine, impostor):
    """Exact (threshold, FAR, FRR) at every distinct score plus +inf."""
    g = np.sort(np.asarray(genuine, float))
    i = np.sort(np.asarray(impostor, float))
    thresholds = np.unique(np.concatenate([g, i]))
    pts = []
    for th in thresholds:
        far = Fraction(len(i) - int(np.searchsorted(i, th, side="left")), len(i))
        frr = Fraction(int(np.searchsorted(g, th, side="left")), len(g))
        pts.append((float(th), far, frr))
    pts.append((float("inf"), Fraction(0), Fraction(1)))
    return pts


def _lower_hull(points):
    """Lower-left convex hull of (FAR, FRR) points, ordered by FAR ascending."""
    pts = sorted(set((p[1], p[2]) for p in points))
    hull = []
    for p in pts:
        while len(hull) >= 2:
            (x1, y1), (x2, y2) = hull[-2], hull[-1]
            if (x2 - x1) * (p[1] - y1) - (y2 - y1) * (p[0] - x1) <= 0:
                hull.pop()
            else:
                break
        hull.append(p)
    return hull


def eer(genuine: Sequence[float], impostor: Sequence[float]) -> EERResult:
    """Equal error rate on the convex hull of the ROC.

    FAR(t) is the fraction of impostor scores >= t and FRR(t) the fraction of
    genuine scores < t, swept over every distinct score.  The EER is where the
    lower convex hull of the (FAR, FRR) points crosses FAR == FRR, linearly
    interpolated between the two hull vertices on either side.
    """
    if len(genuine) == 0 or len(impostor) == 0:
        raise ValueError("eer: need both genuine and impostor scores")
    pts = _roc_counts(genuine, impostor)
    hull = _lower_hull(pts)
    value = None
    for (x1, y1), (x2, y2) in zip(hull, hull[1:]):
        d1, d2 = x1 - y1, x2 - y2
        if d1 == 0:
            value = x1
            break
        if d1 < 0 <= d2:
            t = d1 / (d1 - d2)
            value = x1 + t * (x2 - x1)
            break
    if value is None:
        value = hull[-1][0]
    # report the sweep threshold whose operating point is closest to the crossing
    best = min(pts, key=lambda p: (abs(p[1] - value) + abs(p[2] - value), p[0]))
    roc = [(th, float(far), float(frr)) for th, far, frr in pts]
    return EERResult(float(value), best[0], roc)


# --------------------------------------------------------------------------
# closed-set accuracy and clustering


def closed_set_accuracy(decisions: Sequence[int], labels: Sequence[int]) -> float:
    if len(decisions) != len(labels):
        raise ValueError("decisions and labels differ in length")
    if not len(labels):
        raise ValueError("closed_set_accuracy: empty input")
    return 100.0 * float(np.mean(np.asarray(decisions) == np.asarray(labels)))


def cosine_distances(X: np.ndarray) -> np.ndarray:
    Xn = X / np.linalg.norm(X, axis=1, keepdims=True)
    return 1.0 - Xn @ Xn.T


def silhouette(X: np.ndarray, labels: Sequence) -> float:
    """Mean silhouette under cosine distance; points in singleton clusters score 0."""
    X = np.asarray(X, dtype=float)
    labels = np.asarray(labels)
    classes = sorted(set(labels.tolist()))
    if len(classes) < 2:
        raise ValueError("silhouette needs at least 2 clusters")
    sizes = {c: int(np.sum(labels == c)) for c in classes}
    if max(sizes.values()) < 2:
        raise ValueError("silhouette needs a cluster with at least 2 points")
    Dm = cosine_distances(X)
    member = np.stack([labels == c for c in classes])           # (K, N)
    sums = member.astype(float) @ Dm                              # (K, N)
    own = np.array([classes.index(l) for l in labels.tolist()])
    counts = member.sum(axis=1).astype(float)
    scores = np.zeros(len(X))
    for j in range(len(X)):
        k = own[j]
        if counts[k] < 2:
            continue
        a = sums[k, j] / (counts[k] - 1)
        b = min(sums[c, j] / counts[c] for c in range(len(classes)) if c != k)
        denom = max(a, b)
        scores[j] = 0.0 if denom == 0 else (b - a) / denom
    return float(np.mean(scores))


# --------------------------------------------------------------------------
# closed-set attacker on a raw (non-encoded) representation


def train_closed_set_attacker(samples: Sequence[Sample], speakers: SpeakerTable,
                              cfg: AdversaryConfig, epochs: int, lr: float, batch_size: int,
                              seed: int) -> dict[str, ad.Node]:
    """Train the adversary architecture from scratch on ``samples``."""
    D = samples[0].features.shape[1]
    params = advmod.init_adversary(np.random.default_rng(sub_seed(seed, "attacker/init")),
                                   D, len(speakers), cfg)
    ordered = sorted(samples, key=lambda s: (s.num_frames, s.id))
    batches = [ordered[i:i + batch_size] for i in range(0, len(ordered), batch_size)]
    rng = np.random.default_rng(sub_seed(seed, "attacker/shuffle"))
    state = AdamState(lr=lr)
    for _ in range(epochs):
        for bi in rng.permutation(len(batches)):
            b = pad(batches[bi])
            for n in params.values():
                n.grad = None
            lp = advmod.adversary_forward(params, ad.constant(b.features), b.mask)
            z = np.array([speakers.index(s) for s in b.speakers])
            loss = ad.mean(advmod.adversary_loss_batch(lp, z, b.mask))
            ad.backward(loss)
            optimizer_step(params, {k: n.grad for k, n in params.items() if n.grad is not None},
                           state, clip=5.0, group="attacker")
    return params


def classify(params: dict[str, ad.Node], samples: Sequence[Sample], batch_size: int = 32) -> list[int]:
    out = []
    with ad.no_grad():
        for i in range(0, len(samples), batch_size):
            b = pad(samples[i:i + batch_size])
            lp = advmod.adversary_forward(params, ad.constant(b.features), b.mask).value
            out += [advmod.utterance_speaker_decision(lp[k], b.mask[k])[0] for k in range(len(b))]
    return out


# --------------------------------------------------------------------------
# files


def scores_csv(rows: Sequence[tuple[str, str, float, bool]]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["enroll_id", "test_utt_id", "score", "is_genuine"])
    for enroll_id, utt, score, genuine in rows:
        w.writerow([enroll_id, utt, repr(float(score)), int(bool(genuine))])
    return buf.getvalue()


def roc_csv(result: EERResult) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["threshold", "far", "frr"])
    for row in result.roc:
        w.writerow([repr(v) for v in row])
    return buf.getvalue()


def write_embeddings(path: Path, vectors: np.ndarray) -> None:
    vectors = np.ascontiguousarray(vectors, dtype="<f8")
    count, dim = vectors.shape
    Path(path).write_bytes(EMB_MAGIC + struct.pack("<QQ", count, dim) + vectors.tobytes())


def read_embeddings(path: Path) -> np.ndarray:
    data = Path(path).read_bytes()
    if data[:8] != EMB_MAGIC:
        raise ValueError(f"{path}: not an embedding file")
    count, dim = struct.unpack("<QQ", data[8:24])
    return np.frombuffer(data, dtype="<f8", count=count * dim, offset=24).reshape(count, dim).copy()
