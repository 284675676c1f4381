"""Edit distance and pooled WER/CER scoring."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from typing import Sequence


@dataclass(frozen=True)
class EditOps:
    substitutions: int = 0
    deletions: int = 0
    insertions: int = 0

    @property
    def total(self) -> int:
        return self.substitutions + self.deletions + self.insertions

    def __add__(self, other: "EditOps") -> "EditOps":
        return EditOps(self.substitutions + other.substitutions,
                       self.deletions + other.deletions,
                       self.insertions + other.insertions)


def edit_distance(ref: Sequence, hyp: Sequence) -> EditOps:
    """Levenshtein alignment; backtracking prefers match/substitution, then
    insertion, then deletion."""
    n, m = len(ref), len(hyp)
    d = [[0] * (m + 1) for _ in range(n + 1)]
    for i in range(n + 1):
        d[i][0] = i
    for j in range(m + 1):
        d[0][j] = j
    for i in range(1, n + 1):
        for j in range(1, m + 1):
            cost = 0 if ref[i - 1] == hyp[j - 1] else 1
            d[i][j] = min(d[i - 1][j - 1] + cost, d[i][j - 1] + 1, d[i - 1][j] + 1)
    s = dl = ins = 0
    i, j = n, m
    while i or j:
        if i and j and d[i][j] == d[i - 1][j - 1] + (ref[i - 1] != hyp[j - 1]):
            s += ref[i - 1] != hyp[j - 1]
            i, j = i - 1, j - 1
        elif j and d[i][j] == d[i][j - 1] + 1:
            ins += 1
            j -= 1
        else:
            dl += 1
            i -= 1
    return EditOps(int(s), dl, ins)


def _pooled(refs: Sequence[Sequence], hyps: Sequence[Sequence]) -> float:
    if len(refs) != len(hyps):
        raise ValueError(f"{len(refs)} references but {len(hyps)} hypotheses")
    n_ref = sum(len(r) for r in refs)
    if n_ref == 0:
        raise ValueError("empty reference corpus")
    errors = sum(edit_distance(r, h).total for r, h in zip(refs, hyps))
    return 100.0 * errors / n_ref


def wer(refs: Sequence[str], hyps: Sequence[str]) -> float:
    return _pooled([r.split() for r in refs], [h.split() for h in hyps])


def cer(refs: Sequence[str], hyps: Sequence[str]) -> float:
    return _pooled([list(r) for r in refs], [list(h) for h in hyps])


def scoring_report(ids: Sequence[str], refs: Sequence[str], hyps: Sequence[str],
                   unit: str = "char") -> str:
    """Per-utterance CSV (id, ref, hyp, S, D, I) with a trailing summary row."""
    split = list if unit == "char" else str.split
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["id", "ref", "hyp", "S", "D", "I"])
    total = EditOps()
    for uid, r, h in zip(ids, refs, hyps):
        ops = edit_distance(split(r), split(h))
        total = total + ops
        w.writerow([uid, r, h, ops.substitutions, ops.deletions, ops.insertions])
    rate = cer(refs, hyps) if unit == "char" else wer(refs, hyps)
    label = "CER" if unit == "char" else "WER"
    w.writerow([f"SUMMARY {label}={rate:.2f}", "", "",
                total.substitutions, total.deletions, total.insertions])
    return buf.getvalue()
