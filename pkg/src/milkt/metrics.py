"""AUC, F1 and accuracy for bag-level predictions."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

THRESHOLD = 0.5


@dataclass
class EvalResult:
    auc: float | None
    f1: float
    accuracy: float
    n_samples: int
    per_class: list[dict] = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "EvalResult":
        return cls(d["auc"], d["f1"], d["accuracy"], d["n_samples"], list(d.get("per_class", [])))


def _midranks_doubled(x: np.ndarray) -> np.ndarray:
    """Twice the 1-based average rank of each element (integers, ties shared)."""
    order = np.argsort(x, kind="mergesort")
    xs = x[order]
    ranks2 = np.empty(len(x), dtype=np.int64)
    i = 0
    n = len(x)
    while i < n:
        j = i
        while j + 1 < n and xs[j + 1] == xs[i]:
            j += 1
        # positions i..j (0-based) share rank ((i+1)+(j+1))/2
        ranks2[order[i:j + 1]] = i + j + 2
        i = j + 1
    return ranks2


def binary_auc(scores: Sequence[float], labels: Sequence[int]) -> float | None:
    """Mann-Whitney AUC with ties counted as one half.

    Returns ``None`` when only one class is present.
    """
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels)
    if s.shape != y.shape:
        raise ValueError(f"scores and labels differ in length ({s.shape} vs {y.shape})")
    pos = y == 1
    P, N = int(pos.sum()), int((~pos).sum())
    if P == 0 or N == 0:
        return None
    r2 = _midranks_doubled(s)
    # 2U = 2*sum(rank_pos) - P(P+1), exact in integers
    u2 = int(r2[pos].sum()) - P * (P + 1)
    return u2 / (2 * P * N)


def classify(probs, threshold: float = THRESHOLD) -> int:
    p = np.asarray(probs, dtype=np.float64).reshape(-1)
    if p.size == 2:
        return int(p[1] >= threshold)
    return int(np.argmax(p))


def _f1(tp: int, fp: int, fn: int) -> float:
    denom = 2 * tp + fp + fn
    return 2 * tp / denom if denom else 0.0


def evaluate(preds: Sequence, labels: Sequence[int]) -> EvalResult:
    """Accuracy, F1 (binary for c = 2, else macro) and AUC (binary or macro one-vs-rest)."""
    if len(preds) != len(labels):
        raise ValueError(f"{len(preds)} predictions for {len(labels)} labels")
    if not len(preds):
        raise ValueError("nothing to evaluate")
    P = np.vstack([np.asarray(p, dtype=np.float64).reshape(1, -1) for p in preds])
    y = np.asarray(labels, dtype=np.int64)
    c = P.shape[1]
    if y.min() < 0 or y.max() >= c:
        raise ValueError(f"labels outside 0..{c - 1}")
    pred = np.array([classify(row) for row in P])
    accuracy = float(np.mean(pred == y))

    per_class = []
    for k in range(c):
        tp = int(np.sum((pred == k) & (y == k)))
        fp = int(np.sum((pred == k) & (y != k)))
        fn = int(np.sum((pred != k) & (y == k)))
        per_class.append({"class": k, "support": int(np.sum(y == k)), "f1": _f1(tp, fp, fn),
                          "auc": binary_auc(P[:, k], (y == k).astype(int))})

    if c == 2:
        f1 = per_class[1]["f1"]
        auc = per_class[1]["auc"]
    else:
        f1 = float(np.mean([pc["f1"] for pc in per_class]))
        aucs = [pc["auc"] for pc in per_class if pc["auc"] is not None]
        auc = float(np.mean(aucs)) if aucs else None
    return EvalResult(auc=auc, f1=f1, accuracy=accuracy, n_samples=len(y), per_class=per_class)
