"""Retrieval (Recall@k via cosine similarity), top-k accuracy, and the
fine-class prediction probability used by the theory checks."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .numerics import softmax_rows


class NoValidQueriesError(ValueError):
    """Every label occurs once; no query has a possible match."""


@dataclass
class EvalReport:
    recall_at: dict[int, float] = field(default_factory=dict)
    topk_acc: dict[int, float] = field(default_factory=dict)
    fine_prob_min: Optional[float] = None
    fine_prob_mean: Optional[float] = None
    n_queries: int = 0

    def to_dict(self) -> dict:
        return {
            "recall_at": {str(k): v for k, v in self.recall_at.items()},
            "topk_acc": {str(k): v for k, v in self.topk_acc.items()},
            "fine_prob_min": self.fine_prob_min,
            "fine_prob_mean": self.fine_prob_mean,
            "n_queries": self.n_queries,
        }


def recall_at_k(embeddings: np.ndarray, labels: np.ndarray,
                ks: list[int]) -> tuple[dict[int, float], int]:
    """Self-excluded cosine-similarity retrieval over the pool itself.

    Queries whose label is a singleton are dropped from the denominator;
    similarity ties break toward the lower example index. Returns the
    recall map and the retained query count.
    """
    emb = np.asarray(embeddings, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    n = emb.shape[0]
    if n < 2:
        raise ValueError("need at least two examples")
    counts = np.bincount(labels)
    valid = counts[labels] >= 2
    if not np.any(valid):
        raise NoValidQueriesError("all labels are singletons")
    norms = np.linalg.norm(emb, axis=1, keepdims=True)
    norms[norms == 0] = 1.0
    unit = emb / norms
    sims = unit @ unit.T
    hits = {k: 0 for k in ks}
    kmax = min(max(ks), n - 1)
    for q in np.nonzero(valid)[0]:
        s = sims[q].copy()
        s[q] = -np.inf
        # sort by similarity descending, then index ascending
        order = np.lexsort((np.arange(n), -s))[:kmax]
        match = labels[order] == labels[q]
        for k in ks:
            if np.any(match[:min(k, kmax)]):
                hits[k] += 1
    n_queries = int(np.sum(valid))
    return {k: hits[k] / n_queries for k in ks}, n_queries


def topk_accuracy(logits: np.ndarray, labels: np.ndarray,
                  ks: list[int]) -> dict[int, float]:
    """Fraction of rows whose label sits among the k largest logits
    (ties break toward the lower class index)."""
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    n, K = logits.shape
    if max(ks) > K:
        raise ValueError(f"k={max(ks)} exceeds the {K} classes")
    order = np.lexsort((np.arange(K)[None, :].repeat(n, axis=0), -logits), axis=1)
    out = {}
    for k in ks:
        topk = order[:, :k]
        out[k] = float(np.mean(np.any(topk == labels[:, None], axis=1)))
    return out


def fine_class_prob(embeddings: np.ndarray, W_I: np.ndarray,
                    fine_labels: np.ndarray) -> np.ndarray:
    """Softmax over fine-class proxies (mean of same-class W_I columns);
    row i, column s is Pr{fine class s | f(x_i), W_I}."""
    emb = np.asarray(embeddings, dtype=np.float64)
    fine = np.asarray(fine_labels, dtype=np.int64)
    F = int(fine.max()) + 1
    d = W_I.shape[0]
    proxies = np.empty((d, F))
    for s in range(F):
        cols = np.nonzero(fine == s)[0]
        if cols.size == 0:
            raise ValueError(f"fine class {s} is empty")
        proxies[:, s] = W_I[:, cols].mean(axis=1)
    return softmax_rows(emb @ proxies)


def evaluate_model(params, dataset, ks: list[int]) -> EvalReport:
    """Full EvalReport: retrieval on fine labels when present (coarse
    otherwise), top-k accuracy on the coarse head, fine-class probability
    stats when fine labels exist."""
    from .model import encode, head_logits

    emb, _ = encode(params, dataset.examples)
    labels = dataset.fine_labels if dataset.fine_labels is not None \
        else dataset.coarse_labels
    recall, n_queries = recall_at_k(emb, labels, ks)
    C = params.W_C.shape[1]
    acc_ks = [k for k in (1, 5) if k <= C]
    acc_labels = dataset.fine_labels if C == dataset.F else dataset.coarse_labels
    topk = topk_accuracy(head_logits(params, emb, "coarse"), acc_labels, acc_ks) \
        if acc_ks else {}
    report = EvalReport(recall_at=recall, topk_acc=topk, n_queries=n_queries)
    if (dataset.fine_labels is not None and params.W_I.shape[1] == dataset.n
            and np.all(np.bincount(dataset.fine_labels,
                                   minlength=dataset.F) > 0)):
        probs = fine_class_prob(emb, params.W_I, dataset.fine_labels)
        own = probs[np.arange(dataset.n), dataset.fine_labels]
        report.fine_prob_min = float(own.min())
        report.fine_prob_mean = float(own.mean())
    return report
