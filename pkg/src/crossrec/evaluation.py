"""Ranking the held-out positive among its 99 negatives: HR@10 and NDCG@10.

Ties count against the positive, so a constant scorer earns zero rather
than inflated metrics. Per-user scores come from one fixed-shape forward
per user and the averages accumulate in user-id order, which makes the
report independent of any evaluation-side reordering.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import models
from .tensorcore import Tape


class EvaluationError(RuntimeError):
    pass


@dataclass
class EvalReport:
    hr_at_10: float
    ndcg_at_10: float
    per_user_ranks: np.ndarray = None


def rank_position(scores, positive_index):
    """1-based rank of the positive, pessimistic: ties rank behind it."""
    scores = np.asarray(scores, dtype=np.float64)
    if not np.isfinite(scores).all():
        raise EvaluationError("non-finite score in ranking")
    pos = scores[positive_index]
    higher = int((scores > pos).sum())
    tied = int((scores == pos).sum()) - 1
    return 1 + higher + tied


def hr_at_k(rank, k=10):
    return 1 if rank <= k else 0


def ndcg_at_k(rank, k=10):
    """Single-relevant-item NDCG: 1/log2(rank+1) inside the top k, else 0."""
    return 1.0 / math.log2(rank + 1) if rank <= k else 0.0


def evaluate(config, store, split, catalog=None, k=10, keep_ranks=False):
    """Score each user's positive plus pre-drawn negatives and average HR/NDCG."""
    num_users = split.train.num_users
    ranks = np.empty(num_users, dtype=np.int64) if keep_ranks else None
    hr_total = 0.0
    ndcg_total = 0.0
    for u in range(num_users):
        items = np.concatenate([[split.test_positives[u]], split.test_negatives[u]])
        users = np.full(items.size, u, dtype=np.int64)
        tape = Tape(store, record=False)
        scores = models.predictions(models.score(tape, config, users, items, catalog))
        rank = rank_position(scores, 0)
        hr_total += hr_at_k(rank, k)
        ndcg_total += ndcg_at_k(rank, k)
        if keep_ranks:
            ranks[u] = rank
    return EvalReport(hr_total / num_users, ndcg_total / num_users, ranks)


def save_ranks(report, path):
    """Optional per-user rank dump: 'user<TAB>rank' lines."""
    if report.per_user_ranks is None:
        raise ValueError("evaluate(..., keep_ranks=True) is required for a rank dump")
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for u, rank in enumerate(report.per_user_ranks):
            fh.write(f"{u}\t{rank}\n")
