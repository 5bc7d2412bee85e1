"""Full-ranking top-K evaluation: Recall@K, NDCG@K and Precision@K."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .backbone import BackboneParams, score_matrix
from .data import SPLIT_CODES, TRAIN, VALID, InteractionDataset

logger = logging.getLogger(__name__)

USER_CHUNK = 1024


@dataclass
class MetricsReport:
    k: int
    recall: float
    ndcg: float
    precision: float
    num_users: int
    per_user: dict[str, np.ndarray] | None = None


def top_k_from_scores(scores: np.ndarray, excluded: np.ndarray, k: int) -> np.ndarray:
    """Indices of the k best non-excluded entries; ties go to the lower index."""
    s = np.where(excluded, np.inf, -scores)
    order = np.argsort(s, kind="stable")
    available = len(scores) - int(excluded.sum())
    return order[:min(k, available)]


def rank_items(params: BackboneParams, shared, user: int, exclude=(), k: int = 20) -> list[int]:
    scores = score_matrix(params, shared, np.array([user]))[0]
    excluded = np.zeros(len(scores), dtype=bool)
    excluded[list(exclude)] = True
    top = top_k_from_scores(scores, excluded, k)
    if len(top) < k:
        logger.warning("user %d: only %d candidate items for K=%d", user, len(top), k)
    return top.tolist()


def _discount(rank: int) -> float:
    return 1.0 / math.log2(rank + 2)


def user_metrics(ranked: Sequence[int], relevant: set, k: int) -> tuple[float, float, float]:
    """(recall, ndcg, precision) of one ranked list against a relevant set.

    Sums are correctly rounded (fsum) so results do not depend on order.
    """
    hit_ranks = [r for r, item in enumerate(ranked[:k]) if item in relevant]
    dcg = math.fsum(_discount(r) for r in hit_ranks)
    idcg = math.fsum(_discount(r) for r in range(min(k, len(relevant))))
    n_hits = len(hit_ranks)
    return n_hits / len(relevant), dcg / idcg, n_hits / k


def _excluded_splits(exclude: str) -> tuple[int, ...]:
    if exclude == "none":
        return ()
    if exclude == "train":
        return (TRAIN,)
    if exclude == "train+valid":
        return (TRAIN, VALID)
    raise ValueError(f"exclude must be 'none', 'train' or 'train+valid', got {exclude!r}")


def evaluate_topk(params: BackboneParams, shared, ds: InteractionDataset, split: str = "test",
                  ks: int | Sequence[int] = 20, exclude: str = "train", per_user: bool = False,
                  ) -> MetricsReport | dict[int, MetricsReport]:
    """Mean per-user metrics over users with at least one `split` interaction.

    Returns one report for an integer `ks`, or a dict keyed by K otherwise.
    """
    single = isinstance(ks, (int, np.integer))
    ks = [int(ks)] if single else sorted({int(k) for k in ks})
    if not ks or min(ks) < 1:
        raise ValueError("K must be a positive integer")
    relevant_lists = ds.user_items(SPLIT_CODES[split])
    excluded_splits = _excluded_splits(exclude)
    seen_lists = ds.user_items(*excluded_splits) if excluded_splits else None
    users = np.array([u for u, rel in enumerate(relevant_lists) if len(rel)], dtype=np.int64)
    if len(users) == 0:
        raise ValueError(f"no users with {split} interactions")
    k_max = max(ks)
    results = {k: np.zeros((len(users), 3)) for k in ks}
    n_short = 0
    for lo in range(0, len(users), USER_CHUNK):
        chunk = users[lo:lo + USER_CHUNK]
        scores = score_matrix(params, shared, chunk)
        for row, u in enumerate(chunk):
            excluded = np.zeros(ds.num_items, dtype=bool)
            if seen_lists is not None:
                excluded[seen_lists[u]] = True
            top = top_k_from_scores(scores[row], excluded, k_max)
            if len(top) < k_max:
                n_short += 1
            relevant = set(relevant_lists[u].tolist())
            for k in ks:
                results[k][lo + row] = user_metrics(top[:k].tolist(), relevant, k)
    if n_short:
        logger.warning("%d users had fewer than %d candidate items", n_short, k_max)
    reports = {}
    for k in ks:
        r = results[k]
        extra = None
        if per_user:
            extra = {"user": users, "recall": r[:, 0], "ndcg": r[:, 1], "precision": r[:, 2]}
        means = [math.fsum(r[:, j]) / len(users) for j in range(3)]
        reports[k] = MetricsReport(k, *means, len(users), extra)
    return reports[ks[0]] if single else reports
