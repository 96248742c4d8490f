"""Full-ranking top-N evaluation.

Every item the user has not interacted with is a candidate; known items from
the excluded splits are masked out; ties break by ascending item ID so the
ranking is completely deterministic.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch

from .kg import DatasetSplit


def recall_at_k(ranked: list[int], relevant: set[int], k: int) -> float:
    """|top-k intersect relevant| / |relevant|."""
    if k < 1:
        raise ValueError("k must be >= 1")
    if not relevant:
        raise ValueError("relevant set is empty; caller must skip this user")
    top = ranked[:k]
    return sum(1 for item in top if item in relevant) / len(relevant)


def ndcg_at_k(ranked: list[int], relevant: set[int], k: int) -> float:
    """Binary-gain DCG@k normalized by the ideal DCG."""
    if k < 1:
        raise ValueError("k must be >= 1")
    if not relevant:
        raise ValueError("relevant set is empty; caller must skip this user")
    dcg = 0.0
    for rank, item in enumerate(ranked[:k], start=1):
        if item in relevant:
            dcg += 1.0 / math.log2(rank + 1)
    ideal = sum(1.0 / math.log2(r + 1) for r in range(1, min(k, len(relevant)) + 1))
    return dcg / ideal


@dataclass
class RankingResult:
    recall: float
    ndcg: float
    users_evaluated: int
    k: int
    per_user: dict[int, dict] = field(default_factory=dict)


def full_rank(
    x_users: torch.Tensor,
    x_items: torch.Tensor,
    split: DatasetSplit,
    k: int = 10,
    target: str = "test",
) -> RankingResult:
    """Score every candidate item for every user with target interactions.

    Scores are dot products of the final embeddings. Evaluating the test
    split excludes train and validation items from the candidates; the
    validation split excludes only train items. Users without target items
    are skipped.
    """
    if target == "test":
        target_graph = split.test
        excluded = (split.train, split.validation)
    elif target == "validation":
        target_graph = split.validation
        excluded = (split.train,)
    else:
        raise ValueError(f"unknown eval target {target!r}")

    scores = (x_users @ x_items.T).detach().numpy().astype(np.float64)
    num_items = scores.shape[1]
    item_ids = np.arange(num_items)

    per_user: dict[int, dict] = {}
    total_recall = 0.0
    total_ndcg = 0.0
    for user in sorted(target_graph.user_items):
        relevant = set(target_graph.items_of(user))
        if not relevant:
            continue
        row = scores[user].copy()
        for graph in excluded:
            known = graph.items_of(user)
            if known:
                row[known] = -np.inf
        keep = row > -np.inf
        cand_ids = item_ids[keep]
        order = np.lexsort((cand_ids, -row[keep]))
        top = cand_ids[order[:k]].tolist()
        r = recall_at_k(top, relevant, k)
        n = ndcg_at_k(top, relevant, k)
        per_user[user] = {"top": top, "recall": r, "ndcg": n}
        total_recall += r
        total_ndcg += n
    count = len(per_user)
    return RankingResult(
        recall=total_recall / count if count else 0.0,
        ndcg=total_ndcg / count if count else 0.0,
        users_evaluated=count,
        k=k,
        per_user=per_user,
    )
