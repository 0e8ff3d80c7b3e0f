"""Ranking metrics for leave-one-out evaluation with one relevant item per user."""
import numpy as np

from .errors import ContractError


def ranks_from_scores(scores, targets):
    """1-based rank of each target among all candidates.

    ``scores`` is (U, n_items) with column ``j`` scoring item ``j + 1``;
    ``targets`` are 1-based item indices.  Items scoring equal to the target
    count as ahead of it only if their index is lower.
    """
    scores = np.asarray(scores, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.int64).reshape(-1)
    if scores.ndim != 2 or scores.shape[0] != targets.shape[0]:
        raise ContractError(f"scores {scores.shape} do not match {targets.shape[0]} targets")
    if targets.min() < 1 or targets.max() > scores.shape[1]:
        raise ContractError("target index outside the candidate set")
    cols = targets - 1
    tgt = scores[np.arange(len(cols)), cols][:, None]
    ahead = (scores > tgt).sum(axis=1)
    tied_before = ((scores == tgt) & (np.arange(scores.shape[1])[None, :] < cols[:, None])).sum(axis=1)
    return (1 + ahead + tied_before).astype(np.int64)


def metrics_at_k(ranks, k):
    """Return ``{"ndcg": .., "hr": .., "mrr": ..}`` at cutoff ``k``."""
    ranks = np.asarray(ranks, dtype=np.float64).reshape(-1)
    if ranks.size == 0:
        raise ContractError("no ranking outcomes to score")
    if k < 1:
        raise ContractError(f"cutoff must be >= 1, got {k}")
    if ranks.min() < 1:
        raise ContractError("ranks are 1-based")
    hit = ranks <= k
    return {
        "ndcg": float(np.where(hit, 1.0 / np.log2(ranks + 1.0), 0.0).mean()),
        "hr": float(hit.mean()),
        "mrr": float(np.where(hit, 1.0 / ranks, 0.0).mean()),
    }


def metrics_table(ranks, cutoffs=(10, 20)):
    """Flat dict like ``{"ndcg@10": .., "hr@10": .., ...}``."""
    out = {}
    for k in cutoffs:
        for name, value in metrics_at_k(ranks, k).items():
            out[f"{name}@{k}"] = value
    return out
