"""Retrieval metrics with binary relevance and one gold target per query."""

from __future__ import annotations

import numpy as np


def rank_targets(scores: np.ndarray) -> np.ndarray:
    """Column order per row by descending score; exact ties keep target-index order."""
    return np.argsort(-scores, axis=1, kind="stable")


def gold_ranks(scores: np.ndarray, gold: np.ndarray) -> np.ndarray:
    """1-based rank of each row's gold column under :func:`rank_targets` ordering.

    A target outranks the gold one if its score is strictly higher, or equal
    with a smaller index.
    """
    scores = np.asarray(scores)
    gold = np.asarray(gold)
    g = scores[np.arange(len(gold)), gold][:, None]
    cols = np.arange(scores.shape[1])[None, :]
    ahead = (scores > g) | ((scores == g) & (cols < gold[:, None]))
    return ahead.sum(axis=1) + 1


def hit_at_1(ranks: np.ndarray) -> np.ndarray:
    return (np.asarray(ranks) == 1).astype(np.float64)


def ndcg_at_k(ranks: np.ndarray, k: int = 5) -> np.ndarray:
    """Per-query NDCG@k; with a single relevant item IDCG is 1."""
    ranks = np.asarray(ranks)
    out = np.zeros(len(ranks))
    inside = ranks <= k
    out[inside] = 1.0 / np.log2(ranks[inside] + 1.0)
    return out

