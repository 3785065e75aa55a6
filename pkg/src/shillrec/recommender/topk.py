"""Top-K candidate lists with training-item exclusion and id tie-breaking."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..dataset import InteractionDataset


@dataclass
class RankedList:
    user: int
    items: np.ndarray
    scores: np.ndarray
    short: bool = False


def rank_scores(scores: np.ndarray, k: int, exclude=None) -> np.ndarray:
    """Indices of the top-``k`` entries of a 1-d score vector.

    Sorted by score descending, ties by lower index. Excluded indices never
    appear; the result is shorter than ``k`` if fewer candidates remain.
    """
    scores = np.asarray(scores, dtype=float)
    candidates = np.ones(len(scores), dtype=bool)
    if exclude is not None:
        candidates[np.asarray(list(exclude), dtype=np.int64)] = False
    idx = np.flatnonzero(candidates)
    order = np.lexsort((idx, -scores[idx]))
    return idx[order[:k]]


def recommend_topk(model, user: int, k: int, exclude=None) -> RankedList:
    if k < 1:
        raise ValueError("K must be >= 1")
    scores = model.score_matrix(np.array([user]))[0]
    items = rank_scores(scores, k, exclude)
    return RankedList(user=user, items=items, scores=scores[items], short=len(items) < k)


def topk_for_users(model, users, k: int, train: InteractionDataset | None = None,
                   chunk: int = 512) -> dict[int, np.ndarray]:
    """Top-K lists for many users at once, excluding each user's training items."""
    users = np.asarray(users, dtype=np.int64)
    out = {}
    n_items = model.n_items
    if train is not None:
        bounds = np.searchsorted(train.users, np.arange(train.n_users + 1))
    for start in range(0, len(users), chunk):
        block = users[start:start + chunk]
        s = model.score_matrix(block).astype(float)
        if train is not None:
            for row, u in enumerate(block):
                if u < train.n_users:
                    s[row, train.items[bounds[u]:bounds[u + 1]]] = -np.inf
        keep = min(k, n_items)
        order = np.argsort(-s, axis=1, kind="stable")[:, :keep]
        for row, u in enumerate(block):
            top = order[row]
            out[int(u)] = top[np.isfinite(s[row, top])]
    return out
