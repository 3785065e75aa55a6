"""Unsupervised fake-user filtering with PCA-VarSelect."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field

import numpy as np

from .dataset import EXPLICIT, InteractionDataset, build_dataset

log = logging.getLogger(__name__)


@dataclass
class SuspectReport:
    flagged_users: frozenset
    scores: np.ndarray
    n_components: int
    flag_count: int
    meta: dict = field(default_factory=dict)

    def confusion(self, is_fake) -> dict:
        is_fake = np.asarray(is_fake, dtype=bool)
        flagged = np.zeros(len(is_fake), dtype=bool)
        flagged[list(self.flagged_users)] = True
        return {
            "true_positive": int(np.sum(flagged & is_fake)),
            "false_positive": int(np.sum(flagged & ~is_fake)),
            "false_negative": int(np.sum(~flagged & is_fake)),
            "true_negative": int(np.sum(~flagged & ~is_fake)),
        }

    def recall(self, is_fake) -> float:
        c = self.confusion(is_fake)
        pos = c["true_positive"] + c["false_negative"]
        return c["true_positive"] / pos if pos else 1.0

    def to_json(self, is_fake=None) -> str:
        doc = {
            "n_components": self.n_components,
            "flag_count": self.flag_count,
            "users": [
                {"user": u, "score": float(f"{s:.12g}"), "flagged": u in self.flagged_users}
                for u, s in enumerate(self.scores)
            ],
        }
        if is_fake is not None:
            doc["confusion"] = self.confusion(is_fake)
        return json.dumps(doc, sort_keys=True, indent=1) + "\n"


def zscore_rows(d: InteractionDataset, unit: bool = True) -> np.ndarray:
    """User x item matrix of per-user z-scores.

    Explicit data: z-scores over the user's observed ratings, missing -> 0.
    Implicit data: the full binary row is standardized. With ``unit`` every
    row is scaled to length 1, so the Gram matrix is a user correlation
    matrix and heavy raters do not swamp the components.
    """
    X = np.zeros((d.n_users, d.n_items))
    if d.feedback_kind == EXPLICIT:
        X[d.users, d.items] = d.ratings
        mask = np.zeros_like(X, dtype=bool)
        mask[d.users, d.items] = True
        cnt = mask.sum(axis=1)
        with np.errstate(invalid="ignore", divide="ignore"):
            mean = np.where(cnt > 0, X.sum(axis=1) / cnt, 0.0)
            dev = np.where(mask, X - mean[:, None], 0.0)
            std = np.sqrt(np.where(cnt > 0, (dev ** 2).sum(axis=1) / cnt, 0.0))
            Z = np.where(mask & (std[:, None] > 0), dev / std[:, None], 0.0)
    else:
        X[d.users, d.items] = 1.0
        mean = X.mean(axis=1, keepdims=True)
        std = X.std(axis=1, keepdims=True)
        Z = np.divide(X - mean, std, out=np.zeros_like(X), where=std > 0)
    if unit:
        n = np.linalg.norm(Z, axis=1, keepdims=True)
        Z = np.divide(Z, n, out=np.zeros_like(Z), where=n > 0)
    return Z


def principal_user_directions(Z: np.ndarray, n_components: int) -> np.ndarray:
    """Top eigenvectors (columns) of the user covariance Z Z^T.

    Solved on whichever Gram matrix is smaller.
    """
    n_users, n_items = Z.shape
    k = min(n_components, n_users, n_items)
    if n_users <= n_items:
        vals, vecs = np.linalg.eigh(Z @ Z.T)
        order = np.argsort(-vals, kind="stable")[:k]
        return vecs[:, order]
    vals, vecs = np.linalg.eigh(Z.T @ Z)
    order = np.argsort(-vals, kind="stable")[:k]
    sv = np.sqrt(np.maximum(vals[order], 0.0))
    U = Z @ vecs[:, order]
    return np.divide(U, sv, out=np.zeros_like(U), where=sv > 0)


DEFAULT_COMPONENTS = 50


def pca_varselect(train: InteractionDataset, n_components: int = DEFAULT_COMPONENTS,
                  flag_count: int = 0) -> SuspectReport:
    """Flag the users contributing least to the top principal components.

    Near-duplicate fake profiles share one dominant direction, so each one
    carries only about 1/attack_size of it and nothing else; genuine users
    pick up loading on every further component. Enough components are
    needed for that gap to open, hence the fairly large default.
    """
    if n_components < 1:
        raise ValueError("n_components must be >= 1")
    if flag_count < 0:
        raise ValueError("flag_count must be >= 0")
    if flag_count > train.n_users:
        log.warning("flag_count %d exceeds %d users; flagging all", flag_count, train.n_users)
        flag_count = train.n_users
    Z = zscore_rows(train)
    U = principal_user_directions(Z, n_components)
    scores = np.sum(U ** 2, axis=1)
    ids = np.arange(train.n_users)
    order = ids[np.lexsort((ids, np.round(scores, 12)))]
    flagged = frozenset(int(u) for u in order[:flag_count])
    return SuspectReport(flagged, scores, n_components, flag_count)


def oracle_suspects(train: InteractionDataset) -> SuspectReport:
    """Flag exactly the users labelled fake (for calibration runs)."""
    fake = train.fake_users
    scores = np.zeros(train.n_users)
    return SuspectReport(frozenset(int(u) for u in fake), scores, 0, len(fake),
                         meta={"detector": "oracle"})


def filter_users(train: InteractionDataset, suspects) -> InteractionDataset:
    """Drop flagged users and re-index the rest.

    Kept users retain their raw ids, which is the old-to-new mapping.
    """
    flagged = suspects.flagged_users if isinstance(suspects, SuspectReport) else frozenset(suspects)
    bad = [u for u in flagged if not 0 <= u < train.n_users]
    if bad:
        raise ValueError(f"flagged ids out of range: {bad[:5]}")
    keep = np.array([u for u in range(train.n_users) if u not in flagged], dtype=np.int64)
    new_index = np.full(train.n_users, -1, dtype=np.int64)
    new_index[keep] = np.arange(len(keep))
    mask = new_index[train.users] >= 0
    return build_dataset(
        new_index[train.users[mask]], train.items[mask], train.ratings[mask],
        user_ids=[train.user_ids[u] for u in keep], item_ids=train.item_ids,
        feedback_kind=train.feedback_kind, rating_bounds=train.rating_bounds,
        timestamps=None if train.timestamps is None else train.timestamps[mask],
        is_fake=None if train.is_fake is None else train.is_fake[keep],
        name=train.name,
    )
