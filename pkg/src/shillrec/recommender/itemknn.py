"""Item-based kNN with cosine similarity over item interaction columns."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from ..dataset import InteractionDataset


def cosine_item_similarity(train: InteractionDataset) -> np.ndarray:
    """Dense item x item cosine similarity of the rating columns; zero columns give 0."""
    x = train.to_csr()
    gram = np.asarray((x.T @ x).todense(), dtype=float)
    norms = np.sqrt(np.diag(gram))
    denom = np.outer(norms, norms)
    with np.errstate(invalid="ignore", divide="ignore"):
        sim = np.where(denom > 0, gram / denom, 0.0)
    return sim


def top_neighbors(sim: np.ndarray, k: int) -> np.ndarray:
    """Per item, the ``k`` most similar other items (ties -> lower id)."""
    sim = sim.copy()
    np.fill_diagonal(sim, -np.inf)
    order = np.argsort(-sim, axis=1, kind="stable")
    return order[:, :k]


@dataclass(eq=False)
class ItemKNNModel:
    similarity: sp.csr_matrix   # row i holds sim(i, j) for j in i's neighbor list
    interactions: sp.csr_matrix  # binary user x item training matrix
    k_neighbors: int

    @property
    def n_users(self) -> int:
        return self.interactions.shape[0]

    @property
    def n_items(self) -> int:
        return self.interactions.shape[1]

    def score_matrix(self, users=None) -> np.ndarray:
        users = np.arange(self.n_users) if users is None else np.asarray(users)
        return np.asarray((self.interactions[users] @ self.similarity.T).todense())

    def score(self, users, items) -> np.ndarray:
        users = np.asarray(users)
        items = np.asarray(items)
        full = self.score_matrix(users)
        return full[np.arange(len(users)), items]


def train_itemknn(train: InteractionDataset, k_neighbors: int = 50) -> ItemKNNModel:
    """score(u, i) = sum over u's items j of sim(i, j), j restricted to i's top-k list."""
    sim = cosine_item_similarity(train)
    k = min(k_neighbors, max(train.n_items - 1, 0))
    nbrs = top_neighbors(sim, k)
    rows = np.repeat(np.arange(train.n_items), k)
    cols = nbrs.ravel()
    vals = sim[rows, cols]
    pruned = sp.csr_matrix((vals, (rows, cols)), shape=sim.shape)
    return ItemKNNModel(similarity=pruned, interactions=train.to_csr(binary=True),
                        k_neighbors=k_neighbors)
