"""Embedding model container, training config, scoring and serialization."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp

MODEL_FORMAT_VERSION = 1


class TrainingDivergence(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    task: str = "rating"            # rating | ranking
    loss: str = "squared_pointwise"  # squared_pointwise | bpr_pairwise
    d: int = 32
    learning_rate: float = 0.01
    l2_reg: float = 1e-4
    epochs: int = 50
    negatives_per_positive: int = 1
    batch_size: int = 256
    seed: int = 0

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.l2_reg < 0:
            raise ValueError("l2_reg must be non-negative")
        if self.d < 1:
            raise ValueError("d must be >= 1")
        if self.task not in ("rating", "ranking"):
            raise ValueError(f"unknown task {self.task!r}")
        if self.loss not in ("squared_pointwise", "bpr_pairwise"):
            raise ValueError(f"unknown loss {self.loss!r}")

    @property
    def init_std(self) -> float:
        return 0.1 / np.sqrt(self.d)


@dataclass(eq=False)
class EmbeddingModel:
    """Trained factor model.

    With ``task == "rating"`` the score is mu + b_u + b_i + P_u.Q_i; with
    ``task == "ranking"`` it is the dot product of the (optionally
    LightGCN-propagated) user and item embeddings.
    """

    global_mean: float
    user_bias: np.ndarray
    item_bias: np.ndarray
    user_factors: np.ndarray
    item_factors: np.ndarray
    task: str = "rating"
    n_layers: int = 0
    norm_adjacency: sp.csr_matrix | None = None
    rating_bounds: tuple = (1.0, 5.0)
    loss_history: list = field(default_factory=list)

    @property
    def n_users(self) -> int:
        return self.user_factors.shape[0]

    @property
    def n_items(self) -> int:
        return self.item_factors.shape[0]

    def embeddings(self) -> tuple[np.ndarray, np.ndarray]:
        """Final (user, item) embeddings after propagation."""
        if self.n_layers == 0:
            return self.user_factors, self.item_factors
        e = propagate(self.norm_adjacency,
                      np.vstack([self.user_factors, self.item_factors]), self.n_layers)
        return e[:self.n_users], e[self.n_users:]

    def score_matrix(self, users=None) -> np.ndarray:
        """Raw (unclipped) scores, one row per requested user."""
        users = np.arange(self.n_users) if users is None else np.asarray(users)
        P, Q = self.embeddings()
        s = P[users] @ Q.T
        if self.task == "rating":
            s = s + self.global_mean + self.user_bias[users][:, None] + self.item_bias[None, :]
        return s

    def score(self, users, items) -> np.ndarray:
        users = np.asarray(users)
        items = np.asarray(items)
        P, Q = self.embeddings()
        s = np.sum(P[users] * Q[items], axis=-1)
        if self.task == "rating":
            s = s + self.global_mean + self.user_bias[users] + self.item_bias[items]
        return s


def propagate(adj: sp.csr_matrix, e0: np.ndarray, n_layers: int) -> np.ndarray:
    """Mean of the layer embeddings E, AE, ..., A^L E."""
    out = e0.copy()
    e = e0
    for _ in range(n_layers):
        e = adj @ e
        out += e
    return out / (n_layers + 1)


def predict_rating(model: EmbeddingModel, user: int, item: int, clip: bool = True) -> float:
    if not (0 <= user < model.n_users) or not (0 <= item < model.n_items):
        raise IndexError(f"unknown user/item id ({user}, {item})")
    value = float(model.score(np.array([user]), np.array([item]))[0])
    if clip:
        lo, hi = model.rating_bounds
        value = min(max(value, lo), hi)
    return value


def predict_ratings(model: EmbeddingModel, users, items, clip: bool = True) -> np.ndarray:
    values = model.score(users, items)
    if clip:
        values = np.clip(values, *model.rating_bounds)
    return values


def save_model(model: EmbeddingModel, path) -> Path:
    path = Path(path)
    meta = {
        "version": MODEL_FORMAT_VERSION,
        "kind": "embedding",
        "task": model.task,
        "n_layers": model.n_layers,
        "global_mean": model.global_mean,
        "rating_bounds": list(model.rating_bounds),
        "shapes": {"user_factors": list(model.user_factors.shape),
                   "item_factors": list(model.item_factors.shape)},
    }
    arrays = dict(user_bias=model.user_bias, item_bias=model.item_bias,
                  user_factors=model.user_factors, item_factors=model.item_factors)
    if model.norm_adjacency is not None:
        adj = model.norm_adjacency.tocsr()
        arrays.update(adj_data=adj.data, adj_indices=adj.indices, adj_indptr=adj.indptr)
    with open(path, "wb") as fh:
        np.savez(fh, meta=np.array(json.dumps(meta, sort_keys=True)), **arrays)
    return path


def load_model(path) -> EmbeddingModel:
    with np.load(path, allow_pickle=False) as z:
        meta = json.loads(str(z["meta"]))
        if meta.get("version") != MODEL_FORMAT_VERSION or meta.get("kind") != "embedding":
            raise ValueError(f"unsupported model dump {path}")
        adj = None
        if "adj_data" in z:
            n = sum(meta["shapes"]["user_factors"][:1] + meta["shapes"]["item_factors"][:1])
            adj = sp.csr_matrix((z["adj_data"], z["adj_indices"], z["adj_indptr"]), shape=(n, n))
        model = EmbeddingModel(
            global_mean=float(meta["global_mean"]),
            user_bias=z["user_bias"].copy(), item_bias=z["item_bias"].copy(),
            user_factors=z["user_factors"].copy(), item_factors=z["item_factors"].copy(),
            task=meta["task"], n_layers=int(meta["n_layers"]), norm_adjacency=adj,
            rating_bounds=tuple(meta["rating_bounds"]),
        )
    for name, shape in meta["shapes"].items():
        if list(getattr(model, name).shape) != shape:
            raise ValueError(f"shape mismatch for {name}")
    return model
