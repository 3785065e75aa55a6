"""BPR-MF and LightGCN trained on sampled (user, positive, negative) triples.

Both share one training loop; LightGCN only adds the linear propagation of
the ego embeddings before scoring and its transpose in the backward pass.
"""

from __future__ import annotations

import logging

import numpy as np
import scipy.sparse as sp

from ..dataset import IMPLICIT, InteractionDataset
from .model import EmbeddingModel, TrainConfig, TrainingDivergence, propagate

log = logging.getLogger(__name__)


def _softplus(x):
    return np.logaddexp(0.0, x)


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def bpr_loss_grad(P, Q, users, pos, neg, reg):
    """Minibatch BPR loss on plain embeddings with per-sample gradients.

    loss = sum_n softplus(-(P_u.Q_i - P_u.Q_j)) + reg * (|P_u|^2 + |Q_i|^2 + |Q_j|^2)
    """
    pu, qi, qj = P[users], Q[pos], Q[neg]
    x = np.einsum("nd,nd->n", pu, qi - qj)
    loss = np.sum(_softplus(-x)) + reg * (np.sum(pu ** 2) + np.sum(qi ** 2) + np.sum(qj ** 2))
    g = -_sigmoid(-x)[:, None]
    g_P = g * (qi - qj) + 2 * reg * pu
    g_Qi = g * pu + 2 * reg * qi
    g_Qj = -g * pu + 2 * reg * qj
    return loss, (g_P, g_Qi, g_Qj)


def normalized_adjacency(train: InteractionDataset) -> sp.csr_matrix:
    """Symmetric-normalized bipartite adjacency D^-1/2 A D^-1/2 over users+items."""
    nu, ni = train.n_users, train.n_items
    r = train.to_csr(binary=True)
    a = sp.bmat([[None, r], [r.T, None]], format="csr", dtype=float)
    a.data[:] = 1.0
    deg = np.asarray(a.sum(axis=1)).ravel()
    with np.errstate(divide="ignore"):
        inv = np.where(deg > 0, 1.0 / np.sqrt(deg), 0.0)
    d = sp.diags(inv)
    out = (d @ a @ d).tocsr()
    out.sort_indices()
    assert out.shape == (nu + ni, nu + ni)
    return out


def lightgcn_loss_grad(E0, adj, n_users, n_layers, users, pos, neg, reg):
    """BPR loss on propagated embeddings; returns loss and dense dL/dE0.

    Regularization acts on the ego (layer-0) embeddings of the batch nodes.
    """
    E = propagate(adj, E0, n_layers)
    P, Q = E[:n_users], E[n_users:]
    pu, qi, qj = P[users], Q[pos], Q[neg]
    x = np.einsum("nd,nd->n", pu, qi - qj)
    e_u, e_i, e_j = E0[users], E0[n_users + pos], E0[n_users + neg]
    loss = np.sum(_softplus(-x)) + reg * (np.sum(e_u ** 2) + np.sum(e_i ** 2) + np.sum(e_j ** 2))
    g = -_sigmoid(-x)[:, None]
    gE = np.zeros_like(E0)
    np.add.at(gE, users, g * (qi - qj))
    np.add.at(gE, n_users + pos, g * pu)
    np.add.at(gE, n_users + neg, -g * pu)
    # adjacency is symmetric, so the transpose pass is the same propagation
    gE0 = propagate(adj, gE, n_layers)
    np.add.at(gE0, users, 2 * reg * e_u)
    np.add.at(gE0, n_users + pos, 2 * reg * e_i)
    np.add.at(gE0, n_users + neg, 2 * reg * e_j)
    return loss, gE0


class NegativeSampler:
    """Uniform negatives over items the user has not interacted with."""

    def __init__(self, train: InteractionDataset):
        self.n_items = train.n_items
        self.codes = np.sort(train.users * train.n_items + train.items)
        counts = np.bincount(train.users, minlength=train.n_users)
        self.saturated = counts >= train.n_items

    def _observed(self, users, items):
        codes = users * self.n_items + items
        pos = np.searchsorted(self.codes, codes)
        pos = np.minimum(pos, len(self.codes) - 1)
        return self.codes[pos] == codes

    def sample(self, users, rng) -> np.ndarray:
        neg = rng.integers(0, self.n_items, size=len(users))
        bad = np.flatnonzero(self._observed(users, neg))
        while len(bad):
            neg[bad] = rng.integers(0, self.n_items, size=len(bad))
            bad = bad[self._observed(users[bad], neg[bad])]
        return neg


def _train_pairwise(train: InteractionDataset, cfg: TrainConfig, n_layers: int) -> EmbeddingModel:
    if train.feedback_kind != IMPLICIT:
        raise ValueError("pairwise training expects implicit feedback")
    if n_layers < 0:
        raise ValueError("n_layers must be >= 0")
    rng = np.random.default_rng(cfg.seed)
    nu, ni = train.n_users, train.n_items
    P = rng.normal(0.0, cfg.init_std, (nu, cfg.d))
    Q = rng.normal(0.0, cfg.init_std, (ni, cfg.d))
    adj = normalized_adjacency(train) if n_layers > 0 else None
    model = EmbeddingModel(global_mean=0.0, user_bias=np.zeros(nu), item_bias=np.zeros(ni),
                           user_factors=P, item_factors=Q, task="ranking",
                           n_layers=n_layers, norm_adjacency=adj,
                           rating_bounds=tuple(train.rating_bounds))
    sampler = NegativeSampler(train)
    keep = ~sampler.saturated[train.users]
    base_u = np.repeat(train.users[keep], cfg.negatives_per_positive)
    base_i = np.repeat(train.items[keep], cfg.negatives_per_positive)
    n = len(base_u)
    lr = cfg.learning_rate
    step_rng = np.random.default_rng([cfg.seed, 1])
    E0 = np.vstack([P, Q]) if n_layers > 0 else None
    for epoch in range(cfg.epochs):
        perm = step_rng.permutation(n)
        users_all, pos_all = base_u[perm], base_i[perm]
        neg_all = sampler.sample(users_all, step_rng)
        total = 0.0
        for start in range(0, n, cfg.batch_size):
            sl = slice(start, start + cfg.batch_size)
            u, i, j = users_all[sl], pos_all[sl], neg_all[sl]
            if n_layers == 0:
                loss, (g_P, g_Qi, g_Qj) = bpr_loss_grad(P, Q, u, i, j, cfg.l2_reg)
                np.add.at(P, u, -lr * g_P)
                np.add.at(Q, i, -lr * g_Qi)
                np.add.at(Q, j, -lr * g_Qj)
            else:
                loss, gE0 = lightgcn_loss_grad(E0, adj, nu, n_layers, u, i, j, cfg.l2_reg)
                E0 -= lr * gE0
            total += loss
        if not np.isfinite(total):
            raise TrainingDivergence(
                f"pairwise training diverged at epoch {epoch}; last finite epoch {epoch - 1}")
        model.loss_history.append(total / max(n, 1))
        log.debug("bpr epoch %d loss %.6f", epoch, model.loss_history[-1])
    if n_layers > 0:
        model.user_factors = E0[:nu].copy()
        model.item_factors = E0[nu:].copy()
    return model


def train_bpr(train: InteractionDataset, cfg: TrainConfig) -> EmbeddingModel:
    """BPR-MF; users without positives never appear in a triple."""
    return _train_pairwise(train, cfg, n_layers=0)


def train_lightgcn(train: InteractionDataset, cfg: TrainConfig, n_layers: int = 2) -> EmbeddingModel:
    return _train_pairwise(train, cfg, n_layers=n_layers)
