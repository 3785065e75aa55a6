"""Biased matrix factorization trained with squared loss by minibatch SGD."""

from __future__ import annotations

import logging

import numpy as np

from ..dataset import EXPLICIT, InteractionDataset
from .model import EmbeddingModel, TrainConfig, TrainingDivergence

log = logging.getLogger(__name__)


def pointwise_loss_grad(mu, bu, bi, P, Q, users, items, ratings, reg):
    """Loss and per-sample gradients of one minibatch.

    loss = sum_n (r_n - rhat_n)^2 + reg * (b_u^2 + b_i^2 + |P_u|^2 + |Q_i|^2)

    Returns ``loss, (g_bu, g_bi, g_P, g_Q)`` with one gradient row per sample;
    rows belonging to the same parameter must be summed by the caller.
    """
    pu, qi = P[users], Q[items]
    pred = mu + bu[users] + bi[items] + np.einsum("nd,nd->n", pu, qi)
    err = ratings - pred
    loss = np.sum(err ** 2) + reg * (
        np.sum(bu[users] ** 2) + np.sum(bi[items] ** 2) + np.sum(pu ** 2) + np.sum(qi ** 2)
    )
    g = -2.0 * err
    g_bu = g + 2 * reg * bu[users]
    g_bi = g + 2 * reg * bi[items]
    g_P = g[:, None] * qi + 2 * reg * pu
    g_Q = g[:, None] * pu + 2 * reg * qi
    return loss, (g_bu, g_bi, g_P, g_Q)


def init_pointwise(train: InteractionDataset, cfg: TrainConfig) -> EmbeddingModel:
    rng = np.random.default_rng(cfg.seed)
    return EmbeddingModel(
        global_mean=float(train.ratings.mean()) if len(train) else 0.0,
        user_bias=np.zeros(train.n_users),
        item_bias=np.zeros(train.n_items),
        user_factors=rng.normal(0.0, cfg.init_std, (train.n_users, cfg.d)),
        item_factors=rng.normal(0.0, cfg.init_std, (train.n_items, cfg.d)),
        task="rating",
        rating_bounds=tuple(train.rating_bounds),
    )


def train_mf_pointwise(train: InteractionDataset, cfg: TrainConfig) -> EmbeddingModel:
    if train.feedback_kind != EXPLICIT:
        raise ValueError("pointwise MF expects explicit ratings")
    if cfg.task != "rating":
        raise ValueError("pointwise MF is a rating-task model")
    model = init_pointwise(train, cfg)
    rng = np.random.default_rng([cfg.seed, 1])
    n = len(train)
    mu, bu, bi, P, Q = (model.global_mean, model.user_bias, model.item_bias,
                        model.user_factors, model.item_factors)
    lr = cfg.learning_rate
    for epoch in range(cfg.epochs):
        perm = rng.permutation(n)
        total = 0.0
        for start in range(0, n, cfg.batch_size):
            idx = perm[start:start + cfg.batch_size]
            u, i, r = train.users[idx], train.items[idx], train.ratings[idx]
            loss, (g_bu, g_bi, g_P, g_Q) = pointwise_loss_grad(mu, bu, bi, P, Q, u, i, r,
                                                              cfg.l2_reg)
            total += loss
            np.add.at(bu, u, -lr * g_bu)
            np.add.at(bi, i, -lr * g_bi)
            np.add.at(P, u, -lr * g_P)
            np.add.at(Q, i, -lr * g_Q)
        if not np.isfinite(total) or not np.all(np.isfinite(P)) or not np.all(np.isfinite(Q)):
            raise TrainingDivergence(
                f"pointwise MF diverged at epoch {epoch}; last finite epoch {epoch - 1}")
        model.loss_history.append(total / max(n, 1))
        log.debug("mf epoch %d loss %.6f", epoch, model.loss_history[-1])
    return model
