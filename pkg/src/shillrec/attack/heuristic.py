"""Heuristic profile generators: random, average, bandwagon, love/hate, segment."""

from __future__ import annotations

import math

import numpy as np

from ..dataset import DatasetStats, InteractionDataset, compute_stats
from .profiles import (AttackError, AttackParams, FakeProfileSet, available_fillers,
                       choose_fillers, discretize, make_profile, profile_rng)


def _base_pool(train: InteractionDataset, params: AttackParams, extra=()):
    excluded = set(params.target_items) | {i for i, _ in params.selected_items} | set(extra)
    return available_fillers(train.n_items, excluded)


def _grid(train):
    return tuple(train.rating_bounds), train.rating_step()


def gen_random_attack(train: InteractionDataset, params: AttackParams,
                      stats: DatasetStats | None = None) -> FakeProfileSet:
    """Filler ratings ~ Normal(global mean, global std), clipped and discretized."""
    params.check_against(train)
    stats = stats or compute_stats(train)
    bounds, step = _grid(train)
    pool = _base_pool(train, params)
    profiles = []
    for n in range(params.attack_size):
        rng = profile_rng(params.seed, n)
        fillers = choose_fillers(rng, pool, params.filler_size)
        raw = rng.normal(stats.global_mean, stats.global_std, len(fillers))
        profiles.append(make_profile(fillers, discretize(raw, bounds, step, params.intent),
                                     params.selected_items, params, bounds))
    return FakeProfileSet(profiles, "random", params)


def average_filler_ratings(rng, fillers, stats: DatasetStats, bounds, step, intent):
    """Per-item Normal(mean_i, std_i); never-rated items use the global law."""
    means = stats.per_item_mean[fillers]
    stds = stats.per_item_std[fillers]
    unrated = stats.per_item_count[fillers] == 0
    means = np.where(unrated, stats.global_mean, means)
    stds = np.where(unrated, stats.global_std, stds)
    raw = rng.normal(means, stds) if len(fillers) else np.zeros(0)
    return discretize(raw, bounds, step, intent)


def gen_average_attack(train: InteractionDataset, params: AttackParams,
                       stats: DatasetStats | None = None) -> FakeProfileSet:
    params.check_against(train)
    stats = stats or compute_stats(train)
    bounds, step = _grid(train)
    pool = _base_pool(train, params)
    profiles = []
    for n in range(params.attack_size):
        rng = profile_rng(params.seed, n)
        fillers = choose_fillers(rng, pool, params.filler_size)
        ratings = average_filler_ratings(rng, fillers, stats, bounds, step, params.intent)
        profiles.append(make_profile(fillers, ratings, params.selected_items, params, bounds))
    return FakeProfileSet(profiles, "average", params)


def popularity_ranking(stats: DatasetStats, rule: str = "by_count") -> np.ndarray:
    """Items from most to least popular; ties by lower id. Unrated items last."""
    ids = np.arange(len(stats.per_item_count))
    if rule == "by_count":
        key = stats.per_item_count
    elif rule == "by_mean_rating":
        key = np.where(stats.per_item_count > 0, np.nan_to_num(stats.per_item_mean, nan=0.0), -np.inf)
    else:
        raise AttackError(f"unknown popularity rule {rule!r}")
    return ids[np.lexsort((ids, -key))]


def gen_bandwagon_attack(train: InteractionDataset, params: AttackParams,
                         popular_fraction: float = 0.5, popularity_rule: str = "by_count",
                         stats: DatasetStats | None = None) -> FakeProfileSet:
    """floor(popular_fraction * filler_size) of the filler budget goes to the
    most popular items (stored as selected, rated r_max); the rest are random
    fillers rated from the global normal."""
    if not 0.0 <= popular_fraction <= 1.0:
        raise AttackError("popular_fraction must lie in [0, 1]")
    params.check_against(train)
    stats = stats or compute_stats(train)
    bounds, step = _grid(train)
    n_popular = int(math.floor(popular_fraction * params.filler_size))
    if params.selected_items:
        popular = [(i, r) for i, r in params.selected_items][:n_popular] if n_popular else []
    else:
        excluded = set(params.target_items)
        ranking = [int(i) for i in popularity_ranking(stats, popularity_rule) if i not in excluded]
        popular = [(i, bounds[1]) for i in ranking[:n_popular]]
    popular_ids = {i for i, _ in popular}
    pool = available_fillers(train.n_items, set(params.target_items) | popular_ids
                             | {i for i, _ in params.selected_items})
    n_random = params.filler_size - len(popular)
    profiles = []
    for n in range(params.attack_size):
        rng = profile_rng(params.seed, n)
        fillers = choose_fillers(rng, pool, n_random)
        raw = rng.normal(stats.global_mean, stats.global_std, len(fillers))
        profiles.append(make_profile(fillers, discretize(raw, bounds, step, params.intent),
                                     popular, params, bounds))
    return FakeProfileSet(profiles, "bandwagon", params,
                          notes={"popular_slots": len(popular), "popularity_rule": popularity_rule})


def gen_lovehate_attack(train: InteractionDataset, params: AttackParams) -> FakeProfileSet:
    """Push: fillers at r_min, targets at r_max. Nuke mirrors both."""
    params.check_against(train)
    bounds = tuple(train.rating_bounds)
    filler_value = bounds[0] if params.intent == "push" else bounds[1]
    pool = _base_pool(train, params)
    profiles = []
    for n in range(params.attack_size):
        rng = profile_rng(params.seed, n)
        fillers = choose_fillers(rng, pool, params.filler_size)
        profiles.append(make_profile(fillers, np.full(len(fillers), filler_value),
                                     params.selected_items, params, bounds))
    return FakeProfileSet(profiles, "lovehate", params)


def gen_segment_attack(train: InteractionDataset, params: AttackParams,
                       segment_items) -> FakeProfileSet:
    """Segment items at r_max, ``filler_size`` further fillers at r_min.

    Segment items are counted separately from the filler budget.
    """
    params.check_against(train)
    segment_items = [int(i) for i in segment_items]
    if not segment_items:
        raise AttackError("segment attack needs at least one segment item")
    if set(segment_items) & set(params.target_items):
        raise AttackError("segment items overlap the targets")
    bounds = tuple(train.rating_bounds)
    selected = [(i, bounds[1]) for i in segment_items]
    pool = _base_pool(train, params, extra=segment_items)
    profiles = []
    for n in range(params.attack_size):
        rng = profile_rng(params.seed, n)
        fillers = choose_fillers(rng, pool, params.filler_size)
        profiles.append(make_profile(fillers, np.full(len(fillers), bounds[0]),
                                     selected, params, bounds))
    return FakeProfileSet(profiles, "segment", params, notes={"segment_items": segment_items})


def segment_by_similarity(train: InteractionDataset, target: int, size: int) -> list:
    """The ``size`` items most co-rating-cosine-similar to ``target`` (ties -> lower id)."""
    x = train.to_csr(binary=True)
    col = np.asarray((x.T @ x[:, target]).todense()).ravel()
    norms = np.sqrt(np.asarray(x.multiply(x).sum(axis=0)).ravel())
    denom = norms * norms[target]
    with np.errstate(invalid="ignore", divide="ignore"):
        sim = np.where(denom > 0, col / denom, 0.0)
    sim[target] = -np.inf
    ids = np.arange(train.n_items)
    order = ids[np.lexsort((ids, -sim))]
    return [int(i) for i in order[:size]]


HEURISTICS = {
    "random": gen_random_attack,
    "average": gen_average_attack,
    "bandwagon": gen_bandwagon_attack,
    "lovehate": gen_lovehate_attack,
}
