"""Attack parameters, fake-profile containers, target selection and injection."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from ..dataset import EXPLICIT, IMPLICIT, DatasetStats, InteractionDataset, build_dataset

log = logging.getLogger(__name__)

PUSH, NUKE = "push", "nuke"
EXPLICIT_TRIPLETS, IMPLICIT_PAIRS = "explicit_triplets", "implicit_pairs"


class AttackError(ValueError):
    pass


@dataclass(frozen=True)
class AttackParams:
    attack_size: int
    filler_size: int
    target_items: tuple
    selected_items: tuple = ()
    intent: str = PUSH
    seed: int = 0
    output_kind: str = EXPLICIT_TRIPLETS

    def __post_init__(self):
        object.__setattr__(self, "target_items", tuple(int(t) for t in self.target_items))
        object.__setattr__(self, "selected_items",
                           tuple((int(i), float(r)) for i, r in self.selected_items))
        if self.attack_size < 0:
            raise AttackError("attack_size must be >= 0")
        if self.filler_size < 0:
            raise AttackError("filler_size must be >= 0")
        if not self.target_items:
            raise AttackError("at least one target item is required")
        if len(set(self.target_items)) != len(self.target_items):
            raise AttackError("duplicate target items")
        if set(self.target_items) & {i for i, _ in self.selected_items}:
            raise AttackError("selected items overlap the targets")
        if self.intent not in (PUSH, NUKE):
            raise AttackError(f"unknown intent {self.intent!r}")
        if self.output_kind not in (EXPLICIT_TRIPLETS, IMPLICIT_PAIRS):
            raise AttackError(f"unknown output kind {self.output_kind!r}")
        if self.output_kind == IMPLICIT_PAIRS and self.intent == NUKE:
            raise AttackError("nuke intent has no meaning for implicit pairs")

    def check_against(self, d: InteractionDataset):
        want = EXPLICIT if self.output_kind == EXPLICIT_TRIPLETS else IMPLICIT
        if d.feedback_kind != want:
            raise AttackError(f"{self.output_kind} output requires {want} data")
        bad = [t for t in self.target_items if not 0 <= t < d.n_items]
        if bad:
            raise AttackError(f"target items out of range: {bad}")

    def as_dict(self) -> dict:
        return {
            "attack_size": self.attack_size, "filler_size": self.filler_size,
            "target_items": list(self.target_items),
            "selected_items": [list(x) for x in self.selected_items],
            "intent": self.intent, "seed": self.seed, "output_kind": self.output_kind,
        }


@dataclass(frozen=True)
class Profile:
    filler: tuple
    selected: tuple
    targets: tuple

    def entries(self):
        return (*self.selected, *self.filler, *self.targets)

    def items(self) -> list:
        return [i for i, _ in self.entries()]


@dataclass
class FakeProfileSet:
    profiles: list
    generator_name: str
    params: AttackParams
    notes: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.profiles)

    def n_entries(self) -> int:
        return sum(len(p.entries()) for p in self.profiles)

    def to_rows(self, first_user: int = 0):
        """(fake user index, item, rating) rows in profile order."""
        for n, p in enumerate(self.profiles):
            for i, r in sorted(p.entries()):
                yield first_user + n, i, r

    def __eq__(self, other):
        if not isinstance(other, FakeProfileSet):
            return NotImplemented
        return (self.generator_name == other.generator_name and self.params == other.params
                and self.profiles == other.profiles)


# ------------------------------------------------------------------- ratings

def discretize(values, bounds, step, intent=PUSH) -> np.ndarray:
    """Clip to bounds and round to the rating grid.

    Exact half-way values go up for push and down for nuke. ``step=None``
    only clips.
    """
    lo, hi = bounds
    v = np.clip(np.asarray(values, dtype=float), lo, hi)
    if step is None:
        return v
    k = (v - lo) / step
    k = np.floor(k + 0.5) if intent == PUSH else np.ceil(k - 0.5)
    return np.clip(lo + k * step, lo, hi)


def target_rating(bounds, intent) -> float:
    return float(bounds[1] if intent == PUSH else bounds[0])


def profile_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng([int(seed) & (2 ** 63 - 1), int(index)])


def available_fillers(n_items: int, excluded) -> np.ndarray:
    mask = np.ones(n_items, dtype=bool)
    ex = np.fromiter(excluded, dtype=np.int64)
    if len(ex):
        mask[ex] = False
    return np.flatnonzero(mask)


def choose_fillers(rng, pool: np.ndarray, size: int) -> np.ndarray:
    if size > len(pool):
        log.warning("filler size %d exceeds %d available items; using all", size, len(pool))
        size = len(pool)
    return np.sort(rng.choice(pool, size=size, replace=False)) if size else pool[:0]


def make_profile(fillers, filler_ratings, selected, params: AttackParams, bounds) -> Profile:
    implicit = params.output_kind == IMPLICIT_PAIRS
    rate = (lambda r: 1.0) if implicit else float
    t_rating = 1.0 if implicit else target_rating(bounds, params.intent)
    return Profile(
        filler=tuple((int(i), rate(r)) for i, r in zip(fillers, filler_ratings)),
        selected=tuple((int(i), rate(r)) for i, r in selected),
        targets=tuple((t, t_rating) for t in params.target_items),
    )


# ---------------------------------------------------------------- selection

def select_targets(d: InteractionDataset, stats: DatasetStats | None, count: int,
                   mode: str = "popular", seed: int = 0) -> list:
    if count <= 0:
        raise AttackError("target count must be positive")
    if count > d.n_items:
        raise AttackError("more targets requested than items exist")
    if mode == "popular":
        counts = stats.per_item_count if stats is not None else np.bincount(d.items, minlength=d.n_items)
        order = np.lexsort((np.arange(d.n_items), -counts))
        return [int(i) for i in order[:count]]
    if mode == "random":
        rng = np.random.default_rng(seed)
        return sorted(int(i) for i in rng.choice(d.n_items, size=count, replace=False))
    raise AttackError(f"unknown target selection mode {mode!r}")


def default_attack_params(d: InteractionDataset, stats: DatasetStats, *, seed: int = 0,
                          attack_fraction: float = 0.20) -> AttackParams:
    """Experiment-protocol defaults: 20% attackers, average-profile fillers,
    attack_size/3 popular targets (explicit) or 0.5% random targets (implicit)."""
    attack_size = int(math.floor(attack_fraction * d.n_users))
    filler_size = int(round(stats.avg_actions_per_user))
    if d.feedback_kind == EXPLICIT:
        n_targets = max(1, attack_size // 3)
        targets = select_targets(d, stats, n_targets, "popular")
        kind = EXPLICIT_TRIPLETS
    else:
        n_targets = max(1, int(math.floor(0.005 * attack_size)))
        targets = select_targets(d, stats, n_targets, "random", seed)
        kind = IMPLICIT_PAIRS
    return AttackParams(attack_size=attack_size, filler_size=filler_size,
                        target_items=tuple(targets), seed=seed, output_kind=kind)


# ------------------------------------------------------------------- inject

FAKE_PREFIX = "__fake_"


def inject(train: InteractionDataset, fakes: FakeProfileSet) -> InteractionDataset:
    """Append every fake profile as a new user and label origins."""
    fakes.params.check_against(train)
    n0 = train.n_users
    rows = list(fakes.to_rows(first_user=n0))
    if rows:
        fu, fi, fr = (np.array(c) for c in zip(*rows))
    else:
        fu = fi = np.zeros(0, dtype=np.int64)
        fr = np.zeros(0)
    if len(fi) and (fi.min() < 0 or fi.max() >= train.n_items):
        raise AttackError("fake profile references an unknown item")
    timestamps = None
    if train.timestamps is not None:
        stamp = int(train.timestamps.max()) if len(train) else 0
        timestamps = np.concatenate([train.timestamps, np.full(len(fu), stamp, dtype=np.int64)])
    prior = train.is_fake if train.is_fake is not None else np.zeros(n0, dtype=bool)
    start = int(prior.sum())
    user_ids = train.user_ids + tuple(f"{FAKE_PREFIX}{start + n}" for n in range(len(fakes)))
    is_fake = np.concatenate([prior, np.ones(len(fakes), dtype=bool)])
    return build_dataset(
        np.concatenate([train.users, fu]), np.concatenate([train.items, fi]),
        np.concatenate([train.ratings, fr]),
        user_ids=user_ids, item_ids=train.item_ids, feedback_kind=train.feedback_kind,
        rating_bounds=train.rating_bounds, timestamps=timestamps, is_fake=is_fake,
        name=train.name,
    )


def fakes_to_tsv(fakes: FakeProfileSet, item_ids=None) -> str:
    """Delimited export with an origin column."""
    lines = ["user\titem\trating\torigin"]
    for u, i, r in fakes.to_rows():
        item = item_ids[i] if item_ids is not None else i
        lines.append(f"{FAKE_PREFIX}{u}\t{item}\t{float(r)!r}\tfake")
    return "\n".join(lines) + "\n"
