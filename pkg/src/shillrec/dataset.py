"""Interaction datasets: loading, implicit conversion, splitting, statistics
and the on-disk cache for attacked data."""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
import os
import shutil
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp

log = logging.getLogger(__name__)

EXPLICIT = "explicit"
IMPLICIT = "implicit"

DEFAULT_SCHEMA = {"user": 0, "item": 1, "rating": 2, "timestamp": 3}


class DatasetError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class InteractionDataset:
    """Dense-indexed user-item interactions.

    Interactions are stored column-wise and kept sorted by (user, item), so
    two datasets holding the same records are array-identical.
    ``user_ids``/``item_ids`` map dense indices back to raw ids.
    ``is_fake`` is the per-user origin label (None when unknown).
    """

    users: np.ndarray
    items: np.ndarray
    ratings: np.ndarray
    user_ids: tuple
    item_ids: tuple
    feedback_kind: str = EXPLICIT
    rating_bounds: tuple = (1.0, 5.0)
    timestamps: np.ndarray | None = None
    is_fake: np.ndarray | None = None
    name: str = "dataset"

    def __post_init__(self):
        for arr in (self.users, self.items, self.ratings):
            arr.setflags(write=False)
        if self.timestamps is not None:
            self.timestamps.setflags(write=False)
        if self.is_fake is not None:
            self.is_fake.setflags(write=False)

    @property
    def n_users(self) -> int:
        return len(self.user_ids)

    @property
    def n_items(self) -> int:
        return len(self.item_ids)

    @property
    def n_interactions(self) -> int:
        return len(self.users)

    def __len__(self):
        return self.n_interactions

    def __eq__(self, other):
        if not isinstance(other, InteractionDataset):
            return NotImplemented
        if (self.user_ids, self.item_ids, self.feedback_kind, self.name) != (
            other.user_ids, other.item_ids, other.feedback_kind, other.name
        ):
            return False
        if tuple(map(float, self.rating_bounds)) != tuple(map(float, other.rating_bounds)):
            return False
        if not (
            np.array_equal(self.users, other.users)
            and np.array_equal(self.items, other.items)
            and np.array_equal(self.ratings, other.ratings)
        ):
            return False
        for a, b in ((self.timestamps, other.timestamps), (self.is_fake, other.is_fake)):
            if (a is None) != (b is None) or (a is not None and not np.array_equal(a, b)):
                return False
        return True

    __hash__ = None

    @property
    def genuine_users(self) -> np.ndarray:
        if self.is_fake is None:
            return np.arange(self.n_users)
        return np.flatnonzero(~self.is_fake)

    @property
    def fake_users(self) -> np.ndarray:
        if self.is_fake is None:
            return np.arange(0)
        return np.flatnonzero(self.is_fake)

    def to_csr(self, binary: bool = False) -> sp.csr_matrix:
        data = np.ones(len(self.users)) if binary else np.asarray(self.ratings, dtype=float)
        return sp.csr_matrix(
            (data, (self.users, self.items)), shape=(self.n_users, self.n_items)
        )

    def user_items(self) -> list[np.ndarray]:
        """Item indices per user (sorted)."""
        bounds = np.searchsorted(self.users, np.arange(self.n_users + 1))
        return [self.items[bounds[u]:bounds[u + 1]] for u in range(self.n_users)]

    def rating_step(self) -> float | None:
        """Spacing of the rating grid, or None when ratings look continuous."""
        if self.feedback_kind == IMPLICIT:
            return 1.0
        vals = np.unique(np.concatenate([self.ratings, np.asarray(self.rating_bounds, float)]))
        for step in (1.0, 0.5, 0.25, 0.1):
            scaled = vals / step
            if np.allclose(scaled, np.round(scaled), atol=1e-9):
                return step
        return None

    def subset(self, mask: np.ndarray) -> "InteractionDataset":
        """Same index space, only the interactions selected by ``mask``."""
        return InteractionDataset(
            users=self.users[mask].copy(),
            items=self.items[mask].copy(),
            ratings=self.ratings[mask].copy(),
            user_ids=self.user_ids,
            item_ids=self.item_ids,
            feedback_kind=self.feedback_kind,
            rating_bounds=self.rating_bounds,
            timestamps=None if self.timestamps is None else self.timestamps[mask].copy(),
            is_fake=self.is_fake,
            name=self.name,
        )

    def replace(self, **changes) -> "InteractionDataset":
        fields = {
            k: getattr(self, k)
            for k in ("users", "items", "ratings", "user_ids", "item_ids", "feedback_kind",
                      "rating_bounds", "timestamps", "is_fake", "name")
        }
        fields.update(changes)
        return InteractionDataset(**fields)


def build_dataset(users, items, ratings, *, user_ids, item_ids, feedback_kind=EXPLICIT,
                  rating_bounds=None, timestamps=None, is_fake=None, name="dataset"):
    """Sort interactions canonically and validate the dataset invariants."""
    users = np.asarray(users, dtype=np.int64)
    items = np.asarray(items, dtype=np.int64)
    ratings = np.asarray(ratings, dtype=np.float64)
    if timestamps is not None:
        timestamps = np.asarray(timestamps, dtype=np.int64)
    order = np.lexsort((items, users))
    users, items, ratings = users[order], items[order], ratings[order]
    if timestamps is not None:
        timestamps = timestamps[order]
    n_users, n_items = len(user_ids), len(item_ids)
    if len(users) and (users.min() < 0 or users.max() >= n_users
                       or items.min() < 0 or items.max() >= n_items):
        raise DatasetError("interaction index out of range")
    if len(users) > 1:
        same = (users[1:] == users[:-1]) & (items[1:] == items[:-1])
        if same.any():
            raise DatasetError("duplicate (user, item) pair")
    if rating_bounds is None:
        rating_bounds = (float(ratings.min()), float(ratings.max())) if len(ratings) else (1.0, 1.0)
    rating_bounds = (float(rating_bounds[0]), float(rating_bounds[1]))
    if feedback_kind == IMPLICIT:
        if not np.all(ratings == 1.0):
            raise DatasetError("implicit data must carry rating 1")
        rating_bounds = (1.0, 1.0)
    elif feedback_kind == EXPLICIT:
        if len(ratings) and (ratings.min() < rating_bounds[0] or ratings.max() > rating_bounds[1]):
            raise DatasetError(f"ratings outside bounds {rating_bounds}")
    else:
        raise DatasetError(f"unknown feedback kind {feedback_kind!r}")
    if is_fake is not None:
        is_fake = np.asarray(is_fake, dtype=bool)
        if len(is_fake) != n_users:
            raise DatasetError("origin labels must cover every user")
    return InteractionDataset(
        users=users, items=items, ratings=ratings,
        user_ids=tuple(user_ids), item_ids=tuple(item_ids),
        feedback_kind=feedback_kind, rating_bounds=rating_bounds,
        timestamps=timestamps, is_fake=is_fake, name=name,
    )


def _sniff_delimiter(line: str) -> str:
    return "\t" if "\t" in line else ","


def _is_number(text: str) -> bool:
    try:
        float(text)
    except ValueError:
        return False
    return True


def load_explicit(path, schema=None, *, delimiter=None, header=None, rating_bounds=None,
                  name=None) -> InteractionDataset:
    """Read a delimited ratings file into an explicit dataset.

    ``schema`` maps the roles ``user``, ``item``, ``rating`` and optionally
    ``timestamp`` to column names (header files) or zero-based positions.
    Duplicate (user, item) rows keep the latest timestamp, else the last row.
    """
    path = Path(path)
    schema = dict(DEFAULT_SCHEMA if schema is None else schema)
    with open(path, newline="") as fh:
        lines = fh.read().splitlines()
    body = [(n, ln) for n, ln in enumerate(lines, start=1) if ln.strip()]
    if not body:
        raise DatasetError(f"{path}: no interactions")
    delimiter = delimiter or _sniff_delimiter(body[0][1])
    rows = [(n, next(csv.reader([ln], delimiter=delimiter))) for n, ln in body]

    if header is None:
        first = rows[0][1]
        rating_col = schema["rating"]
        if isinstance(rating_col, str):
            header = True
        else:
            header = rating_col >= len(first) or not _is_number(first[rating_col].strip())
    columns = {}
    if header:
        names = [c.strip() for c in rows[0][1]]
        rows = rows[1:]
        for role, col in schema.items():
            if isinstance(col, str):
                # RecBole-style "user_id:token" headers match on the bare name too
                bare = [c.split(":")[0] for c in names]
                if col in names:
                    columns[role] = names.index(col)
                elif col in bare:
                    columns[role] = bare.index(col)
                elif role == "timestamp":
                    continue
                else:
                    raise DatasetError(f"{path}: column {col!r} not found in header {names}")
            else:
                columns[role] = col
    else:
        for role, col in schema.items():
            if isinstance(col, str):
                raise DatasetError(f"{path}: named column {col!r} requires a header row")
            columns[role] = col
    for role in ("user", "item", "rating"):
        if role not in columns:
            raise DatasetError(f"schema lacks the {role!r} column")
    if not rows:
        raise DatasetError(f"{path}: no interactions")

    has_ts = "timestamp" in columns
    latest: dict[tuple[str, str], tuple[int, float, int]] = {}
    duplicates = 0
    for order, (lineno, row) in enumerate(rows):
        try:
            u = row[columns["user"]].strip()
            i = row[columns["item"]].strip()
            r = float(row[columns["rating"]])
            ts = None
            if has_ts and columns["timestamp"] < len(row):
                ts = int(float(row[columns["timestamp"]]))
        except (IndexError, ValueError) as exc:
            raise DatasetError(f"{path}: malformed row at line {lineno}: {exc}") from None
        if not u or not i or not math.isfinite(r):
            raise DatasetError(f"{path}: malformed row at line {lineno}")
        key = (u, i)
        if key in latest:
            duplicates += 1
            prev_ts = latest[key][1]
            if ts is not None and prev_ts is not None and ts < prev_ts:
                continue
        latest[key] = (order, ts, r)
    if duplicates:
        log.warning("%s: %d duplicate (user, item) rows resolved", path, duplicates)

    keys = sorted(latest, key=lambda k: latest[k][0])
    user_ids = _first_seen_sorted(k[0] for k in keys)
    item_ids = _first_seen_sorted(k[1] for k in keys)
    umap = {u: n for n, u in enumerate(user_ids)}
    imap = {i: n for n, i in enumerate(item_ids)}
    users = [umap[k[0]] for k in keys]
    items = [imap[k[1]] for k in keys]
    ratings = [latest[k][2] for k in keys]
    timestamps = None
    if has_ts and all(latest[k][1] is not None for k in keys):
        timestamps = [latest[k][1] for k in keys]
    return build_dataset(
        users, items, ratings, user_ids=user_ids, item_ids=item_ids,
        feedback_kind=EXPLICIT, rating_bounds=rating_bounds, timestamps=timestamps,
        name=name or path.stem,
    )


def _first_seen_sorted(ids) -> tuple:
    """Raw ids in natural order: numeric ids sort numerically."""
    uniq = set(ids)
    if all(s.lstrip("-").isdigit() for s in uniq):
        return tuple(sorted(uniq, key=int))
    return tuple(sorted(uniq))


def convert_to_implicit(d: InteractionDataset, threshold: float | None = None) -> InteractionDataset:
    """Binarize explicit feedback.

    Without a threshold every interaction becomes a positive; with one, only
    ratings >= threshold survive. The index space is kept unchanged.
    """
    if d.feedback_kind != EXPLICIT:
        raise DatasetError("convert_to_implicit expects explicit data")
    mask = np.ones(len(d), dtype=bool) if threshold is None else d.ratings >= threshold
    if not mask.any():
        raise DatasetError("empty conversion: no rating reaches the threshold")
    kept = d.subset(mask)
    return kept.replace(ratings=np.ones(int(mask.sum())), feedback_kind=IMPLICIT,
                        rating_bounds=(1.0, 1.0))


@dataclass(frozen=True)
class SplitSpec:
    strategy: str = "ratio_random"
    train_fraction: float = 0.8
    k: int = 1
    seed: int = 0

    def __post_init__(self):
        if self.strategy == "ratio_random":
            if not 0.0 < self.train_fraction < 1.0:
                raise DatasetError("train_fraction must lie in (0, 1)")
        elif self.strategy == "leave_k_out_per_user":
            if self.k < 1:
                raise DatasetError("k must be >= 1")
        else:
            raise DatasetError(f"unknown split strategy {self.strategy!r}")


def split_holdout(d: InteractionDataset, spec: SplitSpec):
    """Seeded disjoint train/test partition over the same index space."""
    rng = np.random.default_rng(spec.seed)
    n = len(d)
    test_mask = np.zeros(n, dtype=bool)
    if spec.strategy == "ratio_random":
        perm = rng.permutation(n)
        n_train = int(math.floor(spec.train_fraction * n))
        test_mask[perm[n_train:]] = True
    else:
        bounds = np.searchsorted(d.users, np.arange(d.n_users + 1))
        skipped = 0
        for u in range(d.n_users):
            lo, hi = bounds[u], bounds[u + 1]
            if hi - lo < spec.k + 1:
                skipped += hi - lo > 0
                continue
            test_mask[lo + rng.choice(hi - lo, size=spec.k, replace=False)] = True
        if skipped:
            log.info("leave-%d-out: %d users with too few interactions kept train-only",
                     spec.k, skipped)
    return d.subset(~test_mask), d.subset(test_mask)


@dataclass
class DatasetStats:
    global_mean: float
    global_std: float
    per_item_mean: np.ndarray
    per_item_std: np.ndarray
    per_item_count: np.ndarray
    per_user_count: np.ndarray
    avg_actions_per_user: float
    avg_actions_per_item: float


def compute_stats(d: InteractionDataset) -> DatasetStats:
    """Population statistics over observed ratings.

    Unrated items get mean NaN and std 0; items with a single rating get std 0.
    """
    if len(d) == 0:
        raise DatasetError("cannot compute statistics of an empty dataset")
    r = d.ratings
    count_i = np.bincount(d.items, minlength=d.n_items)
    count_u = np.bincount(d.users, minlength=d.n_users)
    sum_i = np.bincount(d.items, weights=r, minlength=d.n_items)
    with np.errstate(invalid="ignore", divide="ignore"):
        mean_i = sum_i / count_i
    dev = r - mean_i[d.items]
    var_i = np.zeros(d.n_items)
    rated = count_i > 0
    var_i[rated] = np.bincount(d.items, weights=dev * dev, minlength=d.n_items)[rated] / count_i[rated]
    std_i = np.sqrt(var_i)
    std_i[count_i <= 1] = 0.0
    mu = float(r.mean())
    return DatasetStats(
        global_mean=mu,
        global_std=float(np.sqrt(np.mean((r - mu) ** 2))),
        per_item_mean=mean_i,
        per_item_std=std_i,
        per_item_count=count_i,
        per_user_count=count_u,
        avg_actions_per_user=len(d) / d.n_users,
        avg_actions_per_item=len(d) / d.n_items,
    )


# ---------------------------------------------------------------- persistence

def cache_key(**params) -> str:
    """Stable content hash over a parameter mapping."""
    blob = json.dumps(params, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(blob.encode()).hexdigest()[:20]


def default_cache_root() -> Path:
    return Path(os.environ.get("SHILLREC_CACHE", Path.home() / ".cache" / "shillrec"))


def _format_rating(x: float) -> str:
    return repr(float(x))


def serialize(d: InteractionDataset) -> tuple[str, str]:
    """Canonical (interactions tsv, metadata json) text for a dataset."""
    lines = ["user\titem\trating\ttimestamp\torigin"]
    for n in range(len(d)):
        u = int(d.users[n])
        ts = "" if d.timestamps is None else str(int(d.timestamps[n]))
        origin = "" if d.is_fake is None else ("fake" if d.is_fake[u] else "genuine")
        lines.append(f"{d.user_ids[u]}\t{d.item_ids[d.items[n]]}\t"
                     f"{_format_rating(d.ratings[n])}\t{ts}\t{origin}")
    meta = {
        "name": d.name,
        "feedback_kind": d.feedback_kind,
        "rating_bounds": [float(b) for b in d.rating_bounds],
        "n_users": d.n_users,
        "n_items": d.n_items,
        "n_interactions": len(d),
        "has_timestamps": d.timestamps is not None,
        "user_ids": list(d.user_ids),
        "item_ids": list(d.item_ids),
        "is_fake": None if d.is_fake is None else [bool(x) for x in d.is_fake],
    }
    return "\n".join(lines) + "\n", json.dumps(meta, sort_keys=True, indent=1) + "\n"


def deserialize(tsv: str, meta_text: str) -> InteractionDataset:
    meta = json.loads(meta_text)
    umap = {u: n for n, u in enumerate(meta["user_ids"])}
    imap = {i: n for n, i in enumerate(meta["item_ids"])}
    users, items, ratings, ts = [], [], [], []
    for line in tsv.splitlines()[1:]:
        u, i, r, t, _ = line.split("\t")
        users.append(umap[u])
        items.append(imap[i])
        ratings.append(float(r))
        ts.append(int(t) if t else 0)
    if len(users) != meta["n_interactions"]:
        raise DatasetError("interaction count does not match metadata")
    return build_dataset(
        users, items, ratings,
        user_ids=meta["user_ids"], item_ids=meta["item_ids"],
        feedback_kind=meta["feedback_kind"], rating_bounds=meta["rating_bounds"],
        timestamps=ts if meta["has_timestamps"] else None,
        is_fake=meta["is_fake"], name=meta["name"],
    )


def persist_attacked(d: InteractionDataset, key: str, root=None, params: dict | None = None) -> Path:
    """Write ``d`` under ``root/key`` atomically (temp dir, then rename)."""
    root = Path(root) if root is not None else default_cache_root()
    root.mkdir(parents=True, exist_ok=True)
    target = root / key
    if target.exists():
        return target
    tsv, meta = serialize(d)
    tmp = Path(tempfile.mkdtemp(prefix=f".{key}-", dir=root))
    (tmp / "interactions.tsv").write_text(tsv)
    (tmp / "meta.json").write_text(meta)
    (tmp / "params.json").write_text(json.dumps(params or {}, sort_keys=True, indent=1) + "\n")
    try:
        os.rename(tmp, target)
    except OSError:
        # another writer won the race
        shutil.rmtree(tmp, ignore_errors=True)
    return target


def load_cached(key: str, root=None) -> InteractionDataset | None:
    root = Path(root) if root is not None else default_cache_root()
    entry = root / key
    if not entry.is_dir():
        return None
    try:
        return deserialize((entry / "interactions.tsv").read_text(),
                           (entry / "meta.json").read_text())
    except (OSError, ValueError, KeyError, json.JSONDecodeError) as exc:
        log.warning("discarding corrupt cache entry %s (%s)", entry, exc)
        shutil.rmtree(entry, ignore_errors=True)
        return None


def save_dataset(d: InteractionDataset, directory) -> Path:
    """Export a dataset (e.g. an attacked one) as tsv + metadata."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    tsv, meta = serialize(d)
    (directory / "interactions.tsv").write_text(tsv)
    (directory / "meta.json").write_text(meta)
    return directory
