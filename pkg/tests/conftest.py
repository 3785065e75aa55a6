import os
from pathlib import Path

import numpy as np
import pytest

from shillrec.attack import AttackParams, gen_lovehate_attack, inject
from shillrec.dataset import EXPLICIT, IMPLICIT, build_dataset

REPO = Path(__file__).resolve().parents[1]


def ml100k_path():
    """ML-100K interaction file: $SHILLREC_ML100K, else data/ml-100k in the repo."""
    env = os.environ.get("SHILLREC_ML100K")
    candidates = [Path(env)] if env else []
    candidates += [REPO / "data" / "ml-100k" / "ml-100k.inter", Path("/root/data/ml-100k/ml-100k.inter")]
    for c in candidates:
        if c.is_file():
            return c
    return None


@pytest.fixture(scope="session")
def ml100k_file():
    p = ml100k_path()
    if p is None:
        pytest.skip("ML-100K not available (set SHILLREC_ML100K)")
    return p


ML100K_SCHEMA = {"user": "user_id", "item": "item_id", "rating": "rating", "timestamp": "timestamp"}


@pytest.fixture(scope="session")
def ml100k(ml100k_file):
    from shillrec.dataset import load_explicit
    return load_explicit(ml100k_file, ML100K_SCHEMA, name="ml-100k")


def make_dataset(users, items, ratings, n_users=None, n_items=None, kind=EXPLICIT,
                 bounds=(1.0, 5.0), is_fake=None):
    users = np.asarray(users, dtype=np.int64)
    items = np.asarray(items, dtype=np.int64)
    n_users = n_users if n_users is not None else int(users.max()) + 1
    n_items = n_items if n_items is not None else int(items.max()) + 1
    return build_dataset(users, items, np.asarray(ratings, dtype=float),
                         user_ids=[f"u{u}" for u in range(n_users)],
                         item_ids=[f"i{i}" for i in range(n_items)],
                         feedback_kind=kind, rating_bounds=bounds, is_fake=is_fake)


def random_explicit(seed, n_users=30, n_items=40, density=0.3, bounds=(1, 5)):
    rng = np.random.default_rng(seed)
    mask = rng.random((n_users, n_items)) < density
    mask[np.arange(n_users), rng.integers(0, n_items, n_users)] = True
    u, i = np.nonzero(mask)
    r = rng.integers(bounds[0], bounds[1] + 1, len(u)).astype(float)
    return make_dataset(u, i, r, n_users, n_items, bounds=tuple(float(b) for b in bounds))


def random_implicit(seed, n_users=30, n_items=40, density=0.2):
    d = random_explicit(seed, n_users, n_items, density)
    return make_dataset(d.users, d.items, np.ones(len(d)), n_users, n_items, kind=IMPLICIT,
                        bounds=(1.0, 1.0))


@pytest.fixture
def small_explicit():
    return random_explicit(0)


@pytest.fixture
def small_implicit():
    return random_implicit(0)


def rel_err(a, b):
    a, b = np.asarray(a, float), np.asarray(b, float)
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(a)), np.max(np.abs(b)), 1e-12))


def synthetic_lovehate(seed, n_genuine=100, n_items=200, per_user=20, n_fake=20):
    rng = np.random.default_rng(seed)
    u, i, r = [], [], []
    for user in range(n_genuine):
        items = rng.choice(n_items, per_user, replace=False)
        u += [user] * per_user
        i += list(items)
        r += list(rng.integers(1, 6, per_user))
    train = make_dataset(u, i, r, n_genuine, n_items)
    p = AttackParams(attack_size=n_fake, filler_size=per_user - 1, target_items=(0,), seed=seed)
    fakes = gen_lovehate_attack(train, p)
    # identical profiles: every fake copies the first one
    fakes.profiles = [fakes.profiles[0]] * n_fake
    return train, inject(train, fakes)


# one line per acceptance criterion, printed at the end of the session
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
