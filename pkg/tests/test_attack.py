import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from shillrec.attack import (NUKE, PUSH, AttackError, AttackParams, FakeProfileSet, SurrogateSpec,
                             attack_loss_function, default_attack_params, discretize,
                             fakes_to_tsv, gen_average_attack, gen_bandwagon_attack,
                             gen_bilevel_attack, gen_lovehate_attack, gen_random_attack,
                             gen_segment_attack, gen_single_level_gradient_attack, inject,
                             segment_by_similarity, select_targets)
from shillrec.attack.profiles import IMPLICIT_PAIRS
from shillrec.dataset import compute_stats

import gradcheck
from conftest import make_dataset, random_explicit, random_implicit


def params(**kw):
    base = dict(attack_size=6, filler_size=5, target_items=(2,), seed=1)
    base.update(kw)
    return AttackParams(**base)


def all_generators(train, p):
    yield gen_random_attack(train, p)
    yield gen_average_attack(train, p)
    yield gen_bandwagon_attack(train, p)
    yield gen_lovehate_attack(train, p)
    yield gen_segment_attack(train, p, [0, 1])


# ------------------------------------------------------------- discretizing

def test_discretize_ties_follow_intent():
    assert discretize([3.5], (1, 5), 1.0, PUSH)[0] == 4
    assert discretize([3.5], (1, 5), 1.0, NUKE)[0] == 3
    assert list(discretize([0.2, 7.0, 2.26], (1, 5), 0.5)) == [1.0, 5.0, 2.5]
    assert discretize([2.26], (1, 5), None)[0] == 2.26


# ------------------------------------------------------------ profile rules

@settings(max_examples=25, deadline=None)
@given(st.integers(0, 1000), st.sampled_from([PUSH, NUKE]))
def test_profiles_on_grid_and_disjoint(seed, intent):
    train = random_explicit(seed)
    p = params(seed=seed, intent=intent, target_items=(2, 5))
    for fakes in all_generators(train, p):
        for prof in fakes.profiles:
            ratings = np.array([r for _, r in prof.entries()])
            assert np.all((ratings >= 1) & (ratings <= 5))
            assert np.all(ratings == np.round(ratings))
            want = 5.0 if intent == PUSH else 1.0
            assert all(r == want for _, r in prof.targets)
            sets = [{i for i, _ in part} for part in (prof.filler, prof.selected, prof.targets)]
            assert sum(map(len, sets)) == len(set().union(*sets))


def test_generation_is_deterministic():
    train = random_explicit(3)
    p = params()
    for a, b in zip(all_generators(train, p), all_generators(train, p)):
        assert a == b
        assert fakes_to_tsv(a) == fakes_to_tsv(b)
    assert gen_random_attack(train, p) != gen_random_attack(train, params(seed=2))


def test_lovehate_values():
    train = random_explicit(0)
    push = gen_lovehate_attack(train, params())
    assert {r for p in push.profiles for _, r in p.filler} == {1.0}
    nuke = gen_lovehate_attack(train, params(intent=NUKE))
    assert {r for p in nuke.profiles for _, r in p.filler} == {5.0}
    assert {r for p in nuke.profiles for _, r in p.targets} == {1.0}


def test_segment_rule_example():
    train = random_explicit(0, n_items=6)
    p = params(filler_size=1, attack_size=1)
    prof = gen_segment_attack(train, p, [0, 1]).profiles[0]
    assert dict(prof.selected) == {0: 5.0, 1: 5.0}
    assert [r for _, r in prof.filler] == [1.0]
    assert dict(prof.targets) == {2: 5.0}
    with pytest.raises(AttackError):
        gen_segment_attack(train, p, [])
    with pytest.raises(AttackError):
        gen_segment_attack(train, p, [2])


def test_segment_neighbors_match_scan():
    train = random_explicit(9, n_items=20)
    B = np.zeros((train.n_users, train.n_items))
    B[train.users, train.items] = 1
    t = 4

    def cos(j):
        n = np.linalg.norm(B[:, j]) * np.linalg.norm(B[:, t])
        return B[:, j] @ B[:, t] / n if n else 0.0

    want = sorted((j for j in range(train.n_items) if j != t), key=lambda j: (-cos(j), j))[:10]
    assert segment_by_similarity(train, t, 10) == want


def test_bandwagon_budget_split():
    train = random_explicit(2)
    stats = compute_stats(train)
    p = params(filler_size=7)
    fakes = gen_bandwagon_attack(train, p, popular_fraction=0.5, stats=stats)
    counts = stats.per_item_count.copy()
    counts[2] = -1
    top = list(np.lexsort((np.arange(train.n_items), -counts))[:3])
    for prof in fakes.profiles:
        assert len(prof.selected) == math.floor(0.5 * 7)
        assert [i for i, _ in prof.selected] == top
        assert all(r == 5.0 for _, r in prof.selected)
        assert len(prof.selected) + len(prof.filler) == 7
    with pytest.raises(AttackError):
        gen_bandwagon_attack(train, p, popular_fraction=1.5)


def test_filler_size_capped_by_catalog(caplog):
    train = random_explicit(0, n_items=6)
    fakes = gen_random_attack(train, params(filler_size=50, attack_size=1))
    assert len(fakes.profiles[0].filler) == 5
    assert "exceeds" in caplog.text


def test_implicit_profiles_are_binary():
    train = random_implicit(0)
    p = params(output_kind=IMPLICIT_PAIRS)
    fakes = gen_random_attack(train, p)
    assert {r for prof in fakes.profiles for _, r in prof.entries()} == {1.0}
    with pytest.raises(AttackError):
        params(output_kind=IMPLICIT_PAIRS, intent=NUKE)
    with pytest.raises(AttackError):
        gen_random_attack(random_explicit(0), p)


def test_params_validation():
    for bad in (dict(attack_size=-1), dict(target_items=()), dict(target_items=(1, 1)),
                dict(selected_items=((2, 5.0),)), dict(intent="boost")):
        with pytest.raises(AttackError):
            params(**bad)
    with pytest.raises(AttackError, match="out of range"):
        gen_random_attack(random_explicit(0), params(target_items=(999,)))


def test_select_targets():
    train = make_dataset([0, 1, 2, 0, 1, 0], [3, 3, 3, 1, 1, 0], [4] * 6, n_items=5)
    assert select_targets(train, None, 2, "popular") == [3, 1]
    r = select_targets(train, None, 3, "random", seed=5)
    assert r == select_targets(train, None, 3, "random", seed=5) and len(set(r)) == 3
    with pytest.raises(AttackError):
        select_targets(train, None, 0)


def test_default_params_ml100k(ml100k):
    p = default_attack_params(ml100k, compute_stats(ml100k))
    assert (p.attack_size, p.filler_size, len(p.target_items)) == (188, 106, 62)


# --------------------------------------------------------------- injection

def test_inject_zero_profiles_is_identity():
    train = random_explicit(0)
    out = inject(train, FakeProfileSet([], "none", params(attack_size=0)))
    assert out.replace(is_fake=None) == train
    assert not out.is_fake.any()


def test_inject_counts():
    train = random_explicit(1, n_items=40)
    fakes = gen_random_attack(train, params(attack_size=20, filler_size=4))
    out = inject(train, fakes)
    assert len(out) == len(train) + 100
    assert out.n_users == train.n_users + 20
    assert list(out.fake_users) == list(range(train.n_users, train.n_users + 20))


def test_inject_ml100k_fraction(ml100k):
    p = default_attack_params(ml100k, compute_stats(ml100k))
    out = inject(ml100k, gen_lovehate_attack(ml100k, p))
    assert out.n_users == 943 + 188


# ------------------------------------------------------------ distributions

def discretized_normal_mean(mu, sigma, bounds=(1.0, 5.0), step=1.0):
    """Exact mean of round-to-grid(clip(N(mu, sigma))) with ties rounding up."""
    if sigma == 0:
        return float(discretize([mu], bounds, step)[0])
    lo, hi = bounds
    grid = np.arange(lo, hi + step / 2, step)
    cdf = lambda x: 0.5 * (1 + math.erf((x - mu) / (sigma * math.sqrt(2))))
    total = 0.0
    for n, g in enumerate(grid):
        a = -math.inf if n == 0 else g - step / 2
        b = math.inf if n == len(grid) - 1 else g + step / 2
        total += g * ((cdf(b) if b != math.inf else 1.0) - (cdf(a) if a != -math.inf else 0.0))
    return total


def test_discretized_mean_oracle_sanity():
    assert discretized_normal_mean(3.0, 0.8) == pytest.approx(3.0, abs=1e-12)
    rng = np.random.default_rng(0)
    x = discretize(rng.normal(4.2, 1.1, 400_000), (1, 5), 1.0)
    assert x.mean() == pytest.approx(discretized_normal_mean(4.2, 1.1), abs=0.01)


def test_random_attack_matches_discretized_law():
    train = random_explicit(4, n_users=60, n_items=120, density=0.2)
    stats = compute_stats(train)
    p = AttackParams(attack_size=100, filler_size=100, target_items=(0,), seed=3)
    r = np.array([r for prof in gen_random_attack(train, p, stats).profiles for _, r in prof.filler])
    assert len(r) == 10_000
    want = discretized_normal_mean(stats.global_mean, stats.global_std)
    assert abs(r.mean() - want) <= 3 * stats.global_std / math.sqrt(len(r))


def test_average_attack_per_item_means():
    train = random_explicit(5, n_users=80, n_items=30, density=0.3)
    stats = compute_stats(train)
    p = AttackParams(attack_size=400, filler_size=20, target_items=(0,), seed=2)
    fakes = gen_average_attack(train, p, stats)
    items = np.array([i for prof in fakes.profiles for i, _ in prof.filler])
    r = np.array([v for prof in fakes.profiles for _, v in prof.filler])
    n = np.bincount(items, minlength=train.n_items)
    mean = np.bincount(items, r, minlength=train.n_items) / np.maximum(n, 1)
    outside = 0
    checked = 0
    for i in range(train.n_items):
        if stats.per_item_count[i] < 5 or n[i] == 0:
            continue
        checked += 1
        want = discretized_normal_mean(stats.per_item_mean[i], stats.per_item_std[i])
        outside += abs(mean[i] - want) > 3 * stats.per_item_std[i] / math.sqrt(n[i]) + 1e-12
    assert checked >= 20 and outside <= 1


def test_average_attack_unrated_item_uses_global_law():
    train = make_dataset([0, 1, 2], [0, 0, 1], [2, 4, 5], n_items=4)
    fakes = gen_average_attack(train, params(attack_size=300, filler_size=2, target_items=(3,)))
    r2 = [v for prof in fakes.profiles for i, v in prof.filler if i == 2]
    assert len(set(r2)) > 1


# ------------------------------------------------------- gradient attacks

def test_attack_loss_gradient_matches_finite_differences():
    assert max(gradcheck.attack_loss_errors(n_points=100)) <= 1e-4


def test_zero_step_keeps_average_init():
    train = random_explicit(2)
    p = params()
    spec = SurrogateSpec(outer_step_size=0.0, outer_steps=3)
    got = gen_single_level_gradient_attack(train, spec, p)
    assert got.profiles == gen_average_attack(train, p).profiles


def test_one_step_reduces_adversarial_loss():
    for kind, train, out in (("explicit", random_explicit(3), "explicit_triplets"),
                             ("implicit", random_implicit(3), IMPLICIT_PAIRS)):
        p = params(output_kind=out)
        f, grad, W0 = attack_loss_function(train, SurrogateSpec(margin_rank=1), p)
        g = grad(W0)
        assert f(W0 - 1e-3 * g / np.abs(g).max()) < f(W0), kind


@pytest.mark.parametrize("kind", ["explicit", "implicit"])
def test_bilevel_trace_mostly_non_increasing(kind):
    # single best competitor, surrogate trained close to its optimum first
    spec = SurrogateSpec(margin_rank=1, pretrain_steps=200)
    down = total = 0
    for seed in range(5):
        if kind == "explicit":
            train = random_explicit(seed, n_users=50, n_items=60, density=0.15)
            p = params(attack_size=10, filler_size=9, target_items=(3,), seed=seed)
        else:
            train = random_implicit(seed, n_users=50, n_items=60, density=0.15)
            p = params(attack_size=10, filler_size=9, target_items=(3,), seed=seed,
                       output_kind=IMPLICIT_PAIRS)
        trace = np.array(gen_bilevel_attack(train, spec, p).notes["loss_trace"])
        down += int(np.sum(np.diff(trace) <= 0))
        total += len(trace) - 1
    assert down / total >= 0.8, (down, total)


def test_bilevel_output_shape_and_determinism():
    train = random_implicit(1, n_users=40, n_items=50)
    p = params(attack_size=4, filler_size=6, output_kind=IMPLICIT_PAIRS)
    spec = SurrogateSpec(outer_steps=4)
    a, b = gen_bilevel_attack(train, spec, p), gen_bilevel_attack(train, spec, p)
    assert a == b
    for prof in a.profiles:
        assert len(prof.filler) == 6 and dict(prof.targets) == {2: 1.0}


def test_empty_budget_yields_identity():
    train = random_implicit(0)
    p = params(attack_size=0, output_kind=IMPLICIT_PAIRS)
    fakes = gen_bilevel_attack(train, SurrogateSpec(), p)
    assert len(fakes) == 0
    assert inject(train, fakes).replace(is_fake=None) == train


def test_surrogate_spec_validation():
    for bad in (dict(model="ncf"), dict(inner_steps=0), dict(outer_step_size=-1),
                dict(unroll_steps=0), dict(init="zeros")):
        with pytest.raises(AttackError):
            SurrogateSpec(**bad)
    with pytest.raises(AttackError):
        gen_bilevel_attack(random_explicit(0), SurrogateSpec(model="bpr_mf"), params())
