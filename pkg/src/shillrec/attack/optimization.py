"""Gradient-based profile optimization against a dense surrogate MF model.

The surrogate holds every user (genuine and fake) and every item as dense
factor matrices and is trained by full-batch, count-preconditioned gradient
descent on a dense user x item target matrix X. Fake users' rows of X are the
continuous attack variables W. The adversarial loss is evaluated on genuine
users after a few unrolled training steps, and its gradient w.r.t. W is
obtained by a hand-written reverse pass through those steps.

Single-level: the surrogate is trained once on clean data and frozen; only
the unrolled steps see W. Bi-level: the surrogate keeps training on clean +
current fake data between outer updates of W.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from ..dataset import EXPLICIT, InteractionDataset
from ..recommender.model import TrainConfig
from .heuristic import gen_average_attack, gen_random_attack
from .profiles import (IMPLICIT_PAIRS, PUSH, AttackError, AttackParams, FakeProfileSet,
                       Profile, discretize, target_rating)

log = logging.getLogger(__name__)


class AttackDivergence(RuntimeError):
    pass


@dataclass(frozen=True)
class SurrogateSpec:
    model: str = "mf_pointwise"         # mf_pointwise | bpr_mf
    train_config: TrainConfig = field(
        default_factory=lambda: TrainConfig(task="ranking", d=16, learning_rate=0.3, l2_reg=1e-3))
    # short surrogate training: a lightly fitted surrogate tracks SGD-trained
    # victims (which stay popularity-dominated) better than a converged one
    inner_steps: int = 2
    outer_steps: int = 20
    outer_step_size: float = 0.1
    unroll_steps: int = 3
    pretrain_steps: int = 20
    negative_weight: float = 0.05        # confidence of unobserved implicit entries
    margin_rank: int = 50                # compare targets against the k-th best other item
    adv_users: int | None = None         # sample of genuine users in L_adv; None = all
    init: str = "auto"                   # heuristic | uniform | auto (heuristic if explicit)

    def __post_init__(self):
        if self.model not in ("mf_pointwise", "bpr_mf"):
            raise AttackError(f"unknown surrogate {self.model!r}")
        if self.inner_steps < 1 or self.outer_steps < 1:
            raise AttackError("inner_steps and outer_steps must be >= 1")
        if self.outer_step_size < 0:
            raise AttackError("outer_step_size must be >= 0")
        if self.unroll_steps < 1:
            raise AttackError("unroll_steps must be >= 1")
        if self.init not in ("auto", "heuristic", "uniform"):
            raise AttackError(f"unknown init {self.init!r}")


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _softplus(x):
    return np.logaddexp(0.0, x)


# --------------------------------------------------------------------- losses

class SquaredLoss:
    """sum C * (X - S)^2 with confidence C = base + slope * X."""

    def __init__(self, base: np.ndarray, slope: float):
        self.base = base
        self.slope = slope

    def conf(self, X):
        return self.base + self.slope * X if self.slope else self.base

    def value(self, S, X):
        return float(np.sum(self.conf(X) * (X - S) ** 2))

    def grad_S(self, S, X):
        return -2.0 * self.conf(X) * (X - S)

    def vjp(self, S, X, gD):
        C = self.conf(X)
        gS = 2.0 * C * gD
        gX = -2.0 * (C + self.slope * (X - S)) * gD
        return gS, gX


class MeanNegativeBPR:
    """sum_u sum_i X_ui * softplus(-(S_ui - mean_j S_uj)).

    Deterministic stand-in for BPR with uniformly sampled negatives: each
    positive is compared with the user's average item score.
    """

    @staticmethod
    def _center(A):
        return A - A.mean(axis=1, keepdims=True)

    def value(self, S, X):
        z = self._center(S)
        return float(np.sum(X * _softplus(-z)))

    def grad_S(self, S, X):
        z = self._center(S)
        return -self._center(X * _sigmoid(-z))

    def vjp(self, S, X, gD):
        z = self._center(S)
        sn = _sigmoid(-z)
        gH = -self._center(gD)
        gX = gH * sn
        gz = -gH * X * sn * (1.0 - sn)
        return self._center(gz), gX


# ------------------------------------------------------------------ surrogate

@dataclass
class SurrogateState:
    P: np.ndarray
    Q: np.ndarray


class DenseSurrogate:
    """Full-batch GD on X = [genuine rows; fake rows W] with per-row and
    per-column step scaling fixed at construction."""

    def __init__(self, X_genuine: np.ndarray, n_fake: int, loss, lr: float, reg: float,
                 row_weight: np.ndarray, col_weight: np.ndarray):
        self.Xg = X_genuine
        self.n_genuine = X_genuine.shape[0]
        self.n_fake = n_fake
        self.loss = loss
        self.lr = lr
        self.reg = reg
        self.rs = (1.0 / np.maximum(row_weight, 1.0))[:, None]
        self.cs = (1.0 / np.maximum(col_weight, 1.0))[:, None]

    def full_X(self, W):
        return np.vstack([self.Xg, W]) if self.n_fake else self.Xg

    def step(self, state: SurrogateState, X) -> SurrogateState:
        P, Q = state.P, state.Q
        D = self.loss.grad_S(P @ Q.T, X)
        P_new = P - self.lr * (self.rs * (D @ Q) + 2 * self.reg * P)
        Q_new = Q - self.lr * (self.cs * (D.T @ P) + 2 * self.reg * Q)
        return SurrogateState(P_new, Q_new)

    def step_vjp(self, state: SurrogateState, X, gP_new, gQ_new):
        """Pull (dL/dP', dL/dQ') back through one step; returns (gP, gQ, gX)."""
        P, Q = state.P, state.Q
        S = P @ Q.T
        D = self.loss.grad_S(S, X)
        a = 1.0 - 2 * self.lr * self.reg
        sgP = self.rs * gP_new
        sgQ = self.cs * gQ_new
        gP = a * gP_new - self.lr * (D @ sgQ)
        gQ = a * gQ_new - self.lr * (D.T @ sgP)
        gD = -self.lr * (sgP @ Q.T + P @ sgQ.T)
        gS, gX = self.loss.vjp(S, X, gD)
        gP += gS @ Q
        gQ += gS.T @ P
        return gP, gQ, gX

    def train(self, state, W, steps, *, check=True):
        X = self.full_X(W)
        for n in range(steps):
            state = self.step(state, X)
            if check and not (np.all(np.isfinite(state.P)) and np.all(np.isfinite(state.Q))):
                raise AttackDivergence(f"surrogate training diverged after {n + 1} steps")
        return state


class AdversarialLoss:
    """Softplus margin between each genuine user's k-th best non-target score
    and each target score (push); the sign flips for nuke."""

    def __init__(self, users, targets, exclude: np.ndarray, intent: str = PUSH,
                 margin_rank: int = 1):
        self.users = np.asarray(users)
        self.targets = np.asarray(targets)
        self.exclude = exclude                      # bool, len(users) x n_items
        self.sign = 1.0 if intent == PUSH else -1.0
        self.margin_rank = margin_rank
        # (user, target) pairs where the target is still a candidate
        self.active = ~exclude[:, self.targets]

    def _competitor(self, S):
        masked = np.where(self.exclude, -np.inf, S)
        masked[:, self.targets] = -np.inf
        n_cand = np.isfinite(masked).sum(axis=1)
        if np.any(n_cand == 0):
            raise AttackError("a genuine user has no candidate item besides the targets")
        if self.margin_rank == 1:
            return np.argmax(masked, axis=1)
        # k-th best per user, clamped to the user's candidate count; ties -> lower id
        k = np.minimum(self.margin_rank, n_cand)
        order = np.argsort(-masked, axis=1, kind="stable")
        return order[np.arange(len(order)), k - 1]

    def value_grad(self, P, Q):
        """Loss and gradients w.r.t. the full (P, Q); only genuine rows of P move."""
        Pu = P[self.users]
        S = Pu @ Q.T
        j = self._competitor(S)
        rows = np.arange(len(self.users))
        best = S[rows, j]
        margin = self.sign * (best[:, None] - S[:, self.targets])
        margin = np.where(self.active, margin, 0.0)
        loss = float(np.sum(np.where(self.active, _softplus(margin), 0.0)))
        w = np.where(self.active, _sigmoid(margin), 0.0) * self.sign
        gS = np.zeros_like(S)
        gS[rows, j] += w.sum(axis=1)
        gS[:, self.targets] -= w
        gP = np.zeros_like(P)
        gP[self.users] = gS @ Q
        gQ = gS.T @ Pu
        return loss, gP, gQ

    def value(self, P, Q):
        return self.value_grad(P, Q)[0]


def unrolled_loss_grad(sur: DenseSurrogate, state0: SurrogateState, W, adv: AdversarialLoss,
                       steps: int, with_grad: bool = True):
    """L_adv after ``steps`` GD steps from ``state0`` on data W, and dL_adv/dW."""
    X = sur.full_X(W)
    states = [state0]
    for _ in range(steps):
        states.append(sur.step(states[-1], X))
    loss, gP, gQ = adv.value_grad(states[-1].P, states[-1].Q)
    if not with_grad:
        return loss, None, states[-1]
    gX = np.zeros_like(X)
    for n in range(steps - 1, -1, -1):
        gP, gQ, gXn = sur.step_vjp(states[n], X, gP, gQ)
        gX += gXn
    return loss, gX[sur.n_genuine:], states[-1]


# --------------------------------------------------------------------- setup

@dataclass
class _Problem:
    sur: DenseSurrogate
    adv: AdversarialLoss
    W0: np.ndarray
    lo: float
    hi: float
    offset: float        # added back to W when reading ratings
    fixed_cols: np.ndarray
    fixed_val: float
    support0: np.ndarray  # init profile support per fake row
    rng: np.random.Generator


def _init_profiles(train, params):
    if params.output_kind == IMPLICIT_PAIRS:
        return gen_random_attack(train, params)
    return gen_average_attack(train, params)


def build_problem(train: InteractionDataset, surrogate: SurrogateSpec,
                  params: AttackParams) -> _Problem:
    params.check_against(train)
    if not params.target_items:
        raise AttackError("zero targets")
    nu, m = train.n_users, train.n_items
    n_fake = params.attack_size
    cfg = surrogate.train_config
    genuine = train.genuine_users
    dense = np.zeros((nu, m))
    observed = np.zeros((nu, m), dtype=bool)
    dense[train.users, train.items] = train.ratings
    observed[train.users, train.items] = True
    init = _init_profiles(train, params)
    targets = np.array(params.target_items)

    if train.feedback_kind == EXPLICIT:
        if surrogate.model != "mf_pointwise":
            raise AttackError("explicit attacks need the mf_pointwise surrogate")
        mu = float(train.ratings.mean())
        Xg = np.where(observed, dense - mu, 0.0)
        lo, hi = train.rating_bounds[0] - mu, train.rating_bounds[1] - mu
        fake_conf = np.full((n_fake, m), max(params.filler_size, 1) / m)
        fake_conf[:, targets] = 1.0
        base = np.vstack([observed.astype(float), fake_conf])
        loss = SquaredLoss(base, 0.0)
        W0 = np.zeros((n_fake, m))
        offset = mu
        fixed_val = target_rating(train.rating_bounds, params.intent) - mu
    else:
        Xg = observed.astype(float)
        lo, hi, offset, fixed_val = 0.0, 1.0, 0.0, 1.0
        W0 = np.zeros((n_fake, m))
        if surrogate.model == "mf_pointwise":
            c0 = surrogate.negative_weight
            loss = SquaredLoss(np.full((nu + n_fake, m), c0), 1.0 - c0)
        else:
            loss = MeanNegativeBPR()
    support0 = np.zeros((n_fake, m), dtype=bool)
    for f, prof in enumerate(init.profiles):
        for i, r in prof.entries():
            W0[f, i] = r - offset
            support0[f, i] = True
    init = surrogate.init
    if init == "auto":
        init = "heuristic" if train.feedback_kind == EXPLICIT else "uniform"
    if init == "uniform":
        # every non-target entry starts at the profile density; no support preference
        if train.feedback_kind == EXPLICIT:
            W0[:] = 0.0     # global mean
        else:
            W0[:] = min(1.0, params.filler_size / max(m - len(targets), 1))
        support0[:] = False
    W0[:, targets] = fixed_val

    X0 = np.vstack([Xg, W0])
    if isinstance(loss, SquaredLoss):
        C0 = loss.conf(X0)
    else:
        C0 = X0
    sur = DenseSurrogate(Xg, n_fake, loss, cfg.learning_rate, cfg.l2_reg,
                         row_weight=C0.sum(axis=1), col_weight=C0.sum(axis=0))

    rng = np.random.default_rng([params.seed, 7])
    users = genuine
    if surrogate.adv_users is not None and surrogate.adv_users < len(users):
        users = np.sort(rng.choice(users, size=surrogate.adv_users, replace=False))
    adv = AdversarialLoss(users, targets, observed[users], params.intent, surrogate.margin_rank)
    return _Problem(sur, adv, W0, lo, hi, offset, targets, fixed_val, support0, rng)


def _init_state(prob: _Problem, cfg: TrainConfig, n_rows: int, m: int) -> SurrogateState:
    rng = np.random.default_rng([cfg.seed, 11])
    return SurrogateState(rng.normal(0.0, cfg.init_std * 10, (n_rows, cfg.d)),
                          rng.normal(0.0, cfg.init_std * 10, (m, cfg.d)))


def _outer_update(prob: _Problem, W, gW, step_size):
    if not np.all(np.isfinite(gW)):
        bad = np.argwhere(~np.isfinite(gW))[:5].tolist()
        raise AttackDivergence(f"non-finite attack gradient at fake/item entries {bad}")
    # per-row scaling so every fake profile moves, not just the steepest one
    scale = np.max(np.abs(gW), axis=1, keepdims=True)
    if step_size > 0:
        W = W - step_size * np.divide(gW, scale, out=np.zeros_like(gW), where=scale > 0)
    W = np.clip(W, prob.lo, prob.hi)
    W[:, prob.fixed_cols] = prob.fixed_val
    return W


def _finalize(train, params, prob: _Problem, W, name, notes) -> FakeProfileSet:
    bounds = tuple(train.rating_bounds)
    step = train.rating_step()
    targets = set(params.target_items)
    selected = {i for i, _ in params.selected_items}
    candidates = np.array([i for i in range(train.n_items) if i not in targets | selected])
    implicit = params.output_kind == IMPLICIT_PAIRS
    profiles = []
    for f in range(W.shape[0]):
        w = W[f, candidates]
        key = w if implicit else np.abs(w)
        sup = prob.support0[f, candidates]
        order = np.lexsort((candidates, ~sup, -key))
        chosen = np.sort(candidates[order[:min(params.filler_size, len(candidates))]])
        if implicit:
            ratings = np.ones(len(chosen))
        else:
            ratings = discretize(W[f, chosen] + prob.offset, bounds, step, params.intent)
        t_rating = 1.0 if implicit else target_rating(bounds, params.intent)
        profiles.append(Profile(
            filler=tuple((int(i), float(r)) for i, r in zip(chosen, ratings)),
            selected=tuple((i, 1.0 if implicit else float(r)) for i, r in params.selected_items),
            targets=tuple((t, t_rating) for t in params.target_items),
        ))
    return FakeProfileSet(profiles, name, params, notes=notes)


def _empty(params, name):
    return FakeProfileSet([], name, params, notes={"loss_trace": []})


# -------------------------------------------------------------------- attacks

def gen_single_level_gradient_attack(train: InteractionDataset, surrogate: SurrogateSpec,
                                     params: AttackParams) -> FakeProfileSet:
    """Projected gradient descent on L_adv with the surrogate frozen at its
    clean-data optimum."""
    if params.attack_size == 0:
        return _empty(params, "single_level")
    prob = build_problem(train, surrogate, params)
    cfg = surrogate.train_config
    nu, m = train.n_users, train.n_items
    clean = DenseSurrogate(prob.sur.Xg, 0, _clean_loss(prob.sur.loss, nu), cfg.learning_rate,
                           cfg.l2_reg, prob.sur.rs[:nu, 0] ** -1, _clean_cols(prob.sur, nu))
    state = _init_state(prob, cfg, nu, m)
    state = clean.train(state, None, surrogate.pretrain_steps)
    P_fake = _ridge_rows(state.Q, prob.W0, cfg.l2_reg)
    frozen = SurrogateState(np.vstack([state.P, P_fake]), state.Q)
    W = prob.W0.copy()
    trace = []
    for _ in range(surrogate.outer_steps):
        loss, gW, _ = unrolled_loss_grad(prob.sur, frozen, W, prob.adv, surrogate.unroll_steps)
        trace.append(loss)
        W = _outer_update(prob, W, gW, surrogate.outer_step_size)
    final, _, _ = unrolled_loss_grad(prob.sur, frozen, W, prob.adv, surrogate.unroll_steps,
                                     with_grad=False)
    trace.append(final)
    return _finalize(train, params, prob, W, "single_level", {"loss_trace": trace})


def gen_bilevel_attack(train: InteractionDataset, surrogate: SurrogateSpec,
                       params: AttackParams) -> FakeProfileSet:
    """Alternate inner surrogate training on clean + fake data with outer
    projected gradient steps on the fake rows."""
    if params.attack_size == 0:
        return _empty(params, "bilevel")
    prob = build_problem(train, surrogate, params)
    cfg = surrogate.train_config
    n_rows, m = train.n_users + params.attack_size, train.n_items
    W = prob.W0.copy()
    state = _init_state(prob, cfg, n_rows, m)
    state = prob.sur.train(state, W, surrogate.pretrain_steps)
    trace = []
    for _ in range(surrogate.outer_steps):
        state = prob.sur.train(state, W, surrogate.inner_steps)
        loss, gW, state = unrolled_loss_grad(prob.sur, state, W, prob.adv, surrogate.unroll_steps)
        trace.append(loss)
        W = _outer_update(prob, W, gW, surrogate.outer_step_size)
    return _finalize(train, params, prob, W, "bilevel", {"loss_trace": trace})


def _clean_loss(loss, nu):
    if isinstance(loss, SquaredLoss):
        return SquaredLoss(loss.base[:nu] if np.ndim(loss.base) else loss.base, loss.slope)
    return loss


def _clean_cols(sur: DenseSurrogate, nu):
    X = sur.Xg
    if isinstance(sur.loss, SquaredLoss):
        return _clean_loss(sur.loss, nu).conf(X).sum(axis=0)
    return X.sum(axis=0)


def _ridge_rows(Q, W, reg):
    """Least-squares user factors reproducing the rows of W from fixed Q."""
    d = Q.shape[1]
    A = Q.T @ Q + max(reg, 1e-6) * np.eye(d)
    return np.linalg.solve(A, Q.T @ W.T).T


def attack_loss_function(train, surrogate: SurrogateSpec, params: AttackParams,
                         bilevel: bool = False):
    """(f, grad, W0) for the composite W -> L_adv used by the optimizers.

    Exposed for gradient checking and diagnostics.
    """
    prob = build_problem(train, surrogate, params)
    cfg = surrogate.train_config
    nu, m = train.n_users, train.n_items
    if bilevel:
        state = _init_state(prob, cfg, nu + params.attack_size, m)
        state = prob.sur.train(state, prob.W0, surrogate.pretrain_steps)
    else:
        clean = DenseSurrogate(prob.sur.Xg, 0, _clean_loss(prob.sur.loss, nu), cfg.learning_rate,
                               cfg.l2_reg, prob.sur.rs[:nu, 0] ** -1, _clean_cols(prob.sur, nu))
        state = clean.train(_init_state(prob, cfg, nu, m), None, surrogate.pretrain_steps)
        state = SurrogateState(np.vstack([state.P, _ridge_rows(state.Q, prob.W0, cfg.l2_reg)]),
                               state.Q)

    def f(W):
        return unrolled_loss_grad(prob.sur, state, W, prob.adv, surrogate.unroll_steps,
                                  with_grad=False)[0]

    def grad(W):
        return unrolled_loss_grad(prob.sur, state, W, prob.adv, surrogate.unroll_steps)[1]

    return f, grad, prob.W0.copy()

