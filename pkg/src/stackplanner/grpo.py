"""Group-relative policy optimization on token-level rollouts.

The objective for a rollout group of K trajectories is::

    J = (1/K) sum_k (1/|y_k|) sum_i min(z A, clip(z, 1-eps, 1+eps) A)
        - beta * (1/K) sum_k (1/|y_k|) sum_i kl_i

with z the per-token importance ratio against the sampling policy, A the
group-normalized advantage, and kl_i the k3 estimate against a frozen
reference policy. A tabular softmax policy over a small coordination
environment gives an exact analytic gradient for checking and for the demo
trainer.
"""

from __future__ import annotations

import enum
import logging
import math
from collections import Counter
from dataclasses import dataclass, field, replace
from fractions import Fraction
from typing import Callable, Sequence

import numpy as np

logger = logging.getLogger(__name__)

RATIO_CAP = 1e6
_LOG_RATIO_CAP = math.log(RATIO_CAP)


class DegenerateGroup(ValueError):
    """Reward spread below the floor while configured to raise."""


class KinkProximity(ValueError):
    """A ratio sits too close to a clip boundary for finite differences."""


class RewardScope(str, enum.Enum):
    TOKEN_MULTISET = "token"
    PER_TRAJECTORY = "trajectory"


class DegeneratePolicy(str, enum.Enum):
    ZERO_ADVANTAGES = "zero"
    ERROR = "error"


@dataclass(frozen=True)
class GrpoConfig:
    epsilon: float = 0.2
    beta: float = 0.0
    group_size: int = 8
    std_floor: float = 1e-8
    reward_stat_scope: RewardScope = RewardScope.TOKEN_MULTISET
    degenerate_policy: DegeneratePolicy = DegeneratePolicy.ZERO_ADVANTAGES

    def __post_init__(self):
        if not 0 < self.epsilon < 1:
            raise ValueError("epsilon must lie in (0, 1)")
        if self.beta < 0:
            raise ValueError("beta must be >= 0")
        if self.group_size < 1:
            raise ValueError("group_size must be >= 1")
        if self.std_floor <= 0:
            raise ValueError("std_floor must be positive")
        object.__setattr__(self, "reward_stat_scope", RewardScope(self.reward_stat_scope))
        object.__setattr__(self, "degenerate_policy", DegeneratePolicy(self.degenerate_policy))


def _floats(values, name: str) -> np.ndarray:
    arr = np.asarray(values, dtype=float)
    if arr.ndim != 1:
        raise ValueError(f"{name} must be one-dimensional")
    return arr


@dataclass
class Trajectory:
    tokens: np.ndarray
    logp_current: np.ndarray
    logp_old: np.ndarray
    logp_ref: np.ndarray
    outcome_reward: float
    token_rewards: np.ndarray | None = None
    # environment states the tokens were emitted in (tabular policies only)
    states: np.ndarray | None = None

    def __post_init__(self):
        self.tokens = np.asarray(self.tokens, dtype=int)
        n = len(self.tokens)
        for name in ("logp_current", "logp_old", "logp_ref"):
            arr = _floats(getattr(self, name), name)
            if len(arr) != n:
                raise ValueError(f"{name} has length {len(arr)}, expected {n}")
            if n and arr.max() > 0:
                raise ValueError(f"{name} contains positive log-probabilities")
            setattr(self, name, arr)
        if self.token_rewards is not None:
            self.token_rewards = _floats(self.token_rewards, "token_rewards")
            if len(self.token_rewards) != n:
                raise ValueError("token_rewards length differs from tokens")
        if self.states is not None:
            self.states = np.asarray(self.states, dtype=int)
            if len(self.states) != n:
                raise ValueError("states length differs from tokens")

    def __len__(self) -> int:
        return len(self.tokens)


@dataclass
class RolloutGroup:
    trajectories: list[Trajectory]
    query_id: str = "q"

    def __post_init__(self):
        if not self.trajectories:
            raise ValueError("a rollout group needs at least one trajectory")
        if any(len(t) == 0 for t in self.trajectories):
            raise ValueError("trajectories must contain at least one token")

    def __len__(self) -> int:
        return len(self.trajectories)

    def __iter__(self):
        return iter(self.trajectories)


def assign_token_rewards(group: RolloutGroup) -> RolloutGroup:
    """Broadcast each trajectory's outcome reward to all of its tokens."""
    trajs = [replace(t, token_rewards=np.full(len(t), float(t.outcome_reward))) for t in group]
    return RolloutGroup(trajs, group.query_id)


def _exact_moments(counts: Counter) -> tuple[Fraction, Fraction]:
    """Population mean and variance, computed exactly from float samples."""
    n = sum(counts.values())
    values = {v: Fraction(v) for v in counts}
    mean = sum(values[v] * c for v, c in counts.items()) / n
    var = sum(c * (values[v] - mean) ** 2 for v, c in counts.items()) / n
    return mean, var


def _normalized(value: float, mean: Fraction, var: Fraction) -> float:
    # (v - mean) / sqrt(var) evaluated from an exact ratio, so shifting or
    # scaling all rewards leaves the result bit-identical
    d = Fraction(value) - mean
    if d == 0:
        return 0.0
    mag = math.sqrt(d * d / var)
    return mag if d > 0 else -mag


def compute_advantages(group: RolloutGroup, cfg: GrpoConfig) -> list[np.ndarray]:
    """Group-normalized advantage for every token of every trajectory."""
    if any(t.token_rewards is None for t in group):
        raise ValueError("token_rewards must be assigned first")
    if cfg.reward_stat_scope == RewardScope.TOKEN_MULTISET:
        counts: Counter = Counter()
        for t in group:
            counts.update(t.token_rewards.tolist())
    else:
        counts = Counter(float(t.outcome_reward) for t in group)
    mean, var = _exact_moments(counts)

    if var < Fraction(cfg.std_floor) ** 2:
        if cfg.degenerate_policy == DegeneratePolicy.ERROR:
            raise DegenerateGroup(f"reward std {math.sqrt(var)} below floor {cfg.std_floor}")
        return [np.zeros(len(t)) for t in group]

    cache: dict[float, float] = {}
    out = []
    for t in group:
        adv = np.empty(len(t))
        for i, r in enumerate(t.token_rewards.tolist()):
            if r not in cache:
                cache[r] = _normalized(r, mean, var)
            adv[i] = cache[r]
        out.append(adv)
    return out


def importance_ratio(logp_current, logp_old):
    """exp(logp_current - logp_old), capped at 1e6."""
    delta = np.asarray(logp_current, dtype=float) - np.asarray(logp_old, dtype=float)
    if np.any(delta > _LOG_RATIO_CAP):
        logger.warning("importance ratio overflow; clamping to %g", RATIO_CAP)
        delta = np.minimum(delta, _LOG_RATIO_CAP)
    ratio = np.exp(delta)
    return float(ratio) if ratio.ndim == 0 else ratio


def clipped_term(ratio, advantage, epsilon: float):
    ratio = np.asarray(ratio, dtype=float)
    advantage = np.asarray(advantage, dtype=float)
    out = np.minimum(ratio * advantage, np.clip(ratio, 1 - epsilon, 1 + epsilon) * advantage)
    return float(out) if out.ndim == 0 else out


def kl_estimate(logp_current, logp_ref):
    """k3 estimator exp(d) - d - 1 with d = logp_ref - logp_current."""
    delta = np.asarray(logp_ref, dtype=float) - np.asarray(logp_current, dtype=float)
    out = np.expm1(delta) - delta
    out = np.maximum(out, 0.0)
    return float(out) if out.ndim == 0 else out


def _double_mean(per_token: Sequence[np.ndarray]) -> float:
    return float(np.mean([np.mean(v) for v in per_token]))


def grpo_objective(
    group: RolloutGroup,
    cfg: GrpoConfig,
    advantages: Sequence[np.ndarray] | None = None,
) -> float:
    """Scalar objective J using the trajectories' stored current log-probs."""
    if advantages is None:
        advantages = compute_advantages(group, cfg)
    surrogate = [
        clipped_term(importance_ratio(t.logp_current, t.logp_old), a, cfg.epsilon) * np.ones(len(t))
        for t, a in zip(group, advantages)
    ]
    objective = _double_mean(surrogate)
    if cfg.beta:
        kl = [kl_estimate(t.logp_current, t.logp_ref) * np.ones(len(t)) for t in group]
        objective -= cfg.beta * _double_mean(kl)
    return objective


# ---------------------------------------------------------------------------
# tabular policy and toy environment


def log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


@dataclass
class SyntheticCoordinationEnv:
    """Three-state episodic stand-in for the coordinator's decision problem.

    From NeedInfo only Delegate makes progress; it leaves memory bloated with
    probability ``bloat_prob`` (then only Summarize helps) and otherwise
    leads to InfoHeld, where Finish earns reward 1. Any other action ends
    the episode with reward 0.
    """

    bloat_prob: float = 0.5
    states: tuple[str, ...] = ("NeedInfo", "InfoHeld", "MemoryBloated")
    actions: tuple[str, ...] = ("Plan", "Delegate", "Summarize", "Finish")

    NEED_INFO, INFO_HELD, BLOATED = 0, 1, 2
    PLAN, DELEGATE, SUMMARIZE, FINISH = 0, 1, 2, 3

    @property
    def n_states(self) -> int:
        return len(self.states)

    @property
    def n_actions(self) -> int:
        return len(self.actions)

    def step(self, state: int, action: int, rng: np.random.Generator) -> tuple[int | None, float]:
        """Return ``(next_state or None if terminal, reward)``."""
        if state == self.NEED_INFO and action == self.DELEGATE:
            return (self.BLOATED if rng.random() < self.bloat_prob else self.INFO_HELD), 0.0
        if state == self.BLOATED and action == self.SUMMARIZE:
            return self.INFO_HELD, 0.0
        if state == self.INFO_HELD and action == self.FINISH:
            return None, 1.0
        return None, 0.0

    def expected_reward(self, logits: np.ndarray) -> float:
        p = np.exp(log_softmax(logits))
        finish = p[self.INFO_HELD, self.FINISH]
        via_bloat = p[self.BLOATED, self.SUMMARIZE] * finish
        return float(p[self.NEED_INFO, self.DELEGATE] * (self.bloat_prob * via_bloat + (1 - self.bloat_prob) * finish))


@dataclass
class ToyPolicy:
    logits: np.ndarray
    environment: SyntheticCoordinationEnv = field(default_factory=SyntheticCoordinationEnv)

    def __post_init__(self):
        self.logits = np.array(self.logits, dtype=float)
        if not np.all(np.isfinite(self.logits)):
            raise ValueError("logits must be finite")

    @classmethod
    def uniform(cls, env: SyntheticCoordinationEnv | None = None) -> "ToyPolicy":
        env = env or SyntheticCoordinationEnv()
        return cls(np.zeros((env.n_states, env.n_actions)), env)

    def probs(self) -> np.ndarray:
        return np.exp(log_softmax(self.logits))

    def log_probs(self, states: np.ndarray, actions: np.ndarray) -> np.ndarray:
        return log_softmax(self.logits)[states, actions]

    def copy(self) -> "ToyPolicy":
        return ToyPolicy(self.logits.copy(), self.environment)


def sample_trajectory(
    policy: ToyPolicy,
    ref_logits: np.ndarray,
    rng: np.random.Generator,
    max_len: int = 8,
) -> Trajectory:
    env = policy.environment
    probs = policy.probs()
    state: int | None = env.NEED_INFO
    states, actions = [], []
    reward = 0.0
    while state is not None and len(actions) < max_len:
        action = int(rng.choice(env.n_actions, p=probs[state]))
        states.append(state)
        actions.append(action)
        state, reward = env.step(state, action, rng)
    s, a = np.array(states), np.array(actions)
    logp = policy.log_probs(s, a)
    return Trajectory(a, logp, logp.copy(), log_softmax(ref_logits)[s, a], reward, states=s)


def objective_and_grad(
    logits: np.ndarray,
    group: RolloutGroup,
    cfg: GrpoConfig,
    advantages: Sequence[np.ndarray],
) -> tuple[float, np.ndarray]:
    """Objective and its exact gradient for a tabular softmax policy.

    Current log-probs are recomputed from ``logits``; the stored old and
    reference log-probs are held fixed.
    """
    logsm = log_softmax(logits)
    probs = np.exp(logsm)
    grad = np.zeros_like(logits)
    k = len(group)
    total_surrogate = 0.0
    total_kl = 0.0
    for t, adv in zip(group, advantages):
        if t.states is None:
            raise ValueError("tabular gradients need per-token states")
        n = len(t)
        logp = logsm[t.states, t.tokens]
        ratio = importance_ratio(logp, t.logp_old) * np.ones(n)
        clipped = np.clip(ratio, 1 - cfg.epsilon, 1 + cfg.epsilon)
        surrogate = np.minimum(ratio * adv, clipped * adv)
        total_surrogate += surrogate.mean()
        # the unclipped branch carries gradient; a selected clipped branch is flat
        unclipped = ratio * adv <= clipped * adv
        in_range = (ratio >= 1 - cfg.epsilon) & (ratio <= 1 + cfg.epsilon)
        coef = np.where(unclipped | in_range, adv * ratio, 0.0)
        if cfg.beta:
            delta = t.logp_ref - logp
            total_kl += (np.expm1(delta) - delta).mean()
            coef = coef + cfg.beta * np.expm1(delta)
        weight = coef / (k * n)
        # d logp(a|s) / d logits[s, b] = 1[b == a] - pi(b|s)
        np.add.at(grad, (t.states, t.tokens), weight)
        np.add.at(grad, t.states, -weight[:, None] * probs[t.states])
    objective = total_surrogate / k - cfg.beta * total_kl / k
    return objective, grad


def _objective_at(logits: np.ndarray, group: RolloutGroup, cfg: GrpoConfig, advantages):
    """Objective evaluated in extended precision for finite differencing.

    Central differences of a float64 objective carry roundoff near
    eps * |J| / h, about 1e-11 at h = 1e-5, which swamps gradients that are
    exactly zero by cancellation. Where ``np.longdouble`` is wider than
    float64 that noise drops by three orders of magnitude.
    """
    dt = np.longdouble
    theta = np.asarray(logits, dtype=dt)
    shifted = theta - theta.max(axis=-1, keepdims=True)
    logsm = shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    lo, hi = dt(1) - dt(cfg.epsilon), dt(1) + dt(cfg.epsilon)
    surrogate = dt(0)
    kl = dt(0)
    for t, adv in zip(group, advantages):
        logp = logsm[t.states, t.tokens]
        ratio = np.exp(np.minimum(logp - t.logp_old.astype(dt), dt(_LOG_RATIO_CAP)))
        a = np.asarray(adv, dtype=dt)
        surrogate += np.minimum(ratio * a, np.clip(ratio, lo, hi) * a).mean()
        if cfg.beta:
            delta = t.logp_ref.astype(dt) - logp
            kl += (np.expm1(delta) - delta).mean()
    k = dt(len(group))
    return surrogate / k - dt(cfg.beta) * kl / k


def kink_distance(policy: ToyPolicy, group: RolloutGroup, cfg: GrpoConfig) -> float:
    """Smallest distance of any token ratio to 1 - eps or 1 + eps."""
    logsm = log_softmax(policy.logits)
    dist = math.inf
    for t in group:
        ratio = np.exp(logsm[t.states, t.tokens] - t.logp_old)
        edges = np.minimum(np.abs(ratio - (1 - cfg.epsilon)), np.abs(ratio - (1 + cfg.epsilon)))
        dist = min(dist, float(edges.min()))
    return dist


def finite_diff_check(
    policy: ToyPolicy,
    group: RolloutGroup,
    cfg: GrpoConfig,
    h: float = 1e-5,
    grad_fn: Callable[[np.ndarray], np.ndarray] | None = None,
) -> float:
    """Max relative error between the analytic gradient and central differences.

    Relative error uses ``max(|analytic|, 1e-8)`` as denominator. Refuses to
    certify when a ratio lies within ``10 h`` of a clip boundary.
    """
    if kink_distance(policy, group, cfg) <= 10 * h:
        raise KinkProximity("a token ratio is within 10h of a clip boundary")
    advantages = compute_advantages(group, cfg)
    theta = policy.logits
    if grad_fn is None:
        analytic = objective_and_grad(theta, group, cfg, advantages)[1]
    else:
        analytic = np.asarray(grad_fn(theta), dtype=float)
    worst = 0.0
    for idx in np.ndindex(theta.shape):
        plus, minus = theta.copy(), theta.copy()
        plus[idx] += h
        minus[idx] -= h
        diff = _objective_at(plus, group, cfg, advantages) - _objective_at(minus, group, cfg, advantages)
        numeric = float(diff / (2 * np.longdouble(h)))
        err = abs(numeric - analytic[idx]) / max(abs(analytic[idx]), 1e-8)
        worst = max(worst, err)
    return worst


def total_variation(p_logits: np.ndarray, q_logits: np.ndarray) -> float:
    """Largest per-state total-variation distance between two tabular policies."""
    p = np.exp(log_softmax(p_logits))
    q = np.exp(log_softmax(q_logits))
    return float(0.5 * np.abs(p - q).sum(axis=1).max())


@dataclass
class TrainResult:
    curve: list[float]
    policy: ToyPolicy
    ref_logits: np.ndarray

    @property
    def final_expected_reward(self) -> float:
        return self.policy.environment.expected_reward(self.policy.logits)

    def tail_mean(self, window: int = 10) -> float:
        if not self.curve:
            return float("nan")
        tail = self.curve[-window:]
        return sum(tail) / len(tail)


def train_toy(
    env: SyntheticCoordinationEnv,
    cfg: GrpoConfig,
    seed: int,
    iterations: int,
    step_size: float = 0.5,
    ref_interval: int = 50,
) -> TrainResult:
    """Gradient ascent on J from uniform logits; one update per sampled group.

    The sampling policy is synced to the current one every iteration and the
    reference policy is refreshed every ``ref_interval`` iterations.
    """
    rng = np.random.default_rng(seed)
    policy = ToyPolicy.uniform(env)
    ref = policy.logits.copy()
    curve: list[float] = []
    for it in range(iterations):
        if it % ref_interval == 0:
            ref = policy.logits.copy()
        group = RolloutGroup([sample_trajectory(policy, ref, rng) for _ in range(cfg.group_size)], f"iter-{it}")
        curve.append(float(np.mean([t.outcome_reward for t in group])))
        group = assign_token_rewards(group)
        advantages = compute_advantages(group, cfg)
        _, grad = objective_and_grad(policy.logits, group, cfg, advantages)
        policy.logits = policy.logits + step_size * grad
    return TrainResult(curve, policy, ref)


def trace_reward(prediction: str, gold: Sequence[str]) -> float:
    """Outcome reward for recorded runs: token F1 of the final answer."""
    from .metrics import token_f1

    return token_f1(prediction, gold)
