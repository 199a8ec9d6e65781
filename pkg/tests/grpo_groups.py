"""Random rollout groups for the GRPO checks."""

import numpy as np

from stackplanner.grpo import (
    RolloutGroup,
    SyntheticCoordinationEnv,
    ToyPolicy,
    Trajectory,
    assign_token_rewards,
    log_softmax,
)


def dyadic_rewards(rng: np.random.Generator, k: int) -> np.ndarray:
    """Rewards on a 1/8 grid so shifts and power-of-two scalings stay exact."""
    while True:
        rewards = rng.integers(-16, 17, size=k) / 8.0
        if len(set(rewards.tolist())) > 1:
            return rewards


def token_group(rng: np.random.Generator, k: int | None = None, rewards=None) -> RolloutGroup:
    """Group of K trajectories with lengths in [1, 32] and broadcast rewards."""
    k = k if k is not None else int(rng.integers(2, 17))
    rewards = dyadic_rewards(rng, k) if rewards is None else rewards
    trajs = []
    for r in rewards:
        n = int(rng.integers(1, 33))
        logp = -rng.random(n)
        trajs.append(Trajectory(rng.integers(0, 100, n), logp, logp.copy(), logp.copy(), float(r)))
    return assign_token_rewards(RolloutGroup(trajs, "q"))


def with_rewards(group: RolloutGroup, rewards) -> RolloutGroup:
    trajs = [
        Trajectory(t.tokens, t.logp_current, t.logp_old, t.logp_ref, float(r), states=t.states)
        for t, r in zip(group, rewards)
    ]
    return assign_token_rewards(RolloutGroup(trajs, group.query_id))


def toy_config(rng: np.random.Generator, env: SyntheticCoordinationEnv | None = None, k: int = 4):
    """Random tabular policy plus a group sampled from a perturbed old policy.

    Ratios differ from 1 so both clip branches get exercised.
    """
    env = env or SyntheticCoordinationEnv()
    shape = (env.n_states, env.n_actions)
    current = ToyPolicy(rng.normal(0.0, 1.0, shape), env)
    old_logits = current.logits + rng.normal(0.0, 0.3, shape)
    ref_logits = current.logits + rng.normal(0.0, 0.5, shape)
    old_lsm, ref_lsm = log_softmax(old_logits), log_softmax(ref_logits)
    trajs = []
    for _ in range(k):
        n = int(rng.integers(1, 7))
        states = rng.integers(0, env.n_states, n)
        actions = rng.integers(0, env.n_actions, n)
        trajs.append(Trajectory(
            actions,
            current.log_probs(states, actions),
            old_lsm[states, actions],
            ref_lsm[states, actions],
            float(rng.integers(0, 2)),
            states=states,
        ))
    return current, assign_token_rewards(RolloutGroup(trajs, "toy"))
