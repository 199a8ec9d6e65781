import math
import statistics

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from grpo_groups import token_group, toy_config, with_rewards
from stackplanner.grpo import (
    DegenerateGroup,
    DegeneratePolicy,
    GrpoConfig,
    KinkProximity,
    RewardScope,
    RolloutGroup,
    SyntheticCoordinationEnv,
    ToyPolicy,
    Trajectory,
    assign_token_rewards,
    clipped_term,
    compute_advantages,
    finite_diff_check,
    grpo_objective,
    importance_ratio,
    kl_estimate,
    objective_and_grad,
    total_variation,
    trace_reward,
    train_toy,
)

CFG = GrpoConfig()


def traj(reward, n, logp_current=None, logp_old=None, logp_ref=None):
    zeros = np.zeros(n)
    return Trajectory(
        np.arange(n),
        zeros if logp_current is None else logp_current,
        zeros if logp_old is None else logp_old,
        zeros if logp_ref is None else logp_ref,
        reward,
    )


def group(*trajs):
    return assign_token_rewards(RolloutGroup(list(trajs), "q"))


# -- rewards and advantages


def test_assign_token_rewards():
    g = group(traj(1.0, 3), traj(0.0, 1), traj(-0.5, 2))
    assert [t.token_rewards.tolist() for t in g] == [[1, 1, 1], [0], [-0.5, -0.5]]


def test_advantages_two_by_two():
    adv = compute_advantages(group(traj(1.0, 2), traj(0.0, 2)), CFG)
    assert [a.tolist() for a in adv] == [[1.0, 1.0], [-1.0, -1.0]]


def test_advantages_token_vs_trajectory_scope():
    # token multiset {1,1,1,0}: mean 3/4, std sqrt(3)/4
    g = group(traj(1.0, 3), traj(0.0, 1))
    token = compute_advantages(g, CFG)
    assert token[0][0] == pytest.approx(1 / math.sqrt(3), abs=1e-15)
    assert token[1][0] == pytest.approx(-math.sqrt(3), abs=1e-15)
    per_traj = compute_advantages(g, GrpoConfig(reward_stat_scope=RewardScope.PER_TRAJECTORY))
    assert per_traj[0].tolist() == [1.0, 1.0, 1.0] and per_traj[1].tolist() == [-1.0]


def test_degenerate_groups():
    g = group(traj(0.5, 2), traj(0.5, 3))
    assert all(not a.any() for a in compute_advantages(g, CFG))
    assert compute_advantages(group(traj(1.0, 4)), CFG)[0].tolist() == [0, 0, 0, 0]
    with pytest.raises(DegenerateGroup):
        compute_advantages(g, GrpoConfig(degenerate_policy=DegeneratePolicy.ERROR))


def test_advantages_need_token_rewards():
    with pytest.raises(ValueError):
        compute_advantages(RolloutGroup([traj(1.0, 2)]), CFG)


def brute_force_advantages(g):
    pool = [r for t in g for r in t.token_rewards.tolist()]
    mu, sd = statistics.fmean(pool), statistics.pstdev(pool)
    return [[(r - mu) / sd for r in t.token_rewards.tolist()] for t in g]


@given(st.integers(0, 2**32 - 1))
@settings(max_examples=100)
def test_advantages_match_brute_force(seed):
    g = token_group(np.random.default_rng(seed))
    for got, want in zip(compute_advantages(g, CFG), brute_force_advantages(g)):
        assert np.allclose(got, want, rtol=0, atol=1e-12)


@given(st.integers(0, 2**32 - 1))
@settings(max_examples=100)
def test_pooled_advantages_are_standardized(seed):
    pooled = np.concatenate(compute_advantages(token_group(np.random.default_rng(seed)), CFG))
    assert abs(pooled.mean()) < 1e-9
    assert abs(pooled.std() - 1) < 1e-9


@given(st.integers(0, 2**32 - 1), st.integers(-64, 64), st.sampled_from([0.25, 0.5, 2.0, 8.0]))
@settings(max_examples=100)
def test_affine_invariance_exact(seed, shift_eighths, scale):
    rng = np.random.default_rng(seed)
    g = token_group(rng)
    rewards = np.array([t.outcome_reward for t in g])
    base = compute_advantages(g, CFG)
    for variant in (rewards + shift_eighths / 8, rewards * scale):
        for a, b in zip(base, compute_advantages(with_rewards(g, variant), CFG)):
            assert a.tolist() == b.tolist()


# -- ratio, clip and KL


def test_importance_ratio_examples():
    assert importance_ratio(-1.0, -1.0) == 1.0
    assert importance_ratio(math.log(2), 0.0) == pytest.approx(2.0, rel=1e-15)
    assert importance_ratio(-math.log(4), 0.0) == pytest.approx(0.25, rel=1e-15)


def test_importance_ratio_cap(caplog):
    assert importance_ratio(0.0, -100.0) == pytest.approx(1e6)
    assert "clamping" in caplog.text


def test_clipped_term_examples():
    assert clipped_term(1.5, 1.0, 0.2) == pytest.approx(1.2)
    assert clipped_term(0.5, -1.0, 0.2) == pytest.approx(-0.8)
    assert clipped_term(1.0, -3.7, 0.2) == -3.7


@given(st.floats(0, 10), st.floats(-5, 5), st.floats(0.01, 0.99))
def test_clipped_term_bounds(z, a, eps):
    assert clipped_term(z, a, eps) <= z * a + 1e-12
    if 1 - eps <= z <= 1 + eps:
        assert clipped_term(z, a, eps) == z * a


def test_kl_examples():
    assert kl_estimate(-1.0, -1.0) == 0.0
    assert kl_estimate(0.0, math.log(2)) == pytest.approx(2 - math.log(2) - 1, abs=1e-15)
    assert kl_estimate(0.0, -math.log(2)) == pytest.approx(0.5 + math.log(2) - 1, abs=1e-15)
    assert round(kl_estimate(0.0, math.log(2)), 4) == 0.3069
    assert round(kl_estimate(0.0, -math.log(2)), 4) == 0.1931


@given(st.floats(-30, 0), st.floats(-30, 0))
def test_kl_nonnegative(cur, ref):
    value = kl_estimate(cur, ref)
    assert value >= 0
    if cur == ref:
        assert value == 0


# -- objective


def test_objective_examples():
    g = group(traj(1.0, 2), traj(0.0, 2))
    assert grpo_objective(g, CFG) == 0.0
    logp = np.log([0.5, 0.25])
    same = group(traj(1.0, 2, logp, logp, logp), traj(0.0, 2, logp, logp, logp))
    assert grpo_objective(same, GrpoConfig(beta=0.5)) == grpo_objective(same, CFG)


@given(st.integers(0, 2**32 - 1))
@settings(max_examples=50)
def test_objective_ratio_one_is_mean_of_means(seed):
    g = token_group(np.random.default_rng(seed))
    adv = compute_advantages(g, CFG)
    brute = sum(sum(a) / len(a) for a in adv) / len(adv)
    assert grpo_objective(g, CFG) == pytest.approx(brute, abs=1e-12)


def test_objective_with_kl_double_mean():
    ln2 = math.log(2)
    # delta = ref - current: +ln2 on the first trajectory, then 0 and -ln2
    first = traj(1.0, 1, np.array([-ln2]), np.array([-ln2]), np.array([0.0]))
    second = traj(0.0, 2, np.array([-1.0, 0.0]), np.array([-1.0, 0.0]), np.array([-1.0, -ln2]))
    g = group(first, second)
    kl = ((2 - ln2 - 1) + (0 + (0.5 + ln2 - 1)) / 2) / 2
    adv = compute_advantages(g, CFG)
    expected = (adv[0].mean() + adv[1].mean()) / 2 - 0.1 * kl
    assert grpo_objective(g, GrpoConfig(beta=0.1)) == pytest.approx(expected, abs=1e-15)


def test_tabular_objective_matches_stored_logps():
    rng = np.random.default_rng(3)
    for beta in (0.0, 0.1):
        policy, g = toy_config(rng)
        cfg = GrpoConfig(beta=beta)
        adv = compute_advantages(g, cfg)
        assert objective_and_grad(policy.logits, g, cfg, adv)[0] == pytest.approx(grpo_objective(g, cfg, adv), abs=1e-12)


# -- gradients


def certified(policy, g, cfg, **kw):
    try:
        return finite_diff_check(policy, g, cfg, **kw)
    except KinkProximity:
        return None


@given(st.integers(0, 2**32 - 1), st.sampled_from([0.0, 0.1]))
@settings(max_examples=50)
def test_gradient_matches_finite_differences(seed, beta):
    policy, g = toy_config(np.random.default_rng(seed))
    err = certified(policy, g, GrpoConfig(beta=beta))
    assert err is None or err < 1e-5


def test_zero_advantage_gradient():
    policy, g = toy_config(np.random.default_rng(0))
    g = with_rewards(g, [1.0] * len(g))
    adv = compute_advantages(g, CFG)
    assert not objective_and_grad(policy.logits, g, CFG, adv)[1].any()
    assert finite_diff_check(policy, g, CFG) == 0.0


def test_fault_injection_detected():
    rng = np.random.default_rng(11)
    policy, g = toy_config(rng)
    adv = compute_advantages(g, CFG)
    err = finite_diff_check(policy, g, CFG, grad_fn=lambda th: objective_and_grad(th, g, CFG, adv)[1] + 0.1)
    assert err > 0.01


def test_kink_refused():
    env = SyntheticCoordinationEnv()
    policy = ToyPolicy.uniform(env)
    logp = policy.log_probs(np.array([0]), np.array([1]))
    # ratio exactly 1 + eps
    t = Trajectory([1], logp, logp - math.log(1.2), logp, 1.0, states=[0])
    g = assign_token_rewards(RolloutGroup([t, Trajectory([1], logp, logp, logp, 0.0, states=[0])]))
    with pytest.raises(KinkProximity):
        finite_diff_check(policy, g, CFG)


# -- toy environment and training


def test_env_transitions():
    env = SyntheticCoordinationEnv(bloat_prob=0.0)
    rng = np.random.default_rng(0)
    assert env.step(env.NEED_INFO, env.DELEGATE, rng) == (env.INFO_HELD, 0.0)
    assert env.step(env.INFO_HELD, env.FINISH, rng) == (None, 1.0)
    assert env.step(env.NEED_INFO, env.FINISH, rng) == (None, 0.0)
    assert SyntheticCoordinationEnv(bloat_prob=1.0).step(0, 1, rng)[0] == env.BLOATED


def test_uniform_baseline():
    # 1/4 * (0.5 * 1/16 + 0.5 * 1/4)
    assert SyntheticCoordinationEnv().expected_reward(np.zeros((3, 4))) == pytest.approx(0.0390625, abs=1e-15)


def test_train_zero_iterations():
    assert train_toy(SyntheticCoordinationEnv(), CFG, seed=7, iterations=0).curve == []


def test_train_is_deterministic():
    a = train_toy(SyntheticCoordinationEnv(), CFG, seed=3, iterations=20).curve
    b = train_toy(SyntheticCoordinationEnv(), CFG, seed=3, iterations=20).curve
    assert a == b


def test_dominant_kl_stays_near_reference():
    result = train_toy(SyntheticCoordinationEnv(), GrpoConfig(beta=10.0), seed=7, iterations=300)
    assert total_variation(result.policy.logits, result.ref_logits) < 0.05


def test_config_validation():
    with pytest.raises(ValueError):
        GrpoConfig(epsilon=1.0)
    with pytest.raises(ValueError):
        GrpoConfig(std_floor=0.0)
    with pytest.raises(ValueError):
        GrpoConfig(beta=-1)


def test_trajectory_validation():
    with pytest.raises(ValueError):
        Trajectory([1, 2], [0.0], [0.0, 0.0], [0.0, 0.0], 1.0)
    with pytest.raises(ValueError):
        Trajectory([1], [0.5], [0.0], [0.0], 1.0)


def test_trace_reward_is_f1():
    assert trace_reward("Obama", ["Barack Obama"]) == pytest.approx(2 / 3)
