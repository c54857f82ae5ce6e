import math

import numpy as np
import pytest

from pessimistic_ac.instances import random_feature_mdp
from pessimistic_ac.lower_bound import C_PHI, R_CONST, build_instance, generate_lb_dataset, reference_policy
from pessimistic_ac.mdp_core import TERMINAL, FeatureMDP, optimal_policy
from pessimistic_ac.offline_data import (
    CoverageError, OfflineDataset, RolloutPlan, covariance, coverage_parameter, generate_dataset,
)
from pessimistic_ac.policies import Policy

# step-1 term sqrt(6); step-2 term sqrt(3) (L+1)/(2L) since the reference policy
# lands on levels 1..L uniformly; evaluated at 30 digits for L = 4 and L = 8
COVERAGE_L4 = 3.53202149751372640665193803815
COVERAGE_L8 = 3.4237683220406715758064726418


def test_zero_count_plan_gives_empty_dataset(rng):
    mdp = random_feature_mdp(rng, S=3, A=2, H=2, d=2)
    assert generate_dataset(mdp, [(1, 0, 0, 0)], rng).n == 0


def test_empty_plan_is_an_error(rng):
    mdp = random_feature_mdp(rng, S=3, A=2, H=2, d=2)
    with pytest.raises(ValueError):
        generate_dataset(mdp, [], rng)


def test_rewards_are_linear_and_next_states_valid(rng):
    mdp = random_feature_mdp(rng, S=4, A=3, H=3, d=2)
    plan = [(h, x, a, 5) for h in (1, 2, 3) for x in range(4) for a in range(3)]
    ds = generate_dataset(mdp, plan, rng)
    phi = ds.features(mdp)
    theta = mdp.reward_coeffs[ds.steps - 1]
    assert np.allclose(ds.rewards, np.einsum("nd,nd->n", phi, theta), atol=1e-12)
    assert np.all(ds.next_states[ds.steps == 3] == TERMINAL)
    inner = ds.steps < 3
    probs = mdp.transitions[ds.steps[inner] - 1, ds.states[inner], ds.actions[inner],
                            ds.next_states[inner]]
    assert np.all(probs > 0)


def test_next_state_frequencies_follow_transitions():
    rng = np.random.default_rng(3)
    mdp = random_feature_mdp(rng, S=3, A=2, H=2, d=2)
    n = 30_000
    ds = generate_dataset(mdp, [(1, 1, 0, n)], rng)
    freq = np.bincount(ds.next_states, minlength=3) / n
    p = mdp.transitions[0, 1, 0]
    assert np.all(np.abs(freq - p) < 4 * np.sqrt(p * (1 - p) / n))


def test_deterministic_transitions_give_unique_successors(rng):
    mdp = random_feature_mdp(rng, S=3, A=2, H=2, d=2)
    trans = np.zeros_like(mdp.transitions)
    trans[..., 2] = 1.0
    det = FeatureMDP(mdp.features, trans, mdp.reward_coeffs)
    ds = generate_dataset(det, [(1, x, a, 4) for x in range(3) for a in range(2)], rng)
    assert np.all(ds.next_states == 2)


def test_rollouts_contribute_horizon_tuples_per_episode(rng):
    mdp = random_feature_mdp(rng, S=4, A=3, H=3, d=2)
    ds = generate_dataset(mdp, RolloutPlan(Policy.uniform(3, 4, 3), 7), rng)
    assert ds.n == 21
    assert np.array_equal(ds.steps, np.tile([1, 2, 3], 7))
    assert np.all(ds.states[::3] == mdp.initial_state)
    states, nxt = ds.states.reshape(7, 3), ds.next_states.reshape(7, 3)
    assert np.array_equal(states[:, 1:], nxt[:, :-1])
    assert np.all(nxt[:, -1] == TERMINAL)


def test_lower_bound_dataset_blocks(rng):
    inst = build_instance(1 / 16)
    ds = generate_lb_dataset(inst, 3002, rng)
    assert ds.n == 3000
    k = 1000
    assert np.all(ds.steps[:2 * k] == 1) and np.all(ds.steps[2 * k:] == 2)
    assert np.all(ds.states[:2 * k] == inst.s1)
    assert np.all(ds.actions[:k] == 1) and np.all(ds.next_states[:k] == inst.s2bar)
    assert np.all(ds.actions[k:2 * k] == 0)
    assert set(ds.next_states[k:2 * k]) <= set(inst.level_states[1:])
    top = inst.level_states[inst.L]
    assert np.all(ds.states[2 * k:] == top) and np.all(ds.next_states[2 * k:] == TERMINAL)
    assert np.allclose(ds.rewards[2 * k:], inst.L * inst.eps * C_PHI / R_CONST, atol=1e-15)
    assert inst.q2 not in ds.states and inst.q2 not in ds.next_states


def test_covariance_of_empty_step_is_regularizer():
    ds = OfflineDataset([1], [0], [0], [0.0], [TERMINAL])
    feats = np.ones((2, 1, 1, 3)) / 3
    assert np.array_equal(covariance(ds, 2, 1.0, feats).sigma, np.eye(3))


def test_lower_bound_covariances(rng):
    inst = build_instance(1 / 16)
    n = 3000
    ds = generate_lb_dataset(inst, n, rng)
    s1 = covariance(ds, 1, 0.0, inst.mdp).sigma
    s2 = covariance(ds, 2, 0.0, inst.mdp).sigma
    assert np.allclose(s1, C_PHI ** 2 * n / 3 * np.eye(2), atol=1e-9)
    ref = n * (C_PHI * inst.L * inst.eps) ** 2 / 3 * np.diag([0.0, 1.0])
    assert np.allclose(s2, ref, atol=1e-9)
    assert np.linalg.matrix_rank(s2) == 1


def test_covariance_is_order_invariant(rng):
    mdp = random_feature_mdp(rng, S=4, A=3, H=2, d=3)
    ds = generate_dataset(mdp, [(h, x, a, 3) for h in (1, 2) for x in range(4) for a in range(3)], rng)
    perm = ds.take(rng.permutation(ds.n))
    for h in (1, 2):
        assert np.allclose(covariance(ds, h, 0.5, mdp).sigma, covariance(perm, h, 0.5, mdp).sigma,
                           atol=1e-12)


@pytest.mark.parametrize("eps, expected", [(1 / 16, COVERAGE_L4), (1 / 64, COVERAGE_L8)])
def test_reference_policy_coverage(eps, expected, rng):
    inst = build_instance(eps)
    ds = generate_lb_dataset(inst, 3000, rng)
    assert abs(coverage_parameter(ds, reference_policy(inst), inst.mdp) - expected) <= 1e-9


def test_reference_policy_step_one_coverage_term(rng):
    inst = build_instance(1 / 16)
    ds = generate_lb_dataset(inst, 3000, rng)
    v = np.array([C_PHI, C_PHI])  # reference action at t1 with b_init = 0
    quad = ds.n * v @ np.linalg.solve(covariance(ds, 1, 0.0, inst.mdp).sigma, v)
    assert abs(math.sqrt(quad) - math.sqrt(6)) < 1e-12


def test_zero_mean_feature_policy_has_zero_coverage():
    feats = np.zeros((1, 1, 2, 1))
    feats[0, 0, 0, 0], feats[0, 0, 1, 0] = 1.0, -1.0
    mdp = FeatureMDP(feats, np.ones((1, 1, 2, 1)), np.zeros((1, 1)))
    ds = OfflineDataset([1, 1], [0, 0], [0, 1], [0.0, 0.0], [TERMINAL, TERMINAL])
    assert coverage_parameter(ds, Policy.uniform(1, 1, 2), mdp) == 0.0


def test_coverage_is_invariant_to_duplication(rng):
    for _ in range(5):
        mdp = random_feature_mdp(rng, S=4, A=3, H=2, d=2)
        ds = generate_dataset(mdp, [(h, x, a, int(rng.integers(1, 4))) for h in (1, 2)
                                    for x in range(4) for a in range(3)], rng)
        table, _ = optimal_policy(mdp)
        doubled = OfflineDataset.concat([ds, ds])
        assert abs(coverage_parameter(ds, table, mdp) - coverage_parameter(doubled, table, mdp)) < 1e-9


def test_uncovered_direction_raises(rng):
    feats = np.zeros((1, 1, 2, 2))
    feats[0, 0, 0] = [1, 0]
    feats[0, 0, 1] = [0, 1]
    mdp = FeatureMDP(feats, np.ones((1, 1, 2, 1)), np.zeros((1, 2)))
    ds = OfflineDataset([1], [0], [0], [0.0], [TERMINAL])
    with pytest.raises(CoverageError):
        coverage_parameter(ds, Policy.uniform(1, 1, 2), mdp)
