import math

import numpy as np
import pytest
from scipy.optimize import nnls
from scipy.stats import norm

from pessimistic_ac.actor import (
    ActorAborted, ActorConfig, FtplState, actor_state_regret, default_params, ftpl_regret_harness,
    ftpl_step, run_actor,
)
from pessimistic_ac.instances import benchmark_linear_mdp, benchmark_plan
from pessimistic_ac.mdp_core import TERMINAL, FeatureMDP, mixture_value, optimal_policy
from pessimistic_ac.offline_data import OfflineDataset, generate_dataset
from pessimistic_ac.policies import PerturbedLinear

BETA_ROOT2_H2 = 5.65685424949238019520675489684   # 4 sqrt(2)
T_THEORY_HALF = 2896.309375740098659946            # 16 * 32 * sqrt(2) / 0.25


def _bandit() -> FeatureMDP:
    feats = np.zeros((1, 1, 2, 2))
    feats[0, 0, 0] = [1.0, 0.0]
    feats[0, 0, 1] = [0.0, 1.0]
    return FeatureMDP(feats, np.ones((1, 1, 2, 1)), np.array([[0.2, 0.8]]))


def _small_run(seed=0, T=12):
    mdp = benchmark_linear_mdp()
    rng = np.random.default_rng(seed)
    ds = generate_dataset(mdp, benchmark_plan(600), rng)
    cfg = ActorConfig(eps_final=0.6, delta=0.1, n=ds.n, d=2, H=2, B=math.sqrt(2), alpha_const=0.1,
                      T=T)
    return mdp, ds, cfg, run_actor(ds, cfg, mdp, mdp.initial_state, rng)


# ---------------------------------------------------------------------------
# parameter schedule

def test_norm_bound_scales_with_horizon():
    p = default_params(ActorConfig(eps_final=0.5, delta=0.1, n=100, d=2, H=2, B=math.sqrt(2)))
    assert p.beta == pytest.approx(BETA_ROOT2_H2, abs=1e-12)


def test_iteration_count_formula():
    p = default_params(ActorConfig(eps_final=0.5, delta=0.1, n=100, d=2, H=2, B=math.sqrt(2),
                                   T_cap=10_000))
    assert p.T_theory == pytest.approx(T_THEORY_HALF, rel=1e-14)
    assert p.T == 2897


def test_iteration_cap_applies():
    p = default_params(ActorConfig(eps_final=0.5, delta=0.1, n=100, d=2, H=2, B=math.sqrt(2),
                                   T_cap=200))
    assert p.T == 200


def test_well_specified_schedule():
    p = default_params(ActorConfig(eps_final=0.5, delta=0.1, n=100, d=2, H=2, B=math.sqrt(2),
                                   T_cap=10_000))
    assert p.zeta == 0.0
    assert p.eta == pytest.approx(p.beta * math.sqrt(p.T) * 2 ** -0.25, rel=1e-14)
    assert p.sigma == pytest.approx(p.eta / (p.T * p.beta), rel=1e-14)
    assert p.eps_apx == pytest.approx(0.1, rel=1e-14)
    conc = math.sqrt(math.log(2 * 100 * p.beta / (p.sigma * 0.1)))
    assert p.alpha == pytest.approx(p.beta * 2 * conc, rel=1e-14)


def test_misspecified_schedule_uses_second_branch():
    cfg = ActorConfig(eps_final=0.5, delta=0.1, n=400, d=2, H=2, B=math.sqrt(2), eps_be=0.01,
                      T_cap=500)
    p = default_params(cfg)
    assert p.eta == pytest.approx(p.beta * max(math.sqrt(500) * 2 ** -0.25, 500 * 0.1), rel=1e-14)
    inner = math.log(2 / (0.01 * p.sigma))
    zeta = 0.01 * 2 ** 1.5 * (math.sqrt(2 * inner) + 1 / p.sigma)
    assert p.zeta == pytest.approx(zeta, rel=1e-14)
    assert p.alpha > 4 * p.beta * zeta * math.sqrt(400)


def test_overrides_win():
    p = default_params(ActorConfig(eps_final=0.5, delta=0.1, n=100, d=2, H=2, B=1.0, T=7, eta=3.0,
                                   alpha=0.25, beta=2.0, sigma=0.5, eps_apx=0.01))
    assert (p.T, p.eta, p.alpha, p.beta, p.sigma, p.eps_apx) == (7, 3.0, 0.25, 2.0, 0.5, 0.01)


@pytest.mark.parametrize("kwargs", [dict(eps_final=0.0), dict(delta=1.0), dict(B=0.0),
                                    dict(on_infeasible="retry")])
def test_config_validation(kwargs):
    base = dict(eps_final=0.5, delta=0.1, n=100, d=2, H=2, B=1.0)
    with pytest.raises(ValueError):
        ActorConfig(**{**base, **kwargs})


# ---------------------------------------------------------------------------
# actor loop

def test_single_iteration_uses_zero_weights():
    mdp, ds, cfg, run = _small_run(T=1)
    assert run.T == 1 and run.sampled_index == 0
    rule = run.sampled_policy.steps[0]
    assert np.array_equal(rule.w, np.zeros(2)) and rule.sigma == run.params.eta


def test_weights_accumulate_exactly():
    _, _, _, run = _small_run()
    running = np.zeros_like(run.thetas[0])
    for t in range(run.T):
        assert np.array_equal(run.thetas[t], running)
        running = running + run.weights[t]


def test_run_is_deterministic():
    a, b = _small_run(seed=4)[3], _small_run(seed=4)[3]
    for field in ("thetas", "weights", "objectives", "alphas"):
        assert np.array_equal(getattr(a, field), getattr(b, field))
    assert a.sampled_index == b.sampled_index


def test_mixture_value_equals_mean_of_values():
    mdp, _, _, run = _small_run()
    assert abs(run.mixture_value(mdp) - run.mean_value(mdp)) <= 1e-9


def test_critic_weights_respect_norm_bound():
    _, _, _, run = _small_run()
    assert np.linalg.norm(run.weights, axis=2).max() <= run.params.beta * (1 + 1e-6)


def test_empty_dataset_is_rejected():
    mdp = benchmark_linear_mdp()
    empty = OfflineDataset([], [], [], [], [])
    cfg = ActorConfig(eps_final=0.6, delta=0.1, n=1, d=2, H=2, B=1.0, T=1)
    with pytest.raises(ValueError):
        run_actor(empty, cfg, mdp, 0, np.random.default_rng(0))


def _tight_instance():
    # 50 tuples pin w near 9.8 e1 while the norm bound is 9.5: the slack radius must reach ~2.15
    feats = np.zeros((1, 1, 2, 2))
    feats[0, 0, 0] = [1.0, 0.0]
    feats[0, 0, 1] = [0.0, 1.0]
    ds = OfflineDataset([1] * 50, [0] * 50, [0] * 50, [10.0] * 50, [TERMINAL] * 50)
    return feats, ds


def test_infeasible_critic_aborts_by_default():
    feats, ds = _tight_instance()
    cfg = ActorConfig(eps_final=0.5, delta=0.1, n=50, d=2, H=1, B=1.0, T=2, alpha=1.5, beta=9.5)
    with pytest.raises(ActorAborted) as err:
        run_actor(ds, cfg, feats, 0, np.random.default_rng(0))
    assert err.value.t == 1


def test_infeasible_critic_inflates_slack_radius_when_asked():
    feats, ds = _tight_instance()
    cfg = ActorConfig(eps_final=0.5, delta=0.1, n=50, d=2, H=1, B=1.0, T=2, alpha=1.5, beta=9.5,
                      on_infeasible="inflate")
    run = run_actor(ds, cfg, feats, 0, np.random.default_rng(0))
    assert run.infeasible.all()
    assert np.array_equal(run.alphas, [3.0, 3.0])


def test_bandit_mixture_is_near_optimal():
    mdp = _bandit()
    n = 4800
    best = optimal_policy(mdp)[1].value
    gaps = []
    for seed in range(20):
        rng = np.random.default_rng(seed)
        ds = generate_dataset(mdp, [(1, 0, 0, n // 2), (1, 0, 1, n // 2)], rng)
        cfg = ActorConfig(eps_final=0.5, delta=0.1, n=n, d=2, H=1, B=1.0, T_cap=200)
        run = run_actor(ds, cfg, mdp, 0, rng)
        gaps.append(best - mixture_value(mdp, run.policies()))
    assert np.mean(gaps) <= 0.1


def test_state_regret_within_online_bound():
    mdp, _, _, run = _small_run(T=30)
    table, _ = optimal_policy(mdp)
    for h in (1, 2):
        for x in range(mdp.S):
            regret, bound = actor_state_regret(run, mdp, h, x, int(np.argmax(table[h - 1, x])),
                                               mc_draws=2000)
            assert regret <= bound


# ---------------------------------------------------------------------------
# expected follow-the-perturbed-leader

def test_unperturbed_tie_picks_first_action():
    state = FtplState(np.array([[0.0, 1.0], [1.0, 0.0], [-1.0, 0.0]]), np.zeros(2), eta=0.0)
    assert np.array_equal(ftpl_step(state, 100, np.random.default_rng(0)), [0.0, 1.0])


def test_strong_history_selects_its_leader():
    state = FtplState(np.eye(2), np.array([1e6, 0.0]), eta=1.0)
    out = ftpl_step(state, 5000, np.random.default_rng(0))
    # the other action wins only if a N(0, 2) draw exceeds 1e6
    assert norm.sf(1e6 / math.sqrt(2)) == 0.0
    assert np.allclose(out, [1.0, 0.0], atol=1e-3)


def test_symmetric_actions_average_to_zero():
    state = FtplState(np.array([[1.0], [-1.0]]), np.zeros(1), eta=1.0)
    m = 20_000
    out = ftpl_step(state, m, np.random.default_rng(0))
    assert abs(out[0]) <= 3 / math.sqrt(m)


def test_chosen_point_lies_in_hull(rng):
    actions = rng.standard_normal((5, 2))
    state = FtplState(actions, rng.standard_normal(2), eta=0.5)
    out = ftpl_step(state, 500, rng)
    # nonnegative weights summing to one must reproduce the point
    lhs = np.vstack([actions.T, np.ones(5)])
    _, resid = nnls(lhs, np.append(out, 1.0))
    assert resid <= 1e-9


def test_zero_adversary_has_zero_regret():
    res = ftpl_regret_harness(np.eye(2), np.zeros((50, 2)), 1.0, 5.0, mc_samples=200,
                              rng=np.random.default_rng(0))
    assert res.regret == 0.0 and res.regret <= res.bound


def test_constant_adversary_within_bound():
    actions = np.array([[1.0, 0.0], [0.0, 1.0], [-1.0, 0.0]])
    rewards = np.tile([0.6, 0.8], (200, 1))
    res = ftpl_regret_harness(actions, rewards, 1.0, math.sqrt(200), mc_samples=2000,
                              rng=np.random.default_rng(1))
    assert res.best_action == 1
    assert res.regret <= res.bound + 3 * res.std_err


def test_alternating_adversary_within_bound():
    actions = np.array([[1.0], [-1.0]])
    T = 200
    signs = np.where(np.arange(T) % 2 == 1, -1.0, 1.0)
    signs[0] = 0.5
    res = ftpl_regret_harness(actions, signs[:, None], 1.0, math.sqrt(T), mc_samples=2000,
                              rng=np.random.default_rng(2))
    totals = actions @ signs[:, None].sum(axis=0)
    assert res.best_action == int(np.argmax(totals))
    assert res.regret <= res.bound + 3 * res.std_err


def test_bound_formula():
    rng = np.random.default_rng(3)
    actions = 2 * rng.standard_normal((4, 3))
    rewards = 0.5 * rng.standard_normal((40, 3))
    omega, eta = 0.7, 2.5
    res = ftpl_regret_harness(actions, rewards, omega, eta, mc_samples=50, rng=rng)
    D = np.linalg.norm(actions, axis=1).max()
    G = np.linalg.norm(rewards, axis=1).max()
    expected = omega * (1 / eta) * D * G ** 2 * 40 + eta * math.sqrt(3) * D / omega
    assert res.bound == pytest.approx(expected, rel=1e-14)


def test_empty_action_set_is_rejected():
    with pytest.raises(ValueError):
        FtplState(np.zeros((0, 2)), np.zeros(2))


def test_probed_rule_matches_policy_rule():
    _, _, _, run = _small_run(T=3)
    rule = run.policy(3).steps[1]
    assert isinstance(rule, PerturbedLinear)
    assert np.array_equal(rule.w, run.weights[0, 1] + run.weights[1, 1])
