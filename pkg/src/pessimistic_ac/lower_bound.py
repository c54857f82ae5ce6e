"""Hard two-step instance family, its canonical dataset and the adversarial gap evaluator.

The family is indexed by bits ``b = (b_rew, b_init, b_table)`` where
``b_table[l - 1, e]`` shifts the level of the ``t_{2,e}`` successor reached
from level ``l``.  Levels ``zeta = l * eps`` run over ``l = 0..L`` with
``L = 1 / sqrt(eps)`` an even integer.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .mdp_core import TERMINAL, FeatureMDP, exact_policy_value, resolve_table
from .offline_data import OfflineDataset
from .policies import Policy

C_PHI = 1.0 / math.sqrt(2.0)
R_CONST = 16.0
A_COUNT = 4


@dataclass(frozen=True, eq=False)
class Bits:
    b_rew: int
    b_init: int
    b_table: np.ndarray  # (L, 2) of 0/1

    def __post_init__(self) -> None:
        table = np.asarray(self.b_table, dtype=int)
        if table.ndim != 2 or table.shape[1] != 2 or not np.isin(table, (0, 1)).all():
            raise ValueError("b_table must be an (L, 2) array of bits")
        if self.b_rew not in (0, 1) or self.b_init not in (0, 1):
            raise ValueError("b_rew and b_init must be 0 or 1")
        object.__setattr__(self, "b_table", table)

    @classmethod
    def zeros(cls, L: int) -> "Bits":
        return cls(0, 0, np.zeros((L, 2), dtype=int))

    @classmethod
    def random(cls, L: int, rng: np.random.Generator) -> "Bits":
        return cls(int(rng.integers(2)), int(rng.integers(2)), rng.integers(0, 2, (L, 2)))

    def as_string(self) -> str:
        rows = "".join(f"{a}{b}" for a, b in self.b_table)
        return f"rew={self.b_rew};init={self.b_init};levels={rows}"


def even_level_count(eps: float) -> tuple[float, int]:
    """Largest eps' <= eps with 1/sqrt(eps') an even integer, and that integer."""
    if not 0 < eps < 1:
        raise ValueError("eps must lie in (0, 1)")
    L = math.ceil(1.0 / math.sqrt(eps) - 1e-9)
    if L % 2:
        L += 1
    return 1.0 / L ** 2, L


def _level_count(eps: float) -> int:
    if not 0 < eps < 1:
        raise ValueError("eps must lie in (0, 1)")
    root = 1.0 / math.sqrt(eps)
    L = round(root)
    if abs(root - L) > 1e-9 * root or L % 2:
        raise ValueError(f"1/sqrt(eps) = {root!r} is not an even integer; see even_level_count")
    return int(L)


@dataclass(eq=False)
class LowerBoundInstance:
    eps: float
    L: int
    bits: Bits
    mdp: FeatureMDP
    s1: int
    t1: int
    s2: int
    s2bar: int
    q2: int
    level_states: np.ndarray   # (L+1,) index of s2^{l eps}
    t_states: np.ndarray       # (2, L+1) index of t_{2,e}^{l eps}; column 0 is shared
    c_phi: float = C_PHI
    R: float = R_CONST

    @property
    def optimal_value(self) -> float:
        """Value of the reference policy from t1: c_phi (L+1) eps / (2R)."""
        return self.c_phi * (self.L + 1) * self.eps / (2 * self.R)

    @property
    def gap_threshold(self) -> float:
        """c_phi sqrt(eps) / 40."""
        return self.c_phi * math.sqrt(self.eps) / 40.0


def build_instance(eps: float, bits: Bits | None = None) -> LowerBoundInstance:
    L = _level_count(eps)
    bits = Bits.zeros(L) if bits is None else bits
    if bits.b_table.shape != (L, 2):
        raise ValueError(f"b_table must have shape {(L, 2)}")
    names = ["s1", "t1", "s2", "s2bar", "q2"]
    names += [f"s2^{l}" for l in range(L + 1)]
    names += ["t2^0"] + [f"t2,{e}^{l}" for e in (0, 1) for l in range(1, L + 1)]
    idx = {name: i for i, name in enumerate(names)}
    S = len(names)
    level = np.array([idx[f"s2^{l}"] for l in range(L + 1)])
    tst = np.array([[idx["t2^0"]] + [idx[f"t2,{e}^{l}"] for l in range(1, L + 1)] for e in (0, 1)])

    c = C_PHI
    step = np.zeros((S, A_COUNT, 2))

    def put(x: int, *vecs) -> None:
        # unspecified actions copy action 0
        for a in range(A_COUNT):
            step[x, a] = c * np.asarray(vecs[a] if a < len(vecs) else vecs[0], dtype=float)

    put(idx["s1"], (1, 0), (0, 1))
    put(idx["t1"], (1, 1), (1, -1))
    put(idx["s2bar"], (0, 0))
    put(idx["q2"], (0, 0))
    put(idx["s2"], (0, 1), (0, -1))
    for l in range(L + 1):
        z = l * eps
        put(level[l], (0, z), (1, 0), (0, -z), (-1, 0))
        for e in (0, 1):
            sgn = 1 - 2 * e
            put(tst[e, l], (1, sgn * z), (-1, -sgn * z))
    features = np.stack([step, step])

    trans = np.zeros((2, S, A_COUNT, S))
    for h in range(2):
        for x in range(S):
            trans[h, x, :, x] = 1.0  # placeholder rows for states that do not occur at step h
    uniform_levels = np.zeros(S)
    uniform_levels[level[1:]] = 1.0 / L
    mixed = np.zeros(S)
    for l in range(1, L + 1):
        for e in (0, 1):
            mixed[tst[e, l - bits.b_table[l - 1, e]]] += 1.0 / (2 * L)
    s1, t1 = idx["s1"], idx["t1"]
    for a in range(A_COUNT):
        trans[0, s1, a] = uniform_levels
        # actions 2, 3 copy action 0 at t1
        trans[0, t1, a] = uniform_levels if (a if a < 2 else 0) == bits.b_init else mixed
    trans[0, s1, 1] = 0.0
    trans[0, s1, 1, idx["s2bar"]] = 1.0

    active = np.zeros((2, S), dtype=bool)
    active[0, [s1, t1]] = True
    active[1] = True  # every state exists at step 2; only s1 and t1 occur at step 1
    reward_coeffs = np.array([[0.0, 0.0], [1.0 - 2 * bits.b_rew, 1.0 / R_CONST]])
    mdp = FeatureMDP(features, trans, reward_coeffs, initial_state=t1, active=active,
                     state_names=tuple(names))
    return LowerBoundInstance(eps, L, bits, mdp, s1, t1, idx["s2"], idx["s2bar"], idx["q2"],
                              level, tst)


def reference_policy(instance: LowerBoundInstance) -> Policy:
    """Deterministic linear policy with step weights (1, 1 - 2 b_init) and (0, 1)."""
    w = np.array([[1.0, 1.0 - 2 * instance.bits.b_init], [0.0, 1.0]])
    return Policy.perturbed_linear(w, 0.0)


def naive_greedy_policy() -> Policy:
    """Greedy on the second feature coordinate at both steps."""
    return Policy.perturbed_linear(np.array([[0.0, 1.0], [0.0, 1.0]]), 0.0)


def generate_lb_dataset(instance: LowerBoundInstance, n: int, rng: np.random.Generator) -> OfflineDataset:
    """n // 3 copies of each of the three canonical tuple blocks."""
    if n < 3:
        raise ValueError("n must be at least 3")
    k = n // 3
    inst = instance
    nxt0 = rng.choice(inst.mdp.S, size=k, p=inst.mdp.transitions[0, inst.s1, 0])
    top = inst.level_states[inst.L]
    reward2 = float(inst.mdp.rewards[1, top, 0])
    steps = np.concatenate([np.ones(2 * k, int), np.full(k, 2)])
    states = np.concatenate([np.full(2 * k, inst.s1), np.full(k, top)])
    actions = np.concatenate([np.ones(k, int), np.zeros(2 * k, int)])
    rewards = np.concatenate([np.zeros(2 * k), np.full(k, reward2)])
    next_states = np.concatenate([np.full(k, inst.s2bar), nxt0, np.full(k, TERMINAL)])
    return OfflineDataset(steps, states, actions, rewards, next_states)


# ---------------------------------------------------------------------------
# behavioral statistics of a policy distribution

@dataclass(frozen=True, eq=False)
class BehaviorProfile:
    """Alias-aggregated action probabilities of one policy at the states the analysis uses."""
    t1: np.ndarray      # (2,) P(0 or alias), P(1) at t1
    t_keep: np.ndarray  # (2, L+1): P(e | t_{2,e}^l), aliases of 0 folded into 0
    s2_diff: np.ndarray  # (L+1,): P(1 | s2^l) - P(3 | s2^l)


def behavior_profile(instance: LowerBoundInstance, policy, mc_draws: int = 20_000,
                     seed: int = 0) -> BehaviorProfile:
    table = resolve_table(instance.mdp, policy, mc_draws, seed)
    agg = table[..., 0] + table[..., 2] + table[..., 3]  # P(action 0 or its aliases)
    p1 = table[..., 1]
    t1 = np.array([agg[0, instance.t1], p1[0, instance.t1]])
    keep = np.stack([agg[1, instance.t_states[0]], p1[1, instance.t_states[1]]])
    lv = instance.level_states
    s2_diff = table[1, lv, 1] - table[1, lv, 3]
    return BehaviorProfile(t1, keep, s2_diff)


@dataclass(frozen=True, eq=False)
class PolicyDistributionEstimate:
    """Averages over a weighted collection of policies for both choices of b_init.

    Arrays indexed ``[b_init, l]`` with ``l = 0..L``.
    """
    L: int
    eps: float
    Z0: np.ndarray        # (2,) E[P(1 - b_init | t1)]
    eta_bar: np.ndarray   # (2, L+1)
    gamma_bar: np.ndarray  # (2, L+1)
    rho: np.ndarray       # (2, L+1)
    rho_e: np.ndarray     # (2, 2, L+1): [b_init, e, l]
    trials: int

    @property
    def b_init(self) -> int:
        """The b_init whose Z0 is at least 1/2 (0 on a tie)."""
        return 0 if self.Z0[0] >= self.Z0[1] else 1


def aggregate_profiles(profiles: Sequence[BehaviorProfile], weights=None, L: int = 0,
                       eps: float = 0.0, trials: int | None = None) -> PolicyDistributionEstimate:
    k = len(profiles)
    if k == 0:
        raise ValueError("need at least one policy")
    wts = np.full(k, 1.0 / k) if weights is None else np.asarray(weights, dtype=float)
    wts = wts / wts.sum()
    t1 = np.stack([p.t1 for p in profiles])            # (k, 2)
    keep = np.stack([p.t_keep for p in profiles])      # (k, 2, L+1)
    sdiff = np.stack([p.s2_diff for p in profiles])    # (k, L+1)
    n_levels = keep.shape[-1]
    Z0 = np.zeros(2)
    eta = np.zeros((2, n_levels))
    gam = np.zeros((2, n_levels))
    rho = np.zeros((2, n_levels))
    rho_e = np.zeros((2, 2, n_levels))
    for b in (0, 1):
        away = t1[:, 1 - b]  # P(1 - b_init | t1)
        stay = t1[:, b]
        Z0[b] = wts @ away
        eta[b] = wts @ (away[:, None] * (keep[:, 0] - keep[:, 1]))
        gam[b] = wts @ (stay[:, None] * sdiff)
        if Z0[b] > 0:
            for e in (0, 1):
                rho_e[b, e] = wts @ (away[:, None] * keep[:, e]) / Z0[b]
            rho[b] = rho_e[b, 0] + rho_e[b, 1]
    return PolicyDistributionEstimate(L or n_levels - 1, eps, Z0, eta, gam, rho, rho_e,
                                      trials if trials is not None else k)


Algorithm = Callable[[OfflineDataset, LowerBoundInstance, np.random.Generator], object]


def _as_mixture(output) -> tuple[list, np.ndarray]:
    if isinstance(output, tuple) and len(output) == 2 and isinstance(output[0], list):
        pols, wts = output
        return pols, np.asarray(wts, dtype=float)
    if isinstance(output, list):
        return output, np.full(len(output), 1.0 / len(output))
    return [output], np.ones(1)


def _trial_profiles(algorithm: Algorithm, template: LowerBoundInstance, n: int,
                    rng: np.random.Generator, mc_draws: int):
    dataset = generate_lb_dataset(template, n, rng)
    pols, wts = _as_mixture(algorithm(dataset, template, rng))
    seeds = rng.integers(2 ** 63, size=len(pols))
    tables = [resolve_table(template.mdp, p, mc_draws, int(s)) for p, s in zip(pols, seeds)]
    return [behavior_profile(template, t) for t in tables], tables, wts


def estimate_policy_distribution(algorithm: Algorithm, template: LowerBoundInstance, n: int,
                                 trials: int, rng: np.random.Generator,
                                 mc_draws: int = 20_000) -> PolicyDistributionEstimate:
    """Run the algorithm on independent canonical datasets and average its behavior."""
    if trials < 1:
        raise ValueError("trials must be positive")
    profiles, weights = [], []
    for _ in range(trials):
        prof, _, wts = _trial_profiles(algorithm, template, n, rng, mc_draws)
        profiles += prof
        weights.append(wts / trials)
    return aggregate_profiles(profiles, np.concatenate(weights), template.L, template.eps, trials)


@dataclass(frozen=True, eq=False)
class BitChoice:
    bits: Bits
    case: int
    flagged: bool
    margins: dict = field(default_factory=dict)


def adversarial_b(estimate: PolicyDistributionEstimate, eps: float | None = None) -> BitChoice:
    """Bit selection by the three-case analysis.

    Case 1: the mean of eta_bar + gamma_bar over levels 1..L exceeds sqrt(eps)/10
    in magnitude; b_rew follows its sign and all level bits are 0.
    Case 2: sum_{l >= L/2} (rho(l) - 1) <= L/4; same bits as case 1.
    Case 3: otherwise; pick e* with the larger positive-increment sum of rho_e*,
    set b_rew = e* and b_{l,e*} = 1 where rho_e* does not decrease.
    """
    eps = estimate.eps if eps is None else eps
    L = estimate.L
    root = math.sqrt(eps)
    b_init = estimate.b_init
    total = float(np.sum(estimate.eta_bar[b_init, 1:] + estimate.gamma_bar[b_init, 1:]))
    rho = estimate.rho[b_init]
    case2_margin = L / 4 - float(np.sum(rho[L // 2:] - 1.0))
    increments = np.diff(estimate.rho_e[b_init], axis=1)  # (2, L): rho_e(l) - rho_e(l-1)
    pos = np.clip(increments, 0.0, None).sum(axis=1)
    case3_margin = float(np.clip(np.diff(rho), 0.0, None).sum()) - root / 2
    margins = {"case1": abs(total) / L - root / 10, "case2": case2_margin, "case3": case3_margin,
               "sum_eta_gamma": total}
    simple = Bits(0 if total < 0 else 1, b_init, np.zeros((L, 2), dtype=int))
    if abs(total) / L > root / 10:
        return BitChoice(simple, 1, False, margins)
    flagged = False
    if case2_margin >= 0:
        return BitChoice(simple, 2, False, margins)
    if case3_margin < 0:
        flagged = True  # both predicates fail; only possible for estimates with rho(0) != 1
        if case2_margin >= case3_margin:
            return BitChoice(simple, 2, True, margins)
    e_star = 0 if pos[0] >= pos[1] else 1
    if pos[e_star] < root / 4:
        flagged = True
    table = np.zeros((L, 2), dtype=int)
    table[:, e_star] = (increments[e_star] >= 0).astype(int)
    margins["e_star_increment"] = float(pos[e_star])
    return BitChoice(Bits(e_star, b_init, table), 3, flagged, margins)


# ---------------------------------------------------------------------------
# gap evaluation

@dataclass(frozen=True, eq=False)
class GapReport:
    gap: float
    std_err: float
    case: int
    bits: Bits
    threshold: float
    flagged: bool
    optimal_value: float
    trial_gaps: np.ndarray
    estimate: PolicyDistributionEstimate

    @property
    def passed(self) -> bool:
        return self.gap >= self.threshold - 3 * self.std_err


def _mixture_value(mdp: FeatureMDP, tables: Sequence[np.ndarray], weights: np.ndarray) -> float:
    return float(sum(w * exact_policy_value(mdp, t).value for t, w in zip(tables, weights)))


def exact_gap(policies: Sequence, weights=None, eps: float = 1 / 16,
              mc_draws: int = 20_000) -> GapReport:
    """Gap against the adversarial member for a known policy distribution, with no sampling."""
    template = build_instance(eps)
    wts = np.full(len(policies), 1.0 / len(policies)) if weights is None else np.asarray(weights, float)
    tables = [resolve_table(template.mdp, p, mc_draws, k) for k, p in enumerate(policies)]
    est = aggregate_profiles([behavior_profile(template, t) for t in tables], wts,
                             template.L, eps, trials=1)
    choice = adversarial_b(est, eps)
    inst = build_instance(eps, choice.bits)
    gap = inst.optimal_value - _mixture_value(inst.mdp, tables, wts / wts.sum())
    return GapReport(gap, 0.0, choice.case, choice.bits, inst.gap_threshold, choice.flagged,
                     inst.optimal_value, np.array([gap]), est)


def evaluate_gap(algorithm: Algorithm, eps: float, n: int, trials: int, rng: np.random.Generator,
                 holdout_trials: int | None = None, mc_draws: int = 20_000) -> GapReport:
    """Estimate the output distribution, choose adversarial bits, then measure on fresh trials."""
    if math.sqrt(eps) <= 1 / math.sqrt(n):
        warnings.warn("sqrt(eps) <= 1/sqrt(n): outside the regime this construction targets")
    template = build_instance(eps)
    est_rng, hold_rng = rng.spawn(2)
    est = estimate_policy_distribution(algorithm, template, n, trials, est_rng, mc_draws)
    choice = adversarial_b(est, eps)
    inst = build_instance(eps, choice.bits)
    gaps = []
    for _ in range(holdout_trials or trials):
        _, tables, wts = _trial_profiles(algorithm, template, n, hold_rng, mc_draws)
        gaps.append(inst.optimal_value - _mixture_value(inst.mdp, tables, wts))
    gaps = np.array(gaps)
    se = float(gaps.std(ddof=1) / math.sqrt(len(gaps))) if len(gaps) > 1 else 0.0
    return GapReport(float(gaps.mean()), se, choice.case, choice.bits, inst.gap_threshold,
                     choice.flagged, inst.optimal_value, gaps, est)


# ---------------------------------------------------------------------------
# built-in algorithms: (dataset, template, rng) -> policy or policy list

def constant_reference(b_init: int = 0) -> Algorithm:
    def run(dataset, template, rng):
        bits = Bits(0, b_init, np.zeros((template.L, 2), dtype=int))
        return reference_policy(build_instance(template.eps, bits))
    return run


def uniform_algorithm(dataset, template, rng):
    m = template.mdp
    return Policy.uniform(m.H, m.S, m.A)


def naive_greedy_algorithm(dataset, template, rng):
    return naive_greedy_policy()


def actor_algorithm(**overrides) -> Algorithm:
    """Pessimistic actor-critic with the instance constants d = H = 2, B = sqrt 2, eps_be = 2 eps."""
    from .actor import ActorConfig, run_actor

    def run(dataset, template, rng):
        cfg = dict(eps_final=0.5, delta=0.1, n=dataset.n, d=2, H=2, B=math.sqrt(2.0),
                   eps_be=2 * template.eps, T_cap=200)
        cfg.update(overrides)
        result = run_actor(dataset, ActorConfig(**cfg), template.mdp.features,
                           template.t1, rng)
        return result.policies()
    return run


ALGORITHMS = {
    "constant-reference": constant_reference(0),
    "uniform": uniform_algorithm,
    "naive-greedy": naive_greedy_algorithm,
}


__all__ = [
    "C_PHI", "R_CONST", "Bits", "even_level_count", "LowerBoundInstance", "build_instance",
    "reference_policy", "naive_greedy_policy", "generate_lb_dataset", "BehaviorProfile",
    "behavior_profile", "PolicyDistributionEstimate", "aggregate_profiles",
    "estimate_policy_distribution", "BitChoice", "adversarial_b", "GapReport", "exact_gap",
    "evaluate_gap", "constant_reference", "uniform_algorithm", "naive_greedy_algorithm",
    "actor_algorithm", "ALGORITHMS",
]
