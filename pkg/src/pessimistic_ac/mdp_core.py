"""Finite-horizon feature MDPs: representation, exact evaluation, backups.

Steps are 1-based in every public signature (``h`` ranges over ``1..H``) and
0-based in array axes, so ``mdp.features[h - 1]`` holds the step-``h`` map.
Policy tables have shape ``(H, S, A)`` and hold action probabilities.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass, replace

import numpy as np

from .tolerances import TOL

TERMINAL = -1  # next-state marker for tuples that leave the horizon


class DimensionError(ValueError):
    """Array shapes disagree with the MDP they are used with."""


@dataclass(eq=False)
class FeatureMDP:
    """Finite-horizon MDP with per-step features and linear rewards.

    ``active[h-1, x]`` marks the states that exist at step ``h``.  Fits and
    error measurements only range over active states; inactive rows still carry
    valid (arbitrary) transitions so dynamic programming stays well defined.
    ``reward_table`` overrides the linear rewards, which is how induced MDPs
    are represented.
    """

    features: np.ndarray
    transitions: np.ndarray
    reward_coeffs: np.ndarray
    initial_state: int = 0
    reward_table: np.ndarray | None = None
    active: np.ndarray | None = None
    state_names: tuple[str, ...] | None = None

    def __post_init__(self) -> None:
        self.features = np.asarray(self.features, dtype=float)
        self.transitions = np.asarray(self.transitions, dtype=float)
        self.reward_coeffs = np.asarray(self.reward_coeffs, dtype=float)
        if self.features.ndim != 4:
            raise DimensionError("features must have shape (H, S, A, d)")
        H, S, A, d = self.features.shape
        if self.transitions.shape != (H, S, A, S):
            raise DimensionError(
                f"transitions shape {self.transitions.shape} != {(H, S, A, S)}")
        if self.reward_coeffs.shape != (H, d):
            raise DimensionError(
                f"reward_coeffs shape {self.reward_coeffs.shape} != {(H, d)}")
        if self.reward_table is not None:
            self.reward_table = np.asarray(self.reward_table, dtype=float)
            if self.reward_table.shape != (H, S, A):
                raise DimensionError("reward_table must have shape (H, S, A)")
        if self.active is None:
            self.active = np.ones((H, S), dtype=bool)
        else:
            self.active = np.asarray(self.active, dtype=bool)
            if self.active.shape != (H, S):
                raise DimensionError("active mask must have shape (H, S)")
        if not 0 <= self.initial_state < S:
            raise DimensionError(f"initial state {self.initial_state} out of range")
        if self.state_names is not None:
            self.state_names = tuple(str(n) for n in self.state_names)
        if self.state_names is not None and len(self.state_names) != S:
            raise DimensionError("state_names length differs from the state count")

    @property
    def H(self) -> int:
        return self.features.shape[0]

    @property
    def S(self) -> int:
        return self.features.shape[1]

    @property
    def A(self) -> int:
        return self.features.shape[2]

    @property
    def d(self) -> int:
        return self.features.shape[3]

    @property
    def rewards(self) -> np.ndarray:
        if self.reward_table is not None:
            return self.reward_table
        return np.einsum("hsad,hd->hsa", self.features, self.reward_coeffs)

    def state_index(self, name: str) -> int:
        if self.state_names is None:
            raise KeyError("this MDP has no state names")
        return self.state_names.index(name)

    def with_rewards(self, table: np.ndarray) -> "FeatureMDP":
        return replace(self, reward_table=np.array(table, dtype=float))


def invariant_violations(mdp: FeatureMDP) -> list[str]:
    """Human-readable list of violated model invariants (empty when valid)."""
    out = []
    P = mdp.transitions
    if np.any(P < 0):
        out.append("negative transition probability")
    sums = P.sum(axis=-1)
    bad = np.argwhere(np.abs(sums - 1.0) > TOL.prob_sum)
    if len(bad):
        h, x, a = bad[0]
        out.append(f"transition row (h={h + 1}, x={x}, a={a}) sums to {sums[h, x, a]!r}")
    fn = np.linalg.norm(mdp.features, axis=-1).max(initial=0.0)
    if fn > 1 + TOL.norm:
        out.append(f"feature norm {fn!r} exceeds 1")
    rn = np.linalg.norm(mdp.reward_coeffs, axis=-1)
    for h in np.flatnonzero(rn > 1 + TOL.norm):
        out.append(f"reward coefficient norm {rn[h]!r} at step {h + 1} exceeds 1")
    rmax = np.abs(mdp.rewards).max(initial=0.0)
    if rmax > 1 + TOL.norm:
        out.append(f"reward magnitude {rmax!r} exceeds 1")
    return out


@dataclass
class ValueTable:
    Q: np.ndarray  # (H, S, A)
    V: np.ndarray  # (H, S)
    initial_state: int = 0

    @property
    def value(self) -> float:
        """V_1(x_1)."""
        return float(self.V[0, self.initial_state])


def resolve_table(mdp: FeatureMDP, policy, mc_draws: int = 100_000, seed: int = 0) -> np.ndarray:
    """Turn a policy object (or an existing table) into an ``(H, S, A)`` array."""
    if hasattr(policy, "table"):
        table = policy.table(mdp, mc_draws=mc_draws, seed=seed)
    else:
        table = np.asarray(policy, dtype=float)
    if table.shape != (mdp.H, mdp.S, mdp.A):
        raise DimensionError(
            f"policy table shape {table.shape} does not match MDP {(mdp.H, mdp.S, mdp.A)}")
    sums = table.sum(axis=-1)
    bad = np.argwhere(np.abs(sums - 1.0) > 1e-9)
    if len(bad):
        raise DimensionError(f"policy probabilities at step {bad[0][0] + 1} do not sum to 1")
    return table


def exact_policy_value(mdp: FeatureMDP, policy, mc_draws: int = 100_000, seed: int = 0) -> ValueTable:
    """Backward induction for Q^pi and V^pi."""
    table = resolve_table(mdp, policy, mc_draws, seed)
    H, S, A = mdp.H, mdp.S, mdp.A
    r = mdp.rewards
    Q = np.zeros((H, S, A))
    V = np.zeros((H + 1, S))
    for h in range(H - 1, -1, -1):
        Q[h] = r[h] + mdp.transitions[h] @ V[h + 1]
        V[h] = np.einsum("sa,sa->s", table[h], Q[h])
    return ValueTable(Q=Q, V=V[:H], initial_state=mdp.initial_state)


def optimal_policy(mdp: FeatureMDP) -> tuple[np.ndarray, ValueTable]:
    """Deterministic DP-optimal policy table (ties to the smallest action) and its values."""
    H, S, A = mdp.H, mdp.S, mdp.A
    r = mdp.rewards
    table = np.zeros((H, S, A))
    V = np.zeros((H + 1, S))
    for h in range(H - 1, -1, -1):
        q = r[h] + mdp.transitions[h] @ V[h + 1]
        table[h, np.arange(S), np.argmax(q, axis=1)] = 1.0
        V[h] = q.max(axis=1)
    return table, exact_policy_value(mdp, table)


def expected_next_features(mdp: FeatureMDP, h: int, next_probs: np.ndarray) -> np.ndarray:
    """E_{x'}[phi_{h+1}(x', pi_{h+1}(x'))] for every (x, a) at step h; zero at h = H."""
    if h == mdp.H:
        return np.zeros((mdp.S, mdp.A, mdp.d))
    next_probs = np.asarray(next_probs, dtype=float)
    if next_probs.shape != (mdp.S, mdp.A):
        raise DimensionError(f"next-step policy at step {h + 1} must have shape (S, A)")
    mean_feat = np.einsum("sa,sad->sd", next_probs, mdp.features[h])
    return np.einsum("xay,yd->xad", mdp.transitions[h - 1], mean_feat)


def bellman_backup(mdp: FeatureMDP, h: int, next_probs: np.ndarray | None, w: np.ndarray) -> np.ndarray:
    """r_h(x,a) + sum_x' P_h(x'|x,a) <phi_{h+1}(x', pi_{h+1}(x')), w> as an (S, A) array."""
    if not 1 <= h <= mdp.H:
        raise DimensionError(f"step {h} outside 1..{mdp.H}")
    w = np.asarray(w, dtype=float)
    if w.shape != (mdp.d,):
        raise DimensionError(f"weight vector at step {h} must have dimension {mdp.d}")
    out = mdp.rewards[h - 1].copy()
    if h < mdp.H:
        out += expected_next_features(mdp, h, next_probs) @ w
    return out


def occupancy(mdp: FeatureMDP, policy, mc_draws: int = 100_000, seed: int = 0) -> np.ndarray:
    """Probabilities d_h(x, a) of visiting (x, a) at each step, shape (H, S, A)."""
    table = resolve_table(mdp, policy, mc_draws, seed)
    occ = np.zeros((mdp.H, mdp.S, mdp.A))
    state = np.zeros(mdp.S)
    state[mdp.initial_state] = 1.0
    for h in range(mdp.H):
        occ[h] = state[:, None] * table[h]
        state = np.einsum("sa,say->y", occ[h], mdp.transitions[h])
    return occ


def expected_features(mdp: FeatureMDP, policy, mc_draws: int = 100_000, seed: int = 0) -> np.ndarray:
    """E^pi[phi_h(x_h, a_h)] for every step, shape (H, d)."""
    occ = occupancy(mdp, policy, mc_draws, seed)
    return np.einsum("hsa,hsad->hd", occ, mdp.features)


def mixture_value(mdp: FeatureMDP, policies: list, weights=None,
                  mc_draws: int = 100_000, seed: int = 0) -> float:
    """Value of picking policy k with probability weights[k] and following it.

    Computed through the mixed occupancy measure, which is an independent route
    from averaging per-policy DP values.
    """
    k = len(policies)
    wts = np.full(k, 1.0 / k) if weights is None else np.asarray(weights, dtype=float)
    occ = sum(wt * occupancy(mdp, p, mc_draws, seed) for wt, p in zip(wts, policies))
    return float(np.sum(occ * mdp.rewards))


def performance_difference(mdp: FeatureMDP, policy, other, mc_draws: int = 100_000,
                           seed: int = 0) -> tuple[float, float]:
    """Both sides of V^pi - V^pi' = sum_h E^pi'[V_h^pi(x_h) - Q_h^pi(x_h, a_h)]."""
    vt = exact_policy_value(mdp, policy, mc_draws, seed)
    vo = exact_policy_value(mdp, other, mc_draws, seed)
    occ = occupancy(mdp, other, mc_draws, seed)
    rhs = float(np.sum(occ * (vt.V[:, :, None] - vt.Q)))
    return vt.value - vo.value, rhs


def induced_mdp(mdp: FeatureMDP, weights: np.ndarray, policy, mc_draws: int = 100_000,
                seed: int = 0) -> FeatureMDP:
    """Same dynamics, rewards rewritten so Q^pi_h = <phi_h, w_h> exactly."""
    table = resolve_table(mdp, policy, mc_draws, seed)
    weights = np.asarray(weights, dtype=float)
    if weights.shape != (mdp.H, mdp.d):
        raise DimensionError("induced MDP weights must have shape (H, d)")
    f = np.einsum("hsad,hd->hsa", mdp.features, weights)
    rewards = f.copy()
    for h in range(mdp.H - 1):
        v_next = np.einsum("sa,sa->s", table[h + 1], f[h + 1])
        rewards[h] -= mdp.transitions[h] @ v_next
    return mdp.with_rewards(rewards)


@dataclass(frozen=True)
class BoundedBallSpec:
    """Sampling recipe for sweeping the admissible weight sets."""
    radius_inner: float = 1.0
    bound_B: float = 1.0
    sampling_count: int = 256
    seed: int = 0
    fit_scale: float = 2.0  # fitted predictions are rescaled into fit_scale * B_h

    def __post_init__(self) -> None:
        if self.radius_inner > self.bound_B:
            raise ValueError("radius_inner must not exceed bound_B")
        if self.sampling_count < 1:
            raise ValueError("sampling_count must be positive")


def probe_directions(d: int, count: int, seed: int = 0) -> np.ndarray:
    """Signed basis vectors followed by ``count`` uniform unit-sphere samples.

    A smaller ``count`` with the same seed yields a prefix of the larger set.
    """
    rng = np.random.default_rng(seed)
    basis = np.concatenate([np.eye(d), -np.eye(d)])
    sphere = rng.standard_normal((count, d))
    sphere /= np.linalg.norm(sphere, axis=1, keepdims=True)
    return np.concatenate([basis, sphere])


def _distinct_pairs(mdp: FeatureMDP, h: int) -> tuple[np.ndarray, np.ndarray]:
    """Active (x, a) pairs at step h with duplicate (feature, transition, reward) rows dropped."""
    xs, as_ = np.nonzero(np.repeat(mdp.active[h - 1][:, None], mdp.A, axis=1))
    rows = np.concatenate([mdp.features[h - 1, xs, as_],
                           mdp.transitions[h - 1, xs, as_],
                           mdp.rewards[h - 1, xs, as_][:, None]], axis=1)
    _, keep = np.unique(np.round(rows, 14), axis=0, return_index=True)
    keep.sort()
    return xs[keep], as_[keep]


def backup_residuals(mdp: FeatureMDP, h: int, thetas: np.ndarray, fit_scale: float = 2.0) -> np.ndarray:
    """Sup-norm residual of the best least-squares linear fit of the greedy backup.

    For every probe theta (rows of ``thetas``) the target is
    r_h(x,a) + E_{x'}[max_a' <phi_{h+1}(x',a'), theta>] over the distinct active
    pairs of step h.  The minimum-norm least-squares coefficient is scaled down
    whenever its predictions leave [-fit_scale, fit_scale].
    """
    xs, as_ = _distinct_pairs(mdp, h)
    if len(xs) == 0:
        return np.zeros(len(thetas))
    phi = mdp.features[h - 1, xs, as_]
    target = np.repeat(mdp.rewards[h - 1, xs, as_][:, None], len(thetas), axis=1)
    if h < mdp.H:
        best_next = (mdp.features[h] @ thetas.T).max(axis=1)  # (S, K)
        target = target + mdp.transitions[h - 1, xs, as_] @ best_next
    coef = np.linalg.pinv(phi) @ target
    pred = phi @ coef
    peak = np.abs(pred).max(axis=0)
    shrink = np.where(peak > fit_scale, fit_scale / np.maximum(peak, 1e-300), 1.0)
    return np.abs(pred * shrink - target).max(axis=0)


def measure_inherent_bellman_error(mdp: FeatureMDP, spec: BoundedBallSpec | None = None) -> float:
    """Estimated inherent Bellman error (twice the worst sup-norm fit residual)."""
    spec = spec or BoundedBallSpec()
    thetas = spec.radius_inner * probe_directions(mdp.d, spec.sampling_count, spec.seed)
    worst = 0.0
    for h in range(1, mdp.H + 1):
        worst = max(worst, float(backup_residuals(mdp, h, thetas, spec.fit_scale).max()))
    return 2.0 * worst


def boundedness_constant(mdp: FeatureMDP, max_vertices: int = 200_000) -> float:
    """max_h max { ||w|| : |<phi_h(x,a), w>| <= 1 for all active (x,a) }.

    Found by enumerating vertices of each polytope; infinite when the active
    features do not span R^d.
    """
    d = mdp.d
    best = 0.0
    for h in range(1, mdp.H + 1):
        xs, as_ = np.nonzero(np.repeat(mdp.active[h - 1][:, None], mdp.A, axis=1))
        phi = np.unique(np.round(mdp.features[h - 1, xs, as_], 14), axis=0)
        phi = phi[np.linalg.norm(phi, axis=1) > 0]
        # +phi and -phi give the same slab
        canon = np.array([p if p[np.flatnonzero(p)[0]] > 0 else -p for p in phi])
        phi = np.unique(canon, axis=0)
        if len(phi) == 0 or np.linalg.matrix_rank(phi) < d:
            return float("inf")
        count = 0
        for rows in itertools.combinations(range(len(phi)), d):
            M = phi[list(rows)]
            if abs(np.linalg.det(M)) < 1e-12:
                continue
            for signs in itertools.product((-1.0, 1.0), repeat=d):
                count += 1
                if count > max_vertices:
                    raise ValueError("too many candidate vertices; supply B explicitly")
                w = np.linalg.solve(M, np.array(signs))
                if np.all(np.abs(phi @ w) <= 1 + 1e-9):
                    best = max(best, float(np.linalg.norm(w)))
    return best


__all__ = [
    "TERMINAL", "DimensionError", "FeatureMDP", "ValueTable", "BoundedBallSpec",
    "invariant_violations", "resolve_table", "exact_policy_value", "optimal_policy",
    "expected_next_features",
    "bellman_backup", "occupancy", "expected_features", "mixture_value",
    "performance_difference", "induced_mdp", "probe_directions", "backup_residuals",
    "measure_inherent_bellman_error", "boundedness_constant",
]
