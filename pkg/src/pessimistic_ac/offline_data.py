"""Offline datasets, per-step feature covariances and single-policy coverage."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .mdp_core import TERMINAL, FeatureMDP, expected_features
from .policies import Policy, sample_action


class CoverageError(ValueError):
    """The comparator's mean feature leaves the span of the data features."""


@dataclass(eq=False)
class OfflineDataset:
    """Tuples (h, x, a, r, x') stored column-wise; ``x' = TERMINAL`` past the horizon."""

    steps: np.ndarray
    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    next_states: np.ndarray

    def __post_init__(self) -> None:
        self.steps = np.asarray(self.steps, dtype=int).reshape(-1)
        self.states = np.asarray(self.states, dtype=int).reshape(-1)
        self.actions = np.asarray(self.actions, dtype=int).reshape(-1)
        self.rewards = np.asarray(self.rewards, dtype=float).reshape(-1)
        self.next_states = np.asarray(self.next_states, dtype=int).reshape(-1)
        n = len(self.steps)
        if not all(len(c) == n for c in (self.states, self.actions, self.rewards, self.next_states)):
            raise ValueError("dataset columns have different lengths")

    @property
    def n(self) -> int:
        return len(self.steps)

    def __len__(self) -> int:
        return self.n

    def at_step(self, h: int) -> np.ndarray:
        """Indices I_h of tuples recorded at step h."""
        return np.flatnonzero(self.steps == h)

    def features(self, source) -> np.ndarray:
        """phi_{h_i}(x_i, a_i) for every tuple, shape (n, d)."""
        feats = source.features if hasattr(source, "features") else np.asarray(source)
        return feats[self.steps - 1, self.states, self.actions]

    def take(self, idx: Sequence[int]) -> "OfflineDataset":
        idx = np.asarray(idx, dtype=int)
        return OfflineDataset(self.steps[idx], self.states[idx], self.actions[idx],
                              self.rewards[idx], self.next_states[idx])

    @classmethod
    def concat(cls, parts: Iterable["OfflineDataset"]) -> "OfflineDataset":
        parts = list(parts)
        if not parts:
            return cls.empty()
        cols = zip(*[(p.steps, p.states, p.actions, p.rewards, p.next_states) for p in parts])
        return cls(*[np.concatenate(c) for c in cols])

    @classmethod
    def empty(cls) -> "OfflineDataset":
        return cls(np.zeros(0, int), np.zeros(0, int), np.zeros(0, int), np.zeros(0), np.zeros(0, int))


@dataclass(frozen=True)
class RolloutPlan:
    """Behavior-policy trajectories; each episode contributes H tuples."""
    policy: Policy
    episodes: int


def _next_state(mdp: FeatureMDP, h: int, x: int, a: int, rng: np.random.Generator) -> int:
    if h == mdp.H:
        return TERMINAL
    return int(rng.choice(mdp.S, p=mdp.transitions[h - 1, x, a]))


def generate_dataset(mdp: FeatureMDP, plan, rng: np.random.Generator) -> OfflineDataset:
    """Sample a dataset from a fixed design ``[(h, x, a, count), ...]`` or a :class:`RolloutPlan`."""
    if isinstance(plan, RolloutPlan):
        return _rollouts(mdp, plan, rng)
    plan = list(plan)
    if not plan:
        raise ValueError("empty data-collection plan")
    cols: list[list] = [[], [], [], [], []]
    rewards = mdp.rewards
    for h, x, a, count in plan:
        if not (1 <= h <= mdp.H and 0 <= x < mdp.S and 0 <= a < mdp.A) or count < 0:
            raise ValueError(f"invalid plan entry {(h, x, a, count)}")
        if count == 0:
            continue
        if h == mdp.H:
            nxt = np.full(count, TERMINAL)
        else:
            nxt = rng.choice(mdp.S, size=count, p=mdp.transitions[h - 1, x, a])
        cols[0].append(np.full(count, h))
        cols[1].append(np.full(count, x))
        cols[2].append(np.full(count, a))
        cols[3].append(np.full(count, rewards[h - 1, x, a]))
        cols[4].append(nxt)
    if not cols[0]:
        return OfflineDataset.empty()
    return OfflineDataset(*[np.concatenate(c) for c in cols])


def _rollouts(mdp: FeatureMDP, plan: RolloutPlan, rng: np.random.Generator) -> OfflineDataset:
    if plan.episodes <= 0:
        raise ValueError("rollout plan needs at least one episode")
    rows = []
    rewards = mdp.rewards
    for _ in range(plan.episodes):
        x = mdp.initial_state
        for h in range(1, mdp.H + 1):
            a = sample_action(plan.policy, mdp, h, x, rng)
            nxt = _next_state(mdp, h, x, a, rng)
            rows.append((h, x, a, rewards[h - 1, x, a], nxt))
            x = nxt
    return OfflineDataset(*map(np.array, zip(*rows)))


@dataclass(eq=False)
class CovarianceSummary:
    h: int
    sigma: np.ndarray
    lam: float
    indices: np.ndarray


def covariance(dataset: OfflineDataset, h: int, lam: float, mdp) -> CovarianceSummary:
    """Sigma_h = lam I + sum_{i in I_h} phi_i phi_i^T."""
    if lam < 0:
        raise ValueError("lambda must be nonnegative")
    idx = dataset.at_step(h)
    feats = mdp.features if hasattr(mdp, "features") else np.asarray(mdp)
    phi = feats[h - 1, dataset.states[idx], dataset.actions[idx]]
    sigma = lam * np.eye(feats.shape[-1]) + phi.T @ phi
    return CovarianceSummary(h=h, sigma=sigma, lam=lam, indices=idx)


def coverage_parameter(dataset: OfflineDataset, policy, mdp: FeatureMDP, lam: float = 0.0,
                       mc_draws: int = 100_000, seed: int = 0) -> float:
    """sum_h || E^pi[phi_h] ||_{n Sigma_h^{-1}}; pseudo-inverse when lam = 0."""
    mean_feats = expected_features(mdp, policy, mc_draws, seed)
    total = 0.0
    for h in range(1, mdp.H + 1):
        v = mean_feats[h - 1]
        sigma = covariance(dataset, h, lam, mdp).sigma
        if lam > 0:
            quad = v @ np.linalg.solve(sigma, v)
        else:
            pinv = np.linalg.pinv(sigma, hermitian=True)
            outside = v - sigma @ (pinv @ v)
            if np.linalg.norm(outside) > 1e-9 * max(1.0, np.linalg.norm(v)):
                raise CoverageError(f"mean feature at step {h} is outside the span of the data")
            quad = v @ pinv @ v
        total += float(np.sqrt(max(dataset.n * quad, 0.0)))
    return total
