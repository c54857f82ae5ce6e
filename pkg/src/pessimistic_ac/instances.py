"""Instance builders: random feature MDPs and the shipped linear-MDP benchmarks."""
from __future__ import annotations

import math

import numpy as np

from .mdp_core import FeatureMDP


def random_feature_mdp(rng: np.random.Generator, S: int = 5, A: int = 3, H: int = 3,
                       d: int = 2) -> FeatureMDP:
    """Features inside the unit ball, Dirichlet transitions, unit-ball reward coefficients."""
    feats = rng.standard_normal((H, S, A, d))
    feats *= (rng.uniform(0.2, 1.0, (H, S, A, 1)) / np.linalg.norm(feats, axis=-1, keepdims=True))
    trans = rng.dirichlet(np.ones(S), size=(H, S, A))
    theta = rng.standard_normal((H, d))
    theta *= rng.uniform(0.2, 1.0, (H, 1)) / np.linalg.norm(theta, axis=-1, keepdims=True)
    return FeatureMDP(feats, trans, theta, initial_state=0)


def linear_mdp(features: np.ndarray, next_measures: np.ndarray, reward_coeffs: np.ndarray,
               initial_state: int = 0, state_names=None, active=None) -> FeatureMDP:
    """Linear MDP: P_h(.|x,a) = sum_k phi_h(x,a)_k mu_{h,k}(.).

    ``features`` must lie on the probability simplex coordinatewise and
    ``next_measures`` has shape (H, d, S) with distributions as rows.  Greedy
    backups of linear functions are then exactly linear, so the inherent
    Bellman error is zero.
    """
    features = np.asarray(features, dtype=float)
    mu = np.asarray(next_measures, dtype=float)
    trans = np.einsum("hsad,hdy->hsay", features, mu)
    return FeatureMDP(features, trans, reward_coeffs, initial_state=initial_state,
                      state_names=state_names, active=active)


# Shipped benchmark: two steps, two actions, vertex features.  Action 1 at the
# start state is better by 0.25 but the data mostly follow action 0, so a
# pessimistic learner needs more samples before it trusts action 1.
BENCH_FRACTIONS = ((1, 0, 0, 0.40), (1, 0, 1, 0.10),
                   (2, 1, 0, 0.25), (2, 1, 1, 0.05), (2, 2, 0, 0.10), (2, 2, 1, 0.10))


def benchmark_linear_mdp() -> FeatureMDP:
    """States start, left, right; step-2 rewards 0.25 on the first axis and 0.75 on the second."""
    e1, e2 = np.array([1.0, 0.0]), np.array([0.0, 1.0])
    feats = np.zeros((2, 3, 2, 2))
    feats[0, :, 0], feats[0, :, 1] = e1, e2
    feats[1, 0] = e1
    feats[1, 1, 0], feats[1, 1, 1] = e1, 0.5 * (e1 + e2)
    feats[1, 2, 0], feats[1, 2, 1] = e1, e2
    mu = np.zeros((2, 2, 3))
    mu[0, 0, 1] = mu[0, 1, 2] = 1.0
    mu[1, :, 0] = 1.0
    theta = np.array([[0.0, 0.0], [0.0, 1.0]])
    return linear_mdp(feats, mu, theta, initial_state=0, state_names=["start", "left", "right"])


def benchmark_plan(n: int) -> list[tuple[int, int, int, int]]:
    """Fixed design with ``n`` tuples split by BENCH_FRACTIONS; rounding remainder goes to the first cell."""
    counts = [int(math.floor(f * n)) for *_, f in BENCH_FRACTIONS]
    counts[0] += n - sum(counts)
    return [(h, x, a, c) for (h, x, a, _), c in zip(BENCH_FRACTIONS, counts)]
