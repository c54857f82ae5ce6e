"""Policies over feature MDPs and the expected-feature estimator.

A :class:`Policy` holds one step rule per horizon step.  Perturbed linear rules
draw ``theta ~ N(w, sigma^2 I)`` and play the feature argmax, breaking ties by
the smallest action index; ``sigma == 0`` is the deterministic argmax.

Functions that only need the feature map accept either a ``FeatureMDP`` or a
raw ``(H, S, A, d)`` feature array.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence, Union

import numpy as np
from scipy.special import owens_t
from scipy.stats import norm

TIE_TOL = 1e-12


class UnsupportedPolicy(TypeError):
    """Operation is only defined for a different step-rule kind."""


class UnsupportedMode(ValueError):
    """Requested probability mode does not apply to this instance."""


@dataclass(frozen=True, eq=False)
class PerturbedLinear:
    w: np.ndarray
    sigma: float

    def __post_init__(self) -> None:
        object.__setattr__(self, "w", np.asarray(self.w, dtype=float).reshape(-1))
        if self.sigma < 0:
            raise ValueError("sigma must be nonnegative")


@dataclass(frozen=True, eq=False)
class Softmax:
    w: np.ndarray
    eta: float

    def __post_init__(self) -> None:
        object.__setattr__(self, "w", np.asarray(self.w, dtype=float).reshape(-1))
        if self.eta <= 0:
            raise ValueError("softmax eta must be positive")


@dataclass(frozen=True, eq=False)
class Tabular:
    probs: np.ndarray  # (S, A)

    def __post_init__(self) -> None:
        p = np.asarray(self.probs, dtype=float)
        if p.ndim != 2 or np.any(p < 0) or np.any(np.abs(p.sum(axis=1) - 1) > 1e-9):
            raise ValueError("tabular rows must be probability vectors")
        object.__setattr__(self, "probs", p)


StepRule = Union[PerturbedLinear, Softmax, Tabular]


def _features(source) -> np.ndarray:
    return source.features if hasattr(source, "features") else np.asarray(source, dtype=float)


@dataclass(frozen=True, eq=False)
class Policy:
    steps: tuple

    def __post_init__(self) -> None:
        object.__setattr__(self, "steps", tuple(self.steps))

    @property
    def H(self) -> int:
        return len(self.steps)

    @classmethod
    def perturbed_linear(cls, weights, sigma) -> "Policy":
        weights = np.atleast_2d(np.asarray(weights, dtype=float))
        sigmas = np.broadcast_to(np.asarray(sigma, dtype=float), (len(weights),))
        return cls(tuple(PerturbedLinear(w, float(s)) for w, s in zip(weights, sigmas)))

    @classmethod
    def softmax(cls, weights, eta: float) -> "Policy":
        weights = np.atleast_2d(np.asarray(weights, dtype=float))
        return cls(tuple(Softmax(w, eta) for w in weights))

    @classmethod
    def tabular(cls, probs) -> "Policy":
        return cls(tuple(Tabular(p) for p in np.asarray(probs, dtype=float)))

    @classmethod
    def uniform(cls, H: int, S: int, A: int) -> "Policy":
        return cls.tabular(np.full((H, S, A), 1.0 / A))

    def table(self, mdp, mc_draws: int = 100_000, seed: int = 0, mode: str = "auto") -> np.ndarray:
        """Action probabilities at every (h, x) as an (H, S, A) array."""
        feats = _features(mdp)
        if len(self.steps) != feats.shape[0]:
            raise ValueError(f"policy has {len(self.steps)} steps, MDP has {feats.shape[0]}")
        rng = np.random.default_rng(seed)
        return np.stack([step_probabilities(rule, feats[h], mode=mode, mc_draws=mc_draws, rng=rng)
                         for h, rule in enumerate(self.steps)])


# ---------------------------------------------------------------------------
# action groups: actions with identical features behave identically

class _GroupCache:
    """Per-state partition of actions into identical-feature groups.

    Keyed by the memory location of the step slice, so repeated views of one
    feature array hit the cache; a stored copy guards against reuse of memory.
    """

    def __init__(self) -> None:
        self._store: dict[tuple, tuple[np.ndarray, list]] = {}

    def get(self, step_features: np.ndarray) -> list:
        key = (step_features.__array_interface__["data"][0], step_features.shape,
               step_features.strides)
        hit = self._store.get(key)
        if hit is not None and np.array_equal(hit[0], step_features):
            return hit[1]
        groups = []
        for feats in step_features:
            _, first, inverse = np.unique(np.round(feats, 15), axis=0,
                                          return_index=True, return_inverse=True)
            order = np.argsort(first)
            reps = first[order]
            members = [np.flatnonzero(inverse.reshape(-1) == g) for g in order]
            groups.append((reps, members))
        if len(self._store) > 256:
            self._store.clear()
        self._store[key] = (step_features.copy(), groups)
        return groups


_GROUPS = _GroupCache()


def _argmax_smallest(scores: np.ndarray, axis: int) -> np.ndarray:
    """Argmax along ``axis`` treating near-equal scores as ties (smallest index wins)."""
    top = scores.max(axis=axis, keepdims=True)
    scale = np.maximum(1.0, np.abs(top))
    return np.argmax(scores >= top - TIE_TOL * scale, axis=axis)


def _two_group_prob(u: np.ndarray, v: np.ndarray, w: np.ndarray, sigma: float) -> float:
    """P(<u, theta> >= <v, theta>) for theta ~ N(w, sigma^2 I), u listed first."""
    diff = u - v
    return float(norm.cdf(diff @ w / (sigma * np.linalg.norm(diff))))


def _bivariate_lower(h: np.ndarray, k: np.ndarray, rho: np.ndarray, s: np.ndarray) -> np.ndarray:
    """P(Y1 <= h, Y2 <= k) for standard normals with correlation rho, s = sqrt(1 - rho^2) > 0.

    Owen's T representation; zero arguments are nudged to the right, which is
    exact in the limit because the CDF is continuous.
    """
    tiny = 1e-300
    h = np.where(h == 0, tiny, h)
    k = np.where(k == 0, tiny, k)
    out = 0.5 * (norm.cdf(h) + norm.cdf(k))
    with np.errstate(divide="ignore", over="ignore"):  # infinite slopes are valid Owen's T input
        out -= owens_t(h, (k - rho * h) / (h * s)) + owens_t(k, (h - rho * k) / (k * s))
    return out - 0.5 * (h * k < 0)


def _planar_probs(feats: np.ndarray, reps: np.ndarray, w: np.ndarray, sigma: float) -> np.ndarray:
    """Exact perturbed-argmax probabilities for two-dimensional features.

    The circle of directions is cut into arcs on which the argmax is constant;
    each arc is split into wedges no wider than a right angle and the Gaussian
    mass of a wedge is a bivariate normal orthant probability.
    """
    pts = feats[reps]
    R = len(pts)
    cuts = []
    for i in range(R):
        for j in range(i + 1, R):
            diff = pts[i] - pts[j]
            base = math.atan2(diff[1], diff[0])
            cuts += [base + math.pi / 2, base - math.pi / 2]
    cuts = np.unique(np.mod(cuts, 2 * math.pi))
    cuts = np.append(cuts, cuts[0] + 2 * math.pi)
    mids = 0.5 * (cuts[:-1] + cuts[1:])
    dirs = np.stack([np.cos(mids), np.sin(mids)], axis=1)
    owner = _argmax_smallest(dirs @ pts.T, axis=1)
    starts, ends, owners = [], [], []
    for a, b, o in zip(cuts[:-1], cuts[1:], owner):
        if b - a <= 1e-15:  # duplicate cut angles up to rounding; no mass
            continue
        pieces = max(1, math.ceil((b - a) / (math.pi / 2) - 1e-12))
        edges = np.linspace(a, b, pieces + 1)
        starts += list(edges[:-1])
        ends += list(edges[1:])
        owners += [o] * pieces
    a, b = np.array(starts), np.array(ends)
    m = np.asarray(w, dtype=float) / sigma
    h1 = -np.sin(a) * m[0] + np.cos(a) * m[1]
    h2 = np.sin(b) * m[0] - np.cos(b) * m[1]
    width = b - a
    mass = _bivariate_lower(h1, h2, -np.cos(width), np.sin(width))
    mass = np.clip(mass, 0.0, 1.0)
    probs = np.bincount(np.asarray(owners), weights=mass, minlength=R)
    probs /= probs.sum()
    out = np.zeros(feats.shape[0])
    out[reps] = probs
    return out


def _deterministic_probs(step_features: np.ndarray, w: np.ndarray) -> np.ndarray:
    S, A, _ = step_features.shape
    out = np.zeros((S, A))
    out[np.arange(S), _argmax_smallest(step_features @ w, axis=1)] = 1.0
    return out


def _closed_form_state(feats: np.ndarray, reps: np.ndarray, w: np.ndarray,
                       sigma: float) -> np.ndarray | None:
    A, d = feats.shape
    out = np.zeros(A)
    if len(reps) == 1:
        out[reps[0]] = 1.0
        return out
    if len(reps) == 2:
        p = _two_group_prob(feats[reps[0]], feats[reps[1]], w, sigma)
        out[reps[0]], out[reps[1]] = p, 1.0 - p
        return out
    if d == 1:
        vals = feats[:, 0]
        hi = int(np.argmax(vals >= vals.max() - TIE_TOL))
        lo = int(np.argmax(vals <= vals.min() + TIE_TOL))
        p = float(norm.cdf(w[0] / sigma))
        out[hi] += p
        out[lo] += 1.0 - p
        return out
    if d == 2:
        return _planar_probs(feats, reps, w, sigma)
    return None


def perturbed_probabilities(rule: PerturbedLinear, step_features: np.ndarray, mode: str = "auto",
                            mc_draws: int = 100_000, rng: np.random.Generator | None = None,
                            states: Sequence[int] | None = None) -> np.ndarray:
    """Action probabilities of a perturbed linear rule at the given states (all by default)."""
    idx = np.arange(step_features.shape[0]) if states is None else np.asarray(states, dtype=int)
    feats = step_features[idx]
    d = feats.shape[-1]
    if mode == "closed-form-1d" and d != 1:
        raise UnsupportedMode("closed-form-1d requires feature dimension 1")
    if rule.w.shape != (d,):
        raise ValueError(f"weight dimension {rule.w.shape} differs from feature dimension {d}")
    if rule.sigma == 0:
        return _deterministic_probs(feats, rule.w)
    out = np.zeros(feats.shape[:2])
    pending = []
    if mode in ("auto", "closed-form-1d"):
        groups = _GROUPS.get(step_features)
        for row, x in enumerate(idx):
            probs = _closed_form_state(feats[row], groups[x][0], rule.w, rule.sigma)
            if probs is None:
                pending.append(row)
            else:
                out[row] = probs
    elif mode == "mc":
        pending = list(range(len(idx)))
    else:
        raise UnsupportedMode(f"unknown probability mode {mode!r}")
    if pending:
        rng = rng if rng is not None else np.random.default_rng(0)
        theta = rule.w[:, None] + rule.sigma * rng.standard_normal((d, mc_draws))
        sub = feats[pending]
        choice = _argmax_smallest(sub @ theta, axis=1)  # (len(pending), K)
        A = feats.shape[1]
        for k, row in enumerate(pending):
            out[row] = np.bincount(choice[k], minlength=A) / mc_draws
    return out


def softmax_probabilities(rule: Softmax, step_features: np.ndarray) -> np.ndarray:
    logits = rule.eta * (step_features @ rule.w)
    logits -= logits.max(axis=1, keepdims=True)
    p = np.exp(logits)
    return p / p.sum(axis=1, keepdims=True)


def step_probabilities(rule: StepRule, step_features: np.ndarray, mode: str = "auto",
                       mc_draws: int = 100_000, rng: np.random.Generator | None = None) -> np.ndarray:
    if isinstance(rule, PerturbedLinear):
        return perturbed_probabilities(rule, step_features, mode, mc_draws, rng)
    if isinstance(rule, Softmax):
        return softmax_probabilities(rule, step_features)
    if isinstance(rule, Tabular):
        if rule.probs.shape != step_features.shape[:2]:
            raise ValueError("tabular rule shape does not match (S, A)")
        return rule.probs
    raise UnsupportedPolicy(f"unknown step rule {type(rule).__name__}")


def action_probabilities(policy: Policy, mdp, h: int, x: int, mode: str = "auto",
                         mc_draws: int = 100_000, rng: np.random.Generator | None = None) -> np.ndarray:
    """Action distribution of ``policy`` at state ``x`` of step ``h``."""
    feats = _features(mdp)[h - 1]
    rule = policy.steps[h - 1]
    if isinstance(rule, PerturbedLinear):
        return perturbed_probabilities(rule, feats, mode, mc_draws, rng, states=[x])[0]
    if mode == "closed-form-1d" and feats.shape[-1] != 1:
        raise UnsupportedMode("closed-form-1d requires feature dimension 1")
    return step_probabilities(rule, feats, mode, mc_draws, rng)[x]


def sample_action(policy: Policy, mdp, h: int, x: int, rng: np.random.Generator) -> int:
    """Draw one action of ``policy`` at state ``x`` of step ``h``."""
    feats = _features(mdp)[h - 1, x]
    rule = policy.steps[h - 1]
    if isinstance(rule, PerturbedLinear):
        theta = rule.w if rule.sigma == 0 else rule.w + rule.sigma * rng.standard_normal(rule.w.shape)
        return int(_argmax_smallest(feats @ theta, axis=0))
    probs = step_probabilities(rule, _features(mdp)[h - 1])[x]
    return int(rng.choice(len(probs), p=probs))


# ---------------------------------------------------------------------------
# expected-feature estimation

@dataclass(frozen=True, eq=False)
class FeatureEstimate:
    phi_hat: np.ndarray
    sample_count: int
    eps_apx: float
    delta: float


def sample_count(eps_apx: float, delta: float, d: int) -> int:
    """N = ceil(2 eps^-2 log(2d / delta))."""
    if not (0 < eps_apx and 0 < delta < 1):
        raise ValueError("need eps_apx > 0 and delta in (0, 1)")
    return int(math.ceil(2.0 / eps_apx ** 2 * math.log(2 * d / delta)))


def est_features(states: Sequence[int], policy: Policy, mdp, h: int, eps_apx: float, delta: float,
                 rng: np.random.Generator, chunk: int = 50_000) -> np.ndarray:
    """Empirical mean feature of N perturbed-argmax draws at each listed state of step h.

    Each row follows the same law as drawing N perturbations independently for
    that state.  Deterministic rules return the argmax feature; when the action
    probabilities have a closed form the winner counts are drawn from the
    exact multinomial law; the remaining states draw perturbations, shared
    across states.
    """
    rule = policy.steps[h - 1]
    if not isinstance(rule, PerturbedLinear):
        raise UnsupportedPolicy("est_feature requires a perturbed linear rule at this step")
    step_features = _features(mdp)[h - 1]
    states = np.asarray(states, dtype=int)
    d = step_features.shape[-1]
    N = sample_count(eps_apx, delta, d)
    out = np.zeros((len(states), d))
    if len(states) == 0:
        return out
    if rule.sigma == 0:
        probs = _deterministic_probs(step_features[states], rule.w)
        return np.einsum("sa,sad->sd", probs, step_features[states])
    groups = _GROUPS.get(step_features)
    heavy = []
    for row, x in enumerate(states):
        feats = step_features[x]
        probs = _closed_form_state(feats, groups[x][0], rule.w, rule.sigma)
        if probs is None:
            heavy.append(row)
        else:
            counts = rng.multinomial(N, probs / probs.sum())
            out[row] = counts @ feats / N
    if heavy:
        sub = step_features[states[heavy]]
        A = sub.shape[1]
        counts = np.zeros((len(heavy), A))
        done = 0
        while done < N:
            m = min(chunk, N - done)
            theta = rule.w[:, None] + rule.sigma * rng.standard_normal((d, m))
            choice = _argmax_smallest(sub @ theta, axis=1)
            for k in range(len(heavy)):
                counts[k] += np.bincount(choice[k], minlength=A)
            done += m
        out[heavy] = np.einsum("sa,sad->sd", counts / N, sub)
    return out


def est_feature(x: int, policy: Policy, mdp, h: int, eps_apx: float, delta: float,
                rng: np.random.Generator) -> FeatureEstimate:
    """Single-state estimate of phi_h(x, pi_h(x)) with the sample count of the guarantee."""
    d = _features(mdp).shape[-1]
    phi = est_features([x], policy, mdp, h, eps_apx, delta, rng)[0]
    return FeatureEstimate(phi, sample_count(eps_apx, delta, d), eps_apx, delta)


def gaussian_stability_check(eta: float, v) -> tuple[float, float]:
    """Exact TV(N(0, eta^2 I), N(v, eta^2 I)) and the bound ||v|| / (2 eta)."""
    if eta <= 0:
        raise ValueError("eta must be positive")
    dist = float(np.linalg.norm(np.asarray(v, dtype=float)))
    # 2 Phi(r) - 1 computed as erf(r / sqrt 2) to keep precision at small r
    tv = math.erf(dist / (2.0 * eta) / math.sqrt(2.0))
    bound = dist / (2.0 * eta)
    assert tv <= bound + 1e-15
    return tv, bound
