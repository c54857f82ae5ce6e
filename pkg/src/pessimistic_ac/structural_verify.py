"""Numerical checks of the structural facts behind perturbed linear policies.

* backups of linear functions under a perturbed linear next-step policy are
  (approximately) linear in the features;
* the gradient of the Gaussian-smoothed greedy backup is the expected
  next feature of the perturbed policy;
* Q-functions of perturbed linear policies are linear on complete instances;
* softmax policies break this closure on a small linear Bellman complete MDP.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np

from .mdp_core import (BoundedBallSpec, FeatureMDP, bellman_backup, exact_policy_value,
                       measure_inherent_bellman_error, probe_directions)
from .policies import PerturbedLinear, Policy, Softmax, StepRule, step_probabilities


def zeta_sigma(eps_be: float, d: int, sigma: float, const: float = 1.0) -> float:
    """C eps d^{3/2} (sqrt(d log(d / (eps sigma))) + 1/sigma); zero when eps = 0."""
    if eps_be == 0:
        return 0.0
    if sigma <= 0:
        return math.inf
    inner = max(math.log(d / (eps_be * sigma)), 0.0)
    return const * eps_be * d ** 1.5 * (math.sqrt(d * inner) + 1.0 / sigma)


def _exact_probabilities(rule: StepRule, step_features: np.ndarray) -> bool:
    """True when ``step_probabilities`` in auto mode returns exact values for this rule."""
    if not isinstance(rule, PerturbedLinear) or rule.sigma == 0 or step_features.shape[-1] <= 2:
        return True
    for feats in step_features:
        if len(np.unique(np.round(feats, 15), axis=0)) > 2:
            return False
    return True


def _active_pairs(mdp: FeatureMDP, h: int) -> tuple[np.ndarray, np.ndarray]:
    return np.nonzero(np.repeat(mdp.active[h - 1][:, None], mdp.A, axis=1))


@dataclass(frozen=True, eq=False)
class BackupFitReport:
    h: int
    probes: np.ndarray          # (K, d)
    coefficients: np.ndarray    # (K, d) least-squares coefficient per probe
    residuals: np.ndarray       # (K,) sup-norm residual per probe
    linear_map: np.ndarray      # (d, d) map fitted across probes: coef ~ offset + map @ w
    offset: np.ndarray          # (d,)
    map_residual: float         # sup-norm residual when every probe uses the fitted map
    zeta: float                 # per-unit-norm bound; nan when not checked (sigma = 0)
    slack: np.ndarray           # (K,) Monte-Carlo allowance per probe
    description: str

    @property
    def residual(self) -> float:
        return float(self.residuals.max(initial=0.0))

    @property
    def bounds(self) -> np.ndarray:
        return np.linalg.norm(self.probes, axis=1) * self.zeta

    @property
    def passed(self) -> bool | None:
        if math.isnan(self.zeta):
            return None
        return bool(np.all(self.residuals <= self.bounds + self.slack))


def fit_linear_backup(mdp: FeatureMDP, h: int, policy_next, w_probes, mc_budget: int = 100_000,
                      seed: int = 0, eps_be: float | None = None,
                      zeta_const: float = 1.0) -> BackupFitReport:
    """Least-squares fit of w -> r_h + E[<phi_{h+1}(x', pi_{h+1}(x')), w>] against phi_h.

    ``policy_next`` is the step-(h+1) rule or a full :class:`Policy`.  The fit
    ranges over every active (x, a) of step h.  ``eps_be`` defaults to the
    measured inherent Bellman error of ``mdp``.
    """
    if not 1 <= h <= mdp.H:
        raise ValueError(f"step {h} outside 1..{mdp.H}")
    rule = policy_next.steps[h] if isinstance(policy_next, Policy) else policy_next
    probes = np.atleast_2d(np.asarray(w_probes, dtype=float))
    rng = np.random.default_rng(seed)
    if h < mdp.H:
        next_probs = step_probabilities(rule, mdp.features[h], mc_draws=mc_budget, rng=rng)
        exact = _exact_probabilities(rule, mdp.features[h])
    else:
        next_probs, exact = None, True
    xs, as_ = _active_pairs(mdp, h)
    phi = mdp.features[h - 1, xs, as_]
    targets = np.stack([bellman_backup(mdp, h, next_probs, w)[xs, as_] for w in probes], axis=1)
    pinv = np.linalg.pinv(phi)
    coefs = (pinv @ targets).T
    residuals = np.abs(phi @ coefs.T - targets).max(axis=0)
    # affine map across probes: coef(w) = offset + map @ w
    design = np.hstack([np.ones((len(probes), 1)), probes])
    sol = np.linalg.pinv(design) @ coefs
    offset, lin = sol[0], sol[1:].T
    map_pred = phi @ (offset[:, None] + lin @ probes.T)
    map_residual = float(np.abs(map_pred - targets).max(initial=0.0))
    sigma = getattr(rule, "sigma", None)
    if sigma is None or sigma == 0:
        zeta = math.nan
    else:
        eb = measure_inherent_bellman_error(mdp) if eps_be is None else eps_be
        # the policy's sigma is a noise-to-weight ratio
        ratio = sigma / max(np.linalg.norm(rule.w), 1e-300)
        zeta = zeta_sigma(eb, mdp.d, ratio, zeta_const)
    feat_scale = float(np.linalg.norm(mdp.features, axis=-1).max(initial=0.0))
    norms = np.linalg.norm(probes, axis=1)
    slack = np.full(len(probes), 1e-9) if exact else 1e-9 + 4.0 * norms * feat_scale / math.sqrt(mc_budget)
    desc = f"{len(probes)} probes, {'exact' if exact else f'{mc_budget}-draw'} next-step probabilities"
    return BackupFitReport(h, probes, coefs, residuals, lin, offset, map_residual, zeta, slack, desc)


def smoothed_gradient_check(mdp: FeatureMDP, h: int, x: int, a: int, w, sigma: float,
                            fd_step: float = 1e-3, mc_budget: int = 200_000,
                            seed: int = 0) -> tuple[np.ndarray, np.ndarray, float]:
    """Finite-difference gradient of the smoothed greedy backup against the expected next feature.

    The left side differentiates w -> E_z E_x'[max_a' <phi_{h+1}(x',a'), w + z>]
    with common perturbations for the +/- shifts; the right side estimates
    E_x'[phi_{h+1}(x', pi_{h+1,w,sigma}(x'))] from an independent stream.
    """
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    w = np.asarray(w, dtype=float)
    d = mdp.d
    if h == mdp.H:
        zero = np.zeros(d)
        return zero, zero.copy(), 0.0
    trans = mdp.transitions[h - 1, x, a]
    support = np.flatnonzero(trans > 0)
    probs = trans[support]
    feats = mdp.features[h, support]  # (S', A, d)
    lhs_rng, rhs_rng = np.random.default_rng(seed).spawn(2)

    def smoothed(shift: np.ndarray, z: np.ndarray) -> float:
        scores = feats @ (shift[:, None] + z)  # (S', A, K)
        return float(probs @ scores.max(axis=1).mean(axis=1))

    lhs = np.zeros(d)
    rhs = np.zeros(d)
    chunk = 50_000
    done = 0
    while done < mc_budget:
        m = min(chunk, mc_budget - done)
        z = sigma * lhs_rng.standard_normal((d, m))
        for j in range(d):
            e = np.zeros(d)
            e[j] = fd_step
            lhs[j] += m * (smoothed(w + e, z) - smoothed(w - e, z)) / (2 * fd_step)
        theta = w[:, None] + sigma * rhs_rng.standard_normal((d, m))
        scores = feats @ theta  # (S', A, K)
        top = scores.max(axis=1, keepdims=True)
        choice = np.argmax(scores >= top - 1e-12 * np.maximum(1.0, np.abs(top)), axis=1)
        picked = np.take_along_axis(feats[:, :, None, :], choice[:, None, :, None], axis=1)[:, 0]
        rhs += probs @ picked.sum(axis=1)
        done += m
    lhs /= mc_budget
    rhs /= mc_budget
    scale = np.linalg.norm(rhs)
    gap = np.linalg.norm(lhs - rhs)
    rel = 0.0 if gap == 0 else float(gap / max(scale, 1e-300))
    return lhs, rhs, rel


@dataclass(frozen=True, eq=False)
class QLinearityReport:
    weights: np.ndarray     # (H, d) least-squares fit of Q_h on phi_h
    residuals: np.ndarray   # (H,) sup-norm residual per step over active pairs

    @property
    def residual(self) -> float:
        return float(self.residuals.max(initial=0.0))


def q_linearity_check(mdp: FeatureMDP, policy, mc_draws: int = 100_000, seed: int = 0) -> QLinearityReport:
    """How far the exact Q^pi is from a linear function of the features at each step."""
    Q = exact_policy_value(mdp, policy, mc_draws, seed).Q
    weights = np.zeros((mdp.H, mdp.d))
    residuals = np.zeros(mdp.H)
    for h in range(1, mdp.H + 1):
        xs, as_ = _active_pairs(mdp, h)
        phi = mdp.features[h - 1, xs, as_]
        q = Q[h - 1, xs, as_]
        weights[h - 1] = np.linalg.pinv(phi) @ q
        residuals[h - 1] = np.abs(phi @ weights[h - 1] - q).max(initial=0.0)
    return QLinearityReport(weights, residuals)


def counterexample_mdp() -> FeatureMDP:
    """Two steps, two states, three actions, one feature.

    Step 1 features are all 1; step 2 features are (1, 0, -1) at s1 and
    (1, 1, -1) at s2.  Every action keeps the state; all rewards are 0.
    """
    feats = np.zeros((2, 2, 3, 1))
    feats[0] = 1.0
    feats[1, 0, :, 0] = [1.0, 0.0, -1.0]
    feats[1, 1, :, 0] = [1.0, 1.0, -1.0]
    trans = np.zeros((2, 2, 3, 2))
    trans[:, 0, :, 0] = 1.0
    trans[:, 1, :, 1] = 1.0
    return FeatureMDP(feats, trans, np.zeros((2, 1)), initial_state=0, state_names=("s1", "s2"))


@dataclass(frozen=True)
class SoftmaxCounterexampleReport:
    inherent_error: float     # measured inherent Bellman error (expected 0)
    certificate_error: float  # max |max_a w phi_2(x,a) - |w|| over probes and both states
    value_s1: float           # <phi_2(s1, softmax(s1)), w> at w = 1, temperature 1
    value_s2: float
    gap: float
    backup_residual: float    # best least-squares fit residual of the softmax backup at step 1


def softmax_counterexample(temperature: float = 1.0, w: float = 1.0,
                           spec: BoundedBallSpec | None = None) -> SoftmaxCounterexampleReport:
    mdp = counterexample_mdp()
    ibe = measure_inherent_bellman_error(mdp, spec)
    probes = probe_directions(1, 64, seed=0)[:, 0] * np.linspace(0.1, 3.0, 66)
    best = mdp.features[1, :, :, 0][:, :, None] * probes  # (2, 3, K)
    cert = float(np.abs(best.max(axis=1) - np.abs(probes)).max())
    rule = Softmax(np.array([w]), temperature)
    probs = step_probabilities(rule, mdp.features[1])
    values = np.einsum("sa,sa->s", probs, mdp.features[1, :, :, 0]) * w
    fit = fit_linear_backup(mdp, 1, rule, [[w]])
    return SoftmaxCounterexampleReport(ibe, cert, float(values[0]), float(values[1]),
                                       float(abs(values[1] - values[0])), fit.residual)


@dataclass(frozen=True)
class CheckRow:
    name: str
    residual: float
    bound: float
    passed: bool


def write_report(rows, path, comment: str | None = None) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        if comment:
            fh.write(f"# {comment}\n")
        out = csv.writer(fh)
        out.writerow(["check", "residual", "bound", "pass"])
        for row in rows:
            out.writerow([row.name, repr(float(row.residual)), repr(float(row.bound)), int(row.passed)])


__all__ = [
    "zeta_sigma", "BackupFitReport", "fit_linear_backup", "smoothed_gradient_check",
    "QLinearityReport", "q_linearity_check", "counterexample_mdp", "SoftmaxCounterexampleReport",
    "softmax_counterexample", "CheckRow", "write_report",
]
