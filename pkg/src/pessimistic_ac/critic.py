"""Pessimistic critic: empirical Bellman operator and its convex program.

Given a perturbed linear policy, the critic finds per-step weights ``w_h``
minimizing the estimated initial value <w_1, phi_1(x_1, pi_1(x_1))> subject to

    || w_h - That_h w_{h+1} ||_{Sigma_h} <= alpha,   || w_h ||_2 <= beta,

with ``That_h w = Sigma_h^{-1} sum_{i in I_h} phi_i (r_i + <phihat_i, w>)``.
The slack ``xi_h = w_h - That_h w_{h+1}`` is eliminated, leaving 2H convex
quadratic constraints on the stacked weights, solved by a log-barrier
interior-point method with Newton centering.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from .mdp_core import TERMINAL
from .offline_data import OfflineDataset
from .policies import Policy, est_features
from .tolerances import TOL


class InfeasibleProgram(RuntimeError):
    """No weights satisfy the critic constraints."""

    def __init__(self, message: str, best_residual: float):
        super().__init__(f"{message} (best normalized violation {best_residual:.3e})")
        self.best_residual = best_residual


@dataclass(eq=False)
class CriticProblem:
    dataset: OfflineDataset
    features: np.ndarray          # (H, S, A, d)
    initial_state: int
    eps_apx: float
    alpha: float
    beta: float
    delta: float
    lam: float
    phi_hat: np.ndarray           # (n, d) estimated next-step features, zero past the horizon
    objective_feature: np.ndarray  # (d,) estimate of phi_1(x_1, pi_1(x_1))
    sigmas: np.ndarray = field(init=False)     # (H, d, d)
    offsets: np.ndarray = field(init=False)    # (H, d)   Sigma^{-1} sum phi r
    couplings: np.ndarray = field(init=False)  # (H, d, d) Sigma^{-1} sum phi phihat^T

    def __post_init__(self) -> None:
        if self.alpha < 0 or self.beta <= 0:
            raise ValueError("need alpha >= 0 and beta > 0")
        if self.lam <= 0:
            raise ValueError("the critic needs lambda > 0")
        H, _, _, d = self.features.shape
        self.sigmas = np.zeros((H, d, d))
        self.offsets = np.zeros((H, d))
        self.couplings = np.zeros((H, d, d))
        data = self.dataset
        phi = data.features(self.features)
        for h in range(1, H + 1):
            idx = data.at_step(h)
            sigma = self.lam * np.eye(d) + phi[idx].T @ phi[idx]
            self.sigmas[h - 1] = sigma
            self.offsets[h - 1] = np.linalg.solve(sigma, phi[idx].T @ data.rewards[idx])
            self.couplings[h - 1] = np.linalg.solve(sigma, phi[idx].T @ self.phi_hat[idx])

    @property
    def H(self) -> int:
        return self.features.shape[0]

    @property
    def d(self) -> int:
        return self.features.shape[3]


def estimate_next_features(dataset: OfflineDataset, features: np.ndarray, policy: Policy,
                           eps_apx: float, delta: float, rng: np.random.Generator) -> np.ndarray:
    """phihat_i for every tuple (zero when the next state is past the horizon).

    One estimate is drawn per distinct (step, next state) and shared by the
    tuples that land there; the per-tuple accuracy guarantee is unchanged
    because the union bound over tuples does not need independence.
    """
    H = features.shape[0]
    out = np.zeros((dataset.n, features.shape[3]))
    for h in range(1, H):
        idx = dataset.at_step(h)
        idx = idx[dataset.next_states[idx] != TERMINAL]
        if len(idx) == 0:
            continue
        uniq, inverse = np.unique(dataset.next_states[idx], return_inverse=True)
        est = est_features(uniq, policy, features, h + 1, eps_apx, delta, rng)
        out[idx] = est[inverse]
    return out


def build_critic_problem(dataset: OfflineDataset, features, initial_state: int, policy: Policy,
                         eps_apx: float, alpha: float, beta: float, delta: float,
                         rng: np.random.Generator, lam: float = 1.0) -> CriticProblem:
    """Estimate all features the program needs and assemble it.

    Each estimate uses failure probability delta / n, as does the estimate of
    the objective feature at the initial state.
    """
    feats = features.features if hasattr(features, "features") else np.asarray(features, dtype=float)
    per_est = delta / max(dataset.n, 1)
    phi_hat = estimate_next_features(dataset, feats, policy, eps_apx, per_est, rng)
    objective = est_features([initial_state], policy, feats, 1, eps_apx, per_est, rng)[0]
    return CriticProblem(dataset, feats, initial_state, eps_apx, alpha, beta, delta, lam,
                         phi_hat, objective)


def empirical_bellman(dataset: OfflineDataset, h: int, w_next, phi_hat: np.ndarray, lam: float,
                      features) -> np.ndarray:
    """Sigma_h^{-1} sum_{i in I_h} phi_i (r_i + <phihat_i, w_next>), computed tuple by tuple."""
    if lam <= 0:
        raise ValueError("lambda must be positive")
    feats = features.features if hasattr(features, "features") else np.asarray(features)
    d = feats.shape[-1]
    idx = dataset.at_step(h)
    sigma = lam * np.eye(d)
    rhs = np.zeros(d)
    w_next = np.asarray(w_next, dtype=float)
    for i in idx:
        phi = feats[h - 1, dataset.states[i], dataset.actions[i]]
        sigma += np.outer(phi, phi)
        rhs += phi * (dataset.rewards[i] + phi_hat[i] @ w_next)
    return np.linalg.solve(sigma, rhs)


@dataclass(eq=False)
class CriticSolution:
    w: np.ndarray                    # (H, d)
    xi: np.ndarray                   # (H, d)
    objective: float
    constraint_residuals: np.ndarray  # (H,) max(||xi_h||_Sigma - alpha, ||w_h|| - beta)
    iterations: int = 0
    trace: list = field(default_factory=list)


@dataclass(frozen=True)
class SolverSettings:
    eps_solve: float = TOL.solve
    max_iterations: int = 20_000   # Newton steps across all centering rounds
    growth: float = 10.0           # barrier parameter multiplier per round
    centering_tol: float = 1e-10   # Newton decrement^2 / 2 that ends a round
    record_trace: bool = False


class _Quadratics:
    """Constraints z^T P_j z + 2 q_j^T z + r_j <= 1 over the stacked weights z."""

    def __init__(self, problem: CriticProblem):
        H, d = problem.H, problem.d
        D = H * d
        m = 2 * H
        self.H, self.d, self.D = H, d, D
        self.P = np.zeros((m, D, D))
        self.q = np.zeros((m, D))
        self.r = np.zeros(m)
        self.A = np.zeros((H, d, D))
        a2 = problem.alpha ** 2
        for h in range(H):
            Ah = self.A[h]
            Ah[:, h * d:(h + 1) * d] = np.eye(d)
            if h + 1 < H:
                Ah[:, (h + 1) * d:(h + 2) * d] = -problem.couplings[h]
            S, c = problem.sigmas[h], problem.offsets[h]
            self.P[h] = Ah.T @ S @ Ah / a2
            self.q[h] = -(Ah.T @ S @ c) / a2
            self.r[h] = c @ S @ c / a2
            self.P[H + h, h * d:(h + 1) * d, h * d:(h + 1) * d] = np.eye(d) / problem.beta ** 2
        self.offsets = problem.offsets
        self.sigmas = problem.sigmas
        self.alpha, self.beta = problem.alpha, problem.beta

    def values(self, z: np.ndarray) -> np.ndarray:
        Pz = self.P @ z
        return Pz @ z + 2 * self.q @ z + self.r

    def values_grads(self, z: np.ndarray):
        Pz = self.P @ z
        return Pz @ z + 2 * self.q @ z + self.r, 2 * (Pz + self.q)

    def residuals(self, z: np.ndarray) -> np.ndarray:
        """max(||xi_h||_Sigma - alpha, ||w_h|| - beta) per step."""
        vals = np.maximum(self.values(z), 0.0)
        H = self.H
        return np.maximum(self.alpha * np.sqrt(vals[:H]) - self.alpha,
                          self.beta * np.sqrt(vals[H:]) - self.beta)

    def chain(self) -> np.ndarray:
        """Weights with every slack zero: w_H = c_H, w_h = c_h + K_h w_{h+1}."""
        H, d = self.H, self.d
        z = np.zeros(self.D)
        for h in range(H - 1, -1, -1):
            coupled = -self.A[h][:, (h + 1) * d:(h + 2) * d] @ z[(h + 1) * d:(h + 2) * d] if h + 1 < H else 0.0
            z[h * d:(h + 1) * d] = self.offsets[h] + coupled
        return z


def _newton_center(quads: _Quadratics, z: np.ndarray, lin: np.ndarray, t: float,
                   settings: SolverSettings, budget: list, trace: list | None,
                   objective: np.ndarray) -> np.ndarray:
    """Minimize t <lin, z> - sum log(1 - g_j(z)) from a strictly feasible z."""
    D = len(z)
    ridge = 1e-14 * np.eye(D)
    while budget[0] > 0:
        budget[0] -= 1
        vals, grads = quads.values_grads(z)
        slack = 1.0 - vals
        inv = 1.0 / slack
        g = t * lin + grads.T @ inv
        hess = np.einsum("j,jab->ab", 2 * inv, quads.P) + (grads.T * inv ** 2) @ grads + ridge
        try:
            step = -np.linalg.solve(hess, g)
        except np.linalg.LinAlgError:
            step = -np.linalg.lstsq(hess, g, rcond=None)[0]
        dec = -(g @ step)
        if trace is not None:
            trace.append((len(trace) + 1, float(objective @ z), float(quads.residuals(z).max())))
        if dec / 2 <= settings.centering_tol:
            break
        f0 = t * (lin @ z) - np.sum(np.log(slack))
        # largest step keeping every quadratic below 1, then backtrack from there
        quad = np.einsum("a,jab,b->j", step, quads.P, step)
        lin_rate = grads @ step
        disc = np.sqrt(lin_rate ** 2 + 4 * quad * slack)
        with np.errstate(divide="ignore", invalid="ignore"):
            roots = np.where(quad > 0, 2 * slack / (lin_rate + disc),
                             np.where(lin_rate > 0, slack / lin_rate, np.inf))
        s = min(1.0, 0.99 * float(roots.min()))
        while True:
            cand = z + s * step
            cv = quads.values(cand)
            if np.all(cv < 1.0):
                f1 = t * (lin @ cand) - np.sum(np.log1p(-cv))
                if f1 <= f0 - 0.25 * s * dec:
                    break
            s *= 0.5
            if s < 1e-16:
                return z
        z = cand
    return z


class _PhaseOne(_Quadratics):
    """Same constraints with an extra variable s: g_j(z) - s <= 1, minimize s."""

    def __init__(self, base: _Quadratics):
        self.__dict__.update(base.__dict__)
        m, D = base.P.shape[0], base.D
        self.P = np.zeros((m, D + 1, D + 1))
        self.P[:, :D, :D] = base.P
        self.q = np.zeros((m, D + 1))
        self.q[:, :D] = base.q
        self.q[:, D] = -0.5
        self.r = base.r.copy()
        self.D = D + 1


def _strictly_feasible(quads: _Quadratics, settings: SolverSettings, budget: list) -> np.ndarray:
    candidates = [np.zeros(quads.D), quads.chain()]
    for z in candidates:
        if quads.values(z).max() < 1.0 - 1e-9:
            return z
    # phase one: minimize the worst normalized violation
    ph = _PhaseOne(quads)
    z0 = candidates[1]
    s0 = float(quads.values(z0).max()) - 1.0 + 1.0
    y = np.append(z0, s0)
    lin = np.zeros(ph.D)
    lin[-1] = 1.0
    m = ph.P.shape[0]
    t = 1.0
    while True:
        y = _newton_center(ph, y, lin, t, settings, budget, None, lin)
        worst = float(quads.values(y[:-1]).max()) - 1.0
        if worst < -1e-6 or (worst < 0 and m / t < 1e-9):
            return y[:-1]
        if m / t < 1e-12 or budget[0] <= 0:
            raise InfeasibleProgram("critic program has no strictly feasible point", worst)
        t *= settings.growth


def _finish(problem: CriticProblem, quads: _Quadratics, z: np.ndarray, iterations: int,
            trace: list) -> CriticSolution:
    H, d = problem.H, problem.d
    w = z.reshape(H, d).copy()
    xi = np.stack([w[h] - problem.offsets[h] - (problem.couplings[h] @ w[h + 1] if h + 1 < H else 0.0)
                   for h in range(H)])
    return CriticSolution(w=w, xi=xi, objective=float(problem.objective_feature @ w[0]),
                          constraint_residuals=quads.residuals(z), iterations=iterations,
                          trace=trace)


def solve_critic(problem: CriticProblem, settings: SolverSettings | None = None) -> CriticSolution:
    """Solve the critic program to objective accuracy ``settings.eps_solve``."""
    settings = settings or SolverSettings()
    H, d = problem.H, problem.d
    trace: list = [] if settings.record_trace else None
    if problem.alpha == 0:
        # slack forced to zero: the weights are the backward ridge chain
        z = np.zeros(H * d)
        for h in range(H - 1, -1, -1):
            nxt = problem.couplings[h] @ z[(h + 1) * d:(h + 2) * d] if h + 1 < H else 0.0
            z[h * d:(h + 1) * d] = problem.offsets[h] + nxt
        norms = np.linalg.norm(z.reshape(H, d), axis=1)
        if norms.max() > problem.beta * (1 + settings.eps_solve):
            raise InfeasibleProgram("zero-slack weights violate the norm bound",
                                    float((norms.max() / problem.beta) ** 2 - 1))
        w = z.reshape(H, d)
        return CriticSolution(w=w.copy(), xi=np.zeros((H, d)),
                              objective=float(problem.objective_feature @ w[0]),
                              constraint_residuals=norms - problem.beta, trace=trace or [])
    quads = _Quadratics(problem)
    budget = [settings.max_iterations]
    z = _strictly_feasible(quads, settings, budget)
    lin = np.zeros(H * d)
    lin[:d] = problem.objective_feature
    m = 2 * H
    scale = np.linalg.norm(problem.objective_feature)
    if scale == 0:
        z = _newton_center(quads, z, lin, 0.0, settings, budget, trace, lin)
        return _finish(problem, quads, z, settings.max_iterations - budget[0], trace or [])
    t = m / (2 * problem.beta * scale)
    while True:
        z = _newton_center(quads, z, lin, t, settings, budget, trace, lin)
        if m / t <= settings.eps_solve or budget[0] <= 0:
            break
        t *= settings.growth
    return _finish(problem, quads, z, settings.max_iterations - budget[0], trace or [])


@dataclass
class Certificate:
    rows: list  # (constraint, value, bound, slack)
    ok: bool


def certify_solution(solution: CriticSolution, problem: CriticProblem,
                     tol: float = TOL.solve) -> Certificate:
    """Recompute every constraint from the raw tuples, independent of the solver."""
    H = problem.H
    rows = []
    for h in range(1, H + 1):
        w_next = solution.w[h] if h < H else np.zeros(problem.d)
        backup = empirical_bellman(problem.dataset, h, w_next, problem.phi_hat, problem.lam,
                                   problem.features)
        xi = solution.w[h - 1] - backup
        idx = problem.dataset.at_step(h)
        phi = problem.features[h - 1, problem.dataset.states[idx], problem.dataset.actions[idx]]
        sigma = problem.lam * np.eye(problem.d) + phi.T @ phi
        xi_norm = math.sqrt(max(float(xi @ sigma @ xi), 0.0))
        w_norm = float(np.linalg.norm(solution.w[h - 1]))
        eq_gap = float(np.linalg.norm(xi - solution.xi[h - 1]))
        rows.append((f"slack_norm_step{h}", xi_norm, problem.alpha, problem.alpha - xi_norm))
        rows.append((f"weight_norm_step{h}", w_norm, problem.beta, problem.beta - w_norm))
        rows.append((f"slack_identity_step{h}", eq_gap, 0.0, -eq_gap))
    ok = all(slack >= -tol for _, _, _, slack in rows)
    return Certificate(rows=rows, ok=ok)


def write_trace(solution: CriticSolution, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        out = csv.writer(fh)
        out.writerow(["iteration", "objective", "max_residual"])
        out.writerows(solution.trace)
