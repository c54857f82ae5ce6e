"""Actor loop, parameter schedule and expected follow-the-perturbed-leader."""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .critic import InfeasibleProgram, SolverSettings, build_critic_problem, solve_critic
from .mdp_core import FeatureMDP, exact_policy_value, mixture_value
from .offline_data import OfflineDataset
from .policies import Policy, perturbed_probabilities, PerturbedLinear

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class ActorConfig:
    """Inputs of the parameter schedule plus optional overrides of derived values."""
    eps_final: float
    delta: float
    n: int
    d: int
    H: int
    B: float
    eps_be: float = 0.0
    zeta_const: float = 1.0   # constant inside the misspecification term zeta
    alpha_const: float = 1.0  # constant in front of the concentration term of alpha
    T_cap: int = 5000
    T: int | None = None
    eta: float | None = None
    alpha: float | None = None
    beta: float | None = None
    sigma: float | None = None
    eps_apx: float | None = None
    lam: float = 1.0
    on_infeasible: str = "abort"  # or "inflate"
    eps_solve: float = 1e-6

    def __post_init__(self) -> None:
        if not (0 < self.eps_final and 0 < self.delta < 1):
            raise ValueError("need eps_final > 0 and delta in (0, 1)")
        if min(self.n, self.d, self.H) < 1 or self.B <= 0 or self.eps_be < 0:
            raise ValueError("n, d, H must be positive, B > 0, eps_be >= 0")
        if self.on_infeasible not in ("abort", "inflate"):
            raise ValueError("on_infeasible must be 'abort' or 'inflate'")


@dataclass(frozen=True)
class ActorParams:
    T_theory: float
    T: int
    beta: float
    eps_apx: float
    eta: float
    sigma: float
    zeta: float
    alpha: float


def default_params(config: ActorConfig) -> ActorParams:
    """Derived parameters; the iteration count is capped and the perturbation uses the capped T."""
    c = config
    beta = c.beta if c.beta is not None else 2.0 * c.B * c.H
    T_theory = 16.0 * beta ** 2 * math.sqrt(c.d) / c.eps_final ** 2
    T = c.T if c.T is not None else min(int(math.ceil(T_theory)), c.T_cap)
    eps_apx = c.eps_apx if c.eps_apx is not None else 1.0 / math.sqrt(c.n)
    eta = c.eta if c.eta is not None else beta * max(math.sqrt(T) * c.d ** -0.25,
                                                     T * math.sqrt(c.eps_be))
    sigma = c.sigma if c.sigma is not None else eta / (T * beta)
    if c.eps_be == 0:
        zeta = 0.0
    else:
        inner = max(math.log(c.d / (c.eps_be * sigma)), 0.0)
        zeta = c.zeta_const * c.eps_be * c.d ** 1.5 * (math.sqrt(c.d * inner) + 1.0 / sigma)
    if c.alpha is not None:
        alpha = c.alpha
    else:
        conc = math.sqrt(max(math.log(c.d * c.n * beta / (sigma * c.delta)), 0.0))
        alpha = 4 * beta * zeta * math.sqrt(c.n) + c.alpha_const * beta * c.d * conc
    return ActorParams(T_theory, T, beta, eps_apx, eta, sigma, zeta, alpha)


class ActorAborted(RuntimeError):
    def __init__(self, t: int, cause: InfeasibleProgram):
        super().__init__(f"critic infeasible at iteration {t}: {cause}")
        self.t = t
        self.cause = cause


@dataclass(eq=False)
class ActorRun:
    params: ActorParams
    thetas: np.ndarray        # (T, H, d): theta^t = sum_{s<t} w^s
    weights: np.ndarray       # (T, H, d): critic output w^t
    objectives: np.ndarray    # (T,)
    infeasible: np.ndarray    # (T,) bool: alpha had to be inflated
    alphas: np.ndarray        # (T,) alpha actually used
    sampled_index: int        # 0-based index of the returned representative
    extra: dict = field(default_factory=dict)

    @property
    def T(self) -> int:
        return len(self.weights)

    def policy(self, t: int) -> Policy:
        """pi^t for 1 <= t <= T."""
        return Policy.perturbed_linear(self.thetas[t - 1], self.params.eta)

    def policies(self) -> list[Policy]:
        return [self.policy(t) for t in range(1, self.T + 1)]

    @property
    def sampled_policy(self) -> Policy:
        return self.policy(self.sampled_index + 1)

    def mixture_value(self, mdp: FeatureMDP, mc_draws: int = 20_000, seed: int = 0) -> float:
        return mixture_value(mdp, self.policies(), mc_draws=mc_draws, seed=seed)

    def mean_value(self, mdp: FeatureMDP, mc_draws: int = 20_000, seed: int = 0) -> float:
        """(1/T) sum_t V^{pi^t}: the exact value of the uniform mixture."""
        return float(np.mean([exact_policy_value(mdp, p, mc_draws, seed).value
                              for p in self.policies()]))

    def write_log(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            out = csv.writer(fh)
            H = self.weights.shape[1]
            out.writerow(["t", "objective"] + [f"w_norm_step{h}" for h in range(1, H + 1)]
                         + ["feasible"])
            for t in range(self.T):
                norms = np.linalg.norm(self.weights[t], axis=1)
                out.writerow([t + 1, repr(float(self.objectives[t]))]
                             + [repr(float(v)) for v in norms] + [int(not self.infeasible[t])])


def run_actor(dataset: OfflineDataset, config: ActorConfig, features, initial_state: int,
              rng: np.random.Generator) -> ActorRun:
    """T rounds of: perturbed-leader policy from accumulated critic weights, then a critic call."""
    if dataset.n == 0:
        raise ValueError("the actor needs a nonempty dataset")
    feats = features.features if hasattr(features, "features") else np.asarray(features, dtype=float)
    params = default_params(config)
    H, d = feats.shape[0], feats.shape[3]
    T = params.T
    log.info("actor: T=%d (schedule %.1f), eta=%.4g, alpha=%.4g, beta=%.4g",
             T, params.T_theory, params.eta, params.alpha, params.beta)
    settings = SolverSettings(eps_solve=config.eps_solve)
    thetas = np.zeros((T, H, d))
    weights = np.zeros((T, H, d))
    objectives = np.zeros(T)
    flags = np.zeros(T, dtype=bool)
    alphas = np.zeros(T)
    theta = np.zeros((H, d))
    crit_delta = config.delta / (2 * T)
    for t in range(T):
        thetas[t] = theta
        policy = Policy.perturbed_linear(theta, params.eta)
        alpha = params.alpha
        attempts = 0
        while True:
            problem = build_critic_problem(dataset, feats, initial_state, policy, params.eps_apx,
                                           alpha, params.beta, crit_delta, rng, lam=config.lam)
            try:
                sol = solve_critic(problem, settings)
                break
            except InfeasibleProgram as err:
                if config.on_infeasible == "abort" or attempts == 3:
                    raise ActorAborted(t + 1, err) from err
                attempts += 1
                alpha *= 2.0
                flags[t] = True
        weights[t] = sol.w
        objectives[t] = sol.objective
        alphas[t] = alpha
        theta = theta + sol.w
    sampled = int(rng.integers(T))
    return ActorRun(params, thetas, weights, objectives, flags, alphas, sampled)


def actor_state_regret(run: ActorRun, features, h: int, x: int, comparator_action: int,
                       mc_draws: int = 20_000, seed: int = 0) -> tuple[float, float]:
    """sum_t f^t(x, a*) - sum_t f^t(x, pi^t(x)) at one state, against eta^-1 (2BH)^2 T + eta sqrt(d).

    The bound uses beta = 2BH as the bound on every ||w_h^t||.
    """
    feats = features.features if hasattr(features, "features") else np.asarray(features)
    step = feats[h - 1]
    rng = np.random.default_rng(seed)
    total = 0.0
    for t in range(run.T):
        rule = PerturbedLinear(run.thetas[t, h - 1], run.params.eta)
        probs = perturbed_probabilities(rule, step, mc_draws=mc_draws, rng=rng, states=[x])[0]
        f = step[x] @ run.weights[t, h - 1]
        total += f[comparator_action] - probs @ f
    eta, d, T = run.params.eta, feats.shape[3], run.T
    return float(total), run.params.beta ** 2 * T / eta + eta * math.sqrt(d)


# ---------------------------------------------------------------------------
# expected follow-the-perturbed-leader

@dataclass
class FtplState:
    actions: np.ndarray          # (K, d)
    cumulative: np.ndarray       # (d,)
    omega: float = 1.0
    eta: float = 1.0             # perturbation scale, rho ~ N(0, eta^2 I)
    round: int = 0

    def __post_init__(self) -> None:
        self.actions = np.atleast_2d(np.asarray(self.actions, dtype=float))
        self.cumulative = np.asarray(self.cumulative, dtype=float).reshape(-1)
        if len(self.actions) == 0:
            raise ValueError("empty action set")

    def update(self, reward) -> None:
        self.cumulative = self.cumulative + np.asarray(reward, dtype=float)
        self.round += 1


def _leader_draws(state: FtplState, mc_samples: int, rng: np.random.Generator) -> np.ndarray:
    base = state.omega * (state.actions @ state.cumulative)
    if state.eta == 0:
        top = base.max()
        return np.full(1, int(np.argmax(base >= top - 1e-12 * max(1.0, abs(top)))))
    rho = state.eta * rng.standard_normal((mc_samples, state.actions.shape[1]))
    scores = base[None, :] + rho @ state.actions.T
    top = scores.max(axis=1, keepdims=True)
    return np.argmax(scores >= top - 1e-12 * np.maximum(1.0, np.abs(top)), axis=1)


def ftpl_step(state: FtplState, mc_samples: int, rng: np.random.Generator) -> np.ndarray:
    """Monte-Carlo estimate of the expected perturbed leader."""
    picks = _leader_draws(state, mc_samples, rng)
    return state.actions[picks].mean(axis=0)


@dataclass(frozen=True)
class FtplResult:
    regret: float
    bound: float
    std_err: float
    best_action: int


def ftpl_regret_harness(action_set, adversary, omega: float, eta: float, T: int | None = None,
                        mc_samples: int = 2000, rng: np.random.Generator | None = None) -> FtplResult:
    """Regret of expected FTPL against the best fixed action, with the stability bound.

    The bound is omega L D G^2 T + J D / omega with J = eta sqrt(d), L = 1/eta.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    actions = np.atleast_2d(np.asarray(action_set, dtype=float))
    rewards = np.atleast_2d(np.asarray(adversary, dtype=float))
    T = len(rewards) if T is None else T
    rewards = rewards[:T]
    d = actions.shape[1]
    state = FtplState(actions, np.zeros(d), omega, eta)
    earned = 0.0
    var = 0.0
    for t in range(T):
        picks = _leader_draws(state, mc_samples, rng)
        vals = actions[picks] @ rewards[t]
        earned += vals.mean()
        if len(vals) > 1:
            var += vals.var(ddof=1) / len(vals)
        state.update(rewards[t])
    totals = actions @ rewards.sum(axis=0)
    best = int(np.argmax(totals))
    regret = float(totals[best] - earned)
    D = float(np.linalg.norm(actions, axis=1).max())
    G = float(np.linalg.norm(rewards, axis=1).max()) if T else 0.0
    if eta == 0:
        bound = math.inf
    else:
        J, L = eta * math.sqrt(d), 1.0 / eta
        bound = omega * L * D * G ** 2 * T + J * D / omega
    return FtplResult(regret, bound, math.sqrt(var), best)


__all__ = [
    "ActorConfig", "ActorParams", "default_params", "ActorAborted", "ActorRun", "run_actor",
    "actor_state_regret", "FtplState", "ftpl_step", "FtplResult", "ftpl_regret_harness",
]
