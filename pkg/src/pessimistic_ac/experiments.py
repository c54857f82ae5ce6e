"""Experiment drivers behind the CLI: upper-bound runs, lower-bound gaps and the FTPL bench.

Random streams: every run draws from ``stream(master_seed, command, *index)``
(see :mod:`pessimistic_ac.rng`), so results do not depend on worker count or
execution order.
"""
from __future__ import annotations

import math
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from .actor import ActorConfig, ftpl_regret_harness, run_actor
from .config import Config
from .instances import benchmark_linear_mdp, benchmark_plan
from .lower_bound import (
    GapReport, actor_algorithm, constant_reference, evaluate_gap, naive_greedy_algorithm,
    uniform_algorithm,
)
from .mdp_core import FeatureMDP, boundedness_constant, mixture_value, optimal_policy
from .offline_data import CoverageError, RolloutPlan, coverage_parameter, generate_dataset
from .policies import Policy
from .rng import stream
from .textio import read_mdp, read_policy

# ---------------------------------------------------------------------------
# upper bound

UPPER_COLUMNS = ["n", "seed", "suboptimality", "coverage", "runtime", "T", "alpha",
                 "inflated_iterations"]


def upper_instance(section: dict) -> FeatureMDP:
    if section["instance"] == "benchmark":
        return benchmark_linear_mdp()
    return read_mdp(section["instance"])


def upper_dataset(mdp: FeatureMDP, section: dict, n: int, rng: np.random.Generator):
    if section["instance"] == "benchmark":
        return generate_dataset(mdp, benchmark_plan(n), rng)
    episodes = max(1, n // mdp.H)
    return generate_dataset(mdp, RolloutPlan(Policy.uniform(mdp.H, mdp.S, mdp.A), episodes), rng)


def run_upper_job(cfg: Config, n: int, seed: int) -> dict:
    """One actor run on a fresh dataset of size n; suboptimality is exact."""
    sec = cfg["run-upper"]
    mdp = upper_instance(sec)
    rng = stream(cfg["general"]["master_seed"], "run-upper", n, seed)
    start = time.perf_counter()
    dataset = upper_dataset(mdp, sec, n, rng)
    B = sec["B"] or boundedness_constant(mdp)
    actor_cfg = ActorConfig(eps_final=sec["eps_final"], delta=sec["delta"], n=dataset.n, d=mdp.d,
                            H=mdp.H, B=B, eps_be=sec["eps_be"], zeta_const=sec["zeta_const"],
                            alpha_const=sec["alpha_const"], T_cap=sec["T_cap"],
                            on_infeasible=sec["on_infeasible"], eps_solve=sec["eps_solve"])
    run = run_actor(dataset, actor_cfg, mdp, mdp.initial_state, rng)
    runtime = time.perf_counter() - start
    best_table, best = optimal_policy(mdp)
    sub = best.value - mixture_value(mdp, run.policies())
    try:
        cov = coverage_parameter(dataset, best_table, mdp, lam=0.0)
    except CoverageError:
        cov = math.inf
    if sec["log_dir"]:
        Path(sec["log_dir"]).mkdir(parents=True, exist_ok=True)
        run.write_log(Path(sec["log_dir"]) / f"actor-n{n}-seed{seed}.csv")
    return {"n": n, "seed": seed, "suboptimality": sub, "coverage": cov, "runtime": runtime,
            "T": run.T, "alpha": run.params.alpha, "inflated_iterations": int(run.infeasible.sum())}


def run_upper(cfg: Config) -> list[dict]:
    """All (n, seed) runs, ordered by (n, seed) whatever the worker count."""
    sec = cfg["run-upper"]
    jobs = [(n, s) for n in sec["n_grid"] for s in range(sec["seeds"])]
    workers = cfg["general"]["workers"]
    if workers > 1:
        with ProcessPoolExecutor(workers) as pool:
            rows = list(pool.map(run_upper_job, [cfg] * len(jobs), *zip(*jobs)))
    else:
        rows = [run_upper_job(cfg, n, s) for n, s in jobs]
    return sorted(rows, key=lambda r: (r["n"], r["seed"]))


# ---------------------------------------------------------------------------
# lower bound

class ExternalPolicies:
    """Learner that returns pre-computed policies ``policy-0000.txt``, ... in call order.

    The canonical dataset law does not depend on the hidden bits, so policies
    trained on any draw of that dataset are valid inputs.
    """

    def __init__(self, directory):
        self.directory = Path(directory)
        self.calls = 0

    def __call__(self, dataset, template, rng):
        path = self.directory / f"policy-{self.calls:04d}.txt"
        self.calls += 1
        return read_policy(path)


def lower_algorithm(section: dict):
    name = section["algorithm"]
    if name == "builtin-actor":
        return actor_algorithm(T_cap=section["T_cap"])
    if name == "naive-greedy":
        return naive_greedy_algorithm
    if name == "constant-reference":
        return constant_reference(0)
    if name == "uniform":
        return uniform_algorithm
    if not section["policy_dir"]:
        raise ValueError("algorithm 'external' needs run-lower.policy_dir")
    return ExternalPolicies(section["policy_dir"])


LOWER_COLUMNS = ["algorithm", "eps", "L", "n", "trials", "holdout_trials", "case", "flagged",
                 "b_rew", "b_init", "b_levels", "gap", "std_err", "threshold", "optimal_value",
                 "pass"]


def run_lower(cfg: Config) -> tuple[GapReport, dict]:
    sec = cfg["run-lower"]
    rng = stream(cfg["general"]["master_seed"], "run-lower")
    rep = evaluate_gap(lower_algorithm(sec), sec["eps"], sec["n"], sec["trials"], rng,
                       holdout_trials=sec["holdout_trials"], mc_draws=sec["mc_draws"])
    passed = rep.gap >= rep.threshold - 3 * rep.std_err
    row = {"algorithm": sec["algorithm"], "eps": rep.estimate.eps, "L": rep.estimate.L,
           "n": sec["n"], "trials": sec["trials"], "holdout_trials": sec["holdout_trials"],
           "case": rep.case, "flagged": int(rep.flagged), "b_rew": rep.bits.b_rew,
           "b_init": rep.bits.b_init,
           # level-major pairs (b_{l,0} b_{l,1}) for l = 1..L
           "b_levels": "".join(str(int(v)) for v in rep.bits.b_table.reshape(-1)),
           "gap": rep.gap, "std_err": rep.std_err, "threshold": rep.threshold,
           "optimal_value": rep.optimal_value, "pass": int(passed)}
    return rep, row


# ---------------------------------------------------------------------------
# FTPL bench

def _unit(v: np.ndarray) -> np.ndarray:
    return v / np.linalg.norm(v, axis=-1, keepdims=True)


def make_adversary(name: str, T: int, d: int, actions: np.ndarray,
                   rng: np.random.Generator) -> np.ndarray:
    """Reward sequence of shape (T, d) with every row of norm at most 1."""
    u = _unit(rng.standard_normal(d))
    t = np.arange(T)
    if name == "zero":
        return np.zeros((T, d))
    if name == "constant":
        return np.tile(u, (T, 1))
    if name == "alternating":
        # classic leader trap: +1/2 then alternating -1, +1 along one axis
        signs = np.where(t % 2 == 1, -1.0, 1.0)
        signs[0] = 0.5
        return signs[:, None] * np.eye(d)[0][None, :]
    if name == "random":
        return _unit(rng.standard_normal((T, d)))
    if name == "cycling":
        v = _unit(rng.standard_normal(d))
        v = _unit(v - (v @ u) * u) if d > 1 else -u
        ang = 6 * math.pi * t / T
        return np.cos(ang)[:, None] * u + np.sin(ang)[:, None] * v
    if name == "drift":
        frac = (t / max(T - 1, 1))[:, None]
        mix = (1 - frac) * u - frac * u + 0.1 * rng.standard_normal((T, d))
        return mix / np.maximum(1.0, np.linalg.norm(mix, axis=1, keepdims=True))
    if name == "sparse":
        out = np.zeros((T, d))
        out[t % 10 == 0] = _unit(rng.standard_normal((int(np.sum(t % 10 == 0)), d)))
        return out
    if name == "flip":
        return np.where((t < T // 2)[:, None], u, -u)
    if name == "greedy-trap":
        # each round punishes the unperturbed leader of the rounds so far
        out = np.zeros((T, d))
        total = np.zeros(d)
        for k in range(T):
            leader = actions[int(np.argmax(actions @ total))]
            out[k] = -_unit(leader) if np.linalg.norm(leader) > 0 else u
            total += out[k]
        return out
    if name == "scaled":
        return 0.1 * _unit(rng.standard_normal((T, d)))
    raise ValueError(f"unknown adversary {name!r}")


FTPL_COLUMNS = ["adversary", "T", "d", "omega", "eta", "D", "G", "regret", "std_err", "bound",
                "pass"]


def run_ftpl_bench(cfg: Config) -> list[dict]:
    sec = cfg["ftpl-bench"]
    seed = cfg["general"]["master_seed"]
    T, d = sec["T"], sec["d"]
    actions = _unit(stream(seed, "ftpl-bench", "actions").standard_normal((sec["actions"], d)))
    eta = sec["eta"] or math.sqrt(T)
    rows = []
    for k, name in enumerate(sec["adversaries"]):
        rewards = make_adversary(name, T, d, actions, stream(seed, "ftpl-bench", k, "adversary"))
        res = ftpl_regret_harness(actions, rewards, sec["omega"], eta, T, sec["mc_samples"],
                                  stream(seed, "ftpl-bench", k, "perturbation"))
        D = float(np.linalg.norm(actions, axis=1).max())
        G = float(np.linalg.norm(rewards, axis=1).max())
        rows.append({"adversary": name, "T": T, "d": d, "omega": sec["omega"], "eta": eta,
                     "D": D, "G": G, "regret": res.regret, "std_err": res.std_err,
                     "bound": res.bound, "pass": int(res.regret <= res.bound + 3 * res.std_err)})
    return rows


__all__ = [
    "UPPER_COLUMNS", "run_upper_job", "run_upper", "upper_instance", "ExternalPolicies",
    "lower_algorithm", "LOWER_COLUMNS", "run_lower", "make_adversary", "FTPL_COLUMNS",
    "run_ftpl_bench",
]
