"""The structural check suite behind the ``verify`` command.

Each check returns :class:`CheckRow` entries.  Checks draw randomness from
``stream(master_seed, "verify", name)`` so any one of them can be rerun alone
with the same result.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .instances import benchmark_linear_mdp, random_feature_mdp
from .lower_bound import (
    Bits, build_instance, exact_gap, generate_lb_dataset, naive_greedy_policy, reference_policy,
)
from .mdp_core import (
    BoundedBallSpec, FeatureMDP, exact_policy_value, induced_mdp, invariant_violations,
    measure_inherent_bellman_error, mixture_value, performance_difference,
)
from .offline_data import coverage_parameter
from .policies import Policy, gaussian_stability_check
from .rng import stream
from .structural_verify import (
    CheckRow, fit_linear_backup, q_linearity_check, smoothed_gradient_check,
    softmax_counterexample,
)
from .tolerances import TOL


@dataclass(frozen=True)
class SuiteOptions:
    master_seed: int = 0
    mc_budget: int = 200_000
    lb_eps: tuple[float, ...] = (1 / 16, 1 / 64)
    lb_bits: int = 20
    user_mdp: FeatureMDP | None = None


def _random_instances(rng: np.random.Generator, count: int = 5):
    for _ in range(count):
        S, H = int(rng.integers(2, 9)), int(rng.integers(1, 5))
        A, d = int(rng.integers(2, 5)), int(rng.integers(1, 4))
        yield random_feature_mdp(rng, S=S, A=A, H=H, d=d)


def _random_plinear(rng: np.random.Generator, mdp: FeatureMDP) -> Policy:
    return Policy.perturbed_linear(rng.standard_normal((mdp.H, mdp.d)), rng.uniform(0.1, 1.0))


def check_induced_mdp(opts: SuiteOptions, rng) -> list[CheckRow]:
    worst = 0.0
    for mdp in _random_instances(rng):
        pol = _random_plinear(rng, mdp)
        w = rng.standard_normal((mdp.H, mdp.d))
        Q = exact_policy_value(induced_mdp(mdp, w, pol), pol).Q
        f = np.einsum("hsad,hd->hsa", mdp.features, w)
        worst = max(worst, float(np.abs(Q - f).max()))
    return [CheckRow("induced-mdp", worst, TOL.identity, worst <= TOL.identity)]


def check_performance_difference(opts: SuiteOptions, rng) -> list[CheckRow]:
    worst = 0.0
    for mdp in _random_instances(rng):
        pols = [Policy.tabular(rng.dirichlet(np.ones(mdp.A), size=(mdp.H, mdp.S)))
                for _ in range(2)]
        lhs, rhs = performance_difference(mdp, *pols)
        worst = max(worst, abs(lhs - rhs))
    return [CheckRow("performance-difference", worst, TOL.identity, worst <= TOL.identity)]


def check_mixture_linearity(opts: SuiteOptions, rng) -> list[CheckRow]:
    worst = 0.0
    for mdp in _random_instances(rng):
        pols = [Policy.tabular(rng.dirichlet(np.ones(mdp.A), size=(mdp.H, mdp.S)))
                for _ in range(3)]
        mean = np.mean([exact_policy_value(mdp, p).value for p in pols])
        worst = max(worst, abs(mixture_value(mdp, pols) - mean))
    return [CheckRow("mixture-linearity", worst, TOL.identity, worst <= TOL.identity)]


def check_softmax_counterexample(opts: SuiteOptions, rng) -> list[CheckRow]:
    """Linear Bellman complete, yet the softmax backup is not linear in the features."""
    rep = softmax_counterexample()
    return [
        CheckRow("softmax-counterexample:inherent-error", rep.inherent_error, TOL.identity,
                 rep.inherent_error <= TOL.identity),
        CheckRow("softmax-counterexample:certificate", rep.certificate_error, TOL.identity,
                 rep.certificate_error <= TOL.identity),
        # passes when the backup is visibly nonlinear; the row reports the gap
        CheckRow("softmax-counterexample:gap", rep.gap, 0.1, rep.gap > 0.1),
    ]


def lb_coverage_closed_form(L: int) -> float:
    """Coverage of the reference policy on the canonical dataset with L levels."""
    return math.sqrt(6.0) + math.sqrt(3.0) * (L + 1) / (2 * L)


def check_lower_bound_instances(opts: SuiteOptions, rng) -> list[CheckRow]:
    rows = []
    for eps in opts.lb_eps:
        template = build_instance(eps)
        L = template.L
        worst_ibe, worst_val, worst_norm = 0.0, 0.0, 0
        for _ in range(opts.lb_bits):
            inst = build_instance(eps, Bits.random(L, rng))
            worst_ibe = max(worst_ibe, measure_inherent_bellman_error(inst.mdp, BoundedBallSpec()))
            v = exact_policy_value(inst.mdp, reference_policy(inst)).value
            worst_val = max(worst_val, abs(v - inst.optimal_value))
            worst_norm += len([m for m in invariant_violations(inst.mdp)
                               if "transition" in m or "feature" in m])
        tag = f"eps=1/{round(1 / eps)}"
        rows.append(CheckRow(f"lb-inherent-error:{tag}", worst_ibe, 2 * eps + TOL.identity,
                             worst_ibe <= 2 * eps + TOL.identity))
        rows.append(CheckRow(f"lb-optimal-value:{tag}", worst_val, 1e-12, worst_val <= 1e-12))
        rows.append(CheckRow(f"lb-structure:{tag}", float(worst_norm), 0.0, worst_norm == 0))
        ds = generate_lb_dataset(template, 3000, rng)
        cov = coverage_parameter(ds, reference_policy(template), template.mdp, lam=0.0)
        err = abs(cov - lb_coverage_closed_form(L))
        rows.append(CheckRow(f"lb-coverage:{tag}", err, TOL.identity, err <= TOL.identity))
    return rows


def check_lower_bound_gap(opts: SuiteOptions, rng) -> list[CheckRow]:
    rows = []
    for eps in opts.lb_eps:
        template = build_instance(eps)
        algs = {
            "constant-reference": reference_policy(template),
            "uniform": Policy.uniform(template.mdp.H, template.mdp.S, template.mdp.A),
            "naive-greedy": naive_greedy_policy(),
        }
        for name, pol in algs.items():
            rep = exact_gap([pol], eps=eps)
            rows.append(CheckRow(f"lb-exact-gap:{name}:eps=1/{round(1 / eps)}", rep.gap,
                                 rep.threshold, rep.gap >= rep.threshold))
    return rows


def check_backup_fit(opts: SuiteOptions, rng) -> list[CheckRow]:
    """Backups under perturbed-linear policies are linear on a complete instance."""
    mdp = benchmark_linear_mdp()
    pol = _random_plinear(rng, mdp)
    probes = rng.standard_normal((8, mdp.d))
    rep = fit_linear_backup(mdp, 1, pol, probes, opts.mc_budget, eps_be=0.0)
    worst = float(np.max(rep.residuals - rep.slack))
    q = q_linearity_check(mdp, pol)
    return [
        CheckRow("backup-fit", rep.residual, float(rep.slack.max()), worst <= 0),
        CheckRow("q-linearity", q.residual, TOL.identity, q.residual <= TOL.identity),
    ]


def check_smoothed_gradient(opts: SuiteOptions, rng) -> list[CheckRow]:
    worst = 0.0
    for _ in range(5):
        mdp = random_feature_mdp(rng, S=4, A=4, H=2, d=2)
        x, a = int(rng.integers(mdp.S)), int(rng.integers(mdp.A))
        w = rng.standard_normal(2)
        seed = int(rng.integers(2 ** 31))
        _, _, rel = smoothed_gradient_check(mdp, 1, x, a, w, 0.5, 1e-3, opts.mc_budget, seed)
        worst = max(worst, rel)
    return [CheckRow("smoothed-gradient", worst, 0.02, worst <= 0.02)]


def check_gaussian_stability(opts: SuiteOptions, rng) -> list[CheckRow]:
    worst = -math.inf
    for _ in range(100):
        d = int(rng.integers(1, 6))
        tv, bound = gaussian_stability_check(rng.uniform(0.05, 3.0), rng.standard_normal(d))
        worst = max(worst, tv - bound)
    return [CheckRow("gaussian-stability", worst, 0.0, worst < 0)]


def check_user_mdp(opts: SuiteOptions, rng) -> list[CheckRow]:
    if opts.user_mdp is None:
        return []
    bad = invariant_violations(opts.user_mdp)
    ibe = measure_inherent_bellman_error(opts.user_mdp)
    return [CheckRow("user-mdp:invariants", float(len(bad)), 0.0, not bad),
            # reported only; any value is admissible for a user instance
            CheckRow("user-mdp:inherent-error", ibe, math.inf, True)]


CHECKS: dict[str, Callable[[SuiteOptions, np.random.Generator], list[CheckRow]]] = {
    "induced-mdp": check_induced_mdp,
    "performance-difference": check_performance_difference,
    "mixture-linearity": check_mixture_linearity,
    "softmax-counterexample": check_softmax_counterexample,
    "lower-bound-instances": check_lower_bound_instances,
    "lower-bound-gap": check_lower_bound_gap,
    "backup-fit": check_backup_fit,
    "smoothed-gradient": check_smoothed_gradient,
    "gaussian-stability": check_gaussian_stability,
    "user-mdp": check_user_mdp,
}


def run_suite(opts: SuiteOptions, only: list[str] | None = None) -> list[CheckRow]:
    names = list(CHECKS) if not only else only
    unknown = [n for n in names if n not in CHECKS]
    if unknown:
        raise KeyError(f"unknown checks: {', '.join(unknown)}")
    rows: list[CheckRow] = []
    for name in names:
        rows.extend(CHECKS[name](opts, stream(opts.master_seed, "verify", name)))
    return rows


__all__ = ["SuiteOptions", "CHECKS", "run_suite", "lb_coverage_closed_form"]
