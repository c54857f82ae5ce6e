import math

import numpy as np
import pytest
from scipy import integrate, stats

from pessimistic_ac.policies import (
    Policy, PerturbedLinear, UnsupportedMode, UnsupportedPolicy, action_probabilities,
    est_feature, est_features, gaussian_stability_check, perturbed_probabilities, sample_action,
    sample_count,
)

PHI_HALF = 0.691462461274013103637704610608  # standard normal CDF at 0.5


def one_dim(w, sigma):
    feats = np.array([[[1.0], [-1.0]]])  # (S=1, A=2, d=1)
    return feats[None], Policy.perturbed_linear([[w]], sigma)


def test_zero_noise_samples_argmax():
    feats = np.array([[[[1.0, 0.0], [0.0, 1.0]]]])
    pol = Policy.perturbed_linear([[0.0, 1.0]], 0.0)
    rng = np.random.default_rng(0)
    assert all(sample_action(pol, feats, 1, 0, rng) == 1 for _ in range(20))


def test_ties_go_to_smallest_index():
    feats = np.array([[[[1.0, 0.0], [1.0, 0.0], [0.0, 1.0]]]])
    pol = Policy.perturbed_linear([[1.0, 1.0]], 0.0)
    assert np.array_equal(action_probabilities(pol, feats, 1, 0), [1.0, 0.0, 0.0])


def test_symmetric_one_dim_sampling_is_fair():
    feats, pol = one_dim(0.0, 1.0)
    rng = np.random.default_rng(1)
    n = 20_000
    hits = sum(sample_action(pol, feats, 1, 0, rng) == 0 for _ in range(n))
    assert abs(hits / n - 0.5) < 4 * math.sqrt(0.25 / n)


def test_one_dim_sampling_matches_normal_cdf():
    feats, pol = one_dim(0.5, 1.0)
    rng = np.random.default_rng(2)
    n = 20_000
    hits = sum(sample_action(pol, feats, 1, 0, rng) == 0 for _ in range(n))
    assert abs(hits / n - PHI_HALF) < 4 * math.sqrt(PHI_HALF * (1 - PHI_HALF) / n)


def test_one_dim_closed_form():
    feats, pol = one_dim(0.5, 1.0)
    p = action_probabilities(pol, feats, 1, 0, mode="closed-form-1d")
    assert np.allclose(p, [PHI_HALF, 1 - PHI_HALF], atol=1e-14)


def test_closed_form_rejects_higher_dimension():
    feats = np.zeros((1, 1, 2, 2))
    feats[0, 0, 0, 0] = feats[0, 0, 1, 1] = 1.0
    with pytest.raises(UnsupportedMode):
        action_probabilities(Policy.perturbed_linear([[0.0, 0.0]], 1.0), feats, 1, 0,
                             mode="closed-form-1d")


def test_zero_noise_probabilities_are_point_mass():
    rng = np.random.default_rng(3)
    feats = rng.standard_normal((1, 3, 4, 2))
    pol = Policy.perturbed_linear(rng.standard_normal((1, 2)), 0.0)
    p = pol.table(feats)[0]
    assert np.array_equal(p.max(axis=1), np.ones(3)) and np.array_equal(p.sum(axis=1), np.ones(3))


def test_tabular_passthrough():
    pol = Policy.uniform(2, 3, 4)
    feats = np.zeros((2, 3, 4, 2))
    assert np.array_equal(action_probabilities(pol, feats, 2, 1), np.full(4, 0.25))


def test_mc_mode_is_seeded():
    rng_feats = np.random.default_rng(4)
    feats = rng_feats.standard_normal((3, 4, 3))
    rule = PerturbedLinear(np.ones(3), 0.7)
    a = perturbed_probabilities(rule, feats, mode="mc", mc_draws=5000, rng=np.random.default_rng(9))
    b = perturbed_probabilities(rule, feats, mode="mc", mc_draws=5000, rng=np.random.default_rng(9))
    assert np.array_equal(a, b) and np.allclose(a.sum(axis=1), 1.0)


def test_regular_polygon_is_uniform_at_zero_mean():
    for k in (3, 4, 5):
        ang = 2 * np.pi * np.arange(k) / k
        feats = np.stack([np.cos(ang), np.sin(ang)], axis=1)[None]
        p = perturbed_probabilities(PerturbedLinear(np.zeros(2), 1.0), feats)
        assert np.allclose(p, 1.0 / k, atol=1e-12)


def _ray_mass(t, m):
    """Gaussian mass per unit angle along direction t for N(m, I)."""
    c = m[0] * np.cos(t) + m[1] * np.sin(t)
    return (np.exp(-(m @ m) / 2) + c * math.sqrt(2 * math.pi) * np.exp(-(m @ m - c * c) / 2)
            * stats.norm.cdf(c)) / (2 * math.pi)


def _quadrature_probs(feats, w, sigma):
    """Winning sets are cones at the origin, so integrate the ray mass over winning angles."""
    m = w / sigma
    owner = lambda t: int(np.argmax(feats @ np.array([np.cos(t), np.sin(t)])))  # noqa: E731
    grid = np.linspace(0, 2 * np.pi, 2001)
    cuts = [0.0]
    for lo, hi in zip(grid[:-1], grid[1:]):
        if owner(lo) != owner(hi):
            a, b = lo, hi
            for _ in range(60):
                mid = (a + b) / 2
                a, b = (mid, b) if owner(mid) == owner(lo) else (a, mid)
            cuts.append((a + b) / 2)
    cuts.append(2 * np.pi)
    out = np.zeros(len(feats))
    for lo, hi in zip(cuts[:-1], cuts[1:]):
        val, _ = integrate.quad(_ray_mass, lo, hi, args=(m,), epsabs=1e-14, epsrel=1e-13)
        out[owner((lo + hi) / 2)] += val
    return out


def test_planar_probabilities_match_quadrature():
    rng = np.random.default_rng(5)
    for _ in range(5):
        feats = rng.standard_normal((4, 2))
        w, sigma = rng.standard_normal(2), rng.uniform(0.2, 2.0)
        exact = perturbed_probabilities(PerturbedLinear(w, sigma), feats[None])[0]
        assert np.allclose(exact, _quadrature_probs(feats, w, sigma), atol=1e-10)


def test_planar_probabilities_match_monte_carlo():
    rng = np.random.default_rng(6)
    feats = rng.standard_normal((4, 5, 2))
    feats[0, 3] = feats[0, 1]  # duplicated feature: mass goes to the smaller index
    rule = PerturbedLinear(rng.standard_normal(2), 0.6)
    exact = perturbed_probabilities(rule, feats)
    n = 400_000
    mc = perturbed_probabilities(rule, feats, mode="mc", mc_draws=n, rng=rng)
    z = np.abs(exact - mc) / np.sqrt(np.maximum(exact * (1 - exact), 1e-12) / n)
    assert z.max() < 5
    assert exact[0, 3] == 0.0
    assert np.allclose(exact.sum(axis=1), 1.0, atol=1e-12)


def test_two_group_probability_is_normal_cdf():
    feats = np.array([[[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]]])
    w = np.array([0.4, -0.1, 2.0])
    p = perturbed_probabilities(PerturbedLinear(w, 0.5), feats)[0]
    assert abs(p[0] - stats.norm.cdf(0.5 / (0.5 * math.sqrt(2)))) < 1e-12


def test_sample_count_formula():
    assert sample_count(0.05, 0.05, 2) == math.ceil(2 / 0.05 ** 2 * math.log(80))


def test_single_action_estimate_is_exact():
    rng = np.random.default_rng(7)
    feats = rng.standard_normal((1, 2, 1, 3))
    pol = Policy.perturbed_linear(rng.standard_normal((1, 3)), 1.0)
    est = est_feature(1, pol, feats, 1, 0.1, 0.1, rng)
    assert np.array_equal(est.phi_hat, feats[0, 1, 0])


def test_zero_noise_estimate_is_argmax_feature():
    rng = np.random.default_rng(8)
    feats = rng.standard_normal((1, 2, 4, 3))
    w = rng.standard_normal(3)
    pol = Policy.perturbed_linear(w[None], 0.0)
    est = est_feature(0, pol, feats, 1, 0.1, 0.1, rng)
    assert np.array_equal(est.phi_hat, feats[0, 0, np.argmax(feats[0, 0] @ w)])


def test_symmetric_estimate_coverage():
    feats, pol = one_dim(0.0, 1.0)
    rng = np.random.default_rng(9)
    hits = sum(abs(est_feature(0, pol, feats, 1, 0.05, 0.05, rng).phi_hat[0]) <= 0.05
               for _ in range(200))
    assert hits >= 190


def test_estimator_law_matches_direct_sampling():
    """Mean and spread of the estimate agree with N independent perturbed draws."""
    rng = np.random.default_rng(10)
    feats = rng.standard_normal((1, 1, 3, 2)) * 0.5
    pol = Policy.perturbed_linear(rng.standard_normal((1, 2)), 0.7)
    eps, delta = 0.2, 0.2
    N = sample_count(eps, delta, 2)
    fast = np.array([est_features([0], pol, feats, 1, eps, delta, rng)[0] for _ in range(400)])
    slow = []
    for _ in range(400):
        theta = pol.steps[0].w[:, None] + 0.7 * rng.standard_normal((2, N))
        slow.append(feats[0, 0][np.argmax(feats[0, 0] @ theta, axis=0)].mean(axis=0))
    slow = np.array(slow)
    se = np.sqrt(fast.var(axis=0) / 400 + slow.var(axis=0) / 400)
    assert np.all(np.abs(fast.mean(axis=0) - slow.mean(axis=0)) < 4 * se)
    assert np.allclose(fast.std(axis=0), slow.std(axis=0), rtol=0.25)


def test_estimate_rejects_softmax():
    pol = Policy.softmax([[1.0, 0.0]], 1.0)
    with pytest.raises(UnsupportedPolicy):
        est_feature(0, pol, np.zeros((1, 1, 2, 2)), 1, 0.1, 0.1, np.random.default_rng(0))


def test_stability_zero_shift():
    assert gaussian_stability_check(1.3, np.zeros(3)) == (0.0, 0.0)


def test_stability_matches_normal_cdf_and_bound():
    rng = np.random.default_rng(11)
    for _ in range(100):
        v, eta = rng.standard_normal(int(rng.integers(1, 5))), rng.uniform(0.1, 3)
        tv, bound = gaussian_stability_check(eta, v)
        r = np.linalg.norm(v)
        assert abs(tv - (2 * stats.norm.cdf(r / (2 * eta)) - 1)) < 1e-12
        assert tv < bound


def test_stability_rejects_nonpositive_scale():
    with pytest.raises(ValueError):
        gaussian_stability_check(0.0, [1.0])


def test_softmax_probabilities():
    feats = np.array([[[[1.0], [0.0], [-1.0]]]])
    p = action_probabilities(Policy.softmax([[1.0]], 1.0), feats, 1, 0)
    e = math.e
    assert np.allclose(p, np.array([e, 1, 1 / e]) / (e + 1 + 1 / e), atol=1e-15)
