"""Reflection-coupled verification: ratios, reflections, and closed forms."""

import math

import numpy as np
import pytest

from specdiff.coupling import (
    GaussianKernel,
    expected_accept,
    likelihood_ratio,
    tv_equal_var_gaussians,
    verify,
    verify_batch,
    verify_relaxed,
)
from specdiff.stats import RngKey, keyed_gaussian, keyed_uniform


def _random_pair(seed, d):
    m = keyed_gaussian(RngKey(seed, 0, "data"), d)
    m_hat = m + 0.8 * keyed_gaussian(RngKey(seed, 1, "data"), d)
    var = 0.2 + 1.5 * keyed_uniform(RngKey(seed, 2, "data"))
    x_hat = m_hat + math.sqrt(var) * keyed_gaussian(RngKey(seed, 3, "data"), d)
    return m, m_hat, var, x_hat


def test_ratio_pins():
    m, m_hat = np.zeros(1), np.array([2.0])
    assert abs(likelihood_ratio(m_hat, m, 1.0, np.array([3.0])) - math.exp(-4.0)) < 1e-15
    # equal means and draft at the midpoint both give ratio 1
    assert likelihood_ratio(m, m, 1.0, np.array([3.0])) == 1.0
    assert likelihood_ratio(m_hat, m, 1.0, np.array([1.0])) == 1.0


def _gauss_logpdf(x, mean, var):
    d = x.size
    return -0.5 * d * math.log(2.0 * math.pi * var) - 0.5 * float(np.sum((x - mean) ** 2)) / var


def test_ratio_matches_direct_density_quotient():
    for seed in range(20):
        for d in (1, 2, 5):
            m, m_hat, var, x_hat = _random_pair(seed, d)
            got = likelihood_ratio(m_hat, m, var, x_hat)
            direct = math.exp(_gauss_logpdf(x_hat, m, var) - _gauss_logpdf(x_hat, m_hat, var))
            assert abs(got - direct) <= 1e-10 * direct


def test_ratio_extreme_gap_does_not_overflow():
    val = likelihood_ratio(np.array([-1e6]), np.array([1e6]), 1e-6, np.array([1e6]))
    assert math.isfinite(val)


def test_reflection_pins():
    # d=1: reflected sample is 2*mid - x_hat
    samples, accepted, _ = verify_batch(
        np.array([2.0]), np.array([0.0]), 1.0, np.array([[3.0]]), np.array([1.0])
    )
    assert not accepted[0]
    assert samples[0, 0] == -1.0
    # d=2: the component orthogonal to the mean gap is untouched
    samples, accepted, _ = verify_batch(
        np.array([2.0, 0.0]), np.array([0.0, 0.0]), 1.0, np.array([[3.0, 5.0]]), np.array([1.0])
    )
    assert not accepted[0]
    assert np.allclose(samples[0], [-1.0, 5.0], atol=1e-15)


def test_reflection_isometry_and_density_swap():
    for seed in range(25):
        d = (1, 2, 6)[seed % 3]
        m, m_hat, var, x_hat = _random_pair(seed + 100, d)
        samples, accepted, _ = verify_batch(m_hat, m, var, x_hat[None, :], np.array([1.0]))
        if accepted[0]:
            continue  # u=1 only accepts at ratio exactly 1
        s = samples[0]
        assert abs(np.linalg.norm(s - m) - np.linalg.norm(x_hat - m_hat)) < 1e-12
        # density swap: p(z) = q(S(z)) and q(z) = p(S(z))
        p_z = _gauss_logpdf(x_hat, m, var)
        q_z = _gauss_logpdf(x_hat, m_hat, var)
        assert abs(p_z - _gauss_logpdf(s, m_hat, var)) < 1e-10 * abs(p_z)
        assert abs(q_z - _gauss_logpdf(s, m, var)) < 1e-10 * abs(q_z)


def test_equal_means_always_accepts():
    m = np.array([0.5, -0.5])
    res = verify(m, m.copy(), 0.3, np.array([9.0, 9.0]), RngKey(0, 0, "verify"))
    assert res.accepted and res.acceptance_prob == 1.0
    assert np.array_equal(res.sample, [9.0, 9.0])


def test_accepted_sample_is_the_draft_bitwise():
    for seed in range(40):
        m, m_hat, var, x_hat = _random_pair(seed + 300, 3)
        res = verify(m_hat, m, var, x_hat, RngKey(seed, 5, "verify"))
        if res.accepted:
            assert res.sample is x_hat or np.array_equal(res.sample, x_hat)


def test_relaxed_lambda1_bitwise_equals_strict():
    for seed in range(40):
        m, m_hat, var, x_hat = _random_pair(seed + 500, 2)
        key = RngKey(seed, 9, "verify")
        a = verify(m_hat, m, var, x_hat, key)
        b = verify_relaxed(m_hat, m, var, x_hat, 1.0, key)
        assert a.accepted == b.accepted
        assert a.acceptance_prob == b.acceptance_prob
        assert np.array_equal(a.sample, b.sample)


def test_relaxed_pins():
    m, m_hat, x_hat = np.zeros(1), np.array([2.0]), np.array([3.0])
    res = verify_relaxed(m_hat, m, 1.0, x_hat, 0.5, RngKey(0, 0, "verify"))
    assert abs(res.acceptance_prob - math.exp(-2.0)) < 1e-15
    res = verify_relaxed(m_hat, m, 1.0, x_hat, 0.0, RngKey(0, 0, "verify"))
    assert res.accepted and res.acceptance_prob == 1.0


def test_relaxed_acceptance_monotone_in_lambda():
    for seed in range(20):
        m, m_hat, var, x_hat = _random_pair(seed + 700, 2)
        key = RngKey(seed, 1, "verify")
        probs = [
            verify_relaxed(m_hat, m, var, x_hat, lam, key).acceptance_prob
            for lam in (1.0, 0.7, 0.3, 0.0)
        ]
        assert all(b >= a for a, b in zip(probs, probs[1:]))


def test_relaxed_lambda_out_of_range():
    with pytest.raises(ValueError):
        verify_relaxed(np.ones(1), np.zeros(1), 1.0, np.ones(1), 1.5, RngKey(0, 0, "verify"))


def test_verify_batch_matches_scalar_route():
    for seed in range(15):
        m, m_hat, var, x_hat = _random_pair(seed + 900, 4)
        key = RngKey(seed, 3, "verify")
        scalar = verify(m_hat, m, var, x_hat, key)
        u = np.array([keyed_uniform(key)])
        samples, accepted, probs = verify_batch(m_hat, m, var, x_hat[None, :], u)
        assert bool(accepted[0]) == scalar.accepted
        assert probs[0] == scalar.acceptance_prob
        assert np.array_equal(samples[0], scalar.sample)


def test_expected_accept_pins():
    assert expected_accept(0.0, 1.0) == 1.0
    assert abs(expected_accept(2.0, 1.0) - 0.31731050786291415) < 1e-12
    vals = [expected_accept(g, 1.0) for g in np.linspace(0, 30, 40)]
    assert all(b < a for a, b in zip(vals, vals[1:]))
    assert vals[-1] < 1e-9
    with pytest.raises(ValueError):
        expected_accept(-1.0, 1.0)
    with pytest.raises(ValueError):
        expected_accept(1.0, 0.0)


def test_tv_pins():
    assert tv_equal_var_gaussians(0.0, 1.0) == 0.0
    assert abs(tv_equal_var_gaussians(2.0, 1.0) - 0.6826894921370859) < 1e-12
    assert tv_equal_var_gaussians(-2.0, 1.0) == tv_equal_var_gaussians(2.0, 1.0)


def test_kernel_validation():
    with pytest.raises(ValueError):
        GaussianKernel(mean=np.zeros(2), var=0.0)
    with pytest.raises(ValueError):
        GaussianKernel(mean=np.array([math.nan]), var=1.0)
    with pytest.raises(ValueError):
        verify(np.ones(1), np.zeros(1), -1.0, np.ones(1), RngKey(0, 0, "verify"))
    with pytest.raises(ValueError):
        likelihood_ratio(np.array([math.inf]), np.zeros(1), 1.0, np.zeros(1))
