import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import stats
from scipy.special import gammaln

from dpmnl.stick_breaking import (GAMMA_PARAMETERISATION, ConcentrationPrior, GDParams,
                                  component_prior_probs, expected_occupied_components,
                                  gdm_log_marginal, gem_weights, log_component_prior_probs,
                                  log_eta_density, sample_crp_partition, sample_stick_dp)


def test_gem_weights_half():
    np.testing.assert_allclose(gem_weights([0.5, 0.5], 3).pi, [0.5, 0.25, 0.25], rtol=0)


def test_gem_weights_boundary():
    pi = gem_weights([1 - 1e-15], 2).pi
    assert pi[0] == pytest.approx(1.0) and 0 <= pi[1] < 2e-15


def test_gem_weights_random_sum():
    pi = gem_weights(np.random.default_rng(0).uniform(size=149), 150).pi
    assert abs(pi.sum() - 1.0) <= 1e-12 and np.all(pi >= 0)


@pytest.mark.parametrize("eta", [[0.0, 0.5], [0.5, 1.0], [1.2]])
def test_gem_weights_out_of_range(eta):
    with pytest.raises(ValueError):
        gem_weights(eta, len(eta) + 1)


def test_component_prior_probs_alpha_one():
    assert component_prior_probs(1.0, 3).tolist() == [0.5, 0.25, 0.25]
    assert component_prior_probs(1.0, 4).tolist() == [0.5, 0.25, 0.125, 0.125]


def test_component_prior_probs_bad_alpha():
    with pytest.raises(ValueError):
        component_prior_probs(0.0, 3)


@settings(max_examples=60, deadline=None)
@given(st.floats(1e-3, 1e3), st.integers(1, 400))
def test_component_prior_probs_simplex(alpha, K):
    p = component_prior_probs(alpha, K)
    assert np.all(p >= 0)
    assert abs(p.sum() - 1.0) <= 1e-12
    ok = p > 1e-300
    np.testing.assert_allclose(np.log(p[ok]), log_component_prior_probs(alpha, K)[ok],
                               rtol=1e-10, atol=1e-10)


@pytest.mark.parametrize("alpha,K", [(0.5, 4), (2.0, 5), (7.0, 6)])
def test_component_prior_probs_match_expected_stick(alpha, K):
    rng = np.random.default_rng(11)
    n = 1_000_000
    eta = rng.beta(1.0, alpha, size=(n, K - 1))
    rem = np.cumprod(1 - eta, axis=1)
    pi = np.column_stack([eta[:, :1], eta[:, 1:] * rem[:, :-1], rem[:, -1:]])
    mean, se = pi.mean(0), pi.std(0) / math.sqrt(n)
    assert np.all(np.abs(mean - component_prior_probs(alpha, K)) <= 3 * se + 1e-12)


def test_log_eta_density():
    assert log_eta_density([0.3, 0.9], 1.0) == 0.0
    assert log_eta_density([0.5], 2.0) == pytest.approx(0.0, abs=1e-15)
    eta = np.array([0.1, 0.4, 0.8])
    assert log_eta_density(eta, 3.3) == pytest.approx(stats.beta(1, 3.3).logpdf(eta).sum())
    assert log_eta_density([1.0], 2.0) == -math.inf
    with pytest.raises(ValueError):
        log_eta_density([1.0], 0.5)


def test_gdm_uniform_case():
    assert abs(gdm_log_marginal([1, 1], GDParams.gem(1.0, 2)) - math.log(1 / 3)) <= 1e-10


def test_gdm_empty():
    assert gdm_log_marginal([0, 0, 0], GDParams.gem(2.0, 3)) == 0.0


def test_gdm_negative():
    with pytest.raises(ValueError):
        gdm_log_marginal([1, -1], GDParams.gem(1.0, 2))


@pytest.mark.parametrize("K,N,alpha", [(2, 3, 0.7), (3, 4, 1.0), (3, 2, 2.5), (2, 0, 1.0)])
def test_gdm_sums_to_one(K, N, alpha):
    total = [math.exp(gdm_log_marginal(c, GDParams.gem(alpha, K)))
             for c in itertools.product(range(N + 1), repeat=K) if sum(c) == N]
    assert sum(total) == pytest.approx(1.0, abs=1e-12)


def test_gdm_matches_monte_carlo():
    rng = np.random.default_rng(5)
    counts = np.array([2, 1, 1])
    eta = rng.beta(1.0, 1.0, size=(10_000_000, 2))
    pi = np.column_stack([eta[:, 0], (1 - eta[:, 0]) * eta[:, 1], (1 - eta[:, 0]) * (1 - eta[:, 1])])
    log_coef = gammaln(5) - gammaln(counts + 1).sum()
    mc = np.mean(np.exp(log_coef + np.log(pi) @ counts))
    exact = math.exp(gdm_log_marginal(counts, GDParams.gem(1.0, 3)))
    assert mc == pytest.approx(exact, rel=1e-3)


def test_gamma_prior():
    assert GAMMA_PARAMETERISATION == "scale"
    p = ConcentrationPrior()
    assert p.mode == 2.0
    assert p.logpdf(1.3) == pytest.approx(stats.gamma(2, scale=2).logpdf(1.3))


def test_stick_dp_tiny_alpha():
    rng = np.random.default_rng(0)
    d = sample_stick_dp(1e-8, lambda n, r: r.standard_normal(n), 150, 1000, rng)
    assert len(np.unique(d)) == 1


def test_stick_dp_mean_and_variance_shrink():
    rng = np.random.default_rng(1)
    base = lambda n, r: r.standard_normal(n)
    out = {}
    for a in (1.0, 10.0):
        g = np.array([np.mean(sample_stick_dp(a, base, 150, 2000, rng) <= 0) for _ in range(300)])
        out[a] = g
        assert abs(g.mean() - 0.5) <= 3 * g.std(ddof=1) / math.sqrt(len(g))
    assert out[10.0].var() < out[1.0].var()


def test_crp_basics():
    rng = np.random.default_rng(0)
    assert sample_crp_partition(2.0, 1, rng).tolist() == [0]
    assert sample_crp_partition(1e-8, 500, rng).max() == 0
    z = sample_crp_partition(3.0, 200, rng)
    # labels are introduced in order 0, 1, 2, ...
    first = [int(np.flatnonzero(z == k)[0]) for k in range(z.max() + 1)]
    assert first == sorted(first)


def test_crp_mean_cluster_count():
    rng = np.random.default_rng(2)
    c = np.array([sample_crp_partition(4.0, 60, rng).max() + 1 for _ in range(10_000)])
    assert abs(c.mean() - expected_occupied_components(4.0, 60)) <= 3 * c.std() / 100


def test_expected_occupied():
    assert round(expected_occupied_components(11.7, 455)) == 44
    assert expected_occupied_components(3.0, 1) == 1.0
    assert expected_occupied_components(1e-8, 1000) == pytest.approx(1.0, abs=1e-4)


def test_truncation_residual_under_gamma_prior():
    # residual < eps  <=>  alpha < 1 / (eps**(-1/(K-1)) - 1); compare MC with the Gamma cdf
    rng = np.random.default_rng(0)
    alpha = rng.gamma(2.0, 2.0, size=100_000)
    residual = np.array([component_prior_probs(a, 150)[-1] for a in alpha[:2000]])
    np.testing.assert_allclose(residual, (alpha[:2000] / (1 + alpha[:2000])) ** 149, rtol=1e-10)
    for eps in (1e-15, 1e-6):
        cut = 1.0 / (eps ** (-1 / 149) - 1.0)
        frac = np.mean((alpha / (1 + alpha)) ** 149 < eps)
        assert frac == pytest.approx(stats.gamma(2, scale=2).cdf(cut), abs=0.005)
