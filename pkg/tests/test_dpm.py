import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.special import logit, logsumexp
from scipy.stats import multivariate_normal, norm

from itrcurves.dpm import (BaselineComponent, BaselineComponents, Hyperparams, StickState,
                           dpm_log_density_baseline, dpm_log_density_response, log_stick_weights,
                           sample_base_baseline, sample_base_response, sample_sticks,
                           stick_weights, truncation_error_bound)
from itrcurves.errors import DomainError
from itrcurves.model import BaselineParams, ResponseParams
from itrcurves.transforms import log_jacobian_response, response_to_unconstrained


def test_stick_weight_examples():
    assert np.allclose(stick_weights([1.0]), [1.0])
    assert np.allclose(stick_weights([0.5, 1.0]), [0.5, 0.5])
    assert np.allclose(stick_weights([0.2, 0.5, 1.0]), [0.2, 0.4, 0.4])
    with pytest.raises(DomainError):
        stick_weights([0.5, 0.5])
    with pytest.raises(DomainError):
        stick_weights([-0.1, 1.0])


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(1e-6, 1.0), min_size=0, max_size=30))
def test_stick_weights_sum_to_one(v):
    w = stick_weights(v + [1.0])
    assert abs(w.sum() - 1.0) < 1e-12
    assert np.all(w >= 0)
    assert np.allclose(np.exp(log_stick_weights(np.array(v + [1.0]))), w, atol=1e-12)


def test_truncation_bound_examples():
    assert truncation_error_bound(500, 20, 1) == pytest.approx(1.12e-5, rel=0.01)
    assert truncation_error_bound(37, 1, 2.5) == pytest.approx(4 * 37)
    # direct formula 4 n exp(-(K - 1) / M); about 2.3e-14 here
    assert truncation_error_bound(500, 40, 1) == pytest.approx(2000 * np.exp(-39), rel=1e-12)
    assert truncation_error_bound(500, 40, 1) == pytest.approx(2.24e-14, rel=0.05)
    for n in range(1, 501, 50):
        assert truncation_error_bound(n, 20, 1) <= 1.2e-5


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 1000), st.integers(1, 50), st.floats(0.1, 10))
def test_truncation_bound_monotone(n, K, M):
    b = truncation_error_bound(n, K, M)
    assert truncation_error_bound(n, K + 1, M) < b
    assert truncation_error_bound(n, K, M * 1.5) > b or K == 1
    assert truncation_error_bound(n + 1, K, M) > b


def test_sample_sticks_last_is_one():
    rng = np.random.default_rng(0)
    V = sample_sticks(rng, 5, 1.0, np.array([3, 0, 2, 0, 0]))
    assert V[-1] == 1.0 and np.all((V > 0) & (V <= 1))


def test_base_baseline_degenerate_limit():
    rng = np.random.default_rng(1)
    h = Hyperparams(p=2, D=0, beta0=[1.0, -2.0], kappa0=1e8, S0=1e-6 * np.eye(2))
    draws = np.array([sample_base_baseline(h, rng).beta_star for _ in range(500)])
    se = draws.std(axis=0, ddof=1) / np.sqrt(len(draws)) + 1e-12
    assert np.all(np.abs(draws.mean(axis=0) - h.beta0) < 3 * se + 1e-6)
    for _ in range(50):
        S = sample_base_baseline(Hyperparams(p=3, D=0), rng).Sigma_star
        assert np.all(np.linalg.eigvalsh(S) > 0)


def test_base_response_moments():
    rng = np.random.default_rng(2)
    h = Hyperparams.simulation_defaults()
    draws = np.array([sample_base_response(h, 0, rng).mu_star for _ in range(10000)])
    assert np.all(np.isfinite(draws))
    assert np.allclose(draws.var(axis=0), np.diag(h.D_d0[0]), rtol=0.06)


def _comps(K, rng, p=2):
    return BaselineComponents.stack([
        BaselineComponent(rng.normal(size=p), np.eye(p) * (1 + k), rng.normal(), rng.normal())
        for k in range(K)])


def test_baseline_density_brute_force():
    rng = np.random.default_rng(3)
    h = Hyperparams(p=2, D=0)
    comps = _comps(3, rng)
    V = np.array([0.3, 0.6, 1.0])
    phi = BaselineParams([0.2, -0.4], 0.05, 0.7)
    w = stick_weights(V)
    total = 0.0
    for k in range(3):
        c = comps[k]
        dens = (multivariate_normal(c.beta_star, c.Sigma_star).pdf(phi.beta)
                * norm(c.mu_sigma_u_star, np.sqrt(h.var_sigma_within)).pdf(np.log(0.05))
                * norm(c.mu_rho_u_star, np.sqrt(h.var_rho_within)).pdf(logit(0.7)))
        total += w[k] * dens
    expect = np.log(total) - np.log(0.05) - np.log(0.7 * 0.3)
    got = dpm_log_density_baseline(phi, StickState(V, 1.0, np.zeros(1, int)), comps, h)
    assert got == pytest.approx(expect, abs=1e-10)


def test_baseline_density_collapse_and_permutation():
    rng = np.random.default_rng(4)
    h = Hyperparams(p=2, D=0)
    one = _comps(1, rng)
    two = BaselineComponents.stack([one[0], one[0]])
    phi = BaselineParams([0.1, 0.2], 0.02, 0.4)
    a = dpm_log_density_baseline(phi, StickState(np.array([1.0]), 1.0, np.zeros(1, int)), one, h)
    b = dpm_log_density_baseline(phi, StickState(np.array([0.5, 1.0]), 1.0, np.zeros(1, int)),
                                 two, h)
    assert a == pytest.approx(b, abs=1e-12)
    comps = _comps(3, rng)
    V = np.array([0.3, 0.6, 1.0])
    w = stick_weights(V)
    perm = [2, 0, 1]
    wp = w[perm]
    Vp = np.array([wp[0], wp[1] / (1 - wp[0]), 1.0])
    cp = BaselineComponents.stack([comps[k] for k in perm])
    x = dpm_log_density_baseline(phi, StickState(V, 1.0, np.zeros(1, int)), comps, h)
    y = dpm_log_density_baseline(phi, StickState(Vp, 1.0, np.zeros(1, int)), cp, h)
    assert x == pytest.approx(y, abs=1e-10)


def test_response_density_brute_force():
    h = Hyperparams.simulation_defaults()
    phi = ResponseParams.from_ratio(7.0, 0.6, 0.5, 12.0, 0.3)
    mus = np.array([[8.0, 0.0, 0.0, 10.0, 0.0], [6.0, 0.5, -0.5, 14.0, -1.0],
                    [9.0, 0.2, 0.1, 8.0, 0.3]])
    V = np.array([0.5, 0.5, 1.0])
    z = response_to_unconstrained(phi)
    terms = [np.log(wk) + multivariate_normal(m, np.diag(h.D_phi0)).logpdf(z)
             for wk, m in zip(stick_weights(V), mus)]
    expect = logsumexp(terms) + log_jacobian_response(phi)
    got = dpm_log_density_response(phi, StickState(V, 1.0, np.zeros(1, int)), mus, h)
    assert got == pytest.approx(expect, abs=1e-10)


def test_hyperparams_validation_and_shapes():
    h = Hyperparams(p=3, D=2, D_d0=[1, 2, 3, 4, 5])
    assert h.D_d0.shape == (2, 5, 5) and np.allclose(np.diag(h.D_d0[1]), [1, 2, 3, 4, 5])
    assert h.S0.shape == (3, 3) and h.nu0 == 5
    assert h.K2 == (20, 20)
    with pytest.raises(DomainError):
        Hyperparams(p=2, D=1, nu0=0.5)
    with pytest.raises(DomainError):
        Hyperparams(p=2, D=1, K1=0)
    with pytest.raises(DomainError):
        Hyperparams(p=2, D=1, fixed_sigma_u_sq=-1.0)
