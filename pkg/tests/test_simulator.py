import numpy as np
import pytest

from itrcurves.errors import DomainError
from itrcurves.model import eval_response_curve, ResponseParams
from itrcurves.simulator import (POLICY_TABLE, SimConfig, covariate_rows, discretize_outcome,
                                 sample_policy_action, simulate_cohort)


def test_policy_rows_are_distributions():
    assert len(POLICY_TABLE) == 9
    for probs in POLICY_TABLE.values():
        assert sum(probs) == pytest.approx(1.0)
    assert POLICY_TABLE[(2, 2)] == (0.1, 0.1, 0.8)
    assert POLICY_TABLE[(0, 0)] == (0.3, 0.5, 0.2)


def test_discretize_examples():
    assert [discretize_outcome(y) for y in (10, 15, 20, 25, 30)] == [0, 1, 1, 1, 2]
    with pytest.raises(DomainError):
        discretize_outcome(1.0, (5, 1))
    with pytest.raises(DomainError):
        sample_policy_action(3, 0, np.random.default_rng(0))


def test_covariates_are_polynomial_in_time():
    X = covariate_rows([0.0, 360.0, 720.0], 720.0)
    assert np.allclose(X, [[1, 0, 0], [1, 0.5, 0.25], [1, 1, 1]])


def test_config_validation():
    with pytest.raises(DomainError):
        SimConfig(n_trajectories=0)
    with pytest.raises(DomainError):
        SimConfig(obs_gap_minutes=(10, 5))
    with pytest.raises(DomainError):
        SimConfig(rho_eps_prime=1.0)
    with pytest.raises(DomainError):
        SimConfig(response_components=(((5.0, 1.2, 0.5, 10.0, 0.0),),))


def test_same_seed_same_cohort_and_order_free():
    a, ta = simulate_cohort(SimConfig(n_trajectories=5, seed=4))
    b, tb = simulate_cohort(SimConfig(n_trajectories=5, seed=4))
    for x, y in zip(a, b):
        assert np.array_equal(x.outcomes, y.outcomes) and x.treatments == y.treatments
    c, _ = simulate_cohort(SimConfig(n_trajectories=3, seed=4))
    assert np.array_equal(c[2].outcomes, a[2].outcomes)
    d, _ = simulate_cohort(SimConfig(n_trajectories=5, seed=5))
    assert not np.array_equal(d[0].outcomes, a[0].outcomes)


def test_gaps_and_ranges():
    cfg = SimConfig(n_trajectories=20, seed=1)
    cohort, truth = simulate_cohort(cfg)
    for tr in cohort:
        gaps = np.diff(tr.times)
        assert tr.times[0] == 0.0
        assert np.all((gaps >= 5.0) & (gaps <= 15.0))
        assert tr.times[-1] <= 24 * 60
        ev = np.array([e.time for e in tr.treatments])
        if ev.size > 1:
            assert np.all(np.diff(ev) >= 60.0 - 1e-9)
        assert all(e.kind in (1, 2) for e in tr.treatments)
    assert set(np.unique(truth.baseline_labels)) <= {1, 2, 3}
    assert truth.response_labels.shape == (20, 2)


def test_zero_noise_reconstruction():
    cfg = SimConfig(n_trajectories=4, seed=2, sigma_eps_sq=0.0, sigma_eps_prime_sq=0.0)
    cohort, truth = simulate_cohort(cfg)
    for i, tr in enumerate(cohort):
        assert np.allclose(tr.outcomes, truth.baseline[i] + truth.response_values[i], atol=1e-12)
        assert np.allclose(truth.baseline[i], tr.covariates @ truth.beta[i] + truth.random_effect[i])
        f = np.zeros(tr.n_obs)
        for e in tr.treatments:
            p = ResponseParams(*truth.response[i, e.kind - 1])
            f += [eval_response_curve(p, t - e.time) if t > e.time else 0.0 for t in tr.times]
        assert np.allclose(truth.response_values[i], f, atol=1e-9)


def test_zero_spread_gives_component_values():
    cfg = SimConfig(n_trajectories=6, seed=3, baseline_spread=0.0, response_spread=0.0)
    _, truth = simulate_cohort(cfg)
    for i in range(6):
        assert np.allclose(truth.beta[i], cfg.baseline_beta[truth.baseline_labels[i] - 1])


def test_cohort_statistics():
    cohort, _ = simulate_cohort(SimConfig(n_trajectories=300, seed=0))
    n_obs = np.mean([tr.n_obs for tr in cohort])
    n_trt = np.mean([len(tr.treatments) for tr in cohort])
    assert abs(n_obs - 126) <= 5 and abs(n_trt - 9) <= 1


def test_policy_frequencies_match_table():
    rng = np.random.default_rng(0)
    n = 10000
    for (prev, level), probs in POLICY_TABLE.items():
        draws = np.array([sample_policy_action(prev, level, rng) for _ in range(n)])
        freq = np.bincount(draws, minlength=3) / n
        se = np.sqrt(np.array(probs) * (1 - np.array(probs)) / n)
        assert np.all(np.abs(freq - probs) <= 3 * se + 1e-12), (prev, level, freq)
