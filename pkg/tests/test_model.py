import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from itrcurves.errors import DomainError, NumericalError
from itrcurves.model import (MIN_RATIO, BaselineParams, NoiseParams, ResponseParams, Trajectory,
                             TreatmentEvent, baseline_mean, cholesky, cumulative_response,
                             curve_constants, eval_response_curve, exp_kernel, mvn_logpdf,
                             noise_covariance, outcome_loglik, peak_value, response_vector,
                             sample_ou, shared_event_counts)

FIG = ResponseParams(5.0, 0.2, 0.4, 40.0, 2.0)


def response_params():
    return st.builds(
        ResponseParams.from_ratio,
        st.floats(0.5, 20).flatmap(lambda a: st.sampled_from([a, -a])),
        st.floats(0.05, 0.95), st.floats(0.05, 0.95), st.floats(1.0, 60.0),
        st.floats(0.01, 0.99))


# -- curve constants -----------------------------------------------------------

def test_b0_example():
    b0, _ = curve_constants(ResponseParams(5.0, 0.2, 0.4, 40.0, 2.0))
    assert b0 == pytest.approx(-5 / (1 + np.exp(4)), abs=1e-12)
    assert b0 == pytest.approx(-0.08993, abs=1e-5)


def test_alpha0_is_multiplicative():
    b0, a0 = curve_constants(FIG)
    assert a0 == pytest.approx((5 + 2 * b0 - 2.0) * (1 + np.exp(-0.4 * 20)), rel=1e-12)


def test_curve_examples():
    assert eval_response_curve(FIG, 0.0) == pytest.approx(0.0, abs=1e-12)
    b0, _ = curve_constants(FIG)
    assert eval_response_curve(FIG, 40.0) == pytest.approx(b0 + 5 / (1 + np.exp(-4)), abs=1e-10)
    assert eval_response_curve(FIG, 40.0) == pytest.approx(4.8201, abs=1e-4)
    assert eval_response_curve(FIG, 400.0) == pytest.approx(2.0, abs=1e-6)


def test_curve_rejects_negative_time():
    with pytest.raises(DomainError):
        eval_response_curve(FIG, -1.0)


@settings(max_examples=200, deadline=None)
@given(response_params())
def test_curve_properties(p):
    assert abs(eval_response_curve(p, 0.0)) <= 1e-12 * max(1.0, abs(p.alpha1))
    eps = 1e-9
    left = eval_response_curve(p, p.gamma - eps)
    right = eval_response_curve(p, p.gamma + eps)
    assert abs(left - right) <= 1e-6 * max(1.0, abs(p.alpha1))
    assert eval_response_curve(p, p.gamma) == pytest.approx(
        p.alpha1 * (np.exp(p.alpha2 * p.gamma / 2) - 1) / (np.exp(p.alpha2 * p.gamma / 2) + 1),
        abs=1e-10 * max(1.0, abs(p.alpha1)))


def test_response_params_validation():
    with pytest.raises(DomainError):
        ResponseParams(5.0, 1.2, 0.4, 40.0, 2.0)
    with pytest.raises(DomainError):
        ResponseParams(5.0, 0.2, 0.4, -1.0, 2.0)
    with pytest.raises(DomainError):
        ResponseParams(5.0, 0.2, 0.4, 40.0, 6.0)
    with pytest.raises(DomainError):
        ResponseParams(5.0, 0.2, 0.4, 40.0, -1.0)


def test_zero_b_is_clamped():
    p = ResponseParams(-10.0, 0.9, 0.7, 20.0, 0.0)
    assert p.ratio == pytest.approx(MIN_RATIO)
    assert p.b == pytest.approx(MIN_RATIO * peak_value(-10.0, 0.9, 20.0))


# -- cumulative response ---------------------------------------------------------

def test_cumulative_response_examples():
    resp = {1: FIG}
    assert cumulative_response(resp, [], 50.0) == 0.0
    assert cumulative_response(resp, [TreatmentEvent(10.0, 1)], 10.0) == 0.0
    ev = [TreatmentEvent(10.0, 1), TreatmentEvent(30.0, 1)]
    expect = eval_response_curve(FIG, 90.0) + eval_response_curve(FIG, 70.0)
    assert cumulative_response(resp, ev, 100.0) == pytest.approx(expect, abs=1e-12)
    with pytest.raises(DomainError):
        cumulative_response(resp, [TreatmentEvent(1.0, 2)], 5.0)


def test_response_vector_matches_scalar_sum():
    ev = [TreatmentEvent(10.0, 1), TreatmentEvent(30.0, 1)]
    t = np.array([0.0, 10.0, 20.0, 35.0, 100.0])
    vec = response_vector(t, [10.0, 30.0], [FIG.as_array()] * 2)
    assert np.allclose(vec, [cumulative_response({1: FIG}, ev, x) for x in t], atol=1e-12)


# -- baseline mean and kernels ---------------------------------------------------

def test_baseline_mean_examples():
    assert baseline_mean([1, 0, 0], [1, 7.0, 49.0]) == 1.0
    assert baseline_mean([5, 5, 3], [1, 1, 1]) == 13.0
    assert baseline_mean([0, 0, 0], [1, 2, 4]) == 0.0
    with pytest.raises(DomainError):
        baseline_mean([1, 2], [1, 2, 3])


def test_exp_kernel_examples():
    K = exp_kernel(0.01, 0.9, [0.0, 1.0, 3.0])
    t = np.array([0.0, 1.0, 3.0])
    assert np.allclose(K, 0.01 * 0.9 ** np.abs(t[:, None] - t[None, :]), rtol=1e-14)
    assert exp_kernel(1.0, 0.5, [0.0, 1.0])[0, 1] == pytest.approx(0.5)
    assert np.allclose(np.diag(exp_kernel(2.0, 0.3, [0, 5, 9])), 2.0)
    with pytest.raises(DomainError):
        exp_kernel(1.0, 1.0, [0.0])
    with pytest.raises(DomainError):
        exp_kernel(0.0, 0.5, [0.0])


def _noise(s2=0.09, s2p=0.01, rho=0.9):
    return NoiseParams({"a": s2}, {1: s2p, 2: s2p}, {1: rho, 2: rho})


def test_noise_covariance_examples():
    t = np.array([10.0, 20.0, 25.0])
    assert np.allclose(noise_covariance(_noise(), "a", t, []), 0.09 * np.eye(3))
    one = noise_covariance(_noise(), "a", t, [TreatmentEvent(5.0, 1)])
    lag = np.abs(t[:, None] - t[None, :])
    assert np.allclose(one, 0.09 * np.eye(3) + 0.01 * 0.9 ** lag)
    two = noise_covariance(_noise(), "a", t, [TreatmentEvent(5.0, 1), TreatmentEvent(6.0, 1)])
    assert np.allclose(two, 0.09 * np.eye(3) + 2 * 0.01 * 0.9 ** lag)
    mixed = noise_covariance(_noise(), "a", t, [TreatmentEvent(15.0, 2)])
    expect = 0.09 * np.eye(3)
    expect[1:, 1:] += 0.01 * 0.9 ** lag[1:, 1:]
    assert np.allclose(mixed, expect)


def test_shared_counts_window():
    t = np.array([1.0, 5.0, 50.0])
    S = shared_event_counts(t, [0.0], [1], [1], window=10.0)[0]
    assert np.array_equal(S, np.array([[1, 1, 0], [1, 1, 0], [0, 0, 0]]))


# -- likelihood ----------------------------------------------------------------

def test_loglik_standard_normal_at_mode():
    traj = Trajectory("a", [0.0], [3.0], [[1.0]])
    ll = outcome_loglik(traj, BaselineParams([3.0], 0.5, 0.5), [0.0], {},
                        NoiseParams({"a": 1.0}, {}, {}))
    assert ll == pytest.approx(-0.5 * np.log(2 * np.pi), abs=1e-12)


def test_loglik_toy_matches_dense_oracle():
    t = np.array([0.0, 12.0, 30.0])
    X = np.column_stack([np.ones(3), t / 60, (t / 60) ** 2])
    y = np.array([1.0, 2.5, 0.3])
    ev = (TreatmentEvent(5.0, 1),)
    traj = Trajectory("a", t, y, X, ev)
    base = BaselineParams([0.5, 1.0, -0.2], 0.3, 0.8)
    u = np.array([0.1, -0.2, 0.05])
    noise = _noise(0.2, 0.05, 0.7)
    ll = outcome_loglik(traj, base, u, {1: FIG, 2: FIG}, noise)
    mean = X @ base.beta + u + np.array([cumulative_response({1: FIG}, ev, x) for x in t])
    lag = np.abs(t[:, None] - t[None, :])
    cov = 0.2 * np.eye(3)
    cov[1:, 1:] += 0.05 * 0.7 ** lag[1:, 1:]
    r = y - mean
    oracle = -0.5 * (r @ np.linalg.solve(cov, r) + np.linalg.slogdet(cov)[1] + 3 * np.log(2 * np.pi))
    assert ll == pytest.approx(oracle, abs=1e-10)


def test_loglik_without_treatments():
    t = np.array([0.0, 10.0])
    traj = Trajectory("a", t, [1.0, 2.0], np.ones((2, 1)))
    base = BaselineParams([0.5], 0.3, 0.8)
    ll = outcome_loglik(traj, base, [0.0, 0.1], {}, NoiseParams({"a": 0.5}, {}, {}))
    r = np.array([0.5, 1.4])
    assert ll == pytest.approx(float(-0.5 * (r @ r / 0.5) - np.log(0.5) - np.log(2 * np.pi)))


def test_cholesky_rejects_indefinite():
    with pytest.raises(NumericalError):
        cholesky(np.array([[1.0, 2.0], [2.0, 1.0]]))


def test_mvn_logpdf_matches_scipy():
    from scipy.stats import multivariate_normal
    cov = np.array([[2.0, 0.3], [0.3, 1.0]])
    x = np.array([0.4, -1.0])
    assert mvn_logpdf(x, np.zeros(2), cov) == pytest.approx(
        multivariate_normal(np.zeros(2), cov).logpdf(x), abs=1e-8)


def test_sample_ou_covariance():
    rng = np.random.default_rng(0)
    t = np.array([0.0, 1.0, 4.0])
    draws = sample_ou(t, 2.0, 0.7, rng, size=200000)
    emp = np.cov(draws.T)
    assert np.allclose(emp, exp_kernel(2.0, 0.7, t), atol=0.03)


# -- trajectory ----------------------------------------------------------------

def test_trajectory_validation_and_head():
    with pytest.raises(DomainError):
        Trajectory("a", [0.0, 0.0], [1, 2], np.ones((2, 1)))
    with pytest.raises(DomainError):
        Trajectory("a", [0.0, 1.0], [1], np.ones((2, 1)))
    with pytest.raises(DomainError):
        Trajectory("a", [0.0, 1.0], [1, 2], np.ones((2, 1)),
                   (TreatmentEvent(2.0, 1), TreatmentEvent(1.0, 1)))
    tr = Trajectory("a", [0.0, 1.0, 2.0], [1, 2, 3], np.ones((3, 1)),
                    (TreatmentEvent(0.5, 1), TreatmentEvent(1.5, 2)))
    h = tr.head(2)
    assert h.n_obs == 2 and h.treatments == (TreatmentEvent(0.5, 1),)


def test_treatment_event_validation():
    with pytest.raises(DomainError):
        TreatmentEvent(1.0, 0)
    with pytest.raises(DomainError):
        TreatmentEvent(float("nan"), 1)
