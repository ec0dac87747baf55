import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from itrcurves.errors import DomainError
from itrcurves.model import ResponseParams
from itrcurves.transforms import (log_fwd, log_inv, log_jacobian_log, log_jacobian_logit,
                                  log_jacobian_response, logit_fwd, logit_inv,
                                  natural_to_ratio_coords, ratio_coords_log_jacobian,
                                  ratio_coords_to_natural, ratio_coords_to_unconstrained,
                                  response_to_unconstrained, unconstrained_to_ratio_coords,
                                  unconstrained_to_response)

FIG = ResponseParams(5.0, 0.2, 0.4, 40.0, 2.0)


def natural_vector(p):
    return np.array([p.alpha1, p.alpha2, p.alpha3, p.gamma, p.b])


def to_unconstrained_natural(v):
    return response_to_unconstrained(ResponseParams(*v))


def fd_log_det(p, h=1e-6):
    """Finite-difference log|det| of the map from natural parameters to the real line."""
    v = natural_vector(p)
    J = np.empty((5, 5))
    for j in range(5):
        step = h * max(1.0, abs(v[j]))
        up, dn = v.copy(), v.copy()
        up[j] += step
        dn[j] -= step
        J[:, j] = (to_unconstrained_natural(up) - to_unconstrained_natural(dn)) / (2 * step)
    return np.linalg.slogdet(J)[1]


def test_scalar_examples():
    assert logit_fwd(0.5) == 0.0
    assert log_fwd(1.0) == 0.0
    for x in (0.01, 0.5, 0.99):
        assert logit_inv(logit_fwd(x)) == pytest.approx(x, abs=1e-12)
        assert log_inv(log_fwd(x)) == pytest.approx(x, abs=1e-12)
    assert log_jacobian_logit(0.5) == pytest.approx(np.log(4))
    assert log_jacobian_log(1.0) == 0.0
    assert log_jacobian_logit(0.9) == pytest.approx(np.log(1 / 0.09))
    h = 1e-7
    fd = (logit_fwd(0.9 + h) - logit_fwd(0.9 - h)) / (2 * h)
    assert log_jacobian_logit(0.9) == pytest.approx(np.log(fd), rel=1e-6)


@pytest.mark.parametrize("bad", [0.0, 1.0, -0.1, 1.5])
def test_logit_domain(bad):
    with pytest.raises(DomainError):
        logit_fwd(bad)
    with pytest.raises(DomainError):
        log_jacobian_logit(bad)


def test_log_domain():
    with pytest.raises(DomainError):
        log_fwd(0.0)
    with pytest.raises(DomainError):
        log_jacobian_log(-1.0)


def test_response_round_trip_and_examples():
    back = unconstrained_to_response(response_to_unconstrained(FIG))
    assert np.allclose(natural_vector(back), natural_vector(FIG), atol=1e-10)
    half = ResponseParams.from_ratio(5.0, 0.5, 0.5, 40.0, 0.5)
    assert np.allclose(response_to_unconstrained(half)[[1, 2, 4]], 0.0, atol=1e-12)
    p = ResponseParams.from_ratio(5.0, 0.2, 0.4, 40.0, 0.3)
    g = 5.0 * (np.exp(4.0) - 1) / (np.exp(4.0) + 1)
    assert g == pytest.approx(4.82014, abs=1e-5)
    assert p.b == pytest.approx(0.3 * g, rel=1e-12)


def test_jacobian_matches_finite_difference_on_reference_set():
    assert log_jacobian_response(FIG) == pytest.approx(fd_log_det(FIG), rel=1e-5)


def test_jacobian_factor_sixteen():
    p = ResponseParams.from_ratio(5.0, 0.5, 0.5, 40.0, 0.3)
    q = ResponseParams.from_ratio(5.0, 0.5, 0.5, 40.0, 0.3)
    from itrcurves.transforms import response_log_jacobian_zeta
    assert log_jacobian_response(p) - response_log_jacobian_zeta(q) == pytest.approx(np.log(16))


@settings(max_examples=60, deadline=None)
@given(st.floats(0.5, 15), st.booleans(), st.floats(0.05, 0.95), st.floats(0.05, 0.95),
       st.floats(2.0, 50.0), st.floats(0.05, 0.95))
def test_jacobian_property(a1, neg, a2, a3, gam, ratio):
    p = ResponseParams.from_ratio(-a1 if neg else a1, a2, a3, gam, ratio)
    assert log_jacobian_response(p) == pytest.approx(fd_log_det(p), rel=1e-5, abs=1e-6)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(-5, 5), min_size=5, max_size=5), st.floats(0.1, 60))
def test_ratio_coords_round_trip(z, gam):
    z = np.array(z)
    z[3] = gam
    z[0] = z[0] if abs(z[0]) > 0.1 else 1.0
    theta = unconstrained_to_ratio_coords(z)
    assert np.allclose(ratio_coords_to_unconstrained(theta), z, atol=1e-8)
    nat = ratio_coords_to_natural(theta)
    assert np.allclose(natural_to_ratio_coords(nat), theta, rtol=1e-10, atol=1e-12)


def test_ratio_coords_jacobian():
    theta = np.array([5.0, 0.2, 0.4, 40.0, 0.3])
    expect = sum(-np.log(x) - np.log1p(-x) for x in (0.2, 0.4, 0.3))
    assert ratio_coords_log_jacobian(theta) == pytest.approx(expect)
