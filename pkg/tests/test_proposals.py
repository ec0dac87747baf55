import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import stats
from scipy.integrate import quad

from itrcurves.errors import DomainError
from itrcurves.proposals import (accept, positive_proposal, propose_log_walk,
                                 propose_logit_walk, propose_reflected, propose_truncnorm,
                                 reflect_unit, truncnorm_log_hastings, unit_proposal)


@settings(max_examples=300, deadline=None)
@given(st.floats(1e-9, 1 - 1e-9), st.floats(0.01, 50.0), st.integers(0, 2 ** 31))
def test_reflected_stays_inside(x, scale, seed):
    y, lh = propose_reflected(np.array(x), scale, np.random.default_rng(seed))
    assert 0.0 <= float(y) <= 1.0 and float(lh) == 0.0


def test_reflect_unit_multiple_folds():
    assert np.allclose(reflect_unit([1.2, -0.3, 2.7, -1.6]), [0.8, 0.3, 0.7, 0.4])


def test_positive_log_ratio_always_accepted():
    rng = np.random.default_rng(0)
    assert all(accept(0.1, rng) for _ in range(1000))
    assert not accept(-np.inf, rng)
    assert not accept(np.nan, rng)


def test_unknown_kinds():
    with pytest.raises(DomainError):
        unit_proposal("beta")
    with pytest.raises(DomainError):
        positive_proposal("gamma")


def _trunc_density(y, x, s):
    return stats.norm.pdf(y, x, s) / stats.norm.cdf(x / s)


def test_truncnorm_hastings_pointwise_detailed_balance():
    target = stats.gamma(3.0)
    s = 0.7
    for x, y in [(0.2, 1.5), (2.0, 0.05), (4.0, 3.1)]:
        ratio = target.pdf(y) / target.pdf(x) * np.exp(truncnorm_log_hastings(x, y, s))
        fwd = target.pdf(x) * _trunc_density(y, x, s) * min(1.0, ratio)
        bwd = target.pdf(y) * _trunc_density(x, y, s) * min(1.0, 1.0 / ratio)
        assert fwd == pytest.approx(bwd, rel=1e-10)


def test_truncnorm_density_normalized_by_quadrature():
    for x in (0.05, 1.0, 3.0):
        total, _ = quad(_trunc_density, 0.0, np.inf, args=(x, 0.3))
        assert total == pytest.approx(1.0, abs=1e-8)


def _run_chain(propose, logpdf, x0, scale, n, seed):
    rng = np.random.default_rng(seed)
    x = np.array(x0)
    out = np.empty(n)
    for t in range(n):
        c, lh = propose(x, scale, rng)
        if accept(logpdf(float(c)) - logpdf(float(x)) + float(lh), rng):
            x = c
        out[t] = x
    return out


@pytest.mark.parametrize("propose,target,x0,scale", [
    (propose_truncnorm, stats.gamma(2.0, scale=0.5), 1.0, 0.8),
    (propose_log_walk, stats.gamma(2.0, scale=0.5), 1.0, 0.8),
    (propose_reflected, stats.beta(2.0, 5.0), 0.5, 0.3),
    (propose_logit_walk, stats.beta(2.0, 5.0), 0.5, 1.0),
])
def test_kernel_leaves_target_invariant(propose, target, x0, scale):
    chain = _run_chain(propose, target.logpdf, x0, scale, 30000, 11)
    thinned = chain[1000::10]
    assert stats.kstest(thinned, target.cdf).pvalue > 0.01
