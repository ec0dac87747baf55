import numpy as np
import pytest

from itrcurves.diagnostics import (autocorrelation, batch_means_se, effective_sample_size, geweke_z,
                                   summarize)
from itrcurves.errors import DomainError


def ar1(phi, n, seed):
    rng = np.random.default_rng(seed)
    x = np.empty(n)
    x[0] = rng.standard_normal() / np.sqrt(1 - phi ** 2)
    for t in range(1, n):
        x[t] = phi * x[t - 1] + rng.standard_normal()
    return x


def test_autocorrelation_matches_direct_sum():
    x = np.random.default_rng(0).normal(size=50)
    rho = autocorrelation(x)
    c = x - x.mean()
    direct = np.array([c[: 50 - k] @ c[k:] for k in range(50)]) / (c @ c)
    assert np.allclose(rho, direct, atol=1e-12)
    assert np.allclose(autocorrelation(np.ones(5)), [1, 0, 0, 0, 0])
    with pytest.raises(DomainError):
        autocorrelation([1.0])


def test_ess_of_ar1_chain():
    phi = 0.8
    x = ar1(phi, 100000, 1)
    expect = x.size * (1 - phi) / (1 + phi)
    assert effective_sample_size(x) == pytest.approx(expect, rel=0.1)
    iid = np.random.default_rng(2).normal(size=20000)
    assert effective_sample_size(iid) == pytest.approx(20000, rel=0.1)


def test_batch_means_se_of_ar1():
    phi = 0.5
    x = ar1(phi, 200000, 3)
    expect = np.sqrt((1 / (1 - phi ** 2)) * (1 + phi) / (1 - phi) / x.size)
    assert batch_means_se(x) == pytest.approx(expect, rel=0.2)
    with pytest.raises(DomainError):
        batch_means_se([1.0], n_batches=2)


def test_geweke_z_detects_shift_only():
    rng = np.random.default_rng(4)
    f = rng.normal(size=5000)
    s = ar1(0.5, 5000, 5) * np.sqrt(1 - 0.25)
    assert abs(geweke_z(f, s)) < 3
    assert abs(geweke_z(f + 0.5, s)) > 5


def test_summarize_labels_and_values():
    draws = {"a": np.arange(10.0), "b": np.arange(20.0).reshape(10, 2),
             "c": np.full((10, 1), np.nan)}
    rows = summarize(draws)
    labels = [r[0] for r in rows]
    assert labels == ["a", "b[0]", "b[1]"]
    assert rows[0][1] == pytest.approx(4.5)
    assert rows[1][3] == pytest.approx(np.quantile(np.arange(0, 20, 2.0), 0.025))
