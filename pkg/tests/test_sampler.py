import numpy as np
import pytest

from itrcurves.dpm import Hyperparams
from itrcurves.errors import DomainError, NumericalError
from itrcurves.sampler import Sampler, SamplerConfig, chain_seeds, run_chain, run_chains
from itrcurves.simulator import SimConfig, simulate_cohort


@pytest.fixture(scope="module")
def small():
    cohort, truth = simulate_cohort(SimConfig(n_trajectories=4, seed=3))
    h = Hyperparams.simulation_defaults(K1=3, K2=3)
    return cohort, h


def _fit(small, **kw):
    cohort, h = small
    cfg = SamplerConfig(**{"iterations": 6, "burn_in": 2, **kw})
    return run_chain(cohort, h, cfg)


def test_config_validation():
    with pytest.raises(DomainError):
        SamplerConfig(iterations=5, burn_in=5)
    with pytest.raises(DomainError):
        SamplerConfig(thin=0)
    with pytest.raises(DomainError):
        SamplerConfig(unit_proposal="beta")
    with pytest.raises(DomainError):
        SamplerConfig(scale_real=0.0)


def test_draw_count_and_single_draw(small):
    assert _fit(small).n_draws == 4
    assert _fit(small, iterations=3, burn_in=2).n_draws == 1
    assert _fit(small, iterations=9, burn_in=1, thin=4).n_draws == 2


def test_support_is_preserved(small):
    d = _fit(small, iterations=8).draws
    assert np.all(d["sigma_u_sq"] > 0) and np.all((d["rho_u"] > 0) & (d["rho_u"] < 1))
    assert np.all(d["sigma_eps_sq"] > 0) and np.all(d["sigma_eps_prime_sq"] > 0)
    assert np.all((d["rho_eps_prime"] > 0) & (d["rho_eps_prime"] < 1))
    r = d["response"]
    assert np.all((r[..., 1] > 0) & (r[..., 1] < 1) & (r[..., 2] > 0) & (r[..., 2] < 1))
    assert np.all(r[..., 3] > 0)
    peak = np.abs(r[..., 0] * np.tanh(r[..., 1] * r[..., 3] / 4))
    assert np.all((r[..., 4] * r[..., 0] >= 0) & (np.abs(r[..., 4]) <= peak + 1e-9))
    assert np.all(d["m_baseline"] > 0) and np.all(d["m_response"] > 0)
    for key, val in d.items():
        assert np.all(np.isfinite(val[~np.isnan(val)] if val.dtype.kind == "f" else val)), key


def test_same_seed_is_deterministic(small):
    a, b = _fit(small, seed=5), _fit(small, seed=5)
    for key in a.draws:
        assert np.array_equal(a.draws[key], b.draws[key], equal_nan=True), key
    assert a.acceptance == b.acceptance


def test_distinct_seeds_and_chains_differ(small):
    a, b = _fit(small, seed=5), _fit(small, seed=6)
    assert not np.array_equal(a.draws["beta"], b.draws["beta"])
    cohort, h = small
    c0, c1 = run_chains(cohort, h, SamplerConfig(iterations=3, burn_in=1, chains=2))
    assert not np.array_equal(c0.draws["beta"], c1.draws["beta"])
    s = chain_seeds(1, 3)
    assert len({tuple(x.generate_state(2)) for x in s}) == 3


def test_acceptance_rates_in_unit_interval(small):
    rates = _fit(small).acceptance_rates()
    assert set(rates) == {"gp", "noise", "response"}
    assert all(0.0 <= v <= 1.0 for v in rates.values())


def test_numerical_failure_names_iteration_and_block(small, monkeypatch):
    cohort, h = small
    s = Sampler(cohort, h, SamplerConfig(iterations=2, burn_in=1), np.random.default_rng(0))

    def boom():
        raise NumericalError("not positive definite")

    monkeypatch.setattr(s, "update_concentrations", boom)
    with pytest.raises(NumericalError, match="iteration 0, block concentrations"):
        s.sweep()


def test_fixed_values_are_held(small):
    cohort, _ = small
    h = Hyperparams.simulation_defaults(K1=3, K2=3, fixed_sigma_u_sq=0.01,
                                        fixed_sigma_eps_prime_sq=0.02)
    d = run_chain(cohort, h, SamplerConfig(iterations=4, burn_in=1)).draws
    assert np.all(d["sigma_u_sq"] == 0.01) and np.all(d["sigma_eps_prime_sq"] == 0.02)


@pytest.mark.parametrize("kw", [dict(positive_proposal="log", unit_proposal="logit"),
                                dict(concentration_update="stick"), dict(cluster_moves=True)])
def test_options_run(small, kw):
    assert _fit(small, iterations=4, **kw).n_draws == 2
