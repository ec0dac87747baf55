"""Posterior sampler.

Blocked Gibbs updates handle the mixture components, sticks, assignments,
regression coefficients, random effects and iid noise variances;
Metropolis-Hastings handles the kernel parameters and the response curves.
One sweep runs the blocks in a fixed order:

1-5   baseline mixture (locations, sticks, assignments)
6-8   response mixtures, one per treatment type
9-11  per-individual regression, random effect and noise variance
12-13 concentrations
14    per-individual random-effect kernel (collapsed over ``u``, then ``u`` redrawn)
15    treatment-noise kernel
16    per-individual, per-type response curves

Response parameters are carried in *ratio coordinates*
``(alpha1, alpha2, alpha3, gamma, b / g(gamma))``; the proposals act on these.
"""
from __future__ import annotations

import dataclasses
import sys
import time
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.linalg import cho_solve, solve_triangular
from scipy.special import expit, logit
from scipy.stats import invwishart

from .dpm import (BaselineComponents, Hyperparams, StickState, log_stick_weights,
                  response_component_logpdf, sample_base_baseline, sample_base_response,
                  sample_sticks)
from .errors import DomainError, NumericalError
from .model import (LOG_2PI, BaselineParams, NoiseParams, ResponseParams, Trajectory,
                    cholesky, curve_array, sample_ou, shared_event_counts)
from .proposals import accept, positive_proposal, propose_normal, unit_proposal
from .transforms import (ratio_coords_log_jacobian, ratio_coords_to_natural,
                         ratio_coords_to_unconstrained, unconstrained_to_ratio_coords)

MH_BLOCKS = ("gp", "noise", "response")


# ---------------------------------------------------------------------------
# conjugate posteriors
# ---------------------------------------------------------------------------


def niw_posterior(B, beta0, kappa0, nu0, S0):
    """Normal-inverse-Wishart posterior ``(m, kappa, nu, S)`` given rows of ``B``."""
    beta0 = np.asarray(beta0, dtype=float)
    B = np.asarray(B, dtype=float).reshape(-1, beta0.size)
    n = B.shape[0]
    if n == 0:
        return beta0.copy(), float(kappa0), float(nu0), np.array(S0, dtype=float)
    kappa, nu = kappa0 + n, nu0 + n
    xbar = B.mean(axis=0)
    m = (kappa0 * beta0 + B.sum(axis=0)) / kappa
    C = B - xbar
    dev = xbar - beta0
    # centred form of S0 + sum b b' + kappa0 b0 b0' - kappa m m'
    S = S0 + C.T @ C + (kappa0 * n / kappa) * np.outer(dev, dev)
    return m, float(kappa), float(nu), 0.5 * (S + S.T)


def normal_location_posterior(x, mu0, var0, var_within):
    """Posterior ``(mean, var)`` of a Gaussian mean with prior ``N(mu0, var0)``."""
    x = np.asarray(x, dtype=float).reshape(-1)
    prec = 1.0 / var0 + x.size / var_within
    return (mu0 / var0 + x.sum() / var_within) / prec, 1.0 / prec


def response_location_posterior(Zs, mu0, D0, D_phi0):
    """Posterior ``(mean, cov)`` of a response component location.

    ``Zs`` holds the transformed parameters of the members, one row each.
    """
    Zs = np.asarray(Zs, dtype=float).reshape(-1, 5)
    D0_inv = np.linalg.inv(D0)
    prec = D0_inv + Zs.shape[0] * np.diag(1.0 / D_phi0)
    cov = np.linalg.inv(prec)
    mean = cov @ (D0_inv @ mu0 + Zs.sum(axis=0) / D_phi0)
    return mean, 0.5 * (cov + cov.T)


def regression_posterior(X, r, noise_chol, prior_mean, prior_cov):
    """Posterior ``(mean, cov)`` of ``beta`` in ``r = X beta + e``, ``e ~ N(0, L L')``."""
    A = solve_triangular(noise_chol, X, lower=True, check_finite=False)
    b = solve_triangular(noise_chol, r, lower=True, check_finite=False)
    P0 = np.linalg.inv(prior_cov)
    cov = np.linalg.inv(P0 + A.T @ A)
    cov = 0.5 * (cov + cov.T)
    return cov @ (P0 @ prior_mean + A.T @ b), cov


def gaussian_signal_posterior(K, noise_cov, r):
    """Posterior ``(mean, cov)`` of ``s`` in ``r = s + e``, ``s ~ N(0, K)``, ``e ~ N(0, noise_cov)``."""
    L = cholesky(K + noise_cov)
    mean = K @ cho_solve((L, True), r)
    cov = K - K @ cho_solve((L, True), K)
    return mean, 0.5 * (cov + cov.T)


def inverse_gamma_posterior(shape0, scale0, resid):
    resid = np.asarray(resid, dtype=float)
    return shape0 + 0.5 * resid.size, scale0 + 0.5 * float(resid @ resid)


def escobar_west_weights(k, n, c, d, eta):
    """Mixture weights and common rate of the auxiliary-variable concentration update."""
    rate = d - np.log(eta)
    a = c + k - 1.0
    w = a / (a + n * rate)
    return np.array([w, 1.0 - w]), rate


def sample_concentration_ew(M, k, n, c, d, rng):
    """One auxiliary-variable update of a concentration given ``k`` occupied clusters."""
    eta = rng.beta(M + 1.0, n)
    eta = max(eta, 1e-300)
    (w, _), rate = escobar_west_weights(k, n, c, d, eta)
    shape = c + k if rng.uniform() < w else c + k - 1.0
    return float(rng.gamma(shape, 1.0 / rate))


def sample_concentration_sticks(V, c, d, rng, log1m_V=None):
    """Exact conditional of a concentration given the truncated sticks."""
    if log1m_V is None:
        with np.errstate(divide="ignore"):
            log1m_V = np.log1p(-np.asarray(V, dtype=float))
    rate = d - np.sum(log1m_V[:-1])
    return float(rng.gamma(c + V.size - 1.0, 1.0 / rate))


def _mvn_draw(mean, cov, rng):
    return mean + np.linalg.cholesky(cov) @ rng.standard_normal(mean.size)


def _categorical_rows(logp, rng):
    """One categorical draw per row of unnormalized log-probabilities."""
    logp = logp - logp.max(axis=1, keepdims=True)
    cum = np.cumsum(np.exp(logp), axis=1)
    u = rng.random(logp.shape[0]) * cum[:, -1]
    return np.minimum((cum < u[:, None]).sum(axis=1), logp.shape[1] - 1)


def _norm_logpdf(x, mean, var):
    return -0.5 * (LOG_2PI + np.log(var) + (x - mean) ** 2 / var)


# ---------------------------------------------------------------------------
# configuration, state and trace
# ---------------------------------------------------------------------------


@dataclass
class SamplerConfig:
    """Run settings.

    Proposal scales default to 0.3 for real and positive scalars and 0.15 for
    unit-interval scalars; ``gp_scales`` ``(sigma_u^2, rho_u)``,
    ``noise_scales`` ``(sigma_eps'^2, rho_eps')`` and ``response_scales``
    ``(alpha1, alpha2, alpha3, gamma, ratio)`` override them per block.
    ``positive_proposal`` is ``"truncnorm"`` or ``"log"``; ``unit_proposal`` is
    ``"reflect"`` or ``"logit"``.  With ``"log"`` / ``"logit"`` the scale is on
    the transformed axis.  ``cluster_moves`` adds the cluster shift, reassign and
    relabel moves after each sweep; ``None`` enables them only when the
    within-component spreads are collapsed.
    """

    iterations: int = 2000
    burn_in: int = 1000
    thin: int = 1
    chains: int = 1
    seed: int = 0
    scale_real: float = 0.3
    scale_positive: float = 0.3
    scale_unit: float = 0.15
    gp_scales: Optional[tuple] = None
    noise_scales: Optional[tuple] = None
    response_scales: Optional[tuple] = None
    positive_proposal: str = "truncnorm"
    unit_proposal: str = "reflect"
    concentration_update: str = "escobar_west"
    cluster_moves: Optional[bool] = None
    cluster_shift_scale: float = 0.1
    variant: str = "itr"
    progress_every: int = 0

    def __post_init__(self):
        if self.iterations < 1 or self.burn_in < 0 or self.burn_in >= self.iterations:
            raise DomainError("need 0 <= burn_in < iterations")
        if self.thin < 1 or self.chains < 1:
            raise DomainError("thin and chains must be >= 1")
        for name in ("scale_real", "scale_positive", "scale_unit", "cluster_shift_scale"):
            if not getattr(self, name) > 0:
                raise DomainError(f"{name} must be positive")
        positive_proposal(self.positive_proposal)
        unit_proposal(self.unit_proposal)
        if self.concentration_update not in ("escobar_west", "stick"):
            raise DomainError("concentration_update must be 'escobar_west' or 'stick'")
        self.gp_scales = self._scales(self.gp_scales, (self.scale_positive, self.scale_unit))
        self.noise_scales = self._scales(self.noise_scales, (self.scale_positive, self.scale_unit))
        self.response_scales = self._scales(
            self.response_scales,
            (self.scale_real, self.scale_unit, self.scale_unit, self.scale_real, self.scale_unit))

    @staticmethod
    def _scales(value, default):
        out = tuple(float(v) for v in (default if value is None else value))
        if len(out) != len(default) or any(not v > 0 for v in out):
            raise DomainError(f"expected {len(default)} positive proposal scales")
        return out

    @property
    def n_draws(self):
        return (self.iterations - self.burn_in) // self.thin

    def replace(self, **changes):
        return dataclasses.replace(self, **changes)


@dataclass
class ChainState:
    """Every unknown of the model for one chain.

    Individuals are indexed ``0..I-1`` and treatment types ``0..D-1`` (type
    ``d`` of the data is index ``d - 1``); assignments are 0-based.
    """

    beta: np.ndarray
    u: list
    sigma_u_sq: np.ndarray
    rho_u: np.ndarray
    resp: np.ndarray
    sigma_eps_sq: np.ndarray
    sigma_eps_prime_sq: np.ndarray
    rho_eps_prime: np.ndarray
    base_sticks: StickState
    base_comps: BaselineComponents
    resp_sticks: list
    resp_mu: list
    iteration: int = 0

    def copy(self):
        return ChainState(
            self.beta.copy(), [x.copy() for x in self.u], self.sigma_u_sq.copy(),
            self.rho_u.copy(), self.resp.copy(), self.sigma_eps_sq.copy(),
            self.sigma_eps_prime_sq.copy(), self.rho_eps_prime.copy(),
            dataclasses.replace(self.base_sticks, V=self.base_sticks.V.copy(), Z=self.base_sticks.Z.copy()),
            BaselineComponents(self.base_comps.beta_star.copy(), self.base_comps.Sigma_star.copy(),
                               self.base_comps.mu_sigma_u_star.copy(),
                               self.base_comps.mu_rho_u_star.copy()),
            [dataclasses.replace(s, V=s.V.copy(), Z=s.Z.copy()) for s in self.resp_sticks],
            [m.copy() for m in self.resp_mu], self.iteration)


@dataclass
class ParameterDraw:
    """The individual-level parameters of one retained draw."""

    ids: tuple
    beta: np.ndarray
    sigma_u_sq: np.ndarray
    rho_u: np.ndarray
    response: np.ndarray       # (I, D, 5) natural: alpha1, alpha2, alpha3, gamma, b
    sigma_eps_sq: np.ndarray
    sigma_eps_prime_sq: np.ndarray
    rho_eps_prime: np.ndarray

    def index(self, individual):
        if isinstance(individual, (int, np.integer)):
            return int(individual)
        try:
            return self.ids.index(str(individual))
        except ValueError:
            raise DomainError(f"unknown individual {individual!r}") from None

    def baseline(self, individual):
        i = self.index(individual)
        return BaselineParams(self.beta[i], self.sigma_u_sq[i], self.rho_u[i])

    def response_params(self, individual):
        i = self.index(individual)
        out = {}
        for d, row in enumerate(self.response[i]):
            a1, a2, a3, gam, b = row
            out[d + 1] = ResponseParams.from_ratio(a1, a2, a3, gam, b / _peak(row))
        return out

    def noise(self, individual):
        i = self.index(individual)
        kinds = range(1, self.sigma_eps_prime_sq.size + 1)
        return NoiseParams({self.ids[i]: float(self.sigma_eps_sq[i])},
                           {d: float(v) for d, v in zip(kinds, self.sigma_eps_prime_sq)},
                           {d: float(v) for d, v in zip(kinds, self.rho_eps_prime)})


def _peak(row):
    return row[0] * np.tanh(row[1] * row[3] / 4.0)


@dataclass
class PosteriorTrace:
    """Retained draws of one chain plus acceptance counts and timing.

    ``draws`` maps parameter names to arrays whose first axis indexes draws.
    ``acceptance`` maps MH block names to ``[accepted, proposed]`` counted
    after burn-in.
    """

    draws: dict
    acceptance: dict
    meta: dict
    elapsed_seconds: float = 0.0

    @property
    def n_draws(self):
        return int(self.draws["beta"].shape[0])

    def acceptance_rates(self):
        return {k: (a / n if n else float("nan")) for k, (a, n) in self.acceptance.items()}

    def draw(self, k):
        return ParameterDraw(tuple(self.meta["ids"]), self.draws["beta"][k],
                             self.draws["sigma_u_sq"][k], self.draws["rho_u"][k],
                             self.draws["response"][k], self.draws["sigma_eps_sq"][k],
                             self.draws["sigma_eps_prime_sq"][k], self.draws["rho_eps_prime"][k])

    def random_effect(self, k, individual):
        """Random-effect vector of one individual in draw ``k``."""
        i = self.draw(k).index(individual)
        offs = np.concatenate([[0], np.cumsum(self.meta["n_obs"])])
        return self.draws["u"][k, offs[i]:offs[i + 1]]


# ---------------------------------------------------------------------------
# per-trajectory data
# ---------------------------------------------------------------------------


class _Unit:
    """Precomputed design quantities of one trajectory."""

    def __init__(self, traj: Trajectory, D, window=None):
        self.id = traj.id
        self.y = np.array(traj.outcomes, dtype=float)
        self.X = np.asarray(traj.covariates, dtype=float)
        self.t = np.asarray(traj.times, dtype=float)
        self.J = self.t.size
        self.lags = np.abs(self.t[:, None] - self.t[None, :])
        kinds = traj.event_kinds
        if kinds.size and kinds.max() > D:
            raise DomainError(f"trajectory {traj.id!r} has treatment type {kinds.max()} > D={D}")
        ev_t = traj.event_times
        self.ev_d = kinds - 1
        lag = self.t[:, None] - ev_t[None, :]
        self.active = lag > 0
        self.lag = np.where(self.active, lag, 0.0)
        self.by_type = [np.flatnonzero(self.ev_d == d) for d in range(D)]
        self.shared = shared_event_counts(self.t, ev_t, kinds, list(range(1, D + 1)), window)
        self.noise_types = [d for d in range(D) if self.shared[d].any()]
        diag = self.shared.sum(axis=0).diagonal() if D else np.zeros(self.J)
        self.noise_rows = np.flatnonzero(diag > 0)

    def response_part(self, d, theta):
        """Contribution of all type-``d`` events given ratio coordinates ``theta``."""
        idx = self.by_type[d]
        if idx.size == 0:
            return np.zeros(self.J)
        a1, a2, a3, gam, ratio = theta
        b = ratio * a1 * np.tanh(a2 * gam / 4.0)
        vals = curve_array(self.lag[:, idx], a1, a2, a3, gam, b)
        return np.where(self.active[:, idx], vals, 0.0).sum(axis=1)

    def gp_kernel(self, sigma_sq, rho):
        return sigma_sq * np.exp(np.log(rho) * self.lags)

    def noise_kernel(self, sigma_sq, rho):
        K = np.zeros((self.J, self.J))
        for d in self.noise_types:
            K += self.shared[d] * (sigma_sq[d] * np.exp(np.log(rho[d]) * self.lags))
        return K


# ---------------------------------------------------------------------------
# prior draws
# ---------------------------------------------------------------------------


def _draw_response_z(mu, D_phi0, rng, max_tries=10000):
    """Kernel draw of transformed response parameters, rejecting ``gamma <= 0``."""
    sd = np.sqrt(D_phi0)
    for _ in range(max_tries):
        z = mu + sd * rng.standard_normal(5)
        if z[3] > 0:
            return z
    raise NumericalError("could not draw a positive switch point from the prior")


def sample_prior_state(units, h: Hyperparams, rng):
    """Draw every unknown from the prior (given the observation design)."""
    I = len(units)
    if h.pin_assignments and (h.K1 < I or any(k < I for k in h.K2)):
        raise DomainError("pinned assignments need truncation levels >= number of individuals")

    def concentration(c, d):
        return float(h.fixed_concentration) if h.fixed_concentration else float(rng.gamma(c, 1.0 / d))

    def assignments(V, log1m):
        if h.pin_assignments:
            return np.arange(I)
        return _categorical_rows(np.tile(log_stick_weights(V, log1m), (I, 1)), rng)

    M1 = concentration(h.c1, h.d1)
    V1, L1 = sample_sticks(rng, h.K1, M1, return_log=True)
    comps = BaselineComponents.stack([sample_base_baseline(h, rng) for _ in range(h.K1)])
    Z1 = assignments(V1, L1)
    beta = np.empty((I, h.p))
    s2u = np.empty(I)
    rho = np.empty(I)
    for i in range(I):
        k = Z1[i]
        beta[i] = _mvn_draw(comps.beta_star[k], comps.Sigma_star[k], rng)
        if h.fixed_sigma_u_sq is not None:
            s2u[i] = h.fixed_sigma_u_sq
        else:
            s2u[i] = np.exp(comps.mu_sigma_u_star[k] + np.sqrt(h.var_sigma_within) * rng.standard_normal())
        rho[i] = expit(comps.mu_rho_u_star[k] + np.sqrt(h.var_rho_within) * rng.standard_normal())
    resp = np.empty((I, h.D, 5))
    resp_sticks, resp_mu = [], []
    for d in range(h.D):
        M2 = concentration(h.c2[d], h.d2[d])
        V2, L2 = sample_sticks(rng, h.K2[d], M2, return_log=True)
        mu = np.array([sample_base_response(h, d, rng).mu_star for _ in range(h.K2[d])])
        Z2 = assignments(V2, L2)
        for i in range(I):
            resp[i, d] = unconstrained_to_ratio_coords(_draw_response_z(mu[Z2[i]], h.D_phi0, rng))
        resp_sticks.append(StickState(V2, M2, Z2, L2))
        resp_mu.append(mu)
    s2e = h.nu_eps / rng.gamma(h.s_eps, size=I)
    if h.fixed_sigma_eps_prime_sq is not None:
        s2p = np.full(h.D, float(h.fixed_sigma_eps_prime_sq))
    else:
        s2p = np.exp(h.mu_eps1 + np.sqrt(h.var_eps1) * rng.standard_normal(h.D))
    rhop = expit(h.mu_eps2 + np.sqrt(h.var_eps2) * rng.standard_normal(h.D))
    u = [sample_ou(un.t, s2u[i], rho[i], rng) for i, un in enumerate(units)]
    return ChainState(beta, u, s2u, rho, resp, s2e, s2p, rhop,
                      StickState(V1, M1, Z1, L1), comps, resp_sticks, resp_mu)


# ---------------------------------------------------------------------------
# the sampler
# ---------------------------------------------------------------------------


class Sampler:
    """One chain: data, hyperparameters, configuration, state and RNG."""

    def __init__(self, cohort: Sequence[Trajectory], h: Hyperparams, cfg: SamplerConfig,
                 rng=None, state: Optional[ChainState] = None):
        if len(cohort) == 0:
            raise DomainError("cohort is empty")
        self.h = h
        self.cfg = cfg
        self.rng = np.random.default_rng(cfg.seed) if rng is None else rng
        window = h.noise_window_minutes
        self.units = [_Unit(tr, h.D, window) for tr in cohort]
        for un in self.units:
            if un.X.shape[1] != h.p:
                raise DomainError(f"trajectory {un.id!r} has {un.X.shape[1]} covariates, expected p={h.p}")
        self.I = len(self.units)
        self.D = h.D
        self.state = sample_prior_state(self.units, h, self.rng) if state is None else state
        self.counts = {b: [0, 0] for b in MH_BLOCKS}
        self._unit_prop = unit_proposal(cfg.unit_proposal)
        self._pos_prop = positive_proposal(cfg.positive_proposal)
        moves = cfg.cluster_moves
        if moves is None:
            moves = (h.fixed_sigma_star is not None or np.all(h.D_phi0 < 1e-4)
                     or h.var_rho_within < 1e-4)
        self.cluster_moves = bool(moves)
        self.refresh()

    # -- caches ----------------------------------------------------------------

    def refresh(self):
        """Recompute every cached quantity from the state."""
        st = self.state
        self._f_parts = [np.array([un.response_part(d, st.resp[i, d]) for d in range(self.D)])
                         .reshape(self.D, un.J) for i, un in enumerate(self.units)]
        self._Keps = [un.noise_kernel(st.sigma_eps_prime_sq, st.rho_eps_prime) for un in self.units]
        self._Lsig = [None] * self.I
        self._sig_ver = [0] * self.I
        self._ku = [{} for _ in range(self.I)]
        self._ach = [{} for _ in range(self.I)]

    @staticmethod
    def _cache_put(cache, key, value, size=2):
        if len(cache) >= size:
            del cache[next(iter(cache))]
        cache[key] = value
        return value

    def _ku_entry(self, i, s2, rho):
        key = (float(s2), float(rho))
        entry = self._ku[i].get(key)
        if entry is None:
            entry = self._cache_put(self._ku[i], key, [self.units[i].gp_kernel(s2, rho), None])
        return entry

    def ku(self, i, s2, rho):
        """``K_u`` of individual ``i``; the last two parameter pairs are cached."""
        return self._ku_entry(i, s2, rho)[0]

    def ku_chol(self, i, s2, rho):
        entry = self._ku_entry(i, s2, rho)
        if entry[1] is None:
            entry[1] = cholesky(entry[0])
        return entry[1]

    def a_chol(self, i, s2, rho):
        """Cached factor of ``K_u + Sigma_i``."""
        key = (float(s2), float(rho), self._sig_ver[i])
        L = self._ach[i].get(key)
        if L is None:
            L = self._cache_put(self._ach[i], key, cholesky(self.ku(i, s2, rho) + self.sigma_cov(i)))
        return L

    def _sigma_changed(self, i, L=None):
        self._Lsig[i] = L
        self._sig_ver[i] += 1

    def f(self, i):
        return self._f_parts[i].sum(axis=0)

    def sigma_cov(self, i):
        un = self.units[i]
        return self._Keps[i] + self.state.sigma_eps_sq[i] * np.eye(un.J)

    def sigma_chol(self, i):
        if self._Lsig[i] is None:
            st = self.state
            if self.units[i].noise_rows.size:
                self._Lsig[i] = cholesky(self.sigma_cov(i))
            else:
                self._Lsig[i] = np.sqrt(st.sigma_eps_sq[i]) * np.eye(self.units[i].J)
        return self._Lsig[i]

    def _record_mh(self, block, accepted):
        if self.state.iteration >= self.cfg.burn_in:
            self.counts[block][1] += 1
            self.counts[block][0] += int(accepted)

    # -- baseline mixture ----------------------------------------------------

    def update_baseline_components(self):
        st, h, rng = self.state, self.h, self.rng
        comps, Z = st.base_comps, st.base_sticks.Z
        for k in range(h.K1):
            B = st.beta[Z == k]
            if h.fixed_sigma_star is not None:
                P = np.linalg.inv(h.fixed_sigma_star)
                cov = np.linalg.inv(np.eye(h.p) / h.beta_star_base_var + B.shape[0] * P)
                mean = cov @ (h.beta0 / h.beta_star_base_var + P @ B.sum(axis=0))
                comps.beta_star[k] = _mvn_draw(mean, 0.5 * (cov + cov.T), rng)
                comps.Sigma_star[k] = h.fixed_sigma_star
            else:
                m, kappa, nu, S = niw_posterior(B, h.beta0, h.kappa0, h.nu0, h.S0)
                Sig = np.atleast_2d(invwishart.rvs(df=nu, scale=S, random_state=rng))
                Sig = 0.5 * (Sig + Sig.T)
                comps.Sigma_star[k] = Sig
                comps.beta_star[k] = _mvn_draw(m, Sig / kappa, rng)
        for k in range(h.K1):
            members = Z == k
            x = np.log(st.sigma_u_sq[members]) if h.fixed_sigma_u_sq is None else np.empty(0)
            mean, var = normal_location_posterior(x, h.mu_sigma0, h.var_sigma0, h.var_sigma_within)
            comps.mu_sigma_u_star[k] = mean + np.sqrt(var) * rng.standard_normal()
        for k in range(h.K1):
            x = logit(st.rho_u[Z == k])
            mean, var = normal_location_posterior(x, h.mu_rho0, h.var_rho0, h.var_rho_within)
            comps.mu_rho_u_star[k] = mean + np.sqrt(var) * rng.standard_normal()
        sticks = st.base_sticks
        sticks.V, sticks.log1m_V = sample_sticks(rng, h.K1, sticks.M, sticks.counts(), True)
        if not h.pin_assignments:
            sticks.Z = _categorical_rows(sticks.log_weights()[None, :]
                                         + self.baseline_kernel_logpdf(), rng)

    def baseline_kernel_logpdf(self, rows=None):
        """``(I, K1)`` log kernel densities of the transformed baseline parameters.

        ``rows`` restricts the result to a subset of individuals.
        """
        st, h = self.state, self.h
        comps = st.base_comps
        sel = slice(None) if rows is None else rows
        beta, s2u, rho = st.beta[sel], st.sigma_u_sq[sel], st.rho_u[sel]
        L = np.linalg.cholesky(comps.Sigma_star)
        diff = beta[:, None, :] - comps.beta_star[None, :, :]
        zz = np.linalg.solve(L[None], diff[..., None])[..., 0]
        out = (-0.5 * np.sum(zz * zz, axis=-1)
               - np.log(np.diagonal(L, axis1=1, axis2=2)).sum(axis=1)[None, :]
               - 0.5 * h.p * LOG_2PI)
        if h.fixed_sigma_u_sq is None:
            out = out + _norm_logpdf(np.log(s2u)[:, None], comps.mu_sigma_u_star[None, :],
                                     h.var_sigma_within)
        return out + _norm_logpdf(logit(rho)[:, None], comps.mu_rho_u_star[None, :],
                                  h.var_rho_within)

    # -- response mixtures ---------------------------------------------------

    def update_response_components(self, d):
        st, h, rng = self.state, self.h, self.rng
        sticks, mu = st.resp_sticks[d], st.resp_mu[d]
        zs = ratio_coords_to_unconstrained(st.resp[:, d, :])
        for k in range(h.K2[d]):
            mean, cov = response_location_posterior(zs[sticks.Z == k], h.mu_d0[d], h.D_d0[d], h.D_phi0)
            mu[k] = _mvn_draw(mean, cov, rng)
        sticks.V, sticks.log1m_V = sample_sticks(rng, h.K2[d], sticks.M, sticks.counts(), True)
        if not h.pin_assignments:
            logp = (sticks.log_weights()[None, :]
                    + response_component_logpdf(zs[:, None, :], mu[None, :, :], h.D_phi0))
            sticks.Z = _categorical_rows(logp, rng)

    # -- regression, random effect and noise variance ------------------------

    def _draw_random_effect(self, i, A_chol=None):
        """Exact draw of ``u_i`` given everything else (Matheron's rule)."""
        st, un, rng = self.state, self.units[i], self.rng
        s2, rho = st.sigma_u_sq[i], st.rho_u[i]
        Ku = self.ku(i, s2, rho)
        if A_chol is None:
            A_chol = self.a_chol(i, s2, rho)
        r = un.y - un.X @ st.beta[i] - self.f(i)
        a = self.ku_chol(i, s2, rho) @ rng.standard_normal(un.J)
        e = self.sigma_chol(i) @ rng.standard_normal(un.J)
        st.u[i] = a + Ku @ cho_solve((A_chol, True), r - a - e)

    def _draw_regression_and_effect(self, i):
        """Exact joint draw of ``(beta_i, u_i)``.

        ``beta_i`` is drawn with ``u_i`` integrated out, then ``u_i`` given ``beta_i``.
        """
        st, un = self.state, self.units[i]
        A_chol = self.a_chol(i, st.sigma_u_sq[i], st.rho_u[i])
        k = st.base_sticks.Z[i]
        mean, cov = regression_posterior(un.X, un.y - self.f(i), A_chol,
                                         st.base_comps.beta_star[k], st.base_comps.Sigma_star[k])
        st.beta[i] = _mvn_draw(mean, cov, self.rng)
        self._draw_random_effect(i, A_chol)

    def baseline_assignment_logpdf(self, i, A_chol=None):
        """Log conditional of ``z_i`` over all baseline components with ``(beta_i, u_i)`` integrated out.

        Uses the Woodbury identity on ``X Sigma*_k X^T + K_u + Sigma_i`` so each
        component costs only ``p x p`` work.
        """
        st, h, un = self.state, self.h, self.units[i]
        comps = st.base_comps
        if A_chol is None:
            A_chol = self.a_chol(i, st.sigma_u_sq[i], st.rho_u[i])
        W = solve_triangular(A_chol, un.X, lower=True, check_finite=False)
        e = solve_triangular(A_chol, un.y - self.f(i), lower=True, check_finite=False)
        G, g = W.T @ W, W.T @ e
        Ls = np.linalg.cholesky(comps.Sigma_star)
        Sinv = np.linalg.inv(comps.Sigma_star)
        P = Sinv + G[None]
        Lp = np.linalg.cholesky(P)
        B = comps.beta_star
        b = g[None, :] - B @ G
        c = np.linalg.solve(Lp, b[..., None])[..., 0]
        quad = e @ e - 2 * B @ g + np.einsum("kp,pq,kq->k", B, G, B) - np.sum(c * c, axis=1)
        logdet = 2 * (np.log(np.diagonal(Ls, axis1=1, axis2=2)).sum(1)
                      + np.log(np.diagonal(Lp, axis1=1, axis2=2)).sum(1))
        out = st.base_sticks.log_weights() - 0.5 * (quad + logdet)
        if h.fixed_sigma_u_sq is None:
            out = out + _norm_logpdf(np.log(st.sigma_u_sq[i]), comps.mu_sigma_u_star, h.var_sigma_within)
        return out + _norm_logpdf(logit(st.rho_u[i]), comps.mu_rho_u_star, h.var_rho_within)

    def update_individual_regression(self, i):
        st, h, un, rng = self.state, self.h, self.units[i], self.rng
        # component label with (beta_i, u_i) integrated out, then (beta_i, u_i) jointly
        if not h.pin_assignments and h.K1 > 1:
            logp = self.baseline_assignment_logpdf(i)
            st.base_sticks.Z[i] = _categorical_rows(logp[None, :], rng)[0]
        self._draw_regression_and_effect(i)
        f, L = self.f(i), self.sigma_chol(i)
        # auxiliary treatment-noise path, then the iid variance
        r = un.y - un.X @ st.beta[i] - st.u[i] - f
        eps_p = np.zeros(un.J)
        rows = un.noise_rows
        if rows.size:
            Keps = self._Keps[i]
            a = np.zeros(un.J)
            a[rows] = cholesky(Keps[np.ix_(rows, rows)]) @ rng.standard_normal(rows.size)
            e = np.sqrt(st.sigma_eps_sq[i]) * rng.standard_normal(un.J)
            eps_p = a + Keps @ cho_solve((L, True), r - a - e)
        shape, scale = inverse_gamma_posterior(h.s_eps, h.nu_eps, r - eps_p)
        st.sigma_eps_sq[i] = scale / rng.gamma(shape)
        self._sigma_changed(i)

    # -- concentrations ------------------------------------------------------

    def update_concentrations(self):
        st, h, rng = self.state, self.h, self.rng
        pairs = [(st.base_sticks, h.c1, h.d1)] + [(s, h.c2[d], h.d2[d]) for d, s in
                                                   enumerate(st.resp_sticks)]
        for sticks, c, d in pairs:
            if h.fixed_concentration is not None:
                sticks.M = float(h.fixed_concentration)
            elif self.cfg.concentration_update == "stick":
                sticks.M = sample_concentration_sticks(sticks.V, c, d, rng, sticks.log1m_V)
            else:
                k = np.unique(sticks.Z).size
                sticks.M = sample_concentration_ew(sticks.M, k, self.I, c, d, rng)

    # -- GP kernel parameters ------------------------------------------------

    def gp_log_target(self, i, sigma_sq, rho):
        """Collapsed log target of ``(sigma_u^2, rho_u)``; returns ``(value, chol)``."""
        st, h, un = self.state, self.h, self.units[i]
        r = un.y - un.X @ st.beta[i] - self.f(i)
        L = self.a_chol(i, sigma_sq, rho)
        z = solve_triangular(L, r, lower=True, check_finite=False)
        val = -0.5 * z @ z - np.log(np.diag(L)).sum()
        k = st.base_sticks.Z[i]
        if h.fixed_sigma_u_sq is None:
            ls = np.log(sigma_sq)
            val += _norm_logpdf(ls, st.base_comps.mu_sigma_u_star[k], h.var_sigma_within) - ls
        val += (_norm_logpdf(logit(rho), st.base_comps.mu_rho_u_star[k], h.var_rho_within)
                - np.log(rho) - np.log1p(-rho))
        return val, L

    def mh_update_gp_params(self, i):
        st, h, rng = self.state, self.h, self.rng
        s_sig, s_rho = self.cfg.gp_scales
        s2, rho = st.sigma_u_sq[i], st.rho_u[i]
        log_h = 0.0
        s2_c = s2
        if h.fixed_sigma_u_sq is None:
            s2_c, lh = self._pos_prop(np.array(s2), s_sig, rng)
            s2_c, log_h = float(s2_c), log_h + float(lh)
        rho_c, lh = self._unit_prop(np.array(rho), s_rho, rng)
        rho_c, log_h = float(rho_c), log_h + float(lh)
        ok = s2_c > 0 and 0 < rho_c < 1 and np.isfinite(s2_c)
        cur, L_cur = self.gp_log_target(i, s2, rho)
        accepted = False
        L = L_cur
        if ok:
            cand, L_cand = self.gp_log_target(i, s2_c, rho_c)
            if accept(cand - cur + log_h, rng):
                st.sigma_u_sq[i], st.rho_u[i] = s2_c, rho_c
                accepted, L = True, L_cand
        self._record_mh("gp", accepted)
        self._draw_random_effect(i, L)

    # -- treatment-noise kernel ----------------------------------------------

    def noise_log_target(self, sigma_sq, rho, current=False):
        """Log target of the treatment-noise kernel; returns ``(value, kernels, chols)``.

        With ``current`` the cached kernels and factors of the state are used.
        """
        st, h = self.state, self.h
        val = 0.0
        kernels, chols = {}, {}
        for i, un in enumerate(self.units):
            if not un.noise_rows.size:
                continue
            if current:
                K, L = self._Keps[i], self.sigma_chol(i)
            else:
                K = un.noise_kernel(sigma_sq, rho)
                L = cholesky(K + st.sigma_eps_sq[i] * np.eye(un.J))
            r = un.y - un.X @ st.beta[i] - st.u[i] - self.f(i)
            z = solve_triangular(L, r, lower=True, check_finite=False)
            val += -0.5 * z @ z - np.log(np.diag(L)).sum()
            kernels[i], chols[i] = K, L
        if h.fixed_sigma_eps_prime_sq is None:
            ls = np.log(sigma_sq)
            val += np.sum(_norm_logpdf(ls, h.mu_eps1, h.var_eps1) - ls)
        val += np.sum(_norm_logpdf(logit(rho), h.mu_eps2, h.var_eps2) - np.log(rho) - np.log1p(-rho))
        return val, kernels, chols

    def mh_update_noise_params(self):
        st, h, rng = self.state, self.h, self.rng
        if self.D == 0:
            return
        s_sig, s_rho = self.cfg.noise_scales
        s2, rho = st.sigma_eps_prime_sq.copy(), st.rho_eps_prime.copy()
        log_h = 0.0
        s2_c = s2
        if h.fixed_sigma_eps_prime_sq is None:
            s2_c, lh = self._pos_prop(s2, s_sig, rng)
            log_h += float(np.sum(lh))
        rho_c, lh = self._unit_prop(rho, s_rho, rng)
        log_h += float(np.sum(lh))
        ok = np.all(s2_c > 0) and np.all((rho_c > 0) & (rho_c < 1)) and np.all(np.isfinite(s2_c))
        accepted = False
        if ok:
            cur, _, _ = self.noise_log_target(s2, rho, current=True)
            cand, kernels, chols = self.noise_log_target(s2_c, rho_c)
            if accept(cand - cur + log_h, rng):
                st.sigma_eps_prime_sq[:], st.rho_eps_prime[:] = s2_c, rho_c
                for i in kernels:
                    self._Keps[i] = kernels[i]
                    self._sigma_changed(i, chols[i])
                accepted = True
        self._record_mh("noise", accepted)

    # -- response curves -----------------------------------------------------

    def response_log_prior(self, i, d, theta):
        z = ratio_coords_to_unconstrained(theta)
        mu = self.state.resp_mu[d][self.state.resp_sticks[d].Z[i]]
        return (-0.5 * np.sum((z - mu) ** 2 / self.h.D_phi0)
                + float(ratio_coords_log_jacobian(theta)))

    def response_marginal_chol(self, i):
        """Factor of the outcome covariance with ``beta_i`` and ``u_i`` integrated out."""
        st, un = self.state, self.units[i]
        k = st.base_sticks.Z[i]
        C = (un.X @ st.base_comps.Sigma_star[k] @ un.X.T
             + self.ku(i, st.sigma_u_sq[i], st.rho_u[i]) + self.sigma_cov(i))
        return cholesky(C)

    def mh_update_response_params(self, i, d, marginal_chol=None):
        """Metropolis-Hastings update of one response curve.

        The likelihood integrates ``beta_i`` and ``u_i`` out; the caller must
        redraw them afterwards (``update_individual_responses`` does).
        """
        st, rng, un = self.state, self.rng, self.units[i]
        theta = st.resp[i, d]
        scales = self.cfg.response_scales
        cand = theta.copy()
        log_h = 0.0
        for j in (0, 3):
            cand[j] = theta[j] + scales[j] * rng.standard_normal()
        for j in (1, 2, 4):
            c, lh = self._unit_prop(np.array(theta[j]), scales[j], rng)
            cand[j], log_h = float(c), log_h + float(lh)
        ok = (cand[3] > 0 and np.all((cand[[1, 2, 4]] > 0) & (cand[[1, 2, 4]] < 1))
              and cand[0] != 0 and np.all(np.isfinite(cand)))
        accepted = False
        if ok:
            log_ratio = self.response_log_prior(i, d, cand) - self.response_log_prior(i, d, theta) + log_h
            f_new = None
            if un.by_type[d].size:
                L = self.response_marginal_chol(i) if marginal_chol is None else marginal_chol
                k = st.base_sticks.Z[i]
                base = (un.y - un.X @ st.base_comps.beta_star[k]
                        - (self.f(i) - self._f_parts[i][d]))
                f_new = un.response_part(d, cand)
                z_new = solve_triangular(L, base - f_new, lower=True, check_finite=False)
                z_old = solve_triangular(L, base - self._f_parts[i][d], lower=True, check_finite=False)
                log_ratio += -0.5 * (z_new @ z_new - z_old @ z_old)
            if accept(log_ratio, rng):
                st.resp[i, d] = cand
                if f_new is not None:
                    self._f_parts[i][d] = f_new
                accepted = True
        self._record_mh("response", accepted)

    def update_individual_responses(self, i):
        """All response curves of individual ``i``, then ``(beta_i, u_i)`` redrawn."""
        L = self.response_marginal_chol(i) if self.units[i].by_type and any(
            idx.size for idx in self.units[i].by_type) else None
        for d in range(self.D):
            self.mh_update_response_params(i, d, L)
        self._draw_regression_and_effect(i)

    # -- cluster moves -------------------------------------------------------

    def _members_loglik_baseline(self, i, beta, sigma_sq, rho):
        """Log-likelihood of individual ``i`` with ``u`` integrated out."""
        un = self.units[i]
        r = un.y - un.X @ beta - self.f(i)
        L = self.a_chol(i, sigma_sq, rho)
        z = solve_triangular(L, r, lower=True, check_finite=False)
        return -0.5 * z @ z - np.log(np.diag(L)).sum(), L

    def shift_baseline_clusters(self):
        """Translate each occupied baseline component together with its members.

        The coefficient shift is drawn from its exact Gaussian conditional; the
        kernel-parameter shift is a random-walk Metropolis move on the
        transformed scale with ``u`` integrated out, after which ``u`` is redrawn.
        """
        st, h, rng = self.state, self.h, self.rng
        comps, Z = st.base_comps, st.base_sticks.Z
        for k in np.unique(Z):
            members = np.flatnonzero(Z == k)
            if h.fixed_sigma_star is not None:
                B_inv = np.eye(h.p) / h.beta_star_base_var
            else:
                B_inv = h.kappa0 * np.linalg.inv(comps.Sigma_star[k])
            prec = B_inv.copy()
            lin = B_inv @ (h.beta0 - comps.beta_star[k])
            for i in members:
                un = self.units[i]
                L = self.sigma_chol(i)
                A = solve_triangular(L, un.X, lower=True, check_finite=False)
                r = un.y - un.X @ st.beta[i] - st.u[i] - self.f(i)
                prec += A.T @ A
                lin += A.T @ solve_triangular(L, r, lower=True, check_finite=False)
            cov = np.linalg.inv(prec)
            delta = _mvn_draw(cov @ lin, 0.5 * (cov + cov.T), rng)
            st.beta[members] += delta
            comps.beta_star[k] += delta
            # kernel parameters
            step = self.cfg.cluster_shift_scale / np.sqrt(members.size)
            d_rho = step * rng.standard_normal()
            d_sig = step * rng.standard_normal() if h.fixed_sigma_u_sq is None else 0.0
            s2_c = st.sigma_u_sq[members] * np.exp(d_sig)
            rho_c = expit(logit(st.rho_u[members]) + d_rho)
            if np.any(rho_c <= 0) or np.any(rho_c >= 1):
                continue
            log_ratio = (_norm_logpdf(comps.mu_rho_u_star[k] + d_rho, h.mu_rho0, h.var_rho0)
                         - _norm_logpdf(comps.mu_rho_u_star[k], h.mu_rho0, h.var_rho0))
            if h.fixed_sigma_u_sq is None:
                log_ratio += (_norm_logpdf(comps.mu_sigma_u_star[k] + d_sig, h.mu_sigma0, h.var_sigma0)
                              - _norm_logpdf(comps.mu_sigma_u_star[k], h.mu_sigma0, h.var_sigma0))
            new_chols = {}
            for n, i in enumerate(members):
                old, _ = self._members_loglik_baseline(i, st.beta[i], st.sigma_u_sq[i], st.rho_u[i])
                new, L = self._members_loglik_baseline(i, st.beta[i], s2_c[n], rho_c[n])
                log_ratio += new - old
                new_chols[i] = L
            if accept(log_ratio, rng):
                st.sigma_u_sq[members] = s2_c
                st.rho_u[members] = rho_c
                comps.mu_rho_u_star[k] += d_rho
                comps.mu_sigma_u_star[k] += d_sig
                for i in members:
                    self._draw_random_effect(i, new_chols[i])

    def shift_response_clusters(self, d):
        """Random-walk translation of a response component and all its members."""
        st, h, rng = self.state, self.h, self.rng
        sticks, mu = st.resp_sticks[d], st.resp_mu[d]
        for k in np.unique(sticks.Z):
            members = np.flatnonzero(sticks.Z == k)
            delta = self.cfg.cluster_shift_scale / np.sqrt(members.size) * rng.standard_normal(5)
            zs = ratio_coords_to_unconstrained(st.resp[members, d, :]) + delta
            if np.any(zs[:, 3] <= 0):
                continue
            cand = unconstrained_to_ratio_coords(zs)
            if np.any(~((cand[:, [1, 2, 4]] > 0) & (cand[:, [1, 2, 4]] < 1))):
                continue
            Dinv = np.linalg.inv(h.D_d0[d])
            m_old, m_new = mu[k] - h.mu_d0[d], mu[k] + delta - h.mu_d0[d]
            log_ratio = -0.5 * (m_new @ Dinv @ m_new - m_old @ Dinv @ m_old)
            parts = {}
            for n, i in enumerate(members):
                un = self.units[i]
                if not un.by_type[d].size:
                    continue
                L = self.sigma_chol(i)
                base = un.y - un.X @ st.beta[i] - st.u[i] - (self.f(i) - self._f_parts[i][d])
                f_new = un.response_part(d, cand[n])
                z_new = solve_triangular(L, base - f_new, lower=True, check_finite=False)
                z_old = solve_triangular(L, base - self._f_parts[i][d], lower=True, check_finite=False)
                log_ratio += -0.5 * (z_new @ z_new - z_old @ z_old)
                parts[i] = f_new
            if accept(log_ratio, rng):
                st.resp[members, d, :] = cand
                mu[k] = mu[k] + delta
                for i, f_new in parts.items():
                    self._f_parts[i][d] = f_new

    def reassign_baseline(self, i):
        """Move individual ``i`` to another component, carrying its offset along."""
        st, h, rng = self.state, self.h, self.rng
        comps, sticks = st.base_comps, st.base_sticks
        if h.K1 < 2 or h.pin_assignments:
            return
        k = sticks.Z[i]
        k2 = rng.integers(h.K1 - 1)
        k2 += k2 >= k
        beta_c = st.beta[i] + comps.beta_star[k2] - comps.beta_star[k]
        rho_c = expit(logit(st.rho_u[i]) + comps.mu_rho_u_star[k2] - comps.mu_rho_u_star[k])
        s2_c = st.sigma_u_sq[i]
        if h.fixed_sigma_u_sq is None:
            s2_c = s2_c * np.exp(comps.mu_sigma_u_star[k2] - comps.mu_sigma_u_star[k])
        if not (0 < rho_c < 1 and s2_c > 0):
            return
        logw = sticks.log_weights()
        old, _ = self._members_loglik_baseline(i, st.beta[i], st.sigma_u_sq[i], st.rho_u[i])
        new, L = self._members_loglik_baseline(i, beta_c, s2_c, rho_c)
        kern = self.baseline_kernel_logpdf([i])[0]
        saved = (st.beta[i].copy(), st.sigma_u_sq[i], st.rho_u[i])
        st.beta[i], st.sigma_u_sq[i], st.rho_u[i] = beta_c, s2_c, rho_c
        kern_c = self.baseline_kernel_logpdf([i])[0]
        log_ratio = logw[k2] - logw[k] + new - old + kern_c[k2] - kern[k]
        if accept(log_ratio, rng):
            sticks.Z[i] = k2
            self._draw_random_effect(i, L)
        else:
            st.beta[i], st.sigma_u_sq[i], st.rho_u[i] = saved

    def reassign_response(self, i, d):
        st, h, rng = self.state, self.h, self.rng
        sticks, mu = st.resp_sticks[d], st.resp_mu[d]
        if h.K2[d] < 2 or h.pin_assignments:
            return
        k = sticks.Z[i]
        k2 = rng.integers(h.K2[d] - 1)
        k2 += k2 >= k
        z = ratio_coords_to_unconstrained(st.resp[i, d]) + mu[k2] - mu[k]
        if z[3] <= 0:
            return
        cand = unconstrained_to_ratio_coords(z)
        if not np.all((cand[[1, 2, 4]] > 0) & (cand[[1, 2, 4]] < 1)):
            return
        logw = sticks.log_weights()
        log_ratio = logw[k2] - logw[k]
        un = self.units[i]
        f_new = None
        if un.by_type[d].size:
            L = self.sigma_chol(i)
            base = un.y - un.X @ st.beta[i] - st.u[i] - (self.f(i) - self._f_parts[i][d])
            f_new = un.response_part(d, cand)
            z_new = solve_triangular(L, base - f_new, lower=True, check_finite=False)
            z_old = solve_triangular(L, base - self._f_parts[i][d], lower=True, check_finite=False)
            log_ratio += -0.5 * (z_new @ z_new - z_old @ z_old)
        if accept(log_ratio, rng):
            sticks.Z[i] = k2
            st.resp[i, d] = cand
            if f_new is not None:
                self._f_parts[i][d] = f_new

    def collapsed_baseline_loglik(self, i, k, sigma_sq, rho):
        """``log N(y_i - f_i; X beta*_k, X Sigma*_k X^T + K_u + Sigma_i)``; returns ``(value, chol)``."""
        st, un = self.state, self.units[i]
        comps = st.base_comps
        L = self.a_chol(i, sigma_sq, rho)
        W = solve_triangular(L, un.X, lower=True, check_finite=False)
        e = solve_triangular(L, un.y - self.f(i) - un.X @ comps.beta_star[k], lower=True,
                             check_finite=False)
        Sig = comps.Sigma_star[k]
        Lp = np.linalg.cholesky(np.linalg.inv(Sig) + W.T @ W)
        c = np.linalg.solve(Lp, W.T @ e)
        logdet = (2 * np.log(np.diag(L)).sum() + np.linalg.slogdet(Sig)[1]
                  + 2 * np.log(np.diag(Lp)).sum())
        return -0.5 * (e @ e - c @ c + logdet + un.J * LOG_2PI), L

    def relabel_baseline_from_prior(self, i):
        """Independence move on ``(z_i, sigma_u_i^2, rho_u_i)`` with ``(beta_i, u_i)`` integrated out.

        The label comes from the stick weights and the kernel parameters from
        the proposed component's kernel, so only the collapsed likelihood
        enters the acceptance ratio.  ``(beta_i, u_i)`` is redrawn on acceptance.
        """
        st, h, rng = self.state, self.h, self.rng
        sticks, comps = st.base_sticks, st.base_comps
        if h.K1 < 2 or h.pin_assignments:
            return
        k = sticks.Z[i]
        k2 = int(_categorical_rows(sticks.log_weights()[None, :], rng)[0])
        rho2 = expit(comps.mu_rho_u_star[k2] + np.sqrt(h.var_rho_within) * rng.standard_normal())
        if h.fixed_sigma_u_sq is None:
            s22 = np.exp(comps.mu_sigma_u_star[k2]
                         + np.sqrt(h.var_sigma_within) * rng.standard_normal())
        else:
            s22 = st.sigma_u_sq[i]
        if not (0 < rho2 < 1 and s22 > 0):
            return
        old, _ = self.collapsed_baseline_loglik(i, k, st.sigma_u_sq[i], st.rho_u[i])
        new, _ = self.collapsed_baseline_loglik(i, k2, s22, rho2)
        if accept(new - old, rng):
            sticks.Z[i] = k2
            st.sigma_u_sq[i], st.rho_u[i] = s22, rho2
            self._draw_regression_and_effect(i)

    def update_cluster_moves(self):
        self.shift_baseline_clusters()
        for d in range(self.D):
            self.shift_response_clusters(d)
        for i in range(self.I):
            self.relabel_baseline_from_prior(i)
            self.reassign_baseline(i)
            for d in range(self.D):
                self.reassign_response(i, d)

    # -- driver --------------------------------------------------------------

    def _run_block(self, name, fn, *args):
        try:
            fn(*args)
        except (NumericalError, np.linalg.LinAlgError) as exc:
            raise NumericalError(f"iteration {self.state.iteration}, block {name}: {exc}") from exc

    def sweep(self):
        """One full pass over all blocks."""
        self._run_block("baseline components", self.update_baseline_components)
        for d in range(self.D):
            self._run_block(f"response components {d + 1}", self.update_response_components, d)
        for i in range(self.I):
            self._run_block("regression", self.update_individual_regression, i)
        self._run_block("concentrations", self.update_concentrations)
        for i in range(self.I):
            self._run_block("gp", self.mh_update_gp_params, i)
        self._run_block("noise", self.mh_update_noise_params)
        for i in range(self.I):
            self._run_block("response", self.update_individual_responses, i)
        if self.cluster_moves:
            self._run_block("cluster moves", self.update_cluster_moves)
        self.state.iteration += 1

    def resample_outcomes(self):
        """Replace every outcome vector by a draw from the likelihood given the state."""
        st, rng = self.state, self.rng
        for i, un in enumerate(self.units):
            mean = un.X @ st.beta[i] + st.u[i] + self.f(i)
            un.y = mean + self.sigma_chol(i) @ rng.standard_normal(un.J)

    def snapshot(self):
        """Flat record of the current state (natural response parameters)."""
        st, h = self.state, self.h
        K2max = max(h.K2) if self.D else 0
        v2 = np.full((self.D, K2max), np.nan)
        mu2 = np.full((self.D, K2max, 5), np.nan)
        for d in range(self.D):
            v2[d, :h.K2[d]] = st.resp_sticks[d].V
            mu2[d, :h.K2[d]] = st.resp_mu[d]
        z2 = (np.array([s.Z for s in st.resp_sticks]).T if self.D
              else np.zeros((self.I, 0), dtype=int))
        return {
            "beta": st.beta.copy(),
            "u": np.concatenate(st.u),
            "sigma_u_sq": st.sigma_u_sq.copy(),
            "rho_u": st.rho_u.copy(),
            "response": ratio_coords_to_natural(st.resp),
            "sigma_eps_sq": st.sigma_eps_sq.copy(),
            "sigma_eps_prime_sq": st.sigma_eps_prime_sq.copy(),
            "rho_eps_prime": st.rho_eps_prime.copy(),
            "z_baseline": st.base_sticks.Z.copy(),
            "v_baseline": st.base_sticks.V.copy(),
            "m_baseline": np.array(st.base_sticks.M),
            "beta_star": st.base_comps.beta_star.copy(),
            "sigma_star": st.base_comps.Sigma_star.copy(),
            "mu_sigma_u_star": st.base_comps.mu_sigma_u_star.copy(),
            "mu_rho_u_star": st.base_comps.mu_rho_u_star.copy(),
            "z_response": z2,
            "v_response": v2,
            "m_response": np.array([s.M for s in st.resp_sticks]),
            "mu_response_star": mu2,
        }


def chain_seeds(seed, chains):
    """Independent per-chain seed sequences derived from one run seed."""
    return np.random.SeedSequence(seed).spawn(chains)


def _meta(sampler, cfg, h, chain):
    return {
        "ids": [un.id for un in sampler.units],
        "n_obs": [un.J for un in sampler.units],
        "p": h.p, "D": h.D, "K1": h.K1, "K2": list(h.K2), "I": sampler.I,
        "seed": cfg.seed, "chain": chain, "variant": cfg.variant,
        "iterations": cfg.iterations, "burn_in": cfg.burn_in, "thin": cfg.thin,
    }


def run_chain(data: Sequence[Trajectory], h: Hyperparams, cfg: SamplerConfig, chain=0,
              seed_seq=None) -> PosteriorTrace:
    """Run one chain from a prior draw and return its thinned post-burn-in trace."""
    if seed_seq is None:
        seed_seq = chain_seeds(cfg.seed, chain + 1)[chain]
    rng = np.random.default_rng(seed_seq)
    start = time.perf_counter()
    sampler = Sampler(data, h, cfg, rng)
    records = []
    for it in range(cfg.iterations):
        sampler.sweep()
        kept = it + 1 - cfg.burn_in
        if kept > 0 and kept % cfg.thin == 0:
            records.append(sampler.snapshot())
        if cfg.progress_every and (it + 1) % cfg.progress_every == 0:
            rates = " ".join(f"{b}={a / n:.3f}" for b, (a, n) in sampler.counts.items() if n)
            print(f"chain {chain} iter {it + 1}/{cfg.iterations} {rates}", file=sys.stderr)
    draws = {key: np.stack([r[key] for r in records]) for key in records[0]} if records else {}
    return PosteriorTrace(draws, {b: list(v) for b, v in sampler.counts.items()},
                          _meta(sampler, cfg, h, chain), time.perf_counter() - start)


def run_chains(data, h, cfg):
    """Run ``cfg.chains`` independent chains sequentially."""
    seeds = chain_seeds(cfg.seed, cfg.chains)
    return [run_chain(data, h, cfg, c, seeds[c]) for c in range(cfg.chains)]
