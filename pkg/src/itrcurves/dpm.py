"""Truncated stick-breaking Dirichlet process mixtures.

One mixture clusters the baseline parameters ``(beta, sigma_u^2, rho_u)`` of all
individuals; one further mixture per treatment type clusters the (transformed)
response-curve parameters.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.special import logit, logsumexp
from scipy.stats import invwishart

from .errors import DomainError
from .model import BaselineParams, ResponseParams
from .transforms import log_jacobian_response, response_to_unconstrained

LOG_2PI = np.log(2.0 * np.pi)


@dataclass
class StickState:
    """Stick variables ``V`` (last one fixed at 1), concentration and assignments."""

    V: np.ndarray
    M: float
    Z: np.ndarray
    log1m_V: Optional[np.ndarray] = None

    @property
    def K(self):
        return self.V.size

    def log_weights(self):
        return log_stick_weights(self.V, self.log1m_V)

    @property
    def weights(self):
        return stick_weights(self.V)

    def counts(self):
        return np.bincount(self.Z, minlength=self.K)


@dataclass
class BaselineComponent:
    beta_star: np.ndarray
    Sigma_star: np.ndarray
    mu_sigma_u_star: float
    mu_rho_u_star: float


@dataclass
class ResponseComponent:
    mu_star: np.ndarray


@dataclass
class BaselineComponents:
    """Locations of all ``K1`` baseline components, stacked."""

    beta_star: np.ndarray       # (K, p)
    Sigma_star: np.ndarray      # (K, p, p)
    mu_sigma_u_star: np.ndarray  # (K,)
    mu_rho_u_star: np.ndarray   # (K,)

    def __getitem__(self, k):
        return BaselineComponent(self.beta_star[k], self.Sigma_star[k],
                                 float(self.mu_sigma_u_star[k]), float(self.mu_rho_u_star[k]))

    @classmethod
    def stack(cls, comps):
        return cls(np.array([c.beta_star for c in comps]),
                   np.array([c.Sigma_star for c in comps]),
                   np.array([c.mu_sigma_u_star for c in comps]),
                   np.array([c.mu_rho_u_star for c in comps]))


def _as_matrix(x, n, name):
    x = np.asarray(x, dtype=float)
    if x.ndim == 0:
        x = float(x) * np.eye(n)
    elif x.ndim == 1:
        x = np.diag(x)
    if x.shape != (n, n):
        raise DomainError(f"{name} must be {n}x{n}")
    try:
        np.linalg.cholesky(x)
    except np.linalg.LinAlgError as exc:
        raise DomainError(f"{name} must be positive definite") from exc
    return x


@dataclass
class Hyperparams:
    """Every prior setting of the model.

    Names follow the roles they play:

    * ``beta0, kappa0, nu0, S0``: normal-inverse-Wishart base of ``(beta*, Sigma*)``.
    * ``mu_sigma0, var_sigma0`` / ``mu_rho0, var_rho0``: Gaussian base of the
      component locations of ``log sigma_u^2`` / ``logit rho_u``.
    * ``var_sigma_within, var_rho_within``: within-component spread of those
      transformed kernel parameters.
    * ``mu_d0, D_d0``: Gaussian base of the response component locations, per type.
    * ``D_phi0``: fixed diagonal within-component covariance of transformed
      response parameters.
    * ``s_eps, nu_eps``: inverse-gamma prior of the iid noise variances.
    * ``mu_eps1, var_eps1`` / ``mu_eps2, var_eps2``: Gaussian priors of
      ``log sigma_eps'^2`` / ``logit rho_eps'``.
    * ``c1, d1`` / ``c2, d2``: Gamma priors of the concentrations.
    * ``K1, K2``: truncation levels.

    The remaining fields pin parts of the model, which is how the baseline
    model variants and clamped scale parameters are expressed.
    """

    p: int
    D: int
    beta0: np.ndarray = None
    kappa0: float = 1.0
    nu0: float = None
    S0: np.ndarray = None
    mu_sigma0: float = float(np.log(0.1 ** 2))
    var_sigma0: float = 0.3 ** 2
    mu_rho0: float = 0.0
    var_rho0: float = 4.0
    var_sigma_within: float = 0.1 ** 2
    var_rho_within: float = 0.1 ** 2
    mu_d0: np.ndarray = None
    D_d0: np.ndarray = None
    D_phi0: np.ndarray = None
    s_eps: float = 1.0
    nu_eps: float = 1.0
    mu_eps1: float = float(np.log(0.1 ** 2))
    var_eps1: float = 0.3 ** 2
    mu_eps2: float = 0.0
    var_eps2: float = 4.0
    c1: float = 1.0
    d1: float = 1.0
    c2: np.ndarray = None
    d2: np.ndarray = None
    K1: int = 20
    K2: tuple = None
    # pins
    fixed_sigma_star: Optional[np.ndarray] = None
    beta_star_base_var: float = 100.0 ** 2
    pin_assignments: bool = False
    fixed_concentration: Optional[float] = None
    fixed_sigma_u_sq: Optional[float] = None
    fixed_sigma_eps_prime_sq: Optional[float] = None
    noise_window_minutes: Optional[float] = None

    def __post_init__(self):
        p, D = int(self.p), int(self.D)
        if p < 1 or D < 0:
            raise DomainError("need p >= 1 and D >= 0")
        self.p, self.D = p, D
        self.beta0 = np.zeros(p) if self.beta0 is None else np.asarray(self.beta0, float).reshape(p)
        self.nu0 = float(p + 2 if self.nu0 is None else self.nu0)
        if self.nu0 <= p - 1:
            raise DomainError("nu0 must exceed p - 1")
        self.S0 = _as_matrix(np.eye(p) if self.S0 is None else self.S0, p, "S0")
        if self.mu_d0 is None:
            self.mu_d0 = np.zeros((D, 5))
        self.mu_d0 = np.asarray(self.mu_d0, float).reshape(D, 5)
        # scalar, diagonal (5,), full (5, 5), or one of those per type
        D_d0 = np.asarray(4.0 if self.D_d0 is None else self.D_d0, float)
        if D_d0.ndim == 3 or (D_d0.ndim == 2 and D_d0.shape != (5, 5)):
            per_type = list(D_d0)
        else:
            per_type = [D_d0] * D
        if len(per_type) != D:
            raise DomainError("D_d0 must give one covariance per treatment type")
        self.D_d0 = np.array([_as_matrix(m, 5, "D_d0") for m in per_type]).reshape(D, 5, 5)
        D_phi0 = 0.3 ** 2 if self.D_phi0 is None else self.D_phi0
        D_phi0 = np.broadcast_to(np.asarray(D_phi0, float), (5,)).copy()
        if np.any(D_phi0 <= 0):
            raise DomainError("D_phi0 must be positive")
        self.D_phi0 = D_phi0
        self.c2 = np.broadcast_to(np.asarray(1.0 if self.c2 is None else self.c2, float), (D,)).copy()
        self.d2 = np.broadcast_to(np.asarray(1.0 if self.d2 is None else self.d2, float), (D,)).copy()
        K2 = self.K2 if self.K2 is not None else 20
        self.K2 = tuple(int(k) for k in np.broadcast_to(np.asarray(K2), (D,)))
        self.K1 = int(self.K1)
        if self.K1 < 1 or any(k < 1 for k in self.K2):
            raise DomainError("truncation levels must be >= 1")
        for name in ("kappa0", "var_sigma0", "var_rho0", "var_sigma_within", "var_rho_within",
                     "s_eps", "nu_eps", "var_eps1", "var_eps2", "c1", "d1", "beta_star_base_var"):
            if not getattr(self, name) > 0:
                raise DomainError(f"{name} must be positive")
        if np.any(self.c2 <= 0) or np.any(self.d2 <= 0):
            raise DomainError("c2 and d2 must be positive")
        if self.fixed_sigma_star is not None:
            self.fixed_sigma_star = _as_matrix(self.fixed_sigma_star, p, "fixed_sigma_star")
        for name in ("fixed_concentration", "fixed_sigma_u_sq", "fixed_sigma_eps_prime_sq",
                     "noise_window_minutes"):
            v = getattr(self, name)
            if v is not None and not v > 0:
                raise DomainError(f"{name} must be positive when set")

    def replace(self, **changes):
        return dataclasses.replace(self, **changes)

    @classmethod
    def simulation_defaults(cls, p=3, **overrides):
        """Priors used for the two-treatment simulation study.

        Response bases centre the peak at +8 / -8 and the switch point at
        10 / 20 minutes, with logit(0.5) = 0 for the unit-interval entries.
        """
        kwargs = dict(
            p=p, D=2,
            mu_d0=[[8.0, 0.0, 0.0, 10.0, 0.0],
                   [-8.0, 0.0, 0.0, 20.0, 0.0]],
            D_d0=4.0,
        )
        kwargs.update(overrides)
        return cls(**kwargs)


# ---------------------------------------------------------------------------
# stick breaking
# ---------------------------------------------------------------------------


def stick_weights(V):
    """``w_k = V_k prod_{r<k} (1 - V_r)``; the last stick must equal 1."""
    V = np.asarray(V, dtype=float).reshape(-1)
    if V.size == 0:
        raise DomainError("need at least one stick")
    if np.any(~(V > 0)) or np.any(V > 1):
        raise DomainError("sticks must lie in (0, 1]")
    if V[-1] != 1.0:
        raise DomainError("the last stick must equal 1")
    w = np.empty_like(V)
    remaining = 1.0
    for k, v in enumerate(V[:-1]):
        w[k] = v * remaining
        remaining -= w[k]
    w[-1] = remaining
    return w


def log_stick_weights(V, log1m_V=None):
    """Log weights computed in log space; tolerant of sticks equal to 1.

    ``log1m_V`` supplies ``log(1 - V)`` when ``V`` is too close to 1 for it to
    be recovered from ``V`` itself.
    """
    V = np.asarray(V, dtype=float)
    with np.errstate(divide="ignore"):
        if log1m_V is None:
            log1m_V = np.log1p(-np.minimum(V, 1.0))
        log_rest = np.concatenate([[0.0], np.cumsum(np.asarray(log1m_V, dtype=float)[:-1])])
        return np.log(V) + log_rest


def truncation_error_bound(n, K, M):
    """L1 bound ``4 n exp(-(K - 1) / M)`` on the marginal error of truncating at ``K``."""
    if n < 1 or K < 1 or not M > 0:
        raise DomainError("need n >= 1, K >= 1 and M > 0")
    return 4.0 * n * np.exp(-(K - 1) / M)


def _log_gamma_variate(rng, shape):
    """``log`` of a Gamma(shape, 1) draw, accurate for small shapes."""
    shape = np.asarray(shape, dtype=float)
    small = shape < 1.0
    g = rng.gamma(np.where(small, shape + 1.0, shape))
    with np.errstate(divide="ignore"):
        out = np.log(g)
        u = rng.random(shape.shape)
        return np.where(small, out + np.log(u) / shape, out)


def sample_sticks(rng, K, M, counts=None, return_log=False):
    """Draw ``V`` from its prior, or its posterior given component counts.

    The Beta draws are made in log space, so ``log(1 - V)`` stays exact when
    ``V`` rounds to 1; ``return_log`` also returns that vector.
    """
    V = np.ones(K)
    log1m = np.full(K, -np.inf)
    if K > 1:
        if counts is None:
            counts = np.zeros(K)
        tail = np.cumsum(counts[::-1])[::-1]
        a = 1.0 + counts[:-1]
        b = M + tail[1:]
        lx, ly = _log_gamma_variate(rng, a), _log_gamma_variate(rng, b)
        tot = np.logaddexp(lx, ly)
        V[:-1] = np.exp(lx - tot)
        log1m[:-1] = ly - tot
        # V itself may round to 1; keep it strictly inside for later divisions
        V[:-1] = np.minimum(V[:-1], np.nextafter(1.0, 0.0))
    return (V, log1m) if return_log else V


# ---------------------------------------------------------------------------
# base distributions
# ---------------------------------------------------------------------------


def sample_niw(rng, m, kappa, nu, S):
    Sigma = np.atleast_2d(invwishart.rvs(df=nu, scale=S, random_state=rng))
    Sigma = 0.5 * (Sigma + Sigma.T)
    beta = rng.multivariate_normal(m, Sigma / kappa)
    return beta, Sigma


def sample_base_baseline(h: Hyperparams, rng):
    if h.fixed_sigma_star is not None:
        Sigma = h.fixed_sigma_star.copy()
        beta = h.beta0 + np.sqrt(h.beta_star_base_var) * rng.standard_normal(h.p)
    else:
        beta, Sigma = sample_niw(rng, h.beta0, h.kappa0, h.nu0, h.S0)
    mu_s = h.mu_sigma0 + np.sqrt(h.var_sigma0) * rng.standard_normal()
    mu_r = h.mu_rho0 + np.sqrt(h.var_rho0) * rng.standard_normal()
    return BaselineComponent(beta, Sigma, float(mu_s), float(mu_r))


def sample_base_response(h: Hyperparams, d, rng):
    """Draw a response component location for type index ``d`` (0-based)."""
    return ResponseComponent(rng.multivariate_normal(h.mu_d0[d], h.D_d0[d]))


# ---------------------------------------------------------------------------
# mixture densities
# ---------------------------------------------------------------------------


def _mvn_logpdf_rows(x, means, covs):
    """log N(x; means[k], covs[k]) for every k."""
    diff = x[None, :] - means
    L = np.linalg.cholesky(covs)
    z = np.linalg.solve(L, diff[..., None])[..., 0]
    return (-0.5 * np.sum(z * z, axis=1) - np.log(np.diagonal(L, axis1=1, axis2=2)).sum(axis=1)
            - 0.5 * x.size * LOG_2PI)


def _norm_logpdf(x, mean, var):
    return -0.5 * (LOG_2PI + np.log(var) + (x - mean) ** 2 / var)


def baseline_component_logpdf(beta, log_sigma_u_sq, logit_rho_u, comps: BaselineComponents,
                              h: Hyperparams, include_sigma=True):
    """Per-component log kernel density of transformed baseline parameters (no Jacobian)."""
    out = _mvn_logpdf_rows(np.asarray(beta, float), comps.beta_star, comps.Sigma_star)
    if include_sigma:
        out = out + _norm_logpdf(log_sigma_u_sq, comps.mu_sigma_u_star, h.var_sigma_within)
    return out + _norm_logpdf(logit_rho_u, comps.mu_rho_u_star, h.var_rho_within)


def dpm_log_density_baseline(phi: BaselineParams, state: StickState, comps: BaselineComponents,
                             h: Hyperparams):
    """Log mixture density of ``phi`` on its natural scale, Jacobians included."""
    s2, rho = phi.sigma_u_sq, phi.rho_u
    kernel = baseline_component_logpdf(phi.beta, np.log(s2), logit(rho), comps, h)
    jac = -np.log(s2) - np.log(rho) - np.log1p(-rho)
    return float(logsumexp(state.log_weights() + kernel) + jac)


def response_component_logpdf(z, mu_star, D_phi0):
    """log N(z; mu_star[k], diag(D_phi0)) for every k, ``z`` transformed parameters."""
    z = np.asarray(z, float)
    return -0.5 * (np.sum((z - mu_star) ** 2 / D_phi0, axis=-1)
                   + np.log(D_phi0).sum() + 5 * LOG_2PI)


def dpm_log_density_response(phi: ResponseParams, state: StickState, mu_star, h: Hyperparams):
    """Log mixture density of response parameters ``(a1, a2, a3, gamma, b)``."""
    if isinstance(mu_star, ResponseComponent):
        mu_star = mu_star.mu_star[None, :]
    mu_star = np.asarray([c.mu_star if isinstance(c, ResponseComponent) else c for c in mu_star])
    z = response_to_unconstrained(phi)
    kernel = response_component_logpdf(z, mu_star, h.D_phi0)
    return float(logsumexp(state.log_weights() + kernel) + log_jacobian_response(phi))
