"""Domain types and deterministic model math.

An outcome series is modelled as

    Y_ij = X_ij' beta_i + u_i(t_ij) + f_i(t_ij) + eps_i(t_ij)

where ``u_i`` is a zero-mean exponential-kernel Gaussian process, ``f_i`` is the
sum of double-sigmoid response curves of all treatments given before
``t_ij`` and ``eps_i`` is iid noise plus one exponential-kernel noise process
per administered treatment.  All times are minutes.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Optional, Sequence

import numpy as np
from scipy.linalg import solve_triangular
from scipy.special import expit

from .errors import DomainError, NumericalError

LOG_2PI = np.log(2.0 * np.pi)

#: Ratios ``b / g(gamma)`` at or below this value are raised to it.
MIN_RATIO = 1e-6

#: Relative diagonal jitter added before every Cholesky factorization.
JITTER = 1e-9


# ---------------------------------------------------------------------------
# domain types
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TreatmentEvent:
    time: float
    kind: int

    def __post_init__(self):
        if not np.isfinite(self.time):
            raise DomainError(f"treatment time must be finite, got {self.time}")
        if int(self.kind) != self.kind or self.kind < 1:
            raise DomainError(f"treatment kind must be a positive integer, got {self.kind}")
        object.__setattr__(self, "time", float(self.time))
        object.__setattr__(self, "kind", int(self.kind))


@dataclass(frozen=True, eq=False)
class Trajectory:
    """Irregularly sampled outcomes of one individual.

    ``covariates`` is a ``(J, p)`` matrix whose first column is the intercept.
    """

    id: str
    times: np.ndarray
    outcomes: np.ndarray
    covariates: np.ndarray
    treatments: tuple = ()

    def __post_init__(self):
        times = np.asarray(self.times, dtype=float).reshape(-1)
        outcomes = np.asarray(self.outcomes, dtype=float).reshape(-1)
        X = np.asarray(self.covariates, dtype=float)
        if X.ndim == 1:
            X = X.reshape(-1, 1)
        if times.size < 1:
            raise DomainError(f"trajectory {self.id!r} has no observations")
        if outcomes.shape != times.shape or X.shape[0] != times.size:
            raise DomainError(
                f"trajectory {self.id!r}: times, outcomes and covariates disagree in length"
            )
        if np.any(np.diff(times) <= 0):
            raise DomainError(f"trajectory {self.id!r}: times must be strictly increasing")
        if not (np.all(np.isfinite(times)) and np.all(np.isfinite(outcomes))
                and np.all(np.isfinite(X))):
            raise DomainError(f"trajectory {self.id!r} contains non-finite values")
        events = tuple(self.treatments)
        for e in events:
            if not isinstance(e, TreatmentEvent):
                raise DomainError("treatments must be TreatmentEvent instances")
        if any(b.time < a.time for a, b in zip(events, events[1:])):
            raise DomainError(f"trajectory {self.id!r}: treatments must be sorted by time")
        for name, arr in (("times", times), ("outcomes", outcomes), ("covariates", X)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        object.__setattr__(self, "id", str(self.id))
        object.__setattr__(self, "treatments", events)

    @property
    def n_obs(self):
        return self.times.size

    @property
    def n_covariates(self):
        return self.covariates.shape[1]

    @property
    def event_times(self):
        return np.array([e.time for e in self.treatments], dtype=float)

    @property
    def event_kinds(self):
        return np.array([e.kind for e in self.treatments], dtype=int)

    def head(self, n):
        """Return the trajectory restricted to its first ``n`` observations.

        Treatments are kept only if given before the last retained observation.
        """
        if n < 1:
            raise DomainError("a trajectory needs at least one observation")
        n = min(n, self.n_obs)
        last = self.times[n - 1]
        events = tuple(e for e in self.treatments if e.time < last)
        return Trajectory(self.id, self.times[:n], self.outcomes[:n],
                          self.covariates[:n], events)

    def __eq__(self, other):
        if not isinstance(other, Trajectory):
            return NotImplemented
        return (self.id == other.id
                and np.array_equal(self.times, other.times)
                and np.array_equal(self.outcomes, other.outcomes)
                and np.array_equal(self.covariates, other.covariates)
                and self.treatments == other.treatments)

    __hash__ = None


@dataclass(frozen=True)
class BaselineParams:
    beta: np.ndarray
    sigma_u_sq: float
    rho_u: float

    def __post_init__(self):
        beta = np.asarray(self.beta, dtype=float).reshape(-1)
        if not np.all(np.isfinite(beta)):
            raise DomainError("beta must be finite")
        if not self.sigma_u_sq > 0:
            raise DomainError(f"sigma_u_sq must be positive, got {self.sigma_u_sq}")
        if not 0 < self.rho_u < 1:
            raise DomainError(f"rho_u must lie in (0, 1), got {self.rho_u}")
        beta.setflags(write=False)
        object.__setattr__(self, "beta", beta)
        object.__setattr__(self, "sigma_u_sq", float(self.sigma_u_sq))
        object.__setattr__(self, "rho_u", float(self.rho_u))


def peak_value(alpha1, alpha2, gamma):
    """Curve value at the switch point, ``alpha1 tanh(alpha2 gamma / 4)``."""
    return alpha1 * np.tanh(alpha2 * gamma / 4.0)


@dataclass(frozen=True)
class ResponseParams:
    """Double-sigmoid response curve parameters.

    ``b`` is the long-run value; the ratio ``b / g(gamma)`` must lie in (0, 1).
    Ratios in ``[0, MIN_RATIO]`` are raised to ``MIN_RATIO`` so that a zero
    long-run effect stays inside the open support.
    """

    alpha1: float
    alpha2: float
    alpha3: float
    gamma: float
    b: float

    def __post_init__(self):
        a1, a2, a3, gam, b = (float(v) for v in
                              (self.alpha1, self.alpha2, self.alpha3, self.gamma, self.b))
        if not (np.isfinite(a1) and np.isfinite(b)):
            raise DomainError("alpha1 and b must be finite")
        if not 0 < a2 < 1:
            raise DomainError(f"alpha2 must lie in (0, 1), got {a2}")
        if not 0 < a3 < 1:
            raise DomainError(f"alpha3 must lie in (0, 1), got {a3}")
        if not (gam > 0 and np.isfinite(gam)):
            raise DomainError(f"gamma must be positive, got {gam}")
        peak = peak_value(a1, a2, gam)
        if peak == 0:
            raise DomainError("alpha1 must be non-zero")
        ratio = b / peak
        if 0 <= ratio <= MIN_RATIO:
            b = MIN_RATIO * peak
        elif not ratio < 1 or ratio < 0:
            raise DomainError(f"b / g(gamma) must lie in (0, 1), got {ratio}")
        for name, v in zip(("alpha1", "alpha2", "alpha3", "gamma", "b"), (a1, a2, a3, gam, b)):
            object.__setattr__(self, name, v)

    @classmethod
    def from_ratio(cls, alpha1, alpha2, alpha3, gamma, ratio):
        return cls(alpha1, alpha2, alpha3, gamma, ratio * peak_value(alpha1, alpha2, gamma))

    @property
    def peak(self):
        return peak_value(self.alpha1, self.alpha2, self.gamma)

    @property
    def ratio(self):
        return self.b / self.peak

    def as_array(self):
        return np.array([self.alpha1, self.alpha2, self.alpha3, self.gamma, self.b])


@dataclass(frozen=True)
class NoiseParams:
    """Noise variances: iid per individual, treatment-noise kernel per type."""

    sigma_eps_sq: Mapping
    sigma_eps_prime_sq: Mapping
    rho_eps_prime: Mapping

    def __post_init__(self):
        for name in ("sigma_eps_sq", "sigma_eps_prime_sq"):
            for k, v in dict(getattr(self, name)).items():
                if not v > 0:
                    raise DomainError(f"{name}[{k!r}] must be positive, got {v}")
        for k, v in dict(self.rho_eps_prime).items():
            if not 0 < v < 1:
                raise DomainError(f"rho_eps_prime[{k!r}] must lie in (0, 1), got {v}")
        if set(self.sigma_eps_prime_sq) != set(self.rho_eps_prime):
            raise DomainError("sigma_eps_prime_sq and rho_eps_prime must cover the same types")


# ---------------------------------------------------------------------------
# response curves
# ---------------------------------------------------------------------------


def curve_constants_array(alpha1, alpha2, alpha3, gamma, b):
    """Offsets ``(b0, alpha0)`` making the curve start at 0 and be continuous at gamma."""
    half = np.asarray(gamma, dtype=float) / 2.0
    b0 = -alpha1 * expit(-(alpha2 * half))
    alpha0 = (alpha1 + 2.0 * b0 - b) * (1.0 + np.exp(-(alpha3 * half)))
    return b0, alpha0


def curve_array(t, alpha1, alpha2, alpha3, gamma, b):
    """Vectorized response curve; all arguments broadcast against each other."""
    t = np.asarray(t, dtype=float)
    half = np.asarray(gamma, dtype=float) / 2.0
    b0, alpha0 = curve_constants_array(alpha1, alpha2, alpha3, gamma, b)
    rising = b0 + alpha1 * expit(alpha2 * (t - half))
    settling = b + alpha0 * expit(-(alpha3 * (t - 3.0 * half)))
    return np.where(t < gamma, rising, settling)


def curve_constants(params: ResponseParams):
    if not isinstance(params, ResponseParams):
        raise DomainError("expected ResponseParams")
    b0, alpha0 = curve_constants_array(params.alpha1, params.alpha2, params.alpha3,
                                       params.gamma, params.b)
    return float(b0), float(alpha0)


def eval_response_curve(params: ResponseParams, t):
    """Response ``g(t)`` at elapsed time ``t >= 0`` since administration."""
    t_arr = np.asarray(t, dtype=float)
    if np.any(t_arr < 0) or not np.all(np.isfinite(t_arr)):
        raise DomainError("elapsed time must be finite and non-negative")
    out = curve_array(t_arr, params.alpha1, params.alpha2, params.alpha3, params.gamma, params.b)
    return float(out) if out.ndim == 0 else out


def cumulative_response(params_by_type: Mapping, events: Sequence[TreatmentEvent], t):
    """Sum of the curves of every treatment given strictly before ``t``."""
    total = 0.0
    for e in events:
        if e.time < t:
            if e.kind not in params_by_type:
                raise DomainError(f"no response parameters for treatment type {e.kind}")
            total += eval_response_curve(params_by_type[e.kind], t - e.time)
    return total


def response_matrix(times, event_times, event_params):
    """Per-event contributions, shape ``(J, L)``.

    ``event_params`` is ``(L, 5)`` with columns ``alpha1, alpha2, alpha3, gamma, b``.
    Entries for events not strictly before an observation are zero.
    """
    times = np.asarray(times, dtype=float)
    event_times = np.asarray(event_times, dtype=float)
    if event_times.size == 0:
        return np.zeros((times.size, 0))
    lag = times[:, None] - event_times[None, :]
    P = np.asarray(event_params, dtype=float)
    vals = curve_array(np.maximum(lag, 0.0), P[:, 0], P[:, 1], P[:, 2], P[:, 3], P[:, 4])
    return np.where(lag > 0, vals, 0.0)


def response_vector(times, event_times, event_params):
    """Cumulative response at each time, ``f_i(t_ij)``."""
    if len(event_times) == 0:
        return np.zeros(len(times))
    return response_matrix(times, event_times, event_params).sum(axis=1)


# ---------------------------------------------------------------------------
# baseline and covariance
# ---------------------------------------------------------------------------


def baseline_mean(beta, X):
    beta = np.asarray(beta, dtype=float)
    X = np.asarray(X, dtype=float)
    if X.shape[-1] != beta.shape[-1]:
        raise DomainError(f"covariate dimension {X.shape[-1]} does not match beta {beta.shape[-1]}")
    out = X @ beta
    return float(out) if np.ndim(out) == 0 else out


def _kernel_from_lags(sigma_sq, rho, lags):
    return sigma_sq * np.exp(np.log(rho) * lags)


def exp_kernel(sigma_sq, rho, times):
    """Exponential covariance ``sigma_sq * rho ** |t_j - t_k|``."""
    if not sigma_sq > 0:
        raise DomainError(f"sigma_sq must be positive, got {sigma_sq}")
    if not 0 < rho < 1:
        raise DomainError(f"rho must lie in (0, 1), got {rho}")
    t = np.asarray(times, dtype=float).reshape(-1)
    return _kernel_from_lags(sigma_sq, rho, np.abs(t[:, None] - t[None, :]))


def event_counts(times, event_times, event_kinds, kinds):
    """Number of events of each kind strictly before each time, shape ``(len(kinds), J)``."""
    times = np.asarray(times, dtype=float)
    out = np.zeros((len(kinds), times.size))
    for row, d in enumerate(kinds):
        tau = np.sort(np.asarray(event_times, dtype=float)[np.asarray(event_kinds) == d])
        out[row] = np.searchsorted(tau, times, side="left")
    return out


def shared_event_counts(times, event_times, event_kinds, kinds, window=None):
    """Per kind, the number of events preceding both times of each pair.

    Returns ``(len(kinds), J, J)``.  With ``window`` (mapping kind -> minutes, or a
    scalar) an event only counts for a pair if both times fall within the window
    after it.
    """
    times = np.asarray(times, dtype=float)
    J = times.size
    event_times = np.asarray(event_times, dtype=float)
    event_kinds = np.asarray(event_kinds, dtype=int)
    out = np.zeros((len(kinds), J, J))
    if window is None:
        counts = event_counts(times, event_times, event_kinds, kinds)
        idx = np.minimum.outer(np.arange(J), np.arange(J))
        for row in range(len(kinds)):
            out[row] = counts[row][idx]
        return out
    for row, d in enumerate(kinds):
        w = window.get(d) if isinstance(window, Mapping) else window
        for tau in event_times[event_kinds == d]:
            active = times > tau
            if w is not None:
                active &= times - tau <= w
            out[row] += np.outer(active, active)
    return out


def noise_kernel(times, shared_counts, sigma_sq_by_kind, rho_by_kind, lags=None):
    """Treatment-noise covariance from precomputed shared event counts."""
    t = np.asarray(times, dtype=float)
    if lags is None:
        lags = np.abs(t[:, None] - t[None, :])
    K = np.zeros((t.size, t.size))
    for row in range(shared_counts.shape[0]):
        if np.any(shared_counts[row]):
            K += shared_counts[row] * _kernel_from_lags(sigma_sq_by_kind[row], rho_by_kind[row], lags)
    return K


def noise_covariance(noise: NoiseParams, i, times, events: Sequence[TreatmentEvent], window=None):
    """Total noise covariance of individual ``i`` at ``times``."""
    if i not in noise.sigma_eps_sq:
        raise DomainError(f"no iid noise variance for individual {i!r}")
    kinds = sorted(noise.sigma_eps_prime_sq)
    for e in events:
        if e.kind not in noise.sigma_eps_prime_sq:
            raise DomainError(f"no noise parameters for treatment type {e.kind}")
    t = np.asarray(times, dtype=float).reshape(-1)
    shared = shared_event_counts(t, [e.time for e in events], [e.kind for e in events],
                                 kinds, window)
    K = noise_kernel(t, shared, [noise.sigma_eps_prime_sq[d] for d in kinds],
                     [noise.rho_eps_prime[d] for d in kinds])
    return K + noise.sigma_eps_sq[i] * np.eye(t.size)


# ---------------------------------------------------------------------------
# Gaussian densities
# ---------------------------------------------------------------------------


def cholesky(cov):
    """Lower Cholesky factor of ``cov``.

    If the plain factorization fails, diagonal jitter of ``JITTER`` times the
    mean variance is added, growing tenfold up to three times.
    """
    cov = np.asarray(cov, dtype=float)
    n = cov.shape[0]
    if n == 0:
        return np.zeros((0, 0))
    try:
        return np.linalg.cholesky(cov)
    except np.linalg.LinAlgError:
        pass
    scale = np.trace(cov) / n
    for k in range(3):
        try:
            return np.linalg.cholesky(cov + JITTER * 10.0 ** k * scale * np.eye(n))
        except np.linalg.LinAlgError:
            continue
    raise NumericalError("covariance is not positive definite after jitter")


def mvn_logpdf_chol(resid, L):
    """Zero-mean Gaussian log-density of ``resid`` given a lower Cholesky factor."""
    z = solve_triangular(L, resid, lower=True, check_finite=False)
    return -0.5 * (z @ z) - np.log(np.diag(L)).sum() - 0.5 * resid.size * LOG_2PI


def mvn_logpdf(x, mean, cov):
    resid = np.asarray(x, dtype=float) - np.asarray(mean, dtype=float)
    return mvn_logpdf_chol(resid, cholesky(cov))


def outcome_loglik(traj: Trajectory, base: BaselineParams, u, resp: Mapping,
                   noise: NoiseParams, window=None):
    """Gaussian log-likelihood of the observed outcomes of one trajectory."""
    u = np.asarray(u, dtype=float).reshape(-1)
    if u.size != traj.n_obs:
        raise DomainError("random effect length must equal the number of observations")
    for e in traj.treatments:
        if e.kind not in resp:
            raise DomainError(f"no response parameters for treatment type {e.kind}")
    f = response_vector(traj.times, traj.event_times,
                        [resp[e.kind].as_array() for e in traj.treatments])
    mean = baseline_mean(base.beta, traj.covariates) + u + f
    cov = noise_covariance(noise, traj.id, traj.times, traj.treatments, window)
    return float(mvn_logpdf(traj.outcomes, mean, cov))


def sample_ou(times, sigma_sq, rho, rng, size=None):
    """Exact draw from the zero-mean exponential-kernel process at sorted ``times``.

    Uses the Markov property of the kernel, so the cost is linear in ``len(times)``.
    """
    t = np.asarray(times, dtype=float)
    shape = (t.size,) if size is None else (size, t.size)
    z = rng.standard_normal(shape)
    out = np.empty(shape)
    if t.size == 0:
        return out
    sd = np.sqrt(sigma_sq)
    decay = np.exp(np.log(rho) * np.diff(t))
    innov = sd * np.sqrt(-np.expm1(2.0 * np.log(rho) * np.diff(t)))
    out[..., 0] = sd * z[..., 0]
    for j in range(1, t.size):
        out[..., j] = decay[j - 1] * out[..., j - 1] + innov[j - 1] * z[..., j]
    return out
