"""Bijections between constrained parameters and the real line.

Gaussian priors are placed on transformed values; the log-Jacobian helpers
return ``log |d T^{-1}(x) / dx|``, the factor that turns such a prior into a
density on the constrained scale.
"""
import numpy as np
from scipy.special import expit, logit

from .errors import DomainError
from .model import ResponseParams, peak_value


def _check_unit(x):
    x = np.asarray(x, dtype=float)
    if np.any(~(x > 0)) or np.any(~(x < 1)):
        raise DomainError("value must lie strictly inside (0, 1)")
    return x


def _check_positive(x):
    x = np.asarray(x, dtype=float)
    if np.any(~(x > 0)) or np.any(~np.isfinite(x)):
        raise DomainError("value must be positive and finite")
    return x


def _scalar(x):
    return float(x) if np.ndim(x) == 0 else x


def logit_fwd(x):
    return _scalar(logit(_check_unit(x)))


def logit_inv(y):
    y = np.asarray(y, dtype=float)
    if not np.all(np.isfinite(y)):
        raise DomainError("logit inverse needs finite input")
    return _scalar(expit(y))


def log_fwd(x):
    return _scalar(np.log(_check_positive(x)))


def log_inv(y):
    y = np.asarray(y, dtype=float)
    if not np.all(np.isfinite(y)):
        raise DomainError("log inverse needs finite input")
    return _scalar(np.exp(y))


def log_jacobian_logit(x):
    """``log(1 / (x (1 - x)))``."""
    x = _check_unit(x)
    return _scalar(-np.log(x) - np.log1p(-x))


def log_jacobian_log(x):
    """``log(1 / x)``."""
    return _scalar(-np.log(_check_positive(x)))


def response_to_unconstrained(params: ResponseParams):
    """``(alpha1, logit alpha2, logit alpha3, gamma, logit(b / g(gamma)))``."""
    return np.array([
        params.alpha1,
        logit(params.alpha2),
        logit(params.alpha3),
        params.gamma,
        logit(params.ratio),
    ])


def unconstrained_to_response(z):
    z = np.asarray(z, dtype=float).reshape(-1)
    if z.size != 5 or not np.all(np.isfinite(z)):
        raise DomainError("expected 5 finite unconstrained values")
    return ResponseParams.from_ratio(z[0], expit(z[1]), expit(z[2]), z[3], expit(z[4]))


def response_log_jacobian_zeta(params: ResponseParams):
    """``log |zeta|`` with ``zeta = g(gamma) / (b (g(gamma) - b))``."""
    peak = params.peak
    b = params.b
    if b == 0 or b == peak:
        raise DomainError("b must differ from 0 and from g(gamma)")
    return float(np.log(abs(peak)) - np.log(abs(b)) - np.log(abs(peak - b)))


def log_jacobian_response(params: ResponseParams):
    """Log-determinant of the Jacobian of ``response_to_unconstrained``.

    The Jacobian is lower triangular, so this is the sum of the log diagonal
    entries: ``log|zeta| - log a2 (1 - a2) - log a3 (1 - a3)``.
    """
    return (response_log_jacobian_zeta(params)
            + log_jacobian_logit(params.alpha2)
            + log_jacobian_logit(params.alpha3))


# Array versions used by the sampler. Response parameters are carried as
# (alpha1, alpha2, alpha3, gamma, ratio), the coordinates the proposals act on.


def ratio_coords_to_unconstrained(theta):
    """Map ``(..., 5)`` arrays of ``(a1, a2, a3, gamma, ratio)`` to the real line."""
    theta = np.asarray(theta, dtype=float)
    out = theta.copy()
    out[..., 1] = logit(theta[..., 1])
    out[..., 2] = logit(theta[..., 2])
    out[..., 4] = logit(theta[..., 4])
    return out


def unconstrained_to_ratio_coords(z):
    z = np.asarray(z, dtype=float)
    out = z.copy()
    out[..., 1] = expit(z[..., 1])
    out[..., 2] = expit(z[..., 2])
    out[..., 4] = expit(z[..., 4])
    return out


def ratio_coords_log_jacobian(theta):
    """Log-Jacobian of the map to the real line in ratio coordinates.

    Every unit-interval coordinate contributes ``-log x (1 - x)``.
    """
    theta = np.asarray(theta, dtype=float)
    u = theta[..., [1, 2, 4]]
    return -(np.log(u) + np.log1p(-u)).sum(axis=-1)


def ratio_coords_to_natural(theta):
    """``(a1, a2, a3, gamma, ratio)`` -> ``(a1, a2, a3, gamma, b)``."""
    theta = np.asarray(theta, dtype=float)
    out = theta.copy()
    out[..., 4] = theta[..., 4] * peak_value(theta[..., 0], theta[..., 1], theta[..., 3])
    return out


def natural_to_ratio_coords(phi):
    phi = np.asarray(phi, dtype=float)
    out = phi.copy()
    out[..., 4] = phi[..., 4] / peak_value(phi[..., 0], phi[..., 1], phi[..., 3])
    return out
