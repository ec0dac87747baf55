"""Metropolis-Hastings proposal kernels.

Each ``propose_*`` function returns ``(candidate, log_hastings)`` where
``log_hastings = log q(current | candidate) - log q(candidate | current)``.
"""
import numpy as np
from scipy.special import expit, log_ndtr, logit

from .errors import DomainError


def reflect_unit(x):
    """Fold values back into [0, 1] by repeated reflection at 0 and 1."""
    y = np.mod(np.asarray(x, dtype=float), 2.0)
    return np.where(y > 1.0, 2.0 - y, y)


def propose_reflected(x, scale, rng):
    """Reflected normal on (0, 1); symmetric, so the Hastings term is 0."""
    x = np.asarray(x, dtype=float)
    return reflect_unit(x + scale * rng.standard_normal(x.shape)), np.zeros(x.shape)


def truncnorm_log_hastings(x, cand, scale):
    """``log Phi(x / s) - log Phi(cand / s)`` for the positive truncated normal."""
    return log_ndtr(np.asarray(x) / scale) - log_ndtr(np.asarray(cand) / scale)


def propose_truncnorm(x, scale, rng):
    """Normal centred at ``x`` truncated to the positive half-line."""
    x = np.asarray(x, dtype=float)
    cand = np.empty_like(x)
    flat_x, flat_c = x.reshape(-1), cand.reshape(-1)
    for j, xj in enumerate(flat_x):
        while True:
            c = xj + scale * rng.standard_normal()
            if c > 0:
                flat_c[j] = c
                break
    return cand, truncnorm_log_hastings(x, cand, scale)


def propose_logit_walk(x, scale, rng):
    """Gaussian walk on the logit scale; Hastings term is the Jacobian ratio."""
    x = np.asarray(x, dtype=float)
    cand = expit(logit(x) + scale * rng.standard_normal(x.shape))
    log_h = (np.log(cand) + np.log1p(-cand)) - (np.log(x) + np.log1p(-x))
    return cand, log_h


def propose_log_walk(x, scale, rng):
    """Gaussian walk on the log scale; Hastings term is ``log(cand / x)``."""
    x = np.asarray(x, dtype=float)
    cand = x * np.exp(scale * rng.standard_normal(x.shape))
    return cand, np.log(cand) - np.log(x)


def propose_normal(x, scale, rng):
    x = np.asarray(x, dtype=float)
    return x + scale * rng.standard_normal(x.shape), np.zeros(x.shape)


UNIT_KINDS = {"reflect": propose_reflected, "logit": propose_logit_walk}
POSITIVE_KINDS = {"truncnorm": propose_truncnorm, "log": propose_log_walk}


def unit_proposal(kind):
    try:
        return UNIT_KINDS[kind]
    except KeyError:
        raise DomainError(f"unknown unit-interval proposal {kind!r}") from None


def positive_proposal(kind):
    try:
        return POSITIVE_KINDS[kind]
    except KeyError:
        raise DomainError(f"unknown positive proposal {kind!r}") from None


def accept(log_ratio, rng):
    """Metropolis-Hastings acceptance decision."""
    if not np.isfinite(log_ratio):
        return bool(log_ratio > 0)
    return bool(np.log(rng.uniform()) < min(0.0, log_ratio))
