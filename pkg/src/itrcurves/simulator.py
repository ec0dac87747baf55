"""Synthetic cohorts with a history-dependent treatment policy.

Each trajectory draws its baseline and response parameters from three-component
mixtures, receives treatments from a fixed conditional probability table given
the previous action and the current outcome level, and is observed with iid
plus treatment-induced correlated noise.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.special import expit, logit

from .errors import DomainError
from .model import (MIN_RATIO, TreatmentEvent, Trajectory, cholesky, noise_kernel,
                    peak_value, response_vector, sample_ou, shared_event_counts)

#: P(action | previous action, outcome level); actions 0 (none), 1, 2.
POLICY_TABLE = {
    (0, 0): (0.3, 0.5, 0.2),
    (0, 1): (0.8, 0.1, 0.1),
    (0, 2): (0.3, 0.2, 0.5),
    (1, 0): (0.3, 0.6, 0.1),
    (1, 1): (0.8, 0.1, 0.1),
    (1, 2): (0.6, 0.1, 0.3),
    (2, 0): (0.6, 0.3, 0.1),
    (2, 1): (0.8, 0.1, 0.1),
    (2, 2): (0.1, 0.1, 0.8),
}

BASELINE_BETA = ((5.0, 5.0, 3.0), (30.0, -5.0, -3.0), (10.0, -2.0, -1.0))
BASELINE_SIGMA_U_SQ = (0.1 ** 2, 0.1 ** 2, 0.1 ** 2)
BASELINE_RHO_U = (0.1, 0.9, 0.5)
RESPONSE_COMPONENTS = (
    ((10.0, 0.9, 0.4, 10.0, 0.0), (5.0, 0.9, 0.9, 5.0, 0.0), (8.0, 0.7, 0.7, 15.0, 0.001)),
    ((-10.0, 0.9, 0.7, 20.0, 0.0), (-6.0, 0.5, 0.5, 15.0, 0.0), (-8.0, 0.4, 0.3, 25.0, 0.0)),
)


def _interval(x, name, positive=False):
    lo, hi = (float(v) for v in x)
    if not lo <= hi or (positive and lo <= 0):
        raise DomainError(f"{name} must be a nonempty interval" + (" of positive values" if positive else ""))
    return lo, hi


@dataclass
class SimConfig:
    """Simulation settings.

    ``covariate_time_unit_minutes`` sets the time unit of the covariates
    ``(1, t, t^2)``; 720 (half-days) reproduces about nine treatments per
    trajectory under the default policy.  Response curve parameters are in
    minutes.
    """

    n_trajectories: int = 200
    duration_hours: tuple = (18.0, 24.0)
    obs_gap_minutes: tuple = (5.0, 15.0)
    treatment_gap_minutes: tuple = (60.0, 80.0)
    normal_range: tuple = (15.0, 25.0)
    baseline_beta: tuple = BASELINE_BETA
    baseline_sigma_u_sq: tuple = BASELINE_SIGMA_U_SQ
    baseline_rho_u: tuple = BASELINE_RHO_U
    response_components: tuple = RESPONSE_COMPONENTS
    sigma_eps_sq: float = 0.3 ** 2
    sigma_eps_prime_sq: float = 0.1 ** 2
    rho_eps_prime: float = 0.9
    baseline_spread: float = 0.1 ** 2
    response_spread: float = 0.3 ** 2
    covariate_time_unit_minutes: float = 720.0
    seed: int = 0

    def __post_init__(self):
        if int(self.n_trajectories) < 1:
            raise DomainError("n_trajectories must be >= 1")
        self.n_trajectories = int(self.n_trajectories)
        self.duration_hours = _interval(self.duration_hours, "duration_hours", True)
        self.obs_gap_minutes = _interval(self.obs_gap_minutes, "obs_gap_minutes", True)
        self.treatment_gap_minutes = _interval(self.treatment_gap_minutes, "treatment_gap_minutes", True)
        self.normal_range = _interval(self.normal_range, "normal_range")
        beta = np.atleast_2d(np.asarray(self.baseline_beta, dtype=float))
        n_comp = beta.shape[0]
        s2 = np.broadcast_to(np.asarray(self.baseline_sigma_u_sq, float), (n_comp,))
        rho = np.broadcast_to(np.asarray(self.baseline_rho_u, float), (n_comp,))
        if np.any(s2 < 0) or np.any((rho <= 0) | (rho >= 1)):
            raise DomainError("baseline sigma_u_sq must be >= 0 and rho_u inside (0, 1)")
        self.baseline_beta = tuple(map(tuple, beta))
        self.baseline_sigma_u_sq = tuple(s2)
        self.baseline_rho_u = tuple(rho)
        resp = [np.atleast_2d(np.asarray(c, dtype=float)) for c in self.response_components]
        for comps in resp:
            if comps.shape[1] != 5:
                raise DomainError("response components need 5 parameters each")
            if np.any((comps[:, 1:3] <= 0) | (comps[:, 1:3] >= 1)) or np.any(comps[:, 3] <= 0):
                raise DomainError("response components need alpha2, alpha3 in (0, 1) and gamma > 0")
        self.response_components = tuple(tuple(map(tuple, c)) for c in resp)
        for name in ("sigma_eps_sq", "sigma_eps_prime_sq", "baseline_spread", "response_spread"):
            if getattr(self, name) < 0:
                raise DomainError(f"{name} must be >= 0")
        if not 0 < self.rho_eps_prime < 1:
            raise DomainError("rho_eps_prime must lie in (0, 1)")
        if not self.covariate_time_unit_minutes > 0:
            raise DomainError("covariate_time_unit_minutes must be positive")

    @property
    def n_types(self):
        return len(self.response_components)

    def replace(self, **changes):
        return dataclasses.replace(self, **changes)


@dataclass
class GroundTruth:
    """Per-individual truth; labels are 1-based component indices."""

    ids: tuple
    baseline_labels: np.ndarray          # (I,)
    response_labels: np.ndarray          # (I, D)
    beta: np.ndarray                     # (I, p)
    sigma_u_sq: np.ndarray
    rho_u: np.ndarray
    response: np.ndarray                 # (I, D, 5) natural
    sigma_eps_sq: float
    sigma_eps_prime_sq: float
    rho_eps_prime: float
    random_effect: list                  # u at observation times
    baseline: list                       # X beta + u
    response_values: list                # f


def discretize_outcome(y, normal_range=(15.0, 25.0)):
    """0 below the range, 1 inside it (inclusive), 2 above."""
    lo, hi = normal_range
    if not lo <= hi:
        raise DomainError("normal range must satisfy lo <= hi")
    if y < lo:
        return 0
    return 1 if y <= hi else 2


def sample_policy_action(prev, level, rng):
    try:
        probs = POLICY_TABLE[(int(prev), int(level))]
    except KeyError:
        raise DomainError(f"no policy row for previous action {prev} and level {level}") from None
    return int(rng.choice(3, p=probs))


def covariate_rows(times, unit_minutes):
    s = np.asarray(times, dtype=float) / unit_minutes
    return np.column_stack([np.ones_like(s), s, s * s])


def _perturb_response(comp, spread, rng):
    a1, a2, a3, gam, b = comp
    peak = peak_value(a1, a2, gam)
    ratio = max(b / peak, MIN_RATIO)
    sd = np.sqrt(spread)
    z = np.array([a1, logit(a2), logit(a3), gam, logit(ratio)]) + sd * rng.standard_normal(5)
    a1, a2, a3, gam, ratio = z[0], expit(z[1]), expit(z[2]), z[3], expit(z[4])
    if gam <= 0:
        raise DomainError("perturbed switch point is not positive; reduce response_spread")
    return np.array([a1, a2, a3, gam, max(ratio, MIN_RATIO) * peak_value(a1, a2, gam)])


def _uniform_steps(start, gap, end, rng):
    out = []
    t = start
    while t <= end:
        out.append(t)
        t += rng.uniform(*gap)
    return np.array(out)


def simulate_trajectory(cfg: SimConfig, traj_id, rng):
    """Simulate one trajectory; returns ``(Trajectory, truth dict)``."""
    duration = rng.uniform(*cfg.duration_hours) * 60.0
    times = _uniform_steps(0.0, cfg.obs_gap_minutes, duration, rng)
    first = rng.uniform(*cfg.treatment_gap_minutes)
    slots = _uniform_steps(first, cfg.treatment_gap_minutes, duration, rng) if first <= duration \
        else np.empty(0)
    # component labels and individual parameters
    n_base = len(cfg.baseline_beta)
    kb = int(rng.integers(n_base))
    sd_b = np.sqrt(cfg.baseline_spread)
    beta = np.asarray(cfg.baseline_beta[kb]) + sd_b * rng.standard_normal(3)
    s2_comp = cfg.baseline_sigma_u_sq[kb]
    s2u = float(np.exp(np.log(s2_comp) + sd_b * rng.standard_normal())) if s2_comp > 0 else 0.0
    rho = float(expit(logit(cfg.baseline_rho_u[kb]) + sd_b * rng.standard_normal()))
    kr = np.array([rng.integers(len(c)) for c in cfg.response_components])
    resp = np.array([_perturb_response(cfg.response_components[d][kr[d]], cfg.response_spread, rng)
                     for d in range(cfg.n_types)])
    # one random-effect path over observation and decision times
    union = np.union1d(times, slots)
    u_union = sample_ou(union, s2u, rho, rng) if s2u > 0 else np.zeros(union.size)
    u_at = dict(zip(union.tolist(), u_union))
    # treatment decisions
    events = []
    prev = 0
    unit = cfg.covariate_time_unit_minutes
    for tau in slots:
        x = covariate_rows([tau], unit)[0]
        ev_t = np.array([e.time for e in events])
        f = response_vector([tau], ev_t, resp[[e.kind - 1 for e in events]]) if events else [0.0]
        level = discretize_outcome(x @ beta + u_at[tau] + f[0], cfg.normal_range)
        action = sample_policy_action(prev, level, rng)
        if action:
            events.append(TreatmentEvent(float(tau), action))
        prev = action
    # outcomes
    X = covariate_rows(times, unit)
    u = np.array([u_at[t] for t in times.tolist()])
    ev_t = np.array([e.time for e in events])
    ev_k = np.array([e.kind for e in events], dtype=int)
    f = response_vector(times, ev_t, resp[ev_k - 1]) if events else np.zeros(times.size)
    noise = np.zeros(times.size)
    if cfg.sigma_eps_sq > 0:
        noise += np.sqrt(cfg.sigma_eps_sq) * rng.standard_normal(times.size)
    if events and cfg.sigma_eps_prime_sq > 0:
        kinds = list(range(1, cfg.n_types + 1))
        shared = shared_event_counts(times, ev_t, ev_k, kinds)
        K = noise_kernel(times, shared, [cfg.sigma_eps_prime_sq] * len(kinds),
                         [cfg.rho_eps_prime] * len(kinds))
        rows = np.flatnonzero(K.diagonal() > 0)
        noise[rows] += cholesky(K[np.ix_(rows, rows)]) @ rng.standard_normal(rows.size)
    base = X @ beta + u
    traj = Trajectory(traj_id, times, base + f + noise, X, tuple(events))
    truth = dict(kb=kb + 1, kr=kr + 1, beta=beta, s2u=s2u, rho=rho, resp=resp, u=u, base=base, f=f)
    return traj, truth


def simulate_cohort(cfg: SimConfig, rng=None):
    """Simulate ``cfg.n_trajectories`` trajectories; returns ``(cohort, GroundTruth)``.

    Every trajectory uses its own seed derived from ``cfg.seed`` (or from
    ``rng`` when given), so the output does not depend on generation order.
    """
    n = cfg.n_trajectories
    if rng is None:
        seeds = np.random.SeedSequence(cfg.seed).spawn(n)
    else:
        seeds = [np.random.SeedSequence(int(s)) for s in rng.integers(0, 2 ** 63, size=n)]
    width = max(4, len(str(n)))
    cohort, truths = [], []
    for i in range(n):
        traj, truth = simulate_trajectory(cfg, f"sim{i + 1:0{width}d}", np.random.default_rng(seeds[i]))
        cohort.append(traj)
        truths.append(truth)
    gt = GroundTruth(
        ids=tuple(t.id for t in cohort),
        baseline_labels=np.array([t["kb"] for t in truths]),
        response_labels=np.array([t["kr"] for t in truths]).reshape(n, cfg.n_types),
        beta=np.array([t["beta"] for t in truths]),
        sigma_u_sq=np.array([t["s2u"] for t in truths]),
        rho_u=np.array([t["rho"] for t in truths]),
        response=np.array([t["resp"] for t in truths]).reshape(n, cfg.n_types, 5),
        sigma_eps_sq=cfg.sigma_eps_sq,
        sigma_eps_prime_sq=cfg.sigma_eps_prime_sq,
        rho_eps_prime=cfg.rho_eps_prime,
        random_effect=[t["u"] for t in truths],
        baseline=[t["base"] for t in truths],
        response_values=[t["f"] for t in truths],
    )
    return cohort, gt
