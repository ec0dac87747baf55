"""Forecasting, held-out error, model variants and curve summaries."""
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_solve

from .dpm import Hyperparams
from .errors import DomainError
from .model import (Trajectory, cholesky, curve_array, exp_kernel, noise_kernel,
                    response_vector, shared_event_counts)

VARIANTS = ("itr", "pop", "individual", "subpop")
COLLAPSED_SPREAD = 1e-6
INDIVIDUAL_CONCENTRATION = 1e6


@dataclass(frozen=True)
class VariantConfig:
    variant: str = "itr"

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise DomainError(f"variant must be one of {VARIANTS}, got {self.variant!r}")


@dataclass(frozen=True)
class ForecastRequest:
    """What to forecast for one individual.

    Parameters
    ----------
    individual : str
        Trajectory identifier.
    cutoff : int
        Number of leading observations used for fitting.
    future_times : array_like
        Forecast times, all after the last training time.
    future_covariates : array_like
        ``(len(future_times), p)`` covariate rows at the forecast times.
    future_treatments : tuple of TreatmentEvent
        Treatments given after the training window.
    """

    individual: str
    cutoff: int
    future_times: np.ndarray
    future_covariates: np.ndarray
    future_treatments: tuple = field(default=())

    def __post_init__(self):
        if self.cutoff < 1:
            raise DomainError("cutoff must be at least 1")
        t = np.asarray(self.future_times, dtype=float).reshape(-1)
        X = np.asarray(self.future_covariates, dtype=float).reshape(t.size, -1)
        object.__setattr__(self, "future_times", t)
        object.__setattr__(self, "future_covariates", X)
        object.__setattr__(self, "future_treatments", tuple(self.future_treatments))


def holdout_request(traj: Trajectory, cutoff):
    """Split a full trajectory into a training head and a forecast request.

    Returns ``(train, request, future_outcomes)``.
    """
    if not 1 <= cutoff < traj.n_obs:
        raise DomainError(f"cutoff must lie in [1, {traj.n_obs - 1}] for {traj.id!r}")
    train = traj.head(cutoff)
    future = tuple(e for e in traj.treatments if e.time >= train.times[-1])
    req = ForecastRequest(traj.id, cutoff, traj.times[cutoff:], traj.covariates[cutoff:],
                          future)
    return train, req, np.array(traj.outcomes[cutoff:])


def posterior_predict(draw, traj: Trajectory, req: ForecastRequest, rng=None, window=None):
    """Gaussian-conditional forecast of one individual under one posterior draw.

    Parameters
    ----------
    draw : ParameterDraw
        One retained draw; the individual is looked up by ``traj.id``.
    traj : Trajectory
        The individual's data; only the first ``req.cutoff`` observations are used.
    req : ForecastRequest
    rng : numpy.random.Generator, optional
        Needed for the predictive sample; without it the sample is ``None``.
    window : optional
        Treatment-noise window, as in the fitted model.

    Returns
    -------
    mean : ndarray
        Predictive mean at ``req.future_times``.
    sample : ndarray or None
        One draw from the predictive distribution.
    """
    if req.individual != traj.id:
        raise DomainError(f"request for {req.individual!r} does not match trajectory {traj.id!r}")
    train = traj.head(req.cutoff)
    t_tr, t_fu = train.times, req.future_times
    if t_fu.size and t_fu[0] <= t_tr[-1]:
        raise DomainError("future times must follow the last training time")
    i = draw.index(traj.id)
    beta = draw.beta[i]
    if req.future_covariates.shape[1] != beta.size or train.n_covariates != beta.size:
        raise DomainError("covariate dimension does not match the draw")
    events = sorted(set(train.treatments) | set(req.future_treatments), key=lambda e: e.time)
    ev_t = np.array([e.time for e in events], dtype=float)
    ev_k = np.array([e.kind for e in events], dtype=int)
    D = draw.response.shape[1]
    if ev_k.size and (ev_k.min() < 1 or ev_k.max() > D):
        raise DomainError(f"treatment type outside 1..{D}")
    params = draw.response[i][ev_k - 1] if ev_k.size else np.zeros((0, 5))

    t_all = np.concatenate([t_tr, t_fu])
    n = t_tr.size
    f_all = response_vector(t_all, ev_t, params)
    shared = shared_event_counts(t_all, ev_t, ev_k, list(range(1, D + 1)), window)
    C = (exp_kernel(draw.sigma_u_sq[i], draw.rho_u[i], t_all)
         + noise_kernel(t_all, shared, draw.sigma_eps_prime_sq, draw.rho_eps_prime))
    s2 = draw.sigma_eps_sq[i]
    r = train.outcomes - train.covariates @ beta - f_all[:n]
    L = cholesky(C[:n, :n] + s2 * np.eye(n))
    C_ft = C[n:, :n]
    mean = req.future_covariates @ beta + f_all[n:] + C_ft @ cho_solve((L, True), r)
    if rng is None:
        return mean, None
    cond = C[n:, n:] - C_ft @ cho_solve((L, True), C_ft.T)
    cond = 0.5 * (cond + cond.T) + s2 * np.eye(t_fu.size)
    sample = mean + cholesky(cond) @ rng.standard_normal(t_fu.size)
    return mean, sample


def _draw_means(traces, train: Trajectory, req, window):
    rows = []
    for tr in traces:
        for k in range(tr.n_draws):
            rows.append(posterior_predict(tr.draw(k), train, req, window=window)[0])
    return np.array(rows)


def horizon_buckets(horizon, width):
    """Integer bucket index of each horizon; bucket ``b`` covers ``(b w, (b + 1) w]``."""
    return np.maximum(np.ceil(np.asarray(horizon, dtype=float) / width) - 1, 0).astype(int)


def evaluate_rmse(traces, cohort, cutoff, bucket_width=1440.0, window=None):
    """Held-out RMSE by forecast horizon.

    Each individual's forecast is the mean of the per-draw predictive means over
    all retained draws of all chains.  RMSE is taken per individual and bucket,
    then averaged over the individuals with observations in the bucket.  The
    interval comes from the 2.5% and 97.5% quantiles of the same statistic
    computed from each draw's predictive mean alone.

    Parameters
    ----------
    traces : sequence of PosteriorTrace
        Chains fitted to the first ``cutoff`` observations of each trajectory.
    cohort : sequence of Trajectory
        Full trajectories.
    cutoff : int
        Number of leading observations used for training.
    bucket_width : float
        Horizon bucket width in minutes, measured from the last training time.

    Returns
    -------
    list of dict
        One row per non-empty bucket with keys ``bucket``, ``lower``, ``upper``,
        ``n_individuals``, ``rmse``, ``ci_lower``, ``ci_upper``.
    """
    traces = list(traces)
    if not traces or any(tr.n_draws < 1 for tr in traces):
        raise DomainError("need at least one trace with at least one retained draw")
    sq_mean, sq_draw = {}, {}
    for traj in cohort:
        if traj.n_obs <= cutoff:
            continue
        train, req, y_fut = holdout_request(traj, cutoff)
        preds = _draw_means(traces, train, req, window)
        b = horizon_buckets(req.future_times - train.times[-1], bucket_width)
        err_mean = (preds.mean(axis=0) - y_fut) ** 2
        err_draw = (preds - y_fut) ** 2
        for k in np.unique(b):
            m = b == k
            sq_mean.setdefault(k, []).append(np.sqrt(err_mean[m].mean()))
            sq_draw.setdefault(k, []).append(np.sqrt(err_draw[:, m].mean(axis=1)))
    rows = []
    for k in sorted(sq_mean):
        per_draw = np.mean(sq_draw[k], axis=0)
        lo, hi = np.quantile(per_draw, [0.025, 0.975])
        rows.append(dict(bucket=int(k), lower=k * bucket_width, upper=(k + 1) * bucket_width,
                         n_individuals=len(sq_mean[k]), rmse=float(np.mean(sq_mean[k])),
                         ci_lower=float(lo), ci_upper=float(hi)))
    return rows


def mean_rmse(rows):
    """Individual-weighted mean RMSE across bucket rows."""
    n = np.array([r["n_individuals"] for r in rows], dtype=float)
    v = np.array([r["rmse"] for r in rows])
    return float((n * v).sum() / n.sum())


def apply_variant(cfg: VariantConfig, h: Hyperparams, n_individuals=None):
    """Express a model variant as a change of hyperparameters.

    ``pop`` uses one component with collapsed within-component spread,
    ``subpop`` keeps the truncation but collapses the spreads, and
    ``individual`` gives every individual its own pinned component with a
    very large concentration.
    """
    if cfg.variant == "itr":
        return h
    collapsed = dict(fixed_sigma_star=COLLAPSED_SPREAD * np.eye(h.p),
                     var_sigma_within=COLLAPSED_SPREAD, var_rho_within=COLLAPSED_SPREAD,
                     D_phi0=np.full(5, COLLAPSED_SPREAD))
    if cfg.variant == "pop":
        return h.replace(K1=1, K2=(1,) * h.D, **collapsed)
    if cfg.variant == "subpop":
        return h.replace(**collapsed)
    if n_individuals is None:
        raise DomainError("the individual variant needs the number of individuals")
    n = int(n_individuals)
    return h.replace(K1=n, K2=(n,) * h.D, pin_assignments=True,
                     fixed_concentration=INDIVIDUAL_CONCENTRATION)


def initial_outcome(traj: Trajectory, kind):
    """Outcome at the first observation at or before the first treatment of ``kind``."""
    times = [e.time for e in traj.treatments if e.kind == kind]
    if not times:
        raise DomainError(f"trajectory {traj.id!r} has no treatment of type {kind}")
    j = max(int(np.searchsorted(traj.times, times[0], side="right")) - 1, 0)
    return float(traj.outcomes[j])


def extract_curves(trace, individual, kind, grid, normalize=False, trajectory=None):
    """Posterior mean and 95% band of one individual's response curve.

    Parameters
    ----------
    trace : PosteriorTrace
    individual : str or int
    kind : int
        Treatment type, 1-based.
    grid : array_like
        Nonnegative times since treatment, in minutes.
    normalize : bool
        Divide by the outcome at treatment initiation; needs ``trajectory``.

    Returns
    -------
    dict with ``time``, ``mean``, ``lower``, ``upper`` arrays.
    """
    grid = np.asarray(grid, dtype=float).reshape(-1)
    if np.any(grid < 0):
        raise DomainError("curve grid must be nonnegative")
    i = trace.draw(0).index(individual)
    P = trace.draws["response"][:, i, kind - 1, :]
    G = curve_array(grid[None, :], *(P[:, [j]] for j in range(5)))
    if normalize:
        if trajectory is None:
            raise DomainError("normalization needs the individual's trajectory")
        G = G / initial_outcome(trajectory, kind)
    lo, hi = np.quantile(G, [0.025, 0.975], axis=0)
    return dict(time=grid, mean=G.mean(axis=0), lower=lo, upper=hi)


def cluster_summary(trace, min_share=0.05):
    """Occupied clusters at the last retained draw.

    Returns a dict with key ``"baseline"`` and one key per treatment type
    (1-based).  Each value lists ``(component, members)`` pairs for components
    holding at least ``min_share`` of the individuals, largest first.
    """
    d = trace.draws
    n = d["z_baseline"].shape[1]

    def occupied(z):
        ks, counts = np.unique(z, return_counts=True)
        keep = [(k, np.flatnonzero(z == k)) for k, c in zip(ks, counts) if c >= min_share * n]
        return sorted(keep, key=lambda kv: -kv[1].size)

    out = {"baseline": occupied(d["z_baseline"][-1])}
    for kind in range(d["z_response"].shape[2]):
        out[kind + 1] = occupied(d["z_response"][-1, :, kind])
    return out


__all__ = ["VARIANTS", "VariantConfig", "ForecastRequest", "holdout_request",
           "posterior_predict", "horizon_buckets", "evaluate_rmse", "mean_rmse",
           "apply_variant", "initial_outcome", "extract_curves", "cluster_summary"]
