"""Chain diagnostics: effective sample size, batch means and Geweke comparisons."""
import numpy as np

from .errors import DomainError


def autocorrelation(x):
    """Sample autocorrelation at all lags via the FFT."""
    x = np.asarray(x, dtype=float).reshape(-1)
    n = x.size
    if n < 2:
        raise DomainError("need at least two values")
    x = x - x.mean()
    size = 1 << (2 * n - 1).bit_length()
    spec = np.fft.rfft(x, size)
    acov = np.fft.irfft(spec * np.conj(spec), size)[:n]
    if acov[0] == 0:
        return np.r_[1.0, np.zeros(n - 1)]
    return acov / acov[0]


def effective_sample_size(x):
    """ESS from the initial positive sequence of paired autocorrelations."""
    rho = autocorrelation(x)
    n = rho.size
    total = 0.0
    for k in range(0, n - 1, 2):
        pair = rho[k] + rho[k + 1]
        if pair <= 0:
            break
        total += pair
    tau = max(2.0 * total - 1.0, 1e-12)
    return float(n / tau)


def batch_means_se(x, n_batches=None):
    """Monte Carlo standard error of the mean by non-overlapping batch means."""
    x = np.asarray(x, dtype=float).reshape(-1)
    n = x.size
    b = n_batches or max(int(np.sqrt(n)), 2)
    size = n // b
    if size < 1:
        raise DomainError("too few values for batch means")
    means = x[: size * b].reshape(b, size).mean(axis=1)
    return float(means.std(ddof=1) / np.sqrt(b))


def geweke_z(forward, successive, n_batches=None):
    """Two-sample z statistic for a test function under the two samplers.

    ``forward`` holds independent draws; ``successive`` is a Markov chain, so
    its standard error comes from batch means.
    """
    f = np.asarray(forward, dtype=float).reshape(-1)
    s = np.asarray(successive, dtype=float).reshape(-1)
    se_f = f.std(ddof=1) / np.sqrt(f.size)
    se_s = batch_means_se(s, n_batches)
    return float((f.mean() - s.mean()) / np.hypot(se_f, se_s))


def summarize(draws):
    """Mean, standard deviation, 95% interval and ESS of each scalar column.

    ``draws`` maps names to arrays whose first axis indexes draws.  Returns a
    list of rows ``(name, mean, sd, q025, q975, ess)``.
    """
    rows = []
    for name, arr in draws.items():
        a = np.asarray(arr, dtype=float)
        flat = a.reshape(a.shape[0], -1)
        for j in range(flat.shape[1]):
            col = flat[:, j]
            if not np.all(np.isfinite(col)):
                continue
            idx = np.unravel_index(j, a.shape[1:]) if a.ndim > 1 else ()
            label = name + "".join(f"[{k}]" for k in idx)
            ess = effective_sample_size(col) if col.size > 1 and col.std() > 0 else float(col.size)
            rows.append((label, float(col.mean()), float(col.std(ddof=1)) if col.size > 1 else 0.0,
                         float(np.quantile(col, 0.025)), float(np.quantile(col, 0.975)), ess))
    return rows


def geweke_samples(cohort, h, cfg, rounds, functions, seed=0):
    """Joint-distribution check of a sampler.

    The forward sampler draws every unknown from the prior and then the
    outcomes from the likelihood.  The successive-conditional sampler alternates
    one sweep with a fresh draw of the outcomes.  Both target the same joint
    distribution when every update is correct.

    Parameters
    ----------
    cohort : sequence of Trajectory
        Supplies the design (times, covariates, treatments); outcomes are replaced.
    h : Hyperparams
    cfg : SamplerConfig
    rounds : int
        Draws from each sampler.
    functions : dict
        Name to callable taking a ``Sampler`` and returning a scalar.

    Returns
    -------
    dict
        Name to ``(forward_values, successive_values, z)``.
    """
    from .sampler import Sampler

    rng = np.random.default_rng(seed)
    fwd = {k: np.empty(rounds) for k in functions}
    for r in range(rounds):
        s = Sampler(cohort, h, cfg, rng)
        s.resample_outcomes()
        for k, fn in functions.items():
            fwd[k][r] = fn(s)
    s = Sampler(cohort, h, cfg, rng)
    s.resample_outcomes()
    suc = {k: np.empty(rounds) for k in functions}
    for r in range(rounds):
        s.sweep()
        s.resample_outcomes()
        for k, fn in functions.items():
            suc[k][r] = fn(s)
    return {k: (fwd[k], suc[k], geweke_z(fwd[k], suc[k])) for k in functions}
