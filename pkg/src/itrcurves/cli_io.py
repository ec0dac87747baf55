"""Command-line interface, configuration, tabular ingestion and trace files."""
import argparse
import csv
import dataclasses
import json
import os
import sys
from pathlib import Path

import numpy as np

from .dpm import Hyperparams, truncation_error_bound
from .errors import DomainError, NumericalError, ParseError
from .evaluate import (VariantConfig, apply_variant, evaluate_rmse, holdout_request,
                       posterior_predict)
from .diagnostics import summarize
from .model import TreatmentEvent, Trajectory
from .sampler import PosteriorTrace, SamplerConfig, chain_seeds, run_chain
from .simulator import SimConfig, simulate_cohort

FORMAT_VERSION = 1
TRACE_MAGIC = b"ITRTRACE"
OUT_ENV = "ITRCURVES_OUT"
TIME_UNITS = {"minutes": 1.0, "hours": 60.0, "days": 1440.0}
OBS_FILE, COV_FILE, TRT_FILE, TRUTH_FILE = (
    "observations.csv", "covariates.csv", "treatments.csv", "truth.csv")
STATIC_TIME = -1.0


def fmt(x):
    """Lossless text form of a float."""
    return "%.17g" % x


# ---------------------------------------------------------------------------
# tabular files
# ---------------------------------------------------------------------------


def _read_table(path: Path, columns):
    if not path.exists():
        raise ParseError(f"missing file {path.name}", str(path), 0)
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise ParseError("empty file, expected a header row", str(path), 1)
        header = [h.strip() for h in header]
        missing = [c for c in columns if c not in header]
        if missing:
            raise ParseError(f"missing columns {missing}", str(path), 1)
        pos = [header.index(c) for c in columns]
        rows = []
        for line, row in enumerate(reader, start=2):
            if not row or all(not cell.strip() for cell in row):
                continue
            if len(row) < len(header):
                raise ParseError("too few fields", str(path), line)
            rows.append((line, [row[p].strip() for p in pos]))
    return rows


def _number(text, path, line, what):
    try:
        v = float(text)
    except ValueError:
        raise ParseError(f"non-numeric {what} {text!r}", str(path), line) from None
    if not np.isfinite(v):
        raise ParseError(f"non-finite {what} {text!r}", str(path), line)
    return v


def ingest_cohort(data_dir, unit="minutes", n_types=None):
    """Read a cohort from ``observations.csv``, ``covariates.csv`` and ``treatments.csv``.

    Parameters
    ----------
    data_dir : path
    unit : {"minutes", "hours", "days"}
        Time unit of the files; times are converted to minutes.  Static
        covariates use time ``-1`` in any unit.
    n_types : int, optional
        Number of treatment types; larger type codes are rejected.

    Returns
    -------
    list of Trajectory
        In order of first appearance in the observations file.  Covariate
        columns follow the order in which names first appear, after an
        intercept.  A time-varying covariate takes its most recent value at or
        before each observation time.
    """
    if unit not in TIME_UNITS:
        raise DomainError(f"unit must be one of {sorted(TIME_UNITS)}, got {unit!r}")
    scale = TIME_UNITS[unit]
    d = Path(data_dir)
    obs, order = {}, []
    path = d / OBS_FILE
    for line, (tid, t, y) in _read_table(path, ["trajectory_id", "time", "value"]):
        if not tid:
            raise ParseError("empty trajectory_id", str(path), line)
        if tid not in obs:
            obs[tid] = []
            order.append(tid)
        obs[tid].append((_number(t, path, line, "time") * scale, _number(y, path, line, "value"),
                         line))
    covs, names = {}, []
    path = d / COV_FILE
    for line, (tid, t, name, v) in _read_table(path, ["trajectory_id", "time", "name", "value"]):
        if tid not in obs:
            raise ParseError(f"covariate for unknown trajectory {tid!r}", str(path), line)
        if not name:
            raise ParseError("empty covariate name", str(path), line)
        if name not in names:
            names.append(name)
        tv = _number(t, path, line, "time")
        key = STATIC_TIME if tv == STATIC_TIME else tv * scale
        covs.setdefault(tid, {}).setdefault(name, []).append(
            (key, _number(v, path, line, "value"), line))
    events = {}
    path = d / TRT_FILE
    for line, (tid, t, kind) in _read_table(path, ["trajectory_id", "time", "type"]):
        if tid not in obs:
            raise ParseError(f"treatment for unknown trajectory {tid!r}", str(path), line)
        k = _number(kind, path, line, "type")
        if k != int(k) or k < 1 or (n_types is not None and k > n_types):
            raise ParseError(f"unknown treatment type {kind!r}", str(path), line)
        events.setdefault(tid, []).append(TreatmentEvent(_number(t, path, line, "time") * scale,
                                                         int(k)))
    cohort = []
    for tid in order:
        rows = sorted(obs[tid], key=lambda r: r[0])
        times = np.array([r[0] for r in rows])
        dup = np.flatnonzero(np.diff(times) == 0)
        if dup.size:
            raise ParseError(f"duplicate time for trajectory {tid!r}", str(d / OBS_FILE),
                             rows[dup[0] + 1][2])
        X = np.ones((times.size, 1 + len(names)))
        for c, name in enumerate(names, start=1):
            X[:, c] = _covariate_column(tid, name, covs.get(tid, {}).get(name, []), times,
                                        d / COV_FILE)
        trt = tuple(sorted(events.get(tid, []), key=lambda e: e.time))
        cohort.append(Trajectory(tid, times, [r[1] for r in rows], X, trt))
    return cohort


def _covariate_column(tid, name, entries, times, path):
    if not entries:
        raise ParseError(f"trajectory {tid!r} has no values of covariate {name!r}", str(path), 0)
    static = [e for e in entries if e[0] == STATIC_TIME]
    if static:
        if len(entries) > 1:
            raise ParseError(f"covariate {name!r} of {tid!r} is both static and time-varying",
                             str(path), entries[1][2])
        return np.full(times.size, static[0][1])
    entries = sorted(entries, key=lambda e: e[0])
    et = np.array([e[0] for e in entries])
    dup = np.flatnonzero(np.diff(et) == 0)
    if dup.size:
        raise ParseError(f"duplicate time for covariate {name!r} of {tid!r}", str(path),
                         entries[dup[0] + 1][2])
    idx = np.searchsorted(et, times, side="right") - 1
    if np.any(idx < 0):
        raise ParseError(f"covariate {name!r} of {tid!r} has no value at time {times[0]:g}",
                         str(path), entries[0][2])
    return np.array([entries[j][1] for j in idx])


def _write_rows(path: Path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([fmt(v) if isinstance(v, (float, np.floating)) else v for v in row])


def write_cohort(out_dir, cohort, covariate_names=None):
    """Write a cohort in the three-file format, times in minutes.

    Covariate columns after the intercept are written per observation time,
    named ``covariate_names`` or ``x1, x2, ...``.
    """
    d = Path(out_dir)
    d.mkdir(parents=True, exist_ok=True)
    p = cohort[0].n_covariates if cohort else 1
    names = list(covariate_names or [f"x{j}" for j in range(1, p)])
    if len(names) != p - 1:
        raise DomainError("need one name per non-intercept covariate")
    _write_rows(d / OBS_FILE, ["trajectory_id", "time", "value"],
                ((tr.id, float(t), float(y)) for tr in cohort for t, y in zip(tr.times, tr.outcomes)))
    _write_rows(d / COV_FILE, ["trajectory_id", "time", "name", "value"],
                ((tr.id, float(t), name, float(tr.covariates[j, c + 1]))
                 for tr in cohort for j, t in enumerate(tr.times) for c, name in enumerate(names)))
    _write_rows(d / TRT_FILE, ["trajectory_id", "time", "type"],
                ((tr.id, float(e.time), e.kind) for tr in cohort for e in tr.treatments))


def write_truth(path, gt):
    """Per-individual labels and parameters of a simulated cohort."""
    D = gt.response.shape[1]
    p = gt.beta.shape[1]
    header = (["trajectory_id", "baseline_label"] + [f"response_label_{d + 1}" for d in range(D)]
              + [f"beta_{j}" for j in range(p)] + ["sigma_u_sq", "rho_u"]
              + [f"{n}_{d + 1}" for d in range(D)
                 for n in ("alpha1", "alpha2", "alpha3", "gamma", "b")]
              + ["sigma_eps_sq", "sigma_eps_prime_sq", "rho_eps_prime"])
    rows = []
    for i, tid in enumerate(gt.ids):
        rows.append([tid, int(gt.baseline_labels[i])] + [int(v) for v in gt.response_labels[i]]
                    + [float(v) for v in gt.beta[i]]
                    + [float(gt.sigma_u_sq[i]), float(gt.rho_u[i])]
                    + [float(v) for v in gt.response[i].reshape(-1)]
                    + [float(gt.sigma_eps_sq), float(gt.sigma_eps_prime_sq),
                       float(gt.rho_eps_prime)])
    _write_rows(Path(path), header, rows)


# ---------------------------------------------------------------------------
# trace files
# ---------------------------------------------------------------------------


def _jsonable(v):
    if isinstance(v, np.ndarray):
        return v.tolist()
    if isinstance(v, (np.integer,)):
        return int(v)
    if isinstance(v, (np.floating,)):
        return float(v)
    if isinstance(v, tuple):
        return [_jsonable(x) for x in v]
    if isinstance(v, dict):
        return {k: _jsonable(x) for k, x in v.items()}
    if isinstance(v, list):
        return [_jsonable(x) for x in v]
    return v


def write_trace(path, trace: PosteriorTrace, config=None):
    """Write a trace as a JSON header line followed by raw little-endian arrays.

    The header records the format version, model dimensions, the run
    configuration and the dtype, shape and byte offset of every array.  Run
    time is not stored, so equal runs give identical files.
    """
    arrays, offset = [], 0
    for name in sorted(trace.draws):
        a = np.ascontiguousarray(trace.draws[name])
        a = a.astype(a.dtype.newbyteorder("<"), copy=False)
        arrays.append((name, a))
    entries = []
    for name, a in arrays:
        entries.append({"name": name, "dtype": a.dtype.str, "shape": list(a.shape),
                        "offset": offset})
        offset += a.nbytes
    header = {"version": FORMAT_VERSION, "meta": _jsonable(trace.meta),
              "acceptance": _jsonable(trace.acceptance), "config": _jsonable(config or {}),
              "arrays": entries}
    with open(path, "wb") as fh:
        fh.write(TRACE_MAGIC + b"\n")
        fh.write(json.dumps(header, sort_keys=True).encode() + b"\n")
        for _, a in arrays:
            fh.write(a.tobytes())


def read_trace(path):
    """Inverse of ``write_trace``; returns ``(PosteriorTrace, config)``."""
    path = Path(path)
    with open(path, "rb") as fh:
        if fh.readline().rstrip(b"\n") != TRACE_MAGIC:
            raise ParseError("not a trace file", str(path), 1)
        try:
            header = json.loads(fh.readline())
        except json.JSONDecodeError as exc:
            raise ParseError(f"unreadable trace header: {exc}", str(path), 2) from None
        if header.get("version") != FORMAT_VERSION:
            raise ParseError(f"unsupported trace format version {header.get('version')!r}",
                             str(path), 2)
        payload = fh.read()
    draws = {}
    for e in header["arrays"]:
        dt = np.dtype(e["dtype"])
        n = int(np.prod(e["shape"], dtype=np.int64)) * dt.itemsize
        if e["offset"] + n > len(payload):
            raise ParseError(f"truncated array {e['name']!r}", str(path), 3)
        draws[e["name"]] = np.frombuffer(payload, dtype=dt, count=n // dt.itemsize,
                                         offset=e["offset"]).reshape(e["shape"]).copy()
    trace = PosteriorTrace(draws, {k: list(v) for k, v in header["acceptance"].items()},
                           header["meta"])
    return trace, header["config"]


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------

SECTIONS = {"sampler": SamplerConfig, "sim": SimConfig, "hyper": Hyperparams}
TOP_KEYS = {"variant": "itr", "unit": "minutes", "cutoff": None, "bucket_width": 1440.0,
            "n_types": 2, "hyper_preset": "simulation"}


def load_config(path=None):
    """Read a JSON object of flat dotted keys, e.g. ``{"sampler.iterations": 500}``.

    Returns ``{"sampler": {...}, "sim": {...}, "hyper": {...}, <top-level keys>}``.
    """
    cfg = {s: {} for s in SECTIONS}
    cfg.update(TOP_KEYS)
    if path is None:
        return cfg
    path = Path(path)
    try:
        raw = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ParseError(f"cannot read config: {exc}", str(path), getattr(exc, "lineno", 0)) \
            from None
    if not isinstance(raw, dict):
        raise ParseError("config must be a JSON object", str(path), 1)
    for key, value in raw.items():
        section, _, name = key.partition(".")
        if name:
            if section not in SECTIONS:
                raise ParseError(f"unknown config section {section!r}", str(path), 0)
            fields = {f.name for f in dataclasses.fields(SECTIONS[section])}
            if name not in fields:
                raise ParseError(f"unknown config key {key!r}", str(path), 0)
            cfg[section][name] = value
        elif key in TOP_KEYS:
            cfg[key] = value
        else:
            raise ParseError(f"unknown config key {key!r}", str(path), 0)
    return cfg


def flat_config(cfg):
    """Dotted-key form of a loaded configuration, for echoing into outputs."""
    out = {k: cfg[k] for k in TOP_KEYS}
    for s in SECTIONS:
        for k, v in cfg[s].items():
            out[f"{s}.{k}"] = _jsonable(v)
    return out


def build_hyperparams(cfg, p):
    D = int(cfg["n_types"])
    overrides = dict(cfg["hyper"])
    overrides.pop("p", None)
    overrides.pop("D", None)
    if cfg["hyper_preset"] == "simulation" and D == 2:
        h = Hyperparams.simulation_defaults(p=p, **overrides)
    elif cfg["hyper_preset"] in ("simulation", "generic"):
        h = Hyperparams(p=p, D=D, **overrides)
    else:
        raise DomainError(f"unknown hyper_preset {cfg['hyper_preset']!r}")
    return h


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def _out_dir(args):
    out = args.out or os.environ.get(OUT_ENV)
    if not out:
        raise DomainError(f"no output directory: pass --out or set {OUT_ENV}")
    d = Path(out)
    d.mkdir(parents=True, exist_ok=True)
    return d


def _apply_flags(cfg, args):
    s = cfg["sampler"]
    for flag, key in (("seed", "seed"), ("chains", "chains"), ("iters", "iterations"),
                      ("burn_in", "burn_in"), ("thin", "thin")):
        v = getattr(args, flag, None)
        if v is not None:
            s[key] = v
    if getattr(args, "seed", None) is not None:
        cfg["sim"]["seed"] = args.seed
    if getattr(args, "k1", None) is not None:
        cfg["hyper"]["K1"] = args.k1
    if getattr(args, "k2", None) is not None:
        cfg["hyper"]["K2"] = args.k2
    for flag in ("variant", "unit", "cutoff"):
        v = getattr(args, flag, None)
        if v is not None:
            cfg[flag] = v
    if "iterations" in s and "burn_in" not in s:
        s["burn_in"] = s["iterations"] // 2
    return cfg


def _training_cohort(cfg, args):
    """The cohort to fit: the leading ``cutoff`` observations when a cutoff is set."""
    cohort = ingest_cohort(args.data, cfg["unit"], int(cfg["n_types"]))
    if cfg["cutoff"] is not None:
        cohort = [tr.head(int(cfg["cutoff"])) for tr in cohort]
    return cohort


def cmd_simulate(cfg, args):
    out = _out_dir(args)
    sim = SimConfig(**cfg["sim"])
    cohort, gt = simulate_cohort(sim)
    write_cohort(out, cohort, ["t", "t2"])
    write_truth(out / TRUTH_FILE, gt)
    return 0


def _sampler_setup(cfg, cohort):
    h = build_hyperparams(cfg, cohort[0].n_covariates)
    h = apply_variant(VariantConfig(cfg["variant"]), h, len(cohort))
    sc = SamplerConfig(**{**cfg["sampler"], "variant": cfg["variant"]})
    return h, sc


def cmd_fit(cfg, args):
    out = _out_dir(args)
    cohort = _training_cohort(cfg, args)
    h, sc = _sampler_setup(cfg, cohort)
    seeds = chain_seeds(sc.seed, sc.chains)
    echo = flat_config(cfg)
    for c in range(sc.chains):
        tr = run_chain(cohort, h, sc, c, seeds[c])
        write_trace(out / f"trace_chain{c}.itr", tr, echo)
        print(f"chain {c}: {tr.n_draws} draws in {tr.elapsed_seconds:.1f}s", file=sys.stderr)
    return 0


def _load_traces(directory):
    """All chain traces in ``directory`` plus the configuration echoed by the fit."""
    paths = sorted(Path(directory).glob("trace_chain*.itr"))
    if not paths:
        raise DomainError(f"no trace files in {directory}")
    loaded = [read_trace(p) for p in paths]
    return [t for t, _ in loaded], loaded[0][1]


def _cutoff(cfg, echo):
    cutoff = cfg["cutoff"] if cfg["cutoff"] is not None else echo.get("cutoff")
    if cutoff is None:
        raise DomainError("no training cutoff: pass --cutoff or fit with one")
    return int(cutoff)


def _window(cfg):
    return cfg["hyper"].get("noise_window_minutes")


def cmd_predict(cfg, args):
    out = _out_dir(args)
    traces, echo = _load_traces(args.traces or out)
    cohort = ingest_cohort(args.data, cfg["unit"], int(cfg["n_types"]))
    cutoff = _cutoff(cfg, echo)
    rng = np.random.default_rng(cfg["sampler"].get("seed", 0))
    rows = []
    for traj in cohort:
        if traj.n_obs <= cutoff:
            continue
        train, req, y_fut = holdout_request(traj, cutoff)
        means, samples = [], []
        for tr in traces:
            for k in range(tr.n_draws):
                m, s = posterior_predict(tr.draw(k), train, req, rng, _window(cfg))
                means.append(m)
                samples.append(s)
        means, samples = np.array(means), np.array(samples)
        lo, hi = np.quantile(samples, [0.025, 0.975], axis=0)
        for j, t in enumerate(req.future_times):
            rows.append((traj.id, float(t), float(means[:, j].mean()), float(lo[j]), float(hi[j]),
                         float(y_fut[j])))
    _write_rows(out / "forecast.csv",
                ["trajectory_id", "time", "mean", "lower", "upper", "observed"], rows)
    return 0


def cmd_evaluate(cfg, args):
    out = _out_dir(args)
    traces, echo = _load_traces(args.traces or out)
    cohort = ingest_cohort(args.data, cfg["unit"], int(cfg["n_types"]))
    rows = evaluate_rmse(traces, cohort, _cutoff(cfg, echo), float(cfg["bucket_width"]),
                         _window(cfg))
    keys = ["bucket", "lower", "upper", "n_individuals", "rmse", "ci_lower", "ci_upper"]
    _write_rows(out / "rmse.csv", keys, ([r[k] for k in keys] for r in rows))
    return 0


def cmd_diagnose(cfg, args):
    out = _out_dir(args)
    traces, _ = _load_traces(args.traces or out)
    acc = []
    for c, tr in enumerate(traces):
        for block, (a, n) in sorted(tr.acceptance.items()):
            acc.append((c, block, int(a), int(n), float(a / n) if n else float("nan")))
    _write_rows(out / "acceptance.csv", ["chain", "block", "accepted", "proposed", "rate"], acc)
    names = ("beta", "sigma_u_sq", "rho_u", "response", "sigma_eps_sq", "sigma_eps_prime_sq",
             "rho_eps_prime", "m_baseline", "m_response")
    rows = []
    for c, tr in enumerate(traces):
        rows += [(c,) + r for r in summarize({k: tr.draws[k] for k in names if k in tr.draws})]
    _write_rows(out / "summary.csv", ["chain", "parameter", "mean", "sd", "q025", "q975", "ess"],
                rows)
    return 0


def cmd_bound(cfg, args):
    print("%.6g" % truncation_error_bound(args.n, args.k, args.m))
    return 0


COMMANDS = {"simulate": cmd_simulate, "fit": cmd_fit, "predict": cmd_predict,
            "evaluate": cmd_evaluate, "diagnose": cmd_diagnose, "bound": cmd_bound}


def build_parser():
    parser = argparse.ArgumentParser(prog="itrcurves",
                                     description="Individualized treatment-response curves.")
    sub = parser.add_subparsers(dest="command", required=True)
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON file of dotted keys")
    common.add_argument("--out", help=f"output directory (default ${OUT_ENV})")
    common.add_argument("--seed", type=int)
    data = argparse.ArgumentParser(add_help=False)
    data.add_argument("--data", required=True, help="directory with the three cohort files")
    data.add_argument("--unit", choices=sorted(TIME_UNITS))
    data.add_argument("--cutoff", type=int, help="leading observations used for training")
    sub.add_parser("simulate", parents=[common], help="simulate a cohort")
    fit = sub.add_parser("fit", parents=[common, data], help="run the sampler")
    fit.add_argument("--chains", type=int)
    fit.add_argument("--iters", type=int)
    fit.add_argument("--burn-in", dest="burn_in", type=int)
    fit.add_argument("--thin", type=int)
    fit.add_argument("--variant", choices=["itr", "pop", "individual", "subpop"])
    fit.add_argument("--k1", type=int)
    fit.add_argument("--k2", type=int)
    for name in ("predict", "evaluate", "diagnose"):
        parents = [common] if name == "diagnose" else [common, data]
        p = sub.add_parser(name, parents=parents)
        p.add_argument("--traces", help="directory holding trace files (default --out)")
    bound = sub.add_parser("bound", help="truncation error bound")
    bound.add_argument("--n", type=int, required=True)
    bound.add_argument("--k", type=int, required=True)
    bound.add_argument("--m", type=float, required=True)
    return parser


def main(argv=None):
    """Entry point; returns the process exit status."""
    args = build_parser().parse_args(argv)
    try:
        cfg = _apply_flags(load_config(getattr(args, "config", None)), args)
        return COMMANDS[args.command](cfg, args)
    except (DomainError, NumericalError, ParseError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


cli_dispatch = main


if __name__ == "__main__":
    sys.exit(main())
