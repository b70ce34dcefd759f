"""Experiment drivers behind the ``sirw`` command.

Every experiment is a map over replica indices.  Replica r draws from its
own generator seeded with ``seeding.split(seed, <stream>, r)``, so results
do not depend on how replicas are scheduled.  Rows are merged in replica
order and summaries are computed from the merged rows only.
"""
from __future__ import annotations

import hashlib
import json
import math
import os
import platform
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from pathlib import Path

import numpy as np
from scipy import stats as sps

from . import __version__, blp, bmpe, urn, walk
from .defaults import SCHEMA_VERSION, THRESHOLDS, WORKERS_ENV, Thresholds
from .seeding import replica_rng
from .stats import bonferroni, ks_one_sample, ks_two_sample, mean_se
from .weights import SiteSign, WeightSpec, gamma as gamma_of, gamma_partial, urn_weights

EXPERIMENTS = ("flt", "rayknight", "gamma", "toth", "driftrange", "qv", "goodevent", "urnlaw", "lipschitz")

DEFAULT_PARAMS = {
    "flt": {"dt": 1e-3, "ref_reps": None},
    "rayknight": {"variant": "backward", "y0": 0.0, "anchor": None, "ref_reps": None},
    "gamma": {"m": None, "dp": True},
    "toth": {"ms": list(range(1, 21)), "lambdas": [-0.4, -0.2, 0.0, 0.2, 0.4]},
    "driftrange": {},
    "qv": {},
    "goodevent": {"K": [1, 2, 4, 8, 16]},
    "urnlaw": {"x": 3, "m": 4, "max_steps": 10**6},
    "lipschitz": {"ns": None, "K": 4},
}


class ConfigError(ValueError):
    pass


@dataclass
class ExperimentConfig:
    experiment: str
    spec: WeightSpec
    n: int = 1000
    reps: int = 1000
    t: float = 1.0
    seed: int = 0
    out: str | None = None
    format: str = "csv"
    params: dict = field(default_factory=dict)
    thresholds: Thresholds = THRESHOLDS

    def __post_init__(self):
        merged = dict(DEFAULT_PARAMS.get(self.experiment, {}))
        merged.update(self.params or {})
        self.params = merged

    def validate(self) -> None:
        if self.experiment not in EXPERIMENTS:
            raise ConfigError(f"unknown experiment {self.experiment!r}")
        if self.reps < 1:
            raise ConfigError("reps must be >= 1")
        if self.n < 1:
            raise ConfigError("n must be >= 1")
        if not self.t > 0:
            raise ConfigError("t must be positive")
        if self.format not in ("csv", "json"):
            raise ConfigError("format must be csv or json")
        if not 0 <= self.seed < 2**64:
            raise ConfigError("seed must fit in 64 bits")
        unknown = set(self.params) - set(DEFAULT_PARAMS[self.experiment])
        if unknown:
            raise ConfigError(f"unknown parameters for {self.experiment}: {sorted(unknown)}")
        if self.experiment == "rayknight" and self.params["variant"] not in (blp.FORWARD, blp.BACKWARD):
            raise ConfigError("rayknight variant must be forward or backward")
        if self.experiment == "urnlaw" and self.params["x"] < 0:
            raise ConfigError("urnlaw anchor x must be >= 0")

    def to_dict(self) -> dict:
        return {"experiment": self.experiment, "spec": self.spec.to_dict(), "n": self.n,
                "reps": self.reps, "t": self.t, "seed": self.seed, "out": self.out,
                "format": self.format, "params": self.params,
                "thresholds": asdict(self.thresholds)}

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        d = dict(d)
        d["spec"] = WeightSpec.from_dict(d["spec"])
        d["thresholds"] = Thresholds(**d.get("thresholds", {}))
        return cls(**d)


@dataclass
class ExperimentResult:
    config: ExperimentConfig
    columns: list[str]
    rows: list[tuple]
    summary: dict
    files: dict = field(default_factory=dict)
    wall_time: float = 0.0


# replica functions ----------------------------------------------------------

def _flt_rep(cfg, r, rng):
    g = gamma_of(cfg.spec)
    st = walk.WalkState.initial(g, size=1 << 12)
    k_half, k_full = int(cfg.n * cfg.t / 2), int(cfg.n * cfg.t)
    walk.advance(st, cfg.spec, k_half, rng)
    x_half = st.pos
    walk.advance(st, cfg.spec, k_full - k_half, rng)
    s = math.sqrt(cfg.n)
    return (r, x_half / s, st.pos / s)


def _rayknight_rep(cfg, r, rng):
    p = cfg.params
    steps = int(math.floor(cfg.n * cfg.t))
    anchor = (steps + 2 if p["anchor"] is None else int(p["anchor"])) if p["variant"] == blp.BACKWARD else 0
    kern = blp.BlpKernel(cfg.spec, p["variant"], anchor)
    z = blp.simulate_final(kern, int(math.floor(p["y0"] * cfg.n)), steps, 1, rng)[0]
    return (r, int(z), z / cfg.n)


def _gamma_m(cfg):
    return int(cfg.params["m"] or cfg.n)


def _gamma_rep(cfg, r, rng):
    m = _gamma_m(cfg)
    dp = int(urn.sample_mu(cfg.spec, SiteSign.POSITIVE, m, 1, rng)[0]) - m
    dn = int(urn.sample_mu(cfg.spec, SiteSign.NEGATIVE, m, 1, rng)[0]) - m
    return (r, dp, dn)


def _run_plain(cfg, rng, n):
    st = walk.WalkState.initial(gamma_of(cfg.spec), size=1 << 12)
    walk.advance(st, cfg.spec, n, rng)
    return st


def _driftrange_rep(cfg, r, rng):
    st = _run_plain(cfg, rng, cfg.n)
    s = math.sqrt(cfg.n)
    final = abs(st.drift_acc - st.gamma * (st.smax + st.imin))
    return (r, st.sup_dev / s, final / s, st.qv_sum / cfg.n)


def _qv_rep(cfg, r, rng):
    st = _run_plain(cfg, rng, cfg.n)
    return (r, st.qv_sum / cfg.n)


def _first_violations(pos: np.ndarray, n: int):
    """Per visited site: smallest i breaking the tau_i^B clauses (inf if none)."""
    L2 = math.log(n) ** 2
    head = pos[:-1].astype(np.int64)
    blue = (np.diff(pos) < 0)
    order = np.argsort(head, kind="stable")
    sites = head[order]
    b = blue[order]
    starts = np.flatnonzero(np.r_[True, sites[1:] != sites[:-1]])
    ends = np.r_[starts[1:], sites.size]
    out = {}
    for s0, s1 in zip(starts, ends):
        bb = b[s0:s1]
        j = np.flatnonzero(bb) + 1          # tau_i for i = 1..
        if j.size == 0:
            out[int(sites[s0])] = (math.inf, math.inf)
            continue
        i = np.arange(1, j.size + 1)
        v3 = np.flatnonzero(np.abs(j - 2 * i) >= np.sqrt(i) * L2)
        gaps = np.diff(np.r_[0, j])        # tau_{i+1} - tau_i for i = 0..
        v4 = np.flatnonzero(gaps >= L2)
        out[int(sites[s0])] = (float(i[v3[0]]) if v3.size else math.inf,
                               float(v4[0]) if v4.size else math.inf)
    return out


def good_event_flags(positions: np.ndarray, n: int, Ks) -> list[tuple[int, int, int, int]]:
    """Indicators of the four clauses for each K, on the observed part of the urns."""
    pos = np.asarray(positions)
    sup_abs = int(np.max(np.abs(pos)))
    sup_L = int(np.bincount(pos - pos.min()).max())
    viol = _first_violations(pos, n)
    rt = math.sqrt(n)
    out = []
    for K in Ks:
        lim = K * rt
        c1 = sup_abs < lim
        c2 = sup_L < lim
        near = [v for y, v in viol.items() if abs(y) <= lim]
        c3 = all(v[0] > lim for v in near)
        c4 = all(v[1] > lim for v in near)
        out.append((int(c1), int(c2), int(c3), int(c4)))
    return out


def _goodevent_rep(cfg, r, rng):
    steps = int(math.floor(cfg.n * cfg.t))
    tr = walk.run(cfg.spec, steps, rng, walk.RecordOptions(positions=True, increments=False))
    flags = good_event_flags(tr.positions, cfg.n, cfg.params["K"])
    return [(r, K, *f) for K, f in zip(cfg.params["K"], flags)]


def _urnlaw_rep(cfg, r, rng):
    p = cfg.params
    return blp.walk_transitions(cfg.spec, p["x"], p["m"], rng, p["max_steps"])


def _lipschitz_ns(cfg):
    return [int(v) for v in (cfg.params["ns"] or [cfg.n])]


def _lipschitz_rep(cfg, r, rng):
    ns = _lipschitz_ns(cfg)
    n = ns[r // cfg.reps]
    tr = walk.run(cfg.spec, n, rng)
    prof = walk.profile_at(tr, n)
    K = cfg.params["K"]
    c1, c2, _, _ = good_event_flags(tr.positions, n, [K])[0]
    return (r, n, float(np.max(np.abs(prof.drift))), int(c1 and c2))


REPLICA_FNS = {
    "flt": _flt_rep,
    "rayknight": _rayknight_rep,
    "gamma": _gamma_rep,
    "driftrange": _driftrange_rep,
    "qv": _qv_rep,
    "goodevent": _goodevent_rep,
    "urnlaw": _urnlaw_rep,
    "lipschitz": _lipschitz_rep,
}


def _chunk(cfg: ExperimentConfig, lo: int, hi: int):
    fn = REPLICA_FNS[cfg.experiment]
    return [fn(cfg, r, replica_rng(cfg.seed, cfg.experiment, r)) for r in range(lo, hi)]


def worker_count(workers: int | None = None) -> int:
    if workers is not None:
        return max(1, int(workers))
    return max(1, int(os.environ.get(WORKERS_ENV, "1")))


def replica_map(cfg: ExperimentConfig, count: int, workers: int | None = None) -> list:
    """Results of the replica function for r = 0..count-1, in index order."""
    w = worker_count(workers)
    if w == 1 or count < 2:
        return _chunk(cfg, 0, count)
    n_chunks = min(count, 4 * w)
    edges = np.linspace(0, count, n_chunks + 1).astype(int)
    with ProcessPoolExecutor(max_workers=w) as ex:
        futs = [ex.submit(_chunk, cfg, int(a), int(b)) for a, b in zip(edges[:-1], edges[1:]) if b > a]
        out = []
        for f in futs:
            out.extend(f.result())
    return out


def aux_rng(cfg: ExperimentConfig, name: str) -> np.random.Generator:
    """Generator for work done outside the replica map (reference samples, kernel draws)."""
    return replica_rng(cfg.seed, f"{cfg.experiment}/{name}", 0)


# experiments ----------------------------------------------------------------

def run_flt(cfg, workers=None):
    rows = replica_map(cfg, cfg.reps, workers)
    g = gamma_of(cfg.spec)
    half = np.array([r[1] for r in rows])
    full = np.array([r[2] for r in rows])
    ref_reps = int(cfg.params["ref_reps"] or 2 * cfg.reps)
    rng = aux_rng(cfg, "reference")
    dt = min(cfg.params["dt"], cfg.t / 2)
    ref_half = bmpe.sample_bmpe_marginal(g, g, cfg.t / 2, dt, ref_reps, rng)
    ref_full = bmpe.sample_bmpe_marginal(g, g, cfg.t, dt, ref_reps, rng)
    k_half, k_full = ks_two_sample(half, ref_half), ks_two_sample(full, ref_full)
    normal = ks_one_sample(full, lambda x: sps.norm.cdf(x, scale=math.sqrt(cfg.t)))
    summary = {"gamma": g, "ks_half": k_half.statistic, "p_half": k_half.p_value,
               "ks": k_full.statistic, "p_value": k_full.p_value,
               "ks_normal": normal.statistic, "p_normal": normal.p_value, "ref_reps": ref_reps, "dt": dt}
    return ["replica", "x_half", "x_full"], rows, summary


def run_rayknight(cfg, workers=None):
    p = cfg.params
    rows = replica_map(cfg, cfg.reps, workers)
    vals = np.array([r[2] for r in rows])
    g = gamma_of(cfg.spec)
    variant = p["variant"]
    delta = 2 - 2 * g if variant == blp.BACKWARD else 2 * g
    ref_reps = int(p["ref_reps"] or max(10 * cfg.reps, 100_000))
    rng = aux_rng(cfg, "reference")
    z0 = int(math.floor(p["y0"] * cfg.n))
    if variant == blp.FORWARD and z0 == 0:
        ref, kind = np.zeros(ref_reps), "absorbed"
    elif variant == blp.BACKWARD or delta == 0 or delta >= 2:
        ref = bmpe.sample_besq_marginal(bmpe.BesqLaw(delta, 2 * p["y0"]), cfg.t, rng, size=ref_reps) / 2
        kind = "exact"
    else:
        ref = bmpe.besq_marginal_euler(delta, 2 * p["y0"], cfg.t, 1e-4, ref_reps, rng, absorb=True) / 2
        kind = "euler"
    res = ks_two_sample(vals, ref)
    summary = {"spec": cfg.spec.to_dict(), "variant": variant, "n": cfg.n, "y0": p["y0"], "t": cfg.t,
               "reps": cfg.reps, "ks": res.statistic, "p_value": res.p_value, "seed": cfg.seed,
               "delta": delta, "reference": kind, "ref_reps": ref_reps,
               "warning": "reps below 1000; KS resolution is poor" if cfg.reps < 1000 else None}
    return ["replica", "zeta", "scaled"], rows, summary


def run_gamma(cfg, workers=None):
    m = _gamma_m(cfg)
    rows = replica_map(cfg, cfg.reps, workers)
    g = gamma_of(cfg.spec)
    summary = {"gamma": g, "gamma_partial": gamma_partial(cfg.spec, m), "m": m}
    for name, col, sign in (("pos", 1, SiteSign.POSITIVE), ("neg", 2, SiteSign.NEGATIVE)):
        d = np.array([r[col] for r in rows], float)
        mean, se = mean_se(d) if d.size > 1 else (float(d.mean()), math.inf)
        summary[f"mc_{name}"] = mean
        summary[f"mc_{name}_se"] = se
        target = g if sign == SiteSign.POSITIVE else -g
        summary[f"mc_{name}_within"] = bool(abs(mean - target) <= cfg.thresholds.n_se * se)
        if cfg.params["dp"]:
            res = urn.expected_D_dp(cfg.spec, sign, m)
            summary[f"dp_{name}"] = res.value
            summary[f"dp_{name}_bound"] = res.error_bound
    return ["replica", "D_pos", "D_neg"], rows, summary


def run_toth(cfg, workers=None):
    rows = []
    for sign in (SiteSign.NEGATIVE, SiteSign.ZERO, SiteSign.POSITIVE):
        for m in cfg.params["ms"]:
            bmin = min(min(urn_weights(cfg.spec, sign, j)[0] for j in range(int(m))), 1.0)
            for frac in cfg.params["lambdas"]:
                lam = frac * bmin
                res = urn.toth_check(cfg.spec, sign, int(m), lam)
                rows.append((int(sign), int(m), lam, res.lhs, res.rhs, res.gap, res.bound))
    max_gap = max(r[5] for r in rows)
    summary = {"max_gap": max_gap, "passed": bool(max_gap < cfg.thresholds.dp_gap), "cells": len(rows)}
    return ["sign", "m", "lambda", "lhs", "rhs", "gap", "bound"], rows, summary


def run_driftrange(cfg, workers=None):
    rows = replica_map(cfg, cfg.reps, workers)
    a = np.array([r[1:] for r in rows])
    summary = {"gamma": gamma_of(cfg.spec), "median_sup_dev": float(np.median(a[:, 0])),
               "median_final_dev": float(np.median(a[:, 1])), "median_qv": float(np.median(a[:, 2]))}
    return ["replica", "sup_dev_scaled", "final_dev_scaled", "qv"], rows, summary


def run_qv(cfg, workers=None):
    rows = replica_map(cfg, cfg.reps, workers)
    q = np.array([r[1] for r in rows])
    return ["replica", "qv"], rows, {"median_qv": float(np.median(q)), "mean_qv": float(q.mean())}


def run_goodevent(cfg, workers=None):
    rows = [row for rep in replica_map(cfg, cfg.reps, workers) for row in rep]
    freq = {}
    for K in cfg.params["K"]:
        sub = np.array([r[2:] for r in rows if r[1] == K])
        freq[str(K)] = [float(v) for v in sub.mean(axis=0)]
    summary = {"n": cfg.n, "t": cfg.t, "K": list(cfg.params["K"]), "frequencies": freq,
               "clauses": ["extrema", "local_time", "urn_times", "urn_gaps"]}
    return ["replica", "K", "extrema", "local_time", "urn_times", "urn_gaps"], rows, summary


def run_urnlaw(cfg, workers=None):
    p = cfg.params
    per_walk = replica_map(cfg, cfg.reps, workers)
    sample = blp.pool_transitions(cfg.spec, p["x"], p["m"], per_walk)
    results = blp.kernel_equivalence(sample, aux_rng(cfg, "kernel"))
    k = len(results)
    rows = []
    for c, res in results.items():
        rows.append((c, int(sample.src[c].size), res.statistic, int(res.dof), res.p_value,
                     bonferroni(res.p_value, k)))
    summary = {"walks": sample.walks, "censored": sample.censored, "x": p["x"], "m": p["m"],
               "min_p_adjusted": min(r[5] for r in rows),
               "passed": bool(min(r[5] for r in rows) > cfg.thresholds.p_min_grid)}
    return ["cell", "samples", "statistic", "dof", "p_value", "p_adjusted"], rows, summary


def fit_exponent(ns, values, log_power: int = 0):
    """Slope of log(value / log(n)^log_power) against log n."""
    ns = np.asarray(ns, float)
    y = np.log(np.asarray(values, float) / np.log(ns) ** log_power)
    slope, _ = np.polyfit(np.log(ns), y, 1)
    return float(slope)


def run_lipschitz(cfg, workers=None):
    ns = _lipschitz_ns(cfg)
    rows = replica_map(cfg, cfg.reps * len(ns), workers)
    med = {}
    for n in ns:
        vals = [r[2] for r in rows if r[1] == n and r[3]]
        med[str(n)] = float(np.median(vals)) if vals else None
    p = cfg.spec.p if cfg.spec.family == "power_law" else None
    summary = {"ns": ns, "median_max_delta": med, "empty": any(v is None for v in med.values()),
               "good_fraction": {str(n): float(np.mean([r[3] for r in rows if r[1] == n])) for n in ns}}
    if len(ns) >= 2 and not summary["empty"] and all(v > 0 for v in med.values()):
        vals = [med[str(n)] for n in ns]
        summary["exponent"] = fit_exponent(ns, vals)
        summary["exponent_log_adjusted"] = fit_exponent(ns, vals, 4)
        summary["exponent_target"] = -p / 2 + 0.25 if p is not None else None
    return ["replica", "n", "max_abs_delta", "good"], rows, summary


RUNNERS = {
    "flt": run_flt, "rayknight": run_rayknight, "gamma": run_gamma, "toth": run_toth,
    "driftrange": run_driftrange, "qv": run_qv, "goodevent": run_goodevent,
    "urnlaw": run_urnlaw, "lipschitz": run_lipschitz,
}


# persistence ----------------------------------------------------------------

def _fmt(v) -> str:
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, (np.integer,)):
        return str(int(v))
    return str(v)


def _jsonable(v):
    if isinstance(v, dict):
        return {str(k): _jsonable(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_jsonable(x) for x in v]
    if isinstance(v, np.integer):
        return int(v)
    if isinstance(v, np.floating):
        return float(v)
    if isinstance(v, float) and not math.isfinite(v):
        return repr(v)
    return v


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def write_outputs(res: ExperimentResult, out: str | Path, started: str, workers: int) -> dict:
    out = Path(out)
    try:
        out.mkdir(parents=True, exist_ok=True)
        probe = out / ".write-probe"
        probe.write_text("")
        probe.unlink()
    except OSError as e:
        raise ConfigError(f"output directory {out} is not writable: {e}") from e
    cfg = res.config
    files = {}
    if cfg.format == "csv":
        lines = [",".join(res.columns)] + [",".join(_fmt(v) for v in row) for row in res.rows]
        (out / "result.csv").write_text("\n".join(lines) + "\n")
        (out / "summary.json").write_text(json.dumps(_jsonable(res.summary), sort_keys=True, indent=1) + "\n")
        names = ["result.csv", "summary.json"]
    else:
        body = {"columns": res.columns, "rows": [list(r) for r in res.rows], "summary": res.summary}
        (out / "result.json").write_text(json.dumps(_jsonable(body), sort_keys=True, indent=1) + "\n")
        names = ["result.json"]
    for name in names:
        files[name] = _sha256(out / name)
    import numba
    import scipy

    manifest = {
        "schema_version": SCHEMA_VERSION,
        "config": _jsonable(cfg.to_dict()),
        "seed_scheme": "splitmix64(splitmix64(splitmix64(seed) ^ crc32(experiment)) ^ replica) -> PCG64",
        "versions": {"sirw": __version__, "numpy": np.__version__, "scipy": scipy.__version__,
                     "numba": numba.__version__, "python": platform.python_version()},
        "files": files,
        "runtime": {"started": started, "wall_time_s": res.wall_time, "workers": workers},
    }
    (out / "manifest.json").write_text(json.dumps(manifest, sort_keys=True, indent=1) + "\n")
    files["manifest.json"] = None
    return files


def run_experiment(cfg: ExperimentConfig, workers: int | None = None) -> ExperimentResult:
    cfg.validate()
    started = datetime.now(timezone.utc).isoformat()
    t0 = time.perf_counter()
    cols, rows, summary = RUNNERS[cfg.experiment](cfg, workers)
    res = ExperimentResult(cfg, cols, rows, _jsonable(summary))
    res.wall_time = time.perf_counter() - t0
    if cfg.out:
        res.files = write_outputs(res, cfg.out, started, worker_count(workers))
    return res
