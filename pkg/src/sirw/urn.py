"""Generalized Polya urns attached to single sites.

Blue balls are left departures, red balls right departures.  At state
(i blue, j red) the next ball is blue with probability b(i) / (b(i) + r(j)),
where (b, r) are the urn weights for the sign of the site.

Besides Monte Carlo, the module carries an exact dynamic-programming oracle
for expectations of functionals of mu(m) = tau_m^B - m (reds drawn before
the m-th blue).  The DP keeps states with at most ``cap`` reds and certifies
the discarded mass with the geometric domination of red runs: every draw is
red with probability at most q' = sup r / (sup r + inf b).
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from numba import njit

from .defaults import DP_TOL, URN_MAX_DRAWS
from .stats import wilson_interval
from .weights import (
    DEFAULT_N_MEMO,
    SiteSign,
    WeightSpec,
    eval_w,
    urn_b,
    urn_r,
    urn_weight_arrays,
    urn_weights,
)

BLUE, RED = 1, 0


class DrawCapExceeded(RuntimeError):
    def __init__(self, msg, trace=None):
        super().__init__(msg)
        self.trace = trace


class DpTruncationError(RuntimeError):
    pass


@dataclass
class UrnState:
    spec: WeightSpec
    sign: SiteSign = SiteSign.POSITIVE
    blue: int = 0
    red: int = 0

    @property
    def draws(self) -> int:
        return self.blue + self.red

    @property
    def D(self) -> int:
        return self.red - self.blue

    def p_blue(self) -> float:
        b, _ = urn_weights(self.spec, self.sign, self.blue)
        _, r = urn_weights(self.spec, self.sign, self.red)
        return b / (b + r)


def draw(state: UrnState, rng: np.random.Generator) -> int:
    """One draw, in place.  Returns BLUE or RED."""
    if rng.random() < state.p_blue():
        state.blue += 1
        return BLUE
    state.red += 1
    return RED


@dataclass
class UrnTrace:
    spec: WeightSpec
    sign: SiteSign
    draws: np.ndarray  # uint8, 1 = blue
    start: tuple[int, int] = (0, 0)

    def __len__(self):
        return int(self.draws.shape[0])

    @property
    def blue_counts(self) -> np.ndarray:
        return self.start[0] + np.concatenate(([0], np.cumsum(self.draws, dtype=np.int64)))

    @property
    def red_counts(self) -> np.ndarray:
        return self.start[1] + np.concatenate(([0], np.cumsum(1 - self.draws.astype(np.int64))))

    @property
    def D(self) -> np.ndarray:
        return self.red_counts - self.blue_counts

    @property
    def tau_blue(self) -> np.ndarray:
        """tau_0 = 0, tau_k = index of the draw completing the k-th blue."""
        return np.concatenate(([0], np.flatnonzero(self.draws == BLUE) + 1))

    @property
    def tau_red(self) -> np.ndarray:
        return np.concatenate(([0], np.flatnonzero(self.draws == RED) + 1))

    def mu(self, m: int) -> int:
        tb = self.tau_blue
        if m >= tb.shape[0]:
            raise IndexError(f"trace has fewer than {m} blue draws")
        return int(tb[m] - m)


@njit(cache=True)
def _until(rng, sign, blue, red, stop_color, target, max_draws, buf, memo, fam, p, B, g0, tab):
    """Draw until the count of ``stop_color`` reaches ``target``; write draws into buf."""
    n = 0
    while True:
        have = blue if stop_color == 1 else red
        if have >= target:
            return n, blue, red, 0
        if n >= buf.shape[0]:
            return n, blue, red, 1
        if n >= max_draws:
            return n, blue, red, 2
        b = urn_b(memo, fam, p, B, g0, tab, sign, blue)
        r = urn_r(memo, fam, p, B, g0, tab, sign, red)
        if rng.random() < b / (b + r):
            blue += 1
            buf[n] = 1
        else:
            red += 1
            buf[n] = 0
        n += 1


def _run_until(state: UrnState, stop_color: int, k: int, rng, max_draws: int) -> UrnTrace:
    args = state.spec.kernel_args(DEFAULT_N_MEMO)
    start = (state.blue, state.red)
    chunks = []
    size = max(64, 4 * k)
    total = 0
    while True:
        buf = np.empty(size, np.uint8)
        n, b, r, status = _until(rng, int(state.sign), state.blue, state.red, stop_color, k,
                                 max_draws - total, buf, *args)
        chunks.append(buf[:n])
        total += n
        state.blue, state.red = int(b), int(r)
        if status == 0:
            break
        if status == 2:
            tr = UrnTrace(state.spec, state.sign, np.concatenate(chunks), start)
            raise DrawCapExceeded(f"draw cap {max_draws} hit before target {k}", tr)
        size *= 2
    return UrnTrace(state.spec, state.sign, np.concatenate(chunks), start)


def run_to_tau_blue(state: UrnState, k: int, rng: np.random.Generator,
                    max_draws: int = URN_MAX_DRAWS) -> UrnTrace:
    """Simulate until the k-th blue ball (counting the state's blues)."""
    if k < 0:
        raise ValueError("k must be non-negative")
    return _run_until(state, BLUE, k, rng, max_draws)


def run_to_tau_red(state: UrnState, k: int, rng: np.random.Generator,
                   max_draws: int = URN_MAX_DRAWS) -> UrnTrace:
    if k < 0:
        raise ValueError("k must be non-negative")
    return _run_until(state, RED, k, rng, max_draws)


@njit(cache=True)
def urn_other(rng, sign, stop_color, target, memo, fam, p, B, g0, tab):
    """Count of the other colour when ``stop_color`` reaches ``target`` (fresh urn)."""
    blue = 0
    red = 0
    while (blue if stop_color == 1 else red) < target:
        b = urn_b(memo, fam, p, B, g0, tab, sign, blue)
        r = urn_r(memo, fam, p, B, g0, tab, sign, red)
        if rng.random() < b / (b + r):
            blue += 1
        else:
            red += 1
    return red if stop_color == 1 else blue


@njit(cache=True)
def _mc_other(rng, reps, sign, stop_color, target, out, memo, fam, p, B, g0, tab):
    for rep in range(reps):
        out[rep] = urn_other(rng, sign, stop_color, target, memo, fam, p, B, g0, tab)


def sample_other(spec: WeightSpec, sign: SiteSign | int, stop_color: int, target: int,
                 reps: int, rng: np.random.Generator) -> np.ndarray:
    """i.i.d. samples of (reds at tau_target^B) or (blues at tau_target^R)."""
    out = np.zeros(int(reps), np.int64)
    _mc_other(rng, int(reps), int(SiteSign(sign)), int(stop_color), int(target), out,
              *spec.kernel_args(DEFAULT_N_MEMO))
    return out


def sample_mu(spec, sign, m, reps, rng) -> np.ndarray:
    return sample_other(spec, sign, BLUE, m, reps, rng)


# exact DP ------------------------------------------------------------------

@dataclass
class DpOracleResult:
    value: float
    truncation_error_bound: float
    states_visited: int
    cap: int = 0
    rounding_error_bound: float = 0.0

    @property
    def error_bound(self) -> float:
        return self.truncation_error_bound + self.rounding_error_bound


_EPS = float(np.finfo(float).eps)


def _rounding(depth: int, scale: float) -> float:
    # every DP entry is a sum of products of nonnegative terms with at most
    # ``depth`` roundings along any path, so its relative error is <= depth * eps
    u = depth * _EPS
    return scale * u / (1 - u)


@njit(cache=True)
def _dp_levels(b, r, m, cap):
    """Law of the red count at tau_m^B restricted to <= cap reds, plus the mass lost per level."""
    P = np.zeros(cap + 1)
    P[0] = 1.0
    nxt = np.zeros(cap + 1)
    leak = np.zeros(m)
    for i in range(m):
        carry = 0.0
        bi = b[i]
        for j in range(cap + 1):
            q = carry + P[j]
            s = bi + r[j]
            nxt[j] = q * (bi / s)
            carry = q * (r[j] / s)
        leak[i] = carry
        P, nxt = nxt, P
    return P, leak


def _weight_bounds(spec: WeightSpec, sign: SiteSign):
    # monotone w -> 1: each weight sequence lies between its first term and 1
    b0, r0 = urn_weights(spec, sign, 0)
    return min(b0, 1.0), max(r0, 1.0), min(r0, 1.0)


def _tail_ratio(spec: WeightSpec, sign: SiteSign, r: np.ndarray, cap: int) -> float:
    """q' for draws made with more than ``cap`` reds already out."""
    b_inf, _, _ = _weight_bounds(spec, sign)
    r_sup = max(float(r[cap + 1]), 1.0)
    return r_sup / (r_sup + b_inf)


def _dp_run(spec: WeightSpec, sign: SiteSign, m: int, tol: float, tail_bound, max_cap: int | None = None):
    """Run the DP with growing caps until ``tail_bound(P, leak, cap, r, q')`` <= tol."""
    b_inf, r_sup, _ = _weight_bounds(spec, sign)
    qp = r_sup / (r_sup + b_inf)
    cap = m + math.ceil(16 * math.sqrt(m)) + math.ceil(math.log(1 / tol) / math.log(1 / qp)) + 1
    max_cap = max_cap or 50 * m + 100_000
    while True:
        b, r = urn_weight_arrays(spec, sign, max(m, cap + 2))
        P, leak = _dp_levels(b[:m], r, m, cap)
        qt = _tail_ratio(spec, sign, r, cap)
        with np.errstate(over="ignore", invalid="ignore"):
            bound = tail_bound(P, leak, cap, r, qt)
        if not math.isnan(bound) and bound <= tol:
            return P, leak, cap, r, bound, qt
        if cap >= max_cap:
            raise DpTruncationError(f"tail bound {bound:.3g} above tol {tol:.3g} at red cap {cap}")
        cap = min(max_cap, int(cap * 1.5) + 16)


def dp_expected_mu(spec: WeightSpec, sign: SiteSign | int, m: int, tol: float = DP_TOL) -> DpOracleResult:
    """E[mu(m)] exactly, up to a certified truncation error."""
    sign = SiteSign(sign)
    if m < 1:
        raise ValueError("m must be >= 1")
    levels = np.arange(m)

    def bound(P, leak, cap, r, qp):
        return float(np.dot(leak, (m - levels) * qp / (1 - qp)) / 2)

    P, leak, cap, r, err, qp = _dp_run(spec, sign, m, tol, bound)
    j = np.arange(cap + 1)
    # a leaked path sits at cap+1 reds and adds a dominated number of further reds
    value = math.fsum(P * j) + math.fsum(leak * (cap + 1 + (m - levels) * qp / (1 - qp) / 2))
    return DpOracleResult(value, err, m * (cap + 1), cap, _rounding(3 * m + cap + 4, value))


def _negbin_pgf_bound(rho: float, qp: float, n: np.ndarray) -> np.ndarray:
    """Upper bound of E[rho^G], G = reds before n more blues (dominated by NegBin(n, 1-q'))."""
    if rho <= 1.0:
        return np.ones_like(n, dtype=float)
    if rho * qp >= 1.0:
        return np.full(n.shape, np.inf)
    return ((1 - qp) / (1 - rho * qp)) ** n


def dp_functional(spec: WeightSpec, sign: SiteSign | int, m: int, f, growth: float,
                  tol: float = DP_TOL) -> DpOracleResult:
    """E[f(mu(m))] for f given on 0..cap+1 as ``f(cap)`` -> array.

    ``growth`` bounds |f(j+1)| / |f(j)| beyond the cap; it certifies the tail.
    """
    sign = SiteSign(sign)
    levels = np.arange(m)

    def bound(P, leak, cap, r, qp):
        vals = f(cap, r)
        return float(np.dot(leak, abs(vals[cap + 1]) * _negbin_pgf_bound(growth, qp, m - levels)))

    P, leak, cap, r, err, _ = _dp_run(spec, sign, m, tol, bound)
    vals = f(cap, r)
    # f itself is built with up to cap roundings (e.g. a cumulative product)
    scale = math.fsum(P * np.abs(vals[: cap + 1]))
    return DpOracleResult(math.fsum(P * vals[: cap + 1]), err, m * (cap + 1), cap,
                          _rounding(3 * m + 2 * cap + 4, scale))


def expected_D_dp(spec: WeightSpec, sign: SiteSign | int, m: int, tol: float = DP_TOL) -> DpOracleResult:
    res = dp_expected_mu(spec, sign, m, tol)
    return DpOracleResult(res.value - m, res.truncation_error_bound, res.states_visited, res.cap,
                          res.rounding_error_bound + _EPS * (abs(res.value) + m))


@dataclass
class UrnEstimate:
    spec: WeightSpec
    sign: SiteSign
    m: int
    method: str
    value: float
    error: float
    reps: int | None = None
    tol: float | None = None

    def record(self) -> dict:
        return {"spec": self.spec.to_dict(), "sign": int(self.sign), "m": self.m,
                "method": self.method, "value": self.value, "error": self.error,
                "reps": self.reps, "tol": self.tol}


def expected_D_at_tau(spec: WeightSpec, sign: SiteSign | int, m: int, method: str = "dp",
                      reps: int = 10_000, tol: float = DP_TOL,
                      rng: np.random.Generator | None = None) -> UrnEstimate:
    """E[D at tau_m^B] by exact DP (error = truncation bound) or Monte Carlo (error = s.e.)."""
    sign = SiteSign(sign)
    if m < 1:
        raise ValueError("m must be >= 1")
    if method == "dp":
        res = expected_D_dp(spec, sign, m, tol)
        return UrnEstimate(spec, sign, m, "dp", res.value, res.error_bound, tol=tol)
    if method == "mc":
        rng = rng if rng is not None else np.random.default_rng()
        d = sample_mu(spec, sign, m, reps, rng) - m
        return UrnEstimate(spec, sign, m, "mc", float(d.mean()), float(d.std(ddof=1) / math.sqrt(reps)), reps=reps)
    raise ValueError(f"unknown method {method!r}")


# Toth identity ---------------------------------------------------------------

@dataclass
class TothResult:
    lhs: float
    rhs: float
    gap: float
    bound: float


def toth_check(spec: WeightSpec, sign: SiteSign | int, m: int, lam: float, tol: float = DP_TOL) -> TothResult:
    """E[prod_{j<mu(m)} (1 + lam/r(j))] against prod_{j<m} (1 - lam/b(j))^-1."""
    sign = SiteSign(sign)
    b, _ = urn_weight_arrays(spec, sign, m)
    if not lam < b.min():
        raise ValueError(f"lambda={lam} must be below min b = {b.min()}")
    rhs = float(np.prod(1.0 / (1.0 - lam / b)))
    b_inf, r_sup, r_inf = _weight_bounds(spec, sign)
    growth = max(abs(1 + lam / r_inf), abs(1 + lam / r_sup))

    def f(cap, r):
        return np.concatenate(([1.0], np.cumprod(1.0 + lam / r[: cap + 1])))

    res = dp_functional(spec, sign, m, f, growth, tol)
    return TothResult(res.value, rhs, abs(res.value - rhs), res.error_bound)


def toth_linear(spec: WeightSpec, sign: SiteSign | int, m: int, tol: float = DP_TOL) -> TothResult:
    """E[sum_{j<mu(m)} 1/r(j)] against sum_{j<m} 1/b(j)."""
    sign = SiteSign(sign)
    b, _ = urn_weight_arrays(spec, sign, m)
    rhs = math.fsum(1.0 / b)
    _, _, r_inf = _weight_bounds(spec, sign)
    levels = np.arange(m)

    def bound(P, leak, cap, r, qp):
        head = math.fsum(1.0 / r[: cap + 1])
        return float(np.dot(leak, head + (m - levels) * qp / (1 - qp) / r_inf))

    P, leak, cap, r, err, _ = _dp_run(spec, sign, m, tol, bound)
    vals = np.concatenate(([0.0], np.cumsum(1.0 / r[:cap])))
    lhs = math.fsum(P * vals)
    return TothResult(lhs, rhs, abs(lhs - rhs), err + _rounding(3 * m + 2 * cap + 4, lhs))


def exp_martingale(trace: UrnTrace, lam: float) -> np.ndarray:
    """phi_k(lam) along the draws of ``trace`` (phi_0 = 1 for a trace started at (0, 0))."""
    nb, nr = trace.blue_counts, trace.red_counts
    size = int(max(nb[-1], nr[-1])) + 1
    b, r = urn_weight_arrays(trace.spec, trace.sign, size)
    fac = np.where(trace.draws == BLUE, 1.0 - lam / b[nb[:-1]], 1.0 + lam / r[nr[:-1]])
    start = np.prod(1.0 - lam / b[: trace.start[0]]) * np.prod(1.0 + lam / r[: trace.start[1]])
    return start * np.concatenate(([1.0], np.cumprod(fac)))


def phi_one_step(spec: WeightSpec, sign: SiteSign | int, i: int, j: int, lam: float) -> float:
    """E[phi_{k+1} | state (i, j)] / phi_k; identically 1."""
    b, _ = urn_weights(spec, sign, i)
    _, r = urn_weights(spec, sign, j)
    return b / (b + r) * (1 - lam / b) + r / (b + r) * (1 + lam / r)


# concentration -------------------------------------------------------------

@dataclass
class TailEstimate:
    k: int
    m: int
    freq: float
    lo: float
    hi: float
    hits: int
    reps: int


def concentration_tail(spec: WeightSpec, sign: SiteSign | int, k: int, ms, reps: int,
                       rng: np.random.Generator, level: float = 0.95) -> list[TailEstimate]:
    """Empirical P(|D at tau_k^B| >= m) with Wilson intervals, for each m in ``ms``."""
    if reps < 1:
        raise ValueError("reps must be >= 1")
    d = np.abs(sample_mu(spec, sign, k, reps, rng) - k)
    out = []
    for m in np.atleast_1d(ms):
        hits = int(np.count_nonzero(d >= m))
        lo, hi = wilson_interval(hits, reps, level)
        out.append(TailEstimate(k, int(m), hits / reps, lo, hi, hits, reps))
    return out


def fit_concentration(tails: list[TailEstimate], envelope: bool = False) -> tuple[float, float]:
    """Fit P(|D| >= m) ~ C exp(-c m^2 / max(m, k)) over rows with hits.

    Least squares in log space by default.  With ``envelope`` C is fixed at 1
    and c is the smallest per-row rate, so the curve lies above every row.
    """
    rows = [t for t in tails if t.hits > 0 and t.m > 0]
    if len(rows) < 2:
        raise ValueError("need at least two grid points with observed events")
    x = np.array([t.m**2 / max(t.m, t.k) for t in rows], float)
    y = np.log([t.freq for t in rows])
    if envelope:
        return 1.0, float(np.min(-y / x))
    A = np.column_stack([np.ones_like(x), -x])
    (logC, c), *_ = np.linalg.lstsq(A, y, rcond=None)
    return float(math.exp(logC)), float(c)


# pathwise drift ------------------------------------------------------------

def drift_from_urn(trace: UrnTrace, k: int, stop: str = "blue") -> float:
    """Drift accumulated over the first k blue (or red) inter-arrival blocks.

    For ``stop='blue'`` this is sum_{l<k} sum_{j=tau_l}^{tau_{l+1}-1}
    (r(j-l) - b(l)) / (r(j-l) + b(l)); the red version swaps roles.
    """
    if k == 0:
        return 0.0
    tau = trace.tau_blue if stop == "blue" else trace.tau_red
    if k >= tau.shape[0]:
        raise IndexError(f"trace holds fewer than {k} {stop} draws")
    if trace.start != (0, 0):
        raise ValueError("drift_from_urn expects a trace started at (0, 0)")
    T = int(tau[k])
    b, r = urn_weight_arrays(trace.spec, trace.sign, T + 1)
    j = np.arange(T)
    # within block l the stopping colour has been drawn exactly l times
    if stop == "blue":
        nb = trace.blue_counts[:T]
        bb, rr = b[nb], r[j - nb]
    else:
        nr = trace.red_counts[:T]
        bb, rr = b[j - nr], r[nr]
    return math.fsum((rr - bb) / (rr + bb))


def extract_urn_from_walk(trace, y: int) -> UrnTrace:
    """Urn at site y read off a walk: one draw per departure from y (blue = left)."""
    pos = trace.require_positions()
    times = np.flatnonzero(pos[:-1] == y)
    if times.size == 0 and not np.any(pos == y):
        raise LookupError(f"site {y} never visited")
    draws = (pos[times + 1] < y).astype(np.uint8)
    return UrnTrace(trace.spec, SiteSign.of(y), draws)
