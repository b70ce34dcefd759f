"""Brownian motion perturbed at extrema, and squared Bessel samplers.

A BMPE path solves W = B + th+ sup W + th- inf W.  On a grid the update is
exact: when the candidate value B + th+ S + th- I leaves [I, S], the new
extremum is the fixed point of the linear equation, e.g. the new maximum
M solves M = B + th+ M + th- I.

Squared Bessel laws follow the convention that 2Z is BESQ(delta) when Z is
the rescaled local-time profile, so ``x0`` here is the value of 2Z at 0.
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from numba import njit


@dataclass
class BmpePath:
    theta_plus: float
    theta_minus: float
    dt: float
    brownian: np.ndarray  # B_0..B_n
    values: np.ndarray
    run_max: np.ndarray
    run_min: np.ndarray

    @property
    def times(self) -> np.ndarray:
        return self.dt * np.arange(self.values.shape[0])

    def residual(self) -> float:
        r = self.values - self.brownian - (self.theta_plus * self.run_max + self.theta_minus * self.run_min)
        return float(np.max(np.abs(r)))


def _check_theta(tp: float, tm: float) -> None:
    if not (tp < 1 and tm < 1):
        raise ValueError(f"theta parameters must be < 1, got ({tp}, {tm})")


@njit(cache=True)
def _solve(Bs, tp, tm, W, S, I):
    s = 0.0
    i = 0.0
    for k in range(1, Bs.shape[0]):
        b = Bs[k]
        w = b + (tp * s + tm * i)
        if w > s:
            s = (b + tm * i) / (1.0 - tp)
            w = s
        elif w < i:
            i = (b + tp * s) / (1.0 - tm)
            w = i
        W[k] = w
        S[k] = s
        I[k] = i


def solve_bmpe(increments, theta_plus: float, theta_minus: float, dt: float = 1.0) -> BmpePath:
    """Grid solution driven by Brownian increments (W_0 = B_0 = 0)."""
    _check_theta(theta_plus, theta_minus)
    inc = np.asarray(increments, float)
    Bs = np.concatenate(([0.0], np.cumsum(inc)))
    W = np.zeros_like(Bs)
    S = np.zeros_like(Bs)
    I = np.zeros_like(Bs)
    _solve(Bs, float(theta_plus), float(theta_minus), W, S, I)
    return BmpePath(float(theta_plus), float(theta_minus), float(dt), Bs, W, S, I)


@njit(cache=True)
def _bmpe_final(rng, reps, n, sdt, tp, tm, out):
    for r in range(reps):
        b = 0.0
        s = 0.0
        i = 0.0
        w = 0.0
        for _ in range(n):
            b += sdt * rng.standard_normal()
            w = b + (tp * s + tm * i)
            if w > s:
                s = (b + tm * i) / (1.0 - tp)
                w = s
            elif w < i:
                i = (b + tp * s) / (1.0 - tm)
                w = i
        out[r] = w


def _grid(t: float, dt: float) -> tuple[int, float]:
    if not (0 < dt <= t):
        raise ValueError(f"need 0 < dt <= t, got dt={dt}, t={t}")
    n = max(1, int(round(t / dt)))
    return n, t / n


def sample_bmpe_marginal(theta_plus: float, theta_minus: float, t: float, dt: float, reps: int,
                         rng: np.random.Generator) -> np.ndarray:
    """W_t over ``reps`` independent grid paths (step t / round(t / dt))."""
    _check_theta(theta_plus, theta_minus)
    n, h = _grid(t, dt)
    out = np.empty(int(reps))
    _bmpe_final(rng, int(reps), n, math.sqrt(h), float(theta_plus), float(theta_minus), out)
    return out


# squared Bessel ---------------------------------------------------------------

@dataclass(frozen=True)
class BesqLaw:
    dim: float
    x0: float = 0.0

    def __post_init__(self):
        if self.dim < 0:
            raise ValueError(f"dimension must be >= 0, got {self.dim}")
        if self.x0 < 0:
            raise ValueError(f"x0 must be >= 0, got {self.x0}")

    def mean(self, t: float) -> float:
        return self.x0 + self.dim * t


def sample_besq_marginal(law: BesqLaw, t: float, rng: np.random.Generator, size: int | None = None):
    """Exact BESQ marginal: t * chi-square(dim + 2N), N ~ Poisson(x0 / (2t))."""
    if t <= 0:
        raise ValueError("t must be positive")
    n = 1 if size is None else int(size)
    N = rng.poisson(law.x0 / (2 * t), n)
    df = law.dim + 2 * N
    out = np.zeros(n)
    pos = df > 0
    out[pos] = t * rng.chisquare(df[pos])
    return float(out[0]) if size is None else out


@dataclass
class BesqPath:
    dim: float
    x0: float
    dt: float
    values: np.ndarray
    sigma0: float  # first grid time at 0; nan if none

    @property
    def times(self) -> np.ndarray:
        return self.dt * np.arange(self.values.shape[0])


@njit(cache=True)
def _besq_euler(rng, x0, delta, n, h, absorb, out):
    x = x0
    out[0] = x
    hit = 0 if x0 <= 0 else -1
    sh = math.sqrt(h)
    for k in range(1, n + 1):
        if absorb and hit >= 0:
            x = 0.0
        else:
            x = x + delta * h + 2.0 * math.sqrt(max(x, 0.0)) * sh * rng.standard_normal()
            if x <= 0.0:
                x = 0.0
                if hit < 0:
                    hit = k
        out[k] = x
    return hit


@njit(cache=True)
def _besq_euler_final(rng, reps, x0, delta, n, h, absorb, buf, out):
    for r in range(reps):
        _besq_euler(rng, x0, delta, n, h, absorb, buf)
        out[r] = buf[n]


def besq_path(law: BesqLaw, t_end: float, dt: float, absorb_at_zero: bool,
              rng: np.random.Generator) -> BesqPath:
    """Euler scheme for dX = dim dt + 2 sqrt(X+) dB, clipped at 0.

    With ``absorb_at_zero`` and dim < 2 the path stays at 0 after its first hit.
    """
    n, h = _grid(t_end, dt)
    out = np.empty(n + 1)
    hit = _besq_euler(rng, float(law.x0), float(law.dim), n, h, bool(absorb_at_zero and law.dim < 2), out)
    return BesqPath(law.dim, law.x0, h, out, hit * h if hit >= 0 else math.nan)


def besq_marginal_euler(delta: float, x0: float, t: float, dt: float, reps: int,
                        rng: np.random.Generator, absorb: bool = False) -> np.ndarray:
    """Euler marginals at t; ``delta`` may be negative (then absorption is the only sensible use)."""
    if x0 < 0:
        raise ValueError("x0 must be >= 0")
    n, h = _grid(t, dt)
    buf = np.empty(n + 1)
    out = np.empty(int(reps))
    _besq_euler_final(rng, int(reps), float(x0), float(delta), n, h, bool(absorb and delta < 2), buf, out)
    return out


# export -----------------------------------------------------------------------

def write_bmpe_csv(path: BmpePath, dest: str | Path) -> Path:
    dest = Path(dest)
    with dest.open("w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["t", "W", "S", "I"])
        for row in zip(path.times, path.values, path.run_max, path.run_min):
            wr.writerow([repr(float(v)) for v in row])
    return dest


def write_besq_csv(path: BesqPath, dest: str | Path) -> Path:
    dest = Path(dest)
    with dest.open("w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["t", "Z"])
        for row in zip(path.times, path.values):
            wr.writerow([repr(float(v)) for v in row])
    return dest


def save_marginal(values: np.ndarray, dest: str | Path, meta: dict) -> Path:
    """Flat little-endian float64 file plus a JSON sidecar."""
    dest = Path(dest)
    np.asarray(values, "<f8").tofile(dest)
    side = dict(meta, count=int(np.size(values)), dtype="<f8")
    dest.with_suffix(dest.suffix + ".json").write_text(json.dumps(side, sort_keys=True, indent=1))
    return dest


def load_marginal(src: str | Path) -> tuple[np.ndarray, dict]:
    src = Path(src)
    meta = json.loads(src.with_suffix(src.suffix + ".json").read_text())
    return np.fromfile(src, meta["dtype"]), meta
