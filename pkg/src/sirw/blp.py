"""Branching-like processes: directed edge local-time profiles at lambda_{x,m}.

Forward chain: zt_k = E_{x+k,+} (homogeneous, 0 absorbing).
Backward chain: z_k = E_{x-k,-}; the transition used at step k depends on
where site x-k-1 sits relative to the anchor x:

    k <  x-1   positive urn, blues before the (i+1)-th red
    k == x-1   zero urn,     blues before the (i+1)-th red
    k >= x     negative urn, blues before the i-th red (0 absorbing)

The forward transition is the reds before the i-th blue of a positive urn.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from numba import njit

from . import urn, walk
from .stats import TestResult, chi_square_stratified, ks_two_sample
from .weights import DEFAULT_N_MEMO, SiteSign, WeightSpec, gamma as gamma_of

FORWARD, BACKWARD = "forward", "backward"
CELLS = ("forward", "interior", "anchor", "beyond")

# (sign, stop colour, target offset) per cell
_CELL_RULE = {
    "forward": (int(SiteSign.POSITIVE), urn.BLUE, 0),
    "interior": (int(SiteSign.POSITIVE), urn.RED, 1),
    "anchor": (int(SiteSign.ZERO), urn.RED, 1),
    "beyond": (int(SiteSign.NEGATIVE), urn.RED, 0),
}


@dataclass(frozen=True)
class BlpKernel:
    spec: WeightSpec
    variant: str = FORWARD
    anchor: int = 0

    def __post_init__(self):
        if self.variant not in (FORWARD, BACKWARD):
            raise ValueError(f"unknown variant {self.variant!r}")
        if self.anchor < 0:
            raise ValueError("anchor must be >= 0")

    def cell(self, k: int) -> str:
        if self.variant == FORWARD:
            return "forward"
        if k < self.anchor - 1:
            return "interior"
        if k == self.anchor - 1:
            return "anchor"
        return "beyond"


def cell_of(variant: str, anchor: int, k: int) -> str:
    return BlpKernel(WeightSpec.constant(), variant, anchor).cell(k)


def sample_cell(spec: WeightSpec, cell: str, i, rng: np.random.Generator) -> np.ndarray:
    """One kernel draw per entry of ``i`` (source states) for the given cell."""
    sign, color, off = _CELL_RULE[cell]
    src = np.ascontiguousarray(np.atleast_1d(i), dtype=np.int64)
    out = np.empty(src.shape[0], np.int64)
    _sample_many(rng, src, sign, color, off, out, *spec.kernel_args(DEFAULT_N_MEMO))
    return out


@njit(cache=True)
def _sample_many(rng, src, sign, color, off, out, memo, fam, p, B, g0, tab):
    for n in range(src.shape[0]):
        out[n] = urn.urn_other(rng, sign, color, src[n] + off, memo, fam, p, B, g0, tab)


def step_forward(kernel: BlpKernel, i: int, rng: np.random.Generator) -> int:
    if kernel.variant != FORWARD:
        raise ValueError("step_forward needs a forward kernel")
    return int(sample_cell(kernel.spec, "forward", i, rng)[0])


def step_backward(kernel: BlpKernel, k: int, i: int, rng: np.random.Generator) -> int:
    if kernel.variant != BACKWARD:
        raise ValueError("step_backward needs a backward kernel")
    return int(sample_cell(kernel.spec, kernel.cell(k), i, rng)[0])


@dataclass
class BlpTrace:
    values: np.ndarray
    variant: str
    origin: dict = field(default_factory=dict)
    anchor: int = 0
    truncated: bool = False

    def transitions(self):
        """(k, cell, i, j) for each informative one-step move (absorbed zeros skipped)."""
        out = []
        v = self.values
        for k in range(v.shape[0] - 1):
            c = cell_of(self.variant, self.anchor, k)
            if v[k] == 0 and c in ("forward", "beyond"):
                continue
            out.append((k, c, int(v[k]), int(v[k + 1])))
        return out


# simulation -----------------------------------------------------------------

@njit(cache=True)
def _chain(rng, z0, n_steps, forward, anchor, out, memo, fam, p, B, g0, tab):
    """Fill out[0..] with the chain; stop after absorption plus one guard entry."""
    z = z0
    out[0] = z
    for k in range(n_steps):
        if forward:
            if z == 0:
                out[k + 1] = 0
                return k + 2
            z = urn.urn_other(rng, 1, 1, z, memo, fam, p, B, g0, tab)
        elif k < anchor - 1:
            z = urn.urn_other(rng, 1, 0, z + 1, memo, fam, p, B, g0, tab)
        elif k == anchor - 1:
            z = urn.urn_other(rng, 0, 0, z + 1, memo, fam, p, B, g0, tab)
        else:
            if z == 0:
                out[k + 1] = 0
                return k + 2
            z = urn.urn_other(rng, -1, 0, z, memo, fam, p, B, g0, tab)
        out[k + 1] = z
    return n_steps + 1


@njit(cache=True)
def _chain_final(rng, reps, z0, n_steps, forward, anchor, buf, out, memo, fam, p, B, g0, tab):
    for r in range(reps):
        used = _chain(rng, z0, n_steps, forward, anchor, buf, memo, fam, p, B, g0, tab)
        out[r] = buf[used - 1]


def simulate(kernel: BlpKernel, z0: int, n_steps: int, rng: np.random.Generator,
             seed: int | None = None) -> BlpTrace:
    """Chain from z0 for n_steps (stops early once absorbed, keeping one guard entry)."""
    if z0 < 0 or n_steps < 0:
        raise ValueError("z0 and n_steps must be non-negative")
    buf = np.zeros(n_steps + 2, np.int64)
    used = _chain(rng, int(z0), int(n_steps), kernel.variant == FORWARD, int(kernel.anchor), buf,
                  *kernel.spec.kernel_args(DEFAULT_N_MEMO))
    vals = buf[:used].copy()
    absorbed = used < n_steps + 1 or (
        vals[-1] == 0 and kernel.cell(n_steps) in ("forward", "beyond"))
    return BlpTrace(vals, kernel.variant, {"kind": "simulated", "seed": seed}, kernel.anchor,
                    truncated=not absorbed)


def simulate_final(kernel: BlpKernel, z0: int, n_steps: int, reps: int,
                   rng: np.random.Generator) -> np.ndarray:
    """Chain values at step n_steps for ``reps`` independent chains."""
    buf = np.zeros(n_steps + 2, np.int64)
    out = np.zeros(int(reps), np.int64)
    _chain_final(rng, int(reps), int(z0), int(n_steps), kernel.variant == FORWARD, int(kernel.anchor),
                 buf, out, *kernel.spec.kernel_args(DEFAULT_N_MEMO))
    return out


# extraction -----------------------------------------------------------------

def _chop(vals: list[int], start_absorb: int) -> np.ndarray:
    """Cut after the first zero at index >= start_absorb, keeping one guard zero."""
    for k in range(start_absorb, len(vals)):
        if vals[k] == 0:
            return np.array(vals[: k + 1] + [0], np.int64)
    return np.array(vals + [0], np.int64)


def _forward_values(get_up, x: int, smax: int) -> np.ndarray:
    return _chop([get_up(x + k) for k in range(max(smax - x, 0) + 1)], 0)


def _backward_values(get_down, x: int, imin: int) -> np.ndarray:
    return _chop([get_down(x - k) for k in range(max(x - imin, 0) + 1)], x)


def extract_forward(trace: walk.WalkTrace, x: int, m: int) -> BlpTrace:
    """(E^{(x,m)}_{x+k,+})_{k>=0} up to the first zero (plus a guard zero)."""
    lam = walk.return_time(trace, x, m)
    prof = walk.profile_at(trace, lam, with_drift=False)
    smax = int(trace.require_positions()[: lam + 1].max())
    return BlpTrace(_forward_values(prof.e_up, x, smax), FORWARD,
                    {"kind": "extracted", "x": x, "m": m}, x)


def extract_backward(trace: walk.WalkTrace, x: int, m: int) -> BlpTrace:
    """(E^{(x,m)}_{x-k,-})_{k>=0} up to the first zero at k >= x (plus a guard zero)."""
    if x < 0:
        raise ValueError("backward extraction takes an anchor x >= 0")
    lam = walk.return_time(trace, x, m)
    prof = walk.profile_at(trace, lam, with_drift=False)
    imin = int(trace.require_positions()[: lam + 1].min())
    return BlpTrace(_backward_values(prof.e_down, x, imin), BACKWARD,
                    {"kind": "extracted", "x": x, "m": m}, x)


def extract_mirror(trace: walk.WalkTrace, x: int, m: int) -> BlpTrace:
    """(E^{(x,m)}_{x-k,-})_{k>=0} for x <= 0, the reflection of the forward chain at -x."""
    lam = walk.return_time(trace, x, m)
    prof = walk.profile_at(trace, lam, with_drift=False)
    imin = int(trace.require_positions()[: lam + 1].min())
    return BlpTrace(_chop([prof.e_down(x - k) for k in range(max(x - imin, 0) + 1)], 0), FORWARD,
                    {"kind": "extracted", "x": x, "m": m, "mirror": True}, -x)


def reconstruct_forward(trace: walk.WalkTrace, x: int, m: int) -> np.ndarray:
    """Rebuild the forward chain from site urns: next = tau^B_L - L at site x+k+1, L = current."""
    zt = extract_forward(trace, x, m).values
    out = [int(zt[0])]
    for k in range(zt.shape[0] - 1):
        L = out[-1]
        if L == 0:
            out.append(0)
            continue
        u = urn.extract_urn_from_walk(trace, x + k + 1)
        out.append(int(u.tau_blue[L]) - L)
    return np.array(out, np.int64)


def reconstruct_backward(trace: walk.WalkTrace, x: int, m: int) -> np.ndarray:
    """Same for the backward chain, with right departures R = current + 1{0 <= y < x}."""
    z = extract_backward(trace, x, m).values
    out = [int(z[0])]
    for k in range(z.shape[0] - 1):
        y = x - k - 1
        R = out[-1] + (1 if 0 <= y < x else 0)
        if R == 0:
            out.append(0)
            continue
        u = urn.extract_urn_from_walk(trace, y)
        out.append(int(u.tau_red[R]) - R)
    return np.array(out, np.int64)


# kernel vs extraction -------------------------------------------------------

@dataclass
class TransitionSample:
    spec: WeightSpec
    x: int
    m: int
    src: dict
    dst: dict
    walks: int
    censored: int


def walk_transitions(spec: WeightSpec, x: int, m: int, rng: np.random.Generator,
                     max_steps: int = 10**6) -> dict[str, list[tuple[int, int]]] | None:
    """One-step (i, j) pairs per cell read off a single walk stopped at lambda_{x,m}.

    Returns None when the walk does not reach lambda_{x,m} within ``max_steps``.
    """
    st = walk.run_until_return(spec, x, m, rng, max_steps)
    if st is None:
        return None
    out: dict[str, list[tuple[int, int]]] = {c: [] for c in CELLS}
    up = lambda y: st.directed(y, 1)  # noqa: E731
    down = lambda y: st.directed(y, -1)  # noqa: E731
    for variant, vals in ((FORWARD, _forward_values(up, x, st.smax)),
                          (BACKWARD, _backward_values(down, x, st.imin))):
        for k in range(vals.shape[0] - 1):
            c = cell_of(variant, x, k)
            if vals[k] == 0 and c in ("forward", "beyond"):
                break
            out[c].append((int(vals[k]), int(vals[k + 1])))
    return out


def pool_transitions(spec: WeightSpec, x: int, m: int, per_walk) -> TransitionSample:
    """Concatenate per-walk results (None = censored) in the given order."""
    src = {c: [] for c in CELLS}
    dst = {c: [] for c in CELLS}
    walks = censored = 0
    for res in per_walk:
        walks += 1
        if res is None:
            censored += 1
            continue
        for c, pairs in res.items():
            for i, j in pairs:
                src[c].append(i)
                dst[c].append(j)
    keep = [c for c in CELLS if src[c]]
    return TransitionSample(spec, x, m, {c: np.array(src[c], np.int64) for c in keep},
                            {c: np.array(dst[c], np.int64) for c in keep}, walks, censored)


def collect_transitions(spec: WeightSpec, x: int, m: int, walks: int, rng: np.random.Generator,
                        max_steps: int = 10**6) -> TransitionSample:
    """Walk-extracted transitions from ``walks`` independent walks stopped at lambda_{x,m}.

    Censored walks are dropped and counted.  Each walk contributes exactly one
    anchor-cell transition when x >= 1.
    """
    return pool_transitions(spec, x, m, (walk_transitions(spec, x, m, rng, max_steps)
                                         for _ in range(int(walks))))


def _strata(src: np.ndarray, a: np.ndarray, b: np.ndarray):
    order = np.argsort(src, kind="stable")
    s = src[order]
    cuts = np.flatnonzero(np.diff(s)) + 1
    for idx in np.split(order, cuts):
        yield a[idx], b[idx]


def kernel_equivalence(sample: TransitionSample, rng: np.random.Generator) -> dict[str, TestResult]:
    """Stratified chi-square per cell: extracted targets vs kernel draws from the same sources."""
    out = {}
    for c, s in sample.src.items():
        sim = sample_cell(sample.spec, c, s, rng)
        res = chi_square_stratified(_strata(s, sample.dst[c], sim))
        res.details.update({"cell": c, "walks": sample.walks, "censored": sample.censored})
        out[c] = res
    return out


# diffusion approximation ----------------------------------------------------

@dataclass
class RayKnightRecord:
    spec: WeightSpec
    variant: str
    n: int
    y0: float
    t: float
    reps: int
    ks: float
    p_value: float
    seed: int | None
    delta: float
    anchor: int | None
    reference: str
    warning: str | None = None
    sample: np.ndarray | None = field(default=None, repr=False)

    def to_dict(self) -> dict:
        return {"spec": self.spec.to_dict(), "variant": self.variant, "n": self.n, "y0": self.y0,
                "t": self.t, "reps": self.reps, "ks": self.ks, "p_value": self.p_value,
                "seed": self.seed, "delta": self.delta, "anchor": self.anchor,
                "reference": self.reference, "warning": self.warning}


def rayknight_experiment(spec: WeightSpec, n: int, y0: float, t: float, reps: int, variant: str,
                         rng: np.random.Generator, ref_reps: int | None = None,
                         anchor: int | None = None, dt: float = 1e-4,
                         seed: int | None = None) -> RayKnightRecord:
    """Compare zeta_{floor(nt)} / n with Z_t, where 2Z is BESQ(delta) started at 2*y0.

    Backward chains use an anchor beyond floor(nt) by default so that every
    step is interior (delta = 2 - 2 gamma); forward chains give delta = 2 gamma
    with absorption at 0.
    """
    from . import bmpe

    g = gamma_of(spec)
    steps = int(math.floor(n * t))
    z0 = int(math.floor(y0 * n))
    if variant == BACKWARD:
        anchor = steps + 2 if anchor is None else int(anchor)
        delta = 2 - 2 * g
    elif variant == FORWARD:
        anchor = None
        delta = 2 * g
    else:
        raise ValueError(f"unknown variant {variant!r}")
    warn = None
    if reps < 1000:
        warn = f"reps={reps} below 1000; KS resolution is poor"
        warnings.warn(warn)
    kern = BlpKernel(spec, variant, anchor or 0)
    vals = simulate_final(kern, z0, steps, reps, rng) / n
    ref_reps = ref_reps or max(10 * reps, 100_000)
    law = bmpe.BesqLaw(max(delta, 0.0), 2 * y0)
    if variant == FORWARD and z0 == 0:
        # started at the absorbing state
        ref = np.zeros(ref_reps)
        kind = "absorbed"
    elif variant == BACKWARD or delta == 0 or delta >= 2:
        ref = bmpe.sample_besq_marginal(law, t, rng, size=ref_reps) / 2
        kind = "exact"
    else:
        ref = bmpe.besq_marginal_euler(delta, 2 * y0, t, dt, ref_reps, rng, absorb=True) / 2
        kind = "euler"
    res = ks_two_sample(vals, ref)
    return RayKnightRecord(spec, variant, n, y0, t, reps, res.statistic, res.p_value, seed,
                           delta, anchor, kind, warn, vals)
