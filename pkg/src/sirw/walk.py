"""Simulation of the self-interacting walk and pathwise observables.

The step law at site x uses the undirected edge local times l = #{crossings of
{x-1, x}} and r = #{crossings of {x, x+1}}: the walk jumps right with
probability w(r) / (w(l) + w(r)).  The conditional drift of each step,
(w(r) - w(l)) / (w(l) + w(r)), is accumulated into Gamma_k with compensated
summation.

Site-indexed counters live in dense arrays over an interval containing the
range [I_k, S_k]; ``off`` maps site x to index x + off.  Undirected edge
{e, e+1} is stored at index e + off.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from numba import njit

from .defaults import RECORD_CAP
from .weights import DEFAULT_N_MEMO, WeightSpec, eval_w, gamma as gamma_of, w_kernel


class MemoryBudgetError(MemoryError):
    pass


class MissingReturnTime(LookupError):
    pass


@dataclass
class RecordOptions:
    positions: bool = True
    increments: bool = True
    cap: int = RECORD_CAP


@dataclass
class WalkState:
    """Mutable walk state with offset-indexed site counters."""

    gamma: float = 0.0
    pos: int = 0
    step: int = 0
    smax: int = 0
    imin: int = 0
    drift_acc: float = 0.0
    drift_comp: float = 0.0
    qv_sum: float = 0.0
    qv_comp: float = 0.0
    sup_dev: float = 0.0
    off: int = 0
    edge: np.ndarray = field(default=None, repr=False)
    visits: np.ndarray = field(default=None, repr=False)
    up: np.ndarray = field(default=None, repr=False)
    down: np.ndarray = field(default=None, repr=False)

    @classmethod
    def initial(cls, gamma: float = 0.0, size: int = 64) -> "WalkState":
        size = max(int(size), 8)
        st = cls(gamma=float(gamma), off=size // 2)
        st.edge = np.zeros(size, np.int64)
        st.visits = np.zeros(size, np.int64)
        st.up = np.zeros(size, np.int64)
        st.down = np.zeros(size, np.int64)
        st.visits[st.off] = 1
        return st

    def _get(self, arr, x):
        i = x + self.off
        return int(arr[i]) if 0 <= i < arr.shape[0] else 0

    def edge_l(self, x: int) -> int:
        """Crossings of {x-1, x} so far."""
        return self._get(self.edge, x - 1)

    def edge_r(self, x: int) -> int:
        """Crossings of {x, x+1} so far."""
        return self._get(self.edge, x)

    def site_visits(self, x: int) -> int:
        return self._get(self.visits, x)

    def directed(self, x: int, sign: int) -> int:
        return self._get(self.up if sign > 0 else self.down, x)

    def grow(self) -> None:
        size = self.edge.shape[0]
        shift = size // 2
        for name in ("edge", "visits", "up", "down"):
            old = getattr(self, name)
            new = np.zeros(2 * size, np.int64)
            new[shift : shift + size] = old
            setattr(self, name, new)
        self.off += shift

    def needs_room(self) -> bool:
        i = self.pos + self.off
        return i < 2 or i > self.edge.shape[0] - 3

    @property
    def martingale(self) -> float:
        return self.pos - self.drift_acc

    def sites(self) -> np.ndarray:
        return np.arange(self.imin, self.smax + 1)


@dataclass
class StepRecord:
    direction: int
    increment: float
    p_right: float


def step(state: WalkState, spec: WeightSpec, rng: np.random.Generator) -> StepRecord:
    """Advance one step in pure Python; same uniform consumption as the compiled kernel."""
    if state.needs_room():
        state.grow()
    ix = state.pos + state.off
    wl = eval_w(spec, int(state.edge[ix - 1]))
    wr = eval_w(spec, int(state.edge[ix]))
    s = wl + wr
    inc = (wr - wl) / s
    y = inc - state.drift_comp
    t = state.drift_acc + y
    state.drift_comp = (t - state.drift_acc) - y
    state.drift_acc = t
    y = inc * inc - state.qv_comp
    t = state.qv_sum + y
    state.qv_comp = (t - state.qv_sum) - y
    state.qv_sum = t
    if rng.random() < wr / s:
        state.edge[ix] += 1
        state.up[ix] += 1
        state.pos += 1
        d = 1
    else:
        state.edge[ix - 1] += 1
        state.down[ix] += 1
        state.pos -= 1
        d = -1
    state.visits[state.pos + state.off] += 1
    state.step += 1
    state.smax = max(state.smax, state.pos)
    state.imin = min(state.imin, state.pos)
    state.sup_dev = max(state.sup_dev, abs(state.drift_acc - state.gamma * (state.smax + state.imin)))
    return StepRecord(d, inc, wr / s)


@njit(cache=True)
def _advance(rng, n_todo, ist, fst, edge, visits, up, down, pos_out, inc_out, memo, fam, p, B, g0, tab,
             stop_x=0, stop_visits=0):
    # stop_visits > 0: also stop once site stop_x has been visited that many times
    pos, k, smax, imin, off = ist[0], ist[1], ist[2], ist[3], ist[4]
    gam, gam_c, qv, qv_c, sup_dev, gmm = fst[0], fst[1], fst[2], fst[3], fst[4], fst[5]
    size = edge.shape[0]
    rec_pos = pos_out.shape[0] > 0
    rec_inc = inc_out.shape[0] > 0
    done = 0
    while done < n_todo:
        ix = pos + off
        if ix < 2 or ix > size - 3:
            break
        wl = w_kernel(memo, fam, p, B, g0, tab, edge[ix - 1])
        wr = w_kernel(memo, fam, p, B, g0, tab, edge[ix])
        s = wl + wr
        inc = (wr - wl) / s
        y = inc - gam_c
        t = gam + y
        gam_c = (t - gam) - y
        gam = t
        y = inc * inc - qv_c
        t = qv + y
        qv_c = (t - qv) - y
        qv = t
        if rec_inc:
            inc_out[k] = inc
        if rng.random() < wr / s:
            edge[ix] += 1
            up[ix] += 1
            pos += 1
        else:
            edge[ix - 1] += 1
            down[ix] += 1
            pos -= 1
        visits[pos + off] += 1
        k += 1
        if pos > smax:
            smax = pos
        elif pos < imin:
            imin = pos
        dev = abs(gam - gmm * (smax + imin))
        if dev > sup_dev:
            sup_dev = dev
        if rec_pos:
            pos_out[k] = pos
        done += 1
        if stop_visits > 0 and pos == stop_x and visits[pos + off] >= stop_visits:
            break
    ist[0], ist[1], ist[2], ist[3] = pos, k, smax, imin
    fst[0], fst[1], fst[2], fst[3], fst[4] = gam, gam_c, qv, qv_c, sup_dev
    return done


_EMPTY_I = np.zeros(0, np.int32)
_EMPTY_F = np.zeros(0, np.float64)


def advance(state: WalkState, spec: WeightSpec, n: int, rng: np.random.Generator,
            pos_out: np.ndarray = _EMPTY_I, inc_out: np.ndarray = _EMPTY_F,
            n_memo: int = DEFAULT_N_MEMO, stop_at: tuple[int, int] | None = None) -> bool:
    """Run ``n`` more steps with the compiled kernel, growing storage as needed.

    With ``stop_at=(x, m)`` the run ends early at lambda_{x,m}; returns True
    if that time was reached.
    """
    args = spec.kernel_args(n_memo)
    sx, sv = (0, 0) if stop_at is None else (int(stop_at[0]), int(stop_at[1]) + 1)
    if sv and state.pos == sx and state.site_visits(sx) >= sv:
        return True
    ist = np.array([state.pos, state.step, state.smax, state.imin, state.off], np.int64)
    fst = np.array([state.drift_acc, state.drift_comp, state.qv_sum, state.qv_comp, state.sup_dev, state.gamma])
    left = int(n)
    while left > 0:
        done = _advance(rng, left, ist, fst, state.edge, state.visits, state.up, state.down,
                        pos_out, inc_out, *args, sx, sv)
        left -= done
        state.pos, state.step, state.smax, state.imin = (int(v) for v in ist[:4])
        if sv and state.pos == sx and state.site_visits(sx) >= sv:
            break
        if left > 0:
            state.grow()
            ist[4] = state.off
    state.drift_acc, state.drift_comp, state.qv_sum, state.qv_comp, state.sup_dev = (float(v) for v in fst[:5])
    return bool(sv) and state.pos == sx and state.site_visits(sx) >= sv


@dataclass
class WalkTrace:
    spec: WeightSpec
    n_steps: int
    state: WalkState
    positions: np.ndarray | None = None
    increments: np.ndarray | None = None
    seed: int | None = None

    def require_positions(self) -> np.ndarray:
        if self.positions is None:
            raise ValueError("trace was run without position recording")
        return self.positions

    def require_increments(self) -> np.ndarray:
        if self.increments is None:
            raise ValueError("trace was run without increment recording")
        return self.increments

    @property
    def drift_series(self) -> np.ndarray:
        """Gamma_0..Gamma_n."""
        return np.concatenate(([0.0], np.cumsum(self.require_increments())))


def run(spec: WeightSpec, n_steps: int, rng: np.random.Generator | int | None = None,
        record: RecordOptions | None = None, gamma: float | None = None,
        n_memo: int = DEFAULT_N_MEMO) -> WalkTrace:
    if n_steps < 0:
        raise ValueError("n_steps must be non-negative")
    record = record or RecordOptions()
    seed = None
    if not isinstance(rng, np.random.Generator):
        seed = rng
        rng = np.random.default_rng(rng)
    want = (n_steps + 1) * record.positions + n_steps * record.increments
    if want > record.cap:
        raise MemoryBudgetError(f"recording {want} entries exceeds cap {record.cap}")
    g = gamma_of(spec) if gamma is None else float(gamma)
    state = WalkState.initial(g, size=min(2 * n_steps + 8, 1 << 16))
    pos_out = np.zeros(n_steps + 1, np.int32) if record.positions else _EMPTY_I
    inc_out = np.zeros(n_steps, np.float64) if record.increments else _EMPTY_F
    advance(state, spec, n_steps, rng, pos_out, inc_out, n_memo=min(n_memo, 2 * n_steps + 4))
    return WalkTrace(spec, n_steps, state,
                     pos_out if record.positions else None,
                     inc_out if record.increments else None, seed)


def run_until_return(spec: WeightSpec, x: int, m: int, rng: np.random.Generator,
                     max_steps: int, n_memo: int = DEFAULT_N_MEMO) -> WalkState | None:
    """Walk state at lambda_{x,m} without path recording; None if not reached within max_steps."""
    state = WalkState.initial(0.0, size=1 << 10)
    ok = advance(state, spec, max_steps, rng, n_memo=min(n_memo, 2 * max_steps + 4), stop_at=(x, m))
    return state if ok else None


# observables ----------------------------------------------------------------

def return_times(trace: WalkTrace, x: int) -> np.ndarray:
    """lambda_{x,m} for m = 0, 1, ... up to n_steps (empty if x never visited)."""
    return np.flatnonzero(trace.require_positions() == x)


def return_time(trace: WalkTrace, x: int, m: int) -> int:
    lam = return_times(trace, x)
    if m >= lam.size:
        raise MissingReturnTime(f"lambda_({x},{m}) beyond the trace")
    return int(lam[m])


@dataclass
class Profile:
    """Directed edge local times and per-site drift up to a fixed time."""

    lo: int
    up: np.ndarray
    down: np.ndarray
    drift: np.ndarray | None

    def _get(self, arr, y):
        i = y - self.lo
        return arr[i] if 0 <= i < arr.shape[0] else 0

    def e_up(self, y: int) -> int:
        return int(self._get(self.up, y))

    def e_down(self, y: int) -> int:
        return int(self._get(self.down, y))

    def delta(self, y: int) -> float:
        return float(self._get(self.drift, y))

    @property
    def sites(self) -> np.ndarray:
        return np.arange(self.lo, self.lo + self.up.shape[0])


def profile_at(trace: WalkTrace, t: int, with_drift: bool = True) -> Profile:
    """Counts over steps i < t of jumps y -> y+1, y -> y-1, and sum of drifts at y."""
    pos = trace.require_positions()
    head = pos[:t].astype(np.int64)
    lo = int(pos[: t + 1].min())
    hi = int(pos[: t + 1].max())
    size = hi - lo + 1
    steps = np.diff(pos[: t + 1])
    up = np.bincount(head[steps > 0] - lo, minlength=size)
    down = np.bincount(head[steps < 0] - lo, minlength=size)
    drift = None
    if with_drift:
        drift = np.bincount(head - lo, weights=trace.require_increments()[:t], minlength=size)
    return Profile(lo, up, down, drift)


def directed_local_time(trace: WalkTrace, x: int, m: int, y: int, direction: int) -> int:
    """#{i < lambda_{x,m}: X_i = y, X_{i+1} = y + direction}."""
    lam = return_time(trace, x, m)
    pos = trace.require_positions()
    head = pos[:lam]
    nxt = pos[1 : lam + 1]
    return int(np.count_nonzero((head == y) & (nxt == y + direction)))


def local_drift(trace: WalkTrace, x: int, m: int, y: int) -> float:
    """Drift accumulated at site y before lambda_{x,m}."""
    lam = return_time(trace, x, m)
    pos = trace.require_positions()[:lam]
    inc = trace.require_increments()[:lam]
    return math.fsum(inc[pos == y])


def qv_monitor(trace: WalkTrace, N: int) -> float:
    """Mean squared conditional drift over the first N steps."""
    inc = trace.require_increments()
    if N > inc.shape[0] or N < 1:
        raise ValueError(f"N={N} outside 1..{inc.shape[0]}")
    return float(np.dot(inc[:N], inc[:N]) / N)


def drift_vs_range(trace: WalkTrace, k: int | None = None, gamma: float | None = None,
                   scan: bool = False) -> float:
    """|Gamma_k - gamma (S_k + I_k)|, or its supremum over k' <= k when ``scan``."""
    k = trace.n_steps if k is None else k
    g = trace.state.gamma if gamma is None else gamma
    if scan and k == trace.n_steps and trace.positions is None:
        return trace.state.sup_dev
    pos = trace.require_positions()[: k + 1]
    gam = trace.drift_series[: k + 1]
    dev = np.abs(gam - g * (np.maximum.accumulate(pos) + np.minimum.accumulate(pos)))
    return float(dev.max() if scan else dev[k])


def replay_edges(positions: np.ndarray) -> dict[str, np.ndarray]:
    """Rebuild edge counters from a position record (for bookkeeping checks)."""
    pos = positions.astype(np.int64)
    lo, hi = int(pos.min()), int(pos.max())
    size = hi - lo + 1
    lower = np.minimum(pos[:-1], pos[1:]) - lo
    steps = np.diff(pos)
    return {
        "lo": lo,
        "edge": np.bincount(lower, minlength=size),
        "visits": np.bincount(pos - lo, minlength=size),
        "up": np.bincount(pos[:-1][steps > 0] - lo, minlength=size),
        "down": np.bincount(pos[:-1][steps < 0] - lo, minlength=size),
    }


def trace_summary(trace: WalkTrace) -> dict:
    st = trace.state
    return {
        "seed": trace.seed,
        "n": trace.n_steps,
        "X_n": st.pos,
        "S_n": st.smax,
        "I_n": st.imin,
        "Gamma_n": st.drift_acc,
        "qv_monitor": st.qv_sum / trace.n_steps if trace.n_steps else 0.0,
        "sup_drift_vs_range": st.sup_dev,
    }


def dump_steps(trace: WalkTrace, path: str | Path) -> Path:
    """Write step directions (1 = right, 0 = left) as bytes plus a JSON sidecar."""
    path = Path(path)
    steps = (np.diff(trace.require_positions()) > 0).astype(np.uint8)
    path.write_bytes(steps.tobytes())
    side = path.with_suffix(path.suffix + ".json")
    side.write_text(json.dumps({"spec": trace.spec.to_dict(), "seed": trace.seed,
                                "n": trace.n_steps, "encoding": "uint8 1=right 0=left"},
                               sort_keys=True, indent=1))
    return side


def load_steps(path: str | Path) -> tuple[np.ndarray, dict]:
    path = Path(path)
    header = json.loads(path.with_suffix(path.suffix + ".json").read_text())
    steps = np.frombuffer(path.read_bytes(), dtype=np.uint8).astype(np.int64) * 2 - 1
    return np.concatenate(([0], np.cumsum(steps))).astype(np.int32), header
