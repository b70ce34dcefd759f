"""Weight functions w(n), urn weight sequences and the perturbation parameter gamma.

A weight family is described declaratively by :class:`WeightSpec`.  Every
other module reads model behaviour from it, either through the pure-Python
helpers here or through the numba-friendly argument tuple returned by
:meth:`WeightSpec.kernel_args`.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from enum import IntEnum
from functools import lru_cache

import numpy as np
from numba import njit

CONSTANT, POWER_LAW, ONCE_REINFORCED, TABULATED = 0, 1, 2, 3

FAMILIES = {
    "constant": CONSTANT,
    "power_law": POWER_LAW,
    "once_reinforced": ONCE_REINFORCED,
    "tabulated": TABULATED,
}
_FAMILY_NAMES = {v: k for k, v in FAMILIES.items()}

DEFAULT_GAMMA_TOL = 1e-10
DEFAULT_N_MEMO = 2**20


class InvalidWeightSpec(ValueError):
    """Raised when a spec fails positivity, monotonicity or the limit condition."""


class GammaError(RuntimeError):
    """Raised when the gamma series cannot be certified to the requested tolerance."""


class SiteSign(IntEnum):
    NEGATIVE = -1
    ZERO = 0
    POSITIVE = 1

    @classmethod
    def of(cls, y: int) -> "SiteSign":
        return cls((y > 0) - (y < 0))


@dataclass(frozen=True)
class WeightSpec:
    family: str
    p: float = 0.0
    B: float = 0.0
    gamma0: float = 0.0
    table: tuple[float, ...] = field(default_factory=tuple)

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise InvalidWeightSpec(f"unknown family {self.family!r}")
        object.__setattr__(self, "table", tuple(float(v) for v in self.table))

    # constructors ---------------------------------------------------------
    @classmethod
    def constant(cls) -> "WeightSpec":
        return cls("constant")

    @classmethod
    def power_law(cls, p: float, B: float) -> "WeightSpec":
        return cls("power_law", p=float(p), B=float(B))

    @classmethod
    def once_reinforced(cls, gamma0: float) -> "WeightSpec":
        return cls("once_reinforced", gamma0=float(gamma0))

    @classmethod
    def tabulated(cls, table) -> "WeightSpec":
        return cls("tabulated", table=tuple(table))

    # serialization --------------------------------------------------------
    def to_dict(self) -> dict:
        if self.family == "power_law":
            return {"family": "power_law", "p": self.p, "B": self.B}
        if self.family == "once_reinforced":
            return {"family": "once_reinforced", "gamma0": self.gamma0}
        if self.family == "tabulated":
            return {"family": "tabulated", "table": list(self.table), "tail": 1.0}
        return {"family": "constant"}

    @classmethod
    def from_dict(cls, d: dict) -> "WeightSpec":
        fam = d.get("family")
        if fam == "power_law":
            return cls.power_law(d["p"], d["B"])
        if fam == "once_reinforced":
            return cls.once_reinforced(d["gamma0"])
        if fam == "tabulated":
            if float(d.get("tail", 1.0)) != 1.0:
                raise InvalidWeightSpec("tabulated tail value must be exactly 1")
            return cls.tabulated(d["table"])
        if fam == "constant":
            return cls.constant()
        raise InvalidWeightSpec(f"unknown family {fam!r}")

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "WeightSpec":
        return cls.from_dict(json.loads(text))

    def label(self) -> str:
        if self.family == "power_law":
            return f"power_law(p={self.p:g},B={self.B:g})"
        if self.family == "once_reinforced":
            return f"once_reinforced(gamma0={self.gamma0:g})"
        if self.family == "tabulated":
            return f"tabulated({len(self.table)})"
        return "constant"

    def kernel_args(self, n_memo: int = DEFAULT_N_MEMO):
        """Arguments for :func:`w_kernel`: (memo, family, p, B, gamma0, table)."""
        require_valid(self)
        return _kernel_args(self, int(n_memo))


@lru_cache(maxsize=64)
def _kernel_args(spec: WeightSpec, n_memo: int):
    memo = w_array(spec, n_memo)
    memo.setflags(write=False)
    tab = np.asarray(spec.table if spec.table else (1.0,), dtype=np.float64)
    return (memo, FAMILIES[spec.family], float(spec.p), float(spec.B), float(spec.gamma0), tab)


@dataclass(frozen=True)
class Violation:
    prop: str
    n: int
    detail: str


def validate(spec: WeightSpec) -> list[Violation]:
    """Check positivity, monotonicity and w(n) -> 1.  An empty list means ok."""
    out: list[Violation] = []
    if spec.family == "power_law":
        if not 0.0 < spec.p <= 1.0:
            out.append(Violation("parameter", -1, f"p={spec.p} outside (0, 1]"))
            return out
        # 1 + 2^p B (n+1)^-p is monotone in n, so n = 0 is the worst case
        lead = 1.0 + 2.0**spec.p * spec.B
        if not lead > 0.0:
            out.append(Violation("positivity", 0, f"1 + 2^p*B = {lead:.6g} <= 0"))
    elif spec.family == "once_reinforced":
        if not spec.gamma0 < 1.0:
            out.append(Violation("positivity", 0, f"gamma0={spec.gamma0} >= 1"))
    elif spec.family == "tabulated":
        seq = list(spec.table) + [1.0]
        for n, v in enumerate(seq):
            if not (v > 0.0 and math.isfinite(v)):
                out.append(Violation("positivity", n, f"w({n})={v}"))
        sgn = np.sign(np.diff(seq))
        nz = sgn[sgn != 0]
        if nz.size and np.any(nz != nz[0]):
            n_bad = int(np.flatnonzero(sgn == -nz[0])[0]) + 1
            out.append(Violation("monotonicity", n_bad, "sequence (table + tail 1) changes direction"))
    return out


@lru_cache(maxsize=256)
def _is_valid(spec: WeightSpec) -> bool:
    return not validate(spec)


def require_valid(spec: WeightSpec) -> None:
    if not _is_valid(spec):
        v = validate(spec)[0]
        raise InvalidWeightSpec(f"{spec.label()}: {v.prop} violated at n={v.n} ({v.detail})")


def inv_w(spec: WeightSpec, n: int) -> float:
    """1/w(n) in closed form (avoids a reciprocal round trip)."""
    require_valid(spec)
    if n < 0:
        raise ValueError("n must be non-negative")
    if spec.family == "power_law":
        return 1.0 + 2.0**spec.p * spec.B * (n + 1.0) ** (-spec.p)
    if spec.family == "once_reinforced":
        return 1.0 - spec.gamma0 if n == 0 else 1.0
    if spec.family == "tabulated":
        return 1.0 / spec.table[n] if n < len(spec.table) else 1.0
    return 1.0


def eval_w(spec: WeightSpec, n: int) -> float:
    require_valid(spec)
    if n < 0:
        raise ValueError("n must be non-negative")
    if spec.family == "tabulated":
        return spec.table[n] if n < len(spec.table) else 1.0
    return 1.0 / inv_w(spec, n)


def w_array(spec: WeightSpec, size: int) -> np.ndarray:
    """w(0), ..., w(size-1) as a float64 array."""
    require_valid(spec)
    n = np.arange(size, dtype=np.float64)
    if spec.family == "power_law":
        return 1.0 / (1.0 + 2.0**spec.p * spec.B * (n + 1.0) ** (-spec.p))
    out = np.ones(size)
    if spec.family == "once_reinforced" and size:
        out[0] = 1.0 / (1.0 - spec.gamma0)
    elif spec.family == "tabulated":
        k = min(size, len(spec.table))
        out[:k] = spec.table[:k]
    return out


def urn_weights(spec: WeightSpec, sign: SiteSign | int, k: int) -> tuple[float, float]:
    """(b(k), r(k)) for the urn at a site of the given sign."""
    sign = SiteSign(sign)
    if sign is SiteSign.POSITIVE:
        return eval_w(spec, 2 * k + 1), eval_w(spec, 2 * k)
    if sign is SiteSign.NEGATIVE:
        return eval_w(spec, 2 * k), eval_w(spec, 2 * k + 1)
    v = eval_w(spec, 2 * k)
    return v, v


def urn_weight_arrays(spec: WeightSpec, sign: SiteSign | int, size: int) -> tuple[np.ndarray, np.ndarray]:
    """Vectorised ``urn_weights`` for k = 0..size-1."""
    w = w_array(spec, 2 * size + 2)
    even, odd = w[0 : 2 * size : 2], w[1 : 2 * size + 1 : 2]
    sign = SiteSign(sign)
    if sign is SiteSign.POSITIVE:
        return odd.copy(), even.copy()
    if sign is SiteSign.NEGATIVE:
        return even.copy(), odd.copy()
    return even.copy(), even.copy()


def sign_code(sign: SiteSign | int) -> int:
    return int(SiteSign(sign))


# gamma -------------------------------------------------------------------

_BERNOULLI = (1.0 / 6.0, -1.0 / 30.0, 1.0 / 42.0, -1.0 / 30.0)


def _rising(p: float, q: int) -> float:
    out = 1.0
    for i in range(q):
        out *= p + i
    return out


def _pl_deriv(c: float, p: float, q: int, x: float) -> float:
    """q-th derivative of f(x) = c[(2x+2)^-p - (2x+1)^-p]."""
    s = (-1) ** q * _rising(p, q) * 2.0**q * c
    return s * ((2 * x + 2) ** (-p - q) - (2 * x + 1) ** (-p - q))


def _pl_tail_integral(c: float, p: float, J: int) -> float:
    """Integral of f over [J, inf); the antiderivative difference vanishes at infinity."""
    a = 2.0 * J + 1.0
    if p == 1.0:
        diff = c * math.log1p(1.0 / a)
    else:
        diff = c / (1.0 - p) * a ** (1.0 - p) * math.expm1((1.0 - p) * math.log1p(1.0 / a))
    return -0.5 * diff


def _gamma_power_law(p: float, B: float, tol: float, max_terms: int, order: int = 3) -> tuple[float, float]:
    c = 2.0**p * B
    if c == 0.0:
        return 0.0, 0.0
    J = 64
    while True:
        # Euler-Maclaurin remainder; f^(2K) is one-signed so its integral is |f^(2K-1)(J)|
        zeta2k = float(np.sum(1.0 / np.arange(1, 200, dtype=float) ** (2 * order)))
        bound = 2.0 * zeta2k / (2.0 * math.pi) ** (2 * order) * abs(_pl_deriv(c, p, 2 * order - 1, J))
        if bound <= tol / 2:
            break
        J *= 2
        if J > max_terms:
            raise GammaError(f"gamma for p={p}, B={B} not certified to {tol} within {max_terms} terms")
    j = np.arange(J, dtype=np.float64)
    head = math.fsum(c * ((2 * j + 2) ** (-p) - (2 * j + 1) ** (-p)))
    tail = _pl_tail_integral(c, p, J) + 0.5 * c * ((2 * J + 2.0) ** (-p) - (2 * J + 1.0) ** (-p))
    for k in range(1, order + 1):
        tail -= _BERNOULLI[k - 1] / math.factorial(2 * k) * _pl_deriv(c, p, 2 * k - 1, J)
    return head + tail, bound + J * 2e-16 * abs(c)


def gamma(spec: WeightSpec, tol: float = DEFAULT_GAMMA_TOL, max_terms: int = 10**7) -> float:
    """Limit of V_1(m) - U_1(m), i.e. sum_j (1/w(2j+1) - 1/w(2j))."""
    return gamma_with_bound(spec, tol, max_terms)[0]


def gamma_with_bound(spec: WeightSpec, tol: float = DEFAULT_GAMMA_TOL, max_terms: int = 10**7) -> tuple[float, float]:
    require_valid(spec)
    if not tol > 0:
        raise ValueError("tol must be positive")
    return _gamma_cached(spec, float(tol), int(max_terms))


@lru_cache(maxsize=128)
def _gamma_cached(spec: WeightSpec, tol: float, max_terms: int) -> tuple[float, float]:
    if spec.family == "constant":
        return 0.0, 0.0
    if spec.family == "once_reinforced":
        # only the j = 0 term survives: 1 - (1 - gamma0)
        return float(spec.gamma0), 0.0
    if spec.family == "tabulated":
        L = len(spec.table)
        terms = [inv_w(spec, 2 * j + 1) - inv_w(spec, 2 * j) for j in range((L + 1) // 2)]
        return math.fsum(terms), 0.0
    return _gamma_power_law(spec.p, spec.B, tol, max_terms)


def gamma_partial(spec: WeightSpec, m: int) -> float:
    """V_1(m) - U_1(m)."""
    j = np.arange(m)
    inv = 1.0 / w_array(spec, 2 * m)
    return math.fsum(inv[2 * j + 1] - inv[2 * j])


# numba side ----------------------------------------------------------------

@njit(cache=True, inline="always")
def w_kernel(memo, fam, p, B, g0, tab, n):
    """w(n) from a memo table with a closed-form fallback past its end."""
    if n < memo.shape[0]:
        return memo[n]
    if fam == POWER_LAW:
        return 1.0 / (1.0 + 2.0**p * B * (n + 1.0) ** (-p))
    if fam == TABULATED and n < tab.shape[0]:
        return tab[n]
    return 1.0


@njit(cache=True, inline="always")
def urn_b(memo, fam, p, B, g0, tab, sign, k):
    if sign > 0:
        return w_kernel(memo, fam, p, B, g0, tab, 2 * k + 1)
    return w_kernel(memo, fam, p, B, g0, tab, 2 * k)


@njit(cache=True, inline="always")
def urn_r(memo, fam, p, B, g0, tab, sign, k):
    if sign < 0:
        return w_kernel(memo, fam, p, B, g0, tab, 2 * k + 1)
    return w_kernel(memo, fam, p, B, g0, tab, 2 * k)


def family_name(code: int) -> str:
    return _FAMILY_NAMES[code]
