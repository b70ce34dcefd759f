"""Goodness-of-fit tests and interval estimates used by the experiments."""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import stats


@dataclass
class TestResult:
    name: str
    statistic: float
    p_value: float
    n1: int
    n2: int | None = None
    dof: int | None = None
    details: dict = field(default_factory=dict)

    __test__ = False  # keep pytest from collecting it

    def passed(self, p_min: float) -> bool:
        return self.p_value > p_min

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


def ks_two_sample(a, b) -> TestResult:
    """Two-sample KS with scipy's asymptotic p-value."""
    a = np.asarray(a, float)
    b = np.asarray(b, float)
    if a.size == 0 or b.size == 0:
        raise ValueError("both samples must be non-empty")
    with np.errstate(divide="ignore", invalid="ignore"):
        res = stats.ks_2samp(a, b, method="asymp")
    p = float(res.pvalue)
    if not math.isfinite(p):
        # scipy's finite-n form degenerates for single-point samples
        p = float(stats.kstwobign.sf(math.sqrt(a.size * b.size / (a.size + b.size)) * res.statistic))
    return TestResult("ks_two_sample", float(res.statistic), p, a.size, b.size)


def ks_one_sample(a, cdf) -> TestResult:
    """KS distance of a sample against a continuous cdf (callable)."""
    x = np.asarray(a, float)
    if x.size == 0:
        raise ValueError("sample must be non-empty")
    res = stats.kstest(x, cdf, method="asymp")
    return TestResult("ks_one_sample", float(res.statistic), float(res.pvalue), x.size)


def _merge_bins(c1: np.ndarray, c2: np.ndarray, min_expected: float):
    """Merge adjacent bins left to right until every pooled expected count is >= min_expected."""
    n1, n2 = c1.sum(), c2.sum()
    tot = n1 + n2
    out1, out2 = [], []
    acc1 = acc2 = 0
    for x, y in zip(c1, c2):
        acc1 += x
        acc2 += y
        pooled = acc1 + acc2
        if pooled * min(n1, n2) / tot >= min_expected:
            out1.append(acc1)
            out2.append(acc2)
            acc1 = acc2 = 0
    if acc1 or acc2:
        if out1:
            out1[-1] += acc1
            out2[-1] += acc2
        else:
            out1.append(acc1)
            out2.append(acc2)
    return np.array(out1, float), np.array(out2, float)


def _chi2_counts(c1, c2, min_expected):
    c1, c2 = _merge_bins(np.asarray(c1, float), np.asarray(c2, float), min_expected)
    n1, n2 = c1.sum(), c2.sum()
    k = c1.size
    if k < 2:
        return 0.0, 0, k
    pooled = c1 + c2
    e1 = pooled * n1 / (n1 + n2)
    e2 = pooled * n2 / (n1 + n2)
    stat = float(np.sum((c1 - e1) ** 2 / e1) + np.sum((c2 - e2) ** 2 / e2))
    return stat, k - 1, k


def _counts(a, b):
    a = np.asarray(a, np.int64)
    b = np.asarray(b, np.int64)
    lo = min(a.min(initial=0), b.min(initial=0))
    size = int(max(a.max(initial=0), b.max(initial=0)) - lo + 1)
    return np.bincount(a - lo, minlength=size), np.bincount(b - lo, minlength=size)


def chi_square_two_sample(a, b, min_expected: float = 5.0, counts: bool = False) -> TestResult:
    """Two-sample chi-square homogeneity test on integer samples (or count vectors)."""
    c1, c2 = (np.asarray(a), np.asarray(b)) if counts else _counts(a, b)
    stat, dof, k = _chi2_counts(c1, c2, min_expected)
    if dof == 0:
        raise ValueError("all mass falls in one bin after merging")
    p = float(stats.chi2.sf(stat, dof))
    return TestResult("chi_square_two_sample", stat, p, int(np.sum(c1)), int(np.sum(c2)), dof,
                      {"bins": k})


def chi_square_stratified(pairs, min_expected: float = 5.0) -> TestResult:
    """Sum of per-stratum chi-square statistics and degrees of freedom.

    ``pairs`` is an iterable of (sample_a, sample_b) drawn from the same
    source state; strata too small to yield two bins contribute nothing.
    """
    stat, dof, n1, n2, used = 0.0, 0, 0, 0, 0
    for a, b in pairs:
        a = np.asarray(a)
        b = np.asarray(b)
        n1 += a.size
        n2 += b.size
        if a.size == 0 or b.size == 0:
            continue
        s, d, _ = _chi2_counts(*_counts(a, b), min_expected)
        stat += s
        dof += d
        used += d > 0
    p = float(stats.chi2.sf(stat, dof)) if dof > 0 else 1.0
    return TestResult("chi_square_stratified", stat, p, n1, n2, dof, {"strata": used})


def wilson_interval(k: int, n: int, level: float = 0.95) -> tuple[float, float]:
    if n <= 0:
        raise ValueError("n must be positive")
    z = stats.norm.ppf(0.5 + level / 2)
    ph = k / n
    den = 1 + z * z / n
    mid = (ph + z * z / (2 * n)) / den
    half = z * math.sqrt(ph * (1 - ph) / n + z * z / (4 * n * n)) / den
    return float(max(0.0, mid - half)), float(min(1.0, mid + half))


def batch_mean_ci(x, batch: int, level: float = 0.95) -> tuple[float, float]:
    """(mean, half-width) of a normal CI built from means of consecutive batches."""
    x = np.asarray(x, float)
    if batch < 1:
        raise ValueError("batch size must be >= 1")
    k = x.size // batch
    if k < 10:
        raise ValueError(f"need at least 10 batches, got {k}")
    means = x[: k * batch].reshape(k, batch).mean(axis=1)
    m = float(means.mean())
    z = stats.norm.ppf(0.5 + level / 2)
    return m, float(z * means.std(ddof=1) / math.sqrt(k))


def mean_se(x) -> tuple[float, float]:
    x = np.asarray(x, float)
    return float(x.mean()), float(x.std(ddof=1) / math.sqrt(x.size))


def bonferroni(p: float, k: int) -> float:
    return min(1.0, p * k)
