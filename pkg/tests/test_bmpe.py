import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from sirw.bmpe import (
    BesqLaw,
    besq_marginal_euler,
    besq_path,
    load_marginal,
    sample_besq_marginal,
    sample_bmpe_marginal,
    save_marginal,
    solve_bmpe,
    write_besq_csv,
    write_bmpe_csv,
)
from sirw.stats import ks_two_sample


def _mean_ok(x, target, n_se=3.0):
    x = np.asarray(x, float)
    return abs(x.mean() - target) <= n_se * x.std(ddof=1) / math.sqrt(x.size)


def test_zero_theta_is_brownian():
    inc = np.random.default_rng(0).normal(size=1000)
    path = solve_bmpe(inc, 0.0, 0.0)
    assert np.array_equal(path.values, path.brownian)


def test_monotone_path_doubles():
    dt = 0.01
    inc = np.full(500, dt)
    path = solve_bmpe(inc, 0.5, 0.0, dt)
    assert np.allclose(path.values, 2 * path.brownian, rtol=0, atol=1e-13)


def test_reflection_exact():
    inc = np.random.default_rng(1).normal(size=2000)
    a = solve_bmpe(inc, 0.3, -0.4)
    b = solve_bmpe(-inc, -0.4, 0.3)
    assert np.array_equal(a.values, -b.values)


def test_theta_must_be_below_one():
    with pytest.raises(ValueError):
        solve_bmpe(np.ones(3), 1.0, 0.0)
    with pytest.raises(ValueError):
        sample_bmpe_marginal(0.2, 1.5, 1.0, 0.01, 10, np.random.default_rng(0))


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32), st.floats(-2.0, 0.9), st.floats(-2.0, 0.9))
def test_residual_and_extrema(seed, tp, tm):
    inc = np.random.default_rng(seed).normal(scale=0.1, size=500)
    path = solve_bmpe(inc, tp, tm, 0.01)
    assert path.residual() <= 1e-12
    assert np.array_equal(path.run_max, np.maximum.accumulate(path.values))
    assert np.array_equal(path.run_min, np.minimum.accumulate(path.values))


def test_brownian_marginal_moments():
    x = sample_bmpe_marginal(0.0, 0.0, 2.0, 0.01, 20000, np.random.default_rng(2))
    assert _mean_ok(x, 0.0)
    # s.e. of the sample variance for a Gaussian: var * sqrt(2 / (n - 1))
    assert abs(x.var(ddof=1) - 2.0) <= 3 * 2.0 * math.sqrt(2 / (x.size - 1))


def test_equal_theta_symmetric():
    x = sample_bmpe_marginal(-0.5, -0.5, 1.0, 1e-3, 10**4, np.random.default_rng(3))
    assert ks_two_sample(x, -x).p_value > 0.01


def test_dt_refinement():
    rng = np.random.default_rng(4)
    a = sample_bmpe_marginal(-0.3, -0.3, 1.0, 1e-3, 10**4, rng)
    b = sample_bmpe_marginal(-0.3, -0.3, 1.0, 1e-4, 10**4, rng)
    assert ks_two_sample(a, b).statistic < 0.02


def test_brownian_scaling_times():
    # W_t / sqrt(t) has the same law for t = 0.5 and t = 2
    rng = np.random.default_rng(18)
    a = sample_bmpe_marginal(0.4, -0.6, 0.5, 5e-4, 10**4, rng) / math.sqrt(0.5)
    b = sample_bmpe_marginal(0.4, -0.6, 2.0, 2e-3, 10**4, rng) / math.sqrt(2.0)
    assert ks_two_sample(a, b).p_value > 0.01


def test_brownian_scaling():
    rng = np.random.default_rng(5)
    a = sample_bmpe_marginal(0.4, -0.6, 4.0, 4e-3, 10**4, rng) / 2
    b = sample_bmpe_marginal(0.4, -0.6, 1.0, 1e-3, 10**4, rng)
    assert ks_two_sample(a, b).p_value > 0.01


def test_grid_validation():
    with pytest.raises(ValueError):
        sample_bmpe_marginal(0.0, 0.0, 1.0, 2.0, 10, np.random.default_rng(0))


def test_besq_law_validation():
    with pytest.raises(ValueError):
        BesqLaw(-1.0)
    with pytest.raises(ValueError):
        BesqLaw(2.0, -0.1)
    with pytest.raises(ValueError):
        sample_besq_marginal(BesqLaw(2.0), 0.0, np.random.default_rng(0))


def test_besq_dim2_from_zero():
    x = sample_besq_marginal(BesqLaw(2.0, 0.0), 0.7, np.random.default_rng(6), size=10**5)
    assert _mean_ok(x, 1.4)


@pytest.mark.parametrize("delta,x0,t", [(0.5, 1.0, 0.3), (1.0, 0.0, 1.0), (2.0, 2.0, 0.5), (3.5, 0.2, 2.0)])
def test_besq_first_moment(delta, x0, t):
    law = BesqLaw(delta, x0)
    x = sample_besq_marginal(law, t, np.random.default_rng(7), size=10**5)
    assert _mean_ok(x, law.mean(t))
    eu = besq_marginal_euler(delta, x0, t, 1e-4, 20000, np.random.default_rng(8))
    assert _mean_ok(eu, law.mean(t))


def test_besq_small_time():
    x = sample_besq_marginal(BesqLaw(1.0, 1.0), 1e-6, np.random.default_rng(9), size=10**4)
    assert _mean_ok(x, 1.0)


def test_besq_no_zeros_dim2():
    x = sample_besq_marginal(BesqLaw(2.0, 1.0), 1.0, np.random.default_rng(10), size=10**6)
    assert np.all(x > 0)
    y = sample_besq_marginal(BesqLaw(0.5, 0.3), 1.0, np.random.default_rng(10), size=10**5)
    assert np.all(y >= 0)


def test_besq_path_degenerate():
    p = besq_path(BesqLaw(0.0, 0.0), 1.0, 1e-3, True, np.random.default_rng(11))
    assert np.all(p.values == 0) and p.sigma0 == 0.0


def test_besq_path_absorbed():
    rng = np.random.default_rng(12)
    for _ in range(50):
        p = besq_path(BesqLaw(0.5, 0.2), 2.0, 1e-3, True, rng)
        if not math.isnan(p.sigma0):
            k = int(round(p.sigma0 / p.dt))
            assert np.all(p.values[k:] == 0) and p.values[k - 1] > 0


@pytest.mark.parametrize("delta", [1.0, 2.0, 3.0])
def test_euler_matches_exact(delta):
    rng = np.random.default_rng(13)
    eu = besq_marginal_euler(delta, 1.0, 1.0, 1e-4, 10**4, rng)
    ex = sample_besq_marginal(BesqLaw(delta, 1.0), 1.0, rng, size=10**5)
    assert ks_two_sample(eu, ex).statistic < 0.03


def test_sigma0_grid_sensitivity_reported():
    # hitting times on coarser grids are later on average; only the sign is checked
    rng = np.random.default_rng(14)
    hits = {}
    for dt in (1e-2, 1e-4):
        s = [besq_path(BesqLaw(0.5, 0.5), 5.0, dt, True, rng).sigma0 for _ in range(400)]
        hits[dt] = np.nanmean(s)
    assert hits[1e-2] > 0 and hits[1e-4] > 0


def test_exports(tmp_path):
    path = solve_bmpe(np.random.default_rng(15).normal(size=20), 0.2, -0.3, 0.05)
    f = write_bmpe_csv(path, tmp_path / "w.csv")
    rows = f.read_text().splitlines()
    assert rows[0] == "t,W,S,I" and len(rows) == 22
    bp = besq_path(BesqLaw(2.0, 1.0), 0.1, 0.01, False, np.random.default_rng(16))
    assert write_besq_csv(bp, tmp_path / "z.csv").read_text().startswith("t,Z")
    vals = np.random.default_rng(17).random(100)
    save_marginal(vals, tmp_path / "m.bin", {"t": 1.0})
    back, meta = load_marginal(tmp_path / "m.bin")
    assert np.array_equal(back, vals) and meta["count"] == 100 and meta["t"] == 1.0
