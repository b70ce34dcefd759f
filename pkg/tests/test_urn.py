import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from sirw.stats import chi_square_two_sample
from sirw.urn import (
    BLUE,
    RED,
    DrawCapExceeded,
    UrnState,
    concentration_tail,
    draw,
    drift_from_urn,
    dp_expected_mu,
    exp_martingale,
    expected_D_at_tau,
    extract_urn_from_walk,
    fit_concentration,
    phi_one_step,
    run_to_tau_blue,
    run_to_tau_red,
    sample_mu,
    toth_check,
    toth_linear,
)
from sirw.walk import local_drift, return_times, run, run_until_return
from sirw.weights import SiteSign, WeightSpec

from conftest import CONSTANT, ONCE, PL, THREE

POS, NEG, ZERO = SiteSign.POSITIVE, SiteSign.NEGATIVE, SiteSign.ZERO


def once_exact(m):
    # OnceReinforced 0.5 on the positive side; hand-solved recursion over the first blue
    return 0.5 * (1 - 3.0**-m)


def test_p_blue_examples():
    assert UrnState(CONSTANT, POS, 3, 7).p_blue() == 0.5
    assert UrnState(ONCE, POS).p_blue() == pytest.approx(1 / 3, rel=1e-15)
    for i in range(6):
        assert UrnState(PL, ZERO, i, i).p_blue() == 0.5


def test_draw_updates_counts():
    st_ = UrnState(PL, POS)
    rng = np.random.default_rng(0)
    for i in range(100):
        c = draw(st_, rng)
        assert c in (BLUE, RED)
        assert st_.draws == i + 1


def test_tau_zero_and_counts():
    tr = run_to_tau_blue(UrnState(PL, POS), 10, np.random.default_rng(1))
    assert tr.tau_blue[0] == 0 and tr.mu(0) == 0
    assert tr.blue_counts[-1] == 10 and tr.draws[-1] == BLUE
    assert np.all(tr.blue_counts + tr.red_counts == np.arange(len(tr) + 1))
    for m in range(1, 11):
        k = tr.tau_blue[m]
        assert tr.D[k] == tr.mu(m) - m
    tr = run_to_tau_red(UrnState(PL, NEG), 5, np.random.default_rng(1))
    assert tr.red_counts[-1] == 5 and tr.draws[-1] == RED


def test_draw_cap():
    with pytest.raises(DrawCapExceeded) as e:
        run_to_tau_blue(UrnState(CONSTANT, POS), 10**4, np.random.default_rng(2), max_draws=100)
    assert len(e.value.trace) == 100
    with pytest.raises(ValueError):
        run_to_tau_blue(UrnState(CONSTANT, POS), -1, np.random.default_rng(2))


def test_constant_negative_binomial_mean():
    mu = sample_mu(CONSTANT, POS, 10, 10**5, np.random.default_rng(3))
    se = mu.std(ddof=1) / math.sqrt(mu.size)
    assert abs(mu.mean() - 10) <= 3 * se


def test_dp_trivial_cases():
    for m in (1, 5, 40):
        for sign in (POS, NEG, ZERO):
            assert expected_D_at_tau(CONSTANT, sign, m).value == pytest.approx(0.0, abs=1e-10)


def test_zero_sign_not_centered():
    # b = r as functions, yet stopping at a blue skews mu(m) unless w is constant;
    # what the symmetric urn does satisfy is the linear identity, checked against MC here
    dp = expected_D_at_tau(PL, ZERO, 5)
    mc = expected_D_at_tau(PL, ZERO, 5, method="mc", reps=2 * 10**5, rng=np.random.default_rng(14))
    assert abs(dp.value - mc.value) <= 3 * mc.error
    assert dp.value > 0.01
    assert toth_linear(PL, ZERO, 5).gap < 1e-12


@pytest.mark.parametrize("m", [1, 2, 3, 10, 30])
def test_dp_once_reinforced_exact(m):
    res = expected_D_at_tau(ONCE, POS, m)
    assert res.error <= 1e-10
    assert res.value == pytest.approx(once_exact(m), abs=1e-9)
    # on the negative side the first blue is boosted and the law of mu(m) - m is centred at -1/2
    assert expected_D_at_tau(ONCE, NEG, m).value == pytest.approx(-0.5, abs=1e-10)


def test_dp_hand_values():
    assert once_exact(1) == pytest.approx(1 / 3) and once_exact(2) == pytest.approx(4 / 9)
    assert expected_D_at_tau(ONCE, POS, 1).value == pytest.approx(1 / 3, abs=1e-11)
    assert expected_D_at_tau(ONCE, POS, 2).value == pytest.approx(4 / 9, abs=1e-11)


def test_dp_matches_mc_once():
    dp = expected_D_at_tau(ONCE, POS, 50)
    mc = expected_D_at_tau(ONCE, POS, 50, method="mc", reps=2 * 10**5, rng=np.random.default_rng(4))
    assert abs(dp.value - mc.value) <= 3 * mc.error + 1e-8
    gaps = [abs(expected_D_at_tau(ONCE, POS, m).value - 0.5) for m in (10, 50, 200)]
    # 3^-50 is below double resolution, so the last two gaps are both rounding level
    assert gaps[0] > max(gaps[1], gaps[2])
    assert max(gaps[1], gaps[2]) <= 1e-10


def test_dp_matches_mc_power_law():
    dp = expected_D_at_tau(PL, POS, 20)
    mc = expected_D_at_tau(PL, POS, 20, method="mc", reps=10**5, rng=np.random.default_rng(5))
    assert abs(dp.value - mc.value) <= 3 * mc.error + 1e-8


def test_dp_states_and_bounds():
    res = dp_expected_mu(PL, POS, 10)
    assert res.truncation_error_bound <= 1e-12
    assert res.states_visited > 0 and res.cap >= 10


def test_expected_D_bad_args():
    with pytest.raises(ValueError):
        expected_D_at_tau(PL, POS, 0)
    with pytest.raises(ValueError):
        expected_D_at_tau(PL, POS, 3, method="magic")


def test_toth_lambda_zero():
    res = toth_check(PL, POS, 7, 0.0)
    assert res.rhs == 1.0 and res.lhs == pytest.approx(1.0, abs=1e-12)


def test_toth_constant_m1():
    res = toth_check(CONSTANT, POS, 1, 0.5)
    assert res.rhs == 2.0
    assert res.gap < 1e-10


@pytest.mark.parametrize("sign", [POS, NEG, ZERO])
def test_toth_grid(sign):
    for m in (1, 5, 20):
        for lam in (-0.4, -0.2, 0.2, 0.4):
            res = toth_check(PL, sign, m, lam)
            assert res.gap < 1e-8, (m, lam, res)


def test_toth_lambda_too_large():
    with pytest.raises(ValueError):
        toth_check(ONCE, NEG, 3, 2.5)


def test_toth_linear_power_law():
    for m in range(1, 21):
        res = toth_linear(PL, POS, m)
        assert res.gap < 1e-8 and res.bound < 1e-8


def test_exp_martingale_basics():
    tr = run_to_tau_blue(UrnState(PL, POS), 15, np.random.default_rng(6))
    phi = exp_martingale(tr, 0.3)
    assert phi[0] == 1.0 and phi.size == len(tr) + 1
    assert np.all(exp_martingale(tr, 0.0) == 1.0)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 50), st.integers(0, 50), st.floats(-0.45, 0.45), st.sampled_from([POS, NEG, ZERO]))
def test_phi_one_step(i, j, lam, sign):
    assert abs(phi_one_step(PL, sign, i, j, lam) - 1.0) <= 1e-14


def test_exp_martingale_mean():
    rng = np.random.default_rng(7)
    ends = [exp_martingale(run_to_tau_blue(UrnState(PL, POS), 5, rng), 0.2)[-1] for _ in range(20000)]
    ends = np.array(ends)
    assert abs(ends.mean() - 1.0) <= 4 * ends.std(ddof=1) / math.sqrt(ends.size)


def test_concentration_tail_trivial():
    rng = np.random.default_rng(8)
    tails = concentration_tail(PL, POS, 10, [0, 10**9], 200, rng)
    assert tails[0].freq == 1.0 and tails[1].freq == 0.0


def test_concentration_fit_self_consistent():
    # the log-tail is convex in m^2 / k, so the fit window sits just below the target m
    rng = np.random.default_rng(9)
    k = 100
    rows = concentration_tail(CONSTANT, POS, k, [20, 25, 30, 35], 10**5, rng)
    C, c = fit_concentration(rows)
    assert c > 0 and C > 0
    far = concentration_tail(CONSTANT, POS, k, [40], 10**5, rng)[0]
    assert far.freq < math.exp(-c * 16)
    _, c_env = fit_concentration(rows, envelope=True)
    assert c_env >= c * 0.5


def test_drift_from_urn_trivial():
    tr = run_to_tau_blue(UrnState(CONSTANT, POS), 10, np.random.default_rng(10))
    assert drift_from_urn(tr, 10) == 0.0
    tr = run_to_tau_blue(UrnState(PL, POS), 10, np.random.default_rng(10))
    assert drift_from_urn(tr, 0) == 0.0


def test_extract_urn_basics():
    tr = run(PL, 5000, 11)
    for y in (-2, 0, 3):
        u = extract_urn_from_walk(tr, y)
        assert u.blue_counts[0] == 0 and u.red_counts[0] == 0
        assert np.all(u.blue_counts + u.red_counts == np.arange(len(u) + 1))
        assert u.sign == SiteSign.of(y)


@pytest.mark.parametrize("spec", [ONCE, PL, WeightSpec.power_law(1.0, 0.3)], ids=["once", "pl05", "pl1"])
def test_pathwise_drift_identity(spec):
    rng = np.random.default_rng(12)
    checked = 0
    for _ in range(1000 // 3):
        tr = run(spec, 3000, rng)
        x = int(tr.positions[-1]) // 2
        lam = return_times(tr, x)
        m = lam.size - 1
        t = lam[m]
        lo, hi = tr.positions[: t + 1].min(), tr.positions[: t + 1].max()
        for y in range(lo, hi + 1):
            u = extract_urn_from_walk(tr, y)
            if y == x:
                # the last move out of x before lambda_{x,m} has no fixed direction
                continue
            if y > x:
                k = int(np.count_nonzero((tr.positions[:t] == y) & (tr.positions[1 : t + 1] < y)))
                via = drift_from_urn(u, k, "blue") if k else 0.0
            else:
                k = int(np.count_nonzero((tr.positions[:t] == y) & (tr.positions[1 : t + 1] > y)))
                via = drift_from_urn(u, k, "red") if k else 0.0
            assert abs(via - local_drift(tr, x, m, y)) <= 1e-10
            checked += 1
    assert checked > 1000


def test_reflection_symmetry_from_walks():
    # blues after 20 departures from +3 against reds after 20 departures from -3
    rng = np.random.default_rng(13)
    right, left = [], []
    for _ in range(10**5):
        s = run_until_return(PL, 3, 20, rng, 10**5)
        if s is not None:
            right.append(s.directed(3, -1))
        s = run_until_return(PL, -3, 20, rng, 10**5)
        if s is not None:
            left.append(s.directed(-3, 1))
    res = chi_square_two_sample(right, left)
    assert res.p_value > 0.01
