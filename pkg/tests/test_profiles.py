import math

import mpmath as mp
import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from wavemaps.profiles import (BubbleConfig, chi, cubic_overlap_integral, energy_density_static,
                               energy_Q, energy_Q_quadrature, exterior_energy_closed,
                               exterior_energy_Q, f_interaction, interaction_pairing,
                               interaction_prediction, lam_lam_q, lam_q, lam_z,
                               leading_order_energy, multi_bubble, multi_bubble_energy,
                               multi_bubble_lam, nonlinearity_f, nonlinearity_fprime,
                               norm_lam_q_sq, norm_lam_q_sq_closed, omega_sq, q_minus_pi,
                               q_profile, truncated_norm_k1_closed, ulam_lam_q,
                               z_cross_pairing, z_lam_q_pairing, z_profile)
from wavemaps.quadrature import integrate_radial

mp.mp.dps = 40


def _mp_q(k, lam, r):
    return 2 * mp.atan((mp.mpf(r) / lam) ** k)


def _richardson_ds(fn, s, h=0.02, levels=4):
    """Central difference in s with repeated Richardson extrapolation."""
    table = [(fn(s + h / 2 ** i) - fn(s - h / 2 ** i)) / (2 * h / 2 ** i) for i in range(levels)]
    for p in range(1, levels):
        f = 4.0 ** p
        table = [(f * table[i + 1] - table[i]) / (f - 1) for i in range(len(table) - 1)]
    return table[0]


# --- closed-form examples ---------------------------------------------------

def test_q_profile_examples():
    assert q_profile(1, 1.0, 1.0) == pytest.approx(math.pi / 2, abs=1e-15)
    assert q_profile(2, 3.0, 0.0) == 0.0
    assert q_profile(2, 1.0, 1e200) == pytest.approx(math.pi, abs=1e-15)
    assert q_profile(2, 1.0, math.inf) == math.pi


def test_lam_q_examples():
    assert lam_q(2, 1.0, 1.0) == pytest.approx(2.0, abs=1e-15)
    assert lam_q(1, 1.0, 0.0) == 0.0
    assert lam_q(3, 2.0, 2.0) == pytest.approx(3.0, abs=1e-15)


def test_ulam_lam_q_examples():
    assert ulam_lam_q(1, 1.0, 1.0) == pytest.approx(1.0, abs=1e-15)
    assert ulam_lam_q(1, 1.0, 0.0) == 0.0
    fd = lam_q(2, 1.0, 1.0) + _richardson_ds(lambda s: float(lam_q(2, 1.0, math.exp(s))), 0.0)
    assert ulam_lam_q(2, 1.0, 1.0) == pytest.approx(fd, abs=1e-11)


@pytest.mark.parametrize("x", [0.1, 0.5, 1.0, 3.0, 40.0])
def test_ulam_lam_q_k1_closed_form(x):
    assert ulam_lam_q(1, 1.0, x) == pytest.approx(4 * x / (1 + x * x) ** 2, rel=1e-13)
    assert ulam_lam_q(1, 2.0, 2.0 * x) == pytest.approx(4 * x / (1 + x * x) ** 2, rel=1e-13)


def test_z_profile_examples():
    assert z_profile(3, 1.0) == pytest.approx(3.0, abs=1e-15)
    assert z_profile(1, 3.0) == 0.0
    assert z_profile(2, 0.5) == lam_q(2, 1.0, 0.5)


def test_z_profile_support_and_sign():
    r = np.geomspace(1e-4, 1e3, 2000)
    for k in range(1, 7):
        z = z_profile(k, r)
        assert np.all(z >= 0)
        if k <= 2:
            assert np.all(z[r >= 2.0] == 0.0)


def test_chi_examples_and_shape():
    assert chi(0.5) == 1.0
    assert chi(2.5) == 0.0
    assert chi(1.5) == pytest.approx(0.5, abs=1e-15)
    r = np.linspace(0.0, 3.0, 3001)
    c = chi(r)
    assert np.all(np.diff(c) <= 0)
    assert np.all((c >= 0) & (c <= 1))


@pytest.mark.parametrize("n", [1, 2, 3, 4])
def test_chi_derivatives_are_continuous_and_match_fd(n):
    # C^4: every derivative up to order four vanishes at both transition ends
    for edge in (1.0, 2.0):
        assert abs(chi(edge, n)) < 1e-12
    x = np.linspace(1.05, 1.95, 19)
    h = 1e-4
    fd = (chi(x + h, n - 1) - chi(x - h, n - 1)) / (2 * h)
    assert np.allclose(chi(x, n), fd, atol=1e-5 * 10 ** n)


def test_lam_z_matches_fd():
    for k in (1, 2, 3):
        for x in (0.3, 1.2, 1.7, 3.0):
            fd = _richardson_ds(lambda s: float(z_profile(k, math.exp(s))), math.log(x), h=0.01)
            assert lam_z(k, x) == pytest.approx(fd, abs=1e-9)


def test_multi_bubble_examples():
    assert multi_bubble(BubbleConfig(2, 1, (1,), (1.0,)), 0.0) == pytest.approx(0.0, abs=1e-15)
    vac = BubbleConfig(2, 0)
    assert np.all(multi_bubble(vac, np.array([0.0, 1.0, 5.0])) == 0.0)
    cfg = BubbleConfig(2, 0, (1, -1), (0.01, 1.0))
    r = mp.mpf("0.01")
    oracle = (_mp_q(2, mp.mpf("0.01"), r) - mp.pi) - (_mp_q(2, 1, r) - mp.pi)
    assert multi_bubble(cfg, 0.01) == pytest.approx(float(oracle), abs=1e-15)


def test_multi_bubble_limits():
    cfg = BubbleConfig(3, 2, (1, -1, 1), (0.01, 0.5, 20.0))
    assert multi_bubble(cfg, 0.0) == pytest.approx((cfg.m - sum(cfg.iota)) * math.pi, abs=1e-14)
    assert multi_bubble(cfg, 1e30) == pytest.approx(cfg.m * math.pi, abs=1e-14)
    assert cfg.ell == 1


def test_multi_bubble_lam_matches_fd():
    cfg = BubbleConfig(2, 0, (1, -1), (0.1, 1.0))
    for x in (0.05, 0.3, 2.0):
        fd = _richardson_ds(lambda s: float(multi_bubble(cfg, math.exp(s))), math.log(x), h=0.01)
        assert multi_bubble_lam(cfg, x) == pytest.approx(fd, abs=1e-10)


def test_bubble_config_validation():
    with pytest.raises(ValueError):
        BubbleConfig(0, 0)
    with pytest.raises(ValueError):
        BubbleConfig(2, 0, (1,), (1.0, 2.0))
    with pytest.raises(ValueError):
        BubbleConfig(2, 0, (2,), (1.0,))
    with pytest.raises(ValueError):
        BubbleConfig(2, 0, (1, 1), (2.0, 1.0))
    with pytest.raises(ValueError):
        BubbleConfig(2, 0, (1,), (0.0,))


@pytest.mark.parametrize("fn", [q_profile, lam_q, ulam_lam_q, q_minus_pi])
def test_non_positive_scale_is_domain_error(fn):
    with pytest.raises(ValueError):
        fn(2, 0.0, 1.0)
    with pytest.raises(ValueError):
        fn(2, -1.0, 1.0)


def test_nonlinearity_examples():
    assert nonlinearity_f(0.0) == 0.0
    assert nonlinearity_f(math.pi / 4) == pytest.approx(0.5, abs=1e-16)
    assert nonlinearity_fprime(math.pi / 2) == pytest.approx(-1.0, abs=1e-16)


@given(st.floats(-50, 50))
def test_nonlinearity_period_pi(u):
    assert nonlinearity_f(u + math.pi) == pytest.approx(nonlinearity_f(u), abs=1e-13)
    assert nonlinearity_fprime(u + math.pi) == pytest.approx(nonlinearity_fprime(u), abs=1e-13)


# --- interaction --------------------------------------------------------------

def test_f_interaction_vanishes_without_pairs():
    r = np.geomspace(1e-3, 1e3, 200)
    assert np.all(f_interaction(BubbleConfig(2, 0), r) == 0.0)
    assert np.max(np.abs(f_interaction(BubbleConfig(2, 1, (1,), (0.3,)), r))) < 1e-12


def test_f_interaction_direct_formula():
    cfg = BubbleConfig(2, 0, (1, -1), (0.1, 1.0))
    r = mp.mpf("0.1")
    q1 = _mp_q(2, mp.mpf("0.1"), r) - mp.pi
    q2 = _mp_q(2, 1, r) - mp.pi
    f = lambda u: mp.sin(2 * u) / 2
    oracle = -(4 / r ** 2) * (f(q1 - q2) - f(q1) + f(q2))
    assert f_interaction(cfg, 0.1) == pytest.approx(float(oracle), rel=1e-12)
    with pytest.raises(ValueError):
        f_interaction(cfg, 0.0)


def test_f_interaction_pointwise_envelope():
    cfg = BubbleConfig(2, 0, (1, -1), (0.01, 1.0))
    r = np.geomspace(1e-4, 1e2, 500)
    env = lam_q(2, 0.01, r) * lam_q(2, 1.0, r) * (lam_q(2, 0.01, r) + lam_q(2, 1.0, r))
    assert np.all(np.abs(f_interaction(cfg, r)) * r * r <= 4 * env + 1e-300)


@pytest.mark.parametrize("k", [1, 2, 3, 4, 5])
@pytest.mark.parametrize("sign", [1, -1])
def test_cubic_overlap_integrals(k, sign):
    assert cubic_overlap_integral(k, sign).value == pytest.approx(8 * k * k, rel=1e-8)


def test_interaction_pairing_example():
    cfg = BubbleConfig(2, 0, (1, -1), (0.05, 1.0))
    res = interaction_pairing(cfg, 1)
    assert res.prediction == pytest.approx(-0.08, rel=1e-14)
    assert res.rel_deviation < 0.1
    assert res.separated
    with pytest.raises(ValueError):
        interaction_pairing(cfg, 3)


def test_interaction_prediction_two_sided():
    # middle bubble: -iota_1 8k^2 rho^k + iota_3 8k^2 rho^k with rho = 0.1
    cfg = BubbleConfig(2, 0, (1, -1, 1), (0.01, 0.1, 1.0))
    assert interaction_prediction(cfg, 2) == pytest.approx(0.0, abs=1e-15)
    cfg = BubbleConfig(2, 0, (1, 1, -1), (0.01, 0.1, 1.0))
    assert interaction_prediction(cfg, 2) == pytest.approx(-0.64, rel=1e-14)


# --- energies and norms -----------------------------------------------------------

@pytest.mark.parametrize("k", [1, 2, 3, 4, 5, 6])
def test_energy_Q(k):
    assert energy_Q_quadrature(k).value == pytest.approx(4 * math.pi * k, rel=1e-8)
    assert energy_Q(k) == 4 * math.pi * k


def test_energy_Q_examples():
    assert energy_Q(1) == pytest.approx(4 * math.pi)
    assert energy_Q(3) == pytest.approx(12 * math.pi)
    assert energy_Q(5) == pytest.approx(20 * math.pi)


@pytest.mark.parametrize("k", [1, 2, 3])
def test_exterior_energy_closed_form_and_complement(k):
    for r in np.geomspace(1e-2, 1e2, 20):
        ext = exterior_energy_Q(k, r).value
        assert ext == pytest.approx(float(exterior_energy_closed(k, r)), rel=1e-8)
        inner = integrate_radial(lambda x: energy_density_static(k, x), measure="1/r", r1=r).value
        assert ext + inner == pytest.approx(4 * math.pi * k, rel=1e-8)


def test_exterior_energy_examples():
    for k in (1, 2, 3):
        assert exterior_energy_Q(k, 0.0).value == pytest.approx(4 * math.pi * k, rel=1e-10)
    assert exterior_energy_Q(2, 1.0).value == pytest.approx(4 * math.pi, rel=1e-10)
    assert exterior_energy_closed(2, 1e200) == 0.0


def test_exterior_energy_mpmath_antiderivative():
    # independent route: integrate 8 pi k^2 r^{2k-1}/(1+r^{2k})^2 with mpmath
    for k in (1, 2, 3):
        for r in (0.3, 1.0, 2.5):
            val = mp.quad(lambda x: 8 * mp.pi * k * k * x ** (2 * k - 1) / (1 + x ** (2 * k)) ** 2,
                          [r, r + 1, mp.inf])
            assert float(exterior_energy_closed(k, r)) == pytest.approx(float(val), rel=1e-13)


def test_norm_examples():
    assert norm_lam_q_sq(2).value == pytest.approx(2 * math.pi, rel=1e-10)
    assert norm_lam_q_sq(1, 10.0).value == pytest.approx(-200 / 101 + 2 * math.log(101), rel=1e-10)
    assert norm_lam_q_sq(4).value == pytest.approx(2 * math.pi / math.sin(math.pi / 4), rel=1e-10)
    with pytest.raises(ValueError):
        norm_lam_q_sq(1)
    with pytest.raises(ValueError):
        norm_lam_q_sq_closed(1)


@pytest.mark.parametrize("R", [10.0, 1e3])
def test_truncated_norm_k1(R):
    assert norm_lam_q_sq(1, R).value == pytest.approx(truncated_norm_k1_closed(R), rel=1e-8)


@pytest.mark.parametrize("k", [2, 3, 4, 5, 6])
def test_omega_sq_routes_agree(k):
    assert omega_sq(k, "quadrature") == pytest.approx(omega_sq(k), rel=1e-8)
    assert omega_sq(k) > 0


def test_omega_sq_examples():
    assert omega_sq(2) == pytest.approx(16 / math.pi, rel=1e-15)
    assert omega_sq(4) == pytest.approx(64 * math.sin(math.pi / 4) / math.pi, rel=1e-15)
    with pytest.raises(ValueError):
        omega_sq(1)
    with pytest.raises(ValueError):
        omega_sq(2, "guess")


def test_multi_bubble_energy_examples():
    one = BubbleConfig(2, 1, (1,), (1.0,))
    assert multi_bubble_energy(one).value == pytest.approx(8 * math.pi, rel=1e-10)
    assert leading_order_energy(one) == pytest.approx(8 * math.pi, rel=1e-15)
    assert multi_bubble_energy(BubbleConfig(2, 0)).value == 0.0
    assert leading_order_energy(BubbleConfig(2, 0)) == 0.0
    two = BubbleConfig(2, 0, (1, -1), (1.0, 100.0))
    assert leading_order_energy(two) == pytest.approx(16 * math.pi - 32 * math.pi * 1e-4, rel=1e-15)
    corr = 32 * math.pi * 1e-4
    assert abs(multi_bubble_energy(two).value - leading_order_energy(two)) <= 0.1 * corr


@pytest.mark.parametrize("rho", [1e-2, 1e-3])
def test_leading_order_error_bound(rho):
    cfg = BubbleConfig(2, 0, (1, -1), (rho, 1.0))
    err = abs(multi_bubble_energy(cfg).value - leading_order_energy(cfg))
    assert err <= 0.1 * 16 * 2 * math.pi * rho ** 2


@pytest.mark.parametrize("k", [1, 2, 3, 4, 5, 6])
def test_z_lam_q_positive(k):
    assert z_lam_q_pairing(k).value > 0


@pytest.mark.parametrize("k,expected", [(2, 3.0), (3, 2.0), (4, 3.0)])
def test_cross_term_decay_slope(k, expected):
    x = np.array([1e-1, 1e-2, 1e-3])
    vals = np.array([abs(z_cross_pairing(k, xi, 1.0).value) for xi in x])
    slope = np.polyfit(np.log(x), np.log(vals), 1)[0]
    assert abs(slope - expected) <= 0.15 * expected


# --- pointwise identities -------------------------------------------------------

def test_bogomolny_identity_pointwise():
    rng = np.random.default_rng(7)
    ks = rng.integers(1, 5, 1000)
    lams = np.exp(rng.uniform(-3, 3, 1000))
    xs = np.exp(rng.uniform(-2, 2, 1000))
    worst = 0.0
    for k, lam, x in zip(ks, lams, xs):
        r = lam * x
        fd = _richardson_ds(lambda s: float(q_profile(int(k), lam, math.exp(s))), math.log(r), h=0.05 / k)
        worst = max(worst, abs(fd - k * math.sin(float(q_profile(int(k), lam, r)))))
        assert abs(float(lam_q(int(k), lam, r)) - k * math.sin(float(q_profile(int(k), lam, r)))) < 1e-14
    assert worst < 1e-12


@given(st.integers(1, 8), st.floats(1e-6, 1e6), st.floats(0.0, 1e8))
def test_scaling_covariance_exact(k, lam, r):
    assert q_profile(k, lam, r) == q_profile(k, 1.0, r / lam)


@given(st.integers(1, 6), st.floats(1e-3, 1e3), st.floats(1e-3, 1e3))
def test_q_minus_pi_consistent(k, lam, r):
    assert q_minus_pi(k, lam, r) == pytest.approx(q_profile(k, lam, r) - math.pi, abs=1e-14)


@given(st.integers(1, 6), st.floats(1e-3, 1e3), st.floats(1e-6, 1e6))
def test_lam_lam_q_is_derivative_of_lam_q(k, lam, r):
    t = k * math.log(r / lam)
    assert lam_lam_q(k, lam, r) == pytest.approx(-k * k * math.tanh(t) / math.cosh(t), abs=1e-14)


@given(st.integers(1, 6), st.floats(1e-4, 1e4))
def test_q_profile_monotone_range(k, r):
    a, b = q_profile(k, 1.0, r), q_profile(k, 1.0, r * 1.01)
    assert 0 <= a <= b <= math.pi
