import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from wavemaps.fields import (FieldState, LinearizedOperator, RadialGrid, apply_linearized, energy,
                             exterior_energy_function, fd_weights, jia_kenig_functional,
                             load_snapshot, norm_e_sq, norm_h_sq, norm_l2_sq, pairing,
                             plateau_detect, quadratic_form, rescale_h, rescale_l2, save_snapshot)
from wavemaps.modulation import z_scaled
from wavemaps.profiles import (BubbleConfig, exterior_energy_closed, lam_q, lam_lam_q,
                               multi_bubble, multi_bubble_lam, norm_lam_q_sq, q_minus_pi,
                               q_profile, z_profile)
from wavemaps.quadrature import integrate_radial


def bubble(grid, k=2, lam=1.0, m=1):
    return FieldState.from_config(grid, BubbleConfig(k, m, (1,), (lam,)))


# --- grid -------------------------------------------------------------------------

def test_grid_validation():
    with pytest.raises(ValueError):
        RadialGrid(np.array([1.0, 2.0, 3.0]))
    with pytest.raises(ValueError):
        RadialGrid(np.linspace(1.0, 2.0, 20))
    with pytest.raises(ValueError):
        RadialGrid.geometric(2.0, 1.0, 0.1)
    with pytest.raises(ValueError):
        RadialGrid.geometric(1.0, 2.0)


def test_grid_weights_positive_and_second_order():
    errs = []
    for h in (0.04, 0.02):
        g = RadialGrid.geometric(0.1, 10.0, h)
        assert np.all(g.weights > 0)
        exact = 0.5 * (g.r_max ** 2 - g.r_min ** 2)
        errs.append(abs(g.weights.sum() - exact) / exact)
    assert errs[0] < 1e-3
    assert 3.5 < errs[0] / errs[1] < 4.5


def test_fd_weights_reproduce_polynomials():
    w = fd_weights(np.arange(-4, 5), 1)
    x = np.arange(-4, 5, dtype=float)
    for p in range(9):
        assert w @ x ** p == pytest.approx(p * 0.0 ** (p - 1) if p else 0.0, abs=1e-10)


def test_d_ds_eighth_order(grid_medium):
    f = np.sin(grid_medium.s / 3)
    assert np.max(np.abs(grid_medium.d_ds(f) - np.cos(grid_medium.s / 3) / 3)) < 1e-12


# --- energy and norms -------------------------------------------------------------

@pytest.mark.parametrize("k", [1, 2, 3])
@pytest.mark.parametrize("lam", [0.1, 1.0, 10.0])
def test_energy_of_bubble(grid_fine, k, lam):
    assert energy(bubble(grid_fine, k, lam)) == pytest.approx(4 * math.pi * k, rel=1e-8)


def test_energy_examples(grid_fine):
    assert abs(energy(FieldState.vacuum(grid_fine, 2, 3))) < 1e-20
    q = bubble(grid_fine)
    assert energy(q, 1.0) == pytest.approx(4 * math.pi, rel=1e-8)
    with pytest.raises(ValueError):
        energy(q, 2.0, 1.0)


def test_exterior_energy_function_matches_closed_form(grid_fine):
    ext = exterior_energy_function(bubble(grid_fine, 2))
    for r in np.geomspace(1e-3, 1e3, 13):
        assert ext(r) == pytest.approx(float(exterior_energy_closed(2, r)), rel=1e-7, abs=1e-12)


def test_energy_additivity(grid_medium):
    rng = np.random.default_rng(3)
    cfg = BubbleConfig(2, 0, (1, -1), (0.1, 1.0))
    f = FieldState.from_config(grid_medium, cfg, 0.1 * np.exp(-np.log(grid_medium.nodes) ** 2))
    for _ in range(50):
        a, b, c = np.sort(np.exp(rng.uniform(-9, 9, 3)))
        total = energy(f, a, c)
        assert energy(f, a, b) + energy(f, b, c) == pytest.approx(total, rel=1e-12, abs=1e-15)


def test_norm_examples(grid_fine):
    zero = FieldState(grid_fine, np.zeros(grid_fine.n), np.zeros(grid_fine.n), 2)
    assert norm_e_sq(zero) == 0.0
    # (Q - pi, 0) is finite away from the origin; compare on [1, inf) with quadrature
    pair = FieldState(grid_fine, q_minus_pi(2, 1.0, grid_fine.nodes), np.zeros(grid_fine.n), 2)
    oracle = integrate_radial(lambda r: lam_q(2, 1.0, r) ** 2 + 4 * q_minus_pi(2, 1.0, r) ** 2,
                              measure="1/r", r0=1.0).value
    assert norm_e_sq(pair, 1.0) == pytest.approx(oracle, rel=1e-8)


def test_norm_h_of_lam_q(grid_fine):
    g = lam_q(2, 1.0, grid_fine.nodes)
    oracle = integrate_radial(lambda r: lam_lam_q(2, 1.0, r) ** 2 + 4 * lam_q(2, 1.0, r) ** 2,
                              measure="1/r").value
    assert norm_h_sq(grid_fine, g, 2) == pytest.approx(oracle, rel=1e-9)


@pytest.mark.parametrize("lam", [0.01, 0.37, 1.0, 25.0])
def test_rescale_h_preserves_norm_and_energy(grid_medium, lam):
    rng = np.random.default_rng(11)
    s = grid_medium.s
    pair = FieldState(grid_medium, np.exp(-(s - 1) ** 2) * rng.normal(),
                      np.exp(-(s + 1) ** 2) / grid_medium.nodes, 2)
    assert norm_e_sq(rescale_h(pair, lam)) == pytest.approx(norm_e_sq(pair), rel=1e-12)
    f = bubble(grid_medium, 2, 1.0)
    f = f.replace(u_dot=np.exp(-s ** 2))
    assert energy(rescale_h(f, lam)) == pytest.approx(energy(f), rel=1e-10)


def test_rescale_identity_and_errors(grid_medium):
    f = bubble(grid_medium)
    same = rescale_h(f, 1.0)
    assert np.array_equal(same.grid.nodes, f.grid.nodes) and np.array_equal(same.u, f.u)
    with pytest.raises(ValueError):
        rescale_h(f, 0.0)
    with pytest.raises(ValueError):
        rescale_l2(grid_medium, f.u, -1.0)


def test_rescale_l2_preserves_l2(grid_medium):
    f = np.exp(-grid_medium.s ** 2)
    for lam in (0.01, 3.0, 100.0):
        g2, f2 = rescale_l2(grid_medium, f, lam)
        assert norm_l2_sq(g2, f2) == pytest.approx(norm_l2_sq(grid_medium, f), rel=1e-12)


# --- pairing ----------------------------------------------------------------------

def test_pairing_examples(grid_fine):
    r = grid_fine.nodes
    assert pairing(lam_q(2, 1.0, r), np.zeros_like(r), grid_fine) == 0.0
    got = pairing(lam_q(2, 1.0, r), lam_q(2, 1.0, r), grid_fine)
    # the grid stops at 1e4, which drops 8/r_max^2 of the full value 2 pi
    assert got == pytest.approx(2 * math.pi, rel=1e-7)
    truncated = integrate_radial(lambda x: lam_q(2, 1.0, x) ** 2, measure="r",
                                 r0=grid_fine.r_min, r1=grid_fine.r_max).value
    assert got == pytest.approx(truncated, rel=1e-10)
    assert pairing(z_profile(1, r), lam_q(1, 1.0, r), grid_fine) > 0
    with pytest.raises(ValueError):
        pairing(r[:-1], r[:-1], grid_fine)


@given(st.lists(st.floats(-10, 10), min_size=3, max_size=3))
def test_pairing_symmetric_bilinear(coef):
    grid = RadialGrid.geometric(0.01, 100.0, 0.1)
    s = grid.s
    f, g, h = np.exp(-s ** 2), np.sin(s) * np.exp(-s ** 2 / 4), np.cos(2 * s) / (1 + s ** 2)
    a, b, _ = coef
    assert pairing(f, g, grid) == pairing(g, f, grid)
    lhs = pairing(a * f + b * h, g, grid)
    rhs = a * pairing(f, g, grid) + b * pairing(h, g, grid)
    assert lhs == pytest.approx(rhs, rel=1e-12, abs=1e-12)


# --- linearized operator ----------------------------------------------------------

def test_vacuum_operator_on_zero(grid_medium):
    assert np.all(apply_linearized(LinearizedOperator(2), grid_medium, np.zeros(grid_medium.n)) == 0.0)
    with pytest.raises(ValueError):
        apply_linearized(LinearizedOperator(2), grid_medium, np.zeros(3))


@pytest.mark.parametrize("k", [1, 2, 3])
def test_kernel_residual_second_order(k):
    res = []
    for h in (0.04, 0.02, 0.01):
        g = RadialGrid.geometric(1e-3, 1e3, h)
        out = apply_linearized(LinearizedOperator(k, 1.0), g, lam_q(k, 1.0, g.nodes))
        mask = (g.nodes >= 0.01) & (g.nodes <= 100)
        res.append(np.max(np.abs(out[mask])))
    assert 3.5 <= res[0] / res[1] <= 4.5
    assert 3.5 <= res[1] / res[2] <= 4.5


def test_operator_backgrounds_agree(grid_medium):
    r = grid_medium.nodes
    a = LinearizedOperator(2, 0.5).potential(r)
    b = LinearizedOperator(2, BubbleConfig(2, 1, (1,), (0.5,))).potential(r)
    assert np.allclose(a, b, rtol=1e-14)
    assert np.allclose(LinearizedOperator(2).potential(r), 4 / r ** 2)


def test_quadratic_form_positive_after_orthogonalization(grid_fine):
    cfg = BubbleConfig(2, 0, (1, 1), (1.0, 100.0))
    op = LinearizedOperator(2, cfg)
    r = grid_fine.nodes
    # truncated Lambda Q_1 with its Z components removed
    g = lam_q(2, 1.0, r) * np.exp(-(r / 50) ** 2)
    zs = np.array([z_scaled(2, x, r) for x in cfg.lam])
    gram = zs @ (grid_fine.weights[:, None] * zs.T)
    g = g - np.linalg.solve(gram, zs @ (grid_fine.weights * g)) @ zs
    assert quadratic_form(op, grid_fine, g) > 0


def test_coercivity_probe_random_smooth(grid_fine):
    cfg = BubbleConfig(2, 0, (1, 1), (1.0, 100.0))
    op = LinearizedOperator(2, cfg)
    r, s = grid_fine.nodes, grid_fine.s
    zs = np.array([z_scaled(2, x, r) for x in cfg.lam])
    gram = zs @ (grid_fine.weights[:, None] * zs.T)
    rng = np.random.default_rng(2024)
    window = np.where(np.abs(s) < math.log(100), np.exp(-1 / np.maximum(math.log(100) ** 2 - s ** 2, 1e-300)), 0.0)
    worst = math.inf
    for _ in range(100):
        centres = rng.uniform(-4, 4, 4)
        amps = rng.normal(size=4)
        widths = rng.uniform(0.3, 1.5, 4)
        g = window * sum(a * np.exp(-((s - c) / w) ** 2) for a, c, w in zip(amps, centres, widths))
        g = g - np.linalg.solve(gram, zs @ (grid_fine.weights * g)) @ zs
        worst = min(worst, quadratic_form(op, grid_fine, g) / norm_h_sq(grid_fine, g, 2))
    assert worst > 0


# --- plateau ----------------------------------------------------------------------

def test_plateau_examples(grid_fine):
    two_pi = FieldState.vacuum(grid_fine, 2, 2)
    assert plateau_detect(two_pi, 1.0, 10.0) == (2, 0.0)
    q = bubble(grid_fine, 2)
    l0, dev = plateau_detect(q, 100.0, 1000.0)
    assert l0 == 1
    mask = (grid_fine.nodes >= 100) & (grid_fine.nodes <= 1000)
    assert dev == pytest.approx(abs(float(q_profile(2, 1.0, grid_fine.nodes[mask][0])) - math.pi), rel=1e-12)
    l0, dev = plateau_detect(q, 1e-3, 1e-2)
    assert l0 == 0
    mask = (grid_fine.nodes >= 1e-3) & (grid_fine.nodes <= 1e-2)
    assert dev == pytest.approx(float(q_profile(2, 1.0, grid_fine.nodes[mask][-1])), rel=1e-12)


def test_plateau_errors(grid_fine):
    q = bubble(grid_fine)
    with pytest.raises(ValueError):
        plateau_detect(q, 1.0, 1.5)
    with pytest.raises(ValueError):
        plateau_detect(q, 1e6, 1e7)
    with pytest.raises(ValueError):
        plateau_detect(q, 0.0, 1.0)


# --- Jia-Kenig ----------------------------------------------------------------------

def _jk_grid(k):
    return RadialGrid.geometric(1e-4, 1e4, min(0.02, 0.05 / k))


@pytest.mark.parametrize("k", [1, 2, 3])
@pytest.mark.parametrize("lam", [0.1, 1.0, 10.0])
def test_jia_kenig_vanishes_at_bubble(k, lam):
    assert abs(jia_kenig_functional(bubble(_jk_grid(k), k, lam))) < 1e-8


def test_jia_kenig_constant_and_two_bubble(grid_fine):
    assert abs(jia_kenig_functional(FieldState.vacuum(grid_fine, 2, 1))) < 1e-20
    cfg = BubbleConfig(2, 0, (1, -1), (0.1, 1.0))

    def dens(r):
        u = multi_bubble(cfg, r)
        return 0.5 * 4 * np.sin(2 * u) ** 2 + 2 * multi_bubble_lam(cfg, r) ** 2 * np.cos(2 * u)

    oracle = integrate_radial(dens, measure="1/r", scales=cfg.lam).value
    got = jia_kenig_functional(FieldState.from_config(grid_fine, cfg))
    assert got == pytest.approx(oracle, rel=1e-8, abs=1e-8)


def test_jia_kenig_cutoff(grid_fine):
    q = bubble(grid_fine, 2)
    assert jia_kenig_functional(q, 1e3) == pytest.approx(jia_kenig_functional(q), abs=1e-8)
    with pytest.raises(ValueError):
        jia_kenig_functional(q, 0.0)


# --- snapshots ----------------------------------------------------------------------

@pytest.mark.parametrize("suffix", [".csv", ".json"])
def test_snapshot_round_trip_bit_exact(tmp_path, suffix):
    grid = RadialGrid.geometric(1e-3, 1e3, 0.05)
    rng = np.random.default_rng(5)
    f = FieldState(grid, rng.normal(size=grid.n) * 1e-7 + multi_bubble(BubbleConfig(3, 1, (1,), (0.3,)), grid.nodes),
                   rng.normal(size=grid.n), 3, (0, 1), {"note": "x"})
    path = save_snapshot(f, tmp_path / f"snap{suffix}", t=0.125)
    g, head = load_snapshot(path)
    assert np.array_equal(g.grid.nodes, f.grid.nodes)
    assert np.array_equal(g.u, f.u) and np.array_equal(g.u_dot, f.u_dot)
    assert g.k == 3 and g.sector == (0, 1) and g.meta == {"note": "x"}
    assert head["t"] == 0.125


def test_snapshot_rejects_foreign_files(tmp_path):
    p = tmp_path / "x.json"
    p.write_text('{"format": "other", "version": 1}')
    with pytest.raises(ValueError):
        load_snapshot(p)
    p.write_text('{"format": "wavemaps-snapshot", "version": 99}')
    with pytest.raises(ValueError):
        load_snapshot(p)


def test_field_state_validation(grid_medium):
    with pytest.raises(ValueError):
        FieldState(grid_medium, np.zeros(3), np.zeros(3), 2)
    bad = np.zeros(grid_medium.n)
    bad[3] = np.nan
    with pytest.raises(ValueError):
        FieldState(grid_medium, bad, np.zeros(grid_medium.n), 2)
    q = bubble(grid_medium)
    assert q.check_sector()
    assert q.ell == 0 and q.m == 1
    assert norm_lam_q_sq(2).value > 0
