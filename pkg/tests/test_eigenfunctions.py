import math
from dataclasses import replace
from functools import lru_cache

import numpy as np
import pytest

from blochlab import cheese as C, eigenfunctions as E
from blochlab.errors import InvariantError
from blochlab.lattice import CellDescriptor, dual_vector, reduce_to_cell
from blochlab.params import Params
from blochlab.potential import (PotentialSpec, build_step_potential,
                                combined_step_coeffs, default_cosine_spec,
                                zero_spec)

K = 20.0
PR = Params()
SPEC = default_cosine_spec()
CELL = CellDescriptor(step=1, a1=SPEC.d1, a2=SPEC.d2)
COEFFS, _ = combined_step_coeffs(SPEC, 1, K, PR)
ZERO, _ = combined_step_coeffs(zero_spec(), 1, K, PR)
W2 = build_step_potential(SPEC, 2, K, PR).l1
WIN1 = PR.contour_radius(1, K)


@lru_cache(maxsize=1)
def cell2():
    _, periods2 = combined_step_coeffs(SPEC, 2, K, PR)
    return CellDescriptor(2, periods2[0], periods2[1])


def point(phi, k=K, cell=CELL):
    y = k * np.array([math.cos(phi), math.sin(phi)])
    t, j = reduce_to_cell(cell, y)
    return tuple(t), (int(j[0]), int(j[1]))


@lru_cache(maxsize=1)
def fn1():
    t, _ = point(0.7)
    return E.bloch_eigenfunction(COEFFS, CELL, K, t, K * K, WIN1, params=PR)


@lru_cache(maxsize=1)
def fn1_series():
    t, _ = point(0.7)
    return E.bloch_eigenfunction(COEFFS, CELL, K, t, K * K, WIN1,
                                 route="series", params=PR)


@lru_cache(maxsize=1)
def fn2():
    coeffs2, _ = combined_step_coeffs(SPEC, 2, K, PR)
    t2, _ = point(0.7, cell=cell2())
    return E.bloch_eigenfunction(coeffs2, cell2(), K, t2, fn1().lam, 8.6e-3,
                                 params=PR)


# ------------------------------------------------------------ construction

def test_v0_single_coefficient():
    fn = E.bloch_eigenfunction(ZERO, CELL, K, (0.3, 0.4), 402.65, 0.25,
                               params=PR)
    assert fn.anchor == (4, -20)
    assert fn.lam == pytest.approx(402.65, abs=1e-12)
    assert fn.residual == 0.0
    assert fn.norm() == pytest.approx(1.0, abs=1e-14)
    c = fn.coeff.copy()
    c[fn.anchor_pos()] -= 1.0
    assert np.max(np.abs(c)) == 0.0
    assert np.allclose(fn.kappa_vec, [4.3, -19.6])


def test_not_simple_two_eigenvalues():
    # the free energies of (5, -20) and (20, 0) coincide exactly here
    with pytest.raises(InvariantError, match="not simple here: 2"):
        E.bloch_eigenfunction(ZERO, CELL, K, (0.3, 0.4), 412.25, 1e-3,
                              params=PR)


def test_not_simple_empty_window():
    with pytest.raises(InvariantError, match="not simple here: 0"):
        E.bloch_eigenfunction(COEFFS, CELL, K, (0.3, 0.4), 402.95, 0.01,
                              params=PR)


def test_bad_arguments_refused():
    with pytest.raises(InvariantError, match="route"):
        E.bloch_eigenfunction(COEFFS, CELL, K, (0.3, 0.4), 402.65, 0.25,
                              route="guess", params=PR)
    with pytest.raises(InvariantError, match="window"):
        E.bloch_eigenfunction(COEFFS, CELL, K, (0.3, 0.4), 402.65, -1.0,
                              params=PR)


def test_oracle_eigenvalue_frozen():
    # matches the curve solver's second-order shift at the same direction
    assert fn1().lam == pytest.approx(400.00000322223093, abs=1e-8)
    assert fn1().route == "oracle"
    assert fn1().overlap is None
    assert fn1().n_matrix == len(fn1().modes)


def test_routes_agree():
    fo, fs = fn1(), fn1_series()
    assert fs.overlap is not None and fs.overlap >= 0.999
    assert abs(fo.lam - fs.lam) < 1e-9
    assert fs.anchor == fo.anchor == (15, 12)
    assert len(fs.modes) < len(fo.modes)
    assert fs.residual <= 1e-8 * fs.lam


def test_phase_convention():
    for fn in (fn1(), fn1_series()):
        lead = fn.coeff[fn.anchor_pos()]
        assert lead.real > 0
        assert abs(lead.imag) < 1e-12
        assert fn.phase == E.PHASE_ANCHOR
        assert fn.norm() == pytest.approx(1.0, abs=1e-10)


def test_random_directions_keep_invariants(rng):
    theta = C.build_first_cheese(CELL, K, PR).theta
    for phi in theta.sample(5, rng):
        t, _ = point(float(phi))
        fn = E.bloch_eigenfunction(COEFFS, CELL, K, t, K * K, WIN1, params=PR)
        assert fn.norm() == pytest.approx(1.0, abs=1e-10)
        assert fn.coeff[fn.anchor_pos()].real > 0
        assert fn.residual <= 1e-8 * max(1.0, fn.lam)


def test_series_rejects_captured_pair():
    # direction where |K nu + (1,0)|^2 = K^2: the contour holds both free
    # energies, so the projector series is invalid although the coupling
    # splits the eigenvalues far enough apart to track one
    t, _ = point(math.acos(-0.025))
    with pytest.raises(InvariantError, match="projector contour holds 2"):
        E.bloch_eigenfunction(COEFFS, CELL, K, t, 400.0247, 0.02,
                              route="series", params=PR)


def test_route_overlap_guard():
    t, _ = point(0.7)
    strict = replace(PR, route_overlap=1.1)
    with pytest.raises(InvariantError, match="series-oracle mismatch"):
        E.bloch_eigenfunction(COEFFS, CELL, K, t, K * K, WIN1,
                              route="series", params=strict)


def test_coefficient_rows_schema():
    rows = list(fn1_series().to_rows())
    assert len(rows) == len(fn1_series().modes)
    assert set(rows[0]) == {"m1", "m2", "re_c", "im_c"}
    table = fn1_series().table()
    assert table[(15, 12)].real > 0.99


# ------------------------------------------------------------- correction

def test_v0_correction_identically_zero():
    fn = E.bloch_eigenfunction(ZERO, CELL, K, (0.3, 0.4), 402.65, 0.25,
                               params=PR)
    cr = E.plane_wave_correction(fn)
    assert cr.l1_bound == 0.0
    assert cr.grid_max == 0.0
    assert cr.decay_ratio is None


def test_correction_record_cosine():
    cr = E.plane_wave_correction(fn1())
    assert cr.l1_bound == pytest.approx(3.585754203102415e-3, rel=1e-6)
    assert 0.0 < cr.grid_max <= cr.l1_bound
    assert cr.grid_max > 0.9 * cr.l1_bound
    assert cr.decay_ratio is not None and cr.decay_ratio < 0.15
    # carrier entry is reduced by one, so ring zero carries almost nothing
    assert cr.ring_radius[0] == 0
    assert cr.ring_max[0] < 1e-4


def test_correction_l1_halves_as_k_doubles():
    t4, _ = point(0.7, k=40.0)
    f40 = E.bloch_eigenfunction(COEFFS, CELL, 40.0, t4, 1600.0,
                                PR.contour_radius(1, 40.0), params=PR)
    assert f40.n_matrix > PR.eig_dense_limit   # shift-invert path
    r = E.plane_wave_correction(f40).l1_bound / E.plane_wave_correction(fn1()).l1_bound
    assert 0.4 < r < 0.6


# ------------------------------------------------------------ step deltas

def test_reindex_roundtrip():
    t1, _ = point(0.7)
    t2, _ = point(0.7, cell=cell2())
    mapped = E.extend_modes(CELL, t1, cell2(), t2, fn1().modes)
    # refinement factor two plus the integer fold of the quasimomentum
    j0 = np.rint((np.asarray(t1) - np.asarray(t2)) / np.asarray(cell2().spacing))
    assert np.array_equal(mapped, 2 * fn1().modes + j0.astype(int))
    back = dual_vector(cell2(), mapped, np.asarray(t2))
    orig = dual_vector(CELL, fn1().modes, np.asarray(t1))
    assert np.max(np.abs(back - orig)) < 1e-12


def test_reindex_failure_reported():
    t1, _ = point(0.7)
    t2, _ = point(0.7, cell=cell2())
    bad = (t2[0] + 1e-3, t2[1])
    with pytest.raises(InvariantError, match="re-index failure at mode"):
        E.extend_modes(CELL, t1, cell2(), bad, fn1().modes)


def test_step_delta_bounded():
    d = E.step_delta(fn1(), fn2(), w_norm=W2, params=PR)
    assert d.steps == (1, 2)
    assert 1e-10 < d.l2 < 1e-7
    assert d.l2 <= d.l1
    assert d.lam_delta <= d.lam_bound == PR.step_delta_c * W2
    assert d.overlap > 0.999999
    assert abs(d.align_angle) < 1e-9
    assert set(d.to_dict()) == {"step_from", "step_to", "l2", "l1",
                                "lam_delta", "lam_bound", "overlap",
                                "align_angle"}


def test_zero_increment_zero_deltas():
    spec_z = PotentialSpec(SPEC.d1, SPEC.d2, SPEC.r0, SPEC.eta,
                           scales=(SPEC.scale(1),))
    coeffs2z, _ = combined_step_coeffs(spec_z, 2, K, PR)
    assert build_step_potential(spec_z, 2, K, PR).l1 == 0.0
    t2, _ = point(0.7, cell=cell2())
    fz = E.bloch_eigenfunction(coeffs2z, cell2(), K, t2, fn1().lam, 8.6e-3,
                               params=PR)
    d = E.step_delta(fn1(), fz, w_norm=0.0, params=PR)
    assert d.l2 <= 1e-10
    assert d.l1 <= 1e-10
    assert d.lam_delta <= 1e-10


def test_step_order_enforced():
    with pytest.raises(InvariantError, match="step order"):
        E.step_delta(fn2(), fn1(), w_norm=W2, params=PR)


# ------------------------------------------------------- real-space residual

def test_residual_v0_matches_symbol_exactly():
    fn = E.bloch_eigenfunction(ZERO, CELL, K, (0.3, 0.4), 402.65, 0.25,
                               params=PR)
    rr = E.residual_check(fn, params=PR)
    assert rr.residual == pytest.approx(rr.floor, rel=1e-12)
    assert abs(rr.excess) < 1e-10
    assert rr.points_per_wave >= E.MIN_POINTS_PER_WAVE


def test_residual_cosine_below_budget():
    rr = E.residual_check(fn1(), params=PR)
    assert abs(rr.excess) <= 1e-6 * rr.lam
    assert rr.points_per_wave >= E.MIN_POINTS_PER_WAVE
    assert rr.n_modes == len(fn1().modes)


def test_residual_order_of_accuracy():
    r1 = E.residual_check(fn1(), params=PR)
    r2 = E.residual_check(fn1(), grid=2 * r1.grid[0], params=PR)
    assert r1.floor / r2.floor == pytest.approx(4.0, abs=0.3)
    assert r1.residual / r2.residual == pytest.approx(4.0, abs=0.3)
    assert abs(r2.excess) < 1e-10


def test_residual_step2_below_budget():
    rr = E.residual_check(fn2(), params=PR)
    assert abs(rr.excess) <= 1e-6 * rr.lam
    assert fn2().n_matrix > PR.eig_dense_limit   # sparse-tracked vector


def test_residual_underresolved_refused():
    with pytest.raises(InvariantError, match="under-resolved"):
        E.residual_check(fn1(), grid=32, params=PR)


def test_residual_report_dict():
    d = E.residual_check(fn1(), params=PR).to_dict()
    assert set(d) == {"grid", "h", "residual", "floor", "excess", "lam",
                      "points_per_wave", "n_modes"}
