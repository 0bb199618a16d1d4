import math
from functools import lru_cache

import numpy as np
import pytest
import scipy.optimize

from blochlab import cheese as C, curves as CV, series as S
from blochlab.errors import InvariantError
from blochlab.lattice import CellDescriptor, assemble_bloch_matrix, reduce_to_cell
from blochlab.params import Params
from blochlab.potential import (build_step_potential, combined_step_coeffs,
                                default_cosine_spec, zero_spec)

K = 20.0
PR = Params()
SPEC = default_cosine_spec()
CELL = CellDescriptor(step=1, a1=SPEC.d1, a2=SPEC.d2)
COEFFS, _ = combined_step_coeffs(SPEC, 1, K, PR)
W1 = build_step_potential(SPEC, 1, K, PR).l1
W2 = build_step_potential(SPEC, 2, K, PR).l1


@lru_cache(maxsize=1)
def theta1():
    return C.build_first_cheese(CELL, K, PR).theta


@lru_cache(maxsize=1)
def chain():
    """Two-step curve chain on a coarse shared grid."""
    fc = C.build_first_cheese(CELL, K, PR)
    cur1 = CV.build_iso_curve(COEFFS, CELL, K, fc.theta, step=1, w_norm=W1,
                              grid=512, boundary=False, params=PR)
    st2 = C.build_step_cheese(fc, CELL, COEFFS, K, step=2, params=PR)
    coeffs2, periods2 = combined_step_coeffs(SPEC, 2, K, PR)
    cell2 = CellDescriptor(2, periods2[0], periods2[1])
    cur2 = CV.build_iso_curve(coeffs2, cell2, K, st2.theta, step=2, base=cur1,
                              w_norm=W2, grid=512, boundary=False, params=PR)
    return cur1, cur2, cell2, coeffs2


# ------------------------------------------------------------- solve_kappa

def test_solve_kappa_v0_exact():
    z, _ = combined_step_coeffs(zero_spec(), 1, K, PR)
    for phi in (0.0, 0.7, 3.9):
        r = CV.solve_kappa(z, CELL, K, phi, w_norm=0.1, params=PR)
        assert abs(r.kappa - K) < 1e-11
        assert r.residual <= PR.lambda_tol * K * K


def test_solve_kappa_certificate_fields():
    r = CV.solve_kappa(COEFFS, CELL, K, 0.7, w_norm=W1, params=PR)
    assert r.f_lo < 0.0 < r.f_hi
    assert r.end_gap <= 1e-9
    assert r.residual <= PR.lambda_tol * K * K
    assert r.window[0] < r.kappa < r.window[1]
    assert r.kappa == pytest.approx(19.999999919446807, abs=1e-9)


def test_solve_kappa_matches_second_order_shift():
    x = K * np.array([math.cos(0.7), math.sin(0.7)])
    t, j = reduce_to_cell(CELL, x)
    bm = assemble_bloch_matrix(CELL, COEFFS, t, K, PR.cutoff(K), PR.shell_halfwidth(K))
    g2 = S.g_explicit(bm, tuple(j), 2)
    pred = math.sqrt(K * K - g2)
    r = CV.solve_kappa(COEFFS, CELL, K, 0.7, w_norm=W1, params=PR)
    assert r.kappa == pytest.approx(pred, abs=1e-10)


def test_solve_kappa_matches_anchor_tracked_oracle():
    def lam_anchor(kap):
        y = kap * np.array([math.cos(0.7), math.sin(0.7)])
        tt, jj = reduce_to_cell(CELL, y)
        b = assemble_bloch_matrix(CELL, COEFFS, tuple(tt), K, PR.cutoff(K),
                                  PR.shell_halfwidth(K))
        ev, vec = np.linalg.eigh(b.matrix)
        jpos = int(np.flatnonzero((b.indices == jj).all(axis=1))[0])
        return float(ev[int(np.argmax(np.abs(vec[jpos, :])))])

    oracle = scipy.optimize.brentq(lambda kap: lam_anchor(kap) - K * K,
                                   K - 0.02, K + 0.02, xtol=1e-13)
    r = CV.solve_kappa(COEFFS, CELL, K, 0.7, w_norm=W1, params=PR)
    assert r.kappa == pytest.approx(oracle, abs=1e-9)


def test_solve_kappa_window_violated():
    with pytest.raises(InvariantError, match="window violated"):
        CV.solve_kappa(COEFFS, CELL, K, 0.7, base=K + 1e-3, half=1e-5, params=PR)


def test_solve_kappa_needs_width():
    with pytest.raises(InvariantError, match="half or w_norm"):
        CV.solve_kappa(COEFFS, CELL, K, 0.7, params=PR)


# --------------------------------------------------------------- iso curve

def test_v0_curve_is_perfect_circle():
    z, _ = combined_step_coeffs(zero_spec(), 1, K, PR)
    theta = C.AngleSet.full_circle().subtract(np.array([1.0, 4.0]),
                                              np.array([1.4, 4.2]))
    cur = CV.build_iso_curve(z, CELL, K, theta, step=1, w_norm=0.1,
                             grid=512, params=PR)
    assert np.max(np.abs(cur.kappa - K)) < 1e-10
    assert np.max(np.abs(cur.h)) < 1e-10
    # chord sum of a circle arc undershoots only at second order in the step
    assert cur.length / cur.free_length == pytest.approx(1.0, abs=1e-4)
    # two cuts leave two physical arcs, but the one crossing phi = 0 is
    # stored as two intervals, so three labels survive
    assert cur.n_arcs == 3


def test_curve_samples_inside_theta_only():
    cur1, _, _, _ = chain()
    th = theta1()
    assert th.contains(cur1.phi).all()
    assert cur1.residual.max() <= PR.lambda_tol * K * K
    assert cur1.n_dropped == 0


def test_curve_h_small_and_window_respected():
    cur1, _, _, _ = chain()
    assert np.max(np.abs(cur1.h)) < cur1.window_half
    assert np.max(np.abs(cur1.kappa - K)) < 1e-4


def test_curve_arc_structure():
    cur1, _, _, _ = chain()
    th = theta1()
    # every sample's label maps to the theta arc containing it
    arcidx = np.searchsorted(th.starts, cur1.phi, side="right") - 1
    assert (th.starts[arcidx] <= cur1.phi).all()
    assert (cur1.phi < th.ends[arcidx]).all()
    # derivative defined only interior to arcs of >= 3 samples
    for _, sl in cur1.arc_slices():
        if len(sl) >= 3:
            assert np.isnan(cur1.dkappa[sl[0]]) and np.isnan(cur1.dkappa[sl[-1]])
            assert np.isfinite(cur1.dkappa[sl[1:-1]]).all()
        else:
            assert np.isnan(cur1.dkappa[sl]).all()


def test_curve_length_with_boundary_matches_free():
    # the spec-level length identity needs the arc ends in the sample set
    cur = CV.build_iso_curve(COEFFS, CELL, K, theta1(), step=1, w_norm=W1,
                             grid=256, boundary=True, params=PR)
    assert cur.length / cur.free_length == pytest.approx(1.0, abs=1e-3)


def test_grid_mismatch_refused():
    cur1, _, _, _ = chain()
    with pytest.raises(InvariantError, match="different grid"):
        CV.build_iso_curve(COEFFS, CELL, K, theta1(), step=2, base=cur1,
                           w_norm=W2, grid=1024, params=PR)


def test_step2_curve_cascade():
    cur1, cur2, _, _ = chain()
    assert cur2.n_dropped == 0
    assert len(cur2.phi) <= len(cur1.phi)
    h1 = np.max(np.abs(cur1.h))
    h2 = np.max(np.abs(cur2.h))
    assert h2 < 0.1 * h1     # the second layer is six orders weaker
    assert cur2.residual.max() <= PR.lambda_tol * K * K


def test_curve_diagnostics_report():
    cur1, cur2, _, _ = chain()
    rep = CV.curve_diagnostics([cur1, cur2], PR)
    assert rep.steps == [1, 2]
    assert rep.max_h[0] > rep.max_h[1]
    assert rep.cascade_ratios[0] < 0.1
    assert rep.cauchy_bound == rep.max_h[-1]
    assert len(rep.length_ratio) == 2


def test_dkappa_stable_under_grid_halving():
    # the widest surviving arcs span barely two cells of the default grid,
    # so refinement has to start far finer for interior derivative points
    th = theta1()
    widths = th.ends - th.starts
    top = np.sort(np.argsort(widths)[-20:])
    wide = C.AngleSet.from_intervals(th.starts[top], th.ends[top])
    coarse = CV.build_iso_curve(COEFFS, CELL, K, wide, step=1, w_norm=W1,
                                grid=8192, boundary=False, params=PR)
    fine = CV.build_iso_curve(COEFFS, CELL, K, wide, step=1, w_norm=W1,
                              grid=16384, boundary=False, params=PR)
    # linspace points are not bit-identical across refinement; match by
    # nearest neighbour well below any angular feature size
    pos = np.clip(np.searchsorted(fine.phi, coarse.phi), 0, len(fine.phi) - 1)
    alt = np.clip(pos - 1, 0, len(fine.phi) - 1)
    best = np.where(np.abs(fine.phi[pos] - coarse.phi)
                    <= np.abs(fine.phi[alt] - coarse.phi), pos, alt)
    both = ((np.abs(fine.phi[best] - coarse.phi) <= 1e-9)
            & np.isfinite(coarse.dkappa) & np.isfinite(fine.dkappa[best]))
    assert both.sum() > 20
    assert np.max(np.abs(coarse.dkappa[both] - fine.dkappa[best][both])) < 1e-8


# -------------------------------------------------------------------- fold

def test_fold_v0_trivially_injective():
    # at the fold scale the free circle of an integer radius collides with
    # itself, so the trivial case is a level whose diameter fits in one cell
    z, _ = combined_step_coeffs(zero_spec(), 1, K, PR)
    theta = C.AngleSet.full_circle()
    cur = CV.build_iso_curve(z, CELL, K, theta, lam=0.04, step=1, w_norm=0.1,
                             grid=512, params=PR)
    f = CV.fold_curve(cur, CELL, params=PR)
    assert f.min_separation >= f.resolution or math.isinf(f.min_separation)
    assert len(f.t) == len(cur.phi)
    assert np.all((f.t >= 0) & (f.t < np.asarray(CELL.spacing)))


def test_fold_cosine_injective_with_oracle():
    cur1, _, _, _ = chain()
    f = CV.fold_curve(cur1, CELL, coeffs=COEFFS, oracle_samples=5, params=PR)
    assert f.oracle_checked == 5
    assert f.oracle_window == pytest.approx(PR.contour_radius(1, K))


def test_fold_step2_oracle_window_widens():
    _, cur2, cell2, coeffs2 = chain()
    f = CV.fold_curve(cur2, cell2, coeffs=coeffs2, oracle_samples=5, params=PR)
    # the requested step-2 window is below the shell truncation error, so
    # the certified window is the 4x-error one
    w_l1 = float(sum(abs(v) for v in coeffs2.values()))
    err = w_l1 * w_l1 / (4.0 + 8.0 * w_l1 - 2.0 * w_l1)
    assert f.oracle_window == pytest.approx(4.0 * err, rel=1e-6)


def test_fold_detects_collision():
    # two directions whose curve points differ by exactly one dual-lattice
    # vector fold onto the same quasimomentum
    y1 = np.array([0.3, 0.4])
    y2 = y1 + np.array([1.0, 0.0])
    phi = np.array([math.atan2(*y1[::-1]), math.atan2(*y2[::-1])])
    kap = np.array([np.hypot(*y1), np.hypot(*y2)])
    fake = CV.IsoCurve(step=1, k=K, lam=K * K, grid=512, phi=phi, kappa=kap,
                       h=np.zeros(2), dkappa=np.full(2, np.nan),
                       residual=np.zeros(2), arc_id=np.array([0, 1]),
                       theta=C.AngleSet.full_circle(), window_half=0.02,
                       length=0.0, free_length=1.0, n_dropped=0)
    with pytest.raises(InvariantError, match="self-intersection"):
        CV.fold_curve(fake, CELL, params=PR)


def test_fold_oracle_rejects_displaced_level():
    import dataclasses
    cur1, _, _, _ = chain()
    off = dataclasses.replace(cur1, lam=K * K + 5.0)
    with pytest.raises(InvariantError, match="no eigenvalue near the level"):
        CV.fold_curve(off, CELL, coeffs=COEFFS, oracle_samples=3, params=PR)


def test_fold_rows_schema():
    cur1, _, _, _ = chain()
    f = CV.fold_curve(cur1, CELL, params=PR)
    row = next(iter(f.to_rows()))
    assert set(row) == {"t1", "t2", "phi"}
