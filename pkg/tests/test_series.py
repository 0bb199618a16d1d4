import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from blochlab.errors import InvariantError, NumericAbort, ValidationError
from blochlab.lattice import CellDescriptor, assemble_bloch_matrix, oracle_spectrum, reduce_to_cell
from blochlab.params import Params
from blochlab.potential import combined_step_coeffs, default_cosine_spec
from blochlab import series as S

K = 20.0
PR = Params()
SPEC = default_cosine_spec()
CELL = CellDescriptor(step=1, a1=SPEC.d1, a2=SPEC.d2)
COEFFS, _ = combined_step_coeffs(SPEC, 1, K, PR)


def at_angle(phi, kappa=K, coeffs=COEFFS):
    x = kappa * np.array([math.cos(phi), math.sin(phi)])
    t, j = reduce_to_cell(CELL, x)
    bm = assemble_bloch_matrix(CELL, coeffs, t, K, PR.cutoff(K), PR.shell_halfwidth(K))
    return bm, tuple(j)


def test_contour_validation():
    with pytest.raises(ValidationError):
        S.Contour(center=400.0, radius=0.0)
    with pytest.raises(ValidationError):
        S.Contour(center=400.0, radius=0.1, nodes=50)
    c = S.Contour(center=400.0, radius=0.1, nodes=64)
    z = c.points()
    assert len(z) == 64
    assert np.allclose(np.abs(z - 400.0), 0.1)
    assert np.all(z.imag != 0.0)  # half-step offset dodges the real axis


def test_g1_vanishes_exactly():
    bm, j = at_angle(0.7)
    assert S.g_explicit(bm, j, 1) == 0.0
    assert S.g_numeric(bm, j, 1) == 0.0


def test_g2_two_forms_agree():
    bm, j = at_angle(0.7)
    a = S.g_explicit(bm, j, 2, form=1)
    b = S.g_explicit(bm, j, 2, form=2)
    assert a == pytest.approx(b, rel=1e-12)
    assert a > 0.0


def test_g3_kills_disconnected_support():
    # four-mode cosine: q1 - q2 is never again a mode, so order 3 vanishes
    bm, j = at_angle(0.7)
    assert S.g_explicit(bm, j, 3) == 0.0
    assert abs(S.g_numeric(bm, j, 3)) < 1e-15


def test_numeric_matches_explicit():
    bm, j = at_angle(1.1)
    for r in (1, 2, 3):
        assert S.g_numeric(bm, j, r) == pytest.approx(S.g_explicit(bm, j, r), abs=1e-9)


def test_resonant_index_refused():
    bm = assemble_bloch_matrix(CELL, COEFFS, (0.5, 0.0), K, PR.cutoff(K),
                               PR.shell_halfwidth(K))
    # p_(-1,0)(t) = (-1/2, 0) mirrors p_(0,0)(t) = (1/2, 0) at t1 = 1/2
    j = (-1, 0)
    with pytest.raises(InvariantError, match="resonant"):
        S.g_explicit(bm, j, 2)


def test_node_on_pole_refused():
    plan = S.build_patch_plan(COEFFS, hops=2)
    diag = np.full(plan.n, 500.0)
    c = S.Contour(center=400.0, radius=0.1)
    diag = diag.astype(complex)
    diag[5] = c.points()[3]  # a complex-shifted energy exactly on a node
    with pytest.raises(NumericAbort, match="pole"):
        S.series_terms(diag, plan, 400.0, 0.1, 2, nodes=64)


def test_unresolved_pole_on_contour():
    plan = S.build_patch_plan(COEFFS, hops=2)
    diag = np.full(plan.n, 500.0)
    diag[plan.jpos] = 400.0
    diag[5] = 400.1  # exactly on the contour circle
    with pytest.raises(NumericAbort, match="unresolved"):
        S.series_terms(diag, plan, 400.0, 0.1, 2, nodes=64, max_nodes=512)


def test_quadrature_node_doubling_stable():
    bm, j = at_angle(0.9)
    c = S.Contour(center=K * K, radius=PR.contour_radius(1, K), nodes=64)
    c2 = S.Contour(center=K * K, radius=PR.contour_radius(1, K), nodes=128)
    g64 = S.g_numeric(bm, j, 2, contour=c)
    g128 = S.g_numeric(bm, j, 2, contour=c2)
    assert abs(g64 - g128) < 1e-10


def test_series_vs_oracle():
    bm, j = at_angle(0.7)
    res = S.eigenvalue_series(bm, j, alpha=1.0)
    assert res.accepted
    assert res.oracle_count == 1
    assert res.discrepancy <= max(res.tail_bound, 1e-8 * K * K)
    assert res.terms[1] == 0.0
    assert res.partial_sums()[-1] == pytest.approx(res.value)


def test_series_alpha_zero_is_free_energy():
    bm, j = at_angle(0.7)
    res = S.eigenvalue_series(bm, j, alpha=0.0)
    p2 = np.sum(S.dual_vector(CELL, np.array(j), np.asarray(bm.t)) ** 2)
    assert res.value == pytest.approx(float(p2), abs=1e-12)


def test_outside_perturbative_regime_refused():
    strong = {q: 80.0 * v for q, v in COEFFS.items()}
    bm, j = at_angle(0.7, coeffs=strong)
    with pytest.raises(NumericAbort, match="perturbative"):
        S.eigenvalue_series(bm, j, alpha=1.0)


@given(st.floats(0.02, 0.12))
@settings(max_examples=12, deadline=None)
def test_even_order_domination(alpha):
    bm, j = at_angle(0.7)
    lp = S.eigenvalue_series(bm, j, alpha=alpha).value
    lm = S.eigenvalue_series(bm, j, alpha=-alpha).value
    l0 = S.eigenvalue_series(bm, j, alpha=0.0).value
    g2 = S.g_explicit(bm, j, 2)
    assert abs(lp + lm - 2 * l0 - 2 * alpha ** 2 * g2) <= 1.0 * alpha ** 3


def test_projector_invariants():
    bm, j = at_angle(0.7)
    res = S.projector_series(bm, j, alpha=1.0, r_max=4)
    assert 0.5 < res.trace.real < 1.5
    assert abs(res.trace - 1.0) < 1e-8
    assert res.oracle_distance is not None
    wnorm = sum(abs(v) for v in COEFFS.values())
    assert res.oracle_distance <= 4.0 * wnorm / PR.contour_radius(1, K)


def test_projector_band_support():
    bm, j = at_angle(0.7)
    res = S.projector_series(bm, j, alpha=1.0, r_max=3)
    sp = CELL.spacing
    off = res.offsets
    d = np.sqrt(((off[:, None, 0] - off[None, :, 0]) * sp[0]) ** 2
                + ((off[:, None, 1] - off[None, :, 1]) * sp[1]) ** 2)
    checked = 0
    for r in (1, 2, 3):
        outside = d > r * SPEC.r0 + 1e-9
        if not outside.any():
            continue  # patch radius equals the order-r reach, nothing exterior
        assert np.max(np.abs(res.g_matrices[r - 1][outside])) == 0.0
        checked += 1
    assert checked >= 2


def test_projector_g1_closed_form():
    bm, j = at_angle(0.7)
    res = S.projector_series(bm, j, alpha=1.0, r_max=2)
    plan = S.build_patch_plan(COEFFS, hops=2)
    g1 = S.g1_projector_explicit(bm, j, plan)
    assert np.max(np.abs(res.g_matrices[0] - g1)) < 1e-9


def test_projector_column_matches_dense():
    bm, j = at_angle(0.7)
    dense = S.projector_series(bm, j, alpha=1.0, r_max=3)
    col = S.projector_column_series(bm, j, alpha=1.0, r_max=3)
    assert np.max(np.abs(col["column"] - dense.projector[:, dense.jpos])) < 1e-12


def test_zero_potential_collapses():
    bm, j = at_angle(0.7, coeffs={})
    res = S.eigenvalue_series(bm, j, alpha=1.0)
    p2 = float(np.sum(S.dual_vector(CELL, np.array(j), np.asarray(bm.t)) ** 2))
    assert res.value == p2
    assert np.all(res.terms[1:] == 0.0)
    col = S.projector_column_series(bm, j, alpha=1.0, r_max=3)
    e = np.zeros(len(col["column"]))
    e[col["jpos"]] = 1.0
    assert np.array_equal(col["column"], e)


def test_resolvent_norm_free_case_exact():
    bm, j = at_angle(0.7, coeffs={})
    z = K * K + 0.05
    rn = S.resolvent_norm(bm, z, dense_limit=10 ** 6)
    p2 = np.sum(bm.momenta() ** 2, axis=1)
    assert rn.value == pytest.approx(1.0 / np.min(np.abs(p2 - z)), rel=1e-12)


def test_resolvent_norm_conjugate_symmetry():
    bm, j = at_angle(0.7)
    z = K * K + 0.02 + 0.07j
    a = S.resolvent_norm(bm, z, dense_limit=10 ** 6)
    b = S.resolvent_norm(bm, np.conj(z), dense_limit=10 ** 6)
    assert a.value == pytest.approx(b.value, rel=1e-9)


def test_resolvent_norm_lu_matches_svd():
    bm, j = at_angle(0.7)
    z = K * K + 0.3j
    lu = S.resolvent_norm(bm, z, dense_limit=100)
    sv = S.resolvent_norm(bm, z, dense_limit=10 ** 6)
    assert lu.method == "lu" and sv.method == "svd"
    assert lu.value == pytest.approx(sv.value, rel=1e-6)


def test_resolvent_norm_on_contour_bounded():
    bm, j = at_angle(0.7)
    rad = PR.contour_radius(1, K)
    rn = S.resolvent_norm(bm, K * K + rad * 1j, dense_limit=10 ** 6)
    assert rn.value <= 2.0 * (2.0 / rad)


def test_resolvent_truncation_stability():
    bm, _ = at_angle(0.7)
    doubled = assemble_bloch_matrix(CELL, COEFFS, bm.t, K, PR.cutoff(K),
                                    2 * PR.shell_halfwidth(K))
    rn = S.resolvent_norm(bm, K * K + 0.05 + 0.02j, doubled=doubled,
                          dense_limit=10 ** 6)
    assert rn.stable is True


def test_rays_match_pointwise_series():
    phis = np.array([0.6, 0.7, 0.8])
    out = S.lambda_on_rays(COEFFS, CELL, K, phis, np.full(3, K), r_max=5)
    assert out["accepted"].all()
    for i, phi in enumerate(phis):
        bm, j = at_angle(phi)
        res = S.eigenvalue_series(bm, j, alpha=1.0, r_max=5)
        assert out["lam"][i] == pytest.approx(res.value, abs=1e-10)


def test_rays_flag_resonant_angles():
    # at cos(phi) = 1/2k the neighbor mode -e1 crosses the shell and its
    # free energy enters the contour: the point must not be accepted
    phi = math.acos(1.0 / (2 * K))
    out = S.lambda_on_rays(COEFFS, CELL, K, np.array([phi]), np.array([K]), r_max=3)
    assert out["inside"][0] > 1
    assert not out["accepted"][0]


def test_plane_wave_second_order_matches_g2():
    bm, j = at_angle(0.7)
    kappa = np.array([K])
    val = S.plane_wave_second_order(COEFFS, CELL, np.array([0.7]), kappa)
    # at kappa = k the anchor sits on the shell and the free form is g2
    assert val[0] == pytest.approx(S.g_explicit(bm, j, 2), rel=1e-10)


def test_folded_series_reproduces_direct_solve():
    # fold-free cross-check: eigenbasis of H0+W1, then W2 as a dense
    # perturbation; the folded engine must match a direct dense solve
    t = (0.2, 0.45)
    small_k = 6.0
    bm = assemble_bloch_matrix(CELL, COEFFS, t, small_k, 2.5 * small_k, None)
    vals, vecs = np.linalg.eigh(bm.matrix)
    w2 = {(1, 1): 1e-4, (-1, -1): 1e-4, (2, 0): 5e-5, (-2, 0): 5e-5}
    bw = assemble_bloch_matrix(CELL, w2, t, small_k, 2.5 * small_k, None)
    wd = vecs.T @ (bw.matrix - np.diag(np.diag(bw.matrix))) @ vecs
    anchor = int(np.argmin(np.abs(vals - small_k ** 2)))
    gaps = np.abs(vals - vals[anchor])
    radius = 0.4 * np.min(gaps[gaps > 1e-9])
    out = S.folded_series(vals, wd, anchor, float(vals[anchor]), float(radius),
                          alpha=1.0, r_max=8)
    direct = np.linalg.eigvalsh(bm.matrix + bw.matrix - np.diag(np.diag(bw.matrix)))
    near = direct[np.argmin(np.abs(direct - out["value"]))]
    assert out["inside"] == 1
    assert out["value"] == pytest.approx(near, abs=1e-10)
