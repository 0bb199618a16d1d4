"""Perturbation series by contour quadrature.

All coefficients g_r and projector corrections G_r are Riesz-type contour
integrals of resolvent-potential products.  The quadrature never forms dense
resolvent powers: with R0(z) the diagonal resolvent with the anchor entry
zeroed, every integrand splits into an analytic part (which integrates to
zero on the closed contour and is dropped) plus rank-one insertions through
the anchor, so each node costs a handful of sparse matvecs.  The same engine
runs batched over curve grids and, in a dense-coupling variant, over the
eigenbasis of a folded previous-step operator.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Mapping, Sequence

import numpy as np
import scipy.linalg

from .errors import InvariantError, NumericAbort, ValidationError
from .lattice import BlochMatrix, CellDescriptor, dual_vector, oracle_spectrum
from .params import Params
from .potential import Mode


@dataclass(frozen=True)
class Contour:
    """Circle in the energy plane with an even trapezoid node count."""

    center: complex
    radius: float
    nodes: int = 64

    def __post_init__(self):
        if self.radius <= 0:
            raise ValidationError("contour radius must be positive")
        if self.nodes < 64 or self.nodes % 2:
            raise ValidationError("contour nodes must be even and >= 64")

    def points(self, nodes: int | None = None) -> np.ndarray:
        n = nodes or self.nodes
        # half-step offset keeps nodes off the real axis, where the poles live
        theta = 2 * math.pi * (np.arange(n) + 0.5) / n
        return self.center + self.radius * np.exp(1j * theta)

    def weights(self, nodes: int | None = None) -> np.ndarray:
        n = nodes or self.nodes
        return (self.points(n) - self.center) / n


@dataclass(frozen=True)
class PatchPlan:
    """Fixed index template around the anchor with the potential's couplings."""

    offsets: np.ndarray                   # (n, 2) integer offsets, anchor at jpos
    jpos: int
    pairs: tuple[tuple[Mode, complex, np.ndarray, np.ndarray], ...]
    qmax: int

    @property
    def n(self) -> int:
        return len(self.offsets)

    def apply_w(self, x: np.ndarray) -> np.ndarray:
        """y = W x along the last axis."""
        y = np.zeros_like(x)
        for _, w, rows, cols in self.pairs:
            y[..., rows] += w * x[..., cols]
        return y

    def w_frobenius_weighted(self, r: np.ndarray) -> np.ndarray:
        """Frobenius norm of diag(r)^{1/2} W diag(r)^{1/2} along last axis of r."""
        acc = np.zeros(r.shape[:-1])
        for _, w, rows, cols in self.pairs:
            acc = acc + (abs(w) ** 2) * np.sum(
                np.abs(r[..., rows]) * np.abs(r[..., cols]), axis=-1
            )
        return np.sqrt(acc)


def build_patch_plan(coeffs: Mapping[Mode, complex], hops: int) -> PatchPlan:
    """Template of all offsets reachable from the anchor in <= hops couplings.

    The l1 ball of radius hops * max||q||_1 contains every such offset, so
    vector iterates of order <= hops are computed without truncation error.
    """
    if coeffs:
        qmax = max(abs(q[0]) + abs(q[1]) for q in coeffs)
        qmax = max(qmax, 1)
        rad = hops * qmax
    else:
        # no couplings reach anywhere: an anchor-only patch keeps foreign
        # free energies from tripping the single-pole check
        qmax = 1
        rad = 0
    side = np.arange(-rad, rad + 1)
    g1, g2 = np.meshgrid(side, side, indexing="ij")
    keep = np.abs(g1) + np.abs(g2) <= rad
    offsets = np.stack([g1[keep], g2[keep]], axis=-1)
    pos = {(int(o[0]), int(o[1])): i for i, o in enumerate(offsets)}
    jpos = pos[(0, 0)]
    pairs = []
    for q, v in coeffs.items():
        rows, cols = [], []
        for (o1, o2), i in pos.items():
            src = (o1 - q[0], o2 - q[1])
            if src in pos:
                rows.append(i)
                cols.append(pos[src])
        if rows:
            pairs.append((q, complex(v), np.asarray(rows), np.asarray(cols)))
    return PatchPlan(offsets=offsets, jpos=jpos, pairs=tuple(pairs), qmax=qmax)


# ---- core engine ---------------------------------------------------------


def _convolve_trunc(a: np.ndarray, c: np.ndarray, length: int) -> np.ndarray:
    """(a * c)[d] = sum_{i+j=d} a[i] c[j], truncated to `length` entries."""
    out = np.zeros_like(a[..., :length])
    la = a.shape[-1]
    lc = c.shape[-1]
    for d in range(length):
        for i in range(max(0, d - lc + 1), min(d + 1, la)):
            out[..., d] += a[..., i] * c[..., d - i]
    return out


def _engine(
    diag: np.ndarray,
    plan_apply: Callable[[np.ndarray], np.ndarray],
    jpos: int,
    z: np.ndarray,
    r_max: int,
    want_column: bool,
) -> tuple[np.ndarray, np.ndarray | None, dict]:
    """Quadrature traces (and anchor columns) of the resolvent series.

    diag: (..., n) unperturbed eigenvalues; z: (..., nodes) contour points.
    Returns T with shape (..., nodes, r_max+1) where T[..., r] is the
    rank-one part of Tr[((H0-z)^{-1} W)^r], the G_r column integrands
    (..., nodes, r_max+1, n) if requested, and node diagnostics.
    """
    base = diag.shape[:-1]
    n = diag.shape[-1]
    nodes = z.shape[-1]
    d = diag[..., None, :] - z[..., :, None]       # (..., nodes, n)
    min_gap = np.min(np.abs(d), axis=(-2, -1))
    with np.errstate(divide="ignore", invalid="ignore"):
        # node-on-pole infs are rejected by the caller via min_gap
        rho = 1.0 / d[..., jpos]                   # (..., nodes)
        r0 = 1.0 / d
    r0[..., jpos] = 0.0
    # vector iterations x_m = (R0 W)^m e_j and c_m = (W x_m)_j
    x = np.zeros(base + (nodes, n), dtype=complex)
    x[..., jpos] = 1.0
    xs = [x]
    cs = []
    for m in range(r_max):
        wx = plan_apply(xs[-1])
        cs.append(wx[..., jpos])
        xs.append(r0 * wx)
    c = np.stack(cs, axis=-1)                      # (..., nodes, r_max)
    # s-fold convolution powers of c
    t_terms = np.zeros(base + (nodes, r_max + 1), dtype=complex)
    conv = c.copy()
    rho_pow = rho.copy()
    d_tables = []
    for s in range(1, r_max + 1):
        d_tables.append(conv)
        for r in range(s, r_max + 1):
            if r - s < conv.shape[-1]:
                t_terms[..., r] += rho_pow * (r / s) * conv[..., r - s]
        conv = _convolve_trunc(conv, c, max(r_max - s, 1))
        rho_pow = rho_pow * rho
    column = None
    diags = {"min_gap": min_gap}
    if want_column:
        # v[r, m0] = rho * delta(m0=r) + sum_{s>=1} rho^{s+1} D_s(r-s-m0)
        v = np.zeros(base + (nodes, r_max + 1, r_max + 1), dtype=complex)
        for r in range(r_max + 1):
            v[..., r, r] += rho
        rho_pow = rho * rho
        for s in range(1, r_max + 1):
            table = d_tables[s - 1]
            for r in range(r_max + 1):
                for m0 in range(r + 1):
                    dd = r - s - m0
                    if 0 <= dd < table.shape[-1]:
                        v[..., r, m0] += rho_pow * table[..., dd]
            rho_pow = rho_pow * rho
        xstack = np.stack(xs, axis=-1)             # (..., nodes, n, r_max+1)
        column = np.zeros(base + (nodes, r_max + 1, n), dtype=complex)
        for r in range(r_max + 1):
            for m0 in range(r + 1):
                column[..., r, :] += v[..., r, m0, None] * xstack[..., m0]
    return t_terms, column, diags


def _quadrature(
    diag: np.ndarray,
    plan_apply,
    jpos: int,
    centers: np.ndarray,
    radius: float,
    r_max: int,
    want_column: bool,
    nodes: int,
) -> tuple[np.ndarray, np.ndarray | None, dict]:
    theta = 2 * math.pi * (np.arange(nodes) + 0.5) / nodes
    ring = radius * np.exp(1j * theta)
    z = np.asarray(centers)[..., None] + ring
    w = ring / nodes
    t_terms, column, diags = _engine(diag, plan_apply, jpos, z, r_max, want_column)
    # the dropped analytic part is only analytic if no foreign pole sits inside
    gaps = np.abs(diag - np.asarray(centers)[..., None])
    diags["inside"] = np.sum(gaps < radius, axis=-1)
    g = np.zeros(diag.shape[:-1] + (r_max + 1,), dtype=complex)
    for r in range(1, r_max + 1):
        sign = -1.0 if r % 2 else 1.0
        g[..., r] = sign / r * np.sum(t_terms[..., r] * w, axis=-1)
    cols = None
    if want_column:
        cols = np.zeros(diag.shape[:-1] + (r_max + 1, diag.shape[-1]), dtype=complex)
        for r in range(1, r_max + 1):
            sign = 1.0 if r % 2 else -1.0     # (-1)^{r+1}
            cols[..., r, :] = sign * np.sum(column[..., r, :] * w[:, None], axis=-2)
    return g, cols, diags


def series_terms(
    diag: np.ndarray,
    plan: PatchPlan | None,
    centers,
    radius: float,
    r_max: int,
    *,
    apply_w=None,
    jpos: int | None = None,
    want_column: bool = False,
    nodes: int = 64,
    quad_tol: float = 1e-10,
    max_nodes: int = 4096,
) -> dict:
    """Auto-doubled quadrature of the g_r (and G_r anchor columns).

    Doubles the node count until every g_r moves by less than quad_tol
    (absolute; the terms are O(|W|^r)), else raises NumericAbort.
    """
    if plan is not None:
        apply_w = plan.apply_w
        jpos = plan.jpos
    centers = np.asarray(centers, dtype=float)
    g_prev = None
    while True:
        g, cols, diags = _quadrature(
            diag, apply_w, jpos, centers, radius, r_max, want_column, nodes
        )
        if np.min(diags["min_gap"]) < 1e-12 * max(np.max(np.abs(centers)), 1.0):
            raise NumericAbort("quadrature node on a pole of the unperturbed resolvent")
        # a pole within one node spacing of the contour is not resolved at
        # this node count, even if doubling happens to agree
        pole_clear = np.min(diags["min_gap"]) >= 0.75 * (2.0 * np.pi * radius / nodes)
        if pole_clear and g_prev is not None and np.max(np.abs(g - g_prev)) < quad_tol:
            break
        if nodes >= max_nodes:
            if g_prev is not None:
                raise NumericAbort("quadrature unresolved at max node count")
            break
        g_prev = g
        nodes *= 2
    return {
        "g": g,
        "columns": cols,
        "nodes": nodes,
        "min_gap": diags["min_gap"],
        "inside": diags["inside"],
    }


def _frobenius_bound(plan: PatchPlan, diag: np.ndarray, centers, radius: float,
                     nodes: int) -> np.ndarray:
    """Max over contour nodes of ||A1(z)||_F, an upper bound for ||A1(z)||_2.

    A1(z) = -(H0-z)^{-1/2} W (H0-z)^{-1/2} on the patch, principal square
    roots; entrywise moduli only, so the branch cut is immaterial.
    """
    theta = 2 * math.pi * (np.arange(nodes) + 0.5) / nodes
    z = np.asarray(centers, dtype=float)[..., None] + radius * np.exp(1j * theta)
    inv = 1.0 / np.abs(diag[..., None, :] - z[..., :, None])
    f = plan.w_frobenius_weighted(inv)
    return np.max(f, axis=-1)


# ---- explicit low orders -------------------------------------------------


def _require_coeffs(matrix: BlochMatrix) -> Mapping[Mode, complex]:
    if matrix.coeffs is None:
        raise ValidationError("matrix carries no potential table")
    return matrix.coeffs


def _pair_energies(matrix: BlochMatrix, j: Sequence[int], qs: Sequence[Mode]) -> np.ndarray:
    base = np.asarray(j, dtype=int)
    pts = base + np.asarray(qs, dtype=int)
    p = dual_vector(matrix.cell, pts, np.asarray(matrix.t))
    return np.sum(p * p, axis=-1)


def g_explicit(matrix: BlochMatrix, j: Sequence[int], order: int, form: int = 1) -> float:
    """Closed-form g_r for r <= 3 from the coupling table and free denominators.

    order 2 has two algebraically equal forms; form=2 uses the symmetrized
    one with p_q(0)^2 in the numerator.
    """
    coeffs = _require_coeffs(matrix)
    pj2 = float(_pair_energies(matrix, j, [(0, 0)])[0])
    tol = 1e-10 * max(matrix.k ** 2, 1.0)
    if order == 1:
        return float(np.real(coeffs.get((0, 0), 0.0)))
    qs = [q for q in coeffs if q != (0, 0)]
    if not qs:
        return 0.0
    d = pj2 - _pair_energies(matrix, j, qs)
    if np.min(np.abs(d)) < tol:
        raise InvariantError("resonant index: vanishing denominator in g_explicit")
    if order == 2:
        w2 = np.array([abs(coeffs[q]) ** 2 for q in qs])
        if form == 1:
            return float(np.sum(w2 / d))
        s1c, s2c = matrix.cell.spacing
        pq2 = np.array([(q[0] * s1c) ** 2 + (q[1] * s2c) ** 2 for q in qs])
        dm = pj2 - _pair_energies(matrix, j, [(-q[0], -q[1]) for q in qs])
        return float(-np.sum(w2 * pq2 / (d * dm)))
    if order == 3:
        total = 0.0 + 0.0j
        dmap = {q: pj2 - float(_pair_energies(matrix, j, [q])[0]) for q in qs}
        for q1 in qs:
            for q2 in qs:
                mid = (q1[0] - q2[0], q1[1] - q2[1])
                w_mid = coeffs.get(mid, 0.0)
                if w_mid == 0.0:
                    continue
                total += (
                    coeffs[(-q1[0], -q1[1])] * w_mid * coeffs[q2]
                    / (dmap[q1] * dmap[q2])
                )
        return float(np.real(total))
    raise ValidationError(f"g_explicit supports orders 1..3, got {order}")


def g1_projector_explicit(matrix: BlochMatrix, j: Sequence[int], plan: PatchPlan) -> np.ndarray:
    """First projector correction on the patch: cross-shaped, zero at (j, j)."""
    coeffs = _require_coeffs(matrix)
    n = plan.n
    jpos = plan.jpos
    pts = np.asarray(j, dtype=int) + plan.offsets
    p = dual_vector(matrix.cell, pts, np.asarray(matrix.t))
    p2 = np.sum(p * p, axis=-1)
    pj2 = p2[jpos]
    out = np.zeros((n, n), dtype=complex)
    tol = 1e-10 * max(matrix.k ** 2, 1.0)
    for i in range(n):
        if i == jpos:
            continue
        q = (int(-plan.offsets[i, 0]), int(-plan.offsets[i, 1]))
        w_row = coeffs.get(q, 0.0)
        w_col = coeffs.get((-q[0], -q[1]), 0.0)
        if w_row == 0.0 and w_col == 0.0:
            continue
        if abs(pj2 - p2[i]) < tol:
            raise InvariantError("resonant index: vanishing denominator in g1 projector")
        out[jpos, i] = w_row / (pj2 - p2[i])
        out[i, jpos] = w_col / (pj2 - p2[i])
    return out


# ---- quadrature drivers --------------------------------------------------


def _patch_diag(matrix: BlochMatrix, j: Sequence[int], plan: PatchPlan) -> np.ndarray:
    pts = np.asarray(j, dtype=int) + plan.offsets
    p = dual_vector(matrix.cell, pts, np.asarray(matrix.t))
    return np.sum(p * p, axis=-1)


def default_contour(matrix: BlochMatrix, params=None) -> Contour:
    pr = params or Params()
    return Contour(center=matrix.k ** 2,
                   radius=pr.contour_radius(matrix.cell.step, matrix.k),
                   nodes=pr.quad_nodes)


def g_numeric(
    matrix: BlochMatrix,
    j: Sequence[int],
    r: int,
    contour: Contour | None = None,
    params=None,
) -> float:
    """Order-r trace coefficient by auto-doubled contour quadrature."""
    pr = params or Params()
    contour = contour or default_contour(matrix, pr)
    plan = build_patch_plan(_require_coeffs(matrix), hops=r)
    diag = _patch_diag(matrix, j, plan)
    if abs(diag[plan.jpos] - contour.center) >= contour.radius:
        raise InvariantError("anchor energy lies outside the contour")
    out = series_terms(diag, plan, contour.center, contour.radius, r,
                       nodes=contour.nodes, quad_tol=pr.quad_tol,
                       max_nodes=pr.quad_max_nodes)
    val = out["g"][r]
    if not np.iscomplexobj(np.asarray(matrix.t)) and abs(val.imag) > 1e-10:
        raise InvariantError(f"imaginary residue {val.imag:.2e} in g_{r} at real t")
    return float(val.real)


@dataclass(frozen=True)
class SeriesResult:
    """Truncated eigenvalue series with its own error budget and oracle check."""

    alpha: float
    j: tuple[int, int]
    r_max: int
    terms: np.ndarray            # terms[r] = alpha^r g_r, terms[0] = p_j^2
    value: float
    tail_bound: float
    a_norm: float                # measured Frobenius bound for ||A1|| on the contour
    nodes: int
    converged: bool              # alpha * a_norm < 1
    unique_pole: bool            # exactly one free energy inside the contour
    oracle_value: float | None
    oracle_count: int
    discrepancy: float | None
    in_theorem_interval: bool | None

    @property
    def accepted(self) -> bool:
        return self.converged and self.unique_pole and self.oracle_count == 1

    def partial_sums(self) -> np.ndarray:
        return np.cumsum(np.real(self.terms))


def eigenvalue_series(
    matrix: BlochMatrix,
    j: Sequence[int] | None = None,
    alpha: float = 1.0,
    r_max: int | None = None,
    contour: Contour | None = None,
    params=None,
    oracle: bool = True,
    require_convergent: bool = True,
) -> SeriesResult:
    """lambda(alpha, t) = p_j^2 + sum alpha^r g_r with a measured tail bound.

    The convergence predicate is the measured contour bound alpha*||A1|| < 1;
    when it fails and require_convergent is set the series is refused rather
    than extrapolated.
    """
    pr = params or Params()
    r_max = r_max or pr.r_max
    if j is None:
        j = tuple(int(v) for v in matrix.indices[matrix.anchor()])
    j = (int(j[0]), int(j[1]))
    contour = contour or default_contour(matrix, pr)
    plan = build_patch_plan(_require_coeffs(matrix), hops=r_max)
    diag = _patch_diag(matrix, j, plan)
    if abs(diag[plan.jpos] - contour.center) >= contour.radius:
        raise InvariantError("anchor energy lies outside the contour")
    out = series_terms(diag, plan, contour.center, contour.radius, r_max,
                       nodes=contour.nodes, quad_tol=pr.quad_tol,
                       max_nodes=pr.quad_max_nodes)
    g = out["g"]
    t_real = not np.iscomplexobj(np.asarray(matrix.t))
    if t_real and np.max(np.abs(g.imag)) > 1e-10:
        raise InvariantError("imaginary residue in eigenvalue series at real t")
    fbound = float(_frobenius_bound(plan, diag, contour.center, contour.radius,
                                    out["nodes"]))
    converged = alpha * fbound < 1.0
    if require_convergent and not converged:
        raise NumericAbort(
            f"outside perturbative regime: alpha*||A1|| = {alpha * fbound:.3f} >= 1"
        )
    terms = np.concatenate([[diag[plan.jpos]],
                            [alpha ** r * g[r].real for r in range(1, r_max + 1)]])
    value = float(np.sum(terms))
    a = alpha * fbound
    if a < 1.0:
        tail = (contour.radius * alpha ** 2 * fbound ** 2 * a ** (r_max - 1)
                / ((r_max + 1) * (1.0 - a)))
    else:
        tail = math.inf
    oracle_value = None
    oracle_count = 0
    discrepancy = None
    if oracle and t_real:
        lo = contour.center - contour.radius
        hi = contour.center + contour.radius
        spec = oracle_spectrum(matrix, window=(lo, hi), want_vectors=False)
        oracle_count = len(spec.eigenvalues)
        if oracle_count:
            near = int(np.argmin(np.abs(spec.eigenvalues - value)))
            oracle_value = float(spec.eigenvalues[near])
            discrepancy = abs(value - oracle_value)
    in_interval = None
    if t_real:
        half = matrix.k ** (-16 * pr.s1 - 11 * pr.delta)
        in_interval = abs(value - matrix.k ** 2) < half
    return SeriesResult(alpha=alpha, j=j, r_max=r_max, terms=terms, value=value,
                        tail_bound=float(tail), a_norm=fbound, nodes=out["nodes"],
                        converged=converged, unique_pole=int(np.atleast_1d(out["inside"])[0]) == 1,
                        oracle_value=oracle_value, oracle_count=oracle_count,
                        discrepancy=discrepancy, in_theorem_interval=in_interval)


# ---- projector series ----------------------------------------------------


@dataclass(frozen=True)
class ProjectorResult:
    alpha: float
    r_max: int
    offsets: np.ndarray
    jpos: int
    projector: np.ndarray            # dense patch matrix E
    g_matrices: tuple[np.ndarray, ...]   # per-order corrections G_1..G_r
    trace: complex
    nodes: int
    oracle_distance: float | None


def projector_series(
    matrix: BlochMatrix,
    j: Sequence[int] | None = None,
    alpha: float = 1.0,
    r_max: int = 4,
    contour: Contour | None = None,
    params=None,
    oracle: bool = True,
) -> ProjectorResult:
    """Full projector corrections on the patch by dense contour quadrature.

    Slow path (dense powers per node), for validation; the hot path for
    eigenfunctions is projector_column_series.
    """
    pr = params or Params()
    contour = contour or default_contour(matrix, pr)
    coeffs = _require_coeffs(matrix)
    plan = build_patch_plan(coeffs, hops=r_max)
    if j is None:
        j = tuple(int(v) for v in matrix.indices[matrix.anchor()])
    diag = _patch_diag(matrix, j, plan)
    n = plan.n
    jpos = plan.jpos
    wmat = np.zeros((n, n), dtype=complex)
    for _, w, rows, cols in plan.pairs:
        wmat[rows, cols] += w
    nodes = contour.nodes
    prev = None
    while True:
        z = contour.points(nodes)
        wq = contour.weights(nodes)
        gs = [np.zeros((n, n), dtype=complex) for _ in range(r_max + 1)]
        for zl, wl in zip(z, wq):
            rfull = 1.0 / (diag - zl)
            m = rfull[:, None] * wmat
            power = np.eye(n, dtype=complex)
            for r in range(1, r_max + 1):
                power = m @ power
                sign = 1.0 if r % 2 else -1.0
                gs[r] += sign * wl * (power * rfull[None, :])
        if prev is not None and max(
            float(np.max(np.abs(a - b))) for a, b in zip(gs[1:], prev[1:])
        ) < pr.quad_tol:
            break
        if nodes >= pr.quad_max_nodes:
            if prev is not None:
                raise NumericAbort("quadrature unresolved at max node count")
            break
        prev = gs
        nodes *= 2
    proj = np.zeros((n, n), dtype=complex)
    proj[jpos, jpos] = 1.0
    for r in range(1, r_max + 1):
        proj = proj + alpha ** r * gs[r]
    dist = None
    if oracle:
        h_patch = np.diag(diag) + alpha * wmat
        vals, vecs = np.linalg.eigh((h_patch + h_patch.conj().T) / 2)
        inside = np.flatnonzero(np.abs(vals - contour.center) < contour.radius)
        if len(inside) == 1:
            v = vecs[:, inside[0]]
            dist = float(np.linalg.norm(proj - np.outer(v, v.conj()), 2))
    return ProjectorResult(alpha=alpha, r_max=r_max, offsets=plan.offsets,
                           jpos=jpos, projector=proj, g_matrices=tuple(gs[1:]),
                           trace=complex(np.trace(proj)), nodes=nodes,
                           oracle_distance=dist)


def projector_column_series(
    matrix: BlochMatrix,
    j: Sequence[int] | None = None,
    alpha: float = 1.0,
    r_max: int | None = None,
    contour: Contour | None = None,
    params=None,
) -> dict:
    """Anchor column of the projector series: the eigenvector coefficients.

    Returns the un-normalized column E e_j on the patch template together
    with the per-order corrections.
    """
    pr = params or Params()
    r_max = r_max or pr.r_max
    contour = contour or default_contour(matrix, pr)
    coeffs = _require_coeffs(matrix)
    plan = build_patch_plan(coeffs, hops=r_max)
    if j is None:
        j = tuple(int(v) for v in matrix.indices[matrix.anchor()])
    diag = _patch_diag(matrix, j, plan)
    out = series_terms(diag, plan, contour.center, contour.radius, r_max,
                       want_column=True, nodes=contour.nodes,
                       quad_tol=pr.quad_tol, max_nodes=pr.quad_max_nodes)
    cols = out["columns"]
    column = np.zeros(plan.n, dtype=complex)
    column[plan.jpos] = 1.0
    for r in range(1, r_max + 1):
        column += alpha ** r * cols[r]
    return {
        "column": column,
        "per_order": cols,
        "offsets": plan.offsets,
        "jpos": plan.jpos,
        "j": (int(j[0]), int(j[1])),
        "nodes": out["nodes"],
        "inside": int(np.atleast_1d(out["inside"])[0]),
    }


# ---- resolvent norm ------------------------------------------------------


@dataclass(frozen=True)
class ResolventNorm:
    z: complex
    value: float                 # ||(H - z)^{-1}||_2
    sigma_min: float
    method: str
    converged: bool
    stable: bool | None          # within factor 2 of a doubled-truncation run


def resolvent_norm(
    matrix: BlochMatrix,
    z: complex,
    doubled: BlochMatrix | None = None,
    seed: int = 0,
    dense_limit: int = 800,
) -> ResolventNorm:
    """Resolvent operator norm as 1/sigma_min(H - z).

    Small matrices go through exact singular values; larger ones through an
    LU factorization with power iteration on the normal operator of the
    inverse, which only needs triangular solves.
    """

    def smin(mat: np.ndarray) -> tuple[float, str, bool]:
        n = mat.shape[0]
        a = mat.astype(complex) - z * np.eye(n)
        if n <= dense_limit:
            s = scipy.linalg.svdvals(a)
            return float(s[-1]), "svd", True
        try:
            lu, piv = scipy.linalg.lu_factor(a)
        except scipy.linalg.LinAlgError:
            return 0.0, "lu", True
        if np.min(np.abs(np.diag(lu))) == 0.0:
            return 0.0, "lu", True
        rng = np.random.default_rng(seed)
        v = rng.standard_normal(n) + 1j * rng.standard_normal(n)
        v /= np.linalg.norm(v)
        prev = 0.0
        converged = False
        for _ in range(200):
            w = scipy.linalg.lu_solve((lu, piv), v, trans=2)
            u = scipy.linalg.lu_solve((lu, piv), w, trans=0)
            nrm = np.linalg.norm(u)
            est = math.sqrt(nrm)
            v = u / nrm
            if abs(est - prev) <= 1e-8 * est:
                converged = True
                break
            prev = est
        return 1.0 / est, "lu", converged

    s, method, conv = smin(matrix.matrix)
    value = math.inf if s == 0.0 else 1.0 / s
    stable = None
    if doubled is not None:
        s2, _, _ = smin(doubled.matrix)
        v2 = math.inf if s2 == 0.0 else 1.0 / s2
        if math.isinf(value) or math.isinf(v2):
            stable = math.isinf(value) == math.isinf(v2)
        else:
            stable = 0.5 <= value / v2 <= 2.0
    return ResolventNorm(z=complex(z), value=value, sigma_min=s, method=method,
                         converged=conv, stable=stable)


# ---- batched curve-side evaluation --------------------------------------


def lambda_on_rays(
    coeffs: Mapping[Mode, complex],
    cell: CellDescriptor,
    k: float,
    phi: np.ndarray,
    kappa: np.ndarray,
    alpha: float = 1.0,
    r_max: int = 5,
    radius: float | None = None,
    params=None,
    chunk: int = 256,
) -> dict:
    """Step-1 eigenvalue series along rays x = kappa * (cos phi, sin phi).

    The anchor is the continuous point itself (its cell offset is zero), so
    the expansion center kappa^2 is exact and the whole grid is evaluated
    with one batched quadrature per chunk.  Returns lam, per-order g's and
    acceptance masks; no extrapolation outside the convergent region.
    """
    pr = params or Params()
    radius = radius or pr.contour_radius(1, k)
    phi = np.atleast_1d(np.asarray(phi, dtype=float))
    kappa = np.broadcast_to(np.asarray(kappa, dtype=float), phi.shape).copy()
    plan = build_patch_plan(coeffs, hops=r_max)
    s1c, s2c = cell.spacing
    o1 = plan.offsets[:, 0] * s1c
    o2 = plan.offsets[:, 1] * s2c
    o_sq = o1 ** 2 + o2 ** 2
    gs = np.empty(phi.shape + (r_max + 1,))
    fb = np.empty_like(phi)
    inside = np.empty(phi.shape, dtype=int)
    resolved = np.zeros(phi.shape, dtype=bool)
    pole_clear = np.ones(phi.shape, dtype=bool)
    gap_floor = 1e-12 * max(k * k, 1.0)

    def run(idx: np.ndarray, nodes: int):
        nu1 = np.cos(phi[idx])
        nu2 = np.sin(phi[idx])
        kap = kappa[idx]
        diag = (kap[:, None] ** 2
                + 2 * kap[:, None] * (nu1[:, None] * o1 + nu2[:, None] * o2)
                + o_sq)
        centers = kap ** 2
        g, _, diags = _quadrature(diag, plan.apply_w, plan.jpos, centers,
                                  radius, r_max, False, nodes)
        return g.real, diags, diag, centers

    for lo in range(0, len(phi), chunk):
        idx = np.arange(lo, min(lo + chunk, len(phi)))
        nodes = pr.quad_nodes
        g_prev, diags, diag, centers = run(idx, nodes)
        gs[idx] = g_prev
        inside[idx] = diags["inside"]
        pole_clear[idx] = diags["min_gap"] > gap_floor
        fb[idx] = _frobenius_bound(plan, diag, centers, radius, nodes)
        live = idx
        while len(live) and nodes < pr.quad_max_nodes:
            nodes *= 2
            g_new, diags, _, _ = run(live, nodes)
            gs[live] = g_new
            pole_clear[live] &= diags["min_gap"] > gap_floor
            delta = np.max(np.abs(g_new - g_prev), axis=-1)
            done = delta < pr.quad_tol
            resolved[live[done]] = True
            live = live[~done]
            g_prev = g_new[~done]
    lam = kappa ** 2 + np.sum(
        [alpha ** r * gs[..., r] for r in range(1, r_max + 1)], axis=0
    )
    ok = (alpha * fb < 1.0) & (inside == 1) & resolved & pole_clear
    return {"lam": lam, "g": gs, "a_norm": fb, "inside": inside,
            "accepted": ok, "resolved": resolved, "radius": radius}


def plane_wave_second_order(
    coeffs: Mapping[Mode, complex],
    cell: CellDescriptor,
    phi: np.ndarray,
    kappa: np.ndarray,
) -> np.ndarray:
    """Second-order correction with free plane-wave denominators.

    Used for the deep-scale potentials of steps >= 2, whose couplings are so
    weak that the previous-step dressing of the denominators is far below
    the quadrature tolerance.
    """
    phi = np.atleast_1d(np.asarray(phi, dtype=float))
    kappa = np.broadcast_to(np.asarray(kappa, dtype=float), phi.shape)
    s1c, s2c = cell.spacing
    out = np.zeros_like(phi)
    for q, w in coeffs.items():
        if q == (0, 0):
            continue
        q1 = q[0] * s1c
        q2 = q[1] * s2c
        denom = -(2 * kappa * (np.cos(phi) * q1 + np.sin(phi) * q2) + q1 ** 2 + q2 ** 2)
        out += (abs(w) ** 2) / denom
    return out


def folded_series(
    eigvals: np.ndarray,
    w_dense: np.ndarray,
    anchor_pos: int,
    center: float,
    radius: float,
    alpha: float = 1.0,
    r_max: int = 8,
    nodes: int = 64,
    quad_tol: float = 1e-10,
    max_nodes: int = 4096,
) -> dict:
    """Series in the eigenbasis of a folded previous-step operator.

    eigvals are the unperturbed (previous-step) eigenvalues retained near
    the window, w_dense the next-step potential in that basis.  Same engine
    as step 1: trace corrections through the anchor only.
    """

    def apply(x):
        return x @ w_dense.T

    out = series_terms(np.asarray(eigvals, dtype=float), None, center, radius,
                       r_max, apply_w=apply, jpos=anchor_pos, nodes=nodes,
                       quad_tol=quad_tol, max_nodes=max_nodes)
    g = out["g"]
    value = float(eigvals[anchor_pos]) + float(
        np.sum([alpha ** r * g[r].real for r in range(1, r_max + 1)])
    )
    return {"g": g, "value": value, "nodes": out["nodes"],
            "inside": int(np.atleast_1d(out["inside"])[0])}
