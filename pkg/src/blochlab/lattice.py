"""Dual lattice cells, Bloch matrices, and the brute-force spectral oracle.

A cell descriptor fixes the period lattice of one step; quasimomenta live in
the dual cell K = [0, 2pi/A1) x [0, 2pi/A2).  Matrices are truncated by an
outer momentum radius and, optionally, an energy shell |p^2 - k^2| <= hw; the
shell is what keeps dense solves desk-sized at large k while the self-test
below (`cutoff_study`) certifies that window eigenvalues do not move when the
shell doubles.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Callable, Mapping, Sequence

import numpy as np
import scipy.linalg
import scipy.sparse
import scipy.sparse.linalg

from .errors import InvariantError, NumericAbort
from .potential import Mode


@dataclass(frozen=True)
class CellDescriptor:
    """Step-n geometry: base periods and the cumulative refinement factor."""

    step: int
    a1: float
    a2: float
    nref: int = 1

    @property
    def periods(self) -> tuple[float, float]:
        return (self.nref * self.a1, self.nref * self.a2)

    @property
    def spacing(self) -> tuple[float, float]:
        return (2 * math.pi / (self.nref * self.a1), 2 * math.pi / (self.nref * self.a2))

    def refine(self, factor: int) -> "CellDescriptor":
        return CellDescriptor(step=self.step + 1, a1=self.a1, a2=self.a2,
                              nref=self.nref * factor)


def dual_vector(cell: CellDescriptor, j: Sequence[int] | np.ndarray, t: Sequence[float]) -> np.ndarray:
    """p_j(t) = (2pi j1/A1 + t1, 2pi j2/A2 + t2); j may be an (n,2) array.

    Complex t is allowed; downstream squares use x1^2 + x2^2 without
    conjugation, the analytic continuation of |p|^2.
    """
    s1, s2 = cell.spacing
    j = np.asarray(j)
    t = np.asarray(t)
    if not np.iscomplexobj(t):
        t = t.astype(float)
    return np.stack([j[..., 0] * s1 + t[..., 0], j[..., 1] * s2 + t[..., 1]], axis=-1)


def reduce_to_cell(cell: CellDescriptor, x: Sequence[float]) -> tuple[np.ndarray, np.ndarray]:
    """Split x = p_j(t) with t canonical in [0, s) per axis.

    Recomposition dual_vector(cell, j, t) agrees with x to one rounding of
    the spacing (exactly when x and j*s share scale); downstream tolerances
    absorb that, what matters is that j is the canonical integer part.
    """
    x = np.asarray(x, dtype=float)
    s = np.array(cell.spacing)
    j = np.floor(x / s).astype(int)
    t = x - j * s
    # guard against x/s rounding across an exact cell boundary
    for axis in (0, 1):
        if t[axis] < 0:
            j[axis] -= 1
            t[axis] += s[axis]
        elif t[axis] >= s[axis]:
            j[axis] += 1
            t[axis] -= s[axis]
    return t, j


@dataclass(frozen=True)
class BlochMatrix:
    cell: CellDescriptor
    t: tuple[float, float]
    k: float
    cutoff: float
    shell: float | None
    indices: np.ndarray          # (n, 2) integer lattice indices
    matrix: np.ndarray           # dense Hermitian (real symmetric fast path)
    coeffs: Mapping[Mode, complex] | None = None

    @property
    def n(self) -> int:
        return len(self.indices)

    @property
    def is_real(self) -> bool:
        return not np.iscomplexobj(self.matrix)

    def momenta(self) -> np.ndarray:
        return dual_vector(self.cell, self.indices, np.asarray(self.t))

    def anchor(self) -> int:
        """Row minimizing |p_j^2 - k^2|, lexicographic tie-break on the index."""
        p2 = np.sum(self.momenta() ** 2, axis=1)
        gap = np.abs(p2 - self.k ** 2)
        best = np.flatnonzero(gap == gap.min())
        if len(best) > 1:
            order = np.lexsort((self.indices[best, 1], self.indices[best, 0]))
            return int(best[order[0]])
        return int(best[0])


def _enumerate_indices(cell: CellDescriptor, t, cutoff: float, shell: float | None,
                       k: float) -> np.ndarray:
    s1, s2 = cell.spacing
    lo1 = math.floor((-cutoff - t[0]) / s1) - 1
    hi1 = math.ceil((cutoff - t[0]) / s1) + 1
    lo2 = math.floor((-cutoff - t[1]) / s2) - 1
    hi2 = math.ceil((cutoff - t[1]) / s2) + 1
    j1 = np.arange(lo1, hi1 + 1)
    j2 = np.arange(lo2, hi2 + 1)
    g1, g2 = np.meshgrid(j1, j2, indexing="ij")
    p1 = g1 * s1 + t[0]
    p2sq = p1 ** 2 + (g2 * s2 + t[1]) ** 2
    keep = p2sq <= cutoff ** 2
    if shell is not None:
        keep &= np.abs(p2sq - k ** 2) <= shell
    jj = np.stack([g1[keep], g2[keep]], axis=-1)
    order = np.lexsort((jj[:, 1], jj[:, 0]))
    return jj[order]


def enumerate_modes(cell: CellDescriptor, t: Sequence[float], k: float,
                    cutoff: float, shell: float | None = None) -> np.ndarray:
    """Index set of the truncation at t, in the row order every solver uses."""
    return _enumerate_indices(cell, (float(t[0]), float(t[1])), cutoff, shell, k)


def assemble_bloch_matrix(
    cell: CellDescriptor,
    coeffs: Mapping[Mode, complex],
    t: Sequence[float],
    k: float,
    cutoff: float,
    shell: float | None = None,
) -> BlochMatrix:
    """Dense truncated Bloch matrix: diag |p_j(t)|^2 plus w_{j-j'} couplings.

    Complex t yields the non-selfadjoint analytic continuation; the index
    set is chosen from the real part of t so the truncation varies
    continuously along strips parallel to the real axis.
    """
    t_complex = any(isinstance(c, complex) and c.imag != 0 for c in t) or np.iscomplexobj(np.asarray(t))
    t = (complex(t[0]), complex(t[1])) if t_complex else (float(t[0].real), float(t[1].real))
    t_re = (t[0].real, t[1].real) if t_complex else t
    idx = _enumerate_indices(cell, t_re, cutoff, shell, k)
    if len(idx) == 0:
        raise InvariantError("empty truncation: no lattice indices retained")
    p = dual_vector(cell, idx, np.asarray(t))
    diag = np.sum(p * p, axis=1)
    is_real = all(v.imag == 0 for v in coeffs.values()) and not t_complex
    dtype = float if is_real else complex
    mat = np.zeros((len(idx), len(idx)), dtype=dtype)
    np.fill_diagonal(mat, diag)
    if coeffs:
        span = int(idx[:, 1].max() - idx[:, 1].min()) + 1
        base = np.int64(idx[:, 1].min())
        key = idx[:, 0].astype(np.int64) * span + (idx[:, 1].astype(np.int64) - base)
        # key is sorted lexicographically already (lexsort in enumeration)
        for q, v in coeffs.items():
            off = idx[:, 1].astype(np.int64) - q[1] - base
            in_span = (off >= 0) & (off < span)
            partner = (idx[:, 0].astype(np.int64) - q[0]) * span + off
            pos = np.searchsorted(key, partner)
            pos_c = np.clip(pos, 0, len(key) - 1)
            hit = in_span & (key[pos_c] == partner)
            rows = np.flatnonzero(hit)
            cols = pos_c[hit]
            mat[rows, cols] += v.real if is_real else v
    return BlochMatrix(cell=cell, t=t, k=k, cutoff=cutoff, shell=shell,
                       indices=idx, matrix=mat, coeffs=dict(coeffs))


@dataclass(frozen=True)
class OracleSpectrum:
    eigenvalues: np.ndarray
    vectors: np.ndarray | None    # columns aligned with eigenvalues
    residuals: np.ndarray
    window: tuple[float, float] | None
    n_matrix: int


def oracle_spectrum(
    bm: BlochMatrix,
    window: tuple[float, float] | None = None,
    want_vectors: bool = True,
    residual_tol: float = 1e-10,
) -> OracleSpectrum:
    """Dense eigensolve with a certified residual per retained pair.

    The residual bound ||Hv - lambda v|| <= residual_tol * (1 + |lambda|) is an
    invariant of the oracle, asserted here rather than trusted.
    """
    if np.iscomplexobj(np.asarray(bm.t)):
        raise InvariantError("oracle eigensolve requires a selfadjoint matrix (real t)")
    vals, vecs = np.linalg.eigh(bm.matrix)
    if window is not None:
        lo, hi = window
        keep = (vals >= lo) & (vals <= hi)
        vals = vals[keep]
        vecs = vecs[:, keep]
    if len(vals):
        res = np.linalg.norm(bm.matrix @ vecs - vecs * vals, axis=0)
        bad = res > residual_tol * (1.0 + np.abs(vals))
        if np.any(bad):
            worst = float(np.max(res / (1.0 + np.abs(vals))))
            raise InvariantError(f"oracle residual {worst:.3e} above {residual_tol:.1e}")
    else:
        res = np.zeros(0)
    return OracleSpectrum(eigenvalues=vals, vectors=vecs if want_vectors else None,
                          residuals=res, window=window, n_matrix=bm.n)


def sparse_window_eigs(
    cell: CellDescriptor,
    coeffs: Mapping[Mode, complex],
    t: Sequence[float],
    k: float,
    cutoff: float,
    shell: float | None,
    window: tuple[float, float],
    max_pairs: int = 64,
    residual_tol: float = 1e-10,
) -> OracleSpectrum:
    """Shift-invert route for lattices too large for a dense solve.

    Pulls eigenpairs around the window center until both window edges are
    strictly exceeded, so the window content is complete.
    """
    t = (float(t[0]), float(t[1]))
    idx = _enumerate_indices(cell, t, cutoff, shell, k)
    p = dual_vector(cell, idx, np.array(t))
    diag = np.sum(p * p, axis=1)
    is_real = all(v.imag == 0 for v in coeffs.values())
    dtype = float if is_real else complex
    n = len(idx)
    span = int(idx[:, 1].max() - idx[:, 1].min()) + 1
    base = np.int64(idx[:, 1].min())
    key = idx[:, 0].astype(np.int64) * span + (idx[:, 1].astype(np.int64) - base)
    rows_all = [np.arange(n)]
    cols_all = [np.arange(n)]
    vals_all = [diag.astype(dtype)]
    for q, v in coeffs.items():
        off = idx[:, 1].astype(np.int64) - q[1] - base
        in_span = (off >= 0) & (off < span)
        partner = (idx[:, 0].astype(np.int64) - q[0]) * span + off
        pos = np.searchsorted(key, partner)
        pos_c = np.clip(pos, 0, n - 1)
        hit = in_span & (key[pos_c] == partner)
        rows = np.flatnonzero(hit)
        rows_all.append(rows)
        cols_all.append(pos_c[hit])
        vals_all.append(np.full(len(rows), v.real if is_real else v, dtype=dtype))
    mat = scipy.sparse.csr_matrix(
        (np.concatenate(vals_all), (np.concatenate(rows_all), np.concatenate(cols_all))),
        shape=(n, n),
    )
    center = 0.5 * (window[0] + window[1])
    m = 8
    while True:
        m = min(m, n - 2)
        vals, vecs = scipy.sparse.linalg.eigsh(mat, k=m, sigma=center, which="LM")
        covered_lo = vals.min() < window[0]
        covered_hi = vals.max() > window[1]
        if (covered_lo and covered_hi) or m >= min(max_pairs, n - 2):
            break
        m *= 2
    keep = (vals >= window[0]) & (vals <= window[1])
    vals = vals[keep]
    vecs = vecs[:, keep]
    order = np.argsort(vals)
    vals = vals[order]
    vecs = vecs[:, order]
    if len(vals):
        res = np.linalg.norm(mat @ vecs - vecs * vals, axis=0)
        bad = res > residual_tol * (1.0 + np.abs(vals))
        if np.any(bad):
            worst = float(np.max(res / (1.0 + np.abs(vals))))
            raise InvariantError(f"sparse oracle residual {worst:.3e} above {residual_tol:.1e}")
    else:
        res = np.zeros(0)
    return OracleSpectrum(eigenvalues=vals, vectors=vecs, residuals=res,
                          window=window, n_matrix=n)


@dataclass(frozen=True)
class UnionReport:
    refined: np.ndarray
    union: np.ndarray
    max_mismatch: float
    counts: tuple[int, int]


def refine_spectrum_union(
    cell: CellDescriptor,
    coeffs: Mapping[Mode, complex],
    tau: Sequence[float],
    factor: int,
    k: float,
    cutoff: float,
    shell: float | None,
    window: tuple[float, float],
) -> UnionReport:
    """Spectrum of the operator viewed on the refined cell vs the shifted union.

    The matrix on the refined cell (coefficients lifted by `factor`) must have,
    in any window, exactly the multiset union of the unrefined spectra at the
    shifted quasimomenta tau + 2pi p/(factor * A).  Retention is by momentum
    value on both sides, so the identity is exact up to solver tolerance.
    """
    fine = cell.refine(factor)
    lifted = {(q[0] * factor, q[1] * factor): v for q, v in coeffs.items()}
    bm = assemble_bloch_matrix(fine, lifted, tau, k, cutoff, shell)
    lhs = oracle_spectrum(bm, window=window, want_vectors=False).eigenvalues
    pieces = []
    base1, base2 = cell.periods
    for p1 in range(factor):
        for p2 in range(factor):
            tp = (tau[0] + 2 * math.pi * p1 / (factor * base1),
                  tau[1] + 2 * math.pi * p2 / (factor * base2))
            sub = assemble_bloch_matrix(cell, coeffs, tp, k, cutoff, shell)
            pieces.append(oracle_spectrum(sub, window=window, want_vectors=False).eigenvalues)
    rhs = np.sort(np.concatenate(pieces))
    if len(lhs) != len(rhs):
        return UnionReport(refined=lhs, union=rhs, max_mismatch=math.inf,
                           counts=(len(lhs), len(rhs)))
    mism = float(np.max(np.abs(lhs - rhs))) if len(lhs) else 0.0
    return UnionReport(refined=lhs, union=rhs, max_mismatch=mism,
                       counts=(len(lhs), len(rhs)))


def cutoff_study(
    cell: CellDescriptor,
    coeffs: Mapping[Mode, complex],
    t: Sequence[float],
    k: float,
    cutoff: float,
    shell: float | None,
    window: tuple[float, float],
) -> float:
    """Max movement of window eigenvalues when the truncation doubles.

    Doubles the energy shell (or the momentum cutoff when no shell is active);
    the caller decides what movement is acceptable.
    """
    bm1 = assemble_bloch_matrix(cell, coeffs, t, k, cutoff, shell)
    if shell is not None:
        bm2 = assemble_bloch_matrix(cell, coeffs, t, k, cutoff, 2 * shell)
    else:
        bm2 = assemble_bloch_matrix(cell, coeffs, t, k, 2 * cutoff, None)
    e1 = oracle_spectrum(bm1, window=window, want_vectors=False).eigenvalues
    e2 = oracle_spectrum(bm2, window=window, want_vectors=False).eigenvalues
    if len(e1) != len(e2):
        raise NumericAbort(
            f"window content changed under truncation doubling: {len(e1)} vs {len(e2)}"
        )
    if not len(e1):
        return 0.0
    return float(np.max(np.abs(e1 - e2)))
