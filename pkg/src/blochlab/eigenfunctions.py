"""Quasi-plane-wave eigenfunctions, periodic corrections, and step deltas.

A constructed function is a coefficient table on one step's dual lattice,
Psi(x) = sum_m c_m exp(i<p_m(t), x>), with the l2 norm of c equal to one
(so the L2 norm over the period cell is |Q|^{1/2}) and the dominant
carrier coefficient rotated onto the positive real axis.  The oracle
route tracks the eigenvector of the truncated matrix inside a caller
window; the series route sums the anchor column of the projector series
and is always cross-checked against the tracked vector.  Functions from
adjacent steps are compared after quasiperiodic extension, which is pure
index re-mapping between the two dual lattices, never resampling.  The
real-space residual uses the five-point Laplacian with its per-mode
symbol defect reported as an exact discretization floor.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterator, Mapping, Sequence

import numpy as np

from .errors import InvariantError
from .lattice import (BlochMatrix, CellDescriptor, assemble_bloch_matrix,
                      dual_vector, enumerate_modes, oracle_spectrum,
                      sparse_window_eigs)
from .params import Params
from .potential import Mode
from .series import Contour, build_patch_plan, projector_column_series

PHASE_ANCHOR = "anchor-positive"

# truncated-coordinate eigen residual budget, relative to max(1, |lambda|)
RESIDUAL_CAP = 1e-8

MIN_POINTS_PER_WAVE = 4.0


# ---- construction --------------------------------------------------------


@dataclass
class BlochEigenfunction:
    """Coefficient table of one Bloch eigenfunction on its step lattice."""

    step: int
    cell: CellDescriptor
    t: tuple[float, float]
    k: float
    lam: float                     # the function's own eigenvalue
    window: float                  # requested half-width that isolated it
    anchor: Mode                   # carrier index of the plane-wave factor
    kappa_vec: np.ndarray          # physical momentum of the carrier
    modes: np.ndarray              # (n, 2) integer dual indices
    coeff: np.ndarray              # (n,) complex, l2 norm 1, carrier positive
    coeffs: Mapping[Mode, complex]  # potential the eigenproblem used
    route: str
    phase: str
    residual: float                # ||(H - lam)c|| in the truncated coordinates
    overlap: float | None          # series-vs-oracle cross-check when taken
    n_matrix: int

    def norm(self) -> float:
        return float(np.linalg.norm(self.coeff))

    def anchor_pos(self) -> int:
        hit = np.flatnonzero((self.modes == np.asarray(self.anchor)).all(axis=1))
        return int(hit[0])

    def table(self) -> dict[Mode, complex]:
        return {(int(m[0]), int(m[1])): complex(c)
                for m, c in zip(self.modes, self.coeff)}

    def to_rows(self) -> Iterator[dict]:
        for m, c in zip(self.modes, self.coeff):
            yield {"m1": int(m[0]), "m2": int(m[1]),
                   "re_c": float(c.real), "im_c": float(c.imag)}


def _phase_fixed(vec: np.ndarray, pos: int) -> np.ndarray:
    c = np.asarray(vec, dtype=complex) / np.linalg.norm(vec)
    lead = c[pos]
    if abs(lead) == 0:
        raise InvariantError("carrier coefficient vanished; phase undefined")
    return c * (abs(lead) / lead)


def bloch_eigenfunction(coeffs: Mapping[Mode, complex], cell: CellDescriptor,
                        k: float, t: Sequence[float], lam: float,
                        window: float, *, route: str = "oracle",
                        r_max: int | None = None,
                        params: Params | None = None) -> BlochEigenfunction:
    """Track the unique eigenpair inside [lam - window, lam + window].

    The oracle route returns the truncated-matrix eigenvector itself; the
    series route returns the normalized anchor column of the projector
    series, rejected unless its overlap with the tracked vector clears the
    configured bound.  Either way the window must isolate exactly one
    oracle eigenvalue.
    """
    pr = params or Params()
    if route not in ("oracle", "series"):
        raise InvariantError(f"unknown route {route!r}")
    if window <= 0:
        raise InvariantError("eigenvalue window must be positive")
    r_max = r_max or pr.r_max
    t = (float(t[0]), float(t[1]))
    cutoff = pr.cutoff(k)
    shell = pr.shell_halfwidth(k)
    win = (lam - window, lam + window)
    idx = enumerate_modes(cell, t, k, cutoff, shell)
    if len(idx) <= pr.eig_dense_limit:
        bm = assemble_bloch_matrix(cell, coeffs, t, k, cutoff, shell)
        sp = oracle_spectrum(bm, window=win)
    else:
        sp = sparse_window_eigs(cell, coeffs, t, k, cutoff, shell, win)
    if len(sp.eigenvalues) != 1:
        raise InvariantError(
            f"not simple here: {len(sp.eigenvalues)} oracle eigenvalues in "
            f"[{win[0]:.9g}, {win[1]:.9g}] at t=({t[0]:.6f}, {t[1]:.6f})")
    apos = int(np.argmax(np.abs(sp.vectors[:, 0])))
    anchor = (int(idx[apos, 0]), int(idx[apos, 1]))
    tracked = _phase_fixed(sp.vectors[:, 0], apos)

    if route == "oracle":
        modes = idx
        coeff = tracked
        lam_fn = float(sp.eigenvalues[0])
        residual = float(sp.residuals[0])
        overlap = None
    else:
        modes, coeff, lam_fn, residual, overlap = _series_column(
            coeffs, cell, k, t, anchor, idx, tracked, r_max, pr)

    if residual > RESIDUAL_CAP * max(1.0, abs(lam_fn)):
        raise InvariantError(
            f"residual {residual:.3e} beyond the truncated-coordinate budget")
    kv = dual_vector(cell, np.asarray(anchor), np.asarray(t))
    return BlochEigenfunction(step=cell.step, cell=cell, t=t, k=k, lam=lam_fn,
                              window=window, anchor=anchor, kappa_vec=kv,
                              modes=modes, coeff=coeff, coeffs=dict(coeffs),
                              route=route, phase=PHASE_ANCHOR,
                              residual=residual, overlap=overlap,
                              n_matrix=sp.n_matrix)


def _series_column(coeffs, cell, k, t, anchor, idx, tracked, r_max, pr):
    """Projector-series coefficients on the patch, cross-checked and rated."""
    # carrier object only; the engine reads cell, t and the coupling table
    light = BlochMatrix(cell=cell, t=t, k=k, cutoff=pr.cutoff(k),
                        shell=pr.shell_halfwidth(k),
                        indices=np.asarray([anchor]),
                        matrix=np.zeros((1, 1)), coeffs=dict(coeffs))
    center = float(np.sum(dual_vector(cell, np.asarray(anchor), np.asarray(t)) ** 2))
    contour = Contour(center=center, radius=pr.contour_radius(1, k),
                      nodes=pr.quad_nodes)
    col = projector_column_series(light, j=anchor, alpha=1.0, r_max=r_max,
                                  contour=contour, params=pr)
    if col["inside"] != 1:
        raise InvariantError(
            f"projector contour holds {col['inside']} free energies "
            f"at t=({t[0]:.6f}, {t[1]:.6f})")
    modes = np.asarray(anchor) + col["offsets"]
    coeff = _phase_fixed(col["column"], col["jpos"])

    pos = {(int(m[0]), int(m[1])): i for i, m in enumerate(idx)}
    acc = 0.0 + 0.0j
    for i, m in enumerate(modes):
        j = pos.get((int(m[0]), int(m[1])))
        if j is not None:
            acc += np.conj(tracked[j]) * coeff[i]
    overlap = float(abs(acc))
    if overlap < pr.route_overlap:
        raise InvariantError(
            f"series-oracle mismatch: overlap {overlap:.6f} below "
            f"{pr.route_overlap}")

    plan = build_patch_plan(coeffs, hops=r_max)
    p = dual_vector(cell, modes, np.asarray(t))
    diag = np.sum(p * p, axis=-1)
    hc = diag * coeff + plan.apply_w(coeff)
    lam_fn = float(np.vdot(coeff, hc).real)
    residual = float(np.linalg.norm(hc - lam_fn * coeff))
    return modes, coeff, lam_fn, residual, overlap


# ---- plane-wave correction ----------------------------------------------


@dataclass
class CorrectionRecord:
    """Fourier data of u with Psi = e^{i<kappa,x>}(1 + u)."""

    anchor: Mode
    offsets: np.ndarray        # (n, 2) integer offsets m - j
    coeff: np.ndarray          # u coefficients: carrier entry reduced by one
    l1_bound: float            # rigorous sup-norm bound
    grid_max: float            # dense-grid max |u|, the empirical companion
    ring_radius: np.ndarray    # max-norm distance values with any mass
    ring_max: np.ndarray       # largest |coefficient| per ring
    decay_ratio: float | None  # fitted geometric ratio over rings >= 1


def plane_wave_correction(fn: BlochEigenfunction) -> CorrectionRecord:
    offsets = fn.modes - np.asarray(fn.anchor)
    u = np.asarray(fn.coeff, dtype=complex).copy()
    u[fn.anchor_pos()] -= 1.0
    l1 = float(np.sum(np.abs(u)))

    span = int(np.max(np.abs(offsets))) if len(offsets) else 0
    n = 1 << max(5, math.ceil(math.log2(4 * (span + 1))))
    c = np.zeros((n, n), dtype=complex)
    np.add.at(c, (offsets[:, 0] % n, offsets[:, 1] % n), u)
    grid_max = float(np.max(np.abs(np.fft.ifft2(c) * n * n)))

    rad = np.max(np.abs(offsets), axis=1)
    ring_radius = np.unique(rad)
    ring_max = np.array([float(np.max(np.abs(u[rad == r]))) for r in ring_radius])
    keep = (ring_radius >= 1) & (ring_max > 0)
    ratio = None
    if keep.sum() >= 2:
        slope = np.polyfit(ring_radius[keep], np.log(ring_max[keep]), 1)[0]
        ratio = float(math.exp(slope))
    return CorrectionRecord(anchor=fn.anchor, offsets=offsets, coeff=u,
                            l1_bound=l1, grid_max=grid_max,
                            ring_radius=ring_radius, ring_max=ring_max,
                            decay_ratio=ratio)


# ---- step comparison -----------------------------------------------------


def extend_modes(cell_prev: CellDescriptor, t_prev: Sequence[float],
                 cell_next: CellDescriptor, t_next: Sequence[float],
                 modes: np.ndarray) -> np.ndarray:
    """Re-map dual indices so every physical momentum is preserved.

    The refined lattice contains the coarse one, so t_prev + m*s_prev =
    t_next + m'*s_next has an integer solution m'; a non-integer residue
    means the quasimomenta do not describe the same physical point.
    """
    phys = dual_vector(cell_prev, np.asarray(modes), np.asarray(t_prev, dtype=float))
    sp_next = np.asarray(cell_next.spacing)
    fidx = (phys - np.asarray(t_next, dtype=float)) / sp_next
    ridx = np.rint(fidx)
    err = np.abs(fidx - ridx)
    bad = np.flatnonzero(np.max(err, axis=1) > 1e-9)
    if len(bad):
        m = modes[bad[0]]
        raise InvariantError(
            f"re-index failure at mode ({int(m[0])}, {int(m[1])}): residue "
            f"{float(np.max(err[bad[0]])):.2e} of the refined spacing")
    return ridx.astype(int)


@dataclass
class StepDelta:
    """Distances between one function and the previous step's extension."""

    steps: tuple[int, int]
    l2: float              # ||Psi_next - ext Psi_prev|| / |Q|^{1/2}
    l1: float              # coefficient l1 difference, the sup-norm surrogate
    lam_delta: float
    lam_bound: float       # c-hat times the potential increment norm
    overlap: float
    align_angle: float     # rotation that made the pairing real positive

    def to_dict(self) -> dict:
        return {"step_from": self.steps[0], "step_to": self.steps[1],
                "l2": self.l2, "l1": self.l1, "lam_delta": self.lam_delta,
                "lam_bound": self.lam_bound, "overlap": self.overlap,
                "align_angle": self.align_angle}


def step_delta(fn_prev: BlochEigenfunction, fn_next: BlochEigenfunction, *,
               w_norm: float, params: Params | None = None) -> StepDelta:
    """Convergence record between consecutive steps at one physical point.

    w_norm is the l1 norm of the potential increment the later step added;
    the eigenvalue movement must stay inside c-hat times it.
    """
    pr = params or Params()
    if fn_next.step != fn_prev.step + 1:
        raise InvariantError(
            f"step order: expected consecutive steps, got {fn_prev.step} "
            f"and {fn_next.step}")
    mapped = extend_modes(fn_prev.cell, fn_prev.t, fn_next.cell, fn_next.t,
                          fn_prev.modes)
    ext = {(int(m[0]), int(m[1])): c for m, c in zip(mapped, fn_prev.coeff)}
    nxt = fn_next.table()
    union = list(nxt)
    union.extend(m for m in ext if m not in nxt)
    a = np.array([ext.get(m, 0.0) for m in union], dtype=complex)
    b = np.array([nxt.get(m, 0.0) for m in union], dtype=complex)

    ip = complex(np.vdot(a, b))
    if abs(ip) < 1e-12:
        raise InvariantError("steps nearly orthogonal; phase alignment undefined")
    b = b * (ip.conjugate() / abs(ip))
    diff = b - a
    lam_delta = abs(fn_next.lam - fn_prev.lam)
    bound = pr.step_delta_c * w_norm
    slack = 10 * pr.lambda_tol * max(1.0, abs(fn_prev.lam))
    if lam_delta > bound + slack:
        raise InvariantError(
            f"eigenvalue step delta {lam_delta:.3e} exceeds the increment "
            f"bound {bound:.3e}")
    return StepDelta(steps=(fn_prev.step, fn_next.step),
                     l2=float(np.linalg.norm(diff)),
                     l1=float(np.sum(np.abs(diff))),
                     lam_delta=lam_delta, lam_bound=bound,
                     overlap=float(abs(ip)),
                     align_angle=float(math.atan2(ip.imag, ip.real)))


# ---- real-space residual -------------------------------------------------


@dataclass
class ResidualReport:
    grid: tuple[int, int]
    h: tuple[float, float]
    residual: float            # RMS of (-Lap_h + V - lam) Psi on the grid
    floor: float               # exact per-mode symbol-defect RMS
    excess: float              # residual minus floor
    lam: float
    points_per_wave: float
    n_modes: int

    def to_dict(self) -> dict:
        return {"grid": list(self.grid), "h": list(self.h),
                "residual": self.residual, "floor": self.floor,
                "excess": self.excess, "lam": self.lam,
                "points_per_wave": self.points_per_wave,
                "n_modes": self.n_modes}


def _twisted_roll(a: np.ndarray, shift: int, axis: int, phase: complex) -> np.ndarray:
    """Periodic roll with the Bloch boundary twist on the wrapped slice."""
    out = np.roll(a, shift, axis=axis)
    sel = [slice(None)] * a.ndim
    if shift > 0:
        sel[axis] = slice(0, shift)
        out[tuple(sel)] *= phase
    else:
        sel[axis] = slice(shift, None)
        out[tuple(sel)] *= np.conj(phase)
    return out


def residual_check(fn: BlochEigenfunction, grid: int | None = None, *,
                   params: Params | None = None) -> ResidualReport:
    """Five-point-Laplacian residual of Psi on its period cell.

    The grid must leave at least four points per shortest retained
    wavelength and keep every potential-times-function product mode below
    the fold, so the only discretization error is the Laplacian symbol
    defect, which is computed exactly per mode and reported as the floor.
    """
    d1, d2 = fn.cell.periods
    sp1, sp2 = fn.cell.spacing
    freq = dual_vector(fn.cell, fn.modes, np.asarray(fn.t, dtype=float))
    fmax = np.max(np.abs(freq), axis=0)
    mmax = np.max(np.abs(fn.modes), axis=0) if len(fn.modes) else np.zeros(2)
    qmax = np.zeros(2)
    if fn.coeffs:
        qmax = np.array([max(abs(q[0]) for q in fn.coeffs),
                         max(abs(q[1]) for q in fn.coeffs)], dtype=float)
    need = np.maximum(MIN_POINTS_PER_WAVE * fmax / np.array([sp1, sp2]),
                      2 * (mmax + qmax) + 2)
    if grid is None:
        n1 = 1 << max(5, math.ceil(math.log2(max(need[0], 1.0))))
        n2 = 1 << max(5, math.ceil(math.log2(max(need[1], 1.0))))
    else:
        n1 = n2 = int(grid)
        if n1 < need[0] or n2 < need[1]:
            raise InvariantError(
                f"grid {grid} under-resolved: needs at least "
                f"({math.ceil(need[0])}, {math.ceil(need[1])}) for four "
                "points per wavelength and an unfolded potential product")
    h1, h2 = d1 / n1, d2 / n2

    c = np.zeros((n1, n2), dtype=complex)
    np.add.at(c, (fn.modes[:, 0] % n1, fn.modes[:, 1] % n2),
              np.asarray(fn.coeff, dtype=complex))
    x1 = (np.arange(n1) * h1)[:, None]
    x2 = (np.arange(n2) * h2)[None, :]
    psi = np.fft.ifft2(c) * (n1 * n2) * np.exp(1j * (fn.t[0] * x1 + fn.t[1] * x2))

    v = np.zeros((n1, n2), dtype=complex)
    for q, w in fn.coeffs.items():
        v += complex(w) * np.exp(1j * ((q[0] * sp1) * x1 + (q[1] * sp2) * x2))
    if np.max(np.abs(v.imag)) > 1e-9 * (1.0 + np.max(np.abs(v.real))):
        raise InvariantError("potential is not Hermitian-symmetric on the grid")
    v = v.real

    lap = ((2 * psi
            - _twisted_roll(psi, 1, 0, np.exp(-1j * fn.t[0] * d1))
            - _twisted_roll(psi, -1, 0, np.exp(-1j * fn.t[0] * d1))) / h1 ** 2
           + (2 * psi
              - _twisted_roll(psi, 1, 1, np.exp(-1j * fn.t[1] * d2))
              - _twisted_roll(psi, -1, 1, np.exp(-1j * fn.t[1] * d2))) / h2 ** 2)
    res = lap + (v - fn.lam) * psi
    residual = float(np.sqrt(np.mean(np.abs(res) ** 2)))

    sym = ((4 / h1 ** 2) * np.sin(freq[:, 0] * h1 / 2) ** 2
           + (4 / h2 ** 2) * np.sin(freq[:, 1] * h2 / 2) ** 2)
    defect = sym - np.sum(freq * freq, axis=1)
    floor = float(np.linalg.norm(np.abs(fn.coeff) * defect))

    ppw = float(min(n1 * sp1 / fmax[0] if fmax[0] > 0 else math.inf,
                    n2 * sp2 / fmax[1] if fmax[1] > 0 else math.inf))
    return ResidualReport(grid=(n1, n2), h=(h1, h2), residual=residual,
                          floor=floor, excess=residual - floor, lam=fn.lam,
                          points_per_wave=ppw, n_modes=len(fn.modes))
