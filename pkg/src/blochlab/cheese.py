"""Resonance geometry on the angle circle.

Everything here lives on the circle of directions phi for quasimomenta
tau = k nu(phi).  A step of the recursion removes small disks (complex
angle-plane disks and real closure intervals) around directions where some
lattice mode comes too close to the running energy shell; what survives is
the good angle set on which the perturbation series is audited to converge
with a unique pole inside its contour.

Desk calibration.  The disk radii are anchored to the working contour
clearance ehat0 = k^(2 beta - 1 - s1 - delta) rather than to asymptotic
powers of k alone: at bench values of k the classical radii either blanket
the circle or underprotect the product audit.  The calibrated widths keep
the branch structure (small-momentum, main, tangential) and the
transversality dependence through the neighbor functional Pi, and every
build is closed by a hard audit of the resulting good set.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import scipy.optimize

from .errors import InvariantError, NumericAbort
from .lattice import CellDescriptor, assemble_bloch_matrix
from .params import Params

TWO_PI = 2.0 * math.pi

# branch codes used across disk families
BRANCH_SMALL = 1      # step-1, p <= 4 k^{s1}
BRANCH_MAIN = 2       # step-1, generic transversal
BRANCH_TANGENTIAL = 3 # step-1, shell-tangent
BRANCH_PAIR = 4       # step-1 pairwise product closure (interval, not a disk)
BRANCH_SHIFT_ZERO = 11
BRANCH_SHIFT_TINY = 12
BRANCH_SHIFT_MAIN = 13
BRANCH_SHIFT_TANG = 14
BRANCH_SHIFT_FLAT = 15
BRANCH_SMALL_B = 21
BRANCH_POLE = 31


# ---------------------------------------------------------------------------
# angle sets

def _union_sorted(lo: np.ndarray, hi: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Union a batch of intervals already clipped to [0, 2 pi)."""
    if lo.size == 0:
        return lo, hi
    order = np.argsort(lo, kind="stable")
    lo, hi = lo[order], hi[order]
    run = np.maximum.accumulate(hi)
    fresh = np.concatenate([[True], lo[1:] > run[:-1]])
    starts = lo[fresh]
    ends = np.maximum.reduceat(hi, np.flatnonzero(fresh))
    return starts, ends


def wrap_intervals(lo: np.ndarray, hi: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Reduce intervals mod 2 pi, splitting any that cross the seam."""
    lo = np.asarray(lo, dtype=float)
    hi = np.asarray(hi, dtype=float)
    width = hi - lo
    if np.any(width < 0):
        raise InvariantError("interval with negative width")
    full = width >= TWO_PI
    a = lo % TWO_PI
    b = a + width
    cross = (b > TWO_PI) & ~full
    out_lo = [a[~full], np.zeros(int(cross.sum()))]
    out_hi = [np.minimum(b[~full], TWO_PI), (b[cross] - TWO_PI)]
    if np.any(full):
        out_lo.append(np.zeros(1))
        out_hi.append(np.array([TWO_PI]))
    return np.concatenate(out_lo), np.concatenate(out_hi)


@dataclass(frozen=True)
class AngleSet:
    """Disjoint sorted half-open angle intervals within [0, 2 pi)."""

    starts: np.ndarray
    ends: np.ndarray

    def __post_init__(self):
        s, e = self.starts, self.ends
        if s.shape != e.shape:
            raise InvariantError("angle set arrays disagree in shape")
        if s.size:
            if np.any(e <= s) or np.any(s[1:] < e[:-1]):
                raise InvariantError("angle set intervals not sorted-disjoint")
            if s[0] < 0 or e[-1] > TWO_PI:
                raise InvariantError("angle set outside the principal circle")

    @classmethod
    def full_circle(cls) -> "AngleSet":
        return cls(np.array([0.0]), np.array([TWO_PI]))

    @classmethod
    def from_intervals(cls, lo, hi) -> "AngleSet":
        a, b = wrap_intervals(np.asarray(lo, float), np.asarray(hi, float))
        return cls(*_union_sorted(a, b))

    @property
    def measure(self) -> float:
        return float(np.sum(self.ends - self.starts))

    def subtract(self, lo, hi) -> "AngleSet":
        """Remove the union of the given intervals (any real endpoints)."""
        a, b = wrap_intervals(np.asarray(lo, float), np.asarray(hi, float))
        a, b = _union_sorted(a, b)
        if a.size == 0:
            return self
        out_s, out_e = [], []
        for s, e in zip(self.starts, self.ends):
            cur = s
            j0 = np.searchsorted(b, cur, side="right")
            for a_j, b_j in zip(a[j0:], b[j0:]):
                if a_j >= e:
                    break
                if a_j > cur:
                    out_s.append(cur)
                    out_e.append(a_j)
                cur = max(cur, b_j)
                if cur >= e:
                    break
            if cur < e:
                out_s.append(cur)
                out_e.append(e)
        return AngleSet(np.array(out_s, float), np.array(out_e, float))

    def union(self, other: "AngleSet") -> "AngleSet":
        lo = np.concatenate([self.starts, other.starts])
        hi = np.concatenate([self.ends, other.ends])
        return AngleSet(*_union_sorted(lo, hi))

    def contains(self, phi) -> np.ndarray:
        phi = np.asarray(phi, dtype=float) % TWO_PI
        idx = np.searchsorted(self.starts, phi, side="right") - 1
        ok = idx >= 0
        out = np.zeros(phi.shape, dtype=bool)
        out[ok] = phi[ok] < self.ends[idx[ok]]
        return out

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        """Uniform angles from the set (length-weighted)."""
        if self.measure <= 0:
            raise InvariantError("cannot sample an empty angle set")
        w = self.ends - self.starts
        cum = np.cumsum(w)
        u = rng.uniform(0.0, cum[-1], size=n)
        idx = np.searchsorted(cum, u, side="right")
        idx = np.minimum(idx, len(w) - 1)
        return self.starts[idx] + (u - (cum[idx] - w[idx]))

    def to_rows(self):
        for s, e in zip(self.starts, self.ends):
            yield {"start": s, "end": e}


def measure_of_angle_set(base: AngleSet, removals: Sequence[tuple[float, float]] | None = None,
                         disks: "DiskSet | None" = None) -> float:
    """Measure of base minus interval removals minus disk real traces."""
    lo_list: list[np.ndarray] = []
    hi_list: list[np.ndarray] = []
    if removals is not None:
        arr = np.asarray(removals, dtype=float).reshape(-1, 2)
        lo_list.append(arr[:, 0])
        hi_list.append(arr[:, 1])
    if disks is not None:
        a, b = disks.real_traces()
        lo_list.append(a)
        hi_list.append(b)
    if not lo_list:
        return base.measure
    return base.subtract(np.concatenate(lo_list), np.concatenate(hi_list)).measure


# ---------------------------------------------------------------------------
# disks

@dataclass
class DiskSet:
    """Struct-of-arrays bag of angle-plane disks."""

    mode: np.ndarray      # (n, 2) int lattice indices
    center: np.ndarray    # (n,) complex angle centers
    radius: np.ndarray    # (n,) float
    branch: np.ndarray    # (n,) int branch code
    step: np.ndarray      # (n,) int recursion step
    shift: np.ndarray     # (n, 2) float quasimomentum shift

    def __len__(self) -> int:
        return len(self.radius)

    @classmethod
    def empty(cls) -> "DiskSet":
        z = np.zeros(0)
        return cls(np.zeros((0, 2), int), z.astype(complex), z.copy(),
                   np.zeros(0, int), np.zeros(0, int), np.zeros((0, 2)))

    @classmethod
    def build(cls, mode, center, radius, branch, step: int, shift) -> "DiskSet":
        n = len(radius)
        return cls(np.asarray(mode, int).reshape(n, 2),
                   np.asarray(center, complex),
                   np.asarray(radius, float),
                   np.asarray(branch, int),
                   np.full(n, step, int),
                   np.broadcast_to(np.asarray(shift, float), (n, 2)).copy())

    def select(self, mask: np.ndarray) -> "DiskSet":
        return DiskSet(self.mode[mask], self.center[mask], self.radius[mask],
                       self.branch[mask], self.step[mask], self.shift[mask])

    def concat(self, other: "DiskSet") -> "DiskSet":
        return DiskSet(*(np.concatenate([a, b], axis=0)
                         for a, b in zip(self.__dict__.values(), other.__dict__.values())))

    def real_traces(self) -> tuple[np.ndarray, np.ndarray]:
        """Intersections with the real axis: half-length sqrt(r^2 - Im(c)^2)."""
        im = np.abs(self.center.imag)
        cut = im < self.radius
        half = np.sqrt(self.radius[cut] ** 2 - im[cut] ** 2)
        re = self.center.real[cut]
        return wrap_intervals(re - half, re + half)

    def to_rows(self):
        for i in range(len(self)):
            yield {
                "re_center": self.center.real[i], "im_center": self.center.imag[i],
                "radius": self.radius[i], "m1": int(self.mode[i, 0]),
                "m2": int(self.mode[i, 1]), "branch": int(self.branch[i]),
                "step": int(self.step[i]), "shift1": self.shift[i, 0],
                "shift2": self.shift[i, 1],
            }


# ---------------------------------------------------------------------------
# resonance primitives

def resonance_angles(k: float, modes, shift=(0.0, 0.0), cell: CellDescriptor | None = None
                     ) -> dict:
    """Angles where |tau + v|^2 = k^2 on the ring tau = k nu(phi).

    v runs over the (possibly shifted) dual vectors of the given modes.  For
    |v| > 2k the two solutions leave the real axis through the complex
    arccos; the bilinear square (no conjugation) still vanishes there
    identically, which is what the residual criterion checks.
    """
    modes = np.asarray(modes, dtype=float).reshape(-1, 2)
    if cell is not None:
        modes = modes * np.asarray(cell.spacing)
    v = modes + np.asarray(shift, dtype=float)
    p = np.hypot(v[:, 0], v[:, 1])
    if np.any(p == 0):
        raise InvariantError("resonance angles undefined at the anchor mode")
    phi_v = np.arctan2(v[:, 1], v[:, 0])
    half = np.arccos((-p / (2.0 * k)).astype(complex))
    return {
        "plus": phi_v + half,
        "minus": phi_v - half,
        "direction": phi_v,
        "p": p,
        "v": v,
    }


def resonance_residual(k: float, v: np.ndarray, phi: np.ndarray) -> np.ndarray:
    """|<tau + v, tau + v>_* - k^2| at complex phi (bilinear square)."""
    v = np.asarray(v, dtype=float).reshape(-1, 2)
    w0 = k * np.cos(phi) + v[:, 0]
    w1 = k * np.sin(phi) + v[:, 1]
    return np.abs(w0 * w0 + w1 * w1 - k * k)


def neighbor_modes(k: float, cell: CellDescriptor, params: Params | None = None) -> np.ndarray:
    """All dual vectors with 0 < |q| < k^{s1}; independent of the potential."""
    pr = params or Params()
    cut = k ** pr.s1
    sp = np.asarray(cell.spacing)
    r0 = int(math.ceil(cut / sp[0]))
    r1 = int(math.ceil(cut / sp[1]))
    g0 = np.arange(-r0, r0 + 1)
    g1 = np.arange(-r1, r1 + 1)
    qq = np.array([(a * sp[0], b * sp[1]) for a in g0 for b in g1])
    norm2 = np.sum(qq * qq, axis=1)
    qq = qq[(norm2 > 0) & (norm2 < cut * cut)]
    if len(qq) == 0:
        raise InvariantError("no neighbor modes inside the transversality radius")
    return qq


def pi_m(k: float, phi_centers: np.ndarray, v: np.ndarray, neighbors: np.ndarray,
         params: Params | None = None, chunk: int = 250_000) -> np.ndarray:
    """Transversality functional: min_q |<k nu(phi*) + v, q>_*| + k^{2 s1}.

    Streams over chunks; the minimum runs over the neighbor set and the
    floor k^{2 s1} keeps it positive when the shell vector grazes a
    neighbor direction.
    """
    pr = params or Params()
    floor = k ** (2 * pr.s1)
    phi_centers = np.asarray(phi_centers)
    v = np.asarray(v, dtype=float).reshape(-1, 2)
    out = np.empty(len(v), dtype=float)
    for lo in range(0, len(v), chunk):
        hi = min(lo + chunk, len(v))
        c = phi_centers[lo:hi]
        u0 = k * np.cos(c) + v[lo:hi, 0]
        u1 = k * np.sin(c) + v[lo:hi, 1]
        ip = np.abs(u0[:, None] * neighbors[:, 0] + u1[:, None] * neighbors[:, 1])
        out[lo:hi] = ip.min(axis=1) + floor
    return out


def disk_radius(k: float, p: np.ndarray, pi: np.ndarray, params: Params | None = None
                ) -> tuple[np.ndarray, np.ndarray]:
    """Step-1 disk radii, three branches by momentum size and shell angle.

    Branch 1 (p <= 4 k^{s1}): neighbor-scale modes; the width also protects
    the neighbor-denominator audit for p below k^{s1}.  Branch 2: generic
    transversal width, clearance over slope.  Branch 3: shell-tangent
    square-root widening.  All radii must come out below one radian.
    """
    pr = params or Params()
    p = np.asarray(p, dtype=float)
    pi = np.asarray(pi, dtype=float)
    if np.any(p >= 4.0 * k):
        raise InvariantError("mode outside strip relevance (|v| >= 4k)")
    if np.any(p <= 0):
        raise InvariantError("disk radius undefined at the anchor mode")
    ehat0 = pr.contour_radius(1, k)
    thr_nb = k ** (1.0 - 3.0 * pr.s1 - pr.delta)
    floor_pi = k ** (2 * pr.s1)
    boost = 1.0 + floor_pi / pi
    clearance = 1.05 * ehat0 * boost
    small = p < k ** pr.s1
    clearance = np.where(small, np.maximum(clearance, 0.75 * thr_nb), clearance)
    sfac2 = np.abs(1.0 - p * p / (4.0 * k * k))
    tangential = sfac2 < clearance / (k * p)
    slope = 2.0 * k * p * np.sqrt(sfac2)
    with np.errstate(divide="ignore"):
        r = np.where(tangential, np.sqrt(clearance / (k * p)), clearance / slope)
    branch = np.where(p <= 4.0 * k ** pr.s1, BRANCH_SMALL,
                      np.where(tangential, BRANCH_TANGENTIAL, BRANCH_MAIN))
    if np.any(r >= 1.0):
        raise InvariantError("resonance disk radius reached one radian")
    return r, branch


# ---------------------------------------------------------------------------
# geometric audit

@dataclass
class GeometricAudit:
    n_samples: int
    single_min: float
    product_min: float
    neighbor_min: float
    single_threshold: float
    product_threshold: float
    neighbor_threshold: float
    violations: int

    @property
    def clean(self) -> bool:
        return self.violations == 0


def audit_geometric(cell: CellDescriptor, k: float, phis: np.ndarray,
                    params: Params | None = None) -> GeometricAudit:
    """Check the separation inequalities at real directions phi.

    For tau = k nu(phi) with the anchor exactly on the shell: every other
    mode clears the contour radius; every coupled pair (i, i+q) with q in
    the neighbor set keeps 4 |p_i^2 - k^2| |p_{i+q}^2 - k^2| above k^{2 beta};
    and the neighbor denominators at the anchor stay above
    k^{1 - 3 s1 - delta} / 2.  Pairs with both factors beyond 4k clear the
    product threshold automatically, so the scan restricts to the shell
    annulus.
    """
    pr = params or Params()
    sp = np.asarray(cell.spacing)
    ehat0 = pr.contour_radius(1, k)
    thr_prod = k ** (2 * pr.beta)
    thr_nb = k ** (1.0 - 3.0 * pr.s1 - pr.delta)
    Q = neighbor_modes(k, cell, pr)
    b0 = int(math.ceil((2 * k + 5) / sp[0]))
    b1 = int(math.ceil((2 * k + 5) / sp[1]))
    g0 = np.arange(-b0, b0 + 1) * sp[0]
    g1 = np.arange(-b1, b1 + 1) * sp[1]
    bx, by = np.meshgrid(g0, g1, indexing="ij")
    ball = np.stack([bx.ravel(), by.ravel()], axis=1)
    nz = (ball[:, 0] != 0) | (ball[:, 1] != 0)
    phis = np.atleast_1d(np.asarray(phis, dtype=float))
    mins = np.array([np.inf, np.inf, np.inf])
    viol = 0
    for phi in phis:
        t = k * np.array([math.cos(phi), math.sin(phi)])
        f = np.abs((t[0] + ball[:, 0]) ** 2 + (t[1] + ball[:, 1]) ** 2 - k * k)
        single = f[nz].min()
        fq = np.abs((t[0] + Q[:, 0]) ** 2 + (t[1] + Q[:, 1]) ** 2 - k * k)
        nb = 2.0 * fq.min()
        sm = nz & (f <= 4.0 * k)
        bs = ball[sm]
        fs = f[sm]
        best = np.inf
        for q in Q:
            g = np.abs((t[0] + bs[:, 0] + q[0]) ** 2 + (t[1] + bs[:, 1] + q[1]) ** 2 - k * k)
            alive = ((bs[:, 0] + q[0]) != 0) | ((bs[:, 1] + q[1]) != 0)
            if np.any(alive):
                best = min(best, float((4.0 * fs[alive] * g[alive]).min()))
        mins = np.minimum(mins, [single, best, nb])
        if single <= ehat0 or best <= thr_prod or nb <= thr_nb:
            viol += 1
    return GeometricAudit(len(phis), float(mins[0]), float(mins[1]), float(mins[2]),
                          ehat0, thr_prod, thr_nb, viol)


# ---------------------------------------------------------------------------
# the first cheese

@dataclass
class FirstCheese:
    k: float
    disks: DiskSet
    pair_windows: np.ndarray      # (m, 2) closed intervals from product closure
    theta: AngleSet
    strip: float
    covered: float
    audit: GeometricAudit
    neighbors: np.ndarray

    def sample_tau(self, n: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
        phis = self.theta.sample(n, rng)
        tau = self.k * np.stack([np.cos(phis), np.sin(phis)], axis=1)
        return phis, tau


def build_first_cheese(cell: CellDescriptor, k: float, params: Params | None = None,
                       audit_samples: int = 200, rng: np.random.Generator | None = None,
                       keep: str = "real") -> FirstCheese:
    """Remove the step-1 resonance disks and product closures from the circle.

    An audit of the surviving set is part of the build: violations are a
    hard failure, as is a fully resonant circle.  keep selects which disks
    are retained in the result ("real" traces only, "strip", or "all");
    the removal itself always uses everything.
    """
    pr = params or Params()
    if rng is None:
        rng = np.random.default_rng(pr.seed)
    sp = np.asarray(cell.spacing)
    ehat0 = pr.contour_radius(1, k)
    thr_nb = k ** (1.0 - 3.0 * pr.s1 - pr.delta)
    floor_pi = k ** (2 * pr.s1)
    T = k ** (2 * pr.beta)
    fstar = math.sqrt(0.3 * T)
    strip = k ** (-pr.delta)
    Q = neighbor_modes(k, cell, pr)
    qmax2 = float(np.max(np.sum(Q * Q, axis=1)))
    if 0.75 * thr_nb < qmax2:
        raise InvariantError("neighbor clearance below the coupling scale; k too small")

    n0 = int(math.floor(4 * k / sp[0])) + 1
    n1 = int(math.floor(4 * k / sp[1])) + 1
    g0 = np.arange(-n0, n0 + 1)
    g1 = np.arange(-n1, n1 + 1)
    mx, my = np.meshgrid(g0, g1, indexing="ij")
    modes = np.stack([mx.ravel(), my.ravel()], axis=1)
    v = modes * sp
    p = np.hypot(v[:, 0], v[:, 1])
    live = (p > 0) & (p < 4.0 * k)
    modes, v, p = modes[live], v[live], p[live]

    kept: list[DiskSet] = []
    acc = (np.zeros(0), np.zeros(0))

    def flush(lo, hi):
        nonlocal acc
        a, b = wrap_intervals(lo, hi)
        acc = _union_sorted(np.concatenate([acc[0], a]), np.concatenate([acc[1], b]))

    chunk = 200_000
    for start in range(0, len(p), chunk):
        stop = min(start + chunk, len(p))
        mm = modes[start:stop]
        vv = v[start:stop]
        pp = p[start:stop]
        phim = np.arctan2(vv[:, 1], vv[:, 0])
        half = np.arccos((-pp / (2.0 * k)).astype(complex))
        for sgn, cen in ((1, phim + half), (-1, phim - half)):
            pi_vals = pi_m(k, cen, vv, Q, pr)
            r, branch = disk_radius(k, pp, pi_vals, pr)
            im = np.abs(cen.imag)
            # per-mode disks
            hit = im < r
            if np.any(hit):
                L = np.sqrt(r[hit] ** 2 - im[hit] ** 2)
                flush(cen.real[hit] - L, cen.real[hit] + L)
            # pairwise product closure windows, one per neighbor direction
            u0 = k * np.cos(cen) + vv[:, 0]
            u1 = k * np.sin(cen) + vv[:, 1]
            spq = u0[:, None] * Q[:, 0] + u1[:, None] * Q[:, 1]
            F = np.abs(2.0 * spq + np.sum(Q * Q, axis=1))
            pj = np.hypot(vv[:, None, 0] + Q[None, :, 0], vv[:, None, 1] + Q[None, :, 1])
            alive = pj > 0
            pj = np.where(alive, pj, 1.0)
            sfj2 = np.abs(1.0 - pj * pj / (4.0 * k * k))
            sj = np.maximum(2.0 * k * pj * np.sqrt(sfj2), 2.0 * np.sqrt(0.3 * T * k * pj))
            sfac2 = np.abs(1.0 - pp * pp / (4.0 * k * k))
            si = np.maximum(2.0 * k * pp * np.sqrt(sfac2), 2.0 * np.sqrt(0.3 * T * k * pp))
            W = np.where(F > fstar, 0.72 * T / (si[:, None] * np.maximum(F, fstar)),
                         np.sqrt(0.72 * T / (si[:, None] * sj)))
            W = np.where(alive, W, 0.0)
            win = im[:, None] < W
            if np.any(win):
                Lw = np.sqrt(W[win] ** 2 - np.broadcast_to(im[:, None], W.shape)[win] ** 2)
                cw = np.broadcast_to(cen.real[:, None], W.shape)[win]
                flush(cw - Lw, cw + Lw)
            if keep == "all":
                sel = np.ones(len(pp), bool)
            elif keep == "strip":
                sel = im < strip + r
            else:
                sel = hit
            if np.any(sel):
                kept.append(DiskSet.build(mm[sel], cen[sel], r[sel], branch[sel], 1, (0.0, 0.0)))

    removed = acc
    covered = float(np.sum(removed[1] - removed[0]))
    theta = AngleSet.full_circle().subtract(removed[0], removed[1])
    if theta.measure <= 0.0:
        raise InvariantError("fully resonant: the disks cover every direction")
    disks = DiskSet.empty()
    for d in kept:
        disks = disks.concat(d)
    phis = theta.sample(audit_samples, rng)
    audit = audit_geometric(cell, k, phis, pr)
    if not audit.clean:
        raise InvariantError(
            f"geometric audit failed on the surviving set: {audit.violations} of "
            f"{audit.n_samples} samples violate the separation bounds")
    pair = np.stack(removed, axis=1) if removed[0].size else np.zeros((0, 2))
    return FirstCheese(k, disks, pair, theta, strip, covered, audit, Q)


# ---------------------------------------------------------------------------
# shifted cheese (steps >= 2)

def _potential_info(cell: CellDescriptor, coeffs) -> tuple[np.ndarray, float]:
    """Scaled coupling vectors and the off-diagonal row l1 norm."""
    sp = np.asarray(cell.spacing)
    qs, ws = [], []
    for q, w in coeffs.items():
        if q == (0, 0):
            continue
        qs.append((q[0] * sp[0], q[1] * sp[1]))
        ws.append(abs(w))
    if not qs:
        return np.zeros((0, 2)), 0.0
    return np.asarray(qs, float), float(np.sum(ws))


@dataclass(frozen=True)
class ShiftContext:
    b: tuple[float, float]        # folded into the dual cell
    corner: tuple[float, float]   # nearest cell corner
    offset: tuple[float, float]   # b - corner
    b0: float
    phi_b: float
    threshold: float
    regime: str                   # "lattice" | "small" | "regular"


def classify_shift(cell: CellDescriptor, k: float, b, step: int = 2,
                   params: Params | None = None) -> ShiftContext:
    """Fold the shift and measure its distance to the nearest cell corner.

    The corner distance b0 decides the regime: below the threshold the
    tangential pair of crossings must be resolved by the cosine equation
    rather than by resonance disks.
    """
    pr = params or Params()
    sp = np.asarray(cell.spacing)
    b = np.asarray(b, dtype=float)
    bf = b - np.floor(b / sp) * sp
    corners = np.array([[0.0, 0.0], [sp[0], 0.0], [0.0, sp[1]], [sp[0], sp[1]]])
    d = np.hypot(*(bf - corners).T)
    i = int(np.argmin(d))
    off = bf - corners[i]
    b0 = float(d[i])
    thr = pr.small_b_threshold(step, k)
    if b0 == 0.0:
        regime = "lattice"
    elif b0 < thr:
        regime = "small"
    else:
        regime = "regular"
    return ShiftContext(tuple(bf), tuple(corners[i]), tuple(off), b0,
                        float(math.atan2(off[1], off[0])), thr, regime)


@dataclass
class ShiftedCheese:
    b: tuple[float, float]
    step: int
    context: ShiftContext
    disks: DiskSet
    removed: np.ndarray           # (m, 2) union of real traces
    clearance: float              # free-energy clearance target
    sigma_max: float              # largest perturbation budget used
    components: list[dict]        # enclosing circles of overlapping disks


def shifted_disk_radius(k: float, p: np.ndarray, sigma: np.ndarray, is_zero: np.ndarray,
                        step: int, params: Params | None = None
                        ) -> tuple[np.ndarray, np.ndarray]:
    """Five-branch shifted radii around free resonance angles.

    The clearance is the step contour radius plus the per-mode perturbation
    budget sigma; branch labels follow the classical split (zero mode, tiny
    momentum, generic, tangential, saturated) while all widths come from
    the clearance-over-slope rule.
    """
    pr = params or Params()
    p = np.asarray(p, dtype=float)
    sigma = np.asarray(sigma, dtype=float)
    need = 1.05 * pr.contour_radius(step, k) + sigma
    sfac2 = np.abs(1.0 - p * p / (4.0 * k * k))
    tang = sfac2 < need / (k * p)
    with np.errstate(divide="ignore"):
        r = np.where(tang, np.sqrt(need / (k * p)),
                     need / (2.0 * k * p * np.sqrt(sfac2)))
    branch = np.full(p.shape, BRANCH_SHIFT_MAIN, dtype=int)
    branch[tang] = BRANCH_SHIFT_TANG
    branch[p < k ** (1.0 - 8.0 * pr.s1 - 4.0 * pr.delta)] = BRANCH_SHIFT_TINY
    branch[is_zero] = BRANCH_SHIFT_ZERO
    cap = pr.shifted_radius_cap
    over = r > cap
    r = np.where(over, cap, r)
    branch[over] = BRANCH_SHIFT_FLAT
    return r, branch


def build_shifted_cheese(cell: CellDescriptor, coeffs, k: float, b, step: int = 2,
                         params: Params | None = None) -> ShiftedCheese:
    """Disks protecting the step contour from one shifted copy of the lattice.

    Perturbed eigenvalues of the shifted operator live within sigma of the
    free energies, where sigma is the Gershgorin row norm, refined to a
    second-order bound 2 w^2 / gap when the coupled-mode gap at the
    resonance angle is comfortably larger than the coupling.  Removing the
    widened free-resonance disks therefore keeps the whole perturbed
    spectrum off the contour.
    """
    pr = params or Params()
    ctx = classify_shift(cell, k, b, step, pr)
    if ctx.regime == "lattice":
        raise InvariantError("shift is a dual lattice vector; no new spectrum")
    sp = np.asarray(cell.spacing)
    qv, w_l1 = _potential_info(cell, coeffs)
    bf = np.asarray(ctx.b)

    n0 = int(math.floor((4 * k) / sp[0])) + 2
    n1 = int(math.floor((4 * k) / sp[1])) + 2
    g0 = np.arange(-n0, n0 + 1)
    g1 = np.arange(-n1, n1 + 1)
    mx, my = np.meshgrid(g0, g1, indexing="ij")
    modes = np.stack([mx.ravel(), my.ravel()], axis=1)
    v = modes * sp + bf
    p = np.hypot(v[:, 0], v[:, 1])
    live = (p > 0) & (p < 4.0 * k)
    modes, v, p = modes[live], v[live], p[live]
    is_zero = (modes[:, 0] == 0) & (modes[:, 1] == 0)

    phim = np.arctan2(v[:, 1], v[:, 0])
    half = np.arccos((-p / (2.0 * k)).astype(complex))
    packs = []
    sigma_max = 0.0
    for cen in (phim + half, phim - half):
        if len(qv):
            u0 = k * np.cos(cen) + v[:, 0]
            u1 = k * np.sin(cen) + v[:, 1]
            gap = np.abs(2.0 * (u0[:, None] * qv[:, 0] + u1[:, None] * qv[:, 1])
                         + np.sum(qv * qv, axis=1)).min(axis=1)
            with np.errstate(divide="ignore"):
                refined = 2.0 * w_l1 * w_l1 / gap
            sigma = np.where(gap > 4.0 * w_l1, refined, w_l1)
        else:
            sigma = np.zeros(len(p))
        sigma_max = max(sigma_max, float(sigma.max(initial=0.0)))
        r, branch = shifted_disk_radius(k, p, sigma, is_zero, step, pr)
        packs.append(DiskSet.build(modes, cen, r, branch, step, tuple(bf)))
    disks = packs[0].concat(packs[1])
    lo, hi = disks.real_traces()
    lo, hi = _union_sorted(lo, hi)
    removed = np.stack([lo, hi], axis=1) if lo.size else np.zeros((0, 2))

    comps = []
    if lo.size:
        spans = [(float(a), float(bb)) for a, bb in zip(lo, hi)]
        # a component split by the 0 = 2 pi seam is one region of the circle
        if len(spans) > 1 and spans[0][0] <= 1e-12 and spans[-1][1] >= TWO_PI - 1e-12:
            first, last = spans[0], spans[-1]
            spans = [(last[0] - TWO_PI, first[1])] + spans[1:-1]
        cut = np.abs(disks.center.imag) < disks.radius
        mids = disks.center.real[cut] % TWO_PI
        vm = disks.mode[cut] * sp + bf
        pm = np.hypot(vm[:, 0], vm[:, 1])
        sf2 = np.abs(1.0 - pm * pm / (4.0 * k * k))
        slopes = np.maximum(2.0 * k * pm * np.sqrt(sf2), k ** (2 * pr.s1))
        for a, bnd in spans:
            member = ((mids >= a) & (mids <= bnd)) | ((mids - TWO_PI >= a) & (mids - TWO_PI <= bnd))
            if not member.any():
                continue
            mid = 0.5 * (a + bnd)
            rad = 0.5 * (bnd - a)
            comps.append({"lo": a, "hi": bnd,
                          "center": complex(mid), "radius": rad * 1.001 + 1e-12,
                          "n_members": int(member.sum()),
                          "slope_floor": float(slopes[member].min())})
    return ShiftedCheese(tuple(bf), step, ctx, disks, removed,
                         1.05 * pr.contour_radius(step, k), sigma_max, comps)


# ---------------------------------------------------------------------------
# pole counting by the argument principle

@dataclass
class PoleCountResult:
    winding: np.ndarray       # zeros of the block determinant inside each disk
    free_count: np.ndarray    # free resonance angles of the same block inside
    nodes_used: np.ndarray
    block_size: np.ndarray
    boundary_clearance: np.ndarray
    block_stable: bool        # windings unchanged under block-margin doubling


def _shifted_modes_near(cell: CellDescriptor, k: float, shift, phi: float, pad: float
                        ) -> np.ndarray:
    """Lattice indices whose shifted energy at tau(phi) is within pad of k^2."""
    sp = np.asarray(cell.spacing)
    reach = math.sqrt(max(k * k + pad, 0.0)) + k + 1.0
    n0 = int(math.ceil(reach / sp[0]))
    n1 = int(math.ceil(reach / sp[1]))
    g0 = np.arange(-n0, n0 + 1)
    g1 = np.arange(-n1, n1 + 1)
    mx, my = np.meshgrid(g0, g1, indexing="ij")
    modes = np.stack([mx.ravel(), my.ravel()], axis=1)
    v = modes * sp + np.asarray(shift, float)
    t = k * np.array([math.cos(phi), math.sin(phi)])
    en = (t[0] + v[:, 0]) ** 2 + (t[1] + v[:, 1]) ** 2
    # the anchor carries the identical zero of the free determinant and is
    # never part of a counting block
    keep = (np.abs(en - k * k) <= pad) & (np.hypot(v[:, 0], v[:, 1]) > 0)
    return modes[keep]


def _coupling_matrix(cell: CellDescriptor, coeffs, modes: np.ndarray) -> np.ndarray:
    diff0 = modes[:, 0][:, None] - modes[:, 0][None, :]
    diff1 = modes[:, 1][:, None] - modes[:, 1][None, :]
    W = np.zeros((len(modes), len(modes)), dtype=complex)
    for q, w in coeffs.items():
        if q == (0, 0):
            continue
        W[(diff0 == q[0]) & (diff1 == q[1])] = w
    return W


def _block_dets(cell: CellDescriptor, W: np.ndarray, modes: np.ndarray, k: float,
                shift, center: complex, radius: float, nodes: int, alpha: float
                ) -> tuple[np.ndarray, np.ndarray]:
    """sign and log|det| of H_block(k nu(phi)) - k^2 on the disk boundary."""
    sp = np.asarray(cell.spacing)
    v = modes * sp + np.asarray(shift, float)
    theta = TWO_PI * np.arange(nodes) / nodes
    z = center + radius * np.exp(1j * theta)
    c0 = k * np.cos(z)
    c1 = k * np.sin(z)
    d = (c0[:, None] + v[:, 0]) ** 2 + (c1[:, None] + v[:, 1]) ** 2 - k * k
    A = np.broadcast_to(alpha * W, (nodes, len(v), len(v))).astype(complex).copy()
    ii = np.arange(len(v))
    A[:, ii, ii] += d
    sign, logabs = np.linalg.slogdet(A)
    return sign, logabs


def _winding_from_dets(sign: np.ndarray, logabs: np.ndarray, radius: float, nodes: int
                       ) -> tuple[float, float, float]:
    """Winding number, max phase step, and a boundary clearance estimate."""
    sr = np.roll(sign, -1)
    dphase = np.angle(sr * np.conj(sign))
    wind = float(np.sum(dphase) / TWO_PI)
    dlog = np.roll(logabs, -1) - logabs
    darc = 2.0 * radius * math.sin(math.pi / nodes)
    rate = np.hypot(dlog, dphase) / max(darc, 1e-300)
    clearance = 1.0 / max(float(rate.max()), 1e-300)
    return wind, float(np.abs(dphase).max()), clearance


def free_resonance_count(cell: CellDescriptor, modes: np.ndarray, k: float, shift,
                         center: complex, radius: float) -> int:
    """Zeros of the free block determinant inside the disk (with multiplicity)."""
    sp = np.asarray(cell.spacing)
    v = modes * sp + np.asarray(shift, float)
    p = np.hypot(v[:, 0], v[:, 1])
    ok = p > 0
    v, p = v[ok], p[ok]
    phim = np.arctan2(v[:, 1], v[:, 0])
    half = np.arccos((-p / (2.0 * k)).astype(complex))
    count = 0
    for cen in (phim + half, phim - half):
        for shiftj in (-TWO_PI, 0.0, TWO_PI):
            count += int(np.sum(np.abs(cen + shiftj - center) < radius))
    return count


def locate_poles_argument_principle(cell: CellDescriptor, coeffs, k: float,
                                    centers, radii, *, shift=(0.0, 0.0),
                                    alpha: float = 1.0,
                                    params: Params | None = None) -> PoleCountResult:
    """Count determinant zeros inside angle disks and compare with free counts.

    The determinant is taken over a local block of modes whose energies at
    the disk center stay within an adaptive margin; windings must be
    integers, reproduce under node doubling, and reproduce under doubling
    of the block margin, otherwise the count aborts as numerically
    unresolved.
    """
    pr = params or Params()
    centers = np.atleast_1d(np.asarray(centers, dtype=complex))
    radii = np.broadcast_to(np.asarray(radii, dtype=float), centers.shape)
    _, w_l1 = _potential_info(cell, coeffs)
    winding = np.zeros(len(centers), dtype=int)
    freec = np.zeros(len(centers), dtype=int)
    nodes_used = np.zeros(len(centers), dtype=int)
    bsize = np.zeros(len(centers), dtype=int)
    clear = np.zeros(len(centers))
    stable = True
    for i, (c, r) in enumerate(zip(centers, radii)):
        winds = []
        for fac in (1.0, 2.0):
            pad = fac * pr.t_loc * (3.2 * k * (abs(c.imag) + r) * k + 4.0 * w_l1 + 1.0)
            modes = _shifted_modes_near(cell, k, shift, float(c.real), pad)
            if len(modes) == 0:
                raise InvariantError("empty local block at a counting disk")
            W = _coupling_matrix(cell, coeffs, modes)
            nodes = max(64, pr.quad_nodes)
            got = None
            while nodes <= pr.quad_max_nodes:
                sign, logabs = _block_dets(cell, W, modes, k, shift, c, r, nodes, alpha)
                if np.any(sign == 0):
                    nodes *= 2
                    continue
                w, dmax, cl = _winding_from_dets(sign, logabs, r, nodes)
                if abs(w - round(w)) > 0.1:
                    nodes *= 2
                    continue
                if dmax < 0.5 * math.pi and got == round(w):
                    break
                got = round(w)
                nodes *= 2
            else:
                raise NumericAbort("winding unresolved at maximum node count")
            if cl < 1e-8:
                raise NumericAbort("pole grazes the counting contour")
            winds.append(int(round(w)))
            if fac == 1.0:
                winding[i] = int(round(w))
                nodes_used[i] = nodes
                bsize[i] = len(modes)
                clear[i] = cl
                freec[i] = free_resonance_count(cell, modes, k, shift, c, r)
        if winds[0] != winds[1]:
            stable = False
    return PoleCountResult(winding, freec, nodes_used, bsize, clear, stable)


# ---------------------------------------------------------------------------
# pole disks

@dataclass
class PoleCheese:
    b: tuple[float, float]
    step: int
    poles: np.ndarray             # complex angle locations
    multiplicity: np.ndarray
    radii: np.ndarray
    component: np.ndarray         # index into the parent component list
    removed: np.ndarray           # (m, 2) real traces of the pole disks
    total_winding: int
    spot_ratio_max: float         # worst resolvent-ceiling ratio observed


def _moments_from_boundary(sign: np.ndarray, logabs: np.ndarray, radius: float,
                           nmax: int) -> tuple[int, np.ndarray]:
    """Power sums of determinant zeros relative to the disk center.

    log f on the boundary splits into i w theta plus a periodic part; the
    periodic part is differentiated spectrally and the contour moments
    follow by the trapezoid rule, which is exponentially accurate here.
    """
    n = len(sign)
    dphase = np.angle(np.roll(sign, -1) * np.conj(sign))
    w = int(round(float(np.sum(dphase)) / TWO_PI))
    theta = TWO_PI * np.arange(n) / n
    phase = np.angle(sign[0]) + np.concatenate([[0.0], np.cumsum(dphase[:-1])])
    pe = logabs + 1j * (phase - w * theta)
    freq = np.fft.fftfreq(n, d=1.0 / n)
    pe_d = np.fft.ifft(1j * freq * np.fft.fft(pe))
    g = 1j * w + pe_d
    zc = radius * np.exp(1j * theta)
    s = np.array([np.sum(zc ** r * g) / (1j * n) for r in range(1, nmax + 1)])
    return w, s


def _roots_from_power_sums(s: np.ndarray) -> np.ndarray:
    """Newton's identities: power sums -> elementary symmetric -> roots."""
    w = len(s)
    e = np.zeros(w + 1, dtype=complex)
    e[0] = 1.0
    for j in range(1, w + 1):
        acc = 0.0 + 0.0j
        for i in range(1, j + 1):
            acc += ((-1) ** (i - 1)) * e[j - i] * s[i - 1]
        e[j] = acc / j
    coeffs = np.array([((-1) ** j) * e[j] for j in range(w + 1)])
    return np.roots(coeffs)


def _dlog_det(cell, W, modes, k, shift, z: complex, alpha: float, h: float) -> complex:
    """d log det / d phi by central differences of (log|f|, arg f)."""
    sign, logabs = _block_dets(cell, W, modes, k, shift, z, h, 2, alpha)
    if np.any(sign == 0):
        raise NumericAbort("determinant underflow during pole refinement")
    dlog = (logabs[0] - logabs[1]) + 1j * np.angle(sign[0] * np.conj(sign[1]))
    return dlog / (2.0 * h)


def _newton_polish(cell, W, modes, k, shift, z0: complex, alpha: float,
                   scale: float, deflate: Sequence[tuple[complex, int]] = ()
                   ) -> complex:
    """Drive a determinant zero to localization accuracy via z -= 1/(log f)'.

    Works on the log-derivative so the determinant magnitude never has to
    be represented; near a zero of multiplicity m the step contracts by
    (1 - 1/m) per iteration, so clusters converge too.  Known zeros can be
    deflated out of the log-derivative, which steers the iteration toward
    zeros not yet represented.
    """
    z = z0
    h = max(1e-7 * scale, 1e-12)
    for _ in range(60):
        g = _dlog_det(cell, W, modes, k, shift, z, alpha, h)
        for zd, md in deflate:
            if z != zd:
                g = g - md / (z - zd)
        if g == 0:
            break
        step = 1.0 / g
        z = z - step
        if abs(step) < 1e-13:
            return z
        h = max(min(h, 0.1 * abs(step)), 1e-12)
    return z


def _certified_winding(cell, W, modes, k, shift, center, radius, alpha, pr):
    nodes = max(64, pr.quad_nodes)
    got = None
    while nodes <= pr.quad_max_nodes:
        sign, logabs = _block_dets(cell, W, modes, k, shift, center, radius, nodes, alpha)
        if np.any(sign == 0):
            nodes *= 2
            continue
        w, dmax, cl = _winding_from_dets(sign, logabs, radius, nodes)
        if abs(w - round(w)) > 0.1:
            nodes *= 2
            continue
        if dmax < 0.5 * math.pi and got == round(w):
            return int(round(w)), sign, logabs, nodes, cl
        got = int(round(w))
        nodes *= 2
    raise NumericAbort("winding unresolved at maximum node count")


def build_pole_cheese(cell: CellDescriptor, coeffs, k: float, shifted: ShiftedCheese,
                      *, alpha: float = 1.0, params: Params | None = None,
                      rng: np.random.Generator | None = None,
                      n_spot: int = 6,
                      components: Sequence[int] | None = None) -> PoleCheese:
    """Locate determinant zeros inside each removed component and cap them.

    Zeros come from boundary moments; each zero (or unresolvable cluster)
    receives a capture disk whose boundary winding must equal its
    multiplicity, expanding by doubling until certified.  Random interior
    spot checks then bound the block resolvent against the slope-distance
    ceiling, so no pole survives outside the capture disks.
    """
    pr = params or Params()
    if rng is None:
        rng = np.random.default_rng(pr.seed)
    _, w_l1 = _potential_info(cell, coeffs)
    base_r = pr.pole_radius(shifted.step, k)
    poles, mults, radii, compix = [], [], [], []
    total = 0
    spot_max = 0.0
    wanted = range(len(shifted.components)) if components is None else components
    for ci in wanted:
        comp = shifted.components[ci]
        c, R = comp["center"], comp["radius"]
        pad = pr.t_loc * (3.2 * k * k * (R + abs(c.imag)) + 4.0 * w_l1 + 1.0)
        modes = _shifted_modes_near(cell, k, shifted.b, float(c.real), pad)
        if len(modes) == 0:
            continue
        W = _coupling_matrix(cell, coeffs, modes)
        w, sign, logabs, nodes, _ = _certified_winding(cell, W, modes, k, shifted.b,
                                                       c, R, alpha, pr)
        if w < 0:
            raise NumericAbort("negative winding for an analytic determinant")
        total += w
        if w == 0:
            continue
        _, s = _moments_from_boundary(sign, logabs, R, w)
        crude = _roots_from_power_sums(s) + c
        cap_r = max(base_r, pr.pole_capture_floor)

        def dedupe(cands, against):
            reps = []
            for z in cands:
                if all(abs(z - u) >= 2.0 * cap_r for u, _ in against) and \
                   all(abs(z - u) >= 2.0 * cap_r for u in reps):
                    reps.append(z)
            return reps

        def measure(z):
            for fac in (1.0, 1.37, 1.9):
                try:
                    return _certified_winding(cell, W, modes, k, shifted.b, z,
                                              fac * cap_r, alpha, pr)[0]
                except NumericAbort:
                    continue
            raise NumericAbort("capture circle grazes a zero at every trial radius")

        # polished candidates, certified multiplicities, deflated recovery of
        # any zeros the ill-conditioned extraction failed to represent
        pts: list[tuple[complex, int]] = []
        cands = [_newton_polish(cell, W, modes, k, shifted.b, z, alpha, R)
                 for z in crude]
        for _ in range(8):
            for z in dedupe(cands, pts):
                m = measure(z)
                if m > 0:
                    pts.append((z, m))
            defect = w - sum(m for _, m in pts)
            if defect == 0:
                break
            if defect < 0:
                raise InvariantError("pole capture overcounts the component winding")
            s_red = s[:defect].copy()
            for z, m in pts:
                s_red -= m * (z - c) ** np.arange(1, defect + 1)
            seeds = _roots_from_power_sums(s_red) + c
            cands = [_newton_polish(cell, W, modes, k, shifted.b, z, alpha, R,
                                    deflate=pts) for z in seeds]
        else:
            raise InvariantError("scale collapse: pole recovery does not settle")

        # assemble capture disks, merging any that touch
        queue = [(z, m, 0.0) for z, m in pts]
        placed: list[tuple[complex, float, int]] = []
        guard = 0
        while queue:
            guard += 1
            if guard > 16 * w + 16:
                raise InvariantError("scale collapse: pole clustering does not settle")
            zc, m, spread = queue.pop()
            rad = max(cap_r, 1.5 * spread)
            while True:
                wc, *_ = _certified_winding(cell, W, modes, k, shifted.b, zc, rad,
                                            alpha, pr)
                if wc == m:
                    break
                rad *= 2.0
                if rad > min(R, cap_r * pr.separation_expand_cap):
                    raise InvariantError(
                        "scale collapse: pole cluster resists separation")
            merged = False
            for j, (pz, prr, pm) in enumerate(placed):
                if abs(pz - zc) < 1.05 * (prr + rad):
                    placed.pop(j)
                    tot = pm + m
                    zmid = (pz * pm + zc * m) / tot
                    queue.append((zmid, tot, max(abs(pz - zmid), abs(zc - zmid))))
                    merged = True
                    break
            if not merged:
                placed.append((zc, rad, m))
        for zc, rad, m in placed:
            poles.append(zc)
            mults.append(m)
            radii.append(rad)
            compix.append(ci)

        # interior spot checks against hidden poles
        lo, hi = comp["lo"], comp["hi"]
        pole_arr = np.array([p for p, cx in zip(poles, compix) if cx == ci])
        rad_arr = np.array([r for r, cx in zip(radii, compix) if cx == ci])
        tries = 0
        done = 0
        while done < n_spot and tries < 50 * n_spot:
            tries += 1
            phi = rng.uniform(lo, hi)
            dist = np.min(np.abs(phi - pole_arr)) if len(pole_arr) else np.inf
            if len(pole_arr) and np.any(np.abs(phi - pole_arr) < 1.2 * rad_arr):
                continue
            done += 1
            sp = np.asarray(cell.spacing)
            v = modes * sp + np.asarray(shifted.b)
            t = k * np.array([math.cos(phi % TWO_PI), math.sin(phi % TWO_PI)])
            d = (t[0] + v[:, 0]) ** 2 + (t[1] + v[:, 1]) ** 2 - k * k
            A = alpha * W + np.diag(d.astype(complex))
            smin = np.linalg.svd(A, compute_uv=False)[-1]
            ceiling = pr.pole_capture_c / (comp["slope_floor"] * min(dist, 1.0))
            ratio = (1.0 / smin) / ceiling
            spot_max = max(spot_max, float(ratio))
            if ratio > 1.0:
                raise InvariantError("hidden pole: resolvent exceeds the slope ceiling")
    if poles:
        parr = np.array(poles)
        rarr = np.array(radii)
        im = np.abs(parr.imag)
        cut = im < rarr
        half = np.sqrt(rarr[cut] ** 2 - im[cut] ** 2)
        lo, hi = wrap_intervals(parr.real[cut] - half, parr.real[cut] + half)
        lo, hi = _union_sorted(lo, hi)
        removed = np.stack([lo, hi], axis=1)
    else:
        removed = np.zeros((0, 2))
    return PoleCheese(shifted.b, shifted.step, np.array(poles), np.array(mults, int),
                      np.array(radii), np.array(compix, int), removed, total, spot_max)


# ---------------------------------------------------------------------------
# near-corner shifts: the tangential pair

@dataclass
class SmallBDisks:
    context: ShiftContext
    band: float                   # 2 k b0, the reachable level half-band
    roots: np.ndarray
    slopes: np.ndarray            # d lambda / d phi at the roots
    slope_ratio: np.ndarray       # |slope| / (2 k b0), should be near 1
    residuals: np.ndarray         # branch values at the roots
    disks: DiskSet
    clearance_floor: float        # |lambda - level| guaranteed outside the disks


def small_b_disks(cell: CellDescriptor, coeffs, k: float, b, *, step: int = 2,
                  branch=None, domain: AngleSet | None = None,
                  window_half: float = 0.5,
                  params: Params | None = None) -> SmallBDisks:
    """Tangential crossings of the shifted branch along the running level set.

    branch(phi) must return lambda(y(phi)) - level for y on the previous
    level curve displaced by the corner offset; along a level curve the
    angular dependence reduces to 2 k b0 cos(phi - phi_b) plus corrections
    suppressed by the nonresonance clearances, so the level is crossed at
    most twice, near phi_b +- pi/2, with slopes of opposite sign.  None
    falls back to the free branch |k nu + v0|^2 - k^2.  domain restricts
    the search to the surviving directions of the running good set.
    """
    pr = params or Params()
    ctx = classify_shift(cell, k, b, step, pr)
    if ctx.regime == "lattice":
        raise InvariantError("shift is a dual lattice vector; no tangential pair")
    b0, phi_b = ctx.b0, ctx.phi_b
    if branch is None:
        def branch(phi):
            phi = np.asarray(phi, dtype=float)
            return 2.0 * k * b0 * np.cos(phi - phi_b) + b0 * b0

    roots = []
    for side in (0.5 * math.pi, -0.5 * math.pi):
        a = phi_b + side - window_half
        bb = phi_b + side + window_half
        grid = np.linspace(a, bb, 2048)
        keep = np.ones(len(grid), bool) if domain is None else domain.contains(grid)
        vals = np.where(keep, branch(grid), np.nan)
        sgn = np.sign(vals)
        flips = np.flatnonzero((sgn[:-1] * sgn[1:] < 0) & keep[:-1] & keep[1:])
        for i in flips:
            roots.append(scipy.optimize.brentq(
                lambda x: float(np.atleast_1d(branch(np.array([x])))[0]),
                grid[i], grid[i + 1], xtol=1e-13))
        roots.extend(grid[np.equal(vals, 0.0)])
    roots = np.array(sorted(roots))
    if len(roots) > 2:
        raise InvariantError(
            f"{len(roots)} tangential crossings for a near-corner shift; at most two allowed")

    h = 1e-7
    if len(roots):
        slopes = (np.atleast_1d(branch(roots + h)) - np.atleast_1d(branch(roots - h))) / (2 * h)
        resid = np.abs(np.atleast_1d(branch(roots)))
        ratio = np.abs(slopes) / (2.0 * k * b0)
    else:
        slopes = np.zeros(0)
        resid = np.zeros(0)
        ratio = np.zeros(0)
    if len(roots) == 2 and slopes[0] * slopes[1] >= 0:
        raise InvariantError("tangential pair with equal slope signs")

    r_gam = pr.pole_radius(step, k)
    floor = b0 * k * r_gam
    for side in (0.5 * math.pi, -0.5 * math.pi):
        grid = np.linspace(phi_b + side - window_half, phi_b + side + window_half, 257)
        keep = np.ones(len(grid), bool) if domain is None else domain.contains(grid)
        for r in roots:
            keep &= np.abs(grid - r) > r_gam
        if keep.any() and np.min(np.abs(branch(grid[keep]))) < floor:
            raise InvariantError("shifted branch dips below the clearance floor "
                                 "outside the tangential disks")

    disks = DiskSet.build(np.zeros((len(roots), 2), int),
                          roots.astype(complex), np.full(len(roots), r_gam),
                          np.full(len(roots), BRANCH_SMALL_B), step, ctx.b)
    return SmallBDisks(ctx, 2.0 * k * b0, roots, slopes, ratio, resid,
                       disks, floor)


# ---------------------------------------------------------------------------
# step cheese: refinement shifts against the step contour

@dataclass
class StepCheese:
    step: int
    k: float
    refinement: int
    theta: AngleSet
    shifts: list[ShiftedCheese]
    removed_measure: float
    audit_samples: int
    audit_min_dist: float
    audit_threshold: float


def step_shift_vectors(cell: CellDescriptor, k: float, step: int,
                       params: Params | None = None) -> list[tuple[float, float]]:
    """Fractional dual offsets brought in by the step refinement."""
    pr = params or Params()
    N = pr.refinement(k, step)
    sp = np.asarray(cell.spacing)
    return [(i / N * sp[0], j / N * sp[1])
            for i in range(N) for j in range(N) if (i, j) != (0, 0)]


def build_step_cheese(first: FirstCheese, cell: CellDescriptor, coeffs, k: float,
                      *, step: int = 2, params: Params | None = None,
                      rng: np.random.Generator | None = None,
                      audit_samples: int = 32) -> StepCheese:
    """Refine the good set for the next step of the recursion.

    Each refinement shift contributes a shifted cheese; the survivors are
    audited directly: at sampled surviving directions the shifted operator
    spectrum near k^2 is computed on an energy-shell block and must clear
    the step contour radius beyond the block truncation error, escalating
    the shell until the comparison is conclusive.
    """
    pr = params or Params()
    if rng is None:
        rng = np.random.default_rng(pr.seed)
    shifts = step_shift_vectors(cell, k, step, pr)
    built = [build_shifted_cheese(cell, coeffs, k, bsh, step, pr) for bsh in shifts]
    lo = np.concatenate([sc.removed[:, 0] for sc in built] or [np.zeros(0)])
    hi = np.concatenate([sc.removed[:, 1] for sc in built] or [np.zeros(0)])
    theta = first.theta.subtract(lo, hi) if lo.size else first.theta
    if theta.measure <= 0.0:
        raise InvariantError("fully resonant at the step refinement")
    _, w_l1 = _potential_info(cell, coeffs)
    thr = pr.contour_radius(step, k)
    phis = theta.sample(audit_samples, rng)
    min_dist = math.inf
    for phi in phis:
        tau = k * np.array([math.cos(phi), math.sin(phi)])
        for sc in built:
            t = tau + np.asarray(sc.b)
            pad = 4.0 + 8.0 * w_l1
            for _ in range(3):
                bm = assemble_bloch_matrix(cell, coeffs, tuple(t), k,
                                           cutoff=pr.cutoff(k), shell=pad)
                ev = np.linalg.eigvalsh(bm.matrix)
                dist = float(np.min(np.abs(ev - k * k)))
                err = w_l1 * w_l1 / max(pad - 2.0 * w_l1, w_l1)
                if dist >= thr + err:
                    break
                if dist <= thr - err:
                    raise InvariantError(
                        "step audit: shifted spectrum inside the contour radius")
                pad *= 3.0
            else:
                raise NumericAbort("step audit unresolved after shell escalation")
            min_dist = min(min_dist, dist)
    return StepCheese(step, k, pr.refinement(k, step), theta, built,
                      float(np.sum(hi - lo)) if lo.size else 0.0,
                      audit_samples, min_dist, thr)
