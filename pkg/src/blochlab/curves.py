"""Isoenergetic curves: radii, assembly, folding, and self-intersection audit.

The level set of the tracked eigenvalue over the surviving directions is a
distorted circle with holes.  Each radius kappa(phi) is a root of
lambda(kappa nu(phi)) = lambda_target inside a window centered at the
previous step's radius, certified unique by a sign change at the window
ends plus Newton convergence from both ends to the same point.  Folding by
lattice translation must be injective on samples; a collision is a hard
failure, not a statistic.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .cheese import AngleSet, TWO_PI
from .errors import InvariantError, NumericAbort
from .lattice import CellDescriptor, assemble_bloch_matrix, reduce_to_cell
from .params import Params
from .series import lambda_on_rays

END_AGREEMENT = 1e-9     # both-ends Newton runs must land this close together
NEWTON_MAX = 12


@dataclass(frozen=True)
class KappaRoot:
    phi: float
    kappa: float
    residual: float          # |lambda(kappa nu) - lambda_target|
    window: tuple[float, float]
    f_lo: float              # level function at the window ends
    f_hi: float
    end_gap: float           # distance between the two Newton limits
    iterations: int


def _level(coeffs, cell, k, phis, kappas, lam, r_max, tag):
    out = lambda_on_rays(coeffs, cell, k, phis, kappas, r_max=r_max)
    if not out["accepted"].all():
        bad = np.flatnonzero(~out["accepted"])
        raise InvariantError(
            f"{tag}: series rejected at phi={phis[bad[0]]:.6f} "
            f"(kappa={kappas[bad[0]]:.6f}, {len(bad)} of {len(phis)} points)")
    return out["lam"] - lam


def _solve_batch(coeffs, cell, k, phis, lam, base, half, r_max, pr):
    """Certified window roots for a whole batch of directions at once.

    Returns (kappa, residual, f_lo, f_hi, end_gap, iterations).  The level
    function is increasing in kappa (slope about 2 kappa), so the window
    certificate is f(lo) < 0 < f(hi); Newton then runs from both ends and
    the two limits must agree.
    """
    phis = np.asarray(phis, dtype=float)
    base = np.broadcast_to(np.asarray(base, dtype=float), phis.shape).copy()
    n = len(phis)
    lo = base - half
    hi = base + half
    fends = _level(coeffs, cell, k, np.concatenate([phis, phis]),
                   np.concatenate([lo, hi]), lam, r_max, "kappa window")
    f_lo, f_hi = fends[:n], fends[n:]
    bad = ~((f_lo < 0.0) & (f_hi > 0.0))
    if bad.any():
        i = int(np.flatnonzero(bad)[0])
        raise InvariantError(
            f"kappa window violated at phi={phis[i]:.6f}: "
            f"f({lo[i]:.9f})={f_lo[i]:.3e}, f({hi[i]:.9f})={f_hi[i]:.3e}, "
            f"{int(bad.sum())} of {n} points")

    tol = pr.lambda_tol * abs(lam)
    ends = np.concatenate([lo, hi])
    f = np.concatenate([f_lo, f_hi])
    live = np.abs(f) > tol
    iters = np.zeros(2 * n, dtype=int)
    for _ in range(NEWTON_MAX):
        if not live.any():
            break
        step = f[live] / (2.0 * ends[live])
        ends[live] = np.clip(ends[live] - step,
                             np.tile(lo, 2)[live], np.tile(hi, 2)[live])
        f[live] = _level(coeffs, cell, k, np.tile(phis, 2)[live], ends[live],
                         lam, r_max, "kappa refinement")
        iters[live] += 1
        live = np.abs(f) > tol
    if live.any():
        i = int(np.flatnonzero(live)[0]) % n
        raise NumericAbort(
            f"kappa Newton unconverged at phi={phis[i]:.6f} "
            f"after {NEWTON_MAX} iterations")

    from_lo, from_hi = ends[:n], ends[n:]
    gap = np.abs(from_hi - from_lo)
    if (gap > END_AGREEMENT).any():
        i = int(np.argmax(gap))
        raise InvariantError(
            f"two roots inside the radius window at phi={phis[i]:.6f}: "
            f"end runs settle {gap[i]:.3e} apart")
    # keep whichever end run stopped with the smaller level residual; the
    # runs agree to END_AGREEMENT so this is a choice of certificate, not
    # of root
    pick_hi = np.abs(f[n:]) < np.abs(f[:n])
    kappa = np.where(pick_hi, from_hi, from_lo)
    resid = np.abs(np.where(pick_hi, f[n:], f[:n]))
    return kappa, resid, f_lo, f_hi, gap, iters[:n] + iters[n:]


def solve_kappa(coeffs, cell: CellDescriptor, k: float, phi: float,
                lam: float | None = None, *, base: float | None = None,
                half: float | None = None, w_norm: float | None = None,
                step: int = 1, r_max: int | None = None,
                params: Params | None = None) -> KappaRoot:
    """Unique curve radius at one direction, with the window certificate."""
    pr = params or Params()
    if lam is None:
        lam = k * k
    if base is None:
        base = math.sqrt(lam)
    if half is None:
        if w_norm is None:
            raise InvariantError("solve_kappa needs either half or w_norm")
        half = pr.kappa_window(step, k, w_norm)
    r_max = r_max or pr.curve_r_max
    kap, res, f_lo, f_hi, gap, it = _solve_batch(
        coeffs, cell, k, np.array([phi], dtype=float), lam,
        np.array([base]), half, r_max, pr)
    return KappaRoot(phi=float(phi), kappa=float(kap[0]), residual=float(res[0]),
                     window=(base - half, base + half),
                     f_lo=float(f_lo[0]), f_hi=float(f_hi[0]),
                     end_gap=float(gap[0]), iterations=int(it[0]))


@dataclass
class IsoCurve:
    step: int
    k: float
    lam: float
    grid: int
    phi: np.ndarray
    kappa: np.ndarray
    h: np.ndarray             # kappa_n - kappa_{n-1} (step 1: kappa - sqrt(lam))
    dkappa: np.ndarray        # interior finite differences, NaN at arc ends
    residual: np.ndarray
    arc_id: np.ndarray
    theta: AngleSet
    window_half: float
    length: float             # chord-sum over arcs
    free_length: float        # sqrt(lam) * measure(theta)
    n_dropped: int            # grid points without a previous-step partner

    @property
    def n_arcs(self) -> int:
        return int(self.arc_id.max()) + 1 if len(self.arc_id) else 0

    def arc_slices(self):
        for a in range(self.n_arcs):
            yield a, np.flatnonzero(self.arc_id == a)

    def points(self) -> np.ndarray:
        return self.kappa[:, None] * np.stack(
            [np.cos(self.phi), np.sin(self.phi)], axis=1)

    def to_rows(self):
        for i in range(len(self.phi)):
            yield {"phi": self.phi[i], "kappa": self.kappa[i], "h": self.h[i],
                   "dkappa": self.dkappa[i], "arc": int(self.arc_id[i])}


def _curve_sample_angles(theta: AngleSet, grid: int, boundary: bool) -> np.ndarray:
    """Uniform grid inside the good set, plus both ends of every arc.

    The arc ends make chord-summed length honest: without them every arc
    loses up to one grid cell of curve at each boundary, which adds up
    across hundreds of small arcs.  boundary=False drops them when only
    the samples matter (folding, eigenfunction anchors), at a third of the
    solve cost on finely cut sets.  Samples closer than 1e-9 rad are
    merged so finite differences never divide by a vanishing spacing.
    """
    uni = np.linspace(0.0, TWO_PI, grid, endpoint=False)
    uni = uni[theta.contains(uni)]
    if boundary:
        ends = np.clip(theta.ends - 1e-12, theta.starts, None)
        phis = np.unique(np.concatenate([uni, theta.starts, ends]))
        phis = phis[theta.contains(phis)]
    else:
        phis = uni
    if len(phis) == 0:
        raise InvariantError("no grid direction survives; curve is empty")
    keep = np.concatenate([[True], np.diff(phis) > 1e-9])
    return phis[keep]


def build_iso_curve(coeffs, cell: CellDescriptor, k: float, theta: AngleSet,
                    lam: float | None = None, *, step: int = 1,
                    base: "IsoCurve | None" = None, w_norm: float,
                    grid: int | None = None, boundary: bool = True,
                    r_max: int | None = None,
                    params: Params | None = None) -> IsoCurve:
    """Assemble the distorted circle over the surviving directions.

    base carries the previous step's radii on the same canonical grid;
    surviving samples the previous curve never solved (arcs shrink, new
    boundaries appear) are dropped and counted, never interpolated: the
    step window is far narrower than any interpolation error.
    """
    pr = params or Params()
    if lam is None:
        lam = k * k
    grid = grid or pr.phi_grid
    r_max = r_max or pr.curve_r_max
    half = pr.kappa_window(step, k, w_norm)
    phis = _curve_sample_angles(theta, grid, boundary)

    dropped = 0
    if base is None:
        centers = np.full(len(phis), math.sqrt(lam))
        prev = centers
    else:
        if base.grid != grid:
            raise InvariantError("previous curve was sampled on a different grid")
        pos = np.clip(np.searchsorted(base.phi, phis), 0, len(base.phi) - 1)
        left = np.clip(pos - 1, 0, len(base.phi) - 1)
        use = np.where(np.abs(base.phi[pos] - phis) <= np.abs(base.phi[left] - phis),
                       pos, left)
        have = np.abs(base.phi[use] - phis) <= 1e-12
        dropped = int((~have).sum())
        phis = phis[have]
        if len(phis) == 0:
            raise InvariantError("no surviving direction has a previous radius")
        centers = base.kappa[use[have]]
        prev = centers

    kappa, resid, _, _, _, _ = _solve_batch(coeffs, cell, k, phis, lam,
                                            centers, half, r_max, pr)
    arcidx = np.searchsorted(theta.starts, phis, side="right") - 1
    _, labels = np.unique(arcidx, return_inverse=True)
    dk = np.full(len(phis), np.nan)
    length = 0.0
    for a in range(labels.max() + 1 if len(labels) else 0):
        sl = np.flatnonzero(labels == a)
        if len(sl) >= max(3, pr.curve_min_arc):
            dk[sl[1:-1]] = ((kappa[sl[2:]] - kappa[sl[:-2]])
                            / (phis[sl[2:]] - phis[sl[:-2]]))
        if len(sl) >= 2:
            pts = kappa[sl, None] * np.stack([np.cos(phis[sl]), np.sin(phis[sl])], axis=1)
            length += float(np.sum(np.hypot(*(pts[1:] - pts[:-1]).T)))

    return IsoCurve(step=step, k=k, lam=lam, grid=grid, phi=phis, kappa=kappa,
                    h=kappa - prev, dkappa=dk, residual=resid, arc_id=labels,
                    theta=theta, window_half=half, length=length,
                    free_length=math.sqrt(lam) * theta.measure, n_dropped=dropped)


@dataclass
class CurveReport:
    steps: list[int]
    max_h: list[float]
    max_dh: list[float]           # slope of h between consecutive steps
    cascade_ratios: list[float]   # max_h[i+1] / max_h[i]
    cauchy_bound: float           # last-step max |h|, the remaining-tail proxy
    length_ratio: list[float]     # chord length / free length per step
    skipped_arcs: list[int]       # arcs too short for derivative diagnostics


def curve_diagnostics(curves: list[IsoCurve],
                      params: Params | None = None) -> CurveReport:
    """Step cascade of the radial corrections h_n and their slopes."""
    pr = params or Params()
    if not curves:
        raise InvariantError("no curves to diagnose")
    max_h, max_dh, ratios, lr, skipped = [], [], [], [], []
    for c in curves:
        max_h.append(float(np.max(np.abs(c.h))) if len(c.h) else 0.0)
        best = 0.0
        nskip = 0
        for _, sl in c.arc_slices():
            if len(sl) < max(3, pr.curve_min_arc):
                nskip += 1
                continue
            dh = np.diff(c.h[sl]) / np.diff(c.phi[sl])
            if len(dh):
                best = max(best, float(np.max(np.abs(dh))))
        max_dh.append(best)
        skipped.append(nskip)
        lr.append(c.length / c.free_length if c.free_length > 0 else math.nan)
    for a, b in zip(max_h, max_h[1:]):
        ratios.append(b / a if a > 0 else math.inf)
    return CurveReport(steps=[c.step for c in curves], max_h=max_h,
                       max_dh=max_dh, cascade_ratios=ratios,
                       cauchy_bound=max_h[-1], length_ratio=lr,
                       skipped_arcs=skipped)


@dataclass
class FoldedCurve:
    step: int
    t: np.ndarray                 # folded quasimomenta, one row per sample
    phi: np.ndarray
    offsets: np.ndarray           # integer lattice translations used
    min_separation: float         # smallest pairwise distance observed
    resolution: float
    oracle_checked: int
    oracle_window: float

    def to_rows(self):
        for i in range(len(self.phi)):
            yield {"t1": self.t[i, 0], "t2": self.t[i, 1], "phi": self.phi[i]}


def _simple_eigenvalue_window(cell, coeffs, t, k, lam, halfw, w_l1, pr):
    """Certify that exactly one eigenvalue sits in a window around lam.

    The curve solve already pins the tracked eigenvalue at lam to series
    tolerance; the dense shell solve can only localize to its truncation
    error w^2/pad, so the certificate is two-sided: the nearest computed
    eigenvalue must sit within that error of lam, and the second-nearest
    beyond a window at least as wide as requested plus the error.  Returns
    the certified half-width, which is max(requested, 4x the error).
    """
    pad = 4.0 + 8.0 * w_l1
    for _ in range(4):
        bm = assemble_bloch_matrix(cell, coeffs, tuple(t), k,
                                   cutoff=pr.cutoff(k), shell=pad)
        ev = np.linalg.eigvalsh(bm.matrix)
        err = w_l1 * w_l1 / max(pad - 2.0 * w_l1, w_l1)
        dist = np.sort(np.abs(ev - lam))
        if len(dist) == 0 or dist[0] > 1.5 * err + pr.lambda_tol * abs(lam):
            raise InvariantError(
                f"no eigenvalue near the level at folded point "
                f"(nearest {dist[0] if len(dist) else math.inf:.3e}, "
                f"truncation error {err:.3e})")
        window = max(halfw, 4.0 * err)
        if len(dist) == 1 or dist[1] >= window + err:
            return window
        pad *= 3.0
    raise NumericAbort("simple-eigenvalue window unresolved after shell escalation")


def fold_curve(curve: IsoCurve, cell: CellDescriptor, *, coeffs=None,
               oracle_samples: int = 0, oracle_half: float | None = None,
               resolution: float = 1e-9, rng: np.random.Generator | None = None,
               params: Params | None = None) -> FoldedCurve:
    """Translate every curve point into the dual cell and scan for collisions.

    The folded set must be free of self-intersections: any two samples
    closer than the resolution abort the build with both source angles.
    Optionally cross-checks sampled folded points against the dense
    spectrum: exactly one eigenvalue may sit in the step window.
    """
    pr = params or Params()
    pts = curve.points()
    t = np.empty_like(pts)
    offs = np.empty((len(pts), 2), dtype=int)
    for i, x in enumerate(pts):
        ti, ji = reduce_to_cell(cell, x)
        t[i] = ti
        offs[i] = ji

    cellkey = np.floor(t / resolution).astype(np.int64)
    seen: dict[tuple[int, int], list[int]] = {}
    min_sep = math.inf
    for i, (a, b) in enumerate(cellkey):
        for da in (-1, 0, 1):
            for db in (-1, 0, 1):
                for j in seen.get((a + da, b + db), ()):
                    d = math.hypot(t[i, 0] - t[j, 0], t[i, 1] - t[j, 1])
                    min_sep = min(min_sep, d)
                    if d < resolution:
                        raise InvariantError(
                            f"fold self-intersection: phi={curve.phi[j]:.9f} and "
                            f"phi={curve.phi[i]:.9f} land {d:.3e} apart")
        seen.setdefault((int(a), int(b)), []).append(i)

    checked = 0
    halfw = oracle_half if oracle_half is not None else pr.contour_radius(curve.step, curve.k)
    if oracle_samples > 0:
        if coeffs is None:
            raise InvariantError("oracle check requested without coefficients")
        if rng is None:
            rng = np.random.default_rng(pr.seed)
        w_l1 = float(sum(abs(v) for v in coeffs.values()))
        for i in rng.choice(len(t), size=min(oracle_samples, len(t)), replace=False):
            got = _simple_eigenvalue_window(cell, coeffs, t[i], curve.k,
                                            curve.lam, halfw, w_l1, pr)
            halfw = max(halfw, got)
            checked += 1

    return FoldedCurve(step=curve.step, t=t, phi=curve.phi.copy(), offsets=offs,
                       min_separation=min_sep, resolution=resolution,
                       oracle_checked=checked, oracle_window=halfw)
