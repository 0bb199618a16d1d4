"""Limit-periodic potential model.

The potential is a sum of trigonometric-polynomial scales V_r with periods
doubling in r.  Scale r is stored on its own integer mode lattice; a step
potential W_n collects the scales assigned to step n and re-indexes them onto
the step's common period lattice.  Coefficient tables are sparse dicts keyed
by integer mode pairs; dense grids are never built.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping

import numpy as np

from .errors import ValidationError
from .params import Params

Mode = tuple[int, int]


@dataclass(frozen=True)
class ScaleComponent:
    """One scale V_r: modes live on the lattice with periods 2^{r-1} d."""

    r: int
    coeffs: Mapping[Mode, complex]

    def l1(self) -> float:
        return float(sum(abs(v) for v in self.coeffs.values()))


@dataclass(frozen=True)
class PotentialSpec:
    d1: float
    d2: float
    r0: float                      # common support radius of all scales
    eta: float                     # decay exponent: ||V_r||_inf < exp(-2^{eta r})
    scales: tuple[ScaleComponent, ...]

    def scale(self, r: int) -> ScaleComponent | None:
        for s in self.scales:
            if s.r == r:
                return s
        return None


@dataclass(frozen=True)
class ValidationReport:
    ok: bool
    messages: tuple[str, ...]


@dataclass(frozen=True)
class StepPotential:
    """W_n on the step-n period lattice (periods 2^{M_n-1} d)."""

    n: int
    m_prev: int
    m_n: int
    periods: tuple[float, float]
    coeffs: Mapping[Mode, complex]

    @property
    def l1(self) -> float:
        return float(sum(abs(v) for v in self.coeffs.values()))

    @property
    def is_real(self) -> bool:
        return all(abs(v.imag) == 0.0 for v in self.coeffs.values())

    def frequency(self, q: Mode) -> tuple[float, float]:
        return (2 * math.pi * q[0] / self.periods[0], 2 * math.pi * q[1] / self.periods[1])


def _conjugate_symmetric(coeffs: Mapping[Mode, complex], tol: float = 0.0) -> bool:
    for q, v in coeffs.items():
        partner = coeffs.get((-q[0], -q[1]))
        if partner is None or abs(partner - v.conjugate()) > tol:
            return False
    return True


def validate_spec(spec: PotentialSpec, params: Params | None = None) -> ValidationReport:
    """Check the structural invariants of a potential spec.

    Decay is certified through the l1 norm (an upper bound for the sup norm of
    a trigonometric polynomial).  Under strict params the asymptotic eta range
    is enforced as well.
    """
    msgs: list[str] = []
    if spec.d1 <= 0 or spec.d2 <= 0:
        msgs.append("periods d1, d2 must be positive")
    if spec.r0 <= 0:
        msgs.append("support radius must be positive")
    seen = set()
    for s in spec.scales:
        if s.r < 1:
            msgs.append(f"scale index {s.r} < 1")
        if s.r in seen:
            msgs.append(f"duplicate scale r={s.r}")
        seen.add(s.r)
        if any(q == (0, 0) and v != 0 for q, v in s.coeffs.items()):
            msgs.append(f"scale {s.r}: zero-mean violated (constant mode present)")
        if not _conjugate_symmetric(s.coeffs):
            msgs.append(f"scale {s.r}: coefficients are not conjugate-symmetric (potential not real)")
        for q in s.coeffs:
            if 2.0 ** (-s.r + 1) * math.hypot(*q) >= spec.r0:
                msgs.append(f"scale {s.r}: mode {q} outside support radius")
                break
        decay_cap = math.exp(-(2.0 ** (spec.eta * s.r)))
        if s.l1() >= decay_cap and s.l1() > 0:
            msgs.append(
                f"scale {s.r}: decay violated, l1 bound {s.l1():.3e} >= {decay_cap:.3e}"
            )
    if params is not None and params.strict:
        if not spec.eta > 3e4:
            msgs.append(f"strict: eta > 3e4 violated (eta={spec.eta})")
    return ValidationReport(ok=not msgs, messages=tuple(msgs))


def build_step_potential(spec: PotentialSpec, n: int, k: float, params: Params) -> StepPotential:
    """Collect scales M_{n-1} < r <= M_n and re-index onto the step lattice."""
    report = validate_spec(spec, params)
    if not report.ok:
        raise ValidationError("; ".join(report.messages))
    m_prev = params.m_n(k, n - 1) if n > 1 else 0
    m_n = params.m_n(k, n)
    periods = (2.0 ** (m_n - 1) * spec.d1, 2.0 ** (m_n - 1) * spec.d2)
    out: dict[Mode, complex] = {}
    for s in spec.scales:
        if not (m_prev < s.r <= m_n):
            continue
        lift = 2 ** (m_n - s.r)
        for q, v in s.coeffs.items():
            key = (q[0] * lift, q[1] * lift)
            out[key] = out.get(key, 0.0 + 0.0j) + complex(v)
    out = {q: v for q, v in out.items() if v != 0}
    step = StepPotential(n=n, m_prev=m_prev, m_n=m_n, periods=periods, coeffs=out)
    for q in out:
        if math.hypot(*step.frequency(q)) > spec.r0 * (1 + 1e-12):
            raise ValidationError(
                f"step {n}: re-indexed mode {q} has frequency above the support radius"
            )
    return step


def combined_step_coeffs(
    spec: PotentialSpec, n: int, k: float, params: Params
) -> tuple[dict[Mode, complex], tuple[float, float]]:
    """Coefficient table of W_1+...+W_n on the step-n lattice.

    The step-i table lifts by the integer period ratio 2^{M_n - M_i}.
    Returns (coeffs, periods of the step-n lattice).
    """
    m_n = params.m_n(k, n)
    periods = (2.0 ** (m_n - 1) * spec.d1, 2.0 ** (m_n - 1) * spec.d2)
    out: dict[Mode, complex] = {}
    for i in range(1, n + 1):
        w = build_step_potential(spec, i, k, params)
        lift = 2 ** (m_n - w.m_n)
        for q, v in w.coeffs.items():
            key = (q[0] * lift, q[1] * lift)
            out[key] = out.get(key, 0.0 + 0.0j) + v
    return {q: v for q, v in out.items() if v != 0}, periods


def evaluate_potential(pot: StepPotential, points: np.ndarray) -> np.ndarray:
    """Evaluate W_n at real-space points, shape (..., 2).

    Returns real values when the table is conjugate-symmetric (imaginary part
    below accumulation noise is dropped after an explicit check).
    """
    pts = np.asarray(points, dtype=float)
    if pts.shape[-1] != 2:
        raise ValueError("points must have trailing dimension 2")
    flat = pts.reshape(-1, 2)
    vals = np.zeros(len(flat), dtype=complex)
    for q, v in pot.coeffs.items():
        fq = pot.frequency(q)
        vals += complex(v) * np.exp(1j * (flat[:, 0] * fq[0] + flat[:, 1] * fq[1]))
    scale = max(pot.l1, 1.0)
    if np.max(np.abs(vals.imag)) <= 1e-12 * scale:
        out = vals.real
    else:
        out = vals
    return out.reshape(pts.shape[:-1])


def norm_linf_estimate(pot: StepPotential, grid: int = 64) -> float:
    """Dense-grid lower bound for the sup norm (the l1 gives the upper)."""
    xs = np.linspace(0.0, pot.periods[0], grid, endpoint=False)
    ys = np.linspace(0.0, pot.periods[1], grid, endpoint=False)
    pts = np.stack(np.meshgrid(xs, ys, indexing="ij"), axis=-1)
    return float(np.max(np.abs(evaluate_potential(pot, pts))))


def default_cosine_spec(
    w1_norm: float = 0.1,
    decay: float = 1e-6,
    n_scales: int = 6,
    d: float = 2 * math.pi,
    r0: float = 2.0,
    eta: float = 1.0,
) -> PotentialSpec:
    """The lab's stock potential: each scale is a two-cosine pattern.

    Scale r carries modes +-(1,0), +-(0,1) of its own lattice with a real
    amplitude w1_norm/4 * decay^{r-1}, so V_1 = (w1_norm/2)(cos x1 + cos x2)
    for d = 2*pi and the scales decay fast enough for the default eta.
    """
    amp0 = w1_norm / 4.0
    scales = []
    for r in range(1, n_scales + 1):
        a = amp0 * decay ** (r - 1)
        coeffs = {(1, 0): a + 0j, (-1, 0): a + 0j, (0, 1): a + 0j, (0, -1): a + 0j}
        scales.append(ScaleComponent(r=r, coeffs=coeffs))
    return PotentialSpec(d1=d, d2=d, r0=r0, eta=eta, scales=tuple(scales))


def zero_spec(n_scales: int = 6, d: float = 2 * math.pi) -> PotentialSpec:
    """V = 0 with the default lattice geometry (free-case pipelines)."""
    scales = tuple(ScaleComponent(r=r, coeffs={}) for r in range(1, n_scales + 1))
    return PotentialSpec(d1=d, d2=d, r0=2.0, eta=1.0, scales=scales)


# ---- config-format serialization ----------------------------------------


def spec_to_dict(spec: PotentialSpec) -> dict:
    return {
        "d1": spec.d1,
        "d2": spec.d2,
        "r0": spec.r0,
        "eta": spec.eta,
        "scales": [
            {
                "r": s.r,
                "modes": [
                    [q[0], q[1], v.real, v.imag]
                    for q, v in sorted(s.coeffs.items())
                ],
            }
            for s in spec.scales
        ],
    }


def spec_from_dict(d: dict) -> PotentialSpec:
    try:
        scales = tuple(
            ScaleComponent(
                r=int(s["r"]),
                coeffs={
                    (int(m[0]), int(m[1])): complex(m[2], m[3]) for m in s["modes"]
                },
            )
            for s in d["scales"]
        )
        return PotentialSpec(
            d1=float(d["d1"]), d2=float(d["d2"]), r0=float(d["r0"]),
            eta=float(d["eta"]), scales=scales,
        )
    except (KeyError, TypeError, IndexError) as exc:
        raise ValidationError(f"malformed potential spec: {exc}") from exc
