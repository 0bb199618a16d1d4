"""Exponent web and derived scale quantities.

Every power of k used anywhere in the lab is a named field here, never a
literal in calling code.  The desk defaults (s1=0.2, delta=0.05, beta=0.1)
deliberately sit outside the asymptotic admissible ranges; ``strict=True``
re-enables those ranges as hard validation.  beta=0.1 is the largest value
whose contour radius k^{2 beta - 1 - s1 - delta} leaves the bench circle
k in [20, 160] mostly unresonant with clean separation audits; at beta=0.3
the pole-clearance floor alone covers every direction at k=20.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields

from .errors import ValidationError


@dataclass(frozen=True)
class Params:
    # exponent web
    s1: float = 0.2          # first step scaling exponent (s_1)
    delta: float = 0.05      # strip / measure exponent (delta)
    beta: float = 0.1        # contour and first-cheese exponent (beta)
    beta1: float = 0.1       # shifted-cheese exponent (beta_1)
    eta: float = 1.0         # potential decay exponent (eta)
    strict: bool = False

    # series
    r_max: int = 8           # series order kept in audits
    curve_r_max: int = 5     # series order used inside curve solving
    quad_nodes: int = 64     # trapezoid nodes on contours (even)
    quad_max_nodes: int = 4096
    quad_tol: float = 1e-10

    # epsilon-hat schedule: ehat_0 = step-1 contour radius, then ratio decay
    ehat_ratio: float = 1e-3

    # truncation policy
    cutoff_factor: float = 2.5     # outer momentum radius, units of k
    shell_factor: float = 6.0      # energy half-width, units of k (None-able via <=0)
    dense_limit: int = 9000        # above this, windowed solves go sparse
    eig_dense_limit: int = 1000    # eigenvector tracking: dense below, shift-invert above

    # curves
    window_c: float = 4.0          # kappa window half-width constant
    lambda_tol: float = 1e-10      # relative root tolerance in solve_kappa
    phi_grid: int = 4096
    curve_min_arc: int = 3         # arcs shorter than this many grid steps are
                                   # excluded from derivative diagnostics

    # eigenfunctions
    route_overlap: float = 0.999   # series column must overlap the tracked vector this much
    step_delta_c: float = 16.0     # eigenvalue increment constant (c-hat) per step

    # cheese
    radius_clamp: float = 1e-12
    shifted_radius_cap: float = 0.25
    pole_capture_c: float = 16.0
    pole_capture_floor: float = 1e-9   # capture disks never shrink below the
                                       # certified localization accuracy
    t_loc: float = 2.0             # local-block energy margin for winding dets
    separation_expand_cap: float = 1e6

    seed: int = 0

    # ---- scale ladder ----------------------------------------------------

    def s_n(self, n: int) -> float:
        if n < 1:
            raise ValueError(f"step must be >= 1, got {n}")
        return (2 ** (n - 1)) * self.s1

    def m_n(self, k: float, n: int) -> int:
        """Scale count absorbed by step n: 2^{M_n} tracks k^{s_n} within factor 2."""
        m_prev = 0
        m = 0
        for i in range(1, n + 1):
            m = max(round(math.log2(k ** self.s_n(i))), m_prev + 1, 1)
            m_prev = m
        return m

    def refinement(self, k: float, n: int) -> int:
        """Lattice refinement factor entering step n (N_{n-1} = 2^{M_n - M_{n-1}})."""
        if n < 2:
            raise ValueError("refinement is defined for steps >= 2")
        return 2 ** (self.m_n(k, n) - self.m_n(k, n - 1))

    def cumulative_refinement(self, k: float, n: int) -> int:
        """Product N_{n-1}...N_1 relating the step-n cell to the step-1 cell."""
        out = 1
        for i in range(2, n + 1):
            out *= self.refinement(k, i)
        return out

    # ---- radii, contours, windows ---------------------------------------

    def strip_halfwidth(self, k: float) -> float:
        return k ** (-self.delta)

    def ehat(self, n: int, k: float) -> float:
        """Desk separation scale: ehat_0 is the step-1 contour radius."""
        return k ** (2 * self.beta - 1 - self.s1 - self.delta) * self.ehat_ratio ** n

    def contour_radius(self, step: int, k: float) -> float:
        if step == 1:
            return self.ehat(0, k)
        return self.ehat(step - 1, k) / 2

    def small_b_threshold(self, step: int, k: float) -> float:
        if step == 1:
            return k ** (-1 - 16 * self.s1 - 12 * self.delta)
        return self.ehat(step - 1, k) * k ** (-1 - 2 * self.delta)

    def pole_radius(self, step: int, k: float) -> float:
        """Small-disk radius around located poles, recursive in the step."""
        r = k ** (-4 - 6 * self.s1 - 3 * self.delta)
        for i in range(2, step + 1):
            r *= k ** (-2 - 4 * self.s_n(i) - self.delta)
        if r < self.radius_clamp:
            return self.radius_clamp
        return r

    def product_bound(self, k: float) -> float:
        """Lower bound on the paired denominator product over the first cheese."""
        return k ** (2 * self.beta)

    def single_bound(self, k: float) -> float:
        """Lower bound on twice the nearest-neighbour denominator."""
        return k ** (1 - 3 * self.s1 - self.delta)

    def first_factor_bound(self, k: float, pi_m: float) -> float:
        return k ** (2 * self.beta) / pi_m

    def shell_halfwidth(self, k: float) -> float | None:
        if self.shell_factor <= 0:
            return None
        return self.shell_factor * k

    def cutoff(self, k: float) -> float:
        return self.cutoff_factor * k

    def kappa_window(self, step: int, k: float, w_norm: float) -> float:
        return max(self.window_c * w_norm / k, 10 * self.lambda_tol * k)

    # ---- strict-mode web -------------------------------------------------

    def range_report(self) -> list[str]:
        """Admissible-range violations of the asymptotic parameter web."""
        out = []
        if not (0 < self.delta < self.s1):
            out.append(f"delta in (0, s1) violated: delta={self.delta}, s1={self.s1}")
        if not (4 * self.s1 < 2 * self.beta <= 1 - 15 * self.s1 - 8 * self.delta):
            out.append(
                "4*s1 < 2*beta <= 1-15*s1-8*delta violated: "
                f"{4 * self.s1} vs {2 * self.beta} vs {1 - 15 * self.s1 - 8 * self.delta}"
            )
        if not (100 * self.s1 < self.beta1 < 1 / 12 - 28 * self.s1 - 14 * self.delta):
            out.append(
                "100*s1 < beta1 < 1/12-28*s1-14*delta violated: "
                f"{100 * self.s1} vs {self.beta1} vs {1 / 12 - 28 * self.s1 - 14 * self.delta}"
            )
        if not self.eta > 3e4:
            out.append(f"eta > 3e4 violated: eta={self.eta}")
        return out

    def validate(self) -> None:
        if self.s1 <= 0 or self.delta <= 0 or self.beta <= 0 or self.beta1 <= 0:
            raise ValidationError("exponents s1, delta, beta, beta1 must be positive")
        if self.beta >= 0.5 or self.beta1 >= 0.5:
            raise ValidationError("beta and beta1 must lie below 1/2")
        if 2 * self.beta - 1 - self.s1 - self.delta >= 0:
            raise ValidationError("contour radius exponent must be negative")
        if self.quad_nodes < 64 or self.quad_nodes % 2:
            raise ValidationError("quad_nodes must be even and >= 64")
        if self.r_max < 2 or self.curve_r_max < 2:
            raise ValidationError("r_max must be >= 2")
        if not (0 < self.ehat_ratio < 1):
            raise ValidationError("ehat_ratio must lie in (0,1)")
        if self.strict:
            problems = self.range_report()
            if problems:
                raise ValidationError("strict parameter ranges violated: " + "; ".join(problems))

    # ---- serialization ---------------------------------------------------

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "Params":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValidationError(f"unknown params fields: {sorted(unknown)}")
        return cls(**d)
