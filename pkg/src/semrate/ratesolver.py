"""Delay-minimizing rate allocation under a robustness budget.

Each modality m contributes a logistic error term
``a_m / (1 + exp(k_m (b_m - D_m tau)))`` where ``a_m = (1 - 2^-B) kappa_m``,
``b_m = C_m + log2(L)/L`` and ``k_m = sqrt(8L / (pi V_m log2(e)^2))``. The
optimal weighted rate tau* is the root of ``f(tau) = sum_m term_m - delta0``
on ``(0, min_m b_m / D_m]``; every modality then sends at ``R_m = D_m tau*``
and all transmission delays ``D_m / R_m`` coincide.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .fbl import LinkParams, error_prob_of_rate, logistic


@dataclass(frozen=True)
class LinkConstants:
    a: float
    b: float
    k: float
    D: float


@dataclass(frozen=True)
class ModalityLink:
    D: int  # payload bits, d * B
    kappa: float
    link: LinkParams
    B: int

    def __post_init__(self):
        if self.D < 1:
            raise ValueError("payload size D must be >= 1")
        if self.kappa < 0 or not math.isfinite(self.kappa):
            raise ValueError("kappa must be finite and non-negative")

    @property
    def a(self) -> float:
        return (1.0 - 2.0 ** -self.B) * self.kappa

    @property
    def b(self) -> float:
        return self.link.offset

    @property
    def k(self) -> float:
        return self.link.slope

    def constants(self) -> LinkConstants:
        return LinkConstants(self.a, self.b, self.k, float(self.D))


def _constants(links) -> list[LinkConstants]:
    if not links:
        raise ValueError("at least one modality link is required")
    return [l if isinstance(l, LinkConstants) else l.constants() for l in links]


def _term(c: LinkConstants, rate: float) -> float:
    """Error probability of one modality at ``rate``."""
    if math.isinf(c.k):
        return 0.0 if rate < c.b else (1.0 if rate > c.b else 0.5)
    return logistic(c.k * (rate - c.b))


def f_tau(links, delta0: float, tau: float) -> float:
    """sum_m a_m eps_m(D_m tau) - delta0."""
    if delta0 <= 0:
        raise ValueError("delta0 must be positive")
    if tau < 0:
        raise ValueError("tau must be non-negative")
    cs = _constants(links)
    return math.fsum(c.a * _term(c, c.D * tau) for c in cs) - delta0


def tau_upper(links) -> float:
    return min(c.b / c.D for c in _constants(links))


@dataclass
class FeasibilityReport:
    ok: bool
    bracket: tuple[float, float]
    delta0: float
    half_sum_a: float
    f_at_zero: float
    f_at_upper: float
    violations: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "ok": self.ok,
            "bracket": list(self.bracket),
            "delta0": self.delta0,
            "half_sum_a": self.half_sum_a,
            "f_at_zero": self.f_at_zero,
            "f_at_upper": self.f_at_upper,
            "violations": list(self.violations),
        }


class InfeasibleError(ValueError):
    def __init__(self, report: FeasibilityReport):
        super().__init__("; ".join(report.violations))
        self.report = report


class BisectionError(RuntimeError):
    def __init__(self, message: str, bracket: tuple[float, float]):
        super().__init__(f"{message}; last bracket [{bracket[0]!r}, {bracket[1]!r}]")
        self.bracket = bracket


def feasibility_check(links, delta0: float) -> FeasibilityReport:
    """Check the budget against the bisection preconditions and return the bracket.

    The budget must satisfy ``delta0 <= 0.5 * sum_m a_m`` and must exceed the
    residual error mass at zero rate, ``f(0) + delta0``.
    """
    cs = _constants(links)
    hi = min(c.b / c.D for c in cs)
    half = 0.5 * math.fsum(c.a for c in cs)
    f0 = f_tau(cs, delta0, 0.0)
    fhi = f_tau(cs, delta0, hi)
    violations = []
    if delta0 > half:
        violations.append(f"delta0 = {delta0!r} exceeds 0.5 * sum(a) = {half!r}")
    if f0 >= 0:
        violations.append(
            f"delta0 = {delta0!r} not above the zero-rate error mass f(0) + delta0 = {f0 + delta0!r}"
        )
    return FeasibilityReport(not violations, (0.0, hi), delta0, half, f0, fhi, violations)


@dataclass
class RateSolution:
    tau_star: float
    rates: list[float]
    eps: list[float]
    gamma_pred: float
    delay: float
    iterations: int
    bracket: tuple[float, float]
    constraint_active: bool = True

    def to_dict(self) -> dict:
        return {
            "tau_star": self.tau_star,
            "rates": list(self.rates),
            "eps": list(self.eps),
            "gamma_pred": self.gamma_pred,
            "delay": self.delay,
            "iterations": self.iterations,
            "bracket": list(self.bracket),
            "constraint_active": self.constraint_active,
        }


def _solution(cs: list[LinkConstants], tau: float, iterations: int, bracket, active: bool) -> RateSolution:
    rates = [c.D * tau for c in cs]
    eps = [_term(c, r) for c, r in zip(cs, rates)]
    gamma = math.fsum(c.a * e for c, e in zip(cs, eps))
    delay = max(c.D / r for c, r in zip(cs, rates)) if tau > 0 else math.inf
    return RateSolution(tau, rates, eps, gamma, delay, iterations, tuple(bracket), active)


def solve_bisection(links, delta0: float, tol: float = 1e-6, max_iter: int = 200) -> RateSolution:
    """Root of f on the bracket [0, min_m b_m/D_m] by bisection.

    Returns the midpoint of the final bracket (width <= tol). If f is still
    negative at the upper end the robustness budget is slack over the whole
    range and the upper end itself is returned with ``constraint_active=False``.
    """
    if tol <= 0:
        raise ValueError("tol must be positive")
    cs = _constants(links)
    report = feasibility_check(cs, delta0)
    if not report.ok:
        raise InfeasibleError(report)
    lo, hi = report.bracket
    flo, fhi = report.f_at_zero, report.f_at_upper
    if fhi <= 0:
        return _solution(cs, hi, 0, (lo, hi), active=fhi == 0)
    if flo * fhi > 0:
        raise BisectionError("no sign change on the bracket", (lo, hi))
    it = 0
    while hi - lo > tol:
        if it >= max_iter:
            raise BisectionError(f"max_iter={max_iter} exhausted", (lo, hi))
        it += 1
        mid = 0.5 * (lo + hi)
        fm = f_tau(cs, delta0, mid)
        if fm == 0.0:
            return _solution(cs, mid, it, (lo, hi), True)
        if fm < 0:
            lo = mid
        else:
            hi = mid
    return _solution(cs, 0.5 * (lo + hi), it, (lo, hi), True)


def max_iterations(bracket_width: float, tol: float) -> int:
    """Bisection steps needed to shrink ``bracket_width`` below ``tol``."""
    return max(0, math.ceil(math.log2(bracket_width / tol)))


def fixed_rate_baseline(D: Sequence[float], rates: Sequence[float]) -> float:
    """Common rate giving the same end-to-end delay as ``rates``."""
    if len(D) != len(rates) or not D:
        raise ValueError("D and rates must be non-empty and of equal length")
    if any(x <= 0 for x in D) or any(r <= 0 for r in rates):
        raise ValueError("payloads and rates must be positive")
    return max(D) / max(d / r for d, r in zip(D, rates))


def g_constraint(cs: Sequence[LinkConstants], rates: Sequence[float], delta0: float) -> float:
    """Constraint function of the convex program as a function of the per-modality rates."""
    return math.fsum(c.a * _term(c, r) for c, r in zip(cs, rates)) - delta0


def second_derivative(c: LinkConstants, rate: float) -> float:
    """Closed-form d^2/dR^2 of a/(1 + exp(k (b - R)))."""
    s = _term(c, rate)
    return c.a * c.k ** 2 * s * (1.0 - s) * (1.0 - 2.0 * s)


@dataclass
class ConvexityReport:
    points: int
    min_second_diff: float
    max_abs_cross: float
    sign_mismatches: int
    outside_points: int
    outside_negative: int
    worst: tuple[int, float] | None

    @property
    def convex(self) -> bool:
        return self.min_second_diff >= -1e-6 and self.sign_mismatches == 0 and self.max_abs_cross <= 1e-6

    def to_dict(self) -> dict:
        return {
            "points": self.points,
            "min_second_diff": self.min_second_diff,
            "max_abs_cross": self.max_abs_cross,
            "sign_mismatches": self.sign_mismatches,
            "outside_points": self.outside_points,
            "outside_negative": self.outside_negative,
            "convex": self.convex,
        }


def convexity_audit(links, grid=1000, step: float = 1e-4, delta0: float = 1e-3, sign_tol: float = 1e-6) -> ConvexityReport:
    """Second differences of the constraint function along each rate axis.

    ``grid`` is either a point count (evenly spaced on [0, b_m] per modality)
    or an explicit sequence of rates shared by all modalities. Points with
    R > b_m lie outside the convex region; they are counted separately and
    are expected to have negative curvature.
    """
    cs = _constants(links)
    M = len(cs)
    base = [0.5 * c.b for c in cs]
    min_sd = math.inf
    worst = None
    mismatches = 0
    outside = outside_neg = 0
    points = 0
    for m, c in enumerate(cs):
        rs = np.linspace(0.0, c.b, int(grid)) if np.isscalar(grid) else np.asarray(grid, dtype=float)
        for r in rs:
            r = float(r)
            x = list(base)

            def g_at(v):
                x[m] = v
                return g_constraint(cs, x, delta0)

            sd = (g_at(r + step) - 2.0 * g_at(r) + g_at(r - step)) / step ** 2
            analytic = second_derivative(c, r)
            if r > c.b:
                outside += 1
                outside_neg += sd < 0
                continue
            points += 1
            if sd < min_sd:
                min_sd, worst = sd, (m, r)
            if analytic > sign_tol and sd < -sign_tol or analytic < -sign_tol and sd > sign_tol:
                mismatches += 1
    max_cross = 0.0
    for m in range(M):
        for n in range(m + 1, M):
            x = list(base)

            def g2(dm, dn):
                y = list(x)
                y[m] += dm
                y[n] += dn
                return g_constraint(cs, y, delta0)

            cross = (g2(step, step) - g2(step, -step) - g2(-step, step) + g2(-step, -step)) / (4 * step ** 2)
            max_cross = max(max_cross, abs(cross))
    return ConvexityReport(points, min_sd, max_cross, mismatches, outside, int(outside_neg), worst)


def modality_links(
    kappa: Sequence[float], D: Sequence[int], snr: Sequence[float], blocklength: int, B: int
) -> list[ModalityLink]:
    return [
        ModalityLink(int(d), float(k), LinkParams.from_snr(float(s), blocklength), B)
        for k, d, s in zip(kappa, D, snr)
    ]


def predicted_eps(links: Sequence[ModalityLink], rates: Sequence[float]) -> list[float]:
    return [error_prob_of_rate(l.link, r) for l, r in zip(links, rates)]
