"""Finite-blocklength link math under the normal approximation.

Rates are in bits per channel use. Every logarithm, including the
``log L / L`` correction, is base 2.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

LOG2E = math.log2(math.e)
LOGISTIC_A = math.sqrt(2.0 / math.pi)


def capacity(snr: float) -> float:
    if snr < 0:
        raise ValueError(f"snr must be non-negative, got {snr}")
    return 0.5 * math.log2(1.0 + snr)


def dispersion(snr: float) -> float:
    if snr < 0:
        raise ValueError(f"snr must be non-negative, got {snr}")
    return 1.0 - (1.0 + snr) ** -2


@dataclass(frozen=True)
class LinkParams:
    """Capacity/dispersion of one link at blocklength L.

    Build with :meth:`from_snr`; direct construction with ``snr=None`` allows
    arbitrary (C, V) pairs for what-if analysis.
    """

    capacity: float
    dispersion: float
    blocklength: int
    snr: float | None = None

    def __post_init__(self):
        if self.blocklength < 2:
            raise ValueError("blocklength must be >= 2")
        if not 0.0 <= self.dispersion < 1.0:
            raise ValueError(f"dispersion must lie in [0, 1), got {self.dispersion}")
        if self.snr is not None:
            if abs(capacity(self.snr) - self.capacity) > 1e-12 or abs(dispersion(self.snr) - self.dispersion) > 1e-12:
                raise ValueError("capacity/dispersion inconsistent with snr")

    @classmethod
    def from_snr(cls, snr: float, blocklength: int) -> "LinkParams":
        return cls(capacity(snr), dispersion(snr), int(blocklength), float(snr))

    @property
    def offset(self) -> float:
        """b = C + log2(L)/L, the rate at which the error probability is 1/2."""
        return self.capacity + math.log2(self.blocklength) / self.blocklength

    @property
    def slope(self) -> float:
        """k = sqrt(8L / (pi V log2(e)^2)); infinite when V = 0."""
        if self.dispersion == 0.0:
            return math.inf
        return math.sqrt(8.0 * self.blocklength / (math.pi * self.dispersion * LOG2E ** 2))


def q_exact(z: float) -> float:
    """Gaussian tail probability Q(z) = erfc(z / sqrt(2)) / 2."""
    return 0.5 * math.erfc(z / math.sqrt(2.0))


def _q_prime(z: float) -> float:
    return -math.exp(-0.5 * z * z) / math.sqrt(2.0 * math.pi)


def q_inv(eps: float, tol: float = 1e-15, max_iter: int = 200) -> float:
    """Inverse of :func:`q_exact` by Newton steps safeguarded with bisection."""
    if not 0.0 < eps < 1.0:
        raise ValueError(f"eps must lie in (0, 1), got {eps}")
    if eps == 0.5:
        return 0.0
    lo, hi = -40.0, 40.0  # Q(-40) == 1 and Q(40) ~ 4e-350 in double precision
    z = 0.0
    for _ in range(max_iter):
        fz = q_exact(z) - eps
        if fz > 0:
            lo = z
        else:
            hi = z
        d = _q_prime(z)
        step = fz / d if d != 0.0 else math.inf
        z_new = z - step
        if not lo < z_new < hi:
            z_new = 0.5 * (lo + hi)
        if abs(z_new - z) <= tol * max(1.0, abs(z)):
            return z_new
        z = z_new
    return z


def q_logistic(z: float) -> float:
    """Logistic approximation Q(z) ~ 1 / (1 + exp(2 a z)), a = sqrt(2/pi)."""
    return logistic(-2.0 * LOGISTIC_A * z)


def logistic(x: float) -> float:
    """1 / (1 + exp(-x)) without overflow."""
    if x >= 0:
        return 1.0 / (1.0 + math.exp(-x))
    e = math.exp(x)
    return e / (1.0 + e)


def achievable_rate(link: LinkParams, eps: float) -> float:
    """Maximal rate at error probability eps (normal approximation)."""
    L = link.blocklength
    return link.capacity - math.sqrt(link.dispersion / L) * q_inv(eps) * LOG2E + math.log2(L) / L


def error_prob_of_rate(link: LinkParams, rate: float) -> float:
    """Block error probability at ``rate`` from the logistic inversion of the rate formula."""
    if rate < 0:
        raise ValueError(f"rate must be non-negative, got {rate}")
    b = link.offset
    k = link.slope
    if math.isinf(k):
        return 0.0 if rate < b else (1.0 if rate > b else 0.5)
    return logistic(k * (rate - b))
