"""B-bit fixed-point quantization of features in [0, 1] and bit-error distortion.

Element j of a feature is encoded as B fractional bits, most significant
first; the bit stream is element-major. Flipping fractional bit i changes the
value by 2^-i, so errors in leading bits do the most damage.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True, eq=False)
class QuantizedFeature:
    bits: np.ndarray  # uint8 0/1, length d*B
    B: int
    d: int

    def __post_init__(self):
        bits = np.asarray(self.bits, dtype=np.uint8).ravel()
        if bits.shape[0] != self.d * self.B:
            raise ValueError(f"bit length {bits.shape[0]} != d*B = {self.d * self.B}")
        if np.any(bits > 1):
            raise ValueError("bits must be 0 or 1")
        object.__setattr__(self, "bits", bits)

    def codes(self) -> np.ndarray:
        weights = 1 << np.arange(self.B - 1, -1, -1, dtype=np.int64)
        return self.bits.reshape(self.d, self.B).astype(np.int64) @ weights

    def to_bytes(self) -> bytes:
        """Byte-packed, MSB first, zero padded at the end."""
        return np.packbits(self.bits).tobytes()

    @classmethod
    def from_bytes(cls, data: bytes, B: int, d: int) -> "QuantizedFeature":
        bits = np.unpackbits(np.frombuffer(data, dtype=np.uint8))
        if bits.shape[0] < d * B:
            raise ValueError("not enough bytes for d*B bits")
        return cls(bits[: d * B], B, d)

    def with_bits(self, bits: np.ndarray) -> "QuantizedFeature":
        return QuantizedFeature(bits, self.B, self.d)


def quantize(u, B: int) -> QuantizedFeature:
    """Round each element to the nearest j * 2^-B (ties up, top code clamps)."""
    if B < 1:
        raise ValueError("B must be >= 1")
    if B > 52:
        raise ValueError("B > 52 exceeds double precision")
    u = np.asarray(u, dtype=np.float64).ravel()
    bad = np.flatnonzero(~((u >= 0.0) & (u <= 1.0)))
    if bad.size:
        i = int(bad[0])
        raise ValueError(f"element {i} = {u[i]} outside [0, 1]")
    top = (1 << B) - 1
    codes = np.minimum(np.floor(u * (1 << B) + 0.5).astype(np.int64), top)
    shifts = np.arange(B - 1, -1, -1, dtype=np.int64)
    bits = ((codes[:, None] >> shifts) & 1).astype(np.uint8)
    return QuantizedFeature(bits.ravel(), B, u.shape[0])


def dequantize(q: QuantizedFeature) -> np.ndarray:
    """Value of each element: sum_j bit_j 2^-j."""
    return q.codes().astype(np.float64) / (1 << q.B)


def max_distortion(K: int, B: int) -> float:
    """Worst-case distortion of K bit errors: all on the K leading bits."""
    _check_k(K, B)
    return 1.0 - 2.0 ** -K


def expected_distortion(K: int, B: int) -> float:
    """Mean distortion of K bit errors placed uniformly over the B positions."""
    _check_k(K, B)
    return K * ((1 << B) - 1) / (B << B)  # exact integers, one rounding


def distortion_bound_from_eps(eps: float, B: int) -> float:
    if not 0.0 <= eps <= 1.0:
        raise ValueError(f"eps must lie in [0, 1], got {eps}")
    return eps * (1.0 - 2.0 ** -B)


def pattern_distortion(sent: QuantizedFeature, received: QuantizedFeature) -> np.ndarray:
    """Per element, sum of 2^-i over flipped bit positions i.

    This is the error-pattern distortion whose mean the K-bit formula gives;
    the actual numeric change |received - sent| never exceeds it.
    """
    if (sent.B, sent.d) != (received.B, received.d):
        raise ValueError("features differ in shape")
    flips = (sent.bits ^ received.bits).reshape(sent.d, sent.B)
    weights = 2.0 ** -np.arange(1, sent.B + 1)
    return flips @ weights


def _check_k(K: int, B: int) -> None:
    if B < 1:
        raise ValueError("B must be >= 1")
    if not 0 <= K <= B:
        raise ValueError(f"K must satisfy 0 <= K <= B, got K={K}, B={B}")
