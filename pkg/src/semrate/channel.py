"""Flat-fading link simulation and i.i.d. bit-error injection.

Randomness comes from per-(trial, modality, purpose) Philox streams keyed off
a master seed, so a trial's gains and flip pattern do not depend on the order
in which trials or modalities are simulated.
"""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .fbl import LinkParams, error_prob_of_rate

FADING = ("awgn", "rayleigh")

# stream purposes
SAMPLE, GAIN, FLIP = 0, 1, 2


def stream(master_seed: int, trial: int, modality: int, purpose: int) -> np.random.Generator:
    """Independent counter-based generator for one (trial, modality, purpose)."""
    ss = np.random.SeedSequence(entropy=int(master_seed), spawn_key=(int(trial), int(modality), int(purpose)))
    return np.random.Generator(np.random.Philox(ss))


def sample_gain(fading: str, rng: np.random.Generator | None = None) -> float:
    """|h|: exactly 1 for AWGN; Rayleigh with E|h|^2 = 1 otherwise."""
    if fading == "awgn":
        return 1.0
    if fading == "rayleigh":
        if rng is None:
            raise ValueError("rayleigh fading needs an rng")
        return float(rng.rayleigh(scale=1.0 / math.sqrt(2.0)))
    raise ValueError(f"unknown fading {fading!r}; expected one of {FADING}")


def snr(h: float, tx_power: float, noise_power: float) -> float:
    if noise_power <= 0:
        raise ValueError("noise power must be positive")
    return abs(h) ** 2 * tx_power / noise_power


@dataclass(frozen=True)
class ChannelState:
    fading: str
    gain: float
    tx_power: float
    noise_power: float
    blocklength: int

    def __post_init__(self):
        if self.fading not in FADING:
            raise ValueError(f"unknown fading {self.fading!r}")
        if self.fading == "awgn" and self.gain != 1.0:
            raise ValueError("awgn links have unit gain")
        if self.gain < 0:
            raise ValueError("gain magnitude must be non-negative")
        if self.noise_power <= 0:
            raise ValueError("noise power must be positive")

    @property
    def snr(self) -> float:
        return snr(self.gain, self.tx_power, self.noise_power)

    def link(self) -> LinkParams:
        return LinkParams.from_snr(self.snr, self.blocklength)


@dataclass(frozen=True)
class CsiReport:
    trial: int
    snr: tuple[float, ...]

    def __post_init__(self):
        if any(s < 0 for s in self.snr):
            raise ValueError("snr estimates must be non-negative")


def draw_states(
    fading: str, snr_db: float, blocklength: int, master_seed: int, trial: int, n_modalities: int
) -> list[ChannelState]:
    """One static channel per modality for a trial; P/N set by ``snr_db``."""
    tx_power = 10.0 ** (snr_db / 10.0)
    states = []
    for m in range(n_modalities):
        h = 1.0 if fading == "awgn" else sample_gain(fading, stream(master_seed, trial, m, GAIN))
        states.append(ChannelState(fading, h, tx_power, 1.0, blocklength))
    return states


def csi_report(states: Sequence[ChannelState], trial: int) -> CsiReport:
    """Perfect CSI: the transmitter sees the true SNRs."""
    return CsiReport(trial, tuple(s.snr for s in states))


def transmit(bits: np.ndarray, eps: float, rng: np.random.Generator) -> np.ndarray:
    """Flip each bit independently with probability eps.

    One uniform is drawn per bit regardless of eps, so runs at different eps
    on the same stream flip nested sets of bits.
    """
    if not 0.0 <= eps <= 1.0:
        raise ValueError(f"eps must lie in [0, 1], got {eps}")
    bits = np.asarray(bits, dtype=np.uint8)
    flips = rng.random(bits.shape[0]) < eps
    return bits ^ flips.astype(np.uint8)


def link_error_prob(state: ChannelState, rate: float) -> float:
    return error_prob_of_rate(state.link(), rate)


TRANSCRIPT_FIELDS = ("trial", "modality", "fading", "gain", "snr", "rate", "eps", "bits", "flips")


def transcript_csv(rows: Sequence[dict]) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=TRANSCRIPT_FIELDS, lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})
    return buf.getvalue()
