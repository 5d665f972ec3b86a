"""End-to-end rate-adaptive transmission of quantized features and SNR sweeps.

One trial: encode raw inputs to features in [0, 1], certify per-modality
importance kappa on the decoder, solve for rates from CSI, quantize, flip bits
with the link error probability at each rate, dequantize and decode.
"""
from __future__ import annotations

import csv
import dataclasses
import io
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Sequence

import numpy as np

from . import channel, graph, quant
from .bounds import PerturbationBall, propagate_bounds, robustness_bound, semantic_importance
from .channel import ChannelState
from .ratesolver import (
    InfeasibleError,
    ModalityLink,
    RateSolution,
    fixed_rate_baseline,
    solve_bisection,
)

SCHEMES = ("adaptive", "fixed", "errorfree")
CSV_FIELDS = (
    "snr_db", "scheme", "trial", "modality", "rate", "eps",
    "delta_realized", "gamma_realized", "deviation", "delay", "mse", "mae",
)
CALIBRATION = 3  # stream purpose for the frozen-kappa calibration sample


@dataclass(frozen=True)
class ExperimentConfig:
    model_seed: int = 7
    modality_dims: tuple[int, ...] = (2, 16, 8)
    raw_dims: tuple[int, ...] | None = None
    hidden_dim: int = 16
    teacher_importance: tuple[float, ...] = (2.0, 0.05, 0.5)
    train_samples: int = 2048
    train_epochs: int = 1500
    step_size: float = 0.2
    weight_decay: float = 3e-3
    label_noise: float = 0.01
    bits: int = 8
    blocklength: int = 256
    delta0: float = 1e-3
    p: float = math.inf
    tol: float = 1e-6
    max_iter: int = 200
    fading: str = "awgn"
    snr_db: tuple[float, ...] = (0.0, 3.0, 6.0, 9.0, 12.0, 15.0, 18.0)
    trials: int = 100
    master_seed: int = 2024
    schemes: tuple[str, ...] = SCHEMES
    freeze_kappa: bool = False
    rvp_radius: float | None = None
    snap_mcs: bool = False
    jobs: int = 1

    def __post_init__(self):
        for name in ("modality_dims", "snr_db", "schemes", "teacher_importance"):
            object.__setattr__(self, name, tuple(getattr(self, name)))
        if self.raw_dims is not None:
            object.__setattr__(self, "raw_dims", tuple(self.raw_dims))
        object.__setattr__(self, "p", float(self.p))
        if self.bits < 1:
            raise ValueError("bits must be >= 1")
        if self.blocklength < 2:
            raise ValueError("blocklength must be >= 2")
        if not self.delta0 > 0:
            raise ValueError("delta0 must be positive")
        if not all(math.isfinite(s) for s in self.snr_db):
            raise ValueError("snr grid must be finite")
        if self.fading not in channel.FADING:
            raise ValueError(f"unknown fading {self.fading!r}")
        unknown = set(self.schemes) - set(SCHEMES)
        if unknown:
            raise ValueError(f"unknown schemes {sorted(unknown)}")
        if self.trials < 1 or self.jobs < 1:
            raise ValueError("trials and jobs must be >= 1")

    @property
    def M(self) -> int:
        return len(self.modality_dims)

    @property
    def payload_bits(self) -> list[int]:
        return [d * self.bits for d in self.modality_dims]

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["p"] = "inf" if self.p == math.inf else self.p
        for k, v in d.items():
            if isinstance(v, tuple):
                d[k] = list(v)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown config fields {sorted(unknown)}")
        d = dict(d)
        if "p" in d:
            d["p"] = math.inf if str(d["p"]).lower() in ("inf", "infinity") else float(d["p"])
        return cls(**d)

    def replace(self, **kw) -> "ExperimentConfig":
        return dataclasses.replace(self, **kw)


@dataclass(frozen=True, eq=False)
class Task:
    model: graph.ToyFusionModel
    teacher: graph.CompGraph


@dataclass(frozen=True, eq=False)
class Sample:
    trial: int
    raw: tuple[np.ndarray, ...]
    features: tuple[np.ndarray, ...]
    label: float


@dataclass
class TrialResult:
    scheme: str
    snr_db: float
    trial: int
    rates: list[float]
    eps: list[float]
    flips: list[int]
    bits: list[int]
    delta_realized: list[float]
    gamma_realized: float
    deviation: float
    delay: float
    y_hat: float
    y_clean: float
    label: float
    kappa: list[float]
    gamma_pred: float
    quant_gamma: float
    budget_realized: float

    @property
    def sq_error(self) -> float:
        return (self.y_hat - self.label) ** 2

    @property
    def abs_error(self) -> float:
        return abs(self.y_hat - self.label)

    @property
    def quant_floor(self) -> float:
        """MSE inflation that a deviation of at most quant_gamma can cause on this sample."""
        e = abs(self.y_clean - self.label)
        return (e + self.quant_gamma) ** 2 - e ** 2

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d.update(mse=self.sq_error, mae=self.abs_error)
        return d


# -- task construction ------------------------------------------------------


@lru_cache(maxsize=8)
def _cached_task(key: tuple) -> Task:
    (seed, dims, raw_dims, hidden, importance, n, epochs, step, decay, noise) = key
    model = graph.make_toy_fusion(seed, dims, hidden, raw_dims)
    teacher = graph.make_teacher(model, seed, importance, hidden_dim=hidden)
    data = graph.make_dataset(model, teacher, n, seed, noise)
    model = graph.train_toy(model, data, epochs, step, decay)
    return Task(model, teacher)


def build_task(config: ExperimentConfig) -> Task:
    """Trained toy fusion model plus the hidden teacher that labels samples."""
    return _cached_task((
        config.model_seed, config.modality_dims, config.raw_dims, config.hidden_dim,
        config.teacher_importance, config.train_samples, config.train_epochs,
        config.step_size, config.weight_decay, config.label_noise,
    ))


def draw_sample(task: Task, config: ExperimentConfig, trial: int, purpose: int = channel.SAMPLE) -> Sample:
    rng = channel.stream(config.master_seed, trial, 0, purpose)
    raw = tuple(rng.random(r) for r in task.model.raw_dims)
    # the squash maps onto [0, 1] exactly; clip only absorbs the last-ulp overshoot
    feats = tuple(np.clip(f, 0.0, 1.0) for f in task.model.encode(raw))
    label = float(graph.forward(task.teacher, feats)[0]) + config.label_noise * float(rng.standard_normal())
    return Sample(trial, raw, feats, label)


def _rvp_radius(config: ExperimentConfig) -> float:
    return 2.0 ** -config.bits if config.rvp_radius is None else config.rvp_radius


def importance(model: graph.ToyFusionModel, features: Sequence[np.ndarray], config: ExperimentConfig) -> list[float]:
    """Per-modality semantic importance at ``features`` for the planning ball."""
    ball = PerturbationBall(config.p, (_rvp_radius(config),) * len(features))
    bounds = propagate_bounds(model.decoder, features, ball)
    return [float(k) for k in semantic_importance(bounds, config.p)]


def realized_gamma(model: graph.ToyFusionModel, features, radii) -> float:
    if not any(radii):
        return 0.0
    ball = PerturbationBall(math.inf, tuple(radii))
    return robustness_bound(propagate_bounds(model.decoder, features, ball), ball).gamma


# -- MCS snapping -----------------------------------------------------------

MODULATIONS = {"QPSK": 2, "16QAM": 4, "64QAM": 6, "256QAM": 8}
CODE_RATES = (1 / 3, 1 / 2, 2 / 3, 3 / 4)
DEFAULT_MCS_TABLE = tuple(
    (name, bits, cr) for name, bits in MODULATIONS.items() for cr in CODE_RATES
)


@dataclass(frozen=True)
class McsChoice:
    modulation: str
    bits_per_symbol: int
    code_rate: float
    effective_rate: float
    below_table: bool


def mcs_snap(rate: float, table=DEFAULT_MCS_TABLE) -> McsChoice:
    """Largest code-rate x bits-per-symbol product not above ``rate``.

    Below the smallest entry the smallest entry is returned, flagged.
    """
    if not table:
        raise ValueError("empty MCS table")
    entries = sorted(((cr * bits, name, bits, cr) for name, bits, cr in table))
    fitting = [e for e in entries if e[0] <= rate]
    eff, name, bits, cr = fitting[-1] if fitting else entries[0]
    return McsChoice(name, bits, cr, eff, not fitting)


# -- one trial ----------------------------------------------------------------


def plan_rates(
    model: graph.ToyFusionModel, sample: Sample, states: Sequence[ChannelState], config: ExperimentConfig,
    kappa: Sequence[float] | None = None,
) -> tuple[list[ModalityLink], RateSolution]:
    """Importance from the decoder bounds, links from CSI, rates from the solver."""
    if kappa is None:
        kappa = importance(model, sample.features, config)
    csi = channel.csi_report(states, sample.trial)
    links = [
        ModalityLink(d * config.bits, k, s.link(), config.bits)
        for d, k, s in zip(model.feature_dims, kappa, states)
    ]
    assert all(abs(l.link.snr - c) == 0 for l, c in zip(links, csi.snr))
    return links, solve_bisection(links, config.delta0, config.tol, config.max_iter)


def _transmit_decode(
    model, sample: Sample, states, rates, links, config: ExperimentConfig, scheme: str,
    snr_db: float, solution: RateSolution,
) -> TrialResult:
    if config.snap_mcs:
        rates = [mcs_snap(r).effective_rate for r in rates]
    received, eps, flips, deltas = [], [], [], []
    budget = 0.0
    for m, (u, s, r, link) in enumerate(zip(sample.features, states, rates, links)):
        e = channel.link_error_prob(s, r)
        q = quant.quantize(u, config.bits)
        rx_bits = channel.transmit(q.bits, e, channel.stream(config.master_seed, sample.trial, m, channel.FLIP))
        rx = q.with_bits(rx_bits)
        u_hat = quant.dequantize(rx)
        n_flips = int(np.count_nonzero(q.bits ^ rx_bits))
        received.append(u_hat)
        eps.append(e)
        flips.append(n_flips)
        deltas.append(float(np.max(np.abs(u_hat - u))))
        budget += link.a * n_flips / q.bits.shape[0]
    y_clean = float(graph.forward(model.decoder, sample.features)[0])
    y_hat = float(graph.forward(model.decoder, received)[0])
    D = [l.D for l in links]
    return TrialResult(
        scheme=scheme,
        snr_db=snr_db,
        trial=sample.trial,
        rates=list(rates),
        eps=eps,
        flips=flips,
        bits=D,
        delta_realized=deltas,
        gamma_realized=realized_gamma(model, sample.features, deltas),
        deviation=abs(y_hat - y_clean),
        delay=max(d / r for d, r in zip(D, rates)),
        y_hat=y_hat,
        y_clean=y_clean,
        label=sample.label,
        kappa=[l.kappa for l in links],
        gamma_pred=sum(l.a * e for l, e in zip(links, eps)),
        quant_gamma=realized_gamma(model, sample.features, [2.0 ** -config.bits] * len(links)),
        budget_realized=budget,
    )


def run_adaptive(model, sample: Sample, states, config: ExperimentConfig, snr_db: float = math.nan,
                 kappa=None) -> TrialResult:
    links, sol = plan_rates(model, sample, states, config, kappa)
    return _transmit_decode(model, sample, states, sol.rates, links, config, "adaptive", snr_db, sol)


def run_fixed(model, sample: Sample, states, R_fixed: float | None, config: ExperimentConfig,
              snr_db: float = math.nan, kappa=None) -> TrialResult:
    """Uniform rate; by default the one matching the adaptive delay on the same CSI."""
    links, sol = plan_rates(model, sample, states, config, kappa)
    if R_fixed is None:
        R_fixed = fixed_rate_baseline([l.D for l in links], sol.rates)
    if R_fixed <= 0:
        raise ValueError("R_fixed must be positive")
    rates = [R_fixed] * len(links)
    return _transmit_decode(model, sample, states, rates, links, config, "fixed", snr_db, sol)


def run_errorfree(model, sample: Sample, states, config: ExperimentConfig, snr_db: float = math.nan,
                  kappa=None) -> TrialResult:
    """Full-precision features delivered without error, timed at the adaptive rates."""
    links, sol = plan_rates(model, sample, states, config, kappa)
    y = float(graph.forward(model.decoder, sample.features)[0])
    M = len(links)
    return TrialResult(
        "errorfree", snr_db, sample.trial, list(sol.rates), [0.0] * M, [0] * M, [l.D for l in links],
        [0.0] * M, 0.0, 0.0, sol.delay, y, y, sample.label, [l.kappa for l in links], 0.0,
        realized_gamma(model, sample.features, [2.0 ** -config.bits] * M), 0.0,
    )


# -- sweeps -------------------------------------------------------------------


@dataclass
class SweepResult:
    config: ExperimentConfig
    results: list[TrialResult]
    failures: list[dict] = field(default_factory=list)

    def rows(self) -> list[dict]:
        out = []
        for r in self.results:
            for m in range(len(r.rates)):
                out.append({
                    "snr_db": r.snr_db, "scheme": r.scheme, "trial": r.trial, "modality": m,
                    "rate": r.rates[m], "eps": r.eps[m], "delta_realized": r.delta_realized[m],
                    "gamma_realized": r.gamma_realized, "deviation": r.deviation, "delay": r.delay,
                    "mse": r.sq_error, "mae": r.abs_error,
                })
        return out

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=CSV_FIELDS, lineterminator="\n")
        w.writeheader()
        for row in self.rows():
            w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})
        return buf.getvalue()

    def select(self, scheme: str, snr_db: float | None = None) -> list[TrialResult]:
        return [r for r in self.results if r.scheme == scheme and (snr_db is None or r.snr_db == snr_db)]

    def summary(self) -> list[dict]:
        out = []
        for s in self.config.snr_db:
            for scheme in self.config.schemes:
                rs = self.select(scheme, s)
                failed = sum(1 for f in self.failures if f["snr_db"] == s and f["scheme"] == scheme)
                if not rs:
                    out.append({"snr_db": s, "scheme": scheme, "n": 0, "failed": failed})
                    continue
                se = np.array([r.sq_error for r in rs])
                ae = np.array([r.abs_error for r in rs])
                yh = np.array([r.y_hat for r in rs])
                lab = np.array([r.label for r in rs])
                corr = float(np.corrcoef(yh, lab)[0, 1]) if len(rs) > 1 and np.std(yh) > 0 else math.nan
                rates = np.array([r.rates for r in rs])
                out.append({
                    "snr_db": s, "scheme": scheme, "n": len(rs), "failed": failed,
                    "mse_mean": float(se.mean()), "mse_std": float(se.std()),
                    "mae_mean": float(ae.mean()), "mae_std": float(ae.std()), "corr": corr,
                    "delay_mean": float(np.mean([r.delay for r in rs])),
                    "gamma_mean": float(np.mean([r.gamma_realized for r in rs])),
                    "rate_mean": [float(x) for x in rates.mean(axis=0)],
                    "quant_floor_mean": float(np.mean([r.quant_floor for r in rs])),
                    "budget_pred_mean": float(np.mean([r.gamma_pred for r in rs])),
                    "budget_realized_mean": float(np.mean([r.budget_realized for r in rs])),
                })
        return out


def run_scheme(scheme: str, model, sample: Sample, states, config: ExperimentConfig, snr_db: float,
               kappa=None) -> TrialResult:
    if scheme == "adaptive":
        return run_adaptive(model, sample, states, config, snr_db, kappa)
    if scheme == "fixed":
        return run_fixed(model, sample, states, None, config, snr_db, kappa)
    if scheme == "errorfree":
        return run_errorfree(model, sample, states, config, snr_db, kappa)
    raise ValueError(f"unknown scheme {scheme!r}")


def simulate_trial(task: Task, config: ExperimentConfig, snr_db: float, trial: int, kappa=None):
    """Results for every configured scheme on one trial, plus failure records."""
    sample = draw_sample(task, config, trial)
    states = channel.draw_states(config.fading, snr_db, config.blocklength, config.master_seed, trial, config.M)
    results, failures = [], []
    try:
        if kappa is None:
            kappa = importance(task.model, sample.features, config)
    except Exception as exc:  # surfaced with its stage label, sweep continues
        failures = [{"snr_db": snr_db, "scheme": s, "trial": trial, "stage": "bounds", "error": str(exc)}
                    for s in config.schemes]
        return results, failures
    for scheme in config.schemes:
        try:
            results.append(run_scheme(scheme, task.model, sample, states, config, snr_db, kappa))
        except InfeasibleError as exc:
            failures.append({"snr_db": snr_db, "scheme": scheme, "trial": trial, "stage": "solve", "error": str(exc)})
    return results, failures


def snr_sweep(config: ExperimentConfig, task: Task | None = None) -> SweepResult:
    """All (SNR, trial, scheme) results, ordered by SNR index then trial then scheme."""
    task = build_task(config) if task is None else task
    kappa = None
    if config.freeze_kappa:
        calib = draw_sample(task, config, 0, purpose=CALIBRATION)
        kappa = importance(task.model, calib.features, config)
    jobs = [(s, t) for s in config.snr_db for t in range(config.trials)]
    slots: list = [None] * len(jobs)

    def work(i):
        s, t = jobs[i]
        slots[i] = simulate_trial(task, config, s, t, kappa)

    if config.jobs > 1:
        with ThreadPoolExecutor(max_workers=config.jobs) as pool:
            list(pool.map(work, range(len(jobs))))
    else:
        for i in range(len(jobs)):
            work(i)
    results, failures = [], []
    for res, fail in slots:
        results.extend(res)
        failures.extend(fail)
    return SweepResult(config, results, failures)


def load_config(path: str) -> ExperimentConfig:
    with open(path, encoding="utf-8") as fh:
        return ExperimentConfig.from_dict(json.load(fh))
