"""Brute-force reference computations used by the test-suite.

Nothing here imports the bound propagation, solver, quantizer or link code it
checks; graphs are evaluated with a small standalone interpreter and the link
constants are recomputed from scratch.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from fractions import Fraction
from typing import Callable, Sequence

import numpy as np


@dataclass(frozen=True)
class OracleReport:
    quantity: str
    oracle: float
    main: float
    budget: float  # sample count or grid step

    @property
    def abs_gap(self) -> float:
        return abs(self.oracle - self.main)

    @property
    def rel_gap(self) -> float:
        scale = max(abs(self.oracle), abs(self.main))
        return self.abs_gap / scale if scale > 0 else 0.0

    def to_dict(self) -> dict:
        return {
            "quantity": self.quantity, "oracle": self.oracle, "main": self.main,
            "abs_gap": self.abs_gap, "rel_gap": self.rel_gap, "budget": self.budget,
        }


# -- graph evaluation ---------------------------------------------------------


def evaluate(graph, x: np.ndarray) -> np.ndarray:
    """Outputs for a batch of flat inputs x with shape (n, total input dim)."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    vals = {}
    offset = 0
    inputs = sorted((n for n in graph.nodes if n.kind == "input"), key=lambda n: n.modality)
    for n in inputs:
        vals[n.id] = x[:, offset:offset + n.dim]
        offset += n.dim
    for n in graph.nodes:
        if n.kind == "input":
            continue
        ps = [vals[p] for p in n.parents]
        if n.kind == "affine":
            v = ps[0] @ np.asarray(n.weight).T + np.asarray(n.bias)
        elif n.kind == "relu":
            v = np.where(ps[0] > 0, ps[0], 0.0)
        elif n.kind == "concat":
            v = np.hstack(ps)
        elif n.kind == "add":
            v = sum(ps[1:], ps[0])
        elif n.kind == "scale":
            v = n.scale * ps[0]
        else:
            raise ValueError(f"unsupported node kind {n.kind!r}")
        vals[n.id] = v
    return vals[graph.output]


def _ball_samples(rng, center: np.ndarray, p: float, radii: np.ndarray, sizes, n: int) -> np.ndarray:
    """Uniform samples from each block's p-ball around the center."""
    out = np.repeat(center[None, :], n, axis=0)
    off = 0
    for r, d in zip(radii, sizes):
        if r > 0:
            if math.isinf(p):
                z = rng.uniform(-1.0, 1.0, (n, d))
            else:
                g = rng.standard_normal((n, d)) if p == 2 else rng.laplace(size=(n, d))
                g /= np.linalg.norm(g, ord=p, axis=1, keepdims=True)
                z = g * rng.random((n, 1)) ** (1.0 / d)
            out[:, off:off + d] += r * z
        off += d
    return out


def _corners(center: np.ndarray, p: float, radii, sizes) -> np.ndarray:
    """Vertices of the product ball: sign corners for inf, +-r e_i for p = 1."""
    blocks = []
    for r, d in zip(radii, sizes):
        if r == 0:
            blocks.append(np.zeros((1, d)))
        elif math.isinf(p):
            blocks.append(r * np.array(list(itertools.product((-1.0, 1.0), repeat=d))))
        else:
            eye = np.eye(d)
            blocks.append(r * np.vstack([eye, -eye]))
    rows = [np.concatenate(c) for c in itertools.product(*blocks)]
    return center[None, :] + np.array(rows)


def oracle_output_range(graph, center, p: float, radii: Sequence[float], samples: int, seed: int = 0,
                        corner_limit: int = 12) -> tuple[np.ndarray, np.ndarray]:
    """Inner estimate of the output range over the ball, per output coordinate."""
    if samples < 1:
        raise ValueError("samples must be >= 1")
    sizes = [n.dim for n in sorted((n for n in graph.nodes if n.kind == "input"), key=lambda n: n.modality)]
    c = np.concatenate([np.asarray(u, dtype=np.float64).ravel() for u in center]) \
        if isinstance(center, (list, tuple)) else np.asarray(center, dtype=np.float64).ravel()
    radii = np.asarray(radii, dtype=np.float64)
    rng = np.random.default_rng(seed)
    pts = [c[None, :], _ball_samples(rng, c, p, radii, sizes, samples)]
    if sum(sizes) <= corner_limit and p in (1.0, math.inf):
        pts.append(_corners(c, p, radii, sizes))
    y = evaluate(graph, np.vstack(pts))
    return y.min(axis=0), y.max(axis=0)


# -- rate allocation ---------------------------------------------------------


def link_terms(kappa, D, snr, L: int, B: int):
    """(a, b, k, D) arrays recomputed from physical link parameters."""
    kappa, D, snr = (np.asarray(v, dtype=np.float64) for v in (kappa, D, snr))
    a = (1.0 - 0.5 ** B) * kappa
    b = np.log1p(snr) / (2.0 * np.log(2.0)) + np.log(L) / np.log(2.0) / L
    V = 1.0 - 1.0 / (1.0 + snr) ** 2
    k = np.sqrt(8.0 * L / (np.pi * V)) * np.log(2.0)
    return a, b, k, D


def oracle_f(a, b, k, D, delta0, tau):
    tau = np.asarray(tau, dtype=np.float64)
    x = k[None, :] * (b[None, :] - D[None, :] * tau.reshape(-1, 1))
    return (a[None, :] * np.exp(-np.logaddexp(0.0, x))).sum(axis=1) - delta0


def oracle_grid_tau(a, b, k, D, delta0: float, step: float = 1e-8, levels: int = 8) -> float:
    """Root of the budget equation by nested grid scans down to ``step``, then one bisection step.

    Each level scans 101 points over the cell found by the previous level and
    keeps the first cell where the function changes sign.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    a, b, k, Dv = (np.atleast_1d(np.asarray(v, dtype=np.float64)) for v in (a, b, k, D))
    lo, hi = 0.0, float(np.min(b / Dv))
    if oracle_f(a, b, k, Dv, delta0, hi)[0] <= 0:
        return hi
    if oracle_f(a, b, k, Dv, delta0, lo)[0] >= 0:
        raise ValueError("no sign change on the grid")
    for _ in range(levels):
        if hi - lo <= step:
            break
        n = max(2, min(100, int(math.ceil((hi - lo) / step))))
        g = np.linspace(lo, hi, n + 1)
        f = oracle_f(a, b, k, Dv, delta0, g)
        i = int(np.argmax(f >= 0))
        lo, hi = g[i - 1], g[i]
    mid = 0.5 * (lo + hi)
    if oracle_f(a, b, k, Dv, delta0, mid)[0] >= 0:
        hi = mid
    else:
        lo = mid
    return 0.5 * (lo + hi)


# -- quantization ------------------------------------------------------------


def oracle_distortion_enum(B: int, K: int) -> tuple[Fraction, Fraction]:
    """Exact mean and max of sum 2^-i over all K-subsets of bit positions 1..B."""
    if B > 20:
        raise ValueError("B > 20 is too large to enumerate")
    if not 0 <= K <= B:
        raise ValueError("need 0 <= K <= B")
    total = Fraction(0)
    worst = Fraction(0)
    count = 0
    for pos in itertools.combinations(range(1, B + 1), K):
        v = sum((Fraction(1, 2 ** i) for i in pos), Fraction(0))
        total += v
        worst = max(worst, v)
        count += 1
    return total / count, worst


# -- derivatives ---------------------------------------------------------------


def finite_diff_grad(fn: Callable[[np.ndarray], float], x, h: float = 1e-6) -> np.ndarray:
    """Central-difference gradient of a scalar function."""
    x = np.asarray(x, dtype=np.float64)
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        e = np.zeros_like(x)
        e[i] = h
        g[i] = (fn(x + e) - fn(x - e)) / (2.0 * h)
    return g


def second_diff(fn: Callable[[float], float], x: float, h: float = 1e-4) -> float:
    return (fn(x + h) - 2.0 * fn(x) + fn(x - h)) / (h * h)
