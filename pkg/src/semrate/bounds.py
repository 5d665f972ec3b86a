"""Linear output bounds for a CompGraph under per-modality L_p perturbation balls.

Bounds are obtained by backward substitution (CROWN style): starting from the
identity at the target node, coefficients are pushed to the inputs in reverse
topological order. ReLU nodes are replaced by linear upper/lower lines whose
slopes depend on the pre-activation interval, itself obtained by running the
same backward pass on the ReLU's parent and concretizing it against the ball.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .graph import CompGraph, GraphError

_SUPPORTED_P = (1.0, 2.0, math.inf)


def _check_p(p) -> float:
    p = float(p)
    if p not in _SUPPORTED_P:
        raise ValueError(f"unsupported norm order p={p}; expected 1, 2 or inf")
    return p


def conjugate(p: float) -> float:
    """Hoelder conjugate q with 1/p + 1/q = 1."""
    p = _check_p(p)
    if p == 1.0:
        return math.inf
    if p == math.inf:
        return 1.0
    return p / (p - 1.0)


@dataclass(frozen=True)
class PerturbationBall:
    p: float
    radii: tuple[float, ...]

    def __post_init__(self):
        object.__setattr__(self, "p", _check_p(self.p))
        radii = tuple(float(r) for r in self.radii)
        if any(not math.isfinite(r) or r < 0 for r in radii):
            raise ValueError(f"radii must be finite and non-negative, got {radii}")
        object.__setattr__(self, "radii", radii)

    @property
    def q(self) -> float:
        return conjugate(self.p)

    def scaled(self, alpha: float) -> "PerturbationBall":
        return PerturbationBall(self.p, tuple(alpha * r for r in self.radii))


def dual_norm(v, p) -> float:
    """||v||_q where q is the Hoelder conjugate of p."""
    return float(np.linalg.norm(np.asarray(v, dtype=np.float64).ravel(), ord=conjugate(p)))


def dual_maximizer(v, p) -> np.ndarray:
    """Unit L_p vector x with v.x = ||v||_q.

    Finite q uses x_i = |v_i|^(q-2) v_i / ||v||_q^(q-1). For p = inf it is the
    sign vector; for p = 1 it is the signed basis vector at the first argmax |v_i|.
    """
    v = np.asarray(v, dtype=np.float64).ravel()
    p = _check_p(p)
    if not np.any(v):
        raise ValueError("dual maximizer undefined for the zero vector")
    if p == math.inf:
        return np.sign(v)
    if p == 1.0:
        i = int(np.argmax(np.abs(v)))
        x = np.zeros_like(v)
        x[i] = math.copysign(1.0, v[i])
        return x
    q = conjugate(p)
    nq = np.linalg.norm(v, ord=q)
    return np.abs(v) ** (q - 2.0) * v / nq ** (q - 1.0)


def relax_relu(l: float, u: float) -> tuple[float, float, float, float]:
    """Linear lines bounding max(0, x) on [l, u].

    Returns (upper slope, upper intercept, lower slope, lower intercept).
    """
    if l > u:
        raise ValueError(f"invalid pre-activation interval [{l}, {u}]")
    if u <= 0:
        return 0.0, 0.0, 0.0, 0.0
    if l >= 0:
        return 1.0, 0.0, 1.0, 0.0
    s = u / (u - l)
    return s, -s * l, (1.0 if u >= -l else 0.0), 0.0


def _relax_relu_vec(l: np.ndarray, u: np.ndarray):
    # elementwise version of relax_relu
    dead = u <= 0
    live = (l >= 0) & ~dead
    cross = ~dead & ~live
    denom = np.where(cross, u - l, 1.0)
    su = np.where(live, 1.0, np.where(cross, u / denom, 0.0))
    bu = np.where(cross, -su * l, 0.0)
    sl = np.where(live, 1.0, np.where(cross & (u >= -l), 1.0, 0.0))
    return su, bu, sl, np.zeros_like(l)


@dataclass(frozen=True, eq=False)
class LinearBounds:
    """A_L x + b_L <= h(x) <= A_U x + b_U for all x in the ball used to build them.

    ``blocks[m]`` selects modality m's columns; ``center`` is the concatenated
    center the relaxations were computed around.
    """

    A_L: np.ndarray
    A_U: np.ndarray
    b_L: np.ndarray
    b_U: np.ndarray
    blocks: tuple[slice, ...]
    center: np.ndarray | None = None

    def block(self, m: int) -> tuple[np.ndarray, np.ndarray]:
        return self.A_L[:, self.blocks[m]], self.A_U[:, self.blocks[m]]


@dataclass(frozen=True, eq=False)
class RobustnessReport:
    gamma: float
    kappa: tuple[float, ...]
    p: float
    radii: tuple[float, ...]
    lower: np.ndarray
    upper: np.ndarray

    def to_dict(self) -> dict:
        return {
            "gamma": self.gamma,
            "kappa": list(self.kappa),
            "p": "inf" if self.p == math.inf else self.p,
            "radii": list(self.radii),
            "box": [[float(lo), float(hi)] for lo, hi in zip(self.lower, self.upper)],
        }


def _center_vector(graph: CompGraph, center) -> np.ndarray:
    if isinstance(center, np.ndarray) and center.ndim == 1 and center.shape[0] == graph.total_input_dim:
        return center.astype(np.float64)
    parts = [np.asarray(c, dtype=np.float64).ravel() for c in center]
    if [p.shape[0] for p in parts] != graph.input_dims:
        raise GraphError(f"center dims {[p.shape[0] for p in parts]} != modality dims {graph.input_dims}")
    return np.concatenate(parts)


def _row_dual_norms(A: np.ndarray, blocks: Sequence[slice], q: float) -> np.ndarray:
    """(rows, M) array of ||A[row, block_m]||_q."""
    return np.stack([np.linalg.norm(A[:, sl], ord=q, axis=1) for sl in blocks], axis=1)


def _concretize_arrays(A_L, A_U, b_L, b_U, blocks, x0, ball):
    q = ball.q
    r = np.asarray(ball.radii)
    up = _row_dual_norms(A_U, blocks, q) @ r + A_U @ x0 + b_U
    lo = -(_row_dual_norms(A_L, blocks, q) @ r) + A_L @ x0 + b_L
    return lo, up


class _Propagator:
    def __init__(self, graph: CompGraph, x0: np.ndarray, ball: PerturbationBall):
        self.graph = graph
        self.x0 = x0
        self.ball = ball
        self.blocks = graph.block_slices()
        self.index = {n.id: i for i, n in enumerate(graph.nodes)}
        self.boxes: dict[str, tuple[np.ndarray, np.ndarray]] = {}
        self.dims: dict[str, int] = {}
        for n in graph.nodes:
            if n.kind == "input":
                self.dims[n.id] = n.dim
            elif n.kind == "affine":
                self.dims[n.id] = n.weight.shape[0]
            elif n.kind == "concat":
                self.dims[n.id] = sum(self.dims[p] for p in n.parents)
            else:
                self.dims[n.id] = self.dims[n.parents[0]]

    def box(self, node_id: str):
        if node_id not in self.boxes:
            A_L, A_U, b_L, b_U = self.backward(node_id)
            lo, up = _concretize_arrays(A_L, A_U, b_L, b_U, self.blocks, self.x0, self.ball)
            # roundoff can invert a degenerate interval by an ulp
            lo = np.minimum(lo, up)
            self.boxes[node_id] = (lo, up)
        return self.boxes[node_id]

    def backward(self, target: str):
        rows = self.dims[target]
        total = self.x0.shape[0]
        A_L = np.zeros((rows, total))
        A_U = np.zeros((rows, total))
        b_L = np.zeros(rows)
        b_U = np.zeros(rows)
        eye = np.eye(rows)
        lam: dict[str, list[np.ndarray]] = {target: [eye.copy(), eye.copy()]}

        def push(pid, lu, ll):
            if pid in lam:
                lam[pid][0] = lam[pid][0] + lu
                lam[pid][1] = lam[pid][1] + ll
            else:
                lam[pid] = [lu, ll]

        for n in reversed(self.graph.nodes[: self.index[target] + 1]):
            if n.id not in lam:
                continue
            lu, ll = lam.pop(n.id)
            if n.kind == "input":
                sl = self.blocks[n.modality]
                A_U[:, sl] += lu
                A_L[:, sl] += ll
            elif n.kind == "affine":
                b_U += lu @ n.bias
                b_L += ll @ n.bias
                push(n.parents[0], lu @ n.weight, ll @ n.weight)
            elif n.kind == "relu":
                l, u = self.box(n.parents[0])
                su, bu, sl_, bl = _relax_relu_vec(l, u)
                lu_pos, lu_neg = np.maximum(lu, 0), np.minimum(lu, 0)
                ll_pos, ll_neg = np.maximum(ll, 0), np.minimum(ll, 0)
                b_U += lu_pos @ bu + lu_neg @ bl
                b_L += ll_pos @ bl + ll_neg @ bu
                push(n.parents[0], lu_pos * su + lu_neg * sl_, ll_pos * sl_ + ll_neg * su)
            elif n.kind == "concat":
                start = 0
                for p in n.parents:
                    d = self.dims[p]
                    push(p, lu[:, start:start + d], ll[:, start:start + d])
                    start += d
            elif n.kind == "add":
                for p in n.parents:
                    push(p, lu, ll)
            elif n.kind == "scale":
                push(n.parents[0], n.scale * lu, n.scale * ll)
            else:
                raise GraphError(f"unsupported node kind {n.kind!r}", n.id)
        return A_L, A_U, b_L, b_U


def propagate_bounds(graph: CompGraph, center, ball: PerturbationBall) -> LinearBounds:
    """Linear bounds of the output node valid on the ball around ``center``.

    ``center`` is a list of per-modality vectors (or the concatenated vector).
    Graphs without ReLU nodes get exact bounds (A_L == A_U, b_L == b_U).
    """
    if len(ball.radii) != len(graph.modalities):
        raise ValueError(f"ball has {len(ball.radii)} radii for {len(graph.modalities)} modalities")
    x0 = _center_vector(graph, center)
    prop = _Propagator(graph, x0, ball)
    A_L, A_U, b_L, b_U = prop.backward(graph.output)
    return LinearBounds(A_L, A_U, b_L, b_U, tuple(prop.blocks), x0)


def concretize(bounds: LinearBounds, ball: PerturbationBall, center=None) -> tuple[np.ndarray, np.ndarray]:
    """Per output coordinate (lowest lower bound, highest upper bound) over the ball."""
    if center is None:
        if bounds.center is None:
            raise ValueError("no center given and the bounds carry none")
        x0 = bounds.center
    elif isinstance(center, np.ndarray) and center.ndim == 1:
        x0 = center.astype(np.float64)
    else:
        x0 = np.concatenate([np.asarray(c, dtype=np.float64).ravel() for c in center])
    if len(ball.radii) != len(bounds.blocks):
        raise ValueError("ball and bounds disagree on the number of modalities")
    return _concretize_arrays(bounds.A_L, bounds.A_U, bounds.b_L, bounds.b_U, bounds.blocks, x0, ball)


def semantic_importance(bounds: LinearBounds, p) -> np.ndarray:
    """kappa_m = ||A_U row block||_q + ||A_L row block||_q, max over output rows."""
    q = conjugate(p)
    per_row = _row_dual_norms(bounds.A_U, bounds.blocks, q) + _row_dual_norms(bounds.A_L, bounds.blocks, q)
    return per_row.max(axis=0)


def robustness_bound(bounds: LinearBounds, ball: PerturbationBall, center=None) -> RobustnessReport:
    """Noise-only robustness bound gamma = sum_m radius_m * kappa_m, plus the full box."""
    kappa = semantic_importance(bounds, ball.p)
    gamma = float(np.dot(np.asarray(ball.radii), kappa))
    if center is None and bounds.center is None:
        lo = up = np.full(bounds.b_U.shape, np.nan)
    else:
        lo, up = concretize(bounds, ball, center)
    return RobustnessReport(gamma, tuple(float(k) for k in kappa), ball.p, ball.radii, lo, up)
