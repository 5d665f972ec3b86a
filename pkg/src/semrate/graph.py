"""Small feed-forward fusion networks as directed acyclic computation graphs.

A graph is a tuple of :class:`NodeSpec` in topological order. Values are
plain numpy arrays whose last axis is the feature axis, so every operation
works unchanged on a single sample ``(d,)`` or a batch ``(n, d)``.
"""
from __future__ import annotations

import graphlib
import hashlib
import json
import math
from dataclasses import dataclass, field, replace
from typing import Any, Mapping, Sequence

import numpy as np

KINDS = ("input", "affine", "relu", "concat", "add", "scale")


class GraphError(ValueError):
    """Raised when a graph cannot be evaluated; carries the offending node id."""

    def __init__(self, message: str, node_id: str | None = None):
        super().__init__(message if node_id is None else f"{message} (node {node_id!r})")
        self.node_id = node_id


class TrainingError(RuntimeError):
    pass


def _frozen(a, ndim: int) -> np.ndarray:
    arr = np.array(a, dtype=np.float64)
    if arr.ndim != ndim:
        raise ValueError(f"expected {ndim}-d array, got shape {arr.shape}")
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True, eq=False)
class NodeSpec:
    id: str
    kind: str
    parents: tuple[str, ...] = ()
    modality: int | None = None
    dim: int | None = None
    weight: np.ndarray | None = None
    bias: np.ndarray | None = None
    scale: float | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown node kind {self.kind!r}")
        object.__setattr__(self, "parents", tuple(self.parents))
        if self.weight is not None:
            object.__setattr__(self, "weight", _frozen(self.weight, 2))
        if self.bias is not None:
            object.__setattr__(self, "bias", _frozen(self.bias, 1))


def input_node(id: str, modality: int, dim: int) -> NodeSpec:
    return NodeSpec(id, "input", (), modality=modality, dim=dim)


def affine(id: str, parent: str, weight, bias=None) -> NodeSpec:
    weight = np.asarray(weight, dtype=np.float64)
    if bias is None:
        bias = np.zeros(weight.shape[0])
    return NodeSpec(id, "affine", (parent,), weight=weight, bias=bias)


def relu(id: str, parent: str) -> NodeSpec:
    return NodeSpec(id, "relu", (parent,))


def concat(id: str, parents: Sequence[str]) -> NodeSpec:
    return NodeSpec(id, "concat", tuple(parents))


def add(id: str, parents: Sequence[str]) -> NodeSpec:
    return NodeSpec(id, "add", tuple(parents))


def scale(id: str, parent: str, c: float) -> NodeSpec:
    return NodeSpec(id, "scale", (parent,), scale=float(c))


@dataclass(frozen=True, eq=False)
class CompGraph:
    """Nodes in topological order, the output node id and the modality partition.

    ``modalities[m]`` is ``(input node id, dim)`` for modality ``m``.
    """

    nodes: tuple[NodeSpec, ...]
    output: str
    modalities: tuple[tuple[str, int], ...]

    def __post_init__(self):
        object.__setattr__(self, "nodes", tuple(self.nodes))
        object.__setattr__(
            self, "modalities", tuple((str(i), int(d)) for i, d in self.modalities)
        )

    @classmethod
    def from_nodes(cls, nodes: Sequence[NodeSpec], output: str) -> "CompGraph":
        """Build a graph, deriving the modality partition from the input nodes."""
        inputs = sorted((n for n in nodes if n.kind == "input"), key=lambda n: n.modality)
        g = cls(tuple(nodes), output, tuple((n.id, n.dim) for n in inputs))
        problems = validate_graph(g)
        if problems:
            raise GraphError("invalid graph: " + "; ".join(problems))
        return g

    def node(self, node_id: str) -> NodeSpec:
        for n in self.nodes:
            if n.id == node_id:
                return n
        raise KeyError(node_id)

    @property
    def input_dims(self) -> list[int]:
        return [d for _, d in self.modalities]

    @property
    def total_input_dim(self) -> int:
        return sum(self.input_dims)

    def block_slices(self) -> list[slice]:
        """Column slices of each modality inside the concatenated input vector."""
        out, start = [], 0
        for d in self.input_dims:
            out.append(slice(start, start + d))
            start += d
        return out

    def output_dim(self) -> int:
        return node_dims(self)[self.output]


def node_dims(graph: CompGraph) -> dict[str, int | None]:
    """Output dimension of every node; ``None`` where it cannot be inferred."""
    dims: dict[str, int | None] = {}
    for n in graph.nodes:
        pd = [dims.get(p) for p in n.parents]
        if n.kind == "input":
            dims[n.id] = n.dim
        elif n.kind == "affine":
            dims[n.id] = None if n.weight is None else n.weight.shape[0]
        elif n.kind == "concat":
            dims[n.id] = None if any(d is None for d in pd) else sum(pd)
        else:
            dims[n.id] = pd[0] if pd else None
    return dims


def validate_graph(graph: CompGraph) -> list[str]:
    """Return one message per violated structural invariant; empty when valid."""
    problems: list[str] = []
    ids = [n.id for n in graph.nodes]
    known = set(ids)
    if len(known) != len(ids):
        problems.append("duplicate node ids")
    for n in graph.nodes:
        for p in n.parents:
            if p not in known:
                problems.append(f"unknown parent {p!r} of node {n.id!r}")
    if problems:
        return problems

    sorter = graphlib.TopologicalSorter({n.id: n.parents for n in graph.nodes})
    try:
        tuple(sorter.static_order())
    except graphlib.CycleError:
        return ["not a DAG"]
    position = {nid: i for i, nid in enumerate(ids)}
    if any(position[p] >= position[n.id] for n in graph.nodes for p in n.parents):
        problems.append("nodes not in topological order")

    dims: dict[str, int | None] = {}
    for n in graph.nodes:
        pd = [dims.get(p) for p in n.parents]
        out: int | None = None
        if n.kind == "input":
            if n.parents:
                problems.append(f"input node {n.id!r} has parents")
            if n.dim is None or n.dim < 1 or n.modality is None:
                problems.append(f"input node {n.id!r} needs modality and dim >= 1")
            out = n.dim
        elif n.kind == "affine":
            if len(n.parents) != 1 or n.weight is None or n.bias is None:
                problems.append(f"affine node {n.id!r} needs one parent, weight and bias")
            else:
                if pd[0] is not None and n.weight.shape[1] != pd[0]:
                    problems.append(
                        f"dim mismatch at node {n.id!r}: weight has {n.weight.shape[1]} "
                        f"columns, parent dim {pd[0]}"
                    )
                if n.bias.shape[0] != n.weight.shape[0]:
                    problems.append(f"dim mismatch at node {n.id!r}: bias length")
                if not (np.all(np.isfinite(n.weight)) and np.all(np.isfinite(n.bias))):
                    problems.append(f"non-finite parameters at node {n.id!r}")
                out = n.weight.shape[0]
        elif n.kind in ("relu", "scale"):
            if len(n.parents) != 1:
                problems.append(f"{n.kind} node {n.id!r} needs exactly one parent")
            if n.kind == "scale" and (n.scale is None or not math.isfinite(n.scale)):
                problems.append(f"scale node {n.id!r} needs a finite constant")
            out = pd[0] if pd else None
        elif n.kind == "concat":
            out = None if not pd or any(d is None for d in pd) else sum(pd)
        elif n.kind == "add":
            known_d = {d for d in pd if d is not None}
            if len(known_d) > 1:
                problems.append(f"dim mismatch at node {n.id!r}: add of dims {sorted(known_d)}")
            out = known_d.pop() if len(known_d) == 1 else None
        dims[n.id] = out

    children = {nid: 0 for nid in ids}
    for n in graph.nodes:
        for p in n.parents:
            children[p] += 1
    sinks = [nid for nid, c in children.items() if c == 0]
    if graph.output not in known:
        problems.append(f"output node {graph.output!r} missing")
    elif sinks != [graph.output]:
        problems.append(f"expected exactly one sink equal to the output, found {sinks}")

    inputs = [n for n in graph.nodes if n.kind == "input"]
    by_modality = sorted((n.modality, n.id, n.dim) for n in inputs if n.modality is not None)
    if [m for m, _, _ in by_modality] != list(range(len(inputs))):
        problems.append("input modalities must be numbered 0..M-1 without gaps")
    elif [(i, d) for _, i, d in by_modality] != list(graph.modalities):
        problems.append("modality partition does not match input nodes")

    reach = {n.id for n in inputs}
    for n in graph.nodes:
        if any(p in reach for p in n.parents):
            reach.add(n.id)
    for n in graph.nodes:
        if n.kind != "input" and n.id not in reach:
            problems.append(f"node {n.id!r} unreachable from the inputs")
    return problems


class _Values(dict):
    def __missing__(self, key):
        raise RuntimeError(f"read of unset node value {key!r}")


def _as_inputs(graph: CompGraph, inputs) -> list[np.ndarray]:
    if isinstance(inputs, Mapping):
        inputs = [inputs[m] for m in range(len(graph.modalities))]
    if len(inputs) != len(graph.modalities):
        raise GraphError(f"expected {len(graph.modalities)} modality inputs, got {len(inputs)}")
    out = []
    for (nid, d), x in zip(graph.modalities, inputs):
        x = np.asarray(x, dtype=np.float64)
        if x.ndim == 0 or x.shape[-1] != d:
            raise GraphError(f"input has shape {x.shape}, expected last dim {d}", nid)
        if not np.all(np.isfinite(x)):
            raise GraphError("non-finite input", nid)
        out.append(x)
    return out


def forward_all(graph: CompGraph, inputs) -> dict[str, np.ndarray]:
    """Evaluate every node in topological order and return all node values."""
    xs = _as_inputs(graph, inputs)
    values = _Values()
    for n in graph.nodes:
        if n.kind == "input":
            values[n.id] = xs[n.modality]
            continue
        ps = [values[p] for p in n.parents]
        if n.kind == "affine":
            if ps[0].shape[-1] != n.weight.shape[1]:
                raise GraphError(
                    f"parent dim {ps[0].shape[-1]} != weight columns {n.weight.shape[1]}", n.id
                )
            values[n.id] = ps[0] @ n.weight.T + n.bias
        elif n.kind == "relu":
            values[n.id] = np.maximum(ps[0], 0.0)
        elif n.kind == "concat":
            values[n.id] = np.concatenate(ps, axis=-1)
        elif n.kind == "add":
            if len({p.shape[-1] for p in ps}) != 1:
                raise GraphError("add of mismatched dims", n.id)
            values[n.id] = sum(ps[1:], ps[0])
        elif n.kind == "scale":
            values[n.id] = n.scale * ps[0]
    return values


def forward(graph: CompGraph, inputs) -> np.ndarray:
    """Decoder output for per-modality inputs (list ordered by modality, or dict)."""
    return forward_all(graph, inputs)[graph.output]


def backward(
    graph: CompGraph, values: Mapping[str, np.ndarray], grad_output: np.ndarray
) -> tuple[dict[str, tuple[np.ndarray, np.ndarray]], list[np.ndarray]]:
    """Backpropagate ``grad_output`` through a batched forward pass.

    Returns ``({affine id: (dW, db)}, [grad wrt each modality input])``.
    Parameter gradients are summed over the batch axis.
    """
    grads: dict[str, np.ndarray] = {graph.output: np.asarray(grad_output, dtype=np.float64)}
    params: dict[str, tuple[np.ndarray, np.ndarray]] = {}
    input_grads: dict[int, np.ndarray] = {}

    def push(pid, g):
        grads[pid] = grads[pid] + g if pid in grads else g

    for n in reversed(graph.nodes):
        if n.id not in grads:
            continue
        g = grads.pop(n.id)
        if n.kind == "input":
            input_grads[n.modality] = g
        elif n.kind == "affine":
            x = values[n.parents[0]]
            g2 = g.reshape(-1, g.shape[-1])
            params[n.id] = (g2.T @ x.reshape(-1, x.shape[-1]), g2.sum(axis=0))
            push(n.parents[0], g @ n.weight)
        elif n.kind == "relu":
            push(n.parents[0], g * (values[n.parents[0]] > 0))
        elif n.kind == "concat":
            start = 0
            for p in n.parents:
                d = values[p].shape[-1]
                push(p, g[..., start:start + d])
                start += d
        elif n.kind == "add":
            for p in n.parents:
                push(p, g)
        elif n.kind == "scale":
            push(n.parents[0], n.scale * g)
    zeros = [np.zeros_like(values[nid]) for nid, _ in graph.modalities]
    return params, [input_grads.get(m, zeros[m]) for m in range(len(graph.modalities))]


def with_affine_params(graph: CompGraph, params: Mapping[str, tuple[np.ndarray, np.ndarray]]) -> CompGraph:
    """Copy of ``graph`` with the given affine nodes' (weight, bias) replaced."""
    nodes = []
    for n in graph.nodes:
        if n.id in params:
            w, b = params[n.id]
            n = replace(n, weight=w, bias=b)
        nodes.append(n)
    return CompGraph(tuple(nodes), graph.output, graph.modalities)


def affine_params(graph: CompGraph) -> dict[str, tuple[np.ndarray, np.ndarray]]:
    return {n.id: (n.weight, n.bias) for n in graph.nodes if n.kind == "affine"}


def weight_checksum(graph: CompGraph) -> str:
    h = hashlib.sha256()
    for n in graph.nodes:
        h.update(n.id.encode())
        for arr in (n.weight, n.bias):
            if arr is not None:
                h.update(np.ascontiguousarray(arr, dtype="<f8").tobytes())
        if n.scale is not None:
            h.update(np.float64(n.scale).tobytes())
    return h.hexdigest()


# -- toy fusion model ---------------------------------------------------------


@dataclass(frozen=True, eq=False)
class ToyFusionModel:
    """Per-modality encoders feeding a shared decoder with a scalar head."""

    encoders: tuple[CompGraph, ...]
    decoder: CompGraph
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "encoders", tuple(self.encoders))
        if [e.output_dim() for e in self.encoders] != self.decoder.input_dims:
            raise GraphError("encoder output dims do not match decoder modality partition")
        if self.decoder.output_dim() != 1:
            raise GraphError("decoder output must be scalar", self.decoder.output)

    @property
    def feature_dims(self) -> list[int]:
        return self.decoder.input_dims

    @property
    def raw_dims(self) -> list[int]:
        return [e.input_dims[0] for e in self.encoders]

    def encode(self, raw: Sequence) -> list[np.ndarray]:
        return [forward(e, [x]) for e, x in zip(self.encoders, raw)]

    def predict(self, raw: Sequence) -> np.ndarray:
        return forward(self.decoder, self.encode(raw))


def _init_weight(rng: np.random.Generator, rows: int, cols: int) -> np.ndarray:
    # standard normal entries scaled by 1/sqrt(fan_in)
    return rng.standard_normal((rows, cols)) / math.sqrt(cols)


def mlp_decoder(
    rng: np.random.Generator, modality_dims: Sequence[int], hidden_dim: int | None
) -> CompGraph:
    """Concat -> Affine -> ReLU -> Affine(1); ``hidden_dim=None`` gives a linear head."""
    nodes = [input_node(f"u{m}", m, d) for m, d in enumerate(modality_dims)]
    nodes.append(concat("cat", [f"u{m}" for m in range(len(modality_dims))]))
    total = sum(modality_dims)
    if hidden_dim is None:
        nodes.append(affine("head", "cat", _init_weight(rng, 1, total), np.zeros(1)))
    else:
        nodes.append(affine("fc1", "cat", _init_weight(rng, hidden_dim, total), np.zeros(hidden_dim)))
        nodes.append(relu("act1", "fc1"))
        nodes.append(affine("head", "act1", _init_weight(rng, 1, hidden_dim), np.zeros(1)))
    return CompGraph.from_nodes(nodes, "head")


def _encoder(rng: np.random.Generator, raw_dim: int, feat_dim: int, calib: int = 1024) -> CompGraph:
    # Centered projection, min-max squash fitted on a calibration batch, then a
    # [0, 1] clamp written with ReLUs: clamp(z) = relu(z) - relu(relu(z) - 1).
    w = _init_weight(rng, feat_dim, raw_dim)
    bias = -0.5 * w.sum(axis=1)
    z = rng.random((calib, raw_dim)) @ w.T + bias
    lo, hi = z.min(axis=0), z.max(axis=0)
    span = np.where(hi > lo, hi - lo, 1.0)
    eye = np.eye(feat_dim)
    nodes = [
        input_node("x", 0, raw_dim),
        affine("proj", "x", w, bias),
        affine("norm", "proj", np.diag(1.0 / span), -lo / span),
        relu("floor", "norm"),
        affine("over", "floor", eye, -np.ones(feat_dim)),
        relu("excess", "over"),
        scale("neg_excess", "excess", -1.0),
        add("feat", ["floor", "neg_excess"]),
    ]
    return CompGraph.from_nodes(nodes, "feat")


def make_toy_fusion(
    seed: int,
    modality_dims: Sequence[int],
    hidden_dim: int,
    raw_dims: Sequence[int] | None = None,
) -> ToyFusionModel:
    """Reproducible random fusion model; same arguments give bit-identical weights."""
    dims = [int(d) for d in modality_dims]
    if not dims or any(d < 1 for d in dims) or hidden_dim < 1:
        raise ValueError("modality dims and hidden_dim must be >= 1")
    raw = [3 * d for d in dims] if raw_dims is None else [int(r) for r in raw_dims]
    if len(raw) != len(dims) or any(r < 1 for r in raw):
        raise ValueError("raw_dims must give one positive dim per modality")
    rng = np.random.default_rng(seed)
    encoders = tuple(_encoder(rng, r, d) for r, d in zip(raw, dims))
    decoder = mlp_decoder(rng, dims, hidden_dim)
    meta = {"seed": seed, "modality_dims": dims, "raw_dims": raw, "hidden_dim": hidden_dim}
    return ToyFusionModel(encoders, decoder, meta)


@dataclass(frozen=True, eq=False)
class Dataset:
    inputs: tuple[np.ndarray, ...]  # raw inputs, one (n, raw_dim) array per modality
    labels: np.ndarray

    def __len__(self):
        return self.labels.shape[0]


def make_teacher(
    model: ToyFusionModel, seed: int, importance: Sequence[float] | None = None, hidden_dim: int = 16
) -> CompGraph:
    """Hidden teacher decoder over the model's features; ``importance`` scales modality blocks."""
    rng = np.random.default_rng([seed, 0x7EAC])
    dec = mlp_decoder(rng, model.feature_dims, hidden_dim)
    if importance is None:
        return dec
    if len(importance) != len(model.feature_dims):
        raise ValueError("one importance weight per modality")
    w, b = affine_params(dec)["fc1"]
    w = w.copy()
    for sl, s in zip(dec.block_slices(), importance):
        w[:, sl] *= s
    return with_affine_params(dec, {"fc1": (w, b)})


def make_dataset(
    model: ToyFusionModel, teacher: CompGraph, n: int, seed: int, noise: float = 0.01
) -> Dataset:
    """Inputs uniform on [0,1]^d; labels = teacher(features) + N(0, noise^2)."""
    rng = np.random.default_rng([seed, 0xDA7A])
    inputs = tuple(rng.random((n, r)) for r in model.raw_dims)
    labels = forward(teacher, model.encode(inputs))[:, 0] + noise * rng.standard_normal(n)
    return Dataset(inputs, labels)


def mse_loss(decoder: CompGraph, features: Sequence[np.ndarray], labels: np.ndarray) -> float:
    pred = forward(decoder, features)[:, 0]
    return float(np.mean((pred - labels) ** 2))


def loss_gradients(
    decoder: CompGraph, features: Sequence[np.ndarray], labels: np.ndarray
) -> tuple[float, dict[str, tuple[np.ndarray, np.ndarray]]]:
    """MSE loss and its gradient wrt every affine (weight, bias) of the decoder."""
    values = forward_all(decoder, features)
    resid = values[decoder.output][:, 0] - labels
    n = labels.shape[0]
    grad_out = (2.0 / n) * resid[:, None]
    params, _ = backward(decoder, values, grad_out)
    return float(np.mean(resid ** 2)), params


def train_toy(
    model: ToyFusionModel, dataset: Dataset, epochs: int, step_size: float, weight_decay: float = 0.0
) -> ToyFusionModel:
    """Full-batch gradient descent on the decoder's MSE; encoders stay frozen.

    ``weight_decay`` adds an L2 pull on weight matrices (not biases), which
    shrinks the decoder's sensitivity to features the labels do not use.

    Returns a new model whose metadata records the per-epoch loss history.
    """
    if len(dataset.inputs) != len(model.encoders):
        raise ValueError("dataset has the wrong number of modalities")
    for x, r in zip(dataset.inputs, model.raw_dims):
        if x.ndim != 2 or x.shape[1] != r:
            raise ValueError(f"dataset input shape {x.shape} does not match raw dim {r}")
    labels = np.asarray(dataset.labels, dtype=np.float64).reshape(-1)
    if epochs <= 0:
        return model
    features = model.encode(dataset.inputs)
    decoder = model.decoder
    history = []
    for epoch in range(epochs):
        loss, grads = loss_gradients(decoder, features, labels)
        if not math.isfinite(loss):
            raise TrainingError(f"loss became {loss} at epoch {epoch}; reduce step_size")
        history.append(loss)
        params = affine_params(decoder)
        decoder = with_affine_params(
            decoder,
            {
                k: (w - step_size * (grads[k][0] + weight_decay * w), b - step_size * grads[k][1])
                for k, (w, b) in params.items()
            },
        )
    final = mse_loss(decoder, features, labels)
    meta = dict(
        model.metadata, train_loss=final, loss_history=history, epochs=epochs,
        step_size=step_size, weight_decay=weight_decay,
    )
    return ToyFusionModel(model.encoders, decoder, meta)


# -- serialization ------------------------------------------------------------


def node_to_dict(n: NodeSpec) -> dict:
    d: dict[str, Any] = {"id": n.id, "kind": n.kind, "parents": list(n.parents)}
    if n.kind == "input":
        d.update(modality=n.modality, dim=n.dim)
    if n.weight is not None:
        d["weight"] = n.weight.tolist()
    if n.bias is not None:
        d["bias"] = n.bias.tolist()
    if n.scale is not None:
        d["scale"] = n.scale
    return d


def node_from_dict(d: Mapping) -> NodeSpec:
    return NodeSpec(
        id=str(d["id"]),
        kind=str(d["kind"]),
        parents=tuple(d.get("parents", ())),
        modality=d.get("modality"),
        dim=d.get("dim"),
        weight=d.get("weight"),
        bias=d.get("bias"),
        scale=d.get("scale"),
    )


def graph_to_dict(graph: CompGraph) -> dict:
    return {
        "nodes": [node_to_dict(n) for n in graph.nodes],
        "output": graph.output,
        "modalities": [{"node": i, "dim": d} for i, d in graph.modalities],
    }


def graph_from_dict(d: Mapping, validate: bool = True) -> CompGraph:
    g = CompGraph(
        tuple(node_from_dict(n) for n in d["nodes"]),
        str(d["output"]),
        tuple((m["node"], m["dim"]) for m in d["modalities"]),
    )
    if validate:
        problems = validate_graph(g)
        if problems:
            raise GraphError("invalid graph: " + "; ".join(problems))
    return g


def model_to_dict(model: ToyFusionModel) -> dict:
    meta = {k: v for k, v in model.metadata.items() if k != "loss_history"}
    return {
        "encoders": [graph_to_dict(e) for e in model.encoders],
        "decoder": graph_to_dict(model.decoder),
        "metadata": meta,
    }


def model_from_dict(d: Mapping) -> ToyFusionModel:
    return ToyFusionModel(
        tuple(graph_from_dict(e) for e in d["encoders"]),
        graph_from_dict(d["decoder"]),
        dict(d.get("metadata", {})),
    )


def dumps(obj: CompGraph | ToyFusionModel) -> str:
    d = graph_to_dict(obj) if isinstance(obj, CompGraph) else model_to_dict(obj)
    return json.dumps(d, indent=1)


def loads(text: str) -> CompGraph | ToyFusionModel:
    """Parse a graph or model document (distinguished by its top-level keys)."""
    try:
        d = json.loads(text)
    except json.JSONDecodeError as exc:
        raise GraphError(f"model document is not valid JSON: {exc}") from exc
    if not isinstance(d, dict):
        raise GraphError("model document must be a JSON object")
    try:
        if "decoder" in d:
            return model_from_dict(d)
        return graph_from_dict(d)
    except GraphError:
        raise
    except (KeyError, TypeError, ValueError) as exc:
        raise GraphError(f"malformed model document: {exc!r}") from exc
