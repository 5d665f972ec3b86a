"""Random fusion graphs for property tests."""
from __future__ import annotations

import numpy as np

from semrate import graph


def random_fusion_graph(rng: np.random.Generator, max_input: int = 12, max_depth: int = 3,
                        max_width: int = 6, affine_only: bool = False, out_dim: int = 1) -> graph.CompGraph:
    """Concat of M inputs followed by up to ``max_depth`` Affine/ReLU layers.

    Layers sometimes use a residual add or a scale node so every node kind is exercised.
    """
    M = int(rng.integers(1, 4))
    dims = [int(d) for d in rng.integers(1, max(2, max_input // M) + 1, size=M)]
    while sum(dims) > max_input:
        dims[int(np.argmax(dims))] -= 1
    nodes = [graph.input_node(f"u{m}", m, d) for m, d in enumerate(dims)]
    nodes.append(graph.concat("cat", [f"u{m}" for m in range(M)]))
    prev, width = "cat", sum(dims)
    depth = int(rng.integers(1, max_depth + 1))
    for i in range(depth):
        w_out = int(rng.integers(2, max_width + 1))
        nodes.append(graph.affine(f"fc{i}", prev, rng.normal(size=(w_out, width)), rng.normal(size=w_out) * 0.5))
        prev = f"fc{i}"
        if not affine_only:
            nodes.append(graph.relu(f"act{i}", prev))
            prev = f"act{i}"
        r = rng.random()
        if r < 0.25:
            nodes.append(graph.affine(f"skip{i}", prev, rng.normal(size=(w_out, w_out)), np.zeros(w_out)))
            nodes.append(graph.add(f"res{i}", [prev, f"skip{i}"]))
            prev = f"res{i}"
        elif r < 0.4:
            nodes.append(graph.scale(f"sc{i}", prev, float(rng.normal())))
            prev = f"sc{i}"
        width = w_out
    nodes.append(graph.affine("out", prev, rng.normal(size=(out_dim, width)), rng.normal(size=out_dim)))
    return graph.CompGraph.from_nodes(nodes, "out")


def random_center(rng: np.random.Generator, g: graph.CompGraph) -> list[np.ndarray]:
    return [rng.random(d) for d in g.input_dims]
