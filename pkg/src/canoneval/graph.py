"""Graph intermediate representation of a network and its execution.

A model is a DAG of named nodes. Execution walks a deterministic
topological order (ties broken by node id), keeping activations in
float64 and rounding to float32 only for the returned logits.
"""

from __future__ import annotations

import heapq
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .tensor import (
    BnParams,
    ConvParams,
    DenseParams,
    PoolParams,
    ShapeError,
    Tensor,
    as_array64,
)

OP_KINDS = frozenset(
    {"input", "output", "conv", "dense", "bn", "relu", "maxpool", "avgpool", "add", "flatten"}
)

_ARITY = {"input": 0, "add": 2}  # every other kind takes exactly one input


class GraphError(ValueError):
    """The graph structure violates an IR invariant."""


@dataclass
class Node:
    id: str
    kind: str
    inputs: list[str] = field(default_factory=list)
    params: object = None

    def __post_init__(self) -> None:
        if self.kind not in OP_KINDS:
            raise GraphError(f"node '{self.id}': unknown op kind {self.kind!r}")
        arity = _ARITY.get(self.kind, 1)
        if len(self.inputs) != arity:
            raise GraphError(
                f"node '{self.id}' ({self.kind}) takes {arity} inputs, got {len(self.inputs)}"
            )


@dataclass
class ModelGraph:
    nodes: dict[str, Node]
    output_id: str
    input_shape: tuple[int, int, int]
    input_range: tuple[float, float] = (-1.0, 1.0)
    metadata: dict = field(default_factory=dict)

    @property
    def input_id(self) -> str:
        for node in self.nodes.values():
            if node.kind == "input":
                return node.id
        raise GraphError("graph has no input node")

    def consumers(self, node_id: str) -> list[str]:
        return sorted(n.id for n in self.nodes.values() if node_id in n.inputs)

    def num_classes(self) -> int:
        shape = infer_shapes(self)[self.output_id]
        if len(shape) != 1:
            raise GraphError(f"output node produces shape {shape}, expected a flat logit vector")
        return shape[0]


def topo_order(g: ModelGraph) -> list[str]:
    """Topological order, smallest node id first among ready nodes."""
    indeg = {nid: len(node.inputs) for nid, node in g.nodes.items()}
    ready = [nid for nid, d in indeg.items() if d == 0]
    heapq.heapify(ready)
    consumers: dict[str, list[str]] = {nid: [] for nid in g.nodes}
    for node in g.nodes.values():
        for src in node.inputs:
            if src not in g.nodes:
                raise GraphError(f"node '{node.id}' references missing input '{src}'")
            consumers[src].append(node.id)
    order = []
    while ready:
        nid = heapq.heappop(ready)
        order.append(nid)
        for nxt in consumers[nid]:
            indeg[nxt] -= 1
            if indeg[nxt] == 0:
                heapq.heappush(ready, nxt)
    if len(order) != len(g.nodes):
        raise GraphError("graph contains a cycle")
    return order


def validate_graph(g: ModelGraph) -> None:
    """Check structure and run shape inference end-to-end."""
    inputs = [n for n in g.nodes.values() if n.kind == "input"]
    if len(inputs) != 1:
        raise GraphError(f"graph must have exactly one input node, found {len(inputs)}")
    if g.output_id not in g.nodes:
        raise GraphError(f"output id '{g.output_id}' is not a node")
    if g.nodes[g.output_id].kind != "output":
        raise GraphError(f"output node '{g.output_id}' has kind {g.nodes[g.output_id].kind!r}")
    order = topo_order(g)  # also checks references and acyclicity
    reachable = {inputs[0].id}
    for nid in order:
        node = g.nodes[nid]
        if node.inputs and any(src in reachable for src in node.inputs):
            reachable.add(nid)
    unreachable = sorted(set(g.nodes) - reachable)
    if unreachable:
        raise GraphError(f"nodes not reachable from the input: {unreachable}")
    infer_shapes(g)


def _node_out_shape(node: Node, in_shapes: list[tuple[int, ...]]) -> tuple[int, ...]:
    kind = node.kind
    if kind == "input":
        raise AssertionError("input handled by caller")
    if kind in ("output", "relu"):
        return in_shapes[0]
    if kind == "add":
        if in_shapes[0] != in_shapes[1]:
            raise ShapeError(f"add operands differ: {in_shapes[0]} vs {in_shapes[1]}")
        return in_shapes[0]
    if kind == "flatten":
        return (int(np.prod(in_shapes[0])),)
    if kind == "conv":
        p: ConvParams = node.params
        c, h, w = in_shapes[0]
        if c != p.weight.shape[1]:
            raise ShapeError(f"conv expects {p.weight.shape[1]} channels, got {c}")
        ho, wo = kernels.conv_output_hw((h, w), p.weight.shape[2:], p.stride, p.padding)
        return (p.out_channels, ho, wo)
    if kind == "dense":
        p: DenseParams = node.params
        if in_shapes[0] != (p.weight.shape[1],):
            raise ShapeError(f"dense expects ({p.weight.shape[1]},), got {in_shapes[0]}")
        return (p.out_features,)
    if kind == "bn":
        p: BnParams = node.params
        if in_shapes[0][0] != p.channels:
            raise ShapeError(f"bn expects {p.channels} channels, got {in_shapes[0][0]}")
        return in_shapes[0]
    if kind in ("maxpool", "avgpool"):
        p: PoolParams = node.params
        c, h, w = in_shapes[0]
        ho, wo = kernels.conv_output_hw((h, w), p.kernel, p.stride, p.padding)
        return (c, ho, wo)
    raise GraphError(f"unhandled op kind {kind!r}")


def infer_shapes(g: ModelGraph) -> dict[str, tuple[int, ...]]:
    """Per-node output shapes (without the batch dimension)."""
    shapes: dict[str, tuple[int, ...]] = {}
    for nid in topo_order(g):
        node = g.nodes[nid]
        if node.kind == "input":
            shapes[nid] = tuple(g.input_shape)
            continue
        try:
            shapes[nid] = _node_out_shape(node, [shapes[s] for s in node.inputs])
        except (ShapeError, TypeError, AttributeError) as e:
            raise ShapeError(f"shape inference failed at node '{nid}': {e}") from e
    return shapes


def _eval_node(node: Node, args: list[np.ndarray]) -> np.ndarray:
    kind = node.kind
    if kind == "output":
        return args[0]
    if kind == "conv":
        return kernels.conv2d_forward(args[0], node.params)
    if kind == "dense":
        return kernels.dense_forward(args[0], node.params)
    if kind == "bn":
        return kernels.bn_forward(args[0], node.params)
    if kind == "relu":
        return kernels.relu_forward(args[0])
    if kind == "maxpool":
        return kernels.maxpool2d_forward(args[0], node.params)
    if kind == "avgpool":
        return kernels.avgpool2d_forward(args[0], node.params)
    if kind == "add":
        return kernels.add_forward(args[0], args[1])
    if kind == "flatten":
        return kernels.flatten_forward(args[0])
    raise GraphError(f"cannot evaluate op kind {kind!r}")


def run_graph(g: ModelGraph, x: np.ndarray) -> dict[str, np.ndarray]:
    """Execute on a batched float64 input; returns all node activations."""
    acts: dict[str, np.ndarray] = {}
    for nid in topo_order(g):
        node = g.nodes[nid]
        if node.kind == "input":
            acts[nid] = x
            continue
        try:
            acts[nid] = _eval_node(node, [acts[s] for s in node.inputs])
        except ShapeError as e:
            raise ShapeError(f"node '{nid}': {e}") from e
    return acts


def forward(g: ModelGraph, x) -> Tensor:
    """Run the model on a sample or batch; returns float32 logits [N, classes]."""
    arr = as_array64(x)
    if arr.ndim == len(g.input_shape):
        arr = arr[None]
    if arr.shape[1:] != tuple(g.input_shape):
        raise ShapeError(
            f"input shape {arr.shape[1:]} does not match model input {tuple(g.input_shape)}"
        )
    out = run_graph(g, arr)[g.output_id]
    logits = Tensor(out)
    logits.check_finite("model output")
    return logits
