"""BatchNorm fusion pass and the numeric equivalence verifier.

A BN node whose single producer is a conv or dense node, and which is
that producer's only consumer, is folded into the producer: the linear
weights are scaled per output channel by gamma/s and the bias becomes
gamma/s * (bias - mean) + beta, with s = sqrt(var + eps). The BN node is
removed and its consumers rewired. BN nodes in any other position (for
example directly on a residual sum) are left in place.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .graph import ModelGraph, Node, forward, validate_graph
from .tensor import BnParams, ConvParams, DenseParams, ShapeError, Tensor

logger = logging.getLogger(__name__)


@dataclass
class FusionRecord:
    linear_node_id: str
    bn_node_id: str
    fused_weight: Tensor
    fused_bias: Tensor


@dataclass
class EquivalenceReport:
    n_trials: int
    max_abs_diff: float
    max_rel_diff: float
    passed: bool
    tolerance: float

    def to_dict(self) -> dict:
        return {
            "n_trials": self.n_trials,
            "max_abs_diff": self.max_abs_diff,
            "max_rel_diff": self.max_rel_diff,
            "passed": self.passed,
            "tolerance": self.tolerance,
        }


def fuse_params(lin, bn: BnParams) -> tuple[Tensor, Tensor]:
    """Fold BN statistics into a conv/dense layer; returns (weight, bias)."""
    if not isinstance(lin, (ConvParams, DenseParams)):
        raise TypeError(f"cannot fuse BN into {type(lin).__name__}")
    out_ch = lin.weight.shape[0]
    if bn.channels != out_ch:
        raise ShapeError(
            f"bn has {bn.channels} channels but the linear layer has {out_ch} outputs"
        )
    var_eps = bn.running_var.astype64() + np.float64(np.float32(bn.epsilon))
    if np.any(var_eps <= 0):
        raise ValueError("bn running_var + epsilon must be positive")
    scale = bn.gamma.astype64() / np.sqrt(var_eps)
    w = lin.weight.astype64()
    fused_w = w * scale.reshape((out_ch,) + (1,) * (w.ndim - 1))
    fused_b = scale * (lin.bias.astype64() - bn.running_mean.astype64()) + bn.beta.astype64()
    return Tensor(fused_w), Tensor(fused_b)


def _fused_linear_params(lin, bn: BnParams):
    w, b = fuse_params(lin, bn)
    if isinstance(lin, ConvParams):
        return ConvParams(weight=w, bias=b, stride=lin.stride, padding=lin.padding)
    return DenseParams(weight=w, bias=b)


def fusable_bn_nodes(g: ModelGraph) -> list[str]:
    """BN nodes fed by a conv/dense that has the BN as sole consumer."""
    out = []
    for node in g.nodes.values():
        if node.kind != "bn":
            continue
        producer = g.nodes[node.inputs[0]]
        if producer.kind in ("conv", "dense") and g.consumers(producer.id) == [node.id]:
            out.append(node.id)
    return sorted(out)


def canonize_pass(g: ModelGraph) -> tuple[ModelGraph, list[FusionRecord]]:
    """Fuse every eligible BN node into its producer; idempotent."""
    records: list[FusionRecord] = []
    nodes = dict(g.nodes)
    for bn_id in fusable_bn_nodes(g):
        bn_node = nodes[bn_id]
        lin_id = bn_node.inputs[0]
        lin_node = nodes[lin_id]
        fused = _fused_linear_params(lin_node.params, bn_node.params)
        records.append(
            FusionRecord(
                linear_node_id=lin_id,
                bn_node_id=bn_id,
                fused_weight=fused.weight,
                fused_bias=fused.bias,
            )
        )
        nodes[lin_id] = Node(id=lin_id, kind=lin_node.kind, inputs=list(lin_node.inputs), params=fused)
        del nodes[bn_id]
        for nid, node in list(nodes.items()):
            if bn_id in node.inputs:
                rewired = [lin_id if src == bn_id else src for src in node.inputs]
                nodes[nid] = Node(id=nid, kind=node.kind, inputs=rewired, params=node.params)

    result = ModelGraph(
        nodes=nodes,
        output_id=g.output_id,
        input_shape=tuple(g.input_shape),
        input_range=tuple(g.input_range),
        metadata=dict(g.metadata),
    )
    validate_graph(result)
    remaining = [n.id for n in result.nodes.values() if n.kind == "bn"]
    if remaining:
        logger.warning("left %d unfusable bn node(s) in place: %s", len(remaining), sorted(remaining))
    return result, records


def verify_equivalence(
    g_orig: ModelGraph,
    g_canon: ModelGraph,
    n_trials: int = 100,
    tolerance: float = 1e-4,
    seed: int = 0,
) -> EquivalenceReport:
    """Compare logits of both graphs on seeded random inputs in [-3, 3]."""
    if tuple(g_orig.input_shape) != tuple(g_canon.input_shape):
        raise ShapeError(
            f"input shapes differ: {g_orig.input_shape} vs {g_canon.input_shape}"
        )
    rng = np.random.default_rng(seed)
    max_abs = 0.0
    max_rel = 0.0
    remaining = n_trials
    while remaining > 0:
        batch = min(remaining, 32)
        x = rng.uniform(-3.0, 3.0, size=(batch,) + tuple(g_orig.input_shape))
        a = forward(g_orig, x).astype64()
        b = forward(g_canon, x).astype64()
        diff = np.abs(a - b)
        max_abs = max(max_abs, float(diff.max()))
        denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-12)
        max_rel = max(max_rel, float((diff / denom).max()))
        remaining -= batch
    return EquivalenceReport(
        n_trials=n_trials,
        max_abs_diff=max_abs,
        max_rel_diff=max_rel,
        passed=bool(max_abs <= tolerance),
        tolerance=tolerance,
    )
