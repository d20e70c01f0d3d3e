"""Attribution methods: gradient family plus rule-based backpropagation.

Every method reduces to one reverse traversal of the graph. The
gradient family reuses the exact input-gradient kernels (guided
backprop only changes the ReLU backward); the rule-based family runs
the relevance engine from `lrp` with a per-node rule assignment.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import kernels, lrp
from .graph import GraphError, ModelGraph, run_graph, topo_order
from .tensor import ShapeError, Tensor, as_array64

METHODS = (
    "gradient",
    "input_x_gradient",
    "integrated_gradients",
    "guided_backprop",
    "excitation_backprop",
    "lrp",
)

# CLI/CSV names for concrete method configurations
METHOD_LABELS = {
    "gradient": ("gradient", None),
    "input_x_gradient": ("input_x_gradient", None),
    "integrated_gradients": ("integrated_gradients", None),
    "guided_backprop": ("guided_backprop", None),
    "excitation_backprop": ("excitation_backprop", None),
    "lrp_epsilon": ("lrp", "epsilon_only"),
    "lrp_eps_alpha2beta1": ("lrp", "eps_alpha2beta1"),
    "lrp_eps_alpha2beta1_flat": ("lrp", "eps_alpha2beta1_flat"),
}


@dataclass
class MethodConfig:
    method: str
    lrp_composite: str | None = None
    epsilon: float = 1e-6
    ig_steps: int = 32
    bn_rule: str = "affine_epsilon"

    def __post_init__(self) -> None:
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}")
        if not self.epsilon > 0:
            raise ValueError("epsilon must be positive")
        if self.ig_steps < 1:
            raise ValueError("ig_steps must be >= 1")
        if self.bn_rule not in lrp.BN_RULES:
            raise ValueError(f"unknown bn_rule {self.bn_rule!r}")
        if self.method == "lrp":
            if self.lrp_composite is None:
                self.lrp_composite = "epsilon_only"
            if self.lrp_composite not in lrp.COMPOSITES:
                raise ValueError(f"unknown lrp composite {self.lrp_composite!r}")

    @property
    def label(self) -> str:
        for label, (method, composite) in METHOD_LABELS.items():
            if method == self.method and (method != "lrp" or composite == self.lrp_composite):
                return label
        return self.method


def parse_method(name: str, **overrides) -> MethodConfig:
    if name not in METHOD_LABELS:
        raise ValueError(f"unknown method name {name!r}; choose from {sorted(METHOD_LABELS)}")
    method, composite = METHOD_LABELS[name]
    return MethodConfig(method=method, lrp_composite=composite, **overrides)


@dataclass
class AttributionMap:
    values: Tensor
    method: str
    target_class: int

    def __post_init__(self) -> None:
        self.values.check_finite("attribution map")

    def channel_sum(self) -> np.ndarray:
        """Per-pixel attribution: channels summed, float64 [H, W]."""
        return self.values.astype64().sum(axis=0)


def input_gradient(
    g: ModelGraph, x: np.ndarray, target: int, relu_mode: str = "standard"
) -> np.ndarray:
    """d logits[:, target] / d x for a batched float64 input."""
    acts = run_graph(g, x)
    order = topo_order(g)
    grads: dict[str, np.ndarray] = {nid: np.zeros_like(acts[nid]) for nid in order}
    logits = acts[g.output_id]
    if not 0 <= target < logits.shape[1]:
        raise IndexError(f"target {target} out of range for {logits.shape[1]} classes")
    grads[g.output_id][:, target] = 1.0

    for nid in reversed(order):
        node = g.nodes[nid]
        gy = grads[nid]
        if node.kind == "input":
            continue
        srcs = node.inputs
        if node.kind == "conv":
            grads[srcs[0]] += kernels.conv2d_input_grad(gy, node.params, acts[srcs[0]].shape)
        elif node.kind == "dense":
            grads[srcs[0]] += kernels.dense_input_grad(gy, node.params)
        elif node.kind == "bn":
            grads[srcs[0]] += kernels.bn_input_grad(gy, node.params)
        elif node.kind == "relu":
            grads[srcs[0]] += kernels.relu_backward(gy, acts[srcs[0]], relu_mode)
        elif node.kind == "maxpool":
            grads[srcs[0]] += kernels.maxpool2d_backward(gy, acts[srcs[0]], node.params)
        elif node.kind == "avgpool":
            grads[srcs[0]] += kernels.avgpool2d_backward(gy, acts[srcs[0]].shape, node.params)
        elif node.kind == "add":
            grads[srcs[0]] += gy
            grads[srcs[1]] += gy
        elif node.kind == "flatten":
            grads[srcs[0]] += gy.reshape(acts[srcs[0]].shape)
        elif node.kind == "output":
            grads[srcs[0]] += gy
        else:
            raise GraphError(f"no backward for op kind {node.kind!r}")
    return grads[g.input_id]


def integrated_gradients(
    g: ModelGraph, x, target: int, steps: int = 32, baseline=None
) -> np.ndarray:
    """Riemann-midpoint path integral of gradients from a baseline (float64 map)."""
    x64 = _single_sample(g, x)
    base = np.zeros_like(x64) if baseline is None else _single_sample(g, baseline)
    diff = x64 - base
    total = np.zeros_like(x64)
    alphas = (np.arange(steps) + 0.5) / steps
    for chunk in np.array_split(alphas, max(1, len(alphas) // 64)):
        batch = base[None] + chunk[:, None, None, None] * diff[None]
        grads = input_gradient(g, batch, target)
        total += grads.sum(axis=0)
    return diff * (total / steps)


def _single_sample(g: ModelGraph, x) -> np.ndarray:
    arr = as_array64(x)
    if arr.ndim == len(g.input_shape) + 1 and arr.shape[0] == 1:
        arr = arr[0]
    if arr.shape != tuple(g.input_shape):
        raise ShapeError(f"sample shape {arr.shape} != model input {tuple(g.input_shape)}")
    return arr


def attribute(g: ModelGraph, x, target: int, cfg: MethodConfig) -> AttributionMap:
    """Attribution map for one sample and one target class."""
    x64 = _single_sample(g, x)
    method = cfg.method

    if method == "gradient":
        values = Tensor(input_gradient(g, x64[None], target)[0])
    elif method == "input_x_gradient":
        # defined as the float32 gradient map times the input, so the
        # identity itg == gradient * input holds bitwise at the API
        grad32 = Tensor(input_gradient(g, x64[None], target)[0])
        values = Tensor(grad32.astype64() * x64.astype(np.float32).astype(np.float64))
    elif method == "integrated_gradients":
        values = Tensor(integrated_gradients(g, x64, target, steps=cfg.ig_steps))
    elif method == "guided_backprop":
        values = Tensor(input_gradient(g, x64[None], target, relu_mode="guided")[0])
    elif method == "excitation_backprop":
        assignment = lrp.assign_rules(g, "epsilon_only", cfg.epsilon, cfg.bn_rule, family="ebp")
        rel, _ = lrp.lrp_relevance(g, x64, target, assignment, cfg.epsilon)
        values = Tensor(rel)
    elif method == "lrp":
        assignment = lrp.assign_rules(g, cfg.lrp_composite, cfg.epsilon, cfg.bn_rule)
        rel, _ = lrp.lrp_relevance(g, x64, target, assignment, cfg.epsilon)
        values = Tensor(rel)
    else:
        raise ValueError(f"unknown method {method!r}")

    return AttributionMap(values=values, method=cfg.label, target_class=target)
