"""Layer-wise relevance propagation rules and the graph relevance engine.

Rules for conv/dense layers (avgpool is treated as a uniform-weight
conv):

  epsilon     R_j = sum_k (z_jk / (z_k + eps*sign(z_k))) R_k,
              z_jk = a_j w_jk, z_k = sum_j z_jk + b_k, sign(0) = +1
  alpha_beta  R_j = sum_k (alpha z_jk+ / (z_k+ + b_k+ + eps)
                         - beta  z_jk- / (z_k- + b_k- - eps)) R_k
  flat        weights read as 1 and biases as 0: relevance is split
              uniformly over each unit's receptive field

Structural nodes: relu and flatten pass relevance through, maxpool
routes winner-take-all, add splits proportionally to each branch's
contribution. BN nodes only exist on non-canonized graphs and get one
of the `bn_rule` treatments; the choice is the implementation degree of
freedom that makes rule-based maps sensitive to canonization, so none
of the options tries to mimic what fusion would compute.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import kernels
from .graph import GraphError, ModelGraph, run_graph, topo_order
from .tensor import BnParams, ConvParams, DenseParams, ShapeError, as_array64

BN_RULES = ("affine_epsilon", "identity_passthrough")
COMPOSITES = ("epsilon_only", "eps_alpha2beta1", "eps_alpha2beta1_flat")


@dataclass(frozen=True)
class Rule:
    kind: str  # epsilon | alpha_beta | flat
    epsilon: float = 1e-6
    alpha: float = 0.0
    beta: float = 0.0
    include_bias: bool = True

    def __post_init__(self) -> None:
        if self.kind not in ("epsilon", "alpha_beta", "flat"):
            raise ValueError(f"unknown rule kind {self.kind!r}")
        if not self.epsilon > 0:
            raise ValueError("rule epsilon must be positive; 0 would divide by zero")
        if self.kind == "alpha_beta" and abs((self.alpha - self.beta) - 1.0) > 1e-12:
            raise ValueError("alpha - beta must equal 1")


def _stabilize(z: np.ndarray, eps: float) -> np.ndarray:
    return z + eps * np.where(z >= 0, 1.0, -1.0)


class _LinearOp:
    """Uniform interface over conv/dense/avgpool for the relevance rules."""

    def __init__(self, kind: str, p, in_act: np.ndarray):
        self.in_act = in_act
        if kind == "conv":
            self.weight = p.weight.astype64()
            self.bias = p.bias.astype64()
            self._fwd = lambda a, w, b: kernels.conv2d_apply(a, w, b, p.stride, p.padding)
            self._bwd = lambda s, w: kernels.conv2d_transpose_apply(
                s, w, p.stride, p.padding, in_act.shape
            )
        elif kind == "dense":
            self.weight = p.weight.astype64()
            self.bias = p.bias.astype64()
            self._fwd = kernels.dense_apply
            self._bwd = kernels.dense_transpose_apply
        elif kind == "avgpool":
            self.weight = np.array(1.0)  # virtual uniform kernel
            self.bias = np.array(0.0)
            self._fwd = lambda a, w, b: kernels.avgpool2d_forward(a, p) * w + b
            self._bwd = lambda s, w: kernels.avgpool2d_backward(s, in_act.shape, p) * w
        else:
            raise GraphError(f"no linear relevance rule for op kind {kind!r}")

    def fwd(self, a, w, b):
        return self._fwd(a, w, b)

    def bwd(self, s, w):
        return self._bwd(s, w)


def _propagate_linear(op: _LinearOp, r_out: np.ndarray, rule: Rule) -> np.ndarray:
    a, w, b = op.in_act, op.weight, op.bias
    eps = rule.epsilon
    if rule.kind == "epsilon":
        z = op.fwd(a, w, b)
        s = r_out / _stabilize(z, eps)
        return a * op.bwd(s, w)
    if rule.kind == "flat":
        ones_w = np.ones_like(w)
        z = op.fwd(np.ones_like(a), ones_w, np.zeros_like(b))
        s = r_out / (z + eps)
        return op.bwd(s, ones_w)
    # alpha_beta
    ap, an = np.maximum(a, 0.0), np.minimum(a, 0.0)
    wp, wn = np.maximum(w, 0.0), np.minimum(w, 0.0)
    zero_b = np.zeros_like(b)
    bp = np.maximum(b, 0.0) if rule.include_bias else zero_b
    zp = op.fwd(ap, wp, bp) + op.fwd(an, wn, zero_b)
    sp = rule.alpha * r_out / (zp + eps)
    r_in = ap * op.bwd(sp, wp) + an * op.bwd(sp, wn)
    if rule.beta != 0.0:
        bm = np.minimum(b, 0.0) if rule.include_bias else zero_b
        zn = op.fwd(ap, wn, bm) + op.fwd(an, wp, zero_b)
        sn = rule.beta * r_out / (zn - eps)
        r_in = r_in - (ap * op.bwd(sn, wn) + an * op.bwd(sn, wp))
    return r_in


def lrp_linear_rule(activations, params, relevance_out, rule: Rule) -> np.ndarray:
    """Apply one rule to a standalone conv or dense layer."""
    a = as_array64(activations)
    r = as_array64(relevance_out)
    unbatched = (isinstance(params, DenseParams) and a.ndim == 1) or (
        isinstance(params, ConvParams) and a.ndim == 3
    )
    if unbatched:
        a, r = a[None], r[None]
    if not isinstance(params, (ConvParams, DenseParams)):
        raise TypeError(f"lrp_linear_rule expects conv or dense params, got {type(params)}")
    kind = "conv" if isinstance(params, ConvParams) else "dense"
    r_in = _propagate_linear(_LinearOp(kind, params, a), r, rule)
    return r_in[0] if unbatched else r_in


def _bn_linear_part(node, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-channel linear contribution scale*x and affine shift, broadcast-ready."""
    p: BnParams = node.params
    bshape = (1, p.channels) + (1,) * (x.ndim - 2)
    return x * p.scale().reshape(bshape), p.shift().reshape(bshape)


def first_conv_id(g: ModelGraph) -> str | None:
    """The conv node nearest the input (min depth, ties by id)."""
    depth: dict[str, int] = {}
    for nid in topo_order(g):
        node = g.nodes[nid]
        if node.kind == "input":
            depth[nid] = 0
        else:
            depth[nid] = min(depth[s] for s in node.inputs) + 1
    convs = sorted(
        (depth[n.id], n.id) for n in g.nodes.values() if n.kind == "conv"
    )
    return convs[0][1] if convs else None


def assign_rules(
    g: ModelGraph,
    composite: str,
    epsilon: float = 1e-6,
    bn_rule: str = "affine_epsilon",
    family: str = "lrp",
) -> dict[str, object]:
    """Map every node id to a Rule or a structural marker string."""
    if family == "lrp" and composite not in COMPOSITES:
        raise ValueError(f"unknown composite {composite!r}")
    if bn_rule not in BN_RULES:
        raise ValueError(f"unknown bn_rule {bn_rule!r}")
    eps_rule = Rule("epsilon", epsilon=epsilon)
    a2b1 = Rule("alpha_beta", epsilon=epsilon, alpha=2.0, beta=1.0)
    flat = Rule("flat", epsilon=epsilon)
    ebp = Rule("alpha_beta", epsilon=epsilon, alpha=1.0, beta=0.0, include_bias=False)
    flat_target = first_conv_id(g) if composite == "eps_alpha2beta1_flat" else None

    assignment: dict[str, object] = {}
    for nid, node in g.nodes.items():
        kind = node.kind
        if kind in ("conv", "avgpool"):
            if family == "ebp":
                rule = ebp
            elif composite == "epsilon_only":
                rule = eps_rule
            elif nid == flat_target:
                rule = flat
            else:
                rule = a2b1
            assignment[nid] = rule
        elif kind == "dense":
            assignment[nid] = ebp if family == "ebp" else eps_rule
        elif kind == "bn":
            if family == "ebp":
                assignment[nid] = "bn_positive_scale"
            elif bn_rule == "affine_epsilon":
                assignment[nid] = "bn_affine_epsilon"
            else:
                assignment[nid] = "bn_identity"
        elif kind == "add":
            assignment[nid] = "proportional_split"
        elif kind == "maxpool":
            assignment[nid] = "winner_take_all"
        else:  # input, output, relu, flatten
            assignment[nid] = "pass"
    return assignment


def lrp_relevance(
    g: ModelGraph,
    x,
    target: int,
    assignment: dict[str, object],
    epsilon: float = 1e-6,
) -> tuple[np.ndarray, dict[str, float]]:
    """Propagate relevance from the target logit to the input.

    Returns the input relevance map [C, H, W] (float64) plus the total
    relevance observed at every node output, for conservation checks.
    The seed is the raw value of the target logit.
    """
    arr = as_array64(x)
    if arr.ndim == len(g.input_shape):
        arr = arr[None]
    if arr.shape[0] != 1:
        raise ShapeError("relevance propagation takes a single sample")
    acts = run_graph(g, arr)
    order = topo_order(g)

    rel: dict[str, np.ndarray] = {nid: np.zeros_like(acts[nid]) for nid in order}
    logits = acts[g.output_id]
    if not 0 <= target < logits.shape[1]:
        raise IndexError(f"target {target} out of range for {logits.shape[1]} classes")
    rel[g.output_id][0, target] = logits[0, target]

    trace: dict[str, float] = {}
    for nid in reversed(order):
        node = g.nodes[nid]
        r_out = rel[nid]
        trace[nid] = float(r_out.sum())
        if node.kind == "input":
            continue
        marker = assignment.get(nid, "pass")
        srcs = node.inputs
        if node.kind in ("conv", "dense", "avgpool"):
            if not isinstance(marker, Rule):
                raise GraphError(
                    f"node '{nid}' ({node.kind}) needs a Rule assignment, got {marker!r}"
                )
            rel[srcs[0]] += _propagate_linear(
                _LinearOp(node.kind, node.params, acts[srcs[0]]), r_out, marker
            )
        elif node.kind == "maxpool":
            rel[srcs[0]] += kernels.maxpool2d_backward(r_out, acts[srcs[0]], node.params)
        elif node.kind == "add":
            za, zb = acts[srcs[0]], acts[srcs[1]]
            denom = _stabilize(za + zb, epsilon)
            rel[srcs[0]] += za / denom * r_out
            rel[srcs[1]] += zb / denom * r_out
        elif node.kind == "bn":
            z_lin, shift = _bn_linear_part(node, acts[srcs[0]])
            if marker == "bn_affine_epsilon":
                rel[srcs[0]] += z_lin / _stabilize(z_lin, epsilon) * r_out
            elif marker == "bn_positive_scale":
                # excitation-style: the positive shift is positive evidence
                # with no upstream source, so it competes for relevance
                zp = np.maximum(z_lin, 0.0)
                rel[srcs[0]] += zp / (zp + np.maximum(shift, 0.0) + epsilon) * r_out
            else:  # bn_identity
                rel[srcs[0]] += r_out
        elif node.kind == "flatten":
            rel[srcs[0]] += r_out.reshape(acts[srcs[0]].shape)
        else:  # output, relu
            rel[srcs[0]] += r_out
    return rel[g.input_id][0], trace
