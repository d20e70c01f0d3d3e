"""Deterministic toy localizer models and datasets.

The model is handcrafted, not trained: class-k logits are driven by
matched filters for three orthogonal 2-periodic textures (vertical
stripes, horizontal stripes, checkerboard). A sample is Gaussian noise
plus one texture patch; the ground-truth box is exactly the patch
rectangle, with sizes spanning <25%, 25-50% and >50% of the image.

With `with_bn=True`, every conv is followed by a BN node with seeded
non-identity statistics, and the conv parameters are pre-divided so the
conv+BN composite equals the clean design. BN scales are exact powers
of two and shifts are coarse dyadics, so fusing BN reproduces the clean
parameters without rounding; the fused and unfused graphs then agree to
float64 noise, which keeps gradient-based attributions stable across
canonization while the BN shift still reshuffles bias mass between
layers (the part rule-based attribution is sensitive to).
"""

from __future__ import annotations

import numpy as np

from .graph import ModelGraph, Node, validate_graph
from .model_io import Sample
from .tensor import BnParams, ConvParams, DenseParams, PoolParams, Tensor

CLASS_NAMES = ["stripes-vertical", "stripes-horizontal", "checkerboard"]
IMAGE_SIZE = 16
BN_EPS = float(2.0**-20)

_PATTERNS = np.array(
    [
        [[1.0, -1.0], [1.0, -1.0]],   # vertical stripes
        [[1.0, 1.0], [-1.0, -1.0]],   # horizontal stripes
        [[1.0, -1.0], [-1.0, 1.0]],   # checkerboard
    ],
    dtype=np.float32,
)


def _texture(
    cls: int, h: int, w: int, phase: tuple[int, int], amp: float, rng: np.random.Generator
) -> np.ndarray:
    ys, xs = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    py, px = phase
    if cls == 0:
        sign = np.where((xs + px) % 2 == 0, 1.0, -1.0)
    elif cls == 1:
        sign = np.where((ys + py) % 2 == 0, 1.0, -1.0)
    else:
        sign = np.where((xs + ys + px) % 2 == 0, 1.0, -1.0)
    # per-pixel contrast jitter keeps filter responses on a continuum,
    # so near-threshold activations occur everywhere in the patch
    local = amp * rng.uniform(0.5, 1.5, size=(h, w))
    return (local * sign).astype(np.float64)


def _draw_bn_channel(rng: np.random.Generator):
    """Draw (gamma, var, mean, beta) with scale = gamma/sqrt(var+eps) a power of 2.

    var is p^2 - eps with p in {1, 2}; both values are exactly representable
    in float32, so sqrt(var + eps) recovers p exactly and the fused scale
    gamma/p lands on {0.25, 0.5, 1, 2}. Means and betas sit on a 1/64 grid,
    keeping every derived bias exactly representable too. The affine shift
    The affine shift beta - scale*mean is kept in [1/4, 1/2]: large enough
    that every channel genuinely moves bias mass between the BN node and
    the preceding conv, small enough that it stays below the strongest
    feature activations.
    """
    while True:
        gamma = float(rng.choice([0.5, 1.0, 2.0]))
        p = float(rng.choice([1.0, 2.0]))
        scale = gamma / p
        mean = int(rng.integers(8, 25)) * float(rng.choice([-1.0, 1.0])) / 64.0
        beta = int(rng.integers(8, 25)) * float(rng.choice([-1.0, 1.0])) / 64.0
        shift = beta - scale * mean
        if not 0.25 <= shift <= 0.5:
            continue
        var = p * p - BN_EPS
        return gamma, var, mean, beta, scale


def _bn_for_conv(rng: np.random.Generator, conv: ConvParams) -> tuple[ConvParams, BnParams]:
    """Split a designed conv into (pre-BN conv, BN) whose composite is the design."""
    out_ch = conv.out_channels
    gammas, vars_, means, betas, scales = [], [], [], [], []
    for _ in range(out_ch):
        g, v, m, b, s = _draw_bn_channel(rng)
        gammas.append(g)
        vars_.append(v)
        means.append(m)
        betas.append(b)
        scales.append(s)
    scale = np.array(scales, dtype=np.float64)
    w = conv.weight.astype64() / scale.reshape(-1, 1, 1, 1)
    b = conv.bias.astype64() / scale + np.array(means) - np.array(betas) / scale
    pre = ConvParams(
        weight=Tensor(w), bias=Tensor(b), stride=conv.stride, padding=conv.padding
    )
    bn = BnParams(
        gamma=Tensor(np.array(gammas, dtype=np.float32)),
        beta=Tensor(np.array(betas, dtype=np.float32)),
        running_mean=Tensor(np.array(means, dtype=np.float32)),
        running_var=Tensor(np.array(vars_, dtype=np.float32)),
        epsilon=BN_EPS,
    )
    return pre, bn


def _clean_convs() -> dict[str, ConvParams]:
    k = 3
    w1 = 0.5 * _PATTERNS.reshape(k, 1, 2, 2)
    w2 = np.zeros((k, k, 3, 3), dtype=np.float32)
    w3 = np.zeros((k, k, 3, 3), dtype=np.float32)
    for c in range(k):
        w2[c, c] = 0.25
        w3[c, c] = 0.25
    return {
        "conv1": ConvParams(
            weight=Tensor(w1), bias=Tensor(np.full(k, -1.0, dtype=np.float32))
        ),
        "conv2": ConvParams(
            weight=Tensor(w2),
            bias=Tensor(np.full(k, -0.5, dtype=np.float32)),
            padding=(1, 1),
        ),
        "conv3": ConvParams(
            weight=Tensor(w3),
            bias=Tensor(np.full(k, -0.5, dtype=np.float32)),
            padding=(1, 1),
        ),
    }


def make_toy_localizer(seed: int, with_bn: bool) -> ModelGraph:
    """Small texture-matching CNN with a residual branch; 3 classes, 16x16 input."""
    rng = np.random.default_rng([seed, 0])
    convs = _clean_convs()
    nodes: dict[str, Node] = {"in": Node(id="in", kind="input")}

    prev = "in"
    for i, name in enumerate(("conv1", "conv2", "conv3"), start=1):
        conv = convs[name]
        if with_bn:
            conv, bn = _bn_for_conv(rng, conv)
            nodes[name] = Node(id=name, kind="conv", inputs=[prev], params=conv)
            nodes[f"bn{i}"] = Node(id=f"bn{i}", kind="bn", inputs=[name], params=bn)
            act_src = f"bn{i}"
        else:
            nodes[name] = Node(id=name, kind="conv", inputs=[prev], params=conv)
            act_src = name
        nodes[f"relu{i}"] = Node(id=f"relu{i}", kind="relu", inputs=[act_src])
        prev = f"relu{i}"

    # conv3 already hangs off relu2; summing relu2 back in gives the residual branch
    nodes["add1"] = Node(id="add1", kind="add", inputs=["relu2", "relu3"])
    nodes["pool1"] = Node(
        id="pool1", kind="maxpool", inputs=["add1"], params=PoolParams(kernel=(2, 2), stride=(2, 2))
    )
    nodes["gap"] = Node(
        id="gap", kind="avgpool", inputs=["pool1"], params=PoolParams(kernel=(7, 7), stride=(7, 7))
    )
    nodes["flat"] = Node(id="flat", kind="flatten", inputs=["gap"])
    head = DenseParams(
        weight=Tensor(8.0 * np.eye(3, dtype=np.float32)),
        bias=Tensor(np.zeros(3, dtype=np.float32)),
    )
    nodes["head"] = Node(id="head", kind="dense", inputs=["flat"], params=head)
    nodes["out"] = Node(id="out", kind="output", inputs=["head"])

    g = ModelGraph(
        nodes=nodes,
        output_id="out",
        input_shape=(1, IMAGE_SIZE, IMAGE_SIZE),
        input_range=(-2.0, 2.0),
        metadata={"name": "toy-localizer", "seed": int(seed), "with_bn": bool(with_bn)},
    )
    validate_graph(g)
    return g


def make_toy_dataset(seed: int, n: int, noise_sigma: float = 0.3) -> list[Sample]:
    """n seeded samples: noise background plus one texture patch per image."""
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = np.random.default_rng([seed, 1])
    samples = []
    for i in range(n):
        cls = int(rng.integers(0, 3))
        w = int(rng.integers(5, 15))
        h = int(rng.integers(5, 15))
        x0 = int(rng.integers(0, IMAGE_SIZE - w + 1))
        y0 = int(rng.integers(0, IMAGE_SIZE - h + 1))
        phase = (int(rng.integers(0, 2)), int(rng.integers(0, 2)))
        amp = float(rng.uniform(0.8, 1.25))
        image = rng.normal(0.0, noise_sigma, size=(1, IMAGE_SIZE, IMAGE_SIZE))
        image[0, y0 : y0 + h, x0 : x0 + w] += _texture(cls, h, w, phase, amp, rng)
        samples.append(
            Sample(
                id=f"{i:05d}",
                image=Tensor(image),
                label=cls,
                bboxes=[(x0, y0, x0 + w, y0 + h)],
            )
        )
    return samples
