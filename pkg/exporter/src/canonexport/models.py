"""Map torchvision VGG-16-BN and ResNet18 modules onto the engine IR.

Only the layer types these two architectures use are supported; anything
else fails loudly, naming the offending module. Dropout disappears
(inference mode) and the adaptive average pools are resolved against the
pinned input size: ResNet's global pool becomes a fixed-kernel avgpool,
VGG's 7x7 adaptive pool must already see a 7x7 map and is dropped.
"""

from __future__ import annotations

import numpy as np
import torch
from torch import nn

from .writer import GraphWriter

IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)


class UnmappableLayerError(ValueError):
    """A module has no counterpart in the engine IR."""


def _np(t: torch.Tensor) -> np.ndarray:
    return t.detach().cpu().numpy().astype(np.float32)


def _conv_tensors(conv: nn.Conv2d) -> dict:
    weight = _np(conv.weight)
    bias = _np(conv.bias) if conv.bias is not None else np.zeros(weight.shape[0], np.float32)
    return {"weight": weight, "bias": bias}


def _bn_tensors(bn: nn.BatchNorm2d) -> dict:
    return {
        "gamma": _np(bn.weight),
        "beta": _np(bn.bias),
        "running_mean": _np(bn.running_mean),
        "running_var": _np(bn.running_var),
    }


def input_range_for(mean=IMAGENET_MEAN, std=IMAGENET_STD) -> tuple[float, float]:
    lo = min((0.0 - m) / s for m, s in zip(mean, std))
    hi = max((1.0 - m) / s for m, s in zip(mean, std))
    return (lo, hi)


class _Builder:
    """GraphWriter plus shape tracking for one chain of activations."""

    def __init__(self, input_size: int, metadata: dict):
        self.w = GraphWriter(
            input_shape=(3, input_size, input_size),
            input_range=input_range_for(
                metadata.get("mean", IMAGENET_MEAN), metadata.get("std", IMAGENET_STD)
            ),
            metadata=metadata,
        )
        self.shapes: dict[str, tuple] = {}
        self.w.add("input", "input", [])
        self.shapes["input"] = (3, input_size, input_size)

    def conv(self, nid, prev, conv: nn.Conv2d) -> str:
        if conv.dilation != (1, 1) or conv.groups != 1:
            raise UnmappableLayerError(f"{nid}: dilated/grouped convolution is unsupported")
        c, h, wd = self.shapes[prev]
        kh, kw = conv.kernel_size
        sh, sw = conv.stride
        ph, pw = conv.padding
        self.w.add(
            nid, "conv", [prev],
            attrs={"stride": [sh, sw], "padding": [ph, pw]},
            tensors=_conv_tensors(conv),
        )
        self.shapes[nid] = (
            conv.out_channels,
            (h + 2 * ph - kh) // sh + 1,
            (wd + 2 * pw - kw) // sw + 1,
        )
        return nid

    def bn(self, nid, prev, bn: nn.BatchNorm2d) -> str:
        self.w.add(nid, "bn", [prev], attrs={"epsilon": float(bn.eps)}, tensors=_bn_tensors(bn))
        self.shapes[nid] = self.shapes[prev]
        return nid

    def relu(self, nid, prev) -> str:
        self.w.add(nid, "relu", [prev])
        self.shapes[nid] = self.shapes[prev]
        return nid

    def maxpool(self, nid, prev, pool: nn.MaxPool2d) -> str:
        k = pool.kernel_size if isinstance(pool.kernel_size, tuple) else (pool.kernel_size,) * 2
        s = pool.stride if isinstance(pool.stride, tuple) else (pool.stride,) * 2
        p = pool.padding if isinstance(pool.padding, tuple) else (pool.padding,) * 2
        c, h, wd = self.shapes[prev]
        self.w.add(
            nid, "maxpool", [prev],
            attrs={"kernel": list(k), "stride": list(s), "padding": list(p)},
        )
        self.shapes[nid] = (c, (h + 2 * p[0] - k[0]) // s[0] + 1, (wd + 2 * p[1] - k[1]) // s[1] + 1)
        return nid

    def global_avgpool(self, nid, prev) -> str:
        c, h, wd = self.shapes[prev]
        self.w.add(nid, "avgpool", [prev], attrs={"kernel": [h, wd], "stride": [h, wd], "padding": [0, 0]})
        self.shapes[nid] = (c, 1, 1)
        return nid

    def flatten(self, nid, prev) -> str:
        self.w.add(nid, "flatten", [prev])
        self.shapes[nid] = (int(np.prod(self.shapes[prev])),)
        return nid

    def dense(self, nid, prev, fc: nn.Linear) -> str:
        self.w.add(
            nid, "dense", [prev],
            tensors={"weight": _np(fc.weight), "bias": _np(fc.bias)},
        )
        self.shapes[nid] = (fc.out_features,)
        return nid

    def add(self, nid, a, b) -> str:
        self.w.add(nid, "add", [a, b])
        self.shapes[nid] = self.shapes[a]
        return nid

    def finish(self, prev) -> GraphWriter:
        self.w.add("output", "output", [prev])
        self.w.output_id = "output"
        return self.w


def build_vgg16_bn(model: nn.Module, input_size: int = 224, metadata=None) -> GraphWriter:
    if input_size != 224:
        raise ValueError("VGG-16-BN export is pinned to 224x224 (its 7x7 pool is only exact there)")
    b = _Builder(input_size, {"source": "vgg16_bn", **(metadata or {})})
    prev = "input"
    for i, layer in enumerate(model.features):
        nid = f"features.{i}"
        if isinstance(layer, nn.Conv2d):
            prev = b.conv(nid, prev, layer)
        elif isinstance(layer, nn.BatchNorm2d):
            prev = b.bn(nid, prev, layer)
        elif isinstance(layer, nn.ReLU):
            prev = b.relu(nid, prev)
        elif isinstance(layer, nn.MaxPool2d):
            prev = b.maxpool(nid, prev, layer)
        else:
            raise UnmappableLayerError(f"features.{i}: {type(layer).__name__}")
    if b.shapes[prev][1:] != (7, 7):
        raise UnmappableLayerError(
            f"adaptive 7x7 pool needs a 7x7 feature map, got {b.shapes[prev][1:]}"
        )
    prev = b.flatten("flatten", prev)
    for i, layer in enumerate(model.classifier):
        nid = f"classifier.{i}"
        if isinstance(layer, nn.Linear):
            prev = b.dense(nid, prev, layer)
        elif isinstance(layer, nn.ReLU):
            prev = b.relu(nid, prev)
        elif isinstance(layer, nn.Dropout):
            continue  # identity at inference
        else:
            raise UnmappableLayerError(f"classifier.{i}: {type(layer).__name__}")
    return b.finish(prev)


def build_resnet18(model: nn.Module, input_size: int = 224, metadata=None) -> GraphWriter:
    if input_size < 34:
        raise ValueError("resnet18 needs at least a 34px input to survive its stride stack")
    b = _Builder(input_size, {"source": "resnet18", **(metadata or {})})
    prev = b.conv("conv1", "input", model.conv1)
    prev = b.bn("bn1", prev, model.bn1)
    prev = b.relu("relu1", prev)
    prev = b.maxpool("maxpool", prev, model.maxpool)
    for li in (1, 2, 3, 4):
        layer = getattr(model, f"layer{li}")
        for bi, block in enumerate(layer):
            base = f"layer{li}.{bi}"
            entry = prev
            out = b.conv(f"{base}.conv1", entry, block.conv1)
            out = b.bn(f"{base}.bn1", out, block.bn1)
            out = b.relu(f"{base}.relu1", out)
            out = b.conv(f"{base}.conv2", out, block.conv2)
            out = b.bn(f"{base}.bn2", out, block.bn2)
            skip = entry
            if block.downsample is not None:
                skip = b.conv(f"{base}.downsample.0", entry, block.downsample[0])
                skip = b.bn(f"{base}.downsample.1", skip, block.downsample[1])
            out = b.add(f"{base}.add", out, skip)
            prev = b.relu(f"{base}.relu2", out)
    prev = b.global_avgpool("avgpool", prev)
    prev = b.flatten("flatten", prev)
    prev = b.dense("fc", prev, model.fc)
    return b.finish(prev)


_BUILDERS = {"vgg16_bn": build_vgg16_bn, "resnet18": build_resnet18}


def make_source_model(name: str, weights_path=None, seed: int = 0) -> nn.Module:
    """Instantiate the torchvision model; random init is seeded, and the
    BN running statistics are warmed up so they are not the identity."""
    import torchvision.models as tvm

    if name not in _BUILDERS:
        raise UnmappableLayerError(f"unknown model {name!r}; supported: {sorted(_BUILDERS)}")
    torch.manual_seed(seed)
    model = getattr(tvm, name)(weights=None)
    if weights_path is not None:
        state = torch.load(weights_path, map_location="cpu", weights_only=True)
        model.load_state_dict(state)
    else:
        # the adaptive pools make any spatial size valid in train mode
        model.train()
        with torch.no_grad():
            for _ in range(3):
                model(torch.randn(4, 3, 64, 64))
    model.eval()
    return model


def export_model(name: str, out_path, input_size: int = 224, weights_path=None, seed: int = 0):
    """Build, convert and write one model; returns (bundle_path, torch_model)."""
    model = make_source_model(name, weights_path=weights_path, seed=seed)
    writer = _BUILDERS[name](model, input_size=input_size, metadata={"seed": seed})
    return writer.write(out_path), model
