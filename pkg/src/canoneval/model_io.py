"""On-disk formats: `.canonmodel` and `.canondata` bundles.

A model bundle is a directory holding `manifest.json` (topology, op
attributes, tensor table) and `weights.bin` (all tensors concatenated as
little-endian float32, offsets recorded in the manifest). The manifest
carries a sha256 of the blob so truncation and corruption are detected
at load time. A dataset bundle is a manifest plus one raw `.f32` CHW
tensor file per sample.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

from .graph import ModelGraph, Node, topo_order, validate_graph
from .tensor import BnParams, ConvParams, DenseParams, PoolParams, Tensor

MODEL_MANIFEST = "manifest.json"
MODEL_BLOB = "weights.bin"
DATA_MANIFEST = "manifest.json"


class ModelFormatError(ValueError):
    """Base class for bundle format problems."""


class ManifestError(ModelFormatError):
    """The manifest is missing, malformed, or structurally invalid."""


class ChecksumError(ModelFormatError):
    """The weight blob does not match the manifest checksum or bounds."""


class TensorRefError(ModelFormatError):
    """A node references a tensor name absent from the tensor table."""


class UnsupportedOpError(ModelFormatError):
    """The manifest names an op kind this engine does not implement."""


def _sha256(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def _node_tensors(node: Node) -> dict[str, Tensor]:
    p = node.params
    if isinstance(p, ConvParams) or isinstance(p, DenseParams):
        return {"weight": p.weight, "bias": p.bias}
    if isinstance(p, BnParams):
        return {
            "gamma": p.gamma,
            "beta": p.beta,
            "running_mean": p.running_mean,
            "running_var": p.running_var,
        }
    return {}


def _node_attrs(node: Node) -> dict:
    p = node.params
    if isinstance(p, ConvParams):
        return {"stride": list(p.stride), "padding": list(p.padding)}
    if isinstance(p, BnParams):
        return {"epsilon": float(p.epsilon)}
    if isinstance(p, PoolParams):
        return {"kernel": list(p.kernel), "stride": list(p.stride), "padding": list(p.padding)}
    return {}


def save_model(g: ModelGraph, path) -> Path:
    """Write a `.canonmodel` bundle; returns the bundle directory."""
    validate_graph(g)
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)

    blob = bytearray()
    tensor_table = []
    node_entries = []
    for nid in topo_order(g):
        node = g.nodes[nid]
        tensors = {}
        for slot, tensor in _node_tensors(node).items():
            name = f"{nid}.{slot}"
            raw = tensor.tobytes()
            tensor_table.append(
                {
                    "name": name,
                    "shape": list(tensor.shape),
                    "dtype": "f32",
                    "offset": len(blob),
                    "nbytes": len(raw),
                }
            )
            blob.extend(raw)
            tensors[slot] = name
        entry = {"id": nid, "kind": node.kind, "inputs": list(node.inputs)}
        entry.update(_node_attrs(node))
        if tensors:
            entry["tensors"] = tensors
        node_entries.append(entry)

    manifest = {
        "format": "canonmodel",
        "version": 1,
        "input_shape": list(g.input_shape),
        "input_range": [float(g.input_range[0]), float(g.input_range[1])],
        "output": g.output_id,
        "nodes": node_entries,
        "tensors": tensor_table,
        "checksum": f"sha256:{_sha256(bytes(blob))}",
        "metadata": g.metadata,
    }
    (out / MODEL_BLOB).write_bytes(bytes(blob))
    with open(out / MODEL_MANIFEST, "w") as f:
        json.dump(manifest, f, indent=1, sort_keys=True)
        f.write("\n")
    return out


def _read_manifest(path: Path, expected_format: str) -> dict:
    if not path.is_file():
        raise ManifestError(f"missing manifest: {path}")
    try:
        with open(path) as f:
            manifest = json.load(f)
    except json.JSONDecodeError as e:
        raise ManifestError(f"malformed JSON in {path}: {e}") from e
    if not isinstance(manifest, dict) or manifest.get("format") != expected_format:
        raise ManifestError(f"{path} is not a {expected_format} manifest")
    return manifest


def _tensor_from_blob(blob: bytes, entry: dict) -> Tensor:
    offset, nbytes = entry["offset"], entry["nbytes"]
    if offset < 0 or offset + nbytes > len(blob):
        raise ChecksumError(
            f"tensor '{entry['name']}' spans [{offset}, {offset + nbytes}) but blob has "
            f"{len(blob)} bytes"
        )
    if entry.get("dtype", "f32") != "f32":
        raise ManifestError(f"tensor '{entry['name']}' has unsupported dtype {entry['dtype']!r}")
    return Tensor.frombytes(blob[offset : offset + nbytes], entry["shape"])


def _build_params(entry: dict, tensors: dict[str, Tensor]):
    kind = entry["kind"]
    refs = entry.get("tensors", {})

    def take(slot: str) -> Tensor:
        name = refs.get(slot)
        if name is None or name not in tensors:
            raise TensorRefError(f"node '{entry['id']}' references unknown tensor '{name}'")
        return tensors[name]

    if kind == "conv":
        return ConvParams(
            weight=take("weight"),
            bias=take("bias"),
            stride=tuple(entry.get("stride", [1, 1])),
            padding=tuple(entry.get("padding", [0, 0])),
        )
    if kind == "dense":
        return DenseParams(weight=take("weight"), bias=take("bias"))
    if kind == "bn":
        return BnParams(
            gamma=take("gamma"),
            beta=take("beta"),
            running_mean=take("running_mean"),
            running_var=take("running_var"),
            epsilon=float(entry.get("epsilon", 1e-5)),
        )
    if kind in ("maxpool", "avgpool"):
        return PoolParams(
            kernel=tuple(entry["kernel"]),
            stride=tuple(entry.get("stride", entry["kernel"])),
            padding=tuple(entry.get("padding", [0, 0])),
        )
    return None


def load_model(path) -> ModelGraph:
    """Load a `.canonmodel` bundle, verifying checksum and references."""
    bundle = Path(path)
    manifest = _read_manifest(bundle / MODEL_MANIFEST, "canonmodel")
    blob_path = bundle / MODEL_BLOB
    if not blob_path.is_file():
        raise ChecksumError(f"missing weight blob: {blob_path}")
    blob = blob_path.read_bytes()
    declared = manifest.get("checksum", "")
    if declared != f"sha256:{_sha256(blob)}":
        raise ChecksumError(f"weight blob checksum mismatch in {bundle}")

    try:
        tensors = {e["name"]: _tensor_from_blob(blob, e) for e in manifest["tensors"]}
        node_entries = manifest["nodes"]
        output_id = manifest["output"]
        input_shape = tuple(manifest["input_shape"])
        input_range = tuple(manifest.get("input_range", [-1.0, 1.0]))
    except (KeyError, TypeError) as e:
        raise ManifestError(f"manifest in {bundle} is missing required fields: {e}") from e

    nodes: dict[str, Node] = {}
    for entry in node_entries:
        kind = entry.get("kind")
        if kind not in {
            "input",
            "output",
            "conv",
            "dense",
            "bn",
            "relu",
            "maxpool",
            "avgpool",
            "add",
            "flatten",
        }:
            raise UnsupportedOpError(f"node '{entry.get('id')}' has unsupported op kind {kind!r}")
        nodes[entry["id"]] = Node(
            id=entry["id"],
            kind=kind,
            inputs=list(entry.get("inputs", [])),
            params=_build_params(entry, tensors),
        )

    g = ModelGraph(
        nodes=nodes,
        output_id=output_id,
        input_shape=input_shape,
        input_range=input_range,
        metadata=manifest.get("metadata", {}),
    )
    validate_graph(g)
    return g


def model_checksum(path) -> str:
    manifest = _read_manifest(Path(path) / MODEL_MANIFEST, "canonmodel")
    return manifest.get("checksum", "")


@dataclass
class Sample:
    """One dataset entry: CHW image, class label, ground-truth boxes."""

    id: str
    image: Tensor
    label: int
    bboxes: list[tuple[int, int, int, int]] = field(default_factory=list)

    def __post_init__(self) -> None:
        _, h, w = self.image.shape
        for x0, y0, x1, y1 in self.bboxes:
            if not (0 <= x0 < x1 <= w and 0 <= y0 < y1 <= h):
                raise ValueError(
                    f"sample {self.id}: bbox {(x0, y0, x1, y1)} outside {w}x{h} image"
                )


def save_dataset(samples: list[Sample], path, class_names: list[str] | None = None) -> Path:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    entries = []
    for s in samples:
        fname = f"{s.id}.f32"
        (out / fname).write_bytes(s.image.tobytes())
        entry = {
            "id": s.id,
            "file": fname,
            "shape": list(s.image.shape),
            "label": int(s.label),
            "bboxes": [list(map(int, b)) for b in s.bboxes],
        }
        if class_names and 0 <= s.label < len(class_names):
            entry["class_name"] = class_names[s.label]
        entries.append(entry)
    manifest = {
        "format": "canondata",
        "version": 1,
        "class_names": class_names or [],
        "samples": entries,
    }
    with open(out / DATA_MANIFEST, "w") as f:
        json.dump(manifest, f, indent=1, sort_keys=True)
        f.write("\n")
    return out


def load_dataset(path) -> tuple[list[Sample], list[str]]:
    bundle = Path(path)
    manifest = _read_manifest(bundle / DATA_MANIFEST, "canondata")
    samples = []
    try:
        for entry in manifest["samples"]:
            fpath = bundle / entry["file"]
            if not fpath.is_file():
                raise ManifestError(f"missing sample file {fpath}")
            image = Tensor.frombytes(fpath.read_bytes(), entry["shape"])
            samples.append(
                Sample(
                    id=entry["id"],
                    image=image,
                    label=int(entry["label"]),
                    bboxes=[tuple(b) for b in entry.get("bboxes", [])],
                )
            )
    except (KeyError, TypeError) as e:
        raise ManifestError(f"dataset manifest in {bundle} is invalid: {e}") from e
    return samples, list(manifest.get("class_names", []))


def save_attribution(values: Tensor, path_base, meta: dict) -> None:
    """Write `<base>.f32` raw values plus `<base>.json` sidecar."""
    base = Path(path_base)
    base.parent.mkdir(parents=True, exist_ok=True)
    base.with_suffix(".f32").write_bytes(values.tobytes())
    sidecar = dict(meta)
    sidecar["shape"] = list(values.shape)
    with open(base.with_suffix(".json"), "w") as f:
        json.dump(sidecar, f, indent=1, sort_keys=True)
        f.write("\n")


def load_attribution(path_base) -> tuple[Tensor, dict]:
    base = Path(path_base)
    try:
        with open(base.with_suffix(".json")) as f:
            meta = json.load(f)
    except (OSError, json.JSONDecodeError) as e:
        raise ManifestError(f"cannot read attribution sidecar for {base}: {e}") from e
    values = Tensor.frombytes(base.with_suffix(".f32").read_bytes(), meta["shape"])
    return values, meta
