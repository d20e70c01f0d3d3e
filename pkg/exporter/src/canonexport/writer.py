"""Writers for the `canonmodel` and `canondata` bundle formats.

These mirror the engine's on-disk contract: a JSON manifest plus one
binary blob of little-endian float32 tensors (model), or a manifest
plus raw `.f32` CHW files (dataset). The writer is deliberately
self-contained so the exporter talks to the engine only through files.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np


def _f32_bytes(arr: np.ndarray) -> bytes:
    return np.ascontiguousarray(arr, dtype="<f4").tobytes()


class GraphWriter:
    """Accumulates nodes and tensors, then emits a `.canonmodel` bundle."""

    def __init__(self, input_shape, input_range, metadata=None):
        self.input_shape = [int(v) for v in input_shape]
        self.input_range = [float(input_range[0]), float(input_range[1])]
        self.metadata = dict(metadata or {})
        self.nodes: list[dict] = []
        self._blob = bytearray()
        self._tensors: list[dict] = []
        self._ids: set[str] = set()
        self.output_id: str | None = None

    def _tensor(self, name: str, arr: np.ndarray) -> str:
        raw = _f32_bytes(arr)
        self._tensors.append(
            {
                "name": name,
                "shape": [int(v) for v in arr.shape],
                "dtype": "f32",
                "offset": len(self._blob),
                "nbytes": len(raw),
            }
        )
        self._blob.extend(raw)
        return name

    def add(self, node_id: str, kind: str, inputs, attrs=None, tensors=None) -> str:
        if node_id in self._ids:
            raise ValueError(f"duplicate node id {node_id!r}")
        self._ids.add(node_id)
        entry = {"id": node_id, "kind": kind, "inputs": list(inputs)}
        entry.update(attrs or {})
        if tensors:
            entry["tensors"] = {
                slot: self._tensor(f"{node_id}.{slot}", arr) for slot, arr in tensors.items()
            }
        self.nodes.append(entry)
        return node_id

    def write(self, path) -> Path:
        if self.output_id is None:
            raise ValueError("graph has no output node")
        out = Path(path)
        out.mkdir(parents=True, exist_ok=True)
        blob = bytes(self._blob)
        manifest = {
            "format": "canonmodel",
            "version": 1,
            "input_shape": self.input_shape,
            "input_range": self.input_range,
            "output": self.output_id,
            "nodes": self.nodes,
            "tensors": self._tensors,
            "checksum": f"sha256:{hashlib.sha256(blob).hexdigest()}",
            "metadata": self.metadata,
        }
        (out / "weights.bin").write_bytes(blob)
        with open(out / "manifest.json", "w") as f:
            json.dump(manifest, f, indent=1, sort_keys=True)
            f.write("\n")
        return out


def write_dataset(samples: list[dict], path, class_names) -> Path:
    """samples: dicts with id, image (CHW float array), label, bboxes."""
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    class_names = list(class_names)
    entries = []
    for s in samples:
        fname = f"{s['id']}.f32"
        image = np.ascontiguousarray(s["image"], dtype="<f4")
        (out / fname).write_bytes(image.tobytes())
        entry = {
            "id": s["id"],
            "file": fname,
            "shape": [int(v) for v in image.shape],
            "label": int(s["label"]),
            "bboxes": [[int(v) for v in b] for b in s["bboxes"]],
        }
        if 0 <= s["label"] < len(class_names):
            entry["class_name"] = class_names[s["label"]]
        entries.append(entry)
    manifest = {
        "format": "canondata",
        "version": 1,
        "class_names": list(class_names),
        "samples": entries,
    }
    with open(out / "manifest.json", "w") as f:
        json.dump(manifest, f, indent=1, sort_keys=True)
        f.write("\n")
    return out
