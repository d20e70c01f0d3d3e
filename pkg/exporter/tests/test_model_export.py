"""Exported bundles: structure, determinism, forward parity, fusion."""

import json

import numpy as np
import pytest
import torch
from conftest import run_engine

from canonexport.models import export_model, input_range_for, make_source_model, UnmappableLayerError
from canonexport.writer import write_dataset


def _nodes_by_kind(bundle):
    manifest = json.loads((bundle / "manifest.json").read_text())
    kinds = {}
    for node in manifest["nodes"]:
        kinds.setdefault(node["kind"], []).append(node["id"])
    return manifest, kinds


def _probe_parity(bundle, model, input_size, n_probes, tmp_path, atol=1e-3):
    lo, hi = input_range_for()
    rng = np.random.default_rng(123)
    batch = rng.uniform(lo, hi, size=(n_probes, 3, input_size, input_size)).astype(np.float32)
    samples = [
        {"id": f"probe{i:02d}", "image": batch[i], "label": 0, "bboxes": []}
        for i in range(n_probes)
    ]
    data = write_dataset(samples, tmp_path / "probes", ["c0"])
    out_csv = tmp_path / "logits.csv"
    proc = run_engine("predict", "--model", bundle, "--data", data, "--out", out_csv)
    assert proc.returncode == 0, proc.stderr
    rows = out_csv.read_text().strip().splitlines()[1:]
    engine = np.array([[float(v) for v in row.split(",")[2:]] for row in rows])
    with torch.no_grad():
        source = model(torch.from_numpy(batch)).numpy()
    return float(np.abs(engine - source).max())


class TestResnet18:
    def test_structure(self, resnet_bundle):
        bundle, _ = resnet_bundle
        manifest, kinds = _nodes_by_kind(bundle)
        assert len(kinds["conv"]) == 20  # 17 block convs + stem + 2 downsamples
        assert len(kinds["bn"]) == len(kinds["conv"])
        assert len(kinds["add"]) == 8
        assert manifest["input_shape"] == [3, 64, 64]

    def test_forward_parity_on_probes(self, resnet_bundle, tmp_path):
        bundle, model = resnet_bundle
        diff = _probe_parity(bundle, model, 64, 10, tmp_path)
        assert diff <= 1e-3, f"max_abs_diff {diff}"

    def test_canonized_export_is_equivalent(self, resnet_bundle, tmp_path):
        bundle, _ = resnet_bundle
        proc = run_engine(
            "canonize", "--model", bundle, "--out", tmp_path / "canon",
            "--trials", "100", "--seed", "3",
        )
        assert proc.returncode == 0, proc.stderr
        report = json.loads(proc.stdout)
        assert report["passed"] is True
        assert report["max_abs_diff"] <= 1e-4
        assert report["fusions"] == 20
        assert report["unfused_bn"] == 0


class TestVgg16Bn:
    def test_structure_bn_per_conv(self, vgg_bundle):
        bundle, _ = vgg_bundle
        manifest, kinds = _nodes_by_kind(bundle)
        assert len(kinds["conv"]) == 13
        assert len(kinds["bn"]) == 13
        assert len(kinds["dense"]) == 3
        assert "add" not in kinds

    def test_forward_parity_on_probes(self, vgg_bundle, tmp_path):
        bundle, model = vgg_bundle
        diff = _probe_parity(bundle, model, 224, 10, tmp_path)
        assert diff <= 1e-3, f"max_abs_diff {diff}"

    def test_canonized_export_is_equivalent(self, vgg_bundle, tmp_path):
        # trial count kept small: each trial is a full 224x224 VGG forward
        bundle, _ = vgg_bundle
        proc = run_engine(
            "canonize", "--model", bundle, "--out", tmp_path / "canon",
            "--trials", "4", "--seed", "3",
        )
        assert proc.returncode == 0, proc.stderr
        report = json.loads(proc.stdout)
        assert report["passed"] is True
        assert report["max_abs_diff"] <= 1e-4
        assert report["fusions"] == 13

    def test_rejects_other_input_sizes(self):
        model = make_source_model("vgg16_bn", seed=0)
        from canonexport.models import build_vgg16_bn

        with pytest.raises(ValueError):
            build_vgg16_bn(model, input_size=128)


class TestDeterminism:
    def test_re_export_is_byte_identical(self, tmp_path):
        a, _ = export_model("resnet18", tmp_path / "a", input_size=64, seed=5)
        b, _ = export_model("resnet18", tmp_path / "b", input_size=64, seed=5)
        assert (a / "manifest.json").read_bytes() == (b / "manifest.json").read_bytes()
        assert (a / "weights.bin").read_bytes() == (b / "weights.bin").read_bytes()

    def test_unknown_model_name(self, tmp_path):
        with pytest.raises(UnmappableLayerError):
            export_model("alexnet", tmp_path / "x")
