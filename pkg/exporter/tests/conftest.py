"""Shared fixtures: exported bundles are session-scoped, they are expensive."""

import subprocess
import sys

import pytest

from canonexport.models import export_model


def run_engine(*args):
    """Invoke the inference engine CLI; the bundles are the only coupling."""
    return subprocess.run(
        [sys.executable, "-m", "canoneval", *map(str, args)],
        capture_output=True,
        text=True,
    )


@pytest.fixture(scope="session")
def resnet_bundle(tmp_path_factory):
    out = tmp_path_factory.mktemp("models") / "resnet18"
    bundle, model = export_model("resnet18", out, input_size=64, seed=1)
    return bundle, model


@pytest.fixture(scope="session")
def vgg_bundle(tmp_path_factory):
    out = tmp_path_factory.mktemp("models") / "vgg16_bn"
    bundle, model = export_model("vgg16_bn", out, input_size=224, seed=2)
    return bundle, model
