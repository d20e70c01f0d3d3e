"""Exporters from the torch ecosystem into canonmodel/canondata bundles."""

from .dataset import Preprocessing, export_dataset, parse_voc_boxes, transform_box
from .models import build_resnet18, build_vgg16_bn, export_model, make_source_model
from .writer import GraphWriter, write_dataset

__all__ = [
    "GraphWriter",
    "Preprocessing",
    "build_resnet18",
    "build_vgg16_bn",
    "export_dataset",
    "export_model",
    "make_source_model",
    "parse_voc_boxes",
    "transform_box",
    "write_dataset",
]
