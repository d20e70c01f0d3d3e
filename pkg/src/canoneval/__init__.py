"""CNN inference, BatchNorm canonization, attribution, and evaluation."""

from .attribution import AttributionMap, MethodConfig, attribute, integrated_gradients, parse_method
from .canonize import EquivalenceReport, FusionRecord, canonize_pass, fuse_params, verify_equivalence
from .evaluate import (
    LocalizationRecord,
    PerturbationCurve,
    aggregate_localization,
    cosine_distance,
    curve_difference,
    localization_score,
    perturbation_curve,
)
from .experiment import ExperimentConfig, run_experiment
from .graph import ModelGraph, Node, forward, infer_shapes, topo_order, validate_graph
from .lrp import Rule, assign_rules, lrp_linear_rule, lrp_relevance
from .model_io import Sample, load_dataset, load_model, save_dataset, save_model
from .tensor import BnParams, ConvParams, DenseParams, PoolParams, Tensor
from .toy import make_toy_dataset, make_toy_localizer

__version__ = "0.1.0"

__all__ = [
    "AttributionMap",
    "BnParams",
    "ConvParams",
    "DenseParams",
    "EquivalenceReport",
    "ExperimentConfig",
    "FusionRecord",
    "LocalizationRecord",
    "MethodConfig",
    "ModelGraph",
    "Node",
    "PerturbationCurve",
    "PoolParams",
    "Rule",
    "Sample",
    "Tensor",
    "aggregate_localization",
    "assign_rules",
    "attribute",
    "canonize_pass",
    "cosine_distance",
    "curve_difference",
    "forward",
    "fuse_params",
    "infer_shapes",
    "integrated_gradients",
    "load_dataset",
    "load_model",
    "localization_score",
    "lrp_linear_rule",
    "lrp_relevance",
    "make_toy_dataset",
    "make_toy_localizer",
    "parse_method",
    "perturbation_curve",
    "run_experiment",
    "save_dataset",
    "save_model",
    "topo_order",
    "validate_graph",
    "verify_equivalence",
]
