"""Full protocol runner: attribution + both metrics over a dataset.

For every (sample, method, canonization state) the runner computes an
attribution map, a localization record and a perturbation curve, then
writes `localization.csv`, `perturbation.csv` and `summary.json`.
Sample-level failures are logged and skipped; the run only fails when
no sample succeeds. Output is byte-deterministic for a fixed config:
samples are processed in sorted id order and floats are written with
their shortest round-trip representation.
"""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .attribution import MethodConfig, attribute
from .canonize import canonize_pass
from .evaluate import (
    LocalizationRecord,
    aggregate_localization,
    localization_score,
    perturbation_curve,
)
from .graph import ModelGraph
from .model_io import Sample, load_dataset, load_model
from .toy import make_toy_dataset, make_toy_localizer

logger = logging.getLogger(__name__)

LOCALIZATION_CSV = "localization.csv"
PERTURBATION_CSV = "perturbation.csv"
SUMMARY_JSON = "summary.json"


class ExperimentError(RuntimeError):
    """The experiment could not produce any usable result."""


@dataclass
class ExperimentConfig:
    methods: list[MethodConfig]
    out_dir: str
    model_path: str | None = None
    data_path: str | None = None
    toy_seed: int | None = None
    toy_n: int | None = None
    steps: int = 16
    seed: int = 0
    canonized: str = "both"  # both | on | off
    max_samples: int | None = None

    def __post_init__(self) -> None:
        if not self.methods:
            raise ValueError("experiment needs at least one method")
        if self.canonized not in ("both", "on", "off"):
            raise ValueError(f"canonized must be both/on/off, got {self.canonized!r}")
        if (self.model_path is None) != (self.data_path is None):
            raise ValueError("model_path and data_path must be given together")
        if self.model_path is None and self.toy_seed is None:
            raise ValueError("either model/data paths or a toy seed is required")


def _fmt(value) -> str:
    return repr(float(value))


def _load_inputs(cfg: ExperimentConfig) -> tuple[ModelGraph, list[Sample]]:
    if cfg.model_path is not None:
        model = load_model(cfg.model_path)
        samples, _ = load_dataset(cfg.data_path)
    else:
        model = make_toy_localizer(cfg.toy_seed, with_bn=True)
        samples = make_toy_dataset(cfg.toy_seed, cfg.toy_n or 50)
    if not samples:
        raise ExperimentError("dataset is empty")
    samples = sorted(samples, key=lambda s: s.id)
    if cfg.max_samples is not None:
        samples = samples[: cfg.max_samples]
    return model, samples


def _states(cfg: ExperimentConfig, model: ModelGraph) -> list[tuple[bool, ModelGraph]]:
    states: list[tuple[bool, ModelGraph]] = []
    if cfg.canonized in ("off", "both"):
        states.append((False, model))
    if cfg.canonized in ("on", "both"):
        canon, records = canonize_pass(model)
        logger.info("canonized model: %d fusion(s)", len(records))
        states.append((True, canon))
    return states


def run_experiment(cfg: ExperimentConfig) -> dict:
    model, samples = _load_inputs(cfg)
    states = _states(cfg, model)

    loc_records: list[LocalizationRecord] = []
    curves: dict[tuple[str, bool], list[list[float]]] = {}
    loc_rows: list[list[str]] = []
    pert_rows: list[list[str]] = []
    failed: list[str] = []
    n_ok = 0

    for sample in samples:
        try:
            for method_cfg in cfg.methods:
                label = method_cfg.label
                for canonized, graph in states:
                    amap = attribute(graph, sample.image, sample.label, method_cfg)
                    record = localization_score(
                        amap,
                        sample.bboxes,
                        sample_id=sample.id,
                        method=label,
                        canonized=canonized,
                    )
                    loc_records.append(record)
                    loc_rows.append(
                        [
                            sample.id,
                            label,
                            "true" if canonized else "false",
                            _fmt(record.mu) if record.defined else "",
                            _fmt(record.bbox_area_fraction),
                        ]
                    )
                    curve = perturbation_curve(
                        graph,
                        amap,
                        sample.image,
                        sample.label,
                        cfg.steps,
                        cfg.seed,
                        sample_id=sample.id,
                    )
                    curves.setdefault((label, canonized), []).append(curve.scores)
                    for k, score in enumerate(curve.scores):
                        pert_rows.append(
                            [sample.id, label, "true" if canonized else "false", str(k), _fmt(score)]
                        )
            n_ok += 1
        except Exception as e:  # noqa: BLE001 - sample-level isolation is the contract
            failed.append(sample.id)
            logger.warning("sample %s failed: %s", sample.id, e)

    if n_ok == 0:
        raise ExperimentError("no sample succeeded")

    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    _write_csv(out / LOCALIZATION_CSV, ["sample_id", "method", "canonized", "mu", "bbox_area_fraction"], loc_rows)
    _write_csv(out / PERTURBATION_CSV, ["sample_id", "method", "canonized", "k", "score"], pert_rows)

    summary = _summarize(cfg, loc_records, curves, n_ok, failed)
    with open(out / SUMMARY_JSON, "w") as f:
        json.dump(summary, f, indent=1, sort_keys=True)
        f.write("\n")
    return summary


def _write_csv(path: Path, header: list[str], rows: list[list[str]]) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(header)
        writer.writerows(rows)


def _mean_curve(curve_list: list[list[float]]) -> list[float]:
    arr = np.array(curve_list, dtype=np.float64)
    return [float(v) for v in arr.mean(axis=0)]


def _summarize(cfg, loc_records, curves, n_ok, failed) -> dict:
    aggregates, undefined = aggregate_localization(loc_records)
    per_method: dict[str, dict] = {}
    for method_cfg in cfg.methods:
        label = method_cfg.label
        entry: dict = {"localization": {}, "undefined_mu": {}, "perturbation": {}}
        for canonized in (False, True):
            key = (label, canonized)
            state = "canonized" if canonized else "non_canonized"
            if key in aggregates:
                entry["localization"][state] = aggregates[key]
                entry["undefined_mu"][state] = undefined.get(key, 0)
            if key in curves:
                entry["perturbation"][state] = _mean_curve(curves[key])
        both = ("non_canonized" in entry["perturbation"]) and ("canonized" in entry["perturbation"])
        if both:
            plain = entry["perturbation"]["non_canonized"]
            canon = entry["perturbation"]["canonized"]
            entry["perturbation"]["mean_curve_difference"] = [
                p - c for p, c in zip(plain, canon)
            ]
        per_method[label] = entry

    return {
        "n_samples": n_ok + len(failed),
        "n_ok": n_ok,
        "failed_samples": failed,
        "methods": per_method,
        "config": {
            "model_path": cfg.model_path,
            "data_path": cfg.data_path,
            "toy_seed": cfg.toy_seed,
            "toy_n": cfg.toy_n,
            "steps": cfg.steps,
            "seed": cfg.seed,
            "canonized": cfg.canonized,
            "methods": [m.label for m in cfg.methods],
        },
    }
