"""Explanation-quality measures: localization, input perturbation, comparison.

The localization score is the inside-total ratio: positive attribution
mass inside the ground-truth boxes divided by all positive attribution
mass. The input perturbation test replaces pixels in descending
attribution order with seeded uniform draws from the model's declared
input range and records the drop of the target logit after each step.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass

import numpy as np

from .attribution import AttributionMap
from .graph import ModelGraph, forward
from .tensor import ShapeError, as_array64

BUCKETS = ("all", "lt_half", "lt_quarter")


@dataclass
class LocalizationRecord:
    sample_id: str
    mu: float | None  # None when the map has no positive attribution
    bbox_area_fraction: float
    method: str = ""
    canonized: bool = False

    @property
    def defined(self) -> bool:
        return self.mu is not None


@dataclass
class PerturbationCurve:
    sample_id: str
    scores: list[float]
    steps: int
    rng_seed: int

    def __post_init__(self) -> None:
        if len(self.scores) != self.steps + 1:
            raise ValueError("curve must hold steps+1 scores")
        if self.scores[0] != 0.0:
            raise ValueError("IP at step 0 must be 0")


def _map_values(amap) -> np.ndarray:
    if isinstance(amap, AttributionMap):
        return amap.values.astype64()
    return as_array64(amap)


def _bbox_mask(shape_hw: tuple[int, int], bboxes) -> np.ndarray:
    mask = np.zeros(shape_hw, dtype=bool)
    h, w = shape_hw
    for x0, y0, x1, y1 in bboxes:
        if not (0 <= x0 < x1 <= w and 0 <= y0 < y1 <= h):
            raise ValueError(f"bbox {(x0, y0, x1, y1)} outside {w}x{h} image")
        mask[y0:y1, x0:x1] = True
    return mask


def localization_score(
    amap, bboxes, sample_id: str = "", method: str = "", canonized: bool = False
) -> LocalizationRecord:
    """Inside-total ratio of positive attribution over the union of boxes."""
    values = _map_values(amap)
    if values.ndim != 3:
        raise ShapeError(f"attribution map must be [C, H, W], got {values.shape}")
    if not bboxes:
        raise ValueError("localization needs at least one bounding box")
    per_pixel = values.sum(axis=0)
    positive = np.maximum(per_pixel, 0.0)
    mask = _bbox_mask(per_pixel.shape, bboxes)
    r_total = float(positive.sum())
    r_in = float(positive[mask].sum())
    mu = (r_in / r_total) if r_total > 0.0 else None
    fraction = float(mask.sum()) / mask.size
    return LocalizationRecord(
        sample_id=sample_id,
        mu=mu,
        bbox_area_fraction=fraction,
        method=method,
        canonized=canonized,
    )


def _bucket_filter(bucket: str, fraction: float) -> bool:
    if bucket == "all":
        return True
    if bucket == "lt_half":
        return fraction < 0.5
    if bucket == "lt_quarter":
        return fraction < 0.25
    raise ValueError(f"unknown bucket {bucket!r}")


def aggregate_localization(records: list[LocalizationRecord]):
    """Per-(method, canonized) bucket means; empty buckets are reported absent.

    Returns (aggregates, undefined_counts) where aggregates maps
    (method, canonized) -> bucket -> {"mean_mu", "n"} or None.
    """
    if not records:
        raise ValueError("no localization records to aggregate")
    groups: dict[tuple[str, bool], list[LocalizationRecord]] = {}
    undefined: dict[tuple[str, bool], int] = {}
    for rec in records:
        key = (rec.method, rec.canonized)
        undefined.setdefault(key, 0)
        if not rec.defined:
            undefined[key] += 1
            continue
        groups.setdefault(key, []).append(rec)
    aggregates: dict[tuple[str, bool], dict[str, dict | None]] = {}
    for key in sorted(set(groups) | set(undefined)):
        recs = groups.get(key, [])
        buckets: dict[str, dict | None] = {}
        for bucket in BUCKETS:
            member_mus = [r.mu for r in recs if _bucket_filter(bucket, r.bbox_area_fraction)]
            if member_mus:
                buckets[bucket] = {"mean_mu": float(np.mean(member_mus)), "n": len(member_mus)}
            else:
                buckets[bucket] = None
        aggregates[key] = buckets
    return aggregates, undefined


def _sample_stream(seed: int, sample_id: str) -> tuple[np.random.Generator, int]:
    salt = zlib.crc32(sample_id.encode("utf-8"))
    return np.random.default_rng([int(seed), salt]), salt


def pixel_ranking(amap) -> np.ndarray:
    """Flat pixel indices by descending channel-summed attribution, ties by index."""
    per_pixel = _map_values(amap).sum(axis=0).reshape(-1)
    return np.argsort(-per_pixel, kind="stable")


def perturbation_curve(
    g: ModelGraph,
    amap,
    x,
    target: int,
    steps: int,
    seed: int,
    sample_id: str = "",
) -> PerturbationCurve:
    """IP scores after cumulatively replacing the top-k attributed pixels.

    A whole replacement image is drawn up front from a per-sample stream,
    so runs over the canonized and non-canonized model see identical
    replacement values for the same pixel.
    """
    values = _map_values(amap)
    x_arr = np.array(as_array64(x))
    if x_arr.ndim == 4 and x_arr.shape[0] == 1:
        x_arr = x_arr[0]
    if values.shape != x_arr.shape:
        raise ShapeError(f"map shape {values.shape} != sample shape {x_arr.shape}")
    c, h, w = x_arr.shape
    if steps < 0 or steps > h * w:
        raise ValueError(f"steps must lie in [0, {h * w}], got {steps}")

    rng, salt = _sample_stream(seed, sample_id)
    lo, hi = g.input_range
    replacement = rng.uniform(lo, hi, size=x_arr.shape).astype(np.float32).astype(np.float64)

    order = pixel_ranking(values)
    f0 = float(forward(g, x_arr).astype64()[0, target])
    scores = [0.0]
    if steps > 0:
        work = x_arr.copy()
        perturbed = np.empty((steps, c, h, w))
        for k in range(steps):
            py, px = divmod(int(order[k]), w)
            work[:, py, px] = replacement[:, py, px]
            perturbed[k] = work
        for start in range(0, steps, 32):
            logits = forward(g, perturbed[start : start + 32]).astype64()
            scores.extend(float(f0 - v) for v in logits[:, target])
    return PerturbationCurve(sample_id=sample_id, scores=scores, steps=steps, rng_seed=salt)


def curve_difference(canon: PerturbationCurve, plain: PerturbationCurve) -> list[float]:
    """Elementwise plain - canon; negative means the canonized curve is higher."""
    if len(canon.scores) != len(plain.scores):
        raise ValueError(
            f"curves have different lengths: {len(canon.scores)} vs {len(plain.scores)}"
        )
    return [p - c for p, c in zip(plain.scores, canon.scores)]


def cosine_distance(a, b) -> float:
    """1 - cosine similarity over flattened maps, in [0, 2]."""
    va = _map_values(a).reshape(-1)
    vb = _map_values(b).reshape(-1)
    if va.shape != vb.shape:
        raise ShapeError(f"maps have different sizes: {va.shape} vs {vb.shape}")
    na = float(np.linalg.norm(va))
    nb = float(np.linalg.norm(vb))
    if na == 0.0 or nb == 0.0:
        raise ValueError("cosine distance undefined for a zero map")
    return float(1.0 - float(va @ vb) / (na * nb))
