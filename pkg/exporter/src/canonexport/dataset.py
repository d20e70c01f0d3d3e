"""Image + bounding-box annotation export.

Images go through the standard evaluation preprocessing (resize the
shorter side, center crop, scale to [0,1], per-channel normalize) and
are written as raw float32 CHW tensors. Boxes from Pascal-VOC style XML
files ride through the exact same geometry; boxes that end up empty
after cropping are dropped.
"""

from __future__ import annotations

import logging
import xml.etree.ElementTree as ET
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .models import IMAGENET_MEAN, IMAGENET_STD
from .writer import write_dataset

logger = logging.getLogger(__name__)

IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".bmp")


@dataclass
class Preprocessing:
    crop_size: int = 224
    resize_ratio: float = 256.0 / 224.0  # shorter side before the center crop
    mean: tuple = IMAGENET_MEAN
    std: tuple = IMAGENET_STD

    @property
    def resize_short(self) -> int:
        return int(round(self.crop_size * self.resize_ratio))


def parse_voc_boxes(xml_path) -> list[tuple[str, tuple[int, int, int, int]]]:
    """(class name, (x0, y0, x1, y1)) per object; VOC is 1-based inclusive."""
    root = ET.parse(xml_path).getroot()
    out = []
    for obj in root.iter("object"):
        name = obj.findtext("name", "").strip()
        box = obj.find("bndbox")
        if box is None:
            continue
        x0 = int(float(box.findtext("xmin"))) - 1
        y0 = int(float(box.findtext("ymin"))) - 1
        x1 = int(float(box.findtext("xmax")))
        y1 = int(float(box.findtext("ymax")))
        out.append((name, (x0, y0, x1, y1)))
    return out


def transform_geometry(size_wh, pre: Preprocessing):
    """Return (scale, crop_dx, crop_dy, resized_wh) for one source image."""
    w, h = size_wh
    scale = pre.resize_short / min(w, h)
    rw, rh = int(round(w * scale)), int(round(h * scale))
    dx = (rw - pre.crop_size) // 2
    dy = (rh - pre.crop_size) // 2
    return scale, dx, dy, (rw, rh)


def transform_box(box, size_wh, pre: Preprocessing):
    """Map a source-pixel box through resize + center crop; None if empty."""
    scale, dx, dy, _ = transform_geometry(size_wh, pre)
    x0, y0, x1, y1 = box
    nx0 = max(0, min(pre.crop_size, int(round(x0 * scale)) - dx))
    ny0 = max(0, min(pre.crop_size, int(round(y0 * scale)) - dy))
    nx1 = max(0, min(pre.crop_size, int(round(x1 * scale)) - dx))
    ny1 = max(0, min(pre.crop_size, int(round(y1 * scale)) - dy))
    if nx1 <= nx0 or ny1 <= ny0:
        return None
    return (nx0, ny0, nx1, ny1)


def preprocess_image(img: Image.Image, pre: Preprocessing) -> np.ndarray:
    _, dx, dy, (rw, rh) = transform_geometry(img.size, pre)
    resized = img.convert("RGB").resize((rw, rh), Image.BILINEAR)
    cropped = resized.crop((dx, dy, dx + pre.crop_size, dy + pre.crop_size))
    arr = np.asarray(cropped, dtype=np.float32) / 255.0
    arr = (arr - np.array(pre.mean, np.float32)) / np.array(pre.std, np.float32)
    return arr.transpose(2, 0, 1)


def export_dataset(image_dir, annotation_dir, class_names, out_path, pre: Preprocessing | None = None):
    """Convert a directory of images + VOC XMLs into a `.canondata` bundle.

    Images without a parseable annotation for a known class are skipped
    (counted and logged). Returns (bundle_path, n_exported, n_skipped).
    """
    pre = pre or Preprocessing()
    class_index = {name: i for i, name in enumerate(class_names)}
    image_dir = Path(image_dir)
    annotation_dir = Path(annotation_dir)
    samples = []
    skipped = 0
    paths = sorted(p for p in image_dir.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
    for path in paths:
        xml_path = annotation_dir / f"{path.stem}.xml"
        if not xml_path.is_file():
            logger.warning("skipping %s: no annotation", path.name)
            skipped += 1
            continue
        try:
            objects = parse_voc_boxes(xml_path)
        except ET.ParseError as e:
            logger.warning("skipping %s: bad annotation (%s)", path.name, e)
            skipped += 1
            continue
        known = [(n, b) for n, b in objects if n in class_index]
        if not known:
            logger.warning("skipping %s: no object of a known class", path.name)
            skipped += 1
            continue
        label_name = known[0][0]
        with Image.open(path) as img:
            size = img.size
            boxes = [
                tb
                for n, b in known
                if n == label_name and (tb := transform_box(b, size, pre)) is not None
            ]
            if not boxes:
                logger.warning("skipping %s: all boxes empty after crop", path.name)
                skipped += 1
                continue
            tensor = preprocess_image(img, pre)
        samples.append(
            {"id": path.stem, "image": tensor, "label": class_index[label_name], "bboxes": boxes}
        )
    bundle = write_dataset(samples, out_path, class_names)
    logger.info("exported %d sample(s), skipped %d", len(samples), skipped)
    return bundle, len(samples), skipped
