"""Exporter command line: `canonexport model ...` / `canonexport dataset ...`."""

from __future__ import annotations

import argparse
import logging
import sys

from .dataset import Preprocessing, export_dataset
from .models import UnmappableLayerError, export_model

logger = logging.getLogger("canonexport")


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="canonexport", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("model", help="export a torchvision checkpoint as a .canonmodel bundle")
    p.add_argument("--model", required=True, choices=["vgg16_bn", "resnet18"])
    p.add_argument("--weights", help="state-dict .pth file; default is seeded random init")
    p.add_argument("--input-size", type=int, default=224)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)

    p = sub.add_parser("dataset", help="export images + VOC XML boxes as a .canondata bundle")
    p.add_argument("--images", required=True)
    p.add_argument("--annotations", required=True)
    p.add_argument("--classes", required=True, help="text file, one class name per line")
    p.add_argument("--crop-size", type=int, default=224)
    p.add_argument("--out", required=True)
    return parser


def main(argv=None) -> int:
    logging.basicConfig(stream=sys.stderr, level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    args = _build_parser().parse_args(argv)
    try:
        if args.command == "model":
            bundle, _ = export_model(
                args.model,
                args.out,
                input_size=args.input_size,
                weights_path=args.weights,
                seed=args.seed,
            )
            logger.info("wrote %s", bundle)
        else:
            with open(args.classes) as f:
                class_names = [line.strip() for line in f if line.strip()]
            bundle, n_ok, n_skipped = export_dataset(
                args.images,
                args.annotations,
                class_names,
                args.out,
                pre=Preprocessing(crop_size=args.crop_size),
            )
            logger.info("wrote %s (%d samples, %d skipped)", bundle, n_ok, n_skipped)
            if n_ok == 0:
                logger.error("no sample could be exported")
                return 3
    except (UnmappableLayerError, ValueError, OSError) as e:
        logger.error("%s", e)
        return 2
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
