"""Command-line front end.

Subcommands: `canonize` (fuse + verify), `attribute` (one map),
`run-experiment` (full metric protocol), `compare` (cosine distance of
two saved maps), `predict` (logits as CSV). Logs go to stderr; data
goes to files, or to stdout for `canonize` (report JSON) and `compare`
(the distance).

Exit codes: 0 success, 1 usage error, 2 IO/format error,
3 verification or experiment failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

from .attribution import METHOD_LABELS, attribute, parse_method
from .canonize import canonize_pass, verify_equivalence
from .evaluate import cosine_distance
from .experiment import ExperimentConfig, ExperimentError, run_experiment
from .graph import GraphError, forward
from .model_io import (
    ModelFormatError,
    load_attribution,
    load_dataset,
    load_model,
    model_checksum,
    save_attribution,
    save_model,
)
from .tensor import NonFiniteError, ShapeError

logger = logging.getLogger("canoneval")

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_FORMAT = 2
EXIT_FAILURE = 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse defaults to exit code 2
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def _build_parser() -> _Parser:
    parser = _Parser(prog="canoneval", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("canonize", help="fuse BN layers and verify equivalence")
    p.add_argument("--model", required=True, help="input .canonmodel bundle")
    p.add_argument("--out", required=True, help="output bundle for the canonized model")
    p.add_argument("--trials", type=int, default=100)
    p.add_argument("--tolerance", type=float, default=1e-4)
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("attribute", help="compute one attribution map")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True, help=".canondata bundle")
    p.add_argument("--sample", required=True, help="sample id from the dataset manifest")
    p.add_argument("--method", required=True, choices=sorted(METHOD_LABELS))
    p.add_argument("--target", type=int, default=None, help="class index (default: label)")
    p.add_argument("--bn-rule", default="affine_epsilon", choices=["affine_epsilon", "identity_passthrough"])
    p.add_argument("--out", required=True, help="output base path (writes .f32 and .json)")

    p = sub.add_parser("run-experiment", help="run the full metric protocol")
    p.add_argument("--config", help="JSON config file; flags override its fields")
    p.add_argument("--model")
    p.add_argument("--data")
    p.add_argument("--toy-seed", type=int)
    p.add_argument("--toy-n", type=int)
    p.add_argument("--methods", help="comma-separated method names")
    p.add_argument("--steps", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--out")
    p.add_argument("--canonized", choices=["both", "on", "off"])
    p.add_argument("--bn-rule", choices=["affine_epsilon", "identity_passthrough"])
    p.add_argument("--max-samples", type=int)

    p = sub.add_parser("compare", help="cosine distance between two saved maps")
    p.add_argument("map_a", help="base path of the first map (without extension)")
    p.add_argument("map_b", help="base path of the second map")

    p = sub.add_parser("predict", help="write model logits for a dataset as CSV")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    return parser


def _cmd_canonize(args) -> int:
    model = load_model(args.model)
    canon, records = canonize_pass(model)
    remaining = sum(1 for n in canon.nodes.values() if n.kind == "bn")
    logger.info("%d fusions, %d bn node(s) left in place", len(records), remaining)
    report = verify_equivalence(model, canon, n_trials=args.trials, tolerance=args.tolerance, seed=args.seed)
    save_model(canon, args.out)
    payload = report.to_dict()
    payload["fusions"] = len(records)
    payload["unfused_bn"] = remaining
    json.dump(payload, sys.stdout, indent=1, sort_keys=True)
    print()
    if not report.passed:
        logger.error("equivalence verification failed: max_abs_diff=%g", report.max_abs_diff)
        return EXIT_FAILURE
    return EXIT_OK


def _cmd_attribute(args) -> int:
    model = load_model(args.model)
    samples, _ = load_dataset(args.data)
    by_id = {s.id: s for s in samples}
    if args.sample not in by_id:
        logger.error("sample %r not in dataset", args.sample)
        return EXIT_FORMAT
    sample = by_id[args.sample]
    target = sample.label if args.target is None else args.target
    cfg = parse_method(args.method, bn_rule=args.bn_rule)
    amap = attribute(model, sample.image, target, cfg)
    save_attribution(
        amap.values,
        args.out,
        {
            "method": amap.method,
            "target": amap.target_class,
            "sample_id": sample.id,
            "model_checksum": model_checksum(args.model),
        },
    )
    logger.info("wrote %s.f32 / .json", args.out)
    return EXIT_OK


def _cmd_run_experiment(args) -> int:
    fields = {}
    if args.config:
        try:
            with open(args.config) as f:
                fields.update(json.load(f))
        except (OSError, json.JSONDecodeError) as e:
            logger.error("cannot read config %s: %s", args.config, e)
            return EXIT_FORMAT
    overrides = {
        "model_path": args.model,
        "data_path": args.data,
        "toy_seed": args.toy_seed,
        "toy_n": args.toy_n,
        "steps": args.steps,
        "seed": args.seed,
        "out_dir": args.out,
        "canonized": args.canonized,
        "methods": args.methods,
        "bn_rule": args.bn_rule,
        "max_samples": args.max_samples,
    }
    fields.update({k: v for k, v in overrides.items() if v is not None})

    bn_rule = fields.pop("bn_rule", "affine_epsilon")
    methods = fields.get("methods")
    if isinstance(methods, str):
        methods = [m.strip() for m in methods.split(",") if m.strip()]
    if not methods:
        logger.error("no methods given (use --methods)")
        return EXIT_USAGE
    if not fields.get("out_dir"):
        logger.error("no output directory given (use --out)")
        return EXIT_USAGE
    try:
        fields["methods"] = [parse_method(m, bn_rule=bn_rule) for m in methods]
        cfg = ExperimentConfig(**fields)
    except (TypeError, ValueError) as e:
        logger.error("bad experiment config: %s", e)
        return EXIT_USAGE
    summary = run_experiment(cfg)
    logger.info(
        "experiment done: %d/%d samples ok, outputs in %s",
        summary["n_ok"],
        summary["n_samples"],
        cfg.out_dir,
    )
    return EXIT_OK


def _cmd_compare(args) -> int:
    a, _ = load_attribution(args.map_a)
    b, _ = load_attribution(args.map_b)
    try:
        dist = cosine_distance(a, b)
    except ValueError as e:
        logger.error("cannot compare maps: %s", e)
        return EXIT_FAILURE
    print(repr(dist))
    return EXIT_OK


def _cmd_predict(args) -> int:
    model = load_model(args.model)
    samples, _ = load_dataset(args.data)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        n_classes = model.num_classes()
        writer.writerow(["sample_id", "label"] + [f"logit_{i}" for i in range(n_classes)])
        for sample in sorted(samples, key=lambda s: s.id):
            logits = forward(model, sample.image).astype64()[0]
            writer.writerow([sample.id, sample.label] + [repr(float(v)) for v in logits])
    logger.info("wrote %s", out)
    return EXIT_OK


_COMMANDS = {
    "canonize": _cmd_canonize,
    "attribute": _cmd_attribute,
    "run-experiment": _cmd_run_experiment,
    "compare": _cmd_compare,
    "predict": _cmd_predict,
}


def main(argv=None) -> int:
    logging.basicConfig(stream=sys.stderr, level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    args = _build_parser().parse_args(argv)
    try:
        code = _COMMANDS[args.command](args)
    except (ModelFormatError, OSError) as e:
        logger.error("%s", e)
        code = EXIT_FORMAT
    except (GraphError, ShapeError, NonFiniteError, ValueError, IndexError) as e:
        logger.error("%s", e)
        code = EXIT_FORMAT
    except ExperimentError as e:
        logger.error("%s", e)
        code = EXIT_FAILURE
    if argv is None:
        raise SystemExit(code)
    return code


if __name__ == "__main__":
    raise SystemExit(main(sys.argv[1:]))
