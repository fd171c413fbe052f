"""Command-line entry point: make-toy, train, extract, evaluate, ablate, selftest.

Every command writes its resolved configuration to ``<run-dir>/config.json``.
The default run directory is ``$DOLG_CACHE_DIR/runs/<command>-<config hash>``
(``DOLG_CACHE_DIR`` defaults to ``.dolg``). Failures exit non-zero and print
one JSON error record on stderr.
"""

import argparse
import json
import logging
import os
import sys

import torch

from . import config as config_mod
from .ablation import Benchmark, format_table, load_grid, run_grid
from .data import make_dataset, make_toy_dataset, read_manifest
from .errors import ConfigError, DataError, DolgError
from .evaluation import RetrievalGroundTruth, evaluate
from .extraction import extract_images, store_read, store_write
from .model import build_model
from .training import load_checkpoint, train

log = logging.getLogger("dolg")


def _records(manifest):
    """``(id, path)`` pairs; the id is the image file name without extension."""
    return [(os.path.splitext(os.path.basename(p))[0], p) for p, _ in read_manifest(manifest)]


def _require(cfg, key, flag):
    value = cfg[key]
    if not value:
        raise ConfigError(f"missing {flag} (config key {key!r})")
    if not os.path.exists(value):
        raise DataError(f"path not found: {value}")
    return value


def _run_dir(args, cfg):
    root = args.run_dir or os.path.join(os.environ.get("DOLG_CACHE_DIR", ".dolg"), "runs",
                                        f"{args.command}-{config_mod.digest(cfg)[:10]}")
    os.makedirs(root, exist_ok=True)
    with open(os.path.join(root, "config.json"), "w", encoding="utf-8") as fh:
        json.dump(cfg, fh, indent=2, sort_keys=True)
    return root


def _set_device(cfg):
    if cfg["device"] != "cpu" and not torch.cuda.is_available():
        raise ConfigError(f"device {cfg['device']!r} requested but CUDA is not available")
    torch.use_deterministic_algorithms(True)


def cmd_make_toy(args, cfg):
    paths = make_toy_dataset(args.out, seed=cfg["seed"])
    print(json.dumps(paths, indent=2))
    return 0


def cmd_train(args, cfg):
    manifest = _require(cfg, "data.train_manifest", "--train-manifest")
    run_dir = _run_dir(args, cfg)
    tcfg = config_mod.train_config(cfg)
    dataset = make_dataset(read_manifest(manifest), tcfg.split_fraction, tcfg.seed)
    model = build_model(config_mod.model_config(cfg), seed=tcfg.seed)
    if cfg["model.pretrained"]:
        model.backbone.load_weights(_require(cfg, "model.pretrained", "--set model.pretrained=<path>"))
    result = train(dataset, model, tcfg, out_dir=run_dir)
    print(json.dumps({"checkpoint": result.checkpoint, "report": os.path.join(run_dir, "report.jsonl"),
                      "final": result.report[-1]}, indent=2))
    return 0


def cmd_extract(args, cfg):
    if not os.path.exists(args.checkpoint):
        raise DataError(f"path not found: {args.checkpoint}")
    if not os.path.exists(args.input):
        raise DataError(f"path not found: {args.input}")
    _run_dir(args, cfg)
    model, _, _ = load_checkpoint(args.checkpoint)
    crops = None
    if args.gt and cfg["extract.crop_queries"]:
        crops = RetrievalGroundTruth.load(args.gt).crops()
    store = extract_images(_records(args.input), model, tuple(cfg["extract.scales"]),
                           cfg["extract.strict"], crops)
    store_write(store, args.output)
    print(json.dumps({"store": args.output, "count": len(store), "dim": store.dim}))
    return 0


def cmd_evaluate(args, cfg):
    for path in (args.gt, args.db, args.queries):
        if not os.path.exists(path):
            raise DataError(f"path not found: {path}")
    run_dir = _run_dir(args, cfg)
    report = evaluate(RetrievalGroundTruth.load(args.gt), store_read(args.db), store_read(args.queries))
    out = args.out or os.path.join(run_dir, "report.json")
    with open(out, "w", encoding="utf-8") as fh:
        json.dump(report.to_dict(), fh, indent=2)
    summary = {k: v for k, v in report.to_dict().items() if k.startswith(("map", "mp10"))}
    print(json.dumps({"report": out, **summary}, indent=2))
    return 0


def cmd_ablate(args, cfg):
    specs = load_grid(args.grid)
    tcfg = config_mod.train_config(cfg)
    bench = Benchmark(
        dataset=make_dataset(read_manifest(_require(cfg, "data.train_manifest", "--train-manifest")),
                             tcfg.split_fraction, tcfg.seed),
        gt=RetrievalGroundTruth.load(_require(cfg, "data.gt", "--gt-file")),
        db_records=_records(_require(cfg, "data.db_manifest", "--db-manifest")),
        query_records=_records(_require(cfg, "data.query_manifest", "--query-manifest")),
        scales=tuple(cfg["extract.scales"]),
        strict=cfg["extract.strict"],
        crop_queries=cfg["extract.crop_queries"],
    )
    run_dir = _run_dir(args, cfg)
    rows = run_grid(specs, bench, config_mod.model_config(cfg), tcfg, out_dir=run_dir)
    table = format_table(rows, title=os.path.basename(args.grid))
    out = args.out or os.path.join(run_dir, "table.md")
    with open(out, "w", encoding="utf-8") as fh:
        fh.write(table)
    with open(os.path.splitext(out)[0] + ".json", "w", encoding="utf-8") as fh:
        json.dump(rows, fh, indent=2)
    print(table)
    return 0


def cmd_selftest(args, cfg):
    from . import selftest

    results = selftest.run(cfg["seed"])
    for name, passed, detail in results:
        print(f"{'PASS' if passed else 'FAIL'}  {name}: {detail}")
    return 0 if all(p for _, p, _ in results) else 1


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON file of dotted keys, or a preset name (toy, paper_r50)")
    common.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="override one config key; repeatable")
    common.add_argument("--seed", type=int)
    common.add_argument("--device")
    common.add_argument("--run-dir")
    common.add_argument("--print-config", action="store_true", help="print the resolved config and exit")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="dolg", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("make-toy", parents=[common], help="write the synthetic toy dataset")
    p.add_argument("--out", required=True)

    p = sub.add_parser("train", parents=[common], help="train a model")
    p.add_argument("--train-manifest")

    p = sub.add_parser("extract", parents=[common], help="multi-scale descriptor extraction")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--input", required=True, help="image manifest")
    p.add_argument("--output", required=True, help="descriptor store path")
    p.add_argument("--gt", help="ground truth with query crop boxes")

    p = sub.add_parser("evaluate", parents=[common], help="mAP / mP@10 evaluation")
    p.add_argument("--gt", required=True)
    p.add_argument("--db", required=True)
    p.add_argument("--queries", required=True)
    p.add_argument("--out")

    p = sub.add_parser("ablate", parents=[common], help="run an ablation grid")
    p.add_argument("--grid", required=True, help="grid spec JSON file or preset (table3..table6)")
    p.add_argument("--out")
    p.add_argument("--train-manifest")
    p.add_argument("--db-manifest")
    p.add_argument("--query-manifest")
    p.add_argument("--gt-file", dest="gt_file")

    sub.add_parser("selftest", parents=[common], help="run the invariant checks")
    return parser


COMMANDS = {
    "make-toy": cmd_make_toy,
    "train": cmd_train,
    "extract": cmd_extract,
    "evaluate": cmd_evaluate,
    "ablate": cmd_ablate,
    "selftest": cmd_selftest,
}


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        flags = {
            "seed": args.seed,
            "device": args.device,
            "data.train_manifest": getattr(args, "train_manifest", None),
            "data.db_manifest": getattr(args, "db_manifest", None),
            "data.query_manifest": getattr(args, "query_manifest", None),
            "data.gt": getattr(args, "gt_file", None),
        }
        cfg = config_mod.resolve(args.config, args.overrides, **flags)
        if args.print_config:
            print(json.dumps(cfg, indent=2, sort_keys=True))
            return 0
        _set_device(cfg)
        return COMMANDS[args.command](args, cfg)
    except DolgError as exc:
        print(json.dumps({"error": exc.kind, "command": args.command, "message": str(exc)}), file=sys.stderr)
        return 2
    except (FileNotFoundError, IsADirectoryError) as exc:
        print(json.dumps({"error": "missing_path", "command": args.command, "message": str(exc)}), file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
