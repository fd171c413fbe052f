"""Toy end-to-end run: generate data, train the full model and the global-only
baseline, extract multi-scale descriptors, evaluate, and write a JSON summary.

    python scripts/run_toy_pipeline.py --out runs/toy --epochs 50
"""

import argparse
import json
import logging
import os
import time

from dolg.data import make_dataset, make_toy_dataset, read_manifest
from dolg.evaluation import RetrievalGroundTruth, evaluate
from dolg.extraction import extract_images, store_write
from dolg.model import ModelConfig, build_model
from dolg.training import TrainConfig, train


def records(manifest):
    return [(os.path.splitext(os.path.basename(p))[0], p) for p, _ in read_manifest(manifest)]


def run(name, mcfg, tcfg, paths, out, scales):
    dataset = make_dataset(read_manifest(paths["train"]), tcfg.split_fraction, tcfg.seed)
    gt = RetrievalGroundTruth.load(paths["gt"])
    start = time.perf_counter()
    result = train(dataset, build_model(mcfg, seed=tcfg.seed), tcfg, out_dir=os.path.join(out, name))
    seconds = time.perf_counter() - start
    db = extract_images(records(paths["db"]), result.model, scales)
    queries = extract_images(records(paths["query"]), result.model, scales, crops=gt.crops())
    store_write(db, os.path.join(out, name, "db.bin"))
    store_write(queries, os.path.join(out, name, "queries.bin"))
    report = evaluate(gt, db, queries).to_dict()
    with open(os.path.join(out, name, "eval.json"), "w", encoding="utf-8") as fh:
        json.dump(report, fh, indent=2)
    final = result.report[-1]
    return {"train_acc": final["train_acc"], "val_acc": final["val_acc"], "train_seconds": seconds,
            **{k: v for k, v in report.items() if k.startswith(("map", "mp10"))}}


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="runs/toy")
    ap.add_argument("--epochs", type=int, default=50)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--scales", type=float, nargs="+", default=[0.7071, 1.0, 1.4142])
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(message)s")

    paths = make_toy_dataset(os.path.join(args.out, "data"), seed=args.seed)
    tcfg = TrainConfig(batch_size=32, epochs=args.epochs, warmup_epochs=min(5, args.epochs - 1),
                       image_size=64, seed=args.seed)
    summary = {
        "orthogonal": run("orthogonal", ModelConfig(), tcfg, paths, args.out, args.scales),
        "global_only": run("global_only", ModelConfig(fusion_location="global_only"), tcfg, paths, args.out,
                           args.scales),
    }
    summary["orthogonal_minus_global_map_medium"] = (summary["orthogonal"]["map_medium"]
                                                     - summary["global_only"]["map_medium"])
    with open(os.path.join(args.out, "summary.json"), "w", encoding="utf-8") as fh:
        json.dump(summary, fh, indent=2)
    print(json.dumps(summary, indent=2))


if __name__ == "__main__":
    main()
