"""Run the ablation grids (table3 .. table6) on the toy benchmark and write
markdown tables plus raw JSON rows.

    python scripts/run_ablations.py --out runs/ablations --epochs 20 --grids table5 table6
"""

import argparse
import json
import logging
import os

from dolg.ablation import GRIDS, Benchmark, format_table, run_grid
from dolg.data import make_dataset, make_toy_dataset, read_manifest
from dolg.evaluation import RetrievalGroundTruth
from dolg.model import ModelConfig
from dolg.training import TrainConfig


def records(manifest):
    return [(os.path.splitext(os.path.basename(p))[0], p) for p, _ in read_manifest(manifest)]


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="runs/ablations")
    ap.add_argument("--epochs", type=int, default=20)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--grids", nargs="+", default=sorted(GRIDS), choices=sorted(GRIDS))
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(message)s")

    paths = make_toy_dataset(os.path.join(args.out, "data"), seed=args.seed)
    tcfg = TrainConfig(batch_size=32, epochs=args.epochs, warmup_epochs=min(5, args.epochs - 1),
                       image_size=64, seed=args.seed)
    bench = Benchmark(
        dataset=make_dataset(read_manifest(paths["train"]), tcfg.split_fraction, tcfg.seed),
        gt=RetrievalGroundTruth.load(paths["gt"]),
        db_records=records(paths["db"]),
        query_records=records(paths["query"]),
    )
    for grid in args.grids:
        rows = run_grid(GRIDS[grid], bench, ModelConfig(), tcfg, out_dir=os.path.join(args.out, grid))
        table = format_table(rows, grid)
        with open(os.path.join(args.out, f"{grid}.md"), "w", encoding="utf-8") as fh:
            fh.write(table)
        with open(os.path.join(args.out, f"{grid}.json"), "w", encoding="utf-8") as fh:
            json.dump(rows, fh, indent=2)
        print(table)


if __name__ == "__main__":
    main()
