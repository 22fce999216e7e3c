#!/usr/bin/env python3
"""Language-adapter capacity per reduction factor, as TSV.

With ``--results`` (a grid results TSV) the measured accuracies of the
Emb+Adpt rows are joined on the reduction column.

    python3 scripts/capacity_report.py --preset paper
    python3 scripts/capacity_report.py --preset desk --reductions 16,32,64 --results runs/x/results.tsv
"""

import argparse
import csv

from langadapt.evaluation import capacity_report
from langadapt.model import DESK_CONFIG, PAPER_CONFIG


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--preset", choices=("paper", "desk"), default="paper")
    ap.add_argument("--reductions", default="16,48,384")
    ap.add_argument("--results", help="grid results TSV to join")
    args = ap.parse_args()

    cfg = PAPER_CONFIG if args.preset == "paper" else DESK_CONFIG
    reductions = [int(r) for r in args.reductions.split(",")]
    accuracies = {}
    if args.results:
        with open(args.results, encoding="utf-8", newline="") as fh:
            for row in csv.DictReader(fh, delimiter="\t"):
                if row["strategy"] == "Emb+Adpt" and row["reduction"].isdigit():
                    accuracies[int(row["reduction"])] = {
                        k: float(row[k]) for k in ("zeroshot_acc", "crosslingual_acc", "supervised_acc")
                        if row[k] not in ("-", "") and not row[k].startswith("ERROR")
                    }
    print(capacity_report(cfg.d_model, cfg.n_layers, reductions, accuracies or None), end="")


if __name__ == "__main__":
    main()
