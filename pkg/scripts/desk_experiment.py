#!/usr/bin/env python3
"""Desk-scale language adaptation experiment.

Pretrains the 141k-parameter model on synthetic language A, adapts it to
synthetic language B with each strategy, and reports held-out byte
perplexity on B plus the three NLI accuracies per run.

    python3 scripts/desk_experiment.py --out runs/desk
"""

import argparse
import logging
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from langadapt.adapters import AdapterConfig, Strategy, StrategySpec
from langadapt.checkpoint import load_checkpoint
from langadapt.evaluation import (
    DESK_TASK,
    TargetArtifacts,
    cross_lingual_eval,
    evaluate_accuracy,
    new_task_head,
    predict_classes,
    train_task_head,
    zero_shot_eval,
)
from langadapt.model import DESK_CONFIG
from langadapt.synthetic import desk_suite
from langadapt.training import DESK_ADAPT, DESK_PRETRAIN, SamplingTable, adapt, heldout_perplexity, pretrain

RUNS = {
    "Emb": StrategySpec(Strategy.EMB_ONLY, "wte,wpe"),
    "Emb->Adpt": StrategySpec(Strategy.EMB_THEN_ADPT, "wte,wpe", AdapterConfig(16)),
    "Emb+Adpt": StrategySpec(Strategy.EMB_AND_ADPT, "wte", AdapterConfig(16)),
}


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="runs/desk")
    ap.add_argument("--pretrain-steps", type=int, default=DESK_PRETRAIN.steps)
    ap.add_argument("--adapt-steps", type=int, default=DESK_ADAPT.steps)
    ap.add_argument("--checkpoint", type=int, help="pretraining step to adapt from (default: last)")
    ap.add_argument("-v", "--verbose", action="store_true")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")

    out = Path(args.out)
    suite = desk_suite()
    suite.write(out / "data")
    plan = replace(DESK_PRETRAIN, steps=args.pretrain_steps)
    t0 = time.perf_counter()
    pre = pretrain(DESK_CONFIG, {"A": suite.ids_a}, SamplingTable({"A": 1.0}), plan, out / "checkpoints", suite.vocab_a)
    print(f"pretrained {plan.steps} steps in {time.perf_counter() - t0:.0f}s; checkpoints {[s for s, _ in pre.checkpoints]}")

    steps = dict(pre.checkpoints)
    ckpt = load_checkpoint(steps[args.checkpoint or max(steps)])
    held_a = np.array([t for line in suite.heldout_b for t in suite.vocab_a.encode(line)])
    held_b = np.array([t for line in suite.heldout_b for t in suite.vocab_b.encode(line)])
    base = heldout_perplexity(ckpt.params, None, held_a, 64, suite.vocab_a)
    print(f"base model on B: byte ppl {base.byte_ppl:.2f}")

    gold = [ex.label for ex in suite.test_b]
    src_head = new_task_head(DESK_CONFIG.d_model, DESK_CONFIG.n_layers, DESK_TASK.reduction, 0)
    train_task_head(ckpt.params, None, src_head, suite.vocab_a, suite.train_a, DESK_TASK)

    aplan = replace(DESK_ADAPT, steps=args.adapt_steps)
    print("strategy\tckpt\tbyte_ppl\tzeroshot\tcrosslingual\tsupervised")
    for name, spec in RUNS.items():
        r = adapt(ckpt, suite.vocab_b, suite.ids_b, spec, aplan, out / "adapted" / name.replace(">", ""))
        ppl = heldout_perplexity(r.params, r.adapters, held_b, 64, suite.vocab_b).byte_ppl
        zs = zero_shot_eval(r.params, r.adapters, suite.vocab_b, suite.lang_b.template(), suite.test_b)
        target = TargetArtifacts.from_model(r.params, suite.vocab_b, r.adapters)
        xl = cross_lingual_eval(ckpt.params, src_head, target, suite.test_b, DESK_TASK.seq_len).accuracy
        head = new_task_head(DESK_CONFIG.d_model, DESK_CONFIG.n_layers, DESK_TASK.reduction, 0)
        train_task_head(r.params, r.adapters, head, suite.vocab_b, suite.train_b, DESK_TASK)
        preds = predict_classes(r.params, r.adapters, head, suite.vocab_b, suite.test_b, DESK_TASK.seq_len)
        sup = evaluate_accuracy(preds, gold).accuracy
        zacc = evaluate_accuracy(zs, gold).accuracy
        print(f"{name}\t{ckpt.step}\t{ppl:.3f}\t{zacc:.4f}\t{xl:.4f}\t{sup:.4f}")


if __name__ == "__main__":
    main()
