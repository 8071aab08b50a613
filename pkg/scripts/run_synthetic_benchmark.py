#!/usr/bin/env python3
"""Label-availability benchmark on synthetic data.

Generates the fixed synthetic cohort (6 classes, 13 labeled users of which 3
are held out, 5000 unlabeled windows from 10 extra users), then compares
fully supervised training against the full teacher-student pipeline at
several labels-per-class budgets, 5 seeds each.

Usage:
    python3 scripts/run_synthetic_benchmark.py [--budgets 10 100] [--seeds 5]
        [--fast]
"""

import argparse
import sys
import time
from pathlib import Path

import numpy as np

sys.path.insert(0, str(Path(__file__).resolve().parent.parent / "src"))

from harpipe import datakit, pipeline  # noqa: E402
from harpipe import model as md  # noqa: E402


def benchmark_data():
    cfg = datakit.SynthConfig(classes=6, users=13, windows_per_user_per_class=20,
                              unlabeled_users=10, unlabeled_windows_per_user=500,
                              seed=7)
    labeled, unlabeled = datakit.synthesize(cfg)
    spec = datakit.SplitSpec(test_user_fraction=3 / 13, validation_fraction=0.0,
                             seed=7)
    train, _, test = datakit.split_by_users(labeled, spec)
    train, stats = datakit.znormalize(train, train)
    test = datakit.apply_normalization(test, stats)
    unlabeled = datakit.apply_normalization(unlabeled, stats)
    return train, test, unlabeled


BENCHMARK_ARCH = md.Architecture(conv_filters=(8, 16, 32),
                                 conv_kernels=(24, 16, 8), har_hidden=128,
                                 td_hidden=64, init_std=0.05)


def benchmark_config(n_per_class):
    # Reduced-width core and a raised learning rate so the 5-seed sweep fits a
    # laptop-CPU time budget. Supervised epoch counts scale inversely with the
    # label budget: at 10 labels/class an "epoch" is a single minibatch, so
    # convergence needs a few hundred of them. The wider init (0.05) skips the
    # long softmax plateau the multi-task pre-training otherwise sits on.
    supervised_epochs = 150 if n_per_class <= 20 else 40
    return pipeline.PipelineConfig(
        kind="selfhar",
        selection=pipeline.SelectionPolicy(per_class_cap=40),
        schedule=pipeline.TrainingSchedule(
            teacher_epochs=supervised_epochs, pretrain_epochs=8,
            finetune_epochs=supervised_epochs, batch_size=64,
            patience=25 if n_per_class <= 20 else 8,
            learning_rate=0.001, pretrain_learning_rate=0.003),
        arch=BENCHMARK_ARCH,
        n_resamples=200,
    )


def main():
    parser = argparse.ArgumentParser()
    parser.add_argument("--budgets", type=int, nargs="+", default=[10, 100])
    parser.add_argument("--seeds", type=int, default=5)
    parser.add_argument("--fast", action="store_true",
                        help="retained for compatibility; no effect")
    args = parser.parse_args()

    train, test, unlabeled = benchmark_data()
    print(f"train {len(train)} windows / test {len(test)} / unlabeled {len(unlabeled)}")

    start = time.time()
    rows = []
    for n in args.budgets:
        rows.extend(pipeline.limited_data_sweep(
            benchmark_config(n), train, test, unlabeled,
            n_per_class_list=[n], seeds=list(range(args.seeds)),
            kinds=(pipeline.PipelineKind.FULLY_SUPERVISED,
                   pipeline.PipelineKind.SELFHAR)))
    elapsed = time.time() - start

    by_budget = {}
    for row in rows:
        by_budget.setdefault(row["n_per_class"], {})[row["kind"]] = row
        print(f"n={row['n_per_class']:>4}  {row['kind']:<18} "
              f"mean wF1 {row['mean']:.4f} +/- {row['std']:.4f}  "
              f"scores {[f'{s:.3f}' for s in row['scores']]}")
    for n, cells in by_budget.items():
        margin = cells["selfhar"]["mean"] - cells["fully_supervised"]["mean"]
        print(f"n={n}: selfhar - fully_supervised = {margin:+.4f}")
    print(f"elapsed: {elapsed / 60:.1f} min")


if __name__ == "__main__":
    main()
