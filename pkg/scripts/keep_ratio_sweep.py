"""Accuracy and cost against temporal keep ratio, learned selection next to random selection."""
import argparse
from pathlib import Path

from stts_lab.config import TrainConfig, resolve
from stts_lab.costmodel import count_flops
from stts_lab.harness import selection_name, sweep
from stts_lab.synthgen import GeneratorSpec, generate


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--backbone", default="tiny")
    ap.add_argument("--ratios", default="0.25,0.5,0.75,1.0")
    ap.add_argument("--epochs", type=int, default=5)
    ap.add_argument("--mc-samples", type=int, default=100)
    ap.add_argument("--train-samples", type=int, default=4000)
    ap.add_argument("--test-samples", type=int, default=1000)
    ap.add_argument("--out", default="runs/keep_ratio_sweep")
    args = ap.parse_args()

    ratios = [float(r) for r in args.ratios.split(",")]
    train_ds = generate(GeneratorSpec(samples=args.train_samples, seed=1))
    test_ds = generate(GeneratorSpec(samples=args.test_samples, seed=2))
    tcfg = TrainConfig(epochs=args.epochs, mc_samples=args.mc_samples)
    rows = sweep(args.backbone, [(r, None) for r in ratios], tcfg, train_ds, test_ds, Path(args.out))

    print(f"{'config':<22}{'GFLOPs':>10}{'acc':>8}{'random':>8}")
    for r, row in zip(ratios, rows):
        name = selection_name(args.backbone, r, None)
        gflops = count_flops(*resolve(name)).total / 1e9
        print(f"{name:<22}{gflops:>10.4f}{float(row['accuracy']):>8.3f}{float(row['baseline_accuracy']):>8.3f}")


if __name__ == "__main__":
    main()
