"""Train a learned temporal selector and a random-selection twin, then compare them on held-out clips."""
import argparse
import json
from pathlib import Path

from stts_lab.config import TrainConfig
from stts_lab.harness import baseline_accuracy, evaluate, train
from stts_lab.synthgen import GeneratorSpec, generate


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--name", default="tiny-T0_0.5")
    ap.add_argument("--epochs", type=int, default=10)
    ap.add_argument("--mc-samples", type=int, default=100)
    ap.add_argument("--train-samples", type=int, default=4000)
    ap.add_argument("--test-samples", type=int, default=1000)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out", default="runs/selection_vs_random")
    args = ap.parse_args()

    out = Path(args.out)
    train_ds = generate(GeneratorSpec(samples=args.train_samples, seed=1))
    test_ds = generate(GeneratorSpec(samples=args.test_samples, seed=2))
    tcfg = TrainConfig(epochs=args.epochs, mc_samples=args.mc_samples, seed=args.seed)

    learned = train(args.name, tcfg, train_ds, out / "scorer")
    ev = evaluate(learned.model, test_ds)
    rand = train(args.name, tcfg, train_ds, out / "random", policy="random")
    summary = {"name": args.name, **ev.summary(),
               "random_accuracy": baseline_accuracy(rand.model, test_ds, seed=args.seed)}
    (out / "summary.json").write_text(json.dumps(summary, indent=2))
    print(json.dumps(summary, indent=2))


if __name__ == "__main__":
    main()
