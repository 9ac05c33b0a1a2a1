"""Command-line entry point: ``stts {gen-data,train,eval,flops,sweep}``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import fields
from pathlib import Path

from .config import ParseError, TrainConfig, resolve
from .costmodel import count_flops
from .harness import TrainingDiverged, evaluate, sweep, train
from .synthgen import GeneratorSpec, generate, save_dataset

log = logging.getLogger("stts")


def _read_config(path) -> dict:
    if path is None:
        return {}
    try:
        return json.loads(Path(path).read_text())
    except OSError as e:
        raise OSError(f"reading config {path}: {e}") from e


def _train_config(args) -> TrainConfig:
    raw = _read_config(args.config)
    tcfg = TrainConfig.from_dict(raw.get("train", raw))
    overrides = {"seed": args.seed, "sigma0": args.sigma0, "mc_samples": args.mc_samples,
                 "epochs": args.epochs}
    return tcfg.with_(**{k: v for k, v in overrides.items() if v is not None})


def cmd_gen_data(args) -> int:
    raw = _read_config(args.config)
    raw = raw.get("data", raw)
    known = {f.name for f in fields(GeneratorSpec)}
    kw = {k: v for k, v in raw.items() if k in known}
    if args.seed is not None:
        kw["seed"] = args.seed
    if args.samples is not None:
        kw["samples"] = args.samples
    spec = GeneratorSpec(**kw)
    save_dataset(generate(spec), args.out)
    print(f"wrote {spec.samples} samples to {args.out}")
    return 0


def cmd_train(args) -> int:
    tcfg = _train_config(args)
    res = train(args.name, tcfg, args.data, args.out, policy=args.policy, progress=True)
    print(f"checkpoint {res.checkpoint}")
    return 0


def cmd_eval(args) -> int:
    ev = evaluate(args.checkpoint, args.data, seed=args.seed or 0)
    text = json.dumps(ev.summary(), indent=2, sort_keys=True)
    if args.out:
        Path(args.out).write_text(text + "\n")
    print(text)
    return 0


def cmd_flops(args) -> int:
    cfg, sel = resolve(args.name)
    print(count_flops(cfg, sel, args.mc_samples or 0).to_text(), end="")
    return 0


def cmd_sweep(args) -> int:
    tcfg = _train_config(args)
    grid = []
    for item in args.ratios.split(","):
        rt, _, rs = item.partition(":")
        grid.append((float(rt) if rt else None, float(rs) if rs else None))
    rows = sweep(args.name, grid, tcfg, args.data, args.test_data, args.out)
    failed = [r["name"] for r in rows if r["status"] != "ok"]
    print(f"{len(rows)} rows written to {Path(args.out) / 'sweep.csv'}")
    if failed:
        print("failed: " + ", ".join(failed), file=sys.stderr)
        return 1
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="stts", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, name_help=None):
        sp.add_argument("--config", help="JSON file of settings")
        sp.add_argument("--seed", type=int)
        if name_help:
            sp.add_argument("--name", required=True, help=name_help)

    def training(sp):
        sp.add_argument("--sigma0", type=float)
        sp.add_argument("--mc-samples", type=int)
        sp.add_argument("--epochs", type=int)

    g = sub.add_parser("gen-data", help="write a synthetic dataset")
    common(g)
    g.add_argument("--out", required=True, help="dataset file")
    g.add_argument("--samples", type=int)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train one configuration")
    common(t, "selection name, e.g. tiny-T0_0.5")
    training(t)
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True, help="run directory")
    t.add_argument("--policy", choices=["scorer", "random", "uniform"], default="scorer")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="hard-selection evaluation of a checkpoint")
    common(e)
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--out", help="optional JSON output file")
    e.set_defaults(func=cmd_eval)

    f = sub.add_parser("flops", help="analytic cost report")
    f.add_argument("--name", required=True)
    f.add_argument("--mc-samples", type=int)
    f.set_defaults(func=cmd_flops)

    s = sub.add_parser("sweep", help="keep-ratio sweep with random baselines")
    common(s, "backbone tag, e.g. tiny")
    training(s)
    s.add_argument("--ratios", default="0.25,0.5,0.75,1.0",
                   help="comma list of temporal[:spatial] ratios")
    s.add_argument("--data", required=True, help="training dataset")
    s.add_argument("--test-data", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_sweep)
    return p


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ParseError, ValueError, OSError, TrainingDiverged) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
