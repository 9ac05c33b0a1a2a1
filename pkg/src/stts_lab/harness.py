"""Training, evaluation, sweeps and on-disk formats."""
from __future__ import annotations

import contextlib
import csv
import json
import logging
import math
import os
import struct
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .config import BACKBONES, ModelConfig, SelectionConfig, TrainConfig, parse_selection, resolve
from .costmodel import CostReport, count_flops
from .model import ForwardInfo, VideoTransformer
from .selection import keep_count
from .synthgen import SyntheticDataset, ground_truth_tokens, load_dataset, region_tokens
from .topk import PerturbConfig, SigmaSchedule

log = logging.getLogger(__name__)

CKPT_MAGIC = b"STTSCKPT"
CKPT_VERSION = 1


class CheckpointVersionError(ValueError):
    pass


class TrainingDiverged(ArithmeticError):
    pass


@contextlib.contextmanager
def thread_limit():
    """Cap BLAS worker threads at $STTS_THREADS when set."""
    n = os.environ.get("STTS_THREADS")
    if not n:
        yield
        return
    from threadpoolctl import threadpool_limits

    with threadpool_limits(limits=int(n)):
        yield


# ---------------------------------------------------------------------------
# optimisation


class AdamW:
    def __init__(self, params: Dict[str, Tensor], betas=(0.9, 0.999), weight_decay=0.05, eps=1e-8):
        self.params = params
        self.b1, self.b2 = betas
        self.wd = weight_decay
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self, lr: float) -> None:
        self.t += 1
        c1 = 1 - self.b1 ** self.t
        c2 = 1 - self.b2 ** self.t
        for k, p in self.params.items():
            g = p.grad
            if g is None:
                continue
            m, v = self.m[k], self.v[k]
            m *= self.b1
            m += (1 - self.b1) * g
            v *= self.b2
            v += (1 - self.b2) * g * g
            if self.wd and p.data.ndim >= 2:
                p.data *= np.float32(1 - lr * self.wd)
            p.data -= (lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(np.float32)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None


def lr_at(step: int, total: int, base: float, warmup_frac: float) -> float:
    """Linear warm-up then cosine decay to zero."""
    warm = int(round(warmup_frac * total))
    if step < warm:
        return base * (step + 1) / warm
    span = max(1, total - warm)
    return base * 0.5 * (1 + math.cos(math.pi * (step - warm) / span))


def sigma_schedule(sigma0: float, total_updates: int) -> SigmaSchedule:
    # the last update runs at sigma == 0
    return SigmaSchedule(sigma0, max(1, total_updates - 1))


def step_seed(seed: int, step: int) -> int:
    return int(np.random.SeedSequence([int(seed), 7, int(step)]).generate_state(1)[0])


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(params: Dict[str, Tensor], path, meta: Optional[dict] = None) -> None:
    path = Path(path)
    buf = bytearray(CKPT_MAGIC)
    buf += struct.pack("<I", CKPT_VERSION)
    for name, t in params.items():
        arr = t.data if isinstance(t, Tensor) else np.asarray(t, dtype=np.float32)
        nb = name.encode("utf-8")
        buf += struct.pack("<I", len(nb)) + nb
        buf += struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
        buf += np.ascontiguousarray(arr, dtype="<f4").tobytes()
    try:
        path.write_bytes(bytes(buf))
        if meta is not None:
            Path(str(path) + ".json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    except OSError as e:
        raise OSError(f"writing checkpoint {path}: {e}") from e


def load_checkpoint(path) -> Dict[str, np.ndarray]:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as e:
        raise OSError(f"reading checkpoint {path}: {e}") from e
    if raw[:8] != CKPT_MAGIC:
        raise CheckpointVersionError(f"{path}: not an STTSCKPT file")
    (version,) = struct.unpack_from("<I", raw, 8)
    if version != CKPT_VERSION:
        raise CheckpointVersionError(f"{path}: checkpoint version {version}, expected {CKPT_VERSION}")
    off = 12
    out: Dict[str, np.ndarray] = {}
    while off < len(raw):
        (ln,) = struct.unpack_from("<I", raw, off)
        off += 4
        name = raw[off:off + ln].decode("utf-8")
        off += ln
        (ndim,) = struct.unpack_from("<I", raw, off)
        off += 4
        shape = struct.unpack_from(f"<{ndim}I", raw, off)
        off += 4 * ndim
        count = int(np.prod(shape, dtype=np.int64))
        out[name] = np.frombuffer(raw, dtype="<f4", count=count, offset=off).reshape(shape).astype(np.float32)
        off += 4 * count
    return out


def load_model(path) -> VideoTransformer:
    """Rebuild a model from a checkpoint and its JSON sidecar."""
    try:
        meta = json.loads(Path(str(path) + ".json").read_text())
    except OSError as e:
        raise OSError(f"reading checkpoint sidecar for {path}: {e}") from e
    if meta.get("format_version") != CKPT_VERSION:
        raise CheckpointVersionError(f"{path}: sidecar format {meta.get('format_version')}")
    cfg, sel = resolve(meta["name"])
    if asdict(cfg) != {k: (tuple(v) if isinstance(v, list) else v) for k, v in meta["model"].items()}:
        raise CheckpointVersionError(f"{path}: stored model config differs from backbone {meta['name']}")
    model = VideoTransformer(cfg, sel, policy=meta.get("policy", "scorer"))
    assign_params(model, load_checkpoint(path), str(path))
    return model


def assign_params(model: VideoTransformer, arrays: Dict[str, np.ndarray], source: str = "") -> None:
    params = model.params
    if list(arrays) != list(params):
        raise CheckpointVersionError(f"{source}: parameter names do not match the model")
    for k, p in params.items():
        if arrays[k].shape != p.shape:
            raise CheckpointVersionError(f"{source}: {k} has shape {arrays[k].shape}, model wants {p.shape}")
        p.data[...] = arrays[k]


def checkpoint_meta(name: str, model: VideoTransformer) -> dict:
    m = asdict(model.cfg)
    m["downsample_after"] = list(m["downsample_after"])
    return {"format_version": CKPT_VERSION, "name": name, "policy": model.policy, "model": m}


# ---------------------------------------------------------------------------
# metrics


@dataclass
class MetricsRecord:
    step: int
    epoch: int
    loss: float
    accuracy: float
    sigma: float
    flops_estimate: int
    sel_precision: Optional[float]

    def to_line(self) -> str:
        return json.dumps(asdict(self)) + "\n"


def precision_recall(selected: np.ndarray, truth: Sequence[set]):
    """Mean fraction of selected items in the truth set, and of truth items selected."""
    prec, rec = [], []
    for row, gt in zip(selected, truth):
        s = set(int(v) for v in np.ravel(row))
        prec.append(len(s & gt) / len(s))
        rec.append(len(s & gt) / len(gt) if gt else 1.0)
    return float(np.mean(prec)), float(np.mean(rec))


def _temporal_truth(ds: SyntheticDataset, idx, cfg: ModelConfig) -> list:
    return [ground_truth_tokens(ds[int(i)], cfg)[0] for i in idx]


def temporal_selection_active(model: VideoTransformer) -> bool:
    t = model.selection.temporal
    return t is not None and keep_count(t.ratio, model.cfg.T) < model.cfg.T


def spatial_selection_active(model: VideoTransformer) -> bool:
    s = model.selection.spatial
    if s is None:
        return False
    side = model.cfg.side_at(s.layer)
    return s.anchor_side(side) < side


def spatial_precision(model: VideoTransformer, info: ForwardInfo, ds: SyntheticDataset, idx) -> tuple:
    """Fraction of winning anchors that overlap the signal region, over signal frames only."""
    anchors = info.anchor_grid
    hits = []
    for row, i in enumerate(idx):
        sample = ds[int(i)]
        _, gt = ground_truth_tokens(sample, model.cfg, anchors)
        frames = (info.temporal_indices[row] if info.temporal_indices is not None
                  else np.arange(model.cfg.T))
        signal = {f // model.cfg.cube_t for f in sample.signal_frames}
        for k, f in enumerate(frames):
            if int(f) in signal:
                hits.append(int(info.spatial_anchors[row, k]) in gt)
    return (float(np.mean(hits)) if hits else None), len(hits)


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainResult:
    checkpoint: Path
    records: List[MetricsRecord]
    model: VideoTransformer


def build_model(name: str, seed: int, policy: str = "scorer") -> VideoTransformer:
    cfg, sel = resolve(name)
    return VideoTransformer(cfg, sel, seed=seed, policy=policy)


def train(name: str, tcfg: TrainConfig, data, out_dir, policy: str = "scorer",
          progress: bool = False) -> TrainResult:
    """Train ``name`` on a dataset (path or :class:`SyntheticDataset`).

    Writes ``epoch{e}.ckpt`` each epoch, ``model.ckpt`` at the end, and
    ``metrics.jsonl`` with one record per logging interval.
    """
    ds = load_dataset(data) if not isinstance(data, SyntheticDataset) else data
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise OSError(f"creating output directory {out}: {e}") from e
    model = build_model(name, tcfg.seed, policy)
    params = model.params
    opt = AdamW(params, tcfg.betas, tcfg.weight_decay)
    n = len(ds)
    per_epoch = math.ceil(n / tcfg.batch_size)
    total = tcfg.epochs * per_epoch
    sched = sigma_schedule(tcfg.sigma0, total)
    flops = count_flops(model.cfg, model.selection).total
    meta = checkpoint_meta(name, model)
    shuffle = np.random.default_rng(np.random.SeedSequence([tcfg.seed, 2]))
    track_t = temporal_selection_active(model)
    records: List[MetricsRecord] = []
    metrics_path = out / "metrics.jsonl"
    step = 0
    with thread_limit(), open(metrics_path, "w") as mf:
        for epoch in range(tcfg.epochs):
            order = shuffle.permutation(n)
            for b in range(per_epoch):
                idx = order[b * tcfg.batch_size:(b + 1) * tcfg.batch_size]
                x, y = ds.clips[idx], ds.labels[idx]
                sigma = sched(step)
                pc = PerturbConfig(sigma, tcfg.mc_samples, step_seed(tcfg.seed, step))
                info = ForwardInfo()
                try:
                    with ad.Tape() as tape:
                        logits = model.forward(x, "smoothed", pc, info, policy_seed=pc.seed)
                        loss = ad.cross_entropy(logits, y)
                except ad.NumericError as e:
                    diag = {"step": step, "epoch": epoch, "error": f"non-finite values: {e}"}
                    mf.write(json.dumps(diag) + "\n")
                    raise TrainingDiverged(f"step {step}: {e}") from e
                opt.zero_grad()
                tape.backward(loss)
                opt.step(lr_at(step, total, tcfg.lr, tcfg.warmup_frac))
                if step % tcfg.log_every == 0 or step == total - 1:
                    acc = float((logits.data.argmax(axis=1) == y).mean())
                    prec = None
                    if track_t:
                        prec = precision_recall(info.temporal_indices,
                                                _temporal_truth(ds, idx, model.cfg))[0]
                    rec = MetricsRecord(step, epoch, float(loss.data), acc, float(sigma), flops, prec)
                    records.append(rec)
                    mf.write(rec.to_line())
                    mf.flush()
                    if progress:
                        log.info("step %d epoch %d loss %.4f acc %.3f sigma %.4f", step, epoch,
                                 rec.loss, acc, sigma)
                step += 1
            save_checkpoint(params, out / f"epoch{epoch}.ckpt", meta)
    final = out / "model.ckpt"
    save_checkpoint(params, final, meta)
    return TrainResult(final, records, model)


# ---------------------------------------------------------------------------
# evaluation


@dataclass
class EvalResult:
    accuracy: float
    temporal_precision: Optional[float]
    temporal_recall: Optional[float]
    spatial_precision: Optional[float]
    cost: CostReport
    predictions: np.ndarray

    @property
    def sel_precision(self) -> Optional[float]:
        return self.temporal_precision if self.temporal_precision is not None else self.spatial_precision

    def summary(self) -> dict:
        return {"accuracy": self.accuracy, "temporal_precision": self.temporal_precision,
                "temporal_recall": self.temporal_recall, "spatial_precision": self.spatial_precision,
                "flops": self.cost.total, "savings_fraction": self.cost.savings_fraction}


def evaluate(model, data, batch_size: int = 100, seed: int = 0) -> EvalResult:
    """Hard-selection evaluation. ``model`` may be a checkpoint path."""
    if not isinstance(model, VideoTransformer):
        model = load_model(model)
    ds = load_dataset(data) if not isinstance(data, SyntheticDataset) else data
    preds, t_sel, sp_hits = [], [], []
    t_on, s_on = temporal_selection_active(model), spatial_selection_active(model)
    with thread_limit():
        for start in range(0, len(ds), batch_size):
            idx = np.arange(start, min(start + batch_size, len(ds)))
            info = ForwardInfo()
            logits = model.forward(ds.clips[idx], "hard", info=info, policy_seed=step_seed(seed, start))
            preds.append(logits.data.argmax(axis=1))
            if t_on:
                t_sel.append(info.temporal_indices)
            if s_on:
                p, cnt = spatial_precision(model, info, ds, idx)
                if p is not None:
                    sp_hits.append((p * cnt, cnt))
    preds = np.concatenate(preds)
    acc = float((preds == ds.labels).mean())
    tp = tr = sp = None
    if t_on:
        tp, tr = precision_recall(np.concatenate(t_sel), _temporal_truth(ds, range(len(ds)), model.cfg))
    if s_on and sp_hits:
        sp = sum(h for h, _ in sp_hits) / sum(c for _, c in sp_hits)
    return EvalResult(acc, tp, tr, sp, count_flops(model.cfg, model.selection), preds)


def baseline_accuracy(model, data, seed: int = 0, repeats: int = 5) -> float:
    """Mean hard-mode accuracy of a random-policy model over ``repeats`` selection seeds."""
    return float(np.mean([evaluate(model, data, seed=seed + k).accuracy for k in range(repeats)]))


# ---------------------------------------------------------------------------
# sweeps

SWEEP_COLUMNS = ["name", "keep_ratio_t", "keep_ratio_s", "flops", "accuracy", "sel_precision",
                 "baseline_accuracy", "status"]


def sweep(backbone: str, grid: Sequence, tcfg: TrainConfig, train_data, test_data, out_dir,
          temporal_layer: int = 0, spatial_layer: int = 0, out_csv=None) -> List[dict]:
    """Train/evaluate one STTS model and one random-selection model per grid point.

    ``grid`` holds (temporal ratio or None, spatial ratio or None) pairs.
    Failed points are marked in the ``status`` column and the sweep goes on.
    """
    if not grid:
        raise ValueError("empty ratio grid")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    train_ds = load_dataset(train_data) if not isinstance(train_data, SyntheticDataset) else train_data
    test_ds = load_dataset(test_data) if not isinstance(test_data, SyntheticDataset) else test_data
    rows = []
    csv_path = Path(out_csv) if out_csv else out / "sweep.csv"
    with open(csv_path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=SWEEP_COLUMNS, lineterminator="\n")
        w.writeheader()
        for rt, rs in grid:
            name = selection_name(backbone, rt, rs, temporal_layer, spatial_layer)
            row = {"name": name, "keep_ratio_t": "" if rt is None else rt,
                   "keep_ratio_s": "" if rs is None else rs}
            try:
                cfg, sel = resolve(name)
                row["flops"] = count_flops(cfg, sel).total
                res = train(name, tcfg, train_ds, out / name / "stts")
                ev = evaluate(res.model, test_ds)
                row["accuracy"] = ev.accuracy
                row["sel_precision"] = "" if ev.sel_precision is None else ev.sel_precision
                if sel.active and count_flops(cfg, sel).savings_fraction > 0:
                    base = train(name, tcfg, train_ds, out / name / "random", policy="random")
                    row["baseline_accuracy"] = baseline_accuracy(base.model, test_ds, seed=tcfg.seed)
                else:
                    row["baseline_accuracy"] = ev.accuracy
                row["status"] = "ok"
            except Exception as e:  # continue-and-mark
                log.exception("sweep point %s failed", name)
                row["status"] = f"failed: {type(e).__name__}: {e}"
            w.writerow({k: row.get(k, "") for k in SWEEP_COLUMNS})
            f.flush()
            rows.append(row)
    return rows


def selection_name(backbone: str, rt, rs, temporal_layer: int = 0, spatial_layer: int = 0) -> str:
    name = backbone
    if rt is not None:
        name += f"-T{temporal_layer}_{float(rt)!r}"
    if rs is not None:
        name += f"-S{spatial_layer}_{float(rs)!r}"
    return name
