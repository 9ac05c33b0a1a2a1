"""Procedural toy video classification data with known informative frames and region.

Each class is an oriented grating (orientation ``pi * label / classes``)
stamped into the signal region of every signal frame. Everything outside
the signal region of the signal frames is a flat grey background plus
Gaussian noise that does not depend on the label.
"""
from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Tuple

import numpy as np

from .config import ModelConfig
from .selection import AnchorGrid

MAGIC = b"STTSDAT1"
BACKGROUND = 0.5
AMPLITUDE = 0.4


@dataclass(frozen=True)
class GeneratorSpec:
    classes: int = 4
    samples: int = 1000
    D: int = 8
    Hpx: int = 24
    Wpx: int = 24
    signal_frame_count: int = 2
    region_size: int = 8
    noise_level: float = 0.1
    seed: int = 0
    cube_t: int = 2
    cube_p: int = 4

    def __post_init__(self):
        if self.classes < 2:
            raise ValueError("need at least two classes")
        if self.samples < 1:
            raise ValueError("need at least one sample")
        if self.region_size < 1 or self.region_size > min(self.Hpx, self.Wpx):
            raise ValueError(f"region {self.region_size} exceeds clip {self.Hpx}x{self.Wpx}")
        if self.region_size % self.cube_p or self.Hpx % self.cube_p or self.Wpx % self.cube_p:
            raise ValueError("region and frame sides must be multiples of cube_p")
        if self.D % self.cube_t:
            raise ValueError("frame count must be a multiple of cube_t")
        if not 1 <= self.signal_frame_count <= self.D // self.cube_t:
            raise ValueError("signal frames must land in distinct temporal cubes")
        if self.D > 64:
            raise ValueError("signal-frame bitmask holds at most 64 frames")
        if self.noise_level < 0:
            raise ValueError("noise_level must be non-negative")

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True) + "\n"


@dataclass
class SyntheticSample:
    clip: np.ndarray  # (D, Hpx, Wpx, 3) float32 in [0, 1]
    label: int
    signal_frames: Tuple[int, ...]
    signal_region: Tuple[int, int, int, int]  # row, col, height, width (pixels)
    noise_level: float


@dataclass
class SyntheticDataset:
    spec: GeneratorSpec
    clips: np.ndarray  # (S, D, H, W, 3) float32
    labels: np.ndarray  # (S,) int64
    frame_masks: np.ndarray  # (S,) uint64 bitmask of signal frames
    regions: np.ndarray  # (S, 4) uint16

    def __len__(self) -> int:
        return len(self.labels)

    def __getitem__(self, i: int) -> SyntheticSample:
        mask = int(self.frame_masks[i])
        frames = tuple(f for f in range(self.spec.D) if mask >> f & 1)
        return SyntheticSample(self.clips[i], int(self.labels[i]), frames,
                               tuple(int(v) for v in self.regions[i]), self.spec.noise_level)

    def subset(self, idx) -> "SyntheticDataset":
        return SyntheticDataset(self.spec, self.clips[idx], self.labels[idx],
                                self.frame_masks[idx], self.regions[idx])


def grating(index: int, count: int, size: int) -> np.ndarray:
    """Zero-mean sinusoidal grating, orientation pi*index/count, two cycles across."""
    theta = math.pi * index / count
    y, x = np.mgrid[0:size, 0:size].astype(np.float64) + 0.5
    phase = 2 * math.pi * 2.0 * (x * math.cos(theta) + y * math.sin(theta)) / size
    return AMPLITUDE * np.sin(phase)


def class_pattern(label: int, spec: GeneratorSpec) -> np.ndarray:
    """(region, region) grating for ``label``."""
    return grating(label, spec.classes, spec.region_size)


def make_sample(spec: GeneratorSpec, index: int, label: int) -> SyntheticSample:
    """Sample ``index`` of the stream; frames, region and noise ignore ``label``."""
    if not 0 <= label < spec.classes:
        raise ValueError(f"label {label} outside 0..{spec.classes - 1}")
    rng = np.random.default_rng(np.random.SeedSequence([spec.seed, 1, index]))
    T = spec.D // spec.cube_t
    groups = np.sort(rng.choice(T, size=spec.signal_frame_count, replace=False))
    offsets = rng.integers(0, spec.cube_t, size=spec.signal_frame_count)
    frames = tuple(int(g * spec.cube_t + o) for g, o in zip(groups, offsets))
    rows = (spec.Hpx - spec.region_size) // spec.cube_p + 1
    cols = (spec.Wpx - spec.region_size) // spec.cube_p + 1
    r0 = int(rng.integers(0, rows)) * spec.cube_p
    c0 = int(rng.integers(0, cols)) * spec.cube_p
    noise = rng.standard_normal((spec.D, spec.Hpx, spec.Wpx, 1)) * spec.noise_level
    clip = np.full((spec.D, spec.Hpx, spec.Wpx, 1), BACKGROUND) + noise
    pat = class_pattern(label, spec)
    rs = spec.region_size
    for f in frames:
        clip[f, r0:r0 + rs, c0:c0 + rs, 0] += pat
    clip = np.clip(np.repeat(clip, 3, axis=-1), 0.0, 1.0).astype(np.float32)
    return SyntheticSample(clip, label, frames, (r0, c0, rs, rs), spec.noise_level)


def generate(spec: GeneratorSpec) -> SyntheticDataset:
    labels = np.random.default_rng(np.random.SeedSequence([spec.seed, 0])).integers(
        0, spec.classes, size=spec.samples)
    clips = np.empty((spec.samples, spec.D, spec.Hpx, spec.Wpx, 3), dtype=np.float32)
    masks = np.zeros(spec.samples, dtype=np.uint64)
    regions = np.zeros((spec.samples, 4), dtype=np.uint16)
    for i, lab in enumerate(labels):
        s = make_sample(spec, i, int(lab))
        clips[i] = s.clip
        masks[i] = sum(1 << f for f in s.signal_frames)
        regions[i] = s.signal_region
    return SyntheticDataset(spec, clips, labels.astype(np.int64), masks, regions)


# ---------------------------------------------------------------------------
# ground truth


def region_tokens(region, cfg: ModelConfig, side: Optional[int] = None) -> set:
    """Flat token indices (on a side x side grid) touched by a pixel region."""
    r0, c0, h, w = region
    side = cfg.side if side is None else side
    px = cfg.Hpx // side  # pixels per token at this resolution
    if r0 % cfg.cube_p or c0 % cfg.cube_p or h % cfg.cube_p or w % cfg.cube_p:
        raise ValueError(f"region {region} not aligned to {cfg.cube_p}-pixel cubes")
    rows = range(r0 // px, (r0 + h - 1) // px + 1)
    cols = range(c0 // px, (c0 + w - 1) // px + 1)
    return {r * side + c for r in rows for c in cols}


def ground_truth_tokens(sample: SyntheticSample, cfg: ModelConfig,
                        anchors: Optional[AnchorGrid] = None):
    """(temporal token set, anchor index set overlapping the signal region)."""
    frames = {f // cfg.cube_t for f in sample.signal_frames}
    if anchors is None:
        return frames, None
    toks = region_tokens(sample.signal_region, cfg, anchors.H)
    hit = {g for g, block in enumerate(anchors.anchor_token_indices) if toks & set(block.tolist())}
    return frames, hit


# ---------------------------------------------------------------------------
# serialization


def save_dataset(ds: SyntheticDataset, path) -> None:
    path = Path(path)
    S, D, H, W, ch = ds.clips.shape
    try:
        with open(path, "wb") as f:
            f.write(MAGIC)
            f.write(struct.pack("<6I", S, D, H, W, ch, ds.spec.classes))
            for i in range(S):
                f.write(struct.pack("<IQ4H", int(ds.labels[i]), int(ds.frame_masks[i]),
                                    *(int(v) for v in ds.regions[i])))
                f.write(np.ascontiguousarray(ds.clips[i], dtype="<f4").tobytes())
        Path(str(path) + ".json").write_text(ds.spec.to_json())
    except OSError as e:
        raise OSError(f"writing dataset {path}: {e}") from e


def load_dataset(path) -> SyntheticDataset:
    path = Path(path)
    try:
        raw = path.read_bytes()
        spec_text = Path(str(path) + ".json").read_text()
    except OSError as e:
        raise OSError(f"reading dataset {path}: {e}") from e
    if raw[:8] != MAGIC:
        raise ValueError(f"{path}: not an STTSDAT1 file")
    S, D, H, W, ch, classes = struct.unpack_from("<6I", raw, 8)
    spec = GeneratorSpec(**json.loads(spec_text))
    off = 8 + 24
    rec = struct.calcsize("<IQ4H")
    n = D * H * W * ch
    clips = np.empty((S, D, H, W, ch), dtype=np.float32)
    labels = np.empty(S, dtype=np.int64)
    masks = np.empty(S, dtype=np.uint64)
    regions = np.empty((S, 4), dtype=np.uint16)
    for i in range(S):
        lab, mask, *reg = struct.unpack_from("<IQ4H", raw, off)
        off += rec
        labels[i], masks[i], regions[i] = lab, mask, reg
        clips[i] = np.frombuffer(raw, dtype="<f4", count=n, offset=off).reshape(D, H, W, ch)
        off += 4 * n
    if off != len(raw):
        raise ValueError(f"{path}: {len(raw) - off} trailing bytes")
    if classes != spec.classes:
        raise ValueError(f"{path}: header says {classes} classes, sidecar {spec.classes}")
    return SyntheticDataset(spec, clips, labels, masks, regions)
