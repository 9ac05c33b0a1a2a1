"""A small video transformer with pluggable temporal/spatial token selection."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Dict, Optional

import numpy as np

from . import autodiff as ad
from .autodiff import DimensionError, Tensor
from .baselines import batch_select
from .config import ModelConfig, SelectionConfig
from .selection import (
    ScorerParams,
    TokenGrid,
    build_anchor_grid,
    keep_count,
    spatial_select,
    temporal_select,
)
from .topk import PerturbConfig


def _param(rng, shape, scale) -> Tensor:
    return Tensor(rng.normal(0.0, scale, shape), requires_grad=True)


def _zeros(shape) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=True)


def _ones(shape) -> Tensor:
    return Tensor(np.ones(shape), requires_grad=True)


def cubes(clips: np.ndarray, cfg: ModelConfig) -> np.ndarray:
    """(B, D, H, W, 3) pixels -> (B, T, N, cube_volume) flattened 3D tubes."""
    clips = np.asarray(clips, dtype=np.float32)
    if clips.ndim == 4:
        clips = clips[None]
    B, D, Hp, Wp, ch = clips.shape
    ct, cp = cfg.cube_t, cfg.cube_p
    if D % ct or Hp % cp or Wp % cp:
        raise ValueError(f"clip {clips.shape[1:]} not divisible by cube ({ct}, {cp}, {cp})")
    T, h, w = D // ct, Hp // cp, Wp // cp
    x = clips.reshape(B, T, ct, h, cp, w, cp, ch).transpose(0, 1, 3, 5, 2, 4, 6, 7)
    return x.reshape(B, T, h * w, ct * cp * cp * ch)


def self_attention(x: Tensor, wqkv: Tensor, bqkv: Tensor, wo: Tensor, bo: Tensor,
                   heads: int, return_weights: bool = False):
    """Multi-head softmax(QK^T / sqrt(d)) V over x (B, L, C)."""
    B, L, C = x.shape
    if wqkv.shape != (C, 3 * C):
        raise DimensionError(f"qkv projection {wqkv.shape} does not match width {C}")
    d = C // heads
    qkv = ad.linear(x, wqkv, bqkv)
    qkv = ad.transpose(ad.reshape(qkv, (B, L, 3, heads, d)), (2, 0, 3, 1, 4))  # (3, B, h, L, d)
    q, k, v = (ad.reshape(ad.narrow(qkv, i, i + 1, axis=0), (B, heads, L, d)) for i in range(3))
    att = ad.softmax_rows(ad.scale(ad.matmul(q, ad.transpose(k)), 1.0 / math.sqrt(d)))
    out = ad.matmul(att, v)  # (B, h, L, d)
    out = ad.reshape(ad.transpose(out, (0, 2, 1, 3)), (B, L, C))
    out = ad.linear(out, wo, bo)
    return (out, att) if return_weights else out


@dataclass
class Block:
    ln1_g: Tensor
    ln1_b: Tensor
    wqkv: Tensor
    bqkv: Tensor
    wo: Tensor
    bo: Tensor
    ln2_g: Tensor
    ln2_b: Tensor
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor

    @classmethod
    def init(cls, C: int, ff_mult: int, rng) -> "Block":
        s = 1.0 / math.sqrt(C)
        F = ff_mult * C
        return cls(_ones(C), _zeros(C), _param(rng, (C, 3 * C), s), _zeros(3 * C),
                   _param(rng, (C, C), s), _zeros(C), _ones(C), _zeros(C),
                   _param(rng, (C, F), s), _zeros(F), _param(rng, (F, C), 1.0 / math.sqrt(F)), _zeros(C))

    def tensors(self) -> Dict[str, Tensor]:
        return dict(vars(self))


def attention_block(x: Tensor, blk: Block, heads: int, activation: str = "gelu") -> Tensor:
    """Pre-norm transformer block: x + MHSA(LN(x)), then x + FFN(LN(x))."""
    if x.shape[-1] != blk.ln1_g.shape[0]:
        raise DimensionError(f"block width {blk.ln1_g.shape[0]} vs tokens {x.shape}")
    h = ad.layer_norm(x, blk.ln1_g, blk.ln1_b)
    x = ad.add(x, self_attention(h, blk.wqkv, blk.bqkv, blk.wo, blk.bo, heads))
    h = ad.layer_norm(x, blk.ln2_g, blk.ln2_b)
    h = ad.linear(ad.activation(ad.linear(h, blk.w1, blk.b1), activation), blk.w2, blk.b2)
    return ad.add(x, h)


def stage_downsample(grid: TokenGrid, w: Tensor, b: Tensor) -> TokenGrid:
    """2x2 average-pool the token grid, then project channels C -> 2C."""
    B, T, N, C = grid.tokens.shape
    side = grid.side
    if side % 2:
        raise ValueError(f"cannot 2x2-pool an odd {side}x{side} token grid")
    h = side // 2
    x = ad.reshape(grid.tokens, (B, T, h, 2, h, 2, C))
    x = ad.mean(ad.mean(x, axis=5), axis=3)  # (B, T, h, h, C)
    x = ad.linear(ad.reshape(x, (B, T, h * h, C)), w, b)
    cls = None if grid.class_token is None else ad.linear(grid.class_token, w, b)
    return TokenGrid(x, cls)


@dataclass
class ForwardInfo:
    temporal_indices: Optional[np.ndarray] = None  # (B, K) frames kept
    spatial_anchors: Optional[np.ndarray] = None  # (B, K) winning anchor per kept frame
    anchor_grid: Optional[object] = None
    tokens_per_block: list = field(default_factory=list)


def _sub_seed(seed: int, tag: int) -> int:
    return int(np.random.SeedSequence([int(seed), tag]).generate_state(1)[0])


class VideoTransformer:
    """Tokenizer -> [selection] -> blocks -> class-token head.

    Selection modules run *before* the block index they are attached to.
    ``policy`` picks who chooses the kept frames/anchors: the learned
    scorers, or a score-free ``random`` / ``uniform`` baseline.
    Parameters live in ``self.params`` (ordered name -> Tensor).
    """

    def __init__(self, cfg: ModelConfig, selection: Optional[SelectionConfig] = None, seed: int = 0,
                 policy: str = "scorer"):
        if policy not in ("scorer", "random", "uniform"):
            raise ValueError(f"unknown selection policy {policy!r}")
        self.cfg = cfg
        self.policy = policy
        self.selection = selection or SelectionConfig()
        self.selection.validate_for(cfg)
        rng = np.random.default_rng(seed)
        C = cfg.C
        self.embed_w = _param(rng, (cfg.cube_volume, C), 1.0 / math.sqrt(cfg.cube_volume))
        self.embed_b = _zeros(C)
        self.pos = _param(rng, (1, cfg.T, cfg.N, C), 0.02)
        self.cls = _param(rng, (1, 1, C), 0.02)
        self.blocks = []
        self.downsamples = {}
        for i in range(cfg.depth):
            width = cfg.width_at(i)
            self.blocks.append(Block.init(width, cfg.ff_mult, rng))
            if i in cfg.downsample_after:
                self.downsamples[i] = (_param(rng, (width, 2 * width), 1.0 / math.sqrt(width)),
                                       _zeros(2 * width))
        out_w = cfg.width_at(cfg.depth)
        self.norm_g, self.norm_b = _ones(out_w), _zeros(out_w)
        self.head_w = _param(rng, (out_w, cfg.classes), 1.0 / math.sqrt(out_w))
        self.head_b = _zeros(cfg.classes)
        self.temporal_scorer = self.spatial_scorer = None
        if self.selection.temporal and policy == "scorer":
            self.temporal_scorer = ScorerParams.init(cfg.width_at(self.selection.temporal.layer), rng)
        if self.selection.spatial and policy == "scorer":
            self.spatial_scorer = ScorerParams.init(cfg.width_at(self.selection.spatial.layer), rng)

    @property
    def params(self) -> Dict[str, Tensor]:
        p = {"embed.w": self.embed_w, "embed.b": self.embed_b, "pos": self.pos, "cls": self.cls}
        for i, blk in enumerate(self.blocks):
            for k, v in blk.tensors().items():
                p[f"blocks.{i}.{k}"] = v
            if i in self.downsamples:
                p[f"down.{i}.w"], p[f"down.{i}.b"] = self.downsamples[i]
        p["norm.g"], p["norm.b"] = self.norm_g, self.norm_b
        p["head.w"], p["head.b"] = self.head_w, self.head_b
        for tag, sc in (("temporal", self.temporal_scorer), ("spatial", self.spatial_scorer)):
            if sc is not None:
                for k, v in sc.tensors().items():
                    p[f"scorer.{tag}.{k}"] = v
        return p

    def tokenize(self, clips) -> TokenGrid:
        x = cubes(clips, self.cfg)
        B = x.shape[0]
        tokens = ad.add(ad.linear(Tensor(x), self.embed_w, self.embed_b), self.pos)
        return TokenGrid(tokens, ad.expand(self.cls, 0, B))

    def _baseline_temporal(self, grid: TokenGrid, ratio: float, seed: int):
        B, T = grid.tokens.shape[:2]
        K = keep_count(ratio, T)
        if K == T:
            return grid, np.tile(np.arange(T), (B, 1))
        idx = batch_select(self.policy, T, K, B, _sub_seed(seed, 0))
        return TokenGrid(ad.gather(grid.tokens, idx), grid.class_token), idx

    def _baseline_spatial(self, grid: TokenGrid, anchors, seed: int):
        B, T, N, C = grid.tokens.shape
        G, P2 = anchors.anchor_token_indices.shape
        if self.policy == "uniform":
            win = np.full((B * T, 1), G // 2, dtype=np.int64)
        else:
            rng = np.random.default_rng(_sub_seed(seed, 1))
            win = rng.integers(0, G, size=(B * T, 1))
        frames = ad.reshape(grid.tokens, (B * T, N, C))
        cand = ad.reshape(ad.take(frames, anchors.anchor_token_indices.ravel(), axis=1), (B * T, G, P2 * C))
        out = ad.reshape(ad.gather(cand, win), (B, T, P2, C))
        return TokenGrid(out, grid.class_token), win.reshape(B, T)

    def forward(self, clips, mode: str = "hard", perturb: Optional[PerturbConfig] = None,
                info: Optional[ForwardInfo] = None, policy_seed: int = 0) -> Tensor:
        """Logits (B, classes). ``perturb`` is required for smoothed scorer selection.

        ``policy_seed`` drives the random baseline policy only.
        """
        if mode not in ("hard", "smoothed"):
            raise ValueError(f"unknown selection mode {mode!r}")
        if mode == "smoothed" and perturb is None and self.policy == "scorer":
            raise ValueError("smoothed mode needs a PerturbConfig")
        cfg, sel = self.cfg, self.selection
        grid = self.tokenize(clips)
        for i, blk in enumerate(self.blocks):
            if sel.temporal and sel.temporal.layer == i:
                pc = None if perturb is None else PerturbConfig(perturb.sigma, perturb.n_samples,
                                                                _sub_seed(perturb.seed, 0))
                if self.policy == "scorer":
                    grid, idx = temporal_select(grid, sel.temporal.ratio, self.temporal_scorer, mode, pc,
                                                return_indices=True)
                else:
                    grid, idx = self._baseline_temporal(grid, sel.temporal.ratio, policy_seed)
                if info is not None:
                    info.temporal_indices = idx
            if sel.spatial and sel.spatial.layer == i:
                side = grid.side
                anchors = build_anchor_grid(side, side, sel.spatial.anchor_side(side), sel.spatial.stride)
                pc = None if perturb is None else PerturbConfig(perturb.sigma, perturb.n_samples,
                                                                _sub_seed(perturb.seed, 1))
                if self.policy == "scorer" or anchors.count == 1:
                    grid, win = spatial_select(grid, anchors, self.spatial_scorer, mode, pc,
                                               return_indices=True)
                else:
                    grid, win = self._baseline_spatial(grid, anchors, policy_seed)
                if info is not None:
                    info.spatial_anchors, info.anchor_grid = win, anchors
            B, T, N, C = grid.tokens.shape
            seq = ad.concat([grid.class_token, ad.reshape(grid.tokens, (B, T * N, C))], axis=1)
            if info is not None:
                info.tokens_per_block.append(T * N + 1)
            seq = attention_block(seq, blk, cfg.heads, cfg.activation)
            cls = ad.narrow(seq, 0, 1, axis=1)
            tokens = ad.reshape(ad.narrow(seq, 1, T * N + 1, axis=1), (B, T, N, C))
            grid = TokenGrid(tokens, cls)
            if i in self.downsamples:
                grid = stage_downsample(grid, *self.downsamples[i])
        cls = ad.reshape(grid.class_token, (grid.tokens.shape[0], -1))
        cls = ad.layer_norm(cls, self.norm_g, self.norm_b)
        return ad.linear(cls, self.head_w, self.head_b)

    __call__ = forward
