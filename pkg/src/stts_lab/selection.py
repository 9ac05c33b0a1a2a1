"""Scorer networks plus temporal (frame) and spatial (anchor) token selection."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import autodiff as ad
from .autodiff import DimensionError, Tensor
from .topk import PerturbConfig, topk_indices, topk_select

MINMAX_EPS = 1e-6


@dataclass
class TokenGrid:
    """Batched spatial-temporal tokens: (B, T, N, C) plus optional (B, 1, C) class token."""

    tokens: Tensor
    class_token: Optional[Tensor] = None

    def __post_init__(self):
        if self.tokens.ndim != 4:
            raise DimensionError(f"TokenGrid tokens must be (B, T, N, C), got {self.tokens.shape}")

    @property
    def T(self) -> int:
        return self.tokens.shape[1]

    @property
    def N(self) -> int:
        return self.tokens.shape[2]

    @property
    def C(self) -> int:
        return self.tokens.shape[3]

    @property
    def side(self) -> int:
        h = math.isqrt(self.N)
        if h * h != self.N:
            raise DimensionError(f"spatial token count {self.N} is not a perfect square")
        return h


@dataclass
class ScorerParams:
    w1: Tensor  # (H, H/2)
    b1: Tensor
    w2: Tensor  # (H, H/2), input is [local, global]
    b2: Tensor
    w3: Tensor  # (H/2, 1)
    b3: Tensor
    activation: str = "gelu"

    @property
    def H(self) -> int:
        return self.w1.shape[0]

    @property
    def H_prime(self) -> int:
        return self.w1.shape[1]

    @classmethod
    def init(cls, H: int, rng: np.random.Generator, activation: str = "gelu") -> "ScorerParams":
        if H % 2:
            raise ValueError(f"scorer input width must be even, got {H}")
        h2 = H // 2

        def w(i, o):
            return Tensor(rng.normal(0, 1 / math.sqrt(i), (i, o)), requires_grad=True)

        def b(o):
            return Tensor(np.zeros(o), requires_grad=True)

        return cls(w(H, h2), b(h2), w(H, h2), b(h2), w(h2, 1), b(1), activation)

    def tensors(self) -> dict:
        return {"w1": self.w1, "b1": self.b1, "w2": self.w2, "b2": self.b2,
                "w3": self.w3, "b3": self.b3}


@dataclass
class SelectionScores:
    raw: Tensor  # (B, L)
    normalized: Tensor  # (B, L)
    local_feats: Tensor  # (B, L, H/2)
    global_feat: Tensor  # (B, 1, H/2)


def score_tokens(q: Tensor, params: ScorerParams) -> SelectionScores:
    """Score L tokens per batch row. q is (B, L, H) or a single (L, H) sequence."""
    single = q.ndim == 2
    if single:
        q = ad.reshape(q, (1,) + q.shape)
    B, L, H = q.shape
    if H % 2:
        raise ValueError(f"scorer input width must be even, got {H}")
    if H != params.H:
        raise DimensionError(f"scorer expects width {params.H}, got {H}")
    if L < 1:
        raise ValueError("need at least one token to score")
    local = ad.activation(ad.linear(q, params.w1, params.b1), params.activation)
    glob = ad.mean(local, axis=1, keepdims=True)
    feats = ad.concat([local, ad.expand(glob, 1, L)], axis=-1)
    hidden = ad.activation(ad.linear(feats, params.w2, params.b2), params.activation)
    raw = ad.reshape(ad.linear(hidden, params.w3, params.b3), (B, L))
    lo = ad.min_(raw, axis=1, keepdims=True)
    hi = ad.max_(raw, axis=1, keepdims=True)
    norm = ad.div(ad.sub(raw, lo), ad.add(ad.sub(hi, lo), Tensor(np.full((1, 1), MINMAX_EPS))))
    if single:
        return SelectionScores(ad.reshape(raw, (L,)), ad.reshape(norm, (L,)),
                               ad.reshape(local, (L, -1)), ad.reshape(glob, (1, -1)))
    return SelectionScores(raw, norm, local, glob)


def keep_count(ratio: float, total: int) -> int:
    if not 0 < ratio <= 1:
        raise ValueError(f"keep ratio must be in (0, 1], got {ratio}")
    k = int(math.floor(ratio * total + 0.5))
    return max(1, k)


def _selection_matrix(scores: Tensor, K: int, mode: str, cfg: PerturbConfig):
    """Returns (indicator (B, L, K) tensor, hard indices or None)."""
    if mode == "hard":
        return None, topk_indices(scores.data, K)
    return topk_select(scores, K, cfg, mode="smoothed"), None


def temporal_select(grid: TokenGrid, ratio: float, params: ScorerParams, mode: str,
                    cfg: Optional[PerturbConfig] = None, return_indices: bool = False):
    """Keep round(ratio*T) frames chosen by the scorer.

    Hard mode gathers the selected frames in their original order. Smoothed
    mode mixes frames with the perturbed indicator (Y^T x_flat) so the scorer
    receives gradients.
    """
    B, T, N, C = grid.tokens.shape
    K = keep_count(ratio, T)
    if K == T:
        return (grid, np.tile(np.arange(T), (B, 1))) if return_indices else grid
    frames = ad.max_(grid.tokens, axis=2)  # (B, T, C), class token excluded
    scores = score_tokens(frames, params).normalized
    Y, idx = _selection_matrix(scores, K, mode, cfg)
    if idx is not None:
        out = ad.gather(grid.tokens, idx)
    else:
        flat = ad.reshape(grid.tokens, (B, T, N * C))
        out = ad.reshape(ad.matmul(ad.transpose(Y), flat), (B, K, N, C))
        idx = topk_indices(scores.data, K)
    res = TokenGrid(out, grid.class_token)
    return (res, idx) if return_indices else res


@dataclass(frozen=True)
class AnchorGrid:
    H: int
    W: int
    P: int
    stride: int
    anchor_token_indices: np.ndarray  # (G, P*P)

    @property
    def count(self) -> int:
        return self.anchor_token_indices.shape[0]

    def corners(self) -> list:
        rows = (self.H - self.P) // self.stride + 1
        cols = (self.W - self.P) // self.stride + 1
        return [(r * self.stride, c * self.stride) for r in range(rows) for c in range(cols)]


def build_anchor_grid(H: int, W: int, P: int, s: int) -> AnchorGrid:
    if not (1 <= P <= H and P <= W):
        raise ValueError(f"anchor side P={P} must fit a {H}x{W} grid")
    if s < 1:
        raise ValueError(f"stride must be >= 1, got {s}")
    if (H - P) % s or (W - P) % s:
        raise ValueError(f"(H-P) and (W-P) must be divisible by stride {s}")
    block = (np.arange(P)[:, None] * W + np.arange(P)[None, :]).ravel()
    starts = [r * W + c
              for r in range(0, H - P + 1, s)
              for c in range(0, W - P + 1, s)]
    idx = np.array(starts, dtype=np.int64)[:, None] + block[None, :]
    return AnchorGrid(H, W, P, s, idx)


def spatial_select(grid: TokenGrid, anchors: AnchorGrid, params: ScorerParams, mode: str,
                   cfg: Optional[PerturbConfig] = None, return_indices: bool = False):
    """Keep the single best P x P anchor of every frame (Top-1 over anchors)."""
    B, T, N, C = grid.tokens.shape
    if N != anchors.H * anchors.W:
        raise DimensionError(f"frame has {N} tokens, anchor grid expects {anchors.H * anchors.W}")
    G, P2 = anchors.anchor_token_indices.shape
    if G == 1:
        idx = np.zeros((B, T), dtype=np.int64)
        if P2 == N:
            return (grid, idx) if return_indices else grid
        out = ad.take(grid.tokens, anchors.anchor_token_indices[0], axis=2)
        res = TokenGrid(out, grid.class_token)
        return (res, idx) if return_indices else res
    frames = ad.reshape(grid.tokens, (B * T, N, C))
    s = score_tokens(frames, params).normalized  # (BT, N)
    per_anchor = ad.reshape(ad.take(s, anchors.anchor_token_indices.ravel(), axis=1), (B * T, G, P2))
    anchor_scores = ad.max_(per_anchor, axis=2)  # (BT, G)
    # (BT, G, P2*C) candidate blocks
    cand = ad.reshape(ad.take(frames, anchors.anchor_token_indices.ravel(), axis=1), (B * T, G, P2 * C))
    if mode == "hard":
        win = topk_indices(anchor_scores.data, 1)  # (BT, 1)
        out = ad.gather(cand, win)
    else:
        Y = topk_select(anchor_scores, 1, cfg, mode="smoothed")  # (BT, G, 1)
        out = ad.matmul(ad.transpose(Y), cand)
        win = topk_indices(anchor_scores.data, 1)
    out = ad.reshape(out, (B, T, P2, C))
    res = TokenGrid(out, grid.class_token)
    return (res, win.reshape(B, T)) if return_indices else res
