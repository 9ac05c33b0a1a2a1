"""Analytic FLOPs accounting for :class:`~stts_lab.model.VideoTransformer`.

Conventions: one multiply-accumulate is 2 FLOPs; softmax, layer-norm and
activation cost ``ELEMENTWISE_FLOPS`` per element; max-pooling costs one
FLOP per element pooled; sorting, RNG, gathers and residual adds are free.

Costs inside a transformer block are split into patch-token terms (which
scale with the number of patch tokens) and a ``class_token`` term holding
everything the class token adds on top, so the scaling laws of the patch
terms are exact.
"""
from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

from .config import ModelConfig, SelectionConfig, SpatialSel, TemporalSel, render_selection
from .selection import keep_count

ELEMENTWISE_FLOPS = 5
MAC = 2


@dataclass
class BlockCost:
    name: str
    tokens: int  # tokens entering, class token included
    flops: int
    terms: Dict[str, int] = field(default_factory=dict)


@dataclass
class CostReport:
    per_block: List[BlockCost]
    scorer_flops: int
    total: int
    baseline_total: int
    savings_fraction: float
    training_topk_flops: int = 0

    def block(self, name: str) -> BlockCost:
        for b in self.per_block:
            if b.name == name:
                return b
        raise KeyError(name)

    def to_text(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True) + "\n"

    @property
    def gflops(self) -> float:
        return self.total / 1e9


def _scorer_cost(rows: int, H: int) -> int:
    """Scorer MLPs over ``rows`` tokens of width H, plus min-max normalisation."""
    h2 = H // 2
    net1 = rows * (MAC * H * h2 + ELEMENTWISE_FLOPS * h2)
    net2 = rows * (MAC * H * h2 + ELEMENTWISE_FLOPS * h2 + MAC * h2)
    return net1 + net2 + ELEMENTWISE_FLOPS * rows


def block_terms(n: int, C: int, heads: int, ff_mult: int) -> Dict[str, int]:
    """Cost terms of one pre-norm block over ``n`` patch tokens plus one class token."""
    F = ff_mult * C
    per_token_affine = MAC * (C * 3 * C + C * C + C * F + F * C)
    per_token_eltwise = ELEMENTWISE_FLOPS * (2 * C + F)
    pair_matmul = 2 * MAC * C  # QK^T and AV, summed over heads, per (query, key) pair
    pair_softmax = ELEMENTWISE_FLOPS * heads
    cross_pairs = (n + 1) ** 2 - n ** 2
    return {
        "affine": n * per_token_affine,
        "norm_act": n * per_token_eltwise,
        "attn_scores": n * n * pair_matmul,
        "softmax": n * n * pair_softmax,
        "class_token": per_token_affine + per_token_eltwise + cross_pairs * (pair_matmul + pair_softmax),
    }


def _flops(cfg: ModelConfig, sel: SelectionConfig, mc_samples: int = 0):
    blocks: List[BlockCost] = []
    scorer = 0
    topk_train = 0
    T, N, C = cfg.T, cfg.N, cfg.C
    side = cfg.side
    blocks.append(BlockCost("embed", T * N, T * N * MAC * cfg.cube_volume * C))
    for i in range(cfg.depth):
        C = cfg.width_at(i)
        if sel.temporal is not None and sel.temporal.layer == i:
            K = keep_count(sel.temporal.ratio, T)
            if K < T:
                scorer += T * N * C + _scorer_cost(T, C)
                topk_train += mc_samples * T * (1 + K)
                T = K
        if sel.spatial is not None and sel.spatial.layer == i:
            P = sel.spatial.anchor_side(side)
            G = ((side - P) // sel.spatial.stride + 1) ** 2
            if G > 1:
                scorer += T * (_scorer_cost(N, C) + G * P * P)
                topk_train += T * mc_samples * G * 2
            N, side = P * P, P
        n = T * N
        terms = block_terms(n, C, cfg.heads, cfg.ff_mult)
        blocks.append(BlockCost(f"block{i}", n + 1, sum(terms.values()), terms))
        if i in cfg.downsample_after:
            if side % 2:
                raise ValueError(f"cannot downsample an odd {side}x{side} grid after block {i}")
            side //= 2
            N = side * side
            n = T * N
            terms = {"pool": n * C * 4, "affine": n * MAC * C * 2 * C, "class_token": MAC * C * 2 * C}
            blocks.append(BlockCost(f"down{i}", n + 1, sum(terms.values()), terms))
    C = cfg.width_at(cfg.depth)
    blocks.append(BlockCost("head", 1, ELEMENTWISE_FLOPS * C + MAC * C * cfg.classes))
    return blocks, scorer, topk_train


def count_flops(cfg: ModelConfig, sel: Optional[SelectionConfig] = None,
                mc_samples: int = 0) -> CostReport:
    sel = sel or SelectionConfig()
    sel.validate_for(cfg)
    blocks, scorer, topk_train = _flops(cfg, sel, mc_samples)
    total = sum(b.flops for b in blocks) + scorer
    base_blocks, _, _ = _flops(cfg, SelectionConfig())
    baseline = sum(b.flops for b in base_blocks)
    return CostReport(blocks, scorer, total, baseline, 1.0 - total / baseline, topk_train)


def sweep_cost(cfg: ModelConfig, grid: Sequence[Tuple[Optional[float], Optional[float]]],
               temporal_layer: int = 0, spatial_layer: int = 0,
               backbone: str = "tiny") -> List[Tuple[str, SelectionConfig, CostReport]]:
    """One report per (temporal ratio, spatial ratio) grid point, in order.

    A ``None`` ratio leaves that selection out.
    """
    if not grid:
        raise ValueError("empty ratio grid")
    out = []
    for rt, rs in grid:
        for r in (rt, rs):
            if r is not None and not 0 < r <= 1:
                raise ValueError(f"ratio {r} not in (0, 1]")
        sel = SelectionConfig(None if rt is None else TemporalSel(temporal_layer, rt),
                              None if rs is None else SpatialSel(spatial_layer, rs))
        out.append((render_selection(backbone, sel), sel, count_flops(cfg, sel)))
    return out


def reports_to_csv(rows: Sequence[Tuple[str, SelectionConfig, CostReport]]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["name", "total_flops", "baseline_flops", "scorer_flops", "savings_fraction"])
    for name, _, rep in rows:
        w.writerow([name, rep.total, rep.baseline_total, rep.scorer_flops, f"{rep.savings_fraction:.6f}"])
    return buf.getvalue()
