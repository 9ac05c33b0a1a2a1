"""Spatial-temporal token selection for toy video transformers, on numpy."""

from .config import ModelConfig, SelectionConfig, TrainConfig, parse_selection, render_selection, resolve
from .costmodel import CostReport, count_flops
from .model import VideoTransformer
from .synthgen import GeneratorSpec, generate, load_dataset, save_dataset
from .topk import PerturbConfig, SigmaSchedule, hard_topk, soft_topk_forward, soft_topk_vjp

__all__ = [
    "CostReport", "GeneratorSpec", "ModelConfig", "PerturbConfig", "SelectionConfig", "SigmaSchedule",
    "TrainConfig", "VideoTransformer", "count_flops", "generate", "hard_topk", "load_dataset",
    "parse_selection", "render_selection", "resolve", "save_dataset", "soft_topk_forward",
    "soft_topk_vjp",
]
