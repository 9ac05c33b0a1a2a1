"""Hard and perturbation-smoothed Top-K selection.

The smoothed operator averages sorted hard Top-K one-hot matrices over
Gaussian perturbations of the scores; its gradient is the matching
Monte-Carlo estimator (perturbed-maximum Jacobian with normal noise),
evaluated as a vector-Jacobian product on the same noise draws.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .autodiff import DimensionError, Tensor, custom_grad_node


class ModeError(ValueError):
    pass


@dataclass(frozen=True)
class PerturbConfig:
    sigma: float
    n_samples: int = 500
    seed: int = 0

    def __post_init__(self):
        if not self.sigma >= 0:
            raise ValueError(f"sigma must be >= 0, got {self.sigma}")
        if self.n_samples < 1:
            raise ValueError(f"n_samples must be >= 1, got {self.n_samples}")


@dataclass(frozen=True)
class SigmaSchedule:
    sigma0: float
    total_steps: int

    def __call__(self, step: int) -> float:
        return sigma_at(self, step)


def sigma_at(schedule: SigmaSchedule, step: int) -> float:
    if schedule.total_steps <= 0:
        raise ValueError("total_steps must be positive")
    if step < 0:
        raise ValueError("step must be >= 0")
    return schedule.sigma0 * max(0.0, 1.0 - step / schedule.total_steps)


@dataclass
class TopKIndicator:
    L: int
    K: int
    mode: str  # "hard" | "smoothed"
    matrix: np.ndarray  # (L, K)
    indices: Optional[np.ndarray] = None  # (K,), hard mode only


def _check_k(L: int, K: int) -> None:
    if not 1 <= K <= L:
        raise ValueError(f"need 1 <= K <= L, got K={K}, L={L}")


def topk_indices(scores: np.ndarray, K: int) -> np.ndarray:
    """Sorted Top-K positions along the last axis; ties go to the lower index.

    Works on any leading batch shape: (..., L) -> (..., K).
    """
    scores = np.asarray(scores)
    _check_k(scores.shape[-1], K)
    # stable sort of the negated scores keeps lower indices first among ties
    order = np.argsort(-scores, axis=-1, kind="stable")[..., :K]
    return np.sort(order, axis=-1)


def onehot_columns(indices: np.ndarray, L: int) -> np.ndarray:
    """(..., K) sorted indices -> (..., L, K) one-hot columns."""
    idx = np.asarray(indices)
    eye = np.eye(L, dtype=np.float64)
    return np.swapaxes(eye[idx], -1, -2)


def hard_topk(scores, K: int) -> TopKIndicator:
    s = np.asarray(scores, dtype=np.float64)
    if s.ndim != 1:
        raise DimensionError(f"hard_topk expects a score vector, got shape {s.shape}")
    if not np.isfinite(s).all():
        raise ValueError("hard_topk: non-finite scores")
    L = s.shape[0]
    idx = topk_indices(s, K)
    return TopKIndicator(L, K, "hard", onehot_columns(idx, L), idx)


def to_onehot(indicator: TopKIndicator) -> np.ndarray:
    if indicator.mode != "hard":
        raise ModeError("to_onehot needs a hard indicator")
    return onehot_columns(indicator.indices, indicator.L)


def perturbation_noise(cfg: PerturbConfig, shape: tuple) -> np.ndarray:
    """Standard-normal draws for one forward/backward call pair."""
    rng = np.random.default_rng(cfg.seed)
    return rng.standard_normal((cfg.n_samples,) + tuple(shape))


def _perturbed_indices(scores: np.ndarray, K: int, sigma: float, noise: np.ndarray) -> np.ndarray:
    # noise: (n, ..., L); result (n, ..., K)
    return topk_indices(scores[None] + sigma * noise, K)


def soft_topk_forward(scores, K: int, cfg: PerturbConfig) -> TopKIndicator:
    s = np.asarray(scores, dtype=np.float64)
    if s.ndim != 1:
        raise DimensionError(f"soft_topk_forward expects a score vector, got shape {s.shape}")
    L = s.shape[0]
    _check_k(L, K)
    if cfg.sigma == 0:
        hard = hard_topk(s, K)
        return TopKIndicator(L, K, "smoothed", hard.matrix)
    noise = perturbation_noise(cfg, (L,))
    return TopKIndicator(L, K, "smoothed", _smoothed_matrix(s, K, cfg.sigma, noise))


def _smoothed_matrix(s: np.ndarray, K: int, sigma: float, noise: np.ndarray) -> np.ndarray:
    idx = _perturbed_indices(s, K, sigma, noise)  # (n, ..., K)
    L = s.shape[-1]
    n = noise.shape[0]
    flat_idx = idx.reshape(n, -1, K)
    nb = flat_idx.shape[1]
    b = np.arange(nb)[None, :, None]
    k = np.arange(K)[None, None, :]
    # flat position of (batch, row, column) in the (B, L, K) count array
    cells = ((b * L + flat_idx) * K + k).ravel()
    counts = np.bincount(cells, minlength=nb * L * K).astype(np.float64)
    return (counts / n).reshape(s.shape[:-1] + (L, K))


def _vjp(s: np.ndarray, K: int, sigma: float, noise: np.ndarray, upstream: np.ndarray) -> np.ndarray:
    if sigma == 0:
        return np.zeros_like(s)
    idx = _perturbed_indices(s, K, sigma, noise)  # (n, ..., K)
    n = noise.shape[0]
    # <upstream, onehot(idx_i)>_F = sum_k upstream[idx_ik, k]
    up = np.broadcast_to(upstream, (n,) + upstream.shape)
    picked = np.take_along_axis(up, idx[..., None, :], axis=-2)[..., 0, :]
    weight = picked.sum(axis=-1)  # (n, ...)
    return (weight[..., None] * noise).sum(axis=0) / (n * sigma)


def soft_topk_vjp(scores, K: int, cfg: PerturbConfig, upstream) -> np.ndarray:
    s = np.asarray(scores, dtype=np.float64)
    L = s.shape[-1]
    _check_k(L, K)
    up = np.asarray(upstream, dtype=np.float64)
    if up.shape != (L, K):
        raise DimensionError(f"upstream must be ({L}, {K}), got {up.shape}")
    if cfg.sigma == 0:
        return np.zeros(L)
    return _vjp(s, K, cfg.sigma, perturbation_noise(cfg, (L,)), up)


def topk_select(scores: Tensor, K: int, cfg: PerturbConfig, mode: str = "smoothed") -> Tensor:
    """Batched Top-K indicator as a tape node: scores (B, L) -> (B, L, K).

    Hard mode is constant (no gradient). Smoothed mode draws one noise block
    of shape (n, B, L) and reuses it for the backward pass.
    """
    s = scores.data.astype(np.float64)
    if s.ndim != 2:
        raise DimensionError(f"topk_select expects (batch, L) scores, got {scores.shape}")
    L = s.shape[1]
    _check_k(L, K)
    if mode == "hard" or cfg.sigma == 0:
        return Tensor(onehot_columns(topk_indices(s, K), L))
    if mode != "smoothed":
        raise ModeError(f"unknown selection mode {mode!r}")
    noise = perturbation_noise(cfg, s.shape)
    value = _smoothed_matrix(s, K, cfg.sigma, noise)

    def backward(g):
        return (_vjp(s, K, cfg.sigma, noise, g.astype(np.float64)),)

    return custom_grad_node((scores,), value, backward, kind="perturbed_topk")
