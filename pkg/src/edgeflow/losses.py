"""Training objectives: normalized focal loss, balanced BCE edge loss, auxiliary BCE.

All losses are differentiable tensor expressions. Ground-truth arrays enter
as constant (non-recorded) tensors; probabilities are clamped to
[eps, 1 - eps] before any log.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import tensor as T
from .clicks import extract_edge_mask
from .tensor import Tensor


@dataclass(frozen=True)
class LossWeights:
    w_mask: float = 1.0
    w_edge: float = 0.4
    w_aux: float = 0.4

    def __post_init__(self):
        if min(self.w_mask, self.w_edge, self.w_aux) < 0:
            raise ValueError("loss weights must be non-negative")


@dataclass(frozen=True)
class FocalParams:
    gamma: float = 2.0
    eps: float = 1e-7
    detach_normalizer: bool = False

    def __post_init__(self):
        if self.gamma < 0:
            raise ValueError("gamma must be >= 0")


def _check_binary(gt: np.ndarray, name: str) -> None:
    if not np.all((gt == 0.0) | (gt == 1.0)):
        raise ValueError(f"{name} must be binary (0/1)")


def _confidence(logits: Tensor, gt: np.ndarray, eps: float) -> Tensor:
    """Per-pixel confidence of the correct class: p where gt=1, else 1 - p."""
    p = T.sigmoid(logits)
    gt_t = Tensor(gt.astype(logits.dtype.type))
    pij = gt_t * p + (1.0 - gt_t) * (1.0 - p)
    return T.clip(pij, eps, 1.0 - eps)


def nfl_loss(logits: Tensor, gt: np.ndarray, params: FocalParams = FocalParams()) -> Tensor:
    """Normalized focal loss: sum of (1-p)^gamma * (-log p), divided by the
    sum of the focal weights. With gamma = 0 this reduces to mean BCE."""
    if logits.shape != gt.shape:
        raise T.ShapeError(f"logits shape {logits.shape} != gt shape {gt.shape}")
    _check_binary(gt, "gt")
    pij = _confidence(logits, gt, params.eps)
    w = (1.0 - pij) ** params.gamma
    weighted = T.tensor_sum(w * -T.log(pij))
    norm = T.tensor_sum(w)
    if params.detach_normalizer:
        norm = Tensor(norm.data.copy())
    return weighted / norm


def bce_loss(logits: Tensor, gt: np.ndarray, eps: float = 1e-7) -> Tensor:
    """Plain mean binary cross-entropy on sigmoid probabilities."""
    if logits.shape != gt.shape:
        raise T.ShapeError(f"logits shape {logits.shape} != gt shape {gt.shape}")
    _check_binary(gt, "gt")
    pij = _confidence(logits, gt, eps)
    return T.mean(-T.log(pij))


def balanced_bce(edge_logits: Tensor, gt_edge: np.ndarray, eps: float = 1e-7) -> Tensor:
    """BCE weighted by class imbalance: edge pixels get beta = background
    fraction, background gets 1 - beta. All-background targets fall back to
    unweighted BCE."""
    if edge_logits.shape != gt_edge.shape:
        raise T.ShapeError(f"logits shape {edge_logits.shape} != gt shape {gt_edge.shape}")
    _check_binary(gt_edge, "gt_edge")
    n_edge = float(gt_edge.sum())
    if n_edge == 0.0:
        return bce_loss(edge_logits, gt_edge, eps)
    beta = 1.0 - n_edge / gt_edge.size
    weights = np.where(gt_edge > 0.5, beta, 1.0 - beta).astype(edge_logits.dtype.type)
    pij = _confidence(edge_logits, gt_edge, eps)
    return T.mean(Tensor(weights) * -T.log(pij))


def total_loss(outputs, gt_mask: np.ndarray,
               weights: LossWeights = LossWeights(),
               params: FocalParams = FocalParams(),
               gt_edge: Optional[np.ndarray] = None) -> tuple[Tensor, dict]:
    """Weighted sum of mask NFL, edge balanced-BCE, and auxiliary BCE on the
    coarse output. Returns (scalar loss, per-term float breakdown).

    gt_edge defaults to the inner boundary of gt_mask; pass it explicitly to
    reuse a precomputed edge target.
    """
    if gt_edge is None:
        if gt_mask.ndim == 4:
            gt_edge = np.stack([extract_edge_mask(m[0])[None] for m in gt_mask])
        else:
            gt_edge = extract_edge_mask(gt_mask)
    mask_logits = outputs.refined_logits if outputs.refined_logits is not None else outputs.coarse_logits
    l_mask = nfl_loss(mask_logits, gt_mask, params)
    l_edge = balanced_bce(outputs.edge_logits, gt_edge)
    l_aux = bce_loss(outputs.coarse_logits, gt_mask)
    total = weights.w_mask * l_mask + weights.w_edge * l_edge + weights.w_aux * l_aux
    parts = {
        "loss_mask": l_mask.item(),
        "loss_edge": l_edge.item(),
        "loss_aux": l_aux.item(),
    }
    return total, parts
