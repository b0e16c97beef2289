"""Loss functions and the gradient reversal operation.

Every loss takes batched ``torch`` tensors and returns a scalar tensor, so the
same functions serve training (autograd) and the numeric oracle tests.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

from ._validation import (
    ValidationError,
    check_finite,
    check_labels,
    check_matrix,
    check_nonnegative,
    check_positive,
)

__all__ = [
    "GrlConfig",
    "TripletConfig",
    "LossWeights",
    "GradientReversal",
    "grl_forward",
    "grl_backward",
    "grad_reverse",
    "contrastive_loss",
    "cross_entropy_loss",
    "batch_hard_triplet_loss",
    "mine_hard_pairs",
    "id_loss",
    "total_loss",
]


@dataclass(frozen=True)
class GrlConfig:
    # backward multiplies the upstream gradient by -coefficient
    coefficient: float = 1.0

    def __post_init__(self):
        check_positive(self.coefficient, "GrlConfig.coefficient")


@dataclass(frozen=True)
class TripletConfig:
    margin: float = 0.3
    reduction: str = "sum"

    def __post_init__(self):
        check_nonnegative(self.margin, "TripletConfig.margin")
        if self.reduction not in ("sum", "mean"):
            raise ValidationError(f"reduction must be 'sum' or 'mean', got {self.reduction!r}")


@dataclass(frozen=True)
class LossWeights:
    lambda_id: float = 1.0
    lambda_b: float = 1.0
    lambda_n: float = 1.0
    lambda_c: float = 1.0
    lambda_t: float = 1.0

    def __post_init__(self):
        for name in ("lambda_id", "lambda_b", "lambda_n", "lambda_c", "lambda_t"):
            check_nonnegative(getattr(self, name), f"LossWeights.{name}")


class _GradReverse(torch.autograd.Function):
    @staticmethod
    def forward(ctx, x, coefficient):
        ctx.coefficient = coefficient
        return x.view_as(x)

    @staticmethod
    def backward(ctx, grad_output):
        return grad_output.neg() * ctx.coefficient, None


def grad_reverse(x: torch.Tensor, coefficient: float = 1.0) -> torch.Tensor:
    """Identity in the forward pass, gradient scaled by ``-coefficient`` backward."""
    return _GradReverse.apply(x, coefficient)


class GradientReversal(nn.Module):
    def __init__(self, coefficient: float = 1.0):
        super().__init__()
        GrlConfig(coefficient)
        self.coefficient = coefficient

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return grad_reverse(x, self.coefficient)

    def extra_repr(self) -> str:
        return f"coefficient={self.coefficient}"


def grl_forward(x):
    """Forward map of the reversal layer: returns ``x`` unchanged."""
    check_finite(x, "grl input")
    if isinstance(x, torch.Tensor):
        return grad_reverse(x) if x.requires_grad else x
    return x


def grl_backward(upstream_grad, cfg: GrlConfig = GrlConfig()):
    """Backward map of the reversal layer, ``-coefficient * upstream_grad``."""
    check_finite(upstream_grad, "upstream gradient")
    if isinstance(upstream_grad, torch.Tensor):
        return upstream_grad.neg() * cfg.coefficient
    return -cfg.coefficient * torch.as_tensor(upstream_grad, dtype=torch.float64).numpy()


def _normalize_rows(x: torch.Tensor, name: str) -> torch.Tensor:
    norms = x.norm(dim=1, keepdim=True)
    if bool((norms == 0).any()):
        raise ValidationError(f"{name} has a zero-norm row; cosine similarity is undefined")
    return x / norms


def contrastive_loss(
    image_feats: torch.Tensor,
    text_feats: torch.Tensor,
    temperature: float = 1.0,
) -> torch.Tensor:
    """Image-to-text InfoNCE over cosine similarities.

    Row ``k`` of ``image_feats`` is scored against every text row; the matched
    text at index ``k`` is the target class.
    """
    check_matrix(image_feats, "image_feats")
    check_matrix(text_feats, "text_feats")
    if image_feats.shape != text_feats.shape:
        raise ValidationError(
            f"image/text shape mismatch: {tuple(image_feats.shape)} vs {tuple(text_feats.shape)}"
        )
    if image_feats.shape[0] < 1:
        raise ValidationError("contrastive_loss needs at least one pair")
    check_positive(temperature, "temperature")
    img = _normalize_rows(image_feats, "image_feats")
    txt = _normalize_rows(text_feats, "text_feats")
    logits = img @ txt.t() / temperature
    target = torch.arange(logits.shape[0], device=logits.device)
    return F.cross_entropy(logits, target)


def cross_entropy_loss(logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    check_matrix(logits, "logits")
    check_labels(labels, logits.shape[0])
    num_classes = logits.shape[1]
    if labels.numel() and (int(labels.min()) < 0 or int(labels.max()) >= num_classes):
        raise ValidationError(f"labels must lie in [0, {num_classes}), got {labels.tolist()}")
    return F.cross_entropy(logits, labels.long())


def _euclidean_matrix(feats: torch.Tensor) -> torch.Tensor:
    diff = feats.unsqueeze(1) - feats.unsqueeze(0)
    sq = (diff * diff).sum(dim=2)
    # sqrt has an infinite slope at 0; keep the backward pass finite on the diagonal
    pos = sq > 0
    return torch.where(pos, torch.sqrt(torch.where(pos, sq, torch.ones_like(sq))), torch.zeros_like(sq))


def _check_pk_labels(labels: torch.Tensor) -> None:
    values, counts = torch.unique(labels, return_counts=True)
    singles = values[counts < 2].tolist()
    if singles:
        raise ValidationError(f"label {singles[0]} has a single instance; batch-hard mining needs a positive")
    if values.numel() < 2:
        raise ValidationError("batch-hard mining needs at least two distinct labels")


def mine_hard_pairs(feats: torch.Tensor, labels: torch.Tensor):
    """Return ``(d_ap, d_an, pos_idx, neg_idx)`` for batch-hard mining.

    Ties resolve to the lowest gallery index.
    """
    check_matrix(feats, "feats")
    check_labels(labels, feats.shape[0])
    _check_pk_labels(labels)
    dist = _euclidean_matrix(feats)
    same = labels.unsqueeze(0) == labels.unsqueeze(1)
    eye = torch.eye(len(labels), dtype=torch.bool, device=feats.device)
    pos_mask = same & ~eye
    neg_mask = ~same
    pos_idx = dist.detach().masked_fill(~pos_mask, float("-inf")).argmax(dim=1)
    neg_idx = dist.detach().masked_fill(~neg_mask, float("inf")).argmin(dim=1)
    rows = torch.arange(len(labels), device=feats.device)
    return dist[rows, pos_idx], dist[rows, neg_idx], pos_idx, neg_idx


def batch_hard_triplet_loss(
    feats: torch.Tensor,
    labels: torch.Tensor,
    cfg: TripletConfig = TripletConfig(),
) -> torch.Tensor:
    d_ap, d_an, _, _ = mine_hard_pairs(feats, labels)
    hinge = torch.clamp(d_ap - d_an + cfg.margin, min=0.0)
    return hinge.sum() if cfg.reduction == "sum" else hinge.mean()


def id_loss(cls, tri, w: LossWeights = LossWeights()):
    return w.lambda_c * cls + w.lambda_t * tri


def total_loss(id_term, c_b, c_n: Sequence, w: LossWeights = LossWeights()):
    out = w.lambda_id * id_term + w.lambda_b * c_b
    if len(c_n):
        nb = c_n[0]
        for term in c_n[1:]:
            nb = nb + term
        out = out + w.lambda_n * nb
    return out
