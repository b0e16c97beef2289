"""Input validation helpers shared by the losses, estimators and loaders."""

from __future__ import annotations

import numpy as np
import torch


class ValidationError(ValueError):
    """Raised when inputs violate a documented precondition."""


def check_finite(x, name: str = "input") -> None:
    if isinstance(x, torch.Tensor):
        ok = bool(torch.isfinite(x).all()) if x.numel() else True
    else:
        arr = np.asarray(x, dtype=float)
        ok = bool(np.isfinite(arr).all()) if arr.size else True
    if not ok:
        raise ValidationError(f"{name} contains non-finite values")


def check_matrix(x: torch.Tensor, name: str) -> None:
    if x.dim() != 2:
        raise ValidationError(f"{name} must be 2-D, got shape {tuple(x.shape)}")
    check_finite(x, name)


def check_labels(labels: torch.Tensor, n: int, name: str = "labels") -> None:
    if labels.dim() != 1 or labels.shape[0] != n:
        raise ValidationError(f"{name} must have shape ({n},), got {tuple(labels.shape)}")


def check_nonnegative(value: float, name: str) -> None:
    if not np.isfinite(value) or value < 0:
        raise ValidationError(f"{name} must be a finite non-negative number, got {value!r}")


def check_positive(value: float, name: str) -> None:
    if not np.isfinite(value) or value <= 0:
        raise ValidationError(f"{name} must be a finite positive number, got {value!r}")
