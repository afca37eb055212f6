"""Supervised regression loss on spectrograms."""

from __future__ import annotations

import numpy as np

from .errors import ShapeError
from .tensor import Tensor, as_tensor


def mae_loss(pred, target) -> Tensor:
    """Mean of |pred - target| over every frame-bin cell."""
    pred = as_tensor(pred)
    target = target.data if isinstance(target, Tensor) else np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ShapeError(f"spectrogram shapes differ: {pred.shape} vs {target.shape}")
    return (pred - target).abs().mean()
