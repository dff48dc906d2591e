"""Loss functions. Each returns ``(value, d_value/d_prediction)``."""

from __future__ import annotations

import numpy as np

from ..errors import DimensionError, ParameterError


def mse_loss(pred: np.ndarray, target: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean of squared differences over every element."""
    if pred.shape != target.shape:
        raise DimensionError(f"mse_loss: pred shape {pred.shape} != target shape {target.shape}")
    diff = pred - target
    value = float(np.mean(np.square(diff, dtype=np.float64)))
    return value, (2.0 / diff.size) * diff


def bce_with_logits(logits: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Binary cross-entropy on raw logits, averaged over the batch.

    Uses ``max(z, 0) - z*y + log1p(exp(-|z|))`` so no sigmoid is ever formed
    and large logits cannot overflow.
    """
    logits = np.asarray(logits)
    labels = np.asarray(labels)
    if logits.shape != labels.shape:
        raise DimensionError(f"bce_with_logits: logits shape {logits.shape} != labels shape {labels.shape}")
    if not np.all((labels == 0) | (labels == 1)):
        raise ParameterError("bce_with_logits: labels must be 0 or 1")
    z = logits.astype(np.float64)
    y = labels.astype(np.float64)
    per = np.maximum(z, 0) - z * y + np.log1p(np.exp(-np.abs(z)))
    e = np.exp(-np.abs(z))
    prob = np.where(z >= 0, 1 / (1 + e), e / (1 + e))
    grad = ((prob - y) / max(z.size, 1)).astype(logits.dtype if logits.dtype.kind == "f" else np.float64)
    return float(per.mean()), grad
