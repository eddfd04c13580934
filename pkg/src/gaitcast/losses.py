"""Training objectives: layerwise L1 forecasting loss, its mean across decoder
layers, (weighted) categorical cross-entropy, and the per-strategy totals.

All functions return scalar autodiff tensors so callers can backprop; numeric
values live in the returned LossBreakdown for logging.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import autodiff as ad

MODES = ("pretrain", "scratch", "fine_both", "fine_class")


class LossError(ValueError):
    """Wrong shapes or missing components for the requested objective."""


@dataclass
class LossBreakdown:
    """Scalar values of one training step's objective, plus the graph node."""

    mode: str
    total: ad.Tensor
    classification: float
    forecast: float            # nan when the mode has no forecasting term
    per_layer: list[float] = field(default_factory=list)

    @property
    def total_value(self) -> float:
        return self.total.item()


def _as_tensor(x) -> ad.Tensor:
    return x if isinstance(x, ad.Tensor) else ad.constant(np.asarray(x, dtype=np.float64))


def layerwise_l1(pred: ad.Tensor, target) -> ad.Tensor:
    """Mean absolute error over every entry of one layer's forecast."""
    target = _as_tensor(target)
    if pred.shape != target.shape:
        raise LossError(f"layerwise_l1: prediction {pred.shape} vs target {target.shape}")
    return ad.mean(ad.abs_(ad.sub(pred, target)))


def forecast_loss(layer_preds: Sequence[ad.Tensor], target) -> tuple[ad.Tensor, list[float]]:
    """Average of the layerwise L1 losses across all decoder layers."""
    if not layer_preds:
        raise LossError("forecast_loss: no decoder layers given")
    per_layer = [layerwise_l1(p, target) for p in layer_preds]
    total = per_layer[0]
    for p in per_layer[1:]:
        total = ad.add(total, p)
    return ad.scale(total, 1.0 / len(per_layer)), [p.item() for p in per_layer]


def cross_entropy(logits: ad.Tensor, labels, weights: np.ndarray | None = None) -> ad.Tensor:
    """(Weighted) categorical cross-entropy from raw logits via log-sum-exp.

    Accepts (C,) logits with an int label, or (B, C) with B labels; batches
    are averaged. weights is a length-C nonnegative vector, all ones when
    omitted.
    """
    if logits.ndim == 1:
        logits = ad.reshape(logits, (1, logits.shape[0]))
        labels = np.asarray([labels], dtype=np.int64)
    else:
        labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise LossError(f"cross_entropy: logits {logits.shape} vs labels {labels.shape}")
    n, c = logits.shape
    if labels.min() < 0 or labels.max() >= c:
        raise LossError(f"cross_entropy: label outside 0..{c - 1}")
    if weights is None:
        weights = np.ones(c)
    weights = np.asarray(weights, dtype=np.float64)
    if weights.shape != (c,):
        raise LossError(f"cross_entropy: weights shape {weights.shape}, wanted ({c},)")
    if np.any(weights < 0) or not np.any(weights > 0):
        raise LossError("cross_entropy: weights must be nonnegative and not all zero")

    # max-shift is a constant offset: it cancels in lse - logit exactly
    m = logits.data.max(axis=-1, keepdims=True)
    shifted = ad.sub(logits, ad.constant(np.broadcast_to(m, logits.shape).copy()))
    lse = ad.log(ad.sum_(ad.exp(shifted), axis=1))
    picked = ad.gather_lastdim(shifted, labels)
    per_sample = ad.mul(ad.sub(lse, picked), ad.constant(weights[labels]))
    return ad.mean(per_sample)


def inverse_frequency_weights(labels, class_count: int) -> np.ndarray:
    """Per-class weights w_c = total / (k * count_c) over the k observed
    classes, zero for unobserved ones, so that sum(count_c * w_c) == total
    and balanced data gets all-ones."""
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size == 0:
        raise LossError("inverse_frequency_weights: empty label list")
    if labels.min() < 0 or labels.max() >= class_count:
        raise LossError(f"inverse_frequency_weights: label outside 0..{class_count - 1}")
    counts = np.bincount(labels, minlength=class_count).astype(np.float64)
    observed = counts > 0
    k = int(observed.sum())
    weights = np.zeros(class_count)
    weights[observed] = labels.size / (k * counts[observed])
    return weights


def combined_loss(mode: str, *, classification: ad.Tensor,
                  forecast: ad.Tensor | None = None,
                  per_layer: Sequence[float] | None = None) -> LossBreakdown:
    """Assemble the strategy total.

    pretrain / scratch / fine_both: total = classification + forecast.
    fine_class: total IS the classification tensor, so no gradient can reach
    the forecasting branch.
    """
    if mode not in MODES:
        raise LossError(f"combined_loss: unknown mode {mode!r} (expected one of {MODES})")
    if mode == "fine_class":
        return LossBreakdown(mode=mode, total=classification,
                             classification=classification.item(),
                             forecast=float("nan"), per_layer=[])
    if forecast is None:
        raise LossError(f"combined_loss: mode {mode!r} needs a forecast component")
    total = ad.add(classification, forecast)
    return LossBreakdown(mode=mode, total=total,
                         classification=classification.item(),
                         forecast=forecast.item(),
                         per_layer=list(per_layer or []))
