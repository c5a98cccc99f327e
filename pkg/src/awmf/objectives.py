"""Losses and weight targets.

Label maps use integer class indices with :data:`IGNORE` (255) marking
unannotated pixels; those pixels are dropped from every sum here.
"""

from __future__ import annotations

from typing import Iterable, Sequence

import numpy as np

from .exceptions import DataError, ShapeError
from .tensor import Tensor, log, square, tsum

IGNORE = 255
LOG_FLOOR = 1e-12


def one_hot(labels, n_classes: int):
    """Return ``(onehot, valid)`` for an integer label array of shape (..., H, W).

    ``onehot`` has the class axis inserted before H (so (N, H, W) becomes
    (N, M, H, W)); ``valid`` is False at ignore pixels.
    """
    labels = np.asarray(labels)
    valid = labels != IGNORE
    bad = valid & ((labels < 0) | (labels >= n_classes))
    if bad.any():
        raise DataError(f"label values outside 0..{n_classes - 1} (and {IGNORE}): {np.unique(labels[bad])}")
    axis = labels.ndim - 2
    classes = np.arange(n_classes).reshape((n_classes, 1, 1))
    onehot = (np.expand_dims(labels, axis) == classes).astype(np.float64)
    return onehot, valid


def class_weights(label_maps: Iterable, n_classes: int) -> np.ndarray:
    """Inverse-frequency class weights ``alpha_c = total / (M * count_c)``.

    Ignore pixels are left out of both counts.
    """
    counts = np.zeros(n_classes, dtype=np.int64)
    for labels in label_maps:
        labels = np.asarray(labels)
        valid = labels[labels != IGNORE].astype(np.int64)
        if valid.size and (valid.min() < 0 or valid.max() >= n_classes):
            raise DataError(f"label values outside 0..{n_classes - 1}")
        counts += np.bincount(valid.ravel(), minlength=n_classes)
    empty = np.flatnonzero(counts == 0)
    if empty.size:
        raise DataError(f"class {int(empty[0])} has no labelled pixels; restrict n_classes or add data")
    return counts.sum() / (n_classes * counts.astype(np.float64))


def weighted_cross_entropy(y, target, alpha, ignore_mask=None) -> Tensor:
    """Summed class-weighted pixel cross-entropy ``-sum alpha_c T_c log Y_c``.

    ``y`` is a probability Tensor (N, M, H, W); ``target`` is either an integer
    label array (N, H, W) or a one-hot array matching ``y``. ``ignore_mask``
    marks pixels to drop (True = ignored); integer targets derive it from
    :data:`IGNORE` automatically.
    """
    yd = y.data if isinstance(y, Tensor) else np.asarray(y)
    target = np.asarray(target)
    if target.ndim == yd.ndim - 1:
        target, valid = one_hot(target, yd.shape[1])
    else:
        valid = np.ones(target.shape[:1] + target.shape[2:], dtype=bool)
    if target.shape != yd.shape:
        raise ShapeError(f"prediction shape {yd.shape} does not match target shape {target.shape}")
    if ignore_mask is not None:
        valid = valid & ~np.asarray(ignore_mask, dtype=bool)
    alpha = np.asarray(alpha, dtype=np.float64).reshape((1, -1) + (1,) * (yd.ndim - 2))
    coeff = -(target * alpha) * np.expand_dims(valid, 1)
    return tsum(log(y, floor=LOG_FLOOR) * coeff)


def dice_weight_targets(y, target, valid=None) -> float:
    """Mean soft Dice ``2|Y_c * T_c| / (|Y_c| + |T_c|)`` over classes present in ``target``.

    ``y`` and ``target`` are (M, H, W) arrays (probabilities / one-hot).
    ``valid`` optionally restricts the sums to annotated pixels.
    """
    y = np.asarray(y.data if isinstance(y, Tensor) else y, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if y.shape != target.shape:
        raise ShapeError(f"prediction shape {y.shape} does not match target shape {target.shape}")
    if valid is not None:
        mask = np.asarray(valid, dtype=np.float64)[None]
        y = y * mask
        target = target * mask
    axes = tuple(range(1, y.ndim))
    t_sum = target.sum(axis=axes)
    present = t_sum > 0
    if not present.any():
        raise DataError("dice target contains no labelled pixels")
    inter = (y * target).sum(axis=axes)
    denom = y.sum(axis=axes) + t_sum
    return float(np.mean(2.0 * inter[present] / denom[present]))


def dice_targets_batch(y, labels, n_classes: int) -> np.ndarray:
    """Per-patch Dice targets for a batch: y (N, M, H, W), labels (N, H, W)."""
    onehot, valid = one_hot(labels, n_classes)
    yd = y.data if isinstance(y, Tensor) else np.asarray(y)
    return np.array([dice_weight_targets(yd[i], onehot[i], valid[i]) for i in range(yd.shape[0])])


def mse_weight_loss(predicted, target) -> Tensor:
    """Summed squared error between predicted and target expert weights."""
    pd = predicted.data if isinstance(predicted, Tensor) else np.asarray(predicted)
    target = np.asarray(target, dtype=np.float64)
    if pd.shape != target.shape:
        raise ShapeError(f"predicted weights {pd.shape} do not match targets {target.shape}")
    return tsum(square(predicted - target))


def total_loss(y, expert_maps: Sequence, target, expert_targets: Sequence, expert_alphas: Sequence,
               target_alpha):
    """Aggregator loss plus the three expert losses.

    Returns ``(loss, terms)`` where ``terms`` maps ``loss_a``, ``loss_e1`` ..
    ``loss_e3`` to their float values.
    """
    loss_a = weighted_cross_entropy(y, target, target_alpha)
    terms = {"loss_a": loss_a.item()}
    loss = loss_a
    for k, (yk, tk, ak) in enumerate(zip(expert_maps, expert_targets, expert_alphas), start=1):
        lk = weighted_cross_entropy(yk, tk, ak)
        terms[f"loss_e{k}"] = lk.item()
        loss = loss + lk
    return loss, terms
