"""
Error-mask mining: turn a prediction/ground-truth pair into four error
classes, build retraining targets and map 4-class outputs back to a binary
segmentation.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import IntEnum

import numpy as np

from .errors import DomainError, ParameterError, ShapeError
from .voldata import save_label


class ErrorClass(IntEnum):
    TN = 0
    FP = 1
    FN = 2
    TP = 3


N_CLASSES = 4


def _binary(a, name):
    a = np.asarray(getattr(a, "voxels", a))
    if a.dtype == bool:
        return a.astype(np.uint8)
    if a.size and not np.isin(a, (0, 1)).all():
        raise DomainError(f"{name} must be binary")
    return a.astype(np.uint8)


def mine_error_mask(pred, gt) -> np.ndarray:
    """0 = TN, 1 = FP, 2 = FN, 3 = TP, i.e. ``pred + 2 * gt``."""
    p, g = _binary(pred, "prediction"), _binary(gt, "ground truth")
    if p.shape != g.shape:
        raise ShapeError(f"prediction {p.shape} and ground truth {g.shape} differ in shape")
    return (p + 2 * g).astype(np.uint8)


def class_counts(err) -> dict:
    counts = np.bincount(np.asarray(err).ravel(), minlength=N_CLASSES)
    return {c.name: int(counts[c]) for c in ErrorClass}


def one_hot(err, axis: int = 0) -> np.ndarray:
    err = np.asarray(err)
    if err.size and (err.min() < 0 or err.max() > 3):
        raise DomainError("error mask values must lie in {0, 1, 2, 3}")
    return np.moveaxis(np.eye(N_CLASSES, dtype=np.uint8)[err], -1, axis)


@dataclass
class MiningTargets:
    channels: np.ndarray  # (4, *spatial) uint8
    variant: str


def build_mining_targets(err, gt, variant: str) -> MiningTargets:
    """
    ``pwce``: one-hot of the error mask. ``dice``: same, except channel 3
    is the full ground-truth mask, so FN voxels are set in channels 2 and 3.
    """
    if variant not in ("pwce", "dice"):
        raise ParameterError(f"unknown mining variant {variant!r}")
    err = np.asarray(err)
    g = _binary(gt, "ground truth")
    if err.shape != g.shape:
        raise ShapeError(f"error mask {err.shape} and ground truth {g.shape} differ in shape")
    ch = one_hot(err)
    if variant == "dice":
        ch[ErrorClass.TP] = g
    return MiningTargets(ch, variant)


def collapse_to_binary(logits4, axis: int = 0) -> np.ndarray:
    """floor(argmax / 2): {TN, FP} -> 0, {FN, TP} -> 1. Ties go to the lowest class."""
    x = np.asarray(logits4)
    if x.shape[axis] != N_CLASSES:
        raise ShapeError(f"expected 4 channels on axis {axis}, got {x.shape[axis]}")
    return (np.argmax(x, axis=axis) // 2).astype(np.uint8)


def tp_channel_mask(probs4, threshold: float = 0.5, axis: int = 0) -> np.ndarray:
    if not 0 < threshold < 1:
        raise ParameterError(f"threshold must lie in (0, 1), got {threshold}")
    x = np.asarray(probs4)
    if x.shape[axis] != N_CLASSES:
        raise ShapeError(f"expected 4 channels on axis {axis}, got {x.shape[axis]}")
    return (np.take(x, ErrorClass.TP, axis=axis) >= threshold).astype(np.uint8)


def export_error_mask(err, path, spacing=(1.0, 1.0, 1.0)):
    return save_label(np.asarray(err, dtype=np.uint8), path, spacing)
