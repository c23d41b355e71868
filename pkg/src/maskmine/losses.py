"""
Training objectives and boundary-aware weight maps.

Loss functions take logits shaped (N, C, *spatial) and targets shaped
(N, *spatial) (or (N, 4, *spatial) for the mining dice loss). Sums run over
the whole batch.
"""

from __future__ import annotations

import numpy as np
import torch
import torch.nn.functional as F
from scipy import ndimage

from .errors import DomainError, NumericError, ShapeError

SMOOTH = 1.0
LESION_EPS = 1e-5
VARIANTS = ("pwce", "dice")


def _check_finite(t: torch.Tensor, what: str = "logits"):
    if not torch.isfinite(t).all():
        raise NumericError(f"non-finite values in {what}")


def _check_pair(logits, target):
    if logits.dim() < 2 or tuple(logits.shape[:1]) + tuple(logits.shape[2:]) != tuple(target.shape):
        raise ShapeError(f"logits {tuple(logits.shape)} do not match target {tuple(target.shape)}")


def pwce_loss(logits: torch.Tensor, target: torch.Tensor, weights: torch.Tensor | None = None) -> torch.Tensor:
    """Weighted mean of -log softmax(logits)[target]; normalised by the weight sum."""
    _check_finite(logits)
    _check_pair(logits, target)
    nll = -F.log_softmax(logits, 1).gather(1, target.long().unsqueeze(1)).squeeze(1)
    if weights is None:
        return nll.mean()
    if weights.shape != nll.shape:
        raise ShapeError(f"weights {tuple(weights.shape)} do not match target {tuple(target.shape)}")
    w = weights.to(nll.dtype)
    return (w * nll).sum() / w.sum()


def smooth_dice(probs: torch.Tensor, target: torch.Tensor, s: float = SMOOTH) -> torch.Tensor:
    """(2 sum(p g) + s) / (sum(p) + sum(g) + s)."""
    g = target.to(probs.dtype)
    return (2 * (probs * g).sum() + s) / (probs.sum() + g.sum() + s)


def ratio_loss(pwce, dice, eps: float = LESION_EPS):
    return pwce / (dice + eps)


def combined_lesion_loss(logits, target, weights=None, eps: float = LESION_EPS) -> torch.Tensor:
    """Weighted cross-entropy divided by the smooth dice of the foreground probability."""
    ce = pwce_loss(logits, target, weights)
    fg = F.softmax(logits, 1)[:, 1]
    return ratio_loss(ce, smooth_dice(fg, target), eps)


def multiclass_pwce(logits: torch.Tensor, err: torch.Tensor, weights: torch.Tensor | None = None) -> torch.Tensor:
    """Cross-entropy over the four error classes (uniform weights unless given)."""
    if logits.shape[1] != 4:
        raise ShapeError(f"expected 4 error-class channels, got {logits.shape[1]}")
    if err.numel() and (err.min() < 0 or err.max() > 3):
        raise DomainError("error mask values must lie in {0, 1, 2, 3}")
    return pwce_loss(logits, err, weights)


def multiclass_dice(probs: torch.Tensor, targets: torch.Tensor, s: float = SMOOTH) -> torch.Tensor:
    """
    Mean over the four channels of 1 - smooth dice. ``probs`` are per-channel
    sigmoid outputs; target channels may overlap.
    """
    if probs.shape[1] != 4 or targets.shape[1] != 4:
        raise ShapeError(f"expected 4 channels, got probs {tuple(probs.shape)} / targets {tuple(targets.shape)}")
    if probs.shape != targets.shape:
        raise ShapeError(f"probs {tuple(probs.shape)} do not match targets {tuple(targets.shape)}")
    terms = [1 - smooth_dice(probs[:, c], targets[:, c], s) for c in range(4)]
    return torch.stack(terms).mean()


def multiclass_dice_from_logits(logits, targets, s: float = SMOOTH):
    _check_finite(logits)
    return multiclass_dice(torch.sigmoid(logits), targets, s)


# ---------------------------------------------------------------------------
# weight maps
# ---------------------------------------------------------------------------

FAR = 1e6


def class_weight_map(mask: np.ndarray, clamp=(0.1, 10.0)) -> np.ndarray:
    mask = np.asarray(mask).astype(bool)
    n = mask.size
    fg = int(mask.sum())
    w = np.empty(mask.shape, np.float32)
    for value, count in ((True, fg), (False, n - fg)):
        if count:
            w[mask == value] = np.clip(n / count, *clamp)
    return w


def component_distances(mask: np.ndarray, sampling=None) -> tuple[np.ndarray, np.ndarray]:
    """Per-voxel distance to the nearest and second-nearest foreground component."""
    lab, n = ndimage.label(np.asarray(mask).astype(bool))
    d1 = np.full(lab.shape, FAR)
    d2 = np.full(lab.shape, FAR)
    for i in range(1, n + 1):
        d = ndimage.distance_transform_edt(lab != i, sampling=sampling)
        closer = d < d1
        d2 = np.where(closer, d1, np.minimum(d2, d))
        d1 = np.where(closer, d, d1)
    return d1, d2


def distance_weight_map(mask, w0: float = 10.0, sigma: float = 5.0, class_weights=None,
                        sampling=None) -> np.ndarray:
    """
    w(x) = w_c(x) + w0 * exp(-(d1(x) + d2(x))^2 / (2 sigma^2)).

    ``w_c`` is the inverse class frequency clamped to [0.1, 10] unless
    ``class_weights`` = (background, foreground) is supplied. With fewer than
    two components the boundary term vanishes.
    """
    mask = np.asarray(getattr(mask, "voxels", mask)).astype(bool)
    if class_weights is None:
        w = class_weight_map(mask)
    else:
        w = np.where(mask, class_weights[1], class_weights[0]).astype(np.float32)
    d1, d2 = component_distances(mask, sampling)
    with np.errstate(over="ignore"):
        border = w0 * np.exp(-((d1 + d2) ** 2) / (2 * sigma ** 2))
    return (w + border).astype(np.float32)
