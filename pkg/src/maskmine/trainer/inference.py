"""Full-volume inference: slice-wise multislice 2D and tiled 3D."""

from __future__ import annotations

import numpy as np
import torch
from scipy.special import expit, softmax

from ..mining import collapse_to_binary, tp_channel_mask
from ..voldata import multislice_view


def head_mode(model) -> str:
    """How 4- or 2-channel logits turn into a segmentation: binary, pwce or dice."""
    if model.head_kind == "binary":
        return "binary"
    return model.mining_variant or "pwce"


def decode(logits: np.ndarray, mode: str, axis: int = 0):
    """Foreground probability and binary mask from logits with channels on ``axis``."""
    if mode == "binary":
        p = softmax(logits, axis=axis)
        fg = np.take(p, 1, axis=axis)
        mask = np.take(logits, 1, axis=axis) > np.take(logits, 0, axis=axis)
        return fg.astype(np.float32), mask.astype(np.uint8)
    if mode == "pwce":
        p = softmax(logits, axis=axis)
        fg = np.take(p, 2, axis=axis) + np.take(p, 3, axis=axis)
        return fg.astype(np.float32), collapse_to_binary(logits, axis=axis)
    if mode == "dice":
        p = expit(logits)
        return np.take(p, 3, axis=axis).astype(np.float32), tp_channel_mask(p, axis=axis)
    raise ValueError(f"unknown head mode {mode!r}")


def foreground_tensor(logits: torch.Tensor, mode: str) -> torch.Tensor:
    """Torch counterpart of :func:`decode`'s probability, channels on axis 1."""
    if mode == "binary":
        return torch.softmax(logits, 1)[:, 1]
    if mode == "pwce":
        p = torch.softmax(logits, 1)
        return p[:, 2] + p[:, 3]
    return torch.sigmoid(logits[:, 3])


def _device(model):
    return next(model.parameters()).device


def _pad_min(arr: np.ndarray, least, axes) -> tuple[np.ndarray, tuple]:
    pad = [(0, 0)] * arr.ndim
    for ax, m in zip(axes, least):
        pad[ax] = (0, max(m - arr.shape[ax], 0))
    return np.pad(arr, pad), arr.shape


def _tile_plan(dim: int, tile: int, overlap: int):
    """Tile starts and the [lo, hi) range each tile writes (split mid-overlap)."""
    step = max(tile - overlap, 1)
    starts = list(range(0, max(dim - tile, 0) + 1, step))
    if starts[-1] + tile < dim:
        starts.append(dim - tile)
    cuts = [0] + [(starts[i + 1] + starts[i] + tile) // 2 for i in range(len(starts) - 1)] + [dim]
    return [(s, cuts[i], cuts[i + 1]) for i, s in enumerate(starts)]


@torch.no_grad()
def infer_logits(model, image: np.ndarray, crop_size=None, slices: int = 3, batch: int = 16,
                 overlap: int = 8, extra: np.ndarray | None = None) -> np.ndarray:
    """
    Logits (C, D, H, W) for a whole (D, H, W) volume. 2D models run on every
    axial slice with ``slices`` neighbours as channels; 3D models run on
    ``crop_size`` tiles overlapping by ``overlap`` voxels, each tile keeping
    only its central part. ``extra`` is appended as one more input channel.
    """
    was_training = model.training
    model.eval()
    dev = _device(model)
    least = 2 ** model.cfg.depth
    try:
        if model.cfg.dims == 2:
            img, shape = _pad_min(image, (least, least), (1, 2))
            ex = _pad_min(extra, (least, least), (1, 2))[0] if extra is not None else None
            out = []
            for z0 in range(0, img.shape[0], batch):
                zs = range(z0, min(z0 + batch, img.shape[0]))
                x = np.stack([multislice_view(img, z, slices) for z in zs])
                if ex is not None:
                    x = np.concatenate([x, ex[list(zs)][:, None]], 1)
                out.append(model(torch.from_numpy(np.ascontiguousarray(x, np.float32)).to(dev)).cpu().numpy())
            logits = np.concatenate(out, 0).transpose(1, 0, 2, 3)
            return np.ascontiguousarray(logits[:, :, : shape[1], : shape[2]])
        tile = tuple(max(int(t), least) for t in (crop_size or image.shape))
        img, shape = _pad_min(image, tile, (0, 1, 2))
        ex = _pad_min(extra, tile, (0, 1, 2))[0] if extra is not None else None
        logits = np.zeros((model.out_channels,) + img.shape, np.float32)
        plans = [_tile_plan(d, t, overlap) for d, t in zip(img.shape, tile)]
        for sz, lz, hz in plans[0]:
            for sy, ly, hy in plans[1]:
                for sx, lx, hx in plans[2]:
                    sl = (slice(sz, sz + tile[0]), slice(sy, sy + tile[1]), slice(sx, sx + tile[2]))
                    x = img[sl][None]
                    if ex is not None:
                        x = np.concatenate([x, ex[sl][None]], 0)
                    y = model(torch.from_numpy(np.ascontiguousarray(x[None], np.float32)).to(dev))[0].cpu().numpy()
                    logits[:, lz:hz, ly:hy, lx:hx] = y[:, lz - sz:hz - sz, ly - sy:hy - sy, lx - sx:hx - sx]
        return logits[:, : shape[0], : shape[1], : shape[2]]
    finally:
        model.train(was_training)


def predict_mask(model, image, crop_size=None, slices=3, batch=16, overlap=8, extra=None):
    """(foreground probability, binary mask, logits) for a whole volume."""
    logits = infer_logits(model, image, crop_size, slices, batch, overlap, extra)
    fg, mask = decode(logits, head_mode(model))
    return fg, mask, logits
