"""
Training loop, patch sampling and the mine-and-retrain step.
"""

from __future__ import annotations

import copy
import csv
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
import torch

from ..errors import ConfigurationError, NumericError, ParameterError
from ..evaluation import dice_per_volume, largest_component
from ..losses import (combined_lesion_loss, distance_weight_map, multiclass_dice_from_logits,
                      multiclass_pwce, pwce_loss, smooth_dice)
from ..mining import build_mining_targets, class_counts, mine_error_mask
from ..model import append_error_head, freeze_binary_head
from ..voldata import AugmentConfig, Case, augment, load_cases, region_centers, sample_crop
from .inference import decode, head_mode, infer_logits

log = logging.getLogger(__name__)

STAGE_LOSSES = ("pwce", "combined", "dice")
CROP_POLICIES = ("uniform", "in_and_around_region")


@dataclass
class TrainConfig:
    epochs: int = 70
    retrain_epochs: int = 30
    batch_size: int = 12
    lr: float = 1e-5
    retrain_lr: float | None = None  # None: same as lr
    weight_decay: float = 1e-5
    lr_step: int = 20
    lr_gamma: float = 0.5
    patience: int = 0  # 0 disables early stopping
    retrain_patience: int = 8
    patches_per_epoch: int = 0  # 0 means 100 x number of training volumes
    crop_size: tuple = (256, 256)
    slices: int = 3
    crop_policy: str = "uniform"
    crop_margin: int = 16
    loss: str = "pwce"
    weight_maps: bool = True
    w0: float = 10.0
    sigma: float = 5.0
    augment: AugmentConfig | None = field(default_factory=AugmentConfig)
    mining_class_weights: bool = False
    error_head_init: str = "binary"  # or "random"
    inference_batch: int = 16
    tile_overlap: int = 8
    seed: int = 0
    deterministic: bool = True
    device: str = "cpu"

    def __post_init__(self):
        self.crop_size = tuple(int(c) for c in self.crop_size)
        if self.epochs < 1:
            raise ConfigurationError("epochs must be >= 1")
        if self.retrain_epochs < 0:
            raise ConfigurationError("retrain_epochs must be >= 0")
        if self.lr <= 0 or (self.retrain_lr is not None and self.retrain_lr <= 0):
            raise ConfigurationError("learning rate must be > 0")
        if self.batch_size < 1:
            raise ConfigurationError("batch_size must be >= 1")
        if self.loss not in STAGE_LOSSES:
            raise ConfigurationError(f"loss must be one of {STAGE_LOSSES}, got {self.loss!r}")
        if self.crop_policy not in CROP_POLICIES:
            raise ConfigurationError(f"crop_policy must be one of {CROP_POLICIES}")
        if len(self.crop_size) not in (2, 3):
            raise ConfigurationError("crop_size needs 2 (2D) or 3 (3D) entries")
        if self.error_head_init not in ("binary", "random"):
            raise ConfigurationError("error_head_init must be 'binary' or 'random'")
        if self.slices < 1 or self.slices % 2 == 0:
            raise ConfigurationError("slices must be a positive odd number")

    @classmethod
    def for_3d(cls, **kw) -> "TrainConfig":
        kw.setdefault("crop_size", (64, 128, 128))
        kw.setdefault("batch_size", 2)
        return cls(**kw)


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    val_dice: float
    lr: float
    wall_time: float
    components: dict = field(default_factory=dict)


@dataclass
class TrainHistory:
    stage: str = ""
    records: list = field(default_factory=list)
    best_epoch: int | None = None

    @property
    def best_dice(self) -> float:
        if self.best_epoch is None:
            return float("nan")
        return self.records[self.best_epoch].val_dice

    def rows(self, with_time: bool = True) -> list:
        out = []
        for r in self.records:
            row = {"epoch": r.epoch, "train_loss": r.train_loss, "val_loss": r.val_loss,
                   "val_dice": r.val_dice, "lr": r.lr}
            row.update({f"loss_{k}": v for k, v in sorted(r.components.items())})
            if with_time:
                row["wall_time"] = r.wall_time
            out.append(row)
        return out

    def to_csv(self, path, with_time: bool = True):
        rows = self.rows(with_time)
        cols = list(rows[0]) if rows else ["epoch", "train_loss", "val_loss", "val_dice", "lr"]
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, cols, lineterminator="\n")
            w.writeheader()
            for row in rows:
                w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})
        return Path(path)


def as_cases(dataset) -> list[Case]:
    if isinstance(dataset, (str, Path)):
        return load_cases(dataset)
    return list(dataset)


def setup_determinism(cfg: TrainConfig):
    torch.manual_seed(cfg.seed)
    torch.use_deterministic_algorithms(cfg.deterministic)


def resolve_device(name: str) -> torch.device:
    if name in ("accelerator", "cuda"):
        if not torch.cuda.is_available():
            raise ConfigurationError("no accelerator available; use --device cpu")
        return torch.device("cuda")
    return torch.device("cpu")


# ---------------------------------------------------------------------------
# patch sampling
# ---------------------------------------------------------------------------

LONG_KEYS = {"label", "err", "liver", "lesion", "err_liver", "err_lesion"}


class PatchSampler:
    """
    Random crops over training cases. ``arrays[case.id]`` maps names to
    per-voxel arrays cut alongside the image. Each epoch uses its own
    generator derived from (seed, epoch).
    """

    def __init__(self, cases, arrays: dict, cfg: TrainConfig, label_key: str = "label",
                 region_key: str | None = None):
        self.cases = [c for c in cases if c.split == "train"]
        if not self.cases:
            raise ParameterError("no training cases in dataset")
        self.arrays = arrays
        self.cfg = cfg
        self.label_key = label_key
        self.centers = {}
        if cfg.crop_policy == "in_and_around_region":
            for c in self.cases:
                region = getattr(c, region_key or "liver")
                self.centers[c.id] = region_centers(region, cfg.crop_margin)

    @property
    def patches_per_epoch(self) -> int:
        return self.cfg.patches_per_epoch or 100 * len(self.cases)

    def draw(self, rng: np.random.Generator) -> dict:
        case = self.cases[int(rng.integers(len(self.cases)))]
        arrs = self.arrays[case.id]
        others = {k: v for k, v in arrs.items() if k not in (self.label_key, "weight")}
        patch = sample_crop(case.image, arrs[self.label_key], self.cfg.crop_size, rng=rng,
                            policy=self.cfg.crop_policy, centers=self.centers.get(case.id),
                            weight=arrs.get("weight"), slices=self.cfg.slices, extra=others)
        if self.cfg.augment is not None:
            patch = augment(patch, rng, self.cfg.augment)
        out = {"image": patch.image, self.label_key: patch.label}
        if patch.weight is not None:
            out["weight"] = patch.weight
        out.update(patch.provenance.get("extra", {}))
        return out

    def batches(self, epoch: int):
        rng = np.random.default_rng([self.cfg.seed, epoch, 31])
        n = self.patches_per_epoch
        bs = self.cfg.batch_size
        for start in range(0, n, bs):
            items = [self.draw(rng) for _ in range(min(bs, n - start))]
            yield {k: np.stack([it[k] for it in items]) for k in items[0]}


def to_tensors(batch: dict, device) -> dict:
    out = {}
    for k, v in batch.items():
        t = torch.from_numpy(np.ascontiguousarray(v))
        out[k] = (t.long() if k in LONG_KEYS else t.float()).to(device)
    return out


# ---------------------------------------------------------------------------
# generic fit
# ---------------------------------------------------------------------------

def fit(nets: list, step: Callable, validate: Callable, sampler: PatchSampler, cfg: TrainConfig,
        epochs: int, patience: int = 0, stage: str = "", lr: float | None = None) -> TrainHistory:
    """
    Optimise the trainable parameters of ``nets`` with Adam + step decay.
    ``step(batch)`` returns (loss, {component: value}); ``validate()`` returns
    (val_loss, val_dice). The best validation-dice weights are restored at
    the end.
    """
    history = TrainHistory(stage)
    if epochs == 0:
        return history
    device = next(nets[0].parameters()).device
    params = [p for n in nets for p in n.parameters() if p.requires_grad]
    opt = torch.optim.Adam(params, lr=lr or cfg.lr, weight_decay=cfg.weight_decay)
    sched = torch.optim.lr_scheduler.StepLR(opt, step_size=max(cfg.lr_step, 1), gamma=cfg.lr_gamma)
    best, best_states, stale = -math.inf, None, 0
    for epoch in range(epochs):
        t0 = time.perf_counter()
        for n in nets:
            n.train()
        total, count, parts = 0.0, 0, {}
        for batch in sampler.batches(epoch):
            loss, comps = step(to_tensors(batch, device))
            if not torch.isfinite(loss):
                raise NumericError(f"{stage}: loss became {loss.item()} at epoch {epoch}; training diverged")
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            k = len(next(iter(batch.values())))
            total += loss.item() * k
            count += k
            for name, v in comps.items():
                parts[name] = parts.get(name, 0.0) + float(v) * k
        lr = opt.param_groups[0]["lr"]
        sched.step()
        val_loss, val_dice = validate()
        rec = EpochRecord(epoch, total / count, float(val_loss), float(val_dice), lr,
                          time.perf_counter() - t0, {k: v / count for k, v in parts.items()})
        history.records.append(rec)
        log.info("%s epoch %d loss %.4f val_loss %.4f val_dice %.4f", stage, epoch, rec.train_loss,
                 rec.val_loss, rec.val_dice)
        if math.isnan(val_dice) or val_dice > best:
            best = -math.inf if math.isnan(val_dice) else val_dice
            best_states = [copy.deepcopy(n.state_dict()) for n in nets]
            history.best_epoch = epoch
            stale = 0
        else:
            stale += 1
            if patience and stale >= patience:
                log.info("%s: early stop after %d stale epochs", stage, stale)
                break
    for n, s in zip(nets, best_states):
        n.load_state_dict(s)
    return history


# ---------------------------------------------------------------------------
# single-network stages
# ---------------------------------------------------------------------------

def stage_loss(name: str, logits, batch: dict):
    label = batch["label"]
    weight = batch.get("weight")
    if name == "pwce":
        return pwce_loss(logits, label, weight)
    if name == "combined":
        return combined_lesion_loss(logits, label, weight)
    if name == "dice":
        return 1 - smooth_dice(torch.softmax(logits, 1)[:, 1], label)
    if name == "mining-pwce":
        return multiclass_pwce(logits, batch["err"], weight)
    if name == "mining-dice":
        return multiclass_dice_from_logits(logits, batch["targets"])
    raise ValueError(f"unknown loss {name!r}")


def volume_batch(logits: np.ndarray, arrays: dict, dims: int, device) -> tuple:
    """Reshape whole-volume logits (C, D, H, W) and targets into a loss batch."""
    if dims == 2:
        lg = logits.transpose(1, 0, 2, 3)
        batch = {k: (v.transpose(1, 0, 2, 3) if v.ndim == 4 else v) for k, v in arrays.items()}
    else:
        lg = logits[None]
        batch = {k: v[None] for k, v in arrays.items()}
    return torch.from_numpy(np.ascontiguousarray(lg)).to(device), to_tensors(batch, device)


def stage_postprocess(mask: np.ndarray, target: str, region: np.ndarray | None = None) -> np.ndarray:
    """Evaluation postprocessing for one target: largest component for liver, liver masking for lesion."""
    if target == "liver":
        return largest_component(mask)
    if region is not None:
        return (mask.astype(bool) & region.astype(bool)).astype(np.uint8)
    return mask


def predict_regions(liver_model, cases, cfg: TrainConfig) -> dict:
    """Postprocessed liver predictions keyed by case id (used to restrict lesions)."""
    out = {}
    for c in cases:
        logits = infer_logits(liver_model, c.image, cfg.crop_size, cfg.slices, cfg.inference_batch,
                              cfg.tile_overlap)
        out[c.id] = largest_component(decode(logits, head_mode(liver_model))[1])
    return out


def _validator(model, cases, arrays, cfg, target, loss_name, regions):
    val = [c for c in cases if c.split == "val"]
    dev = next(model.parameters()).device

    def validate():
        if not val:
            return float("nan"), float("nan")
        losses, dices = [], []
        mode = head_mode(model)
        for c in val:
            logits = infer_logits(model, c.image, cfg.crop_size, cfg.slices, cfg.inference_batch,
                                  cfg.tile_overlap)
            pred = stage_postprocess(decode(logits, mode)[1], target, (regions or {}).get(c.id))
            gt = getattr(c, target)
            if not (target == "lesion" and not gt.any()):
                dices.append(dice_per_volume(pred, gt))
            with torch.no_grad():
                lg, batch = volume_batch(logits, arrays[c.id], model.cfg.dims, dev)
                losses.append(stage_loss(loss_name, lg, batch).item())
        return float(np.mean(losses)), float(np.mean(dices)) if dices else float("nan")

    return validate


def stage_arrays(cases, target: str, cfg: TrainConfig, weights: bool) -> dict:
    arrays = {}
    for c in cases:
        gt = getattr(c, target)
        arrays[c.id] = {"label": gt}
        if weights:
            arrays[c.id]["weight"] = distance_weight_map(gt, cfg.w0, cfg.sigma)
    return arrays


def train(model, dataset, cfg: TrainConfig, target: str = "liver", regions: dict | None = None):
    """
    Train ``model`` on the binary ``target`` with ``cfg.loss``. Returns the
    model with its best-validation weights and the per-epoch history.
    ``regions`` (case id -> liver mask) restricts lesion predictions during
    validation.
    """
    cases = as_cases(dataset)
    setup_determinism(cfg)
    dev = resolve_device(cfg.device)
    model.to(dev)
    arrays = stage_arrays(cases, target, cfg, cfg.weight_maps and cfg.loss in ("pwce", "combined"))
    sampler = PatchSampler(cases, arrays, cfg)
    dims = model.cfg.dims

    def step(batch):
        loss = stage_loss(cfg.loss, model(batch["image"]), batch)
        return loss, {}

    if len(cfg.crop_size) != dims:
        raise ConfigurationError(f"crop_size {cfg.crop_size} does not fit a {dims}D model")
    validate = _validator(model, cases, arrays, cfg, target, cfg.loss, regions)
    history = fit([model], step, validate, sampler, cfg, cfg.epochs, cfg.patience, f"{target}/initial")
    return model, history


def mine_errors(model, cases, target: str, cfg: TrainConfig, regions: dict | None = None,
                variant: str | None = None):
    """
    Predict every case with ``model`` (full volume, no connected-component
    filtering) and mine its error mask. Returns ({id: error mask}, report).
    """
    errs, vols = {}, []
    mode = head_mode(model)
    for c in cases:
        logits = infer_logits(model, c.image, cfg.crop_size, cfg.slices, cfg.inference_batch, cfg.tile_overlap)
        pred = decode(logits, mode)[1]
        if target == "lesion" and regions is not None and c.id in regions:
            pred = (pred.astype(bool) & regions[c.id].astype(bool)).astype(np.uint8)
        err = mine_error_mask(pred, getattr(c, target))
        errs[c.id] = err
        vols.append({"volume_id": c.id, "split": c.split, "in_training_set": c.split == "train",
                     **class_counts(err)})
    train_vols = [v for v in vols if v["in_training_set"]]
    report = {
        "target": target,
        "variant": variant,
        "volumes": vols,
        "totals": {k: int(sum(v[k] for v in train_vols)) for k in ("TN", "FP", "FN", "TP")},
        "flagged_not_in_training_set": [v["volume_id"] for v in vols if not v["in_training_set"]],
    }
    return errs, report


def mining_arrays(cases, errs: dict, target: str, variant: str, cfg: TrainConfig) -> dict:
    arrays = {}
    for c in cases:
        gt = getattr(c, target)
        arrays[c.id] = {"label": gt, "err": errs[c.id],
                        "targets": build_mining_targets(errs[c.id], gt, variant).channels}
        if variant == "pwce" and cfg.mining_class_weights:
            arrays[c.id]["weight"] = distance_weight_map(gt, cfg.w0, cfg.sigma)
    return arrays


def target_prior(cases, arrays: dict, variant: str, key: str = "") -> np.ndarray:
    """Per-channel frequency of the mining targets over the training cases."""
    train = [c for c in cases if c.split == "train"] or list(cases)
    err_key, tgt_key = (f"err_{key}", f"t_{key}") if key else ("err", "targets")
    if variant == "dice":
        tot = sum(arrays[c.id][tgt_key].reshape(4, -1).sum(1, dtype=np.float64) for c in train)
        n = sum(arrays[c.id][tgt_key][0].size for c in train)
    else:
        tot = sum(np.bincount(arrays[c.id][err_key].ravel(), minlength=4).astype(np.float64) for c in train)
        n = tot.sum()
    return tot / n


def mine_and_retrain(model, dataset, cfg: TrainConfig, variant: str, target: str = "liver",
                     regions: dict | None = None):
    """
    Mine the error masks of a trained binary model, append the error head
    and retrain the whole network (binary head frozen) on the static
    4-class targets. Returns (model, history, mining report).
    """
    if variant not in ("pwce", "dice"):
        raise ParameterError(f"unknown mining variant {variant!r}")
    cases = as_cases(dataset)
    setup_determinism(cfg)
    dev = resolve_device(cfg.device)
    model.to(dev)
    errs, report = mine_errors(model, cases, target, cfg, regions, variant)
    arrays = mining_arrays(cases, errs, target, variant, cfg)
    mined = append_error_head(model, seed=cfg.seed + 1, variant=variant,
                              prior=target_prior(cases, arrays, variant), init=cfg.error_head_init)
    freeze_binary_head(mined)
    sampler = PatchSampler(cases, arrays, cfg)
    loss_name = f"mining-{variant}"

    def step(batch):
        return stage_loss(loss_name, mined(batch["image"]), batch), {}

    validate = _validator(mined, cases, arrays, cfg, target, loss_name, regions)
    history = fit([mined], step, validate, sampler, cfg, cfg.retrain_epochs, cfg.retrain_patience,
                  f"{target}/mining-{variant}", lr=cfg.retrain_lr)
    return mined, history, report
