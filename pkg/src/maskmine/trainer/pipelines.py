"""
Liver/lesion pipelines: cascaded (2D or 3D), combined simultaneous 2D, and
the loss-variant control comparison.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import torch

from ..errors import ConfigurationError, DependencyError, ParameterError
from ..evaluation import MetricsReport, dice_per_volume, evaluate_pipeline
from ..losses import distance_weight_map
from ..mining import build_mining_targets, class_counts, mine_error_mask
from ..model import ModelConfig, append_error_head, build_unet, freeze_binary_head
from .inference import decode, foreground_tensor, head_mode, infer_logits
from .loop import (PatchSampler, TrainConfig, TrainHistory, as_cases, fit, mine_and_retrain, mine_errors,
                   predict_regions, resolve_device, setup_determinism, stage_loss, stage_postprocess,
                   target_prior, train, volume_batch)

log = logging.getLogger(__name__)

LIVER_SEED, LESION_SEED = 1, 2


def stage_seed(seed: int, which: int) -> int:
    return 1000 * seed + which


@dataclass
class StageResult:
    target: str
    initial: object
    history: TrainHistory
    mined: dict = field(default_factory=dict)  # variant -> (model, history, report)
    regions: dict | None = None

    def final(self, variant: str | None = None):
        if variant and variant in self.mined:
            return self.mined[variant][0]
        return self.initial


def run_liver_stage(cases, mcfg: ModelConfig, tcfg: TrainConfig, variants=(), seed: int = 0,
                    initial=None) -> StageResult:
    """Binary liver training (pwce + distance weight maps), then optional mining per variant."""
    if initial is None:
        model = build_unet(mcfg, stage_seed(seed, LIVER_SEED))
        initial, hist = train(model, cases, tcfg, "liver")
    else:
        hist = TrainHistory("liver/initial")
    res = StageResult("liver", initial, hist)
    for v in variants:
        res.mined[v] = mine_and_retrain(initial, cases, tcfg, v, "liver")
    return res


def run_lesion_stage(cases, mcfg: ModelConfig, tcfg: TrainConfig, liver_model, variants=(),
                     seed: int = 0, initial=None, regions: dict | None = None) -> StageResult:
    """Lesion training on crops in and around the liver, restricted to the predicted liver."""
    if liver_model is None and regions is None:
        raise DependencyError("lesion stage needs a trained liver model (stage 1) first")
    if regions is None:
        regions = predict_regions(liver_model, cases, tcfg)
    if initial is None:
        model = build_unet(mcfg, stage_seed(seed, LESION_SEED))
        initial, hist = train(model, cases, tcfg, "lesion", regions)
    else:
        hist = TrainHistory("lesion/initial")
    res = StageResult("lesion", initial, hist)
    res.regions = regions
    for v in variants:
        res.mined[v] = mine_and_retrain(initial, cases, tcfg, v, "lesion", regions)
    return res


def cascade_predictor(liver_model, lesion_model, liver_cfg: TrainConfig, lesion_cfg: TrainConfig):
    """predict(case) -> raw liver/lesion masks for :func:`evaluate_pipeline`."""

    def predict(case):
        out = {}
        if liver_model is not None:
            lg = infer_logits(liver_model, case.image, liver_cfg.crop_size, liver_cfg.slices,
                              liver_cfg.inference_batch, liver_cfg.tile_overlap)
            out["liver"] = decode(lg, head_mode(liver_model))[1]
        if lesion_model is not None:
            lg = infer_logits(lesion_model, case.image, lesion_cfg.crop_size, lesion_cfg.slices,
                              lesion_cfg.inference_batch, lesion_cfg.tile_overlap)
            out["lesion"] = decode(lg, head_mode(lesion_model))[1]
        return out

    return predict


@dataclass
class PipelineResult:
    kind: str
    liver: StageResult
    lesion: StageResult
    variant: str | None = None

    def arms(self) -> dict:
        """name -> (liver model, lesion model) for before/after comparisons."""
        arms = {"initial": (self.liver.initial, self.lesion.initial)}
        if self.variant and (self.liver.mined or self.lesion.mined):
            arms[f"mined-{self.variant}"] = (self.liver.final(self.variant), self.lesion.final(self.variant))
        return arms


def run_cascade(dataset, liver_mcfg: ModelConfig, lesion_mcfg: ModelConfig, liver_tcfg: TrainConfig,
                lesion_tcfg: TrainConfig, variant: str | None = "dice", mine_liver: bool = True,
                mine_lesion: bool = True, seed: int = 0) -> PipelineResult:
    """
    Stage 1 trains (and optionally mines) the liver model; stage 2 trains
    the lesion model on liver crops, again with optional mining. Lesion
    validation and mining are restricted to the initial liver prediction.
    """
    cases = as_cases(dataset)
    for mc, tc in ((liver_mcfg, liver_tcfg), (lesion_mcfg, lesion_tcfg)):
        if len(tc.crop_size) != mc.dims:
            raise ConfigurationError(f"crop_size {tc.crop_size} does not fit a {mc.dims}D model")
    liver = run_liver_stage(cases, liver_mcfg, liver_tcfg, [variant] if variant and mine_liver else [], seed)
    lesion = run_lesion_stage(cases, lesion_mcfg, lesion_tcfg, liver.initial,
                              [variant] if variant and mine_lesion else [], seed)
    return PipelineResult("cascade", liver, lesion, variant)


def evaluate_arms(result, cases, liver_cfg, lesion_cfg, split: str = "val", **post) -> list:
    reports = []
    sel = [c for c in cases if c.split == split] if split != "all" else list(cases)
    for name, (lm, sm) in result.arms().items():
        pred = (combined_predictor(lm, sm, liver_cfg) if result.kind == "combined"
                else cascade_predictor(lm, sm, liver_cfg, lesion_cfg))
        reports.append(evaluate_pipeline(pred, sel, name, split, **post))
    return reports


# ---------------------------------------------------------------------------
# combined (simultaneous) 2D setup
# ---------------------------------------------------------------------------

def combined_predictor(liver_model, lesion_model, cfg: TrainConfig):
    def predict(case):
        lg = infer_logits(liver_model, case.image, cfg.crop_size, cfg.slices, cfg.inference_batch)
        fg, liver = decode(lg, head_mode(liver_model))
        sg = infer_logits(lesion_model, case.image, cfg.crop_size, cfg.slices, cfg.inference_batch, extra=fg)
        return {"liver": liver, "lesion": decode(sg, head_mode(lesion_model))[1]}

    return predict


def _combined_fit(liver_net, lesion_net, cases, arrays, cfg, epochs, patience, losses, stage, lr=None):
    """Joint loop: both nets step on the same patches; the lesion net sees the detached liver probability."""
    sampler = PatchSampler(cases, arrays, cfg, label_key="liver")
    dev = next(liver_net.parameters()).device

    def step(batch):
        x = batch["image"]
        ll = liver_net(x)
        prob = foreground_tensor(ll, head_mode(liver_net)).detach()
        sl = lesion_net(torch.cat([x, prob[:, None]], 1))
        loss_l = stage_loss(losses[0], ll, {"label": batch["liver"], "weight": batch.get("weight"),
                                             "err": batch.get("err_liver"), "targets": batch.get("t_liver")})
        loss_s = stage_loss(losses[1], sl, {"label": batch["lesion"], "weight": batch.get("w_lesion"),
                                             "err": batch.get("err_lesion"), "targets": batch.get("t_lesion")})
        return loss_l + loss_s, {"liver": loss_l.item(), "lesion": loss_s.item()}

    val = [c for c in cases if c.split == "val"]

    def validate():
        if not val:
            return float("nan"), float("nan")
        pred = combined_predictor(liver_net, lesion_net, cfg)
        dices, vloss = [], []
        for c in val:
            out = pred(c)
            liver = stage_postprocess(out["liver"], "liver")
            lesion = stage_postprocess(out["lesion"], "lesion", liver)
            ds = [dice_per_volume(liver, c.liver)]
            if c.lesion.any():
                ds.append(dice_per_volume(lesion, c.lesion))
            dices.append(float(np.mean(ds)))
            lg = infer_logits(liver_net, c.image, cfg.crop_size, cfg.slices, cfg.inference_batch)
            a = arrays[c.id]
            targets = {"label": a["liver"]}
            for src, dst in (("weight", "weight"), ("err_liver", "err"), ("t_liver", "targets")):
                if src in a:
                    targets[dst] = a[src]
            with torch.no_grad():
                t, b = volume_batch(lg, targets, 2, dev)
                vloss.append(stage_loss(losses[0], t, b).item())
        return float(np.mean(vloss)), float(np.mean(dices))

    return fit([liver_net, lesion_net], step, validate, sampler, cfg, epochs, patience, stage, lr=lr)


def run_combined(dataset, liver_mcfg: ModelConfig, lesion_mcfg: ModelConfig, cfg: TrainConfig,
                 variant: str | None = "dice", seed: int = 0, initial=None) -> PipelineResult:
    """
    Train liver and lesion networks in one loop (joint loss = liver pwce +
    lesion combined loss), then optionally mine both heads at once. The
    lesion network takes the image plus the liver foreground probability.
    ``initial`` = (liver, lesion) skips the initial training.
    """
    cases = as_cases(dataset)
    if liver_mcfg.dims != 2 or lesion_mcfg.dims != 2:
        raise ConfigurationError("the combined setup is 2D only")
    if lesion_mcfg.in_channels != liver_mcfg.in_channels + 1:
        raise ConfigurationError("lesion net needs one more input channel than the liver net (liver probability)")
    setup_determinism(cfg)
    dev = resolve_device(cfg.device)
    arrays = {}
    for c in cases:
        arrays[c.id] = {"liver": c.liver, "lesion": c.lesion}
        if cfg.weight_maps:
            arrays[c.id]["weight"] = distance_weight_map(c.liver, cfg.w0, cfg.sigma)
            arrays[c.id]["w_lesion"] = distance_weight_map(c.lesion, cfg.w0, cfg.sigma)
    if initial is None:
        liver_net = build_unet(liver_mcfg, stage_seed(seed, LIVER_SEED)).to(dev)
        lesion_net = build_unet(lesion_mcfg, stage_seed(seed, LESION_SEED)).to(dev)
        hist = _combined_fit(liver_net, lesion_net, cases, arrays, cfg, cfg.epochs, cfg.patience,
                             ("pwce", "combined"), "combined/initial")
    else:
        liver_net, lesion_net = (m.to(dev) for m in initial)
        hist = TrainHistory("combined/initial")
    liver = StageResult("liver", liver_net, hist)
    lesion = StageResult("lesion", lesion_net, hist)
    if variant:
        mined = mine_combined(liver_net, lesion_net, cases, arrays, cfg, variant)
        liver.mined[variant] = (mined[0], mined[2], mined[3])
        lesion.mined[variant] = (mined[1], mined[2], mined[4])
    return PipelineResult("combined", liver, lesion, variant)


def mine_combined(liver_net, lesion_net, cases, arrays, cfg: TrainConfig, variant: str):
    """Mine both heads, append error heads to both nets and retrain them jointly."""
    if variant not in ("pwce", "dice"):
        raise ParameterError(f"unknown mining variant {variant!r}")
    setup_determinism(cfg)
    pred = combined_predictor(liver_net, lesion_net, cfg)
    liver_errs, liver_rep = mine_errors(liver_net, cases, "liver", cfg, variant=variant)
    # lesion errors need the liver probability input, so mine them from full predictions
    lesion_errs, vols = {}, []
    for c in cases:
        out = pred(c)
        err = mine_error_mask(out["lesion"], c.lesion)
        lesion_errs[c.id] = err
        vols.append({"volume_id": c.id, "split": c.split, "in_training_set": c.split == "train", **class_counts(err)})
    tr = [v for v in vols if v["in_training_set"]]
    lesion_rep = {"target": "lesion", "variant": variant, "volumes": vols,
                  "totals": {k: int(sum(v[k] for v in tr)) for k in ("TN", "FP", "FN", "TP")},
                  "flagged_not_in_training_set": [v["volume_id"] for v in vols if not v["in_training_set"]]}
    arr = {}
    for c in cases:
        a = dict(arrays[c.id])
        a["err_liver"] = liver_errs[c.id]
        a["t_liver"] = build_mining_targets(liver_errs[c.id], c.liver, variant).channels
        a["err_lesion"] = lesion_errs[c.id]
        a["t_lesion"] = build_mining_targets(lesion_errs[c.id], c.lesion, variant).channels
        if not (variant == "pwce" and cfg.mining_class_weights):
            a.pop("weight", None)
            a.pop("w_lesion", None)
        arr[c.id] = a
    ml = append_error_head(liver_net, seed=cfg.seed + 1, variant=variant,
                           prior=target_prior(cases, arr, variant, "liver"), init=cfg.error_head_init)
    ms = append_error_head(lesion_net, seed=cfg.seed + 2, variant=variant,
                           prior=target_prior(cases, arr, variant, "lesion"), init=cfg.error_head_init)
    freeze_binary_head(ml)
    freeze_binary_head(ms)
    loss = f"mining-{variant}"
    hist = _combined_fit(ml, ms, cases, arr, cfg, cfg.retrain_epochs, cfg.retrain_patience, (loss, loss),
                         f"combined/mining-{variant}", lr=cfg.retrain_lr)
    return ml, ms, hist, liver_rep, lesion_rep


# ---------------------------------------------------------------------------
# error-type control
# ---------------------------------------------------------------------------

def run_control(dataset, liver_initial, lesion_initial, liver_cfg: TrainConfig, lesion_cfg: TrainConfig,
                variants=("dice", "pwce"), split: str = "val", regions: dict | None = None,
                connectivity: int = 26, mined: dict | None = None) -> dict:
    """
    From fixed initial liver and lesion checkpoints, retrain each stage
    under every mining variant and report error counts per arm. Lesion arms
    all use the initial liver prediction as their region, so only the
    lesion network differs between them. ``mined`` ({target: {variant:
    model}}) supplies arms retrained earlier from the same checkpoints;
    their history and report entries are None.
    """
    if liver_initial is None or lesion_initial is None:
        raise DependencyError("control needs initial liver and lesion checkpoints")
    cases = as_cases(dataset)
    mined = mined or {}
    if regions is None:
        regions = predict_regions(liver_initial, cases, liver_cfg)
    todo = {t: [v for v in variants if v not in mined.get(t, {})] for t in ("liver", "lesion")}
    liver = run_liver_stage(cases, None, liver_cfg, todo["liver"], initial=liver_initial)
    lesion = run_lesion_stage(cases, None, lesion_cfg, None, todo["lesion"], initial=lesion_initial,
                              regions=regions)
    for stage in (liver, lesion):
        for v, model in mined.get(stage.target, {}).items():
            stage.mined[v] = (model, None, None)
    sel = [c for c in cases if c.split == split] if split != "all" else list(cases)
    arms = {"initial": (liver_initial, lesion_initial)}
    for v in variants:
        arms[f"mined-{v}"] = (liver.final(v), lesion.final(v))
    reports = []
    for name, (lm, sm) in arms.items():
        rl = evaluate_pipeline(cascade_predictor(lm, None, liver_cfg, lesion_cfg), sel, name, split,
                               connectivity=connectivity)

        def lesion_only(case, sm=sm):
            raw = cascade_predictor(None, sm, liver_cfg, lesion_cfg)(case)["lesion"]
            return {"lesion": (raw.astype(bool) & regions[case.id].astype(bool)).astype(np.uint8)}

        rs = evaluate_pipeline(lesion_only, sel, name, split, connectivity=connectivity)
        rep = MetricsReport(name, split, rl.records + rs.records,
                            dict(rl.meta, lesion_region="initial liver prediction"))
        reports.append(rep)
    return {"liver": liver, "lesion": lesion, "reports": reports, "regions": regions}
