"""
Command-line entry point.

    maskmine [--config desk] [--seed N] [--overwrite] [--device cpu] [--deterministic] COMMAND

Commands: synth, train, mine, eval, full, control. Artifacts go to
``<root>/<config hash>-<timestamp>/`` where root is ``$MASKMINE_RUN_DIR`` or
``eval.output_dir`` (default ``./runs``). A later command with the same
effective config reuses the most recent run directory for that hash, so ``train`` followed by ``mine`` and
``eval`` works step by step. Existing artifacts are reused unless
``--overwrite`` is given.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .config import RunConfig, load_config, save_config
from .errors import ConfigurationError, DependencyError, MaskMineError
from .evaluation import emit_report, evaluate_pipeline, plot_bar_groups
from .mining import export_error_mask
from .model import load_checkpoint, save_checkpoint
from .trainer import pipelines as P
from .trainer.loop import TrainHistory, mine_and_retrain, mine_errors, predict_regions
from .voldata import load_cases, make_synthetic_dataset

log = logging.getLogger("maskmine")

COMMANDS = ("synth", "train", "mine", "eval", "full", "control")
EXIT_RUNTIME, EXIT_CONFIG = 1, 2


# ---------------------------------------------------------------------------
# run directory
# ---------------------------------------------------------------------------

class Run:
    """Paths and shared state of one run directory."""

    def __init__(self, cfg: RunConfig, root=None, overwrite: bool = False):
        self.cfg = cfg
        self.overwrite = overwrite
        self.root = Path(root or os.environ.get("MASKMINE_RUN_DIR") or cfg.eval.output_dir)
        self.digest = cfg.digest()
        existing = sorted(self.root.glob(f"{self.digest}-*"))
        if existing:
            self.dir = existing[-1]
        else:
            self.dir = self.root / f"{self.digest}-{time.strftime('%Y%m%d-%H%M%S')}"
        self.dir.mkdir(parents=True, exist_ok=True)
        save_config(cfg, self.dir / "config.json")
        self._cases = None

    def path(self, *parts) -> Path:
        p = self.dir.joinpath(*parts)
        p.parent.mkdir(parents=True, exist_ok=True)
        return p

    def fresh(self, *paths) -> bool:
        """True when every path exists and --overwrite was not given."""
        return not self.overwrite and all(Path(p).exists() for p in paths)

    # dataset ------------------------------------------------------------

    @property
    def manifest(self) -> Path:
        if self.cfg.dataset.manifest:
            return Path(self.cfg.dataset.manifest)
        return self.dir / "data" / "manifest.json"

    def cases(self):
        if self._cases is None:
            if not self.manifest.exists():
                if self.cfg.dataset.manifest:
                    raise DependencyError(f"dataset manifest {self.manifest} does not exist")
                raise DependencyError("no dataset in the run directory; run `maskmine synth` first")
            self._cases = load_cases(self.manifest)
        return self._cases

    # checkpoints --------------------------------------------------------

    def ckpt(self, target: str, arm: str = "initial") -> Path:
        return self.path("checkpoints", f"{target}_{arm}.pt")

    def load(self, target: str, arm: str = "initial", what: str = "checkpoint"):
        p = self.ckpt(target, arm)
        if not p.exists():
            hint = "train" if arm == "initial" else "mine"
            raise DependencyError(f"missing {what} {p}; run `maskmine {hint}` first")
        mcfg = getattr(self.cfg.model, target)
        if self.cfg.pipeline == "combined2d" and target == "lesion":
            mcfg = _combined_lesion_cfg(self.cfg)
        return load_checkpoint(p, expected_config=mcfg,
                               expected_head="binary" if arm == "initial" else "error")

    def save(self, model, target: str, arm: str, meta: dict):
        save_checkpoint(model, self.ckpt(target, arm), dict(meta, config_digest=self.digest))


def _combined_lesion_cfg(cfg: RunConfig):
    from dataclasses import replace

    lm = cfg.model.lesion
    want = cfg.model.liver.in_channels + 1
    return lm if lm.in_channels == want else replace(lm, in_channels=want)


def _write_json(path: Path, obj):
    path.write_text(json.dumps(obj, indent=2, sort_keys=True))


def _save_history(run: Run, hist: TrainHistory, name: str):
    hist.to_csv(run.path("history", f"{name}.csv"))


def _variant_mines(cfg: RunConfig, target: str) -> bool:
    return getattr(cfg.mining, target)


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_synth(run: Run) -> Path:
    if run.cfg.dataset.manifest:
        log.info("dataset given by manifest %s; nothing to generate", run.cfg.dataset.manifest)
        return run.manifest
    if run.fresh(run.manifest):
        log.info("synthetic dataset already present at %s", run.manifest.parent)
        return run.manifest
    make_synthetic_dataset(run.cfg.dataset.synthetic, run.manifest.parent)
    log.info("wrote %d synthetic volumes to %s", run.cfg.dataset.synthetic.n_volumes, run.manifest.parent)
    run._cases = None
    return run.manifest


def cmd_train(run: Run):
    cfg = run.cfg
    cases = run.cases()
    outs = [run.ckpt("liver"), run.ckpt("lesion")]
    if run.fresh(*outs):
        log.info("initial checkpoints exist; skipping training (use --overwrite to retrain)")
        return
    if cfg.pipeline == "combined2d":
        res = P.run_combined(cases, cfg.model.liver, _combined_lesion_cfg(cfg), cfg.train.liver,
                             variant=None, seed=cfg.seed)
        _save_history(run, res.liver.history, "combined_initial")
        run.save(res.liver.initial, "liver", "initial", {"stage": "initial"})
        run.save(res.lesion.initial, "lesion", "initial", {"stage": "initial"})
        return
    liver = P.run_liver_stage(cases, cfg.model.liver, cfg.train.liver, (), cfg.seed)
    _save_history(run, liver.history, "liver_initial")
    run.save(liver.initial, "liver", "initial", {"stage": "initial", "best_epoch": liver.history.best_epoch})
    lesion = P.run_lesion_stage(cases, cfg.model.lesion, cfg.train.lesion, liver.initial, (), cfg.seed)
    _save_history(run, lesion.history, "lesion_initial")
    run.save(lesion.initial, "lesion", "initial", {"stage": "initial", "best_epoch": lesion.history.best_epoch})


def _export_masks(run: Run, target: str, variant: str, errs: dict, cases):
    spacing = {c.id: c.spacing for c in cases}
    for cid, err in sorted(errs.items()):
        export_error_mask(err, run.path("error_masks", variant, f"{cid}_{target}.nii.gz"), spacing[cid])


def _mine_one(run: Run, target: str, variant: str, initial, regions=None):
    """Mine and retrain one cascade stage; writes checkpoint, history and report."""
    cfg = run.cfg
    tcfg = getattr(cfg.train, target)
    cases = run.cases()
    arm = f"mined-{variant}"
    if run.fresh(run.ckpt(target, arm)):
        log.info("%s %s checkpoint exists; skipping", target, arm)
        return
    model, hist, report = mine_and_retrain(initial, cases, tcfg, variant, target, regions)
    if cfg.mining.export_masks:
        errs, _ = mine_errors(initial, cases, target, tcfg, regions, variant)
        _export_masks(run, target, variant, errs, cases)
    _save_history(run, hist, f"{target}_{arm}")
    _write_json(run.path("mining", f"{target}_{variant}.json"), report)
    run.save(model, target, arm, {"stage": arm, "best_epoch": hist.best_epoch})


def cmd_mine(run: Run, variants=None):
    cfg = run.cfg
    variants = variants or (cfg.mining.variant,)
    liver = run.load("liver", what="initial liver checkpoint")
    lesion = run.load("lesion", what="initial lesion checkpoint")
    cases = run.cases()
    if cfg.pipeline == "combined2d":
        for v in variants:
            arm = f"mined-{v}"
            if run.fresh(run.ckpt("liver", arm), run.ckpt("lesion", arm)):
                continue
            res = P.run_combined(cases, cfg.model.liver, _combined_lesion_cfg(cfg), cfg.train.liver,
                                 variant=v, seed=cfg.seed, initial=(liver, lesion))
            _save_history(run, res.liver.mined[v][1], f"combined_{arm}")
            _write_json(run.path("mining", f"liver_{v}.json"), res.liver.mined[v][2])
            _write_json(run.path("mining", f"lesion_{v}.json"), res.lesion.mined[v][2])
            run.save(res.liver.mined[v][0], "liver", arm, {"stage": arm})
            run.save(res.lesion.mined[v][0], "lesion", arm, {"stage": arm})
        return
    regions = None
    for v in variants:
        if _variant_mines(cfg, "liver"):
            _mine_one(run, "liver", v, liver)
        if _variant_mines(cfg, "lesion"):
            if regions is None:
                regions = predict_regions(liver, cases, cfg.train.liver)
            _mine_one(run, "lesion", v, lesion, regions)


def _arm_models(run: Run, arm: str):
    """(liver, lesion) models of an arm; stages that were not mined keep their initial model."""
    out = []
    for target in ("liver", "lesion"):
        if arm != "initial" and run.ckpt(target, arm).exists():
            out.append(run.load(target, arm))
        elif arm != "initial" and _variant_mines(run.cfg, target) and run.cfg.pipeline != "combined2d":
            raise DependencyError(f"missing {target} {arm} checkpoint; run `maskmine mine` first")
        else:
            out.append(run.load(target, "initial"))
    return tuple(out)


def _predictor(run: Run, liver, lesion):
    cfg = run.cfg
    if cfg.pipeline == "combined2d":
        return P.combined_predictor(liver, lesion, cfg.train.liver)
    return P.cascade_predictor(liver, lesion, cfg.train.liver, cfg.train.lesion)


def _split(cases, split: str):
    return list(cases) if split == "all" else [c for c in cases if c.split == split]


def _overlays(run: Run, predict, cases, n: int) -> list:
    items = []
    for c in cases[:n]:
        raw = predict(c)
        from .evaluation import postprocess

        masks = postprocess(raw, run.cfg.eval.largest_component, run.cfg.eval.mask_lesion, run.cfg.eval.connectivity)
        for target, pred in masks.items():
            gt = getattr(c, target)
            z = int(np.argmax(gt.reshape(gt.shape[0], -1).sum(1))) if gt.any() else gt.shape[0] // 2
            items.append({"name": f"{c.id}_{target}", "image": c.image[z], "gt": gt[z], "pred": pred[z]})
    return items


def cmd_eval(run: Run, arms=None) -> list:
    cfg = run.cfg
    cases = _split(run.cases(), cfg.eval.split)
    if not cases:
        raise ConfigurationError(f"eval.split {cfg.eval.split!r} selects no volumes")
    if arms is None:
        arms = ["initial"]
        mined = f"mined-{cfg.mining.variant}"
        if any(run.ckpt(t, mined).exists() for t in ("liver", "lesion")):
            arms.append(mined)
    post = dict(largest_cc=cfg.eval.largest_component, mask_lesion=cfg.eval.mask_lesion,
                connectivity=cfg.eval.connectivity)
    reports, overlays = [], []
    for arm in arms:
        liver, lesion = _arm_models(run, arm)
        pred = _predictor(run, liver, lesion)
        rep = evaluate_pipeline(pred, cases, arm, cfg.eval.split, **post)
        rep.meta.update(pipeline=cfg.pipeline, seed=cfg.seed, config_digest=run.digest)
        reports.append(rep)
        if arm == arms[-1] and cfg.eval.overlays:
            overlays = _overlays(run, pred, cases, cfg.eval.overlays)
    files = emit_report(reports, run.path("report", "metrics.csv").parent, overlays)
    for rep in reports:
        log.info("%s: %s", rep.name, {t: round(rep.mean_dice(t), 4) for t in rep.targets()})
    log.info("report written to %s", files["csv"].parent)
    return reports


def cmd_full(run: Run) -> list:
    cmd_synth(run)
    cmd_train(run)
    cmd_mine(run)
    return cmd_eval(run)


def cmd_control(run: Run) -> dict:
    """Retrain both mining variants from the same initial checkpoints and compare error types."""
    cfg = run.cfg
    liver = run.load("liver", what="initial liver checkpoint")
    lesion = run.load("lesion", what="initial lesion checkpoint")
    cases = run.cases()
    variants = ("dice", "pwce")
    out_dir = run.path("control", "control.json").parent
    if run.fresh(out_dir / "control.json"):
        log.info("control results exist; skipping")
        return json.loads((out_dir / "control.json").read_text())
    if cfg.pipeline == "combined2d":
        reports = []
        sel = _split(cases, cfg.eval.split)
        post = dict(largest_cc=cfg.eval.largest_component, mask_lesion=cfg.eval.mask_lesion,
                    connectivity=cfg.eval.connectivity)
        reports.append(evaluate_pipeline(P.combined_predictor(liver, lesion, cfg.train.liver), sel,
                                         "initial", cfg.eval.split, **post))
        for v in variants:
            res = P.run_combined(cases, cfg.model.liver, _combined_lesion_cfg(cfg), cfg.train.liver,
                                 variant=v, seed=cfg.seed, initial=(liver, lesion))
            _save_history(run, res.liver.mined[v][1], f"control_combined_mined-{v}")
            reports.append(evaluate_pipeline(
                P.combined_predictor(res.liver.final(v), res.lesion.final(v), cfg.train.liver),
                sel, f"mined-{v}", cfg.eval.split, **post))
    else:
        regions = predict_regions(liver, cases, cfg.train.liver)
        # arms already produced by `mine` from the same checkpoints are reused
        done = {t: {v: run.load(t, f"mined-{v}") for v in variants if run.fresh(run.ckpt(t, f"mined-{v}"))}
                for t in ("liver", "lesion")}
        res = P.run_control(cases, liver, lesion, cfg.train.liver, cfg.train.lesion, variants,
                            cfg.eval.split, regions, cfg.eval.connectivity, mined=done)
        reports = res["reports"]
        for target in ("liver", "lesion"):
            for v, (model, hist, rep) in res[target].mined.items():
                if hist is None:
                    log.info("control: reusing %s mined-%s checkpoint", target, v)
                    continue
                _save_history(run, hist, f"control_{target}_mined-{v}")
                _write_json(out_dir / f"mining_{target}_{v}.json", rep)
    emit_report(reports, out_dir, charts=False)
    targets = reports[0].targets()
    groups = plot_bar_groups(reports, targets, out_dir / "control.png")
    summary = {
        "config_digest": run.digest,
        "seed": cfg.seed,
        "split": cfg.eval.split,
        "arms": {r.name: {t: {"mean_dice": r.mean_dice(t), **r.totals(t)} for t in targets} for r in reports},
        "normalised": groups,
    }
    _write_json(out_dir / "control.json", summary)
    log.info("control written to %s", out_dir)
    return summary


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="maskmine", description="Mask mining for liver and lesion segmentation.")
    ap.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    ap.add_argument("--config", default="desk", help="config file (TOML/JSON) or bundled config name")
    ap.add_argument("--seed", type=int, help="override the global seed")
    ap.add_argument("--overwrite", action="store_true", help="recompute artifacts that already exist")
    ap.add_argument("--device", choices=("cpu", "accelerator"), help="override the compute device")
    ap.add_argument("--deterministic", action=argparse.BooleanOptionalAction, default=None,
                    help="force (or disable) deterministic kernels")
    ap.add_argument("-v", "--verbose", action="store_true")
    ap.add_argument("command", choices=COMMANDS)
    return ap


def resolve_run_config(args) -> RunConfig:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg.seed = args.seed
    if args.device is not None:
        cfg.device = args.device
    if args.deterministic is not None:
        cfg.deterministic = args.deterministic
    cfg.__post_init__()
    return cfg


def run_command(command: str, cfg: RunConfig, root=None, overwrite: bool = False):
    run = Run(cfg, root, overwrite)
    handler = logging.FileHandler(run.dir / "run.log")
    handler.setFormatter(logging.Formatter("%(asctime)s %(name)s %(levelname)s %(message)s"))
    logging.getLogger().addHandler(handler)
    # the run log always records progress, whatever the caller configured
    pkg = logging.getLogger("maskmine")
    level = pkg.level
    if pkg.getEffectiveLevel() > logging.INFO:
        pkg.setLevel(logging.INFO)
    try:
        log.info("%s: run directory %s", command, run.dir)
        result = {"synth": cmd_synth, "train": cmd_train, "mine": cmd_mine, "eval": cmd_eval,
                  "full": cmd_full, "control": cmd_control}[command](run)
        return run, result
    finally:
        logging.getLogger().removeHandler(handler)
        pkg.setLevel(level)
        handler.close()


def main(argv=None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_run_config(args)
    except (ConfigurationError, FileNotFoundError) as exc:
        print(f"maskmine: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        run_command(args.command, cfg, overwrite=args.overwrite)
    except ConfigurationError as exc:
        print(f"maskmine: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (MaskMineError, OSError, RuntimeError, ValueError, ArithmeticError) as exc:
        print(f"maskmine: error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return 0


if __name__ == "__main__":
    sys.exit(main())
