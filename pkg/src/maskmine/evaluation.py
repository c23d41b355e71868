"""
Segmentation metrics, largest-component postprocessing and report output.
"""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Iterable

import numpy as np
from scipy import ndimage

from .errors import ShapeError

log = logging.getLogger(__name__)

EMPTY_DICE = 1.0
ERROR_TYPES = ("FP", "FN", "TP")


def _pair(pred, gt):
    p = np.asarray(getattr(pred, "voxels", pred)).astype(bool)
    g = np.asarray(getattr(gt, "voxels", gt)).astype(bool)
    if p.shape != g.shape:
        raise ShapeError(f"prediction {p.shape} and ground truth {g.shape} differ in shape")
    return p, g


def dice_per_volume(pred, gt) -> float:
    """2|P & G| / (|P| + |G|); two empty masks score 1.0."""
    p, g = _pair(pred, gt)
    denom = int(p.sum()) + int(g.sum())
    if denom == 0:
        return EMPTY_DICE
    return 2.0 * int((p & g).sum()) / denom


def error_counts(pred, gt) -> dict:
    p, g = _pair(pred, gt)
    tp = int((p & g).sum())
    fp = int(p.sum()) - tp
    fn = int(g.sum()) - tp
    return {"TN": p.size - tp - fp - fn, "FP": fp, "FN": fn, "TP": tp}


def _structure(ndim: int, connectivity: int):
    if connectivity not in (6, 26):
        raise ValueError(f"connectivity must be 6 or 26, got {connectivity}")
    return ndimage.generate_binary_structure(ndim, 1 if connectivity == 6 else ndim)


def largest_component(mask, connectivity: int = 26) -> np.ndarray:
    """
    Keep only the largest foreground component. Ties go to the component
    whose first voxel (in C order) comes first. For 2D input, 6/26 map to
    4/8-connectivity.
    """
    m = np.asarray(getattr(mask, "voxels", mask)).astype(bool)
    lab, n = ndimage.label(m, structure=_structure(m.ndim, connectivity))
    if n <= 1:
        return m.astype(np.uint8)
    # labels are assigned in raster order, so argmax's first-hit rule is the tie rule
    sizes = np.bincount(lab.ravel())[1:]
    return (lab == int(np.argmax(sizes)) + 1).astype(np.uint8)


# ---------------------------------------------------------------------------
# reports
# ---------------------------------------------------------------------------

@dataclass
class VolumeRecord:
    volume_id: str
    target: str
    dice: float
    TN: int
    FP: int
    FN: int
    TP: int

    @property
    def empty_gt(self) -> bool:
        return self.FN + self.TP == 0


@dataclass
class MetricsReport:
    name: str = "initial"
    split: str = "val"
    records: list = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    def targets(self) -> list:
        return sorted({r.target for r in self.records}, key=["liver", "lesion"].index)

    def included(self, target: str) -> list:
        # empty lesion ground truth carries no overlap information
        return [r for r in self.records if r.target == target and not (target == "lesion" and r.empty_gt)]

    def excluded(self, target: str) -> list:
        keep = {id(r) for r in self.included(target)}
        return [r for r in self.records if r.target == target and id(r) not in keep]

    def mean_dice(self, target: str) -> float:
        recs = self.included(target)
        return float(np.mean([r.dice for r in recs])) if recs else float("nan")

    def totals(self, target: str) -> dict:
        recs = [r for r in self.records if r.target == target]
        return {k: int(sum(getattr(r, k) for r in recs)) for k in ("TN", "FP", "FN", "TP")}

    def aggregate(self) -> dict:
        return {t: {"mean_dice": self.mean_dice(t), "n": len(self.included(t)), **self.totals(t)}
                for t in self.targets()}

    def to_dict(self) -> dict:
        return {"name": self.name, "split": self.split, "meta": self.meta,
                "records": [asdict(r) for r in self.records], "aggregate": self.aggregate()}

    @classmethod
    def from_dict(cls, d: dict) -> "MetricsReport":
        return cls(d["name"], d["split"], [VolumeRecord(**r) for r in d["records"]], d.get("meta", {}))


def evaluate_pipeline(predict: Callable, cases: Iterable, name: str = "initial", split: str = "val",
                      largest_cc: bool = True, mask_lesion: bool = True,
                      connectivity: int = 26) -> MetricsReport:
    """
    Score a pipeline over ``cases``. ``predict(case)`` returns raw binary
    masks keyed by target ("liver" and/or "lesion"). The liver prediction is
    reduced to its largest component and the lesion prediction is restricted
    to the (postprocessed) liver prediction.
    """
    report = MetricsReport(name, split, meta={
        "empty_empty_dice": EMPTY_DICE, "largest_component": largest_cc,
        "lesion_masked_by_liver": mask_lesion, "connectivity": connectivity,
        "lesion_mean_excludes_empty_gt": True})
    for case in cases:
        raw = predict(case)
        masks = postprocess(raw, largest_cc, mask_lesion, connectivity)
        for target in ("liver", "lesion"):
            if target not in masks:
                continue
            gt = getattr(case, target)
            counts = error_counts(masks[target], gt)
            report.records.append(VolumeRecord(case.id, target, dice_per_volume(masks[target], gt), **counts))
    return report


def postprocess(raw: dict, largest_cc: bool = True, mask_lesion: bool = True, connectivity: int = 26) -> dict:
    out = dict(raw)
    if "liver" in out:
        out["liver"] = largest_component(out["liver"], connectivity) if largest_cc else np.asarray(out["liver"], np.uint8)
    if "lesion" in out and mask_lesion and "liver" in out:
        out["lesion"] = (np.asarray(out["lesion"]).astype(bool) & out["liver"].astype(bool)).astype(np.uint8)
    return out


def seed_summary(reports: list) -> dict:
    """Mean and std of volume-averaged dice over repeated runs of the same arm."""
    out = {}
    for t in reports[0].targets():
        vals = [r.mean_dice(t) for r in reports]
        out[t] = {"mean": float(np.mean(vals)), "std": float(np.std(vals)), "runs": vals}
    return out


def dice_table(reports: list) -> list:
    """One row per (report, target); ``diff`` is relative to the first report."""
    rows = []
    for t in reports[0].targets():
        base = reports[0].mean_dice(t)
        for r in reports:
            rows.append({"report": r.name, "target": t, "mean_dice": r.mean_dice(t),
                         "diff": r.mean_dice(t) - base})
    return rows


def bar_groups(reports: list, target: str) -> dict:
    """FP/FN/TP totals per report, each error type normalised to its maximum."""
    groups = {}
    for kind in ERROR_TYPES:
        raw = np.array([r.totals(target)[kind] for r in reports], dtype=float)
        top = raw.max()
        groups[kind] = {r.name: float(v / top) if top > 0 else 0.0 for r, v in zip(reports, raw)}
    return groups


def _write_csv(path: Path, header: list, rows: list):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([repr(v) if isinstance(v, float) else v for v in row])


def _bar_axis(ax, reports: list, target: str) -> dict:
    groups = bar_groups(reports, target)
    n = len(reports)
    width = 0.8 / n
    for i, r in enumerate(reports):
        xs = [k + (i - (n - 1) / 2) * width for k in range(len(ERROR_TYPES))]
        ax.bar(xs, [groups[kind][r.name] for kind in ERROR_TYPES], width, label=r.name)
    ax.set_xticks(range(len(ERROR_TYPES)))
    ax.set_xticklabels(ERROR_TYPES)
    ax.set_ylabel("normalised voxel count")
    ax.set_title(f"{target}: error types")
    ax.legend(fontsize=7)
    return groups


def plot_bar_groups(reports: list, target, path) -> dict:
    """
    Grouped FP/FN/TP bars per report. ``target`` is one target name or a
    list of them (one panel each, all in the same image).
    """
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    targets = [target] if isinstance(target, str) else list(target)
    fig, axes = plt.subplots(1, len(targets), figsize=(5 * len(targets), 3), squeeze=False)
    groups = {t: _bar_axis(ax, reports, t) for t, ax in zip(targets, axes[0])}
    fig.tight_layout()
    fig.savefig(path, dpi=100, metadata={"Software": None})
    plt.close(fig)
    return groups[target] if isinstance(target, str) else groups


def overlay_image(image: np.ndarray, gt: np.ndarray, pred: np.ndarray) -> np.ndarray:
    """RGB slice: grey image, missed foreground in red, spurious foreground in green."""
    img = np.clip(np.asarray(image, float), 0, 1)
    rgb = np.stack([img] * 3, -1)
    g, p = np.asarray(gt).astype(bool), np.asarray(pred).astype(bool)
    rgb[g & ~p] = (1.0, 0.0, 0.0)
    rgb[p & ~g] = (0.0, 1.0, 0.0)
    return rgb


def emit_report(reports: list, out_dir, overlays: list | None = None, charts: bool = True) -> dict:
    """
    Write ``metrics.csv`` / ``metrics.json`` for all reports; with two or
    more reports also ``dice_table.csv`` and (if ``charts``) one error-type
    bar chart per target. ``overlays`` holds dicts with image/gt/pred slices
    and a name.
    """
    if not reports:
        raise ValueError("emit_report needs at least one report")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    files = {}
    rows = []
    for rep in reports:
        for r in rep.records:
            rows.append([rep.name, rep.split, r.volume_id, r.target, r.dice, r.TN, r.FP, r.FN, r.TP, ""])
        for t in rep.targets():
            tot = rep.totals(t)
            rows.append([rep.name, rep.split, "__mean__", t, rep.mean_dice(t), tot["TN"], tot["FP"],
                         tot["FN"], tot["TP"], f"volume-averaged over {len(rep.included(t))} volumes"])
            for r in rep.excluded(t):
                rows.append([rep.name, rep.split, r.volume_id, t, "", "", "", "", "",
                             "excluded from mean: empty ground truth"])
    files["csv"] = out / "metrics.csv"
    _write_csv(files["csv"], ["report", "split", "volume_id", "target", "dice", "TN", "FP", "FN", "TP", "note"], rows)
    files["json"] = out / "metrics.json"
    files["json"].write_text(json.dumps([r.to_dict() for r in reports], indent=2, sort_keys=True))
    if len(reports) > 1:
        files["table"] = out / "dice_table.csv"
        table = dice_table(reports)
        _write_csv(files["table"], ["report", "target", "mean_dice", "diff"],
                   [[r["report"], r["target"], r["mean_dice"], r["diff"]] for r in table])
        for t in reports[0].targets() if charts else ():
            files[f"bars_{t}"] = out / f"error_types_{t}.png"
            plot_bar_groups(reports, t, files[f"bars_{t}"])
    if overlays:
        import matplotlib

        matplotlib.use("Agg")
        import matplotlib.pyplot as plt

        for i, ov in enumerate(overlays):
            p = out / f"overlay_{i:02d}_{ov.get('name', 'slice')}.png"
            plt.imsave(p, overlay_image(ov["image"], ov["gt"], ov["pred"]))
            files[f"overlay_{i}"] = p
    log.info("wrote report files to %s", out)
    return files
