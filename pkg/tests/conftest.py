import itertools

import numpy as np
import pytest
import torch

from maskmine.model import ModelConfig
from maskmine.trainer.loop import TrainConfig
from maskmine.voldata import SyntheticSpec, load_cases, make_synthetic_dataset

torch.set_num_threads(1)


def tiny_spec(**kw) -> SyntheticSpec:
    base = dict(n_volumes=4, shape=(8, 32, 32), spacing=(2.0, 1.0, 1.0), organ_radius=(6.0, 9.0),
                lesion_count=(1, 2), lesion_radius=(2.0, 4.0), val_fraction=0.25, seed=3)
    base.update(kw)
    return SyntheticSpec(**base)


def tiny_model(**kw) -> ModelConfig:
    base = dict(dims=2, depth=2, base_channels=4, in_channels=3)
    base.update(kw)
    return ModelConfig(**base)


def tiny_train(**kw) -> TrainConfig:
    base = dict(epochs=1, retrain_epochs=1, batch_size=4, lr=1e-3, patches_per_epoch=8,
                crop_size=(16, 16), inference_batch=8, crop_margin=4, augment=None)
    base.update(kw)
    return TrainConfig(**base)


@pytest.fixture(scope="session")
def tiny_manifest(tmp_path_factory):
    out = tmp_path_factory.mktemp("synthetic")
    make_synthetic_dataset(tiny_spec(), out)
    return out / "manifest.json"


@pytest.fixture
def tiny_cases(tiny_manifest):
    return load_cases(tiny_manifest)


# ---------------------------------------------------------------------------
# independent oracles (plain loops, no numpy vectorisation tricks)
# ---------------------------------------------------------------------------

def brute_error_mask(pred, gt):
    out = np.zeros(pred.shape, np.uint8)
    for idx in np.ndindex(pred.shape):
        p, g = int(pred[idx]), int(gt[idx])
        out[idx] = {(0, 0): 0, (1, 0): 1, (0, 1): 2, (1, 1): 3}[(p, g)]
    return out


def brute_counts(pred, gt):
    c = {"TN": 0, "FP": 0, "FN": 0, "TP": 0}
    for p, g in zip(np.ravel(pred), np.ravel(gt)):
        c[("T" if p == g else "F") + ("P" if p else "N")] += 1
    return c


def brute_dice(pred, gt):
    inter = sum(1 for p, g in zip(np.ravel(pred), np.ravel(gt)) if p and g)
    total = sum(1 for p in np.ravel(pred) if p) + sum(1 for g in np.ravel(gt) if g)
    return 1.0 if total == 0 else 2.0 * inter / total


def brute_collapse(logits4):
    out = np.zeros(logits4.shape[1:], np.uint8)
    for idx in np.ndindex(out.shape):
        vals = [logits4[(c,) + idx] for c in range(4)]
        best = 0
        for c in range(1, 4):
            if vals[c] > vals[best]:
                best = c
        out[idx] = 1 if best in (2, 3) else 0
    return out


def neighbours(idx, shape, connectivity):
    nd = len(shape)
    for off in itertools.product((-1, 0, 1), repeat=nd):
        if not any(off):
            continue
        if connectivity == 6 and sum(map(abs, off)) != 1:
            continue
        q = tuple(i + o for i, o in zip(idx, off))
        if all(0 <= a < s for a, s in zip(q, shape)):
            yield q


def flood_components(mask, connectivity):
    """Components as lists of voxel indices, in order of their first voxel (C order)."""
    seen = np.zeros(mask.shape, bool)
    comps = []
    for idx in np.ndindex(mask.shape):
        if not mask[idx] or seen[idx]:
            continue
        stack, comp = [idx], []
        seen[idx] = True
        while stack:
            v = stack.pop()
            comp.append(v)
            for q in neighbours(v, mask.shape, connectivity):
                if mask[q] and not seen[q]:
                    seen[q] = True
                    stack.append(q)
        comps.append(comp)
    return comps


def brute_largest(mask, connectivity):
    comps = flood_components(mask, connectivity)
    out = np.zeros(mask.shape, np.uint8)
    if comps:
        best = max(range(len(comps)), key=lambda i: (len(comps[i]), -i))
        for v in comps[best]:
            out[v] = 1
    return out


# ---------------------------------------------------------------------------
# acceptance summary: one line per criterion at the end of the session
# ---------------------------------------------------------------------------

ACCEPTANCE: dict = {}


def record_criterion(number: int, title: str, ok: bool, detail: str = "") -> bool:
    line = f"CRITERION {number} [{'PASS' if ok else 'FAIL'}] {title}"
    ACCEPTANCE[number] = line + (f" :: {detail}" if detail else "")
    print(ACCEPTANCE[number], flush=True)
    return ok


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        terminalreporter.write_line(ACCEPTANCE[n])
