"""
Volume ingestion, intensity windowing, patch sampling, augmentation and the
synthetic liver/lesion phantom generator.

Arrays follow the (axial, height, width) axis order throughout. NIfTI files
store the transposed (width, height, axial) layout, which is what most
viewers expect.
"""

from __future__ import annotations

import json
import logging
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import nibabel as nib
import numpy as np
from scipy import ndimage

from .errors import ConsistencyError, FormatError, ParameterError

log = logging.getLogger(__name__)

TARGETS = ("liver", "lesion")
HU_WINDOW = (-100.0, 600.0)


@dataclass
class Volume:
    voxels: np.ndarray
    spacing: tuple = (1.0, 1.0, 1.0)
    id: str = ""

    def __post_init__(self):
        self.voxels = np.asarray(self.voxels, dtype=np.float32)
        if self.voxels.ndim != 3 or min(self.voxels.shape) < 1:
            raise ParameterError(f"volume must be a non-empty 3D array, got shape {self.voxels.shape}")
        self.spacing = tuple(float(s) for s in self.spacing)
        if len(self.spacing) != 3 or min(self.spacing) <= 0:
            raise ParameterError(f"spacing must be 3 positive floats, got {self.spacing}")

    @property
    def shape(self):
        return self.voxels.shape


@dataclass
class LabelMask:
    voxels: np.ndarray
    target: str = "liver"

    def __post_init__(self):
        arr = np.asarray(self.voxels)
        if arr.dtype != np.uint8:
            if arr.size and not np.isin(arr, (0, 1)).all():
                raise ParameterError("label mask values must be exactly 0 or 1")
            arr = arr.astype(np.uint8)
        elif arr.size and arr.max() > 1:
            raise ParameterError("label mask values must be exactly 0 or 1")
        self.voxels = arr
        if self.target not in TARGETS:
            raise ParameterError(f"unknown target {self.target!r}")

    @property
    def shape(self):
        return self.voxels.shape


@dataclass
class Patch:
    """
    A training sample. ``image`` always carries a leading channel axis:
    (k, h, w) for multislice 2D patches and (1, d, h, w) for 3D patches.
    ``label`` and ``weight`` share the spatial shape without that axis.
    """

    image: np.ndarray
    label: np.ndarray
    weight: np.ndarray | None = None
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        spatial = self.image.shape[1:]
        if self.label.shape[-len(spatial):] != spatial:
            raise ConsistencyError(f"label shape {self.label.shape} does not match image {self.image.shape}")
        if self.weight is not None and self.weight.shape[-len(spatial):] != spatial:
            raise ConsistencyError(f"weight shape {self.weight.shape} does not match image {self.image.shape}")


@dataclass
class SyntheticSpec:
    """Parameters of the synthetic abdominal phantom (intensities in HU)."""

    n_volumes: int = 20
    shape: tuple = (64, 64, 64)
    spacing: tuple = (2.0, 1.0, 1.0)
    organ_count: tuple = (1, 2)
    organ_radius: tuple = (12.0, 20.0)
    lesion_count: tuple = (2, 4)
    lesion_radius: tuple = (4.0, 8.0)
    distractor_count: tuple = (1, 2)
    distractor_radius: tuple = (4.0, 8.0)
    air_hu: float = -1000.0
    body_hu: float = 20.0
    liver_hu: float = 110.0
    lesion_hu: float = 55.0
    distractor_hu: float = 150.0
    noise_hu: float = 30.0
    val_fraction: float = 0.15
    compress: bool = True
    seed: int = 0

    def __post_init__(self):
        self.shape = tuple(int(s) for s in self.shape)
        for name in ("organ_count", "lesion_count", "distractor_count", "organ_radius",
                     "lesion_radius", "distractor_radius"):
            lo, hi = getattr(self, name)
            if lo < 0 or hi < lo:
                raise ParameterError(f"{name} must be a non-negative (min, max) range")
        if self.n_volumes < 1:
            raise ParameterError("n_volumes must be >= 1")
        if self.organ_count[0] < 1:
            raise ParameterError("every phantom needs at least one organ blob")
        if not 0 <= self.val_fraction < 1:
            raise ParameterError("val_fraction must lie in [0, 1)")


# ---------------------------------------------------------------------------
# NIfTI I/O
# ---------------------------------------------------------------------------

def _strip_nii(path: Path) -> str:
    name = path.name
    for ext in (".nii.gz", ".nii"):
        if name.endswith(ext):
            return name[: -len(ext)]
    raise FormatError(f"{path} is not a .nii or .nii.gz file")


def _nii_ext(path: Path) -> str:
    return ".nii.gz" if path.name.endswith(".nii.gz") else ".nii"


def _read_nifti(path: Path):
    try:
        img = nib.load(str(path))
    except FileNotFoundError:
        raise
    except Exception as exc:  # nibabel raises a zoo of types for broken headers
        raise FormatError(f"cannot read NIfTI file {path}: {exc}") from exc
    if not isinstance(img, (nib.Nifti1Image, nib.Nifti2Image)):
        raise FormatError(f"{path} is not a NIfTI image")
    try:
        data = np.asanyarray(img.dataobj)
    except Exception as exc:
        raise FormatError(f"cannot read voxel data of {path}: {exc}") from exc
    if data.ndim != 3:
        raise FormatError(f"{path}: expected a 3D image, got {data.ndim} dimensions")
    zooms = img.header.get_zooms()[:3]
    # stored as (x, y, z); we work in (z, y, x)
    return np.ascontiguousarray(data.transpose(2, 1, 0)), tuple(float(z) for z in zooms[::-1])


def _write_nifti(arr: np.ndarray, spacing, path, dtype):
    path = Path(path)
    data = np.ascontiguousarray(np.asarray(arr, dtype=dtype).transpose(2, 1, 0))
    affine = np.diag([spacing[2], spacing[1], spacing[0], 1.0])
    img = nib.Nifti1Image(data, affine)
    img.header.set_data_dtype(dtype)
    img.header.set_zooms(tuple(float(s) for s in spacing[::-1]))
    path.parent.mkdir(parents=True, exist_ok=True)
    nib.save(img, str(path))
    return path


def save_volume(v: Volume, path) -> Path:
    return _write_nifti(v.voxels, v.spacing, path, np.float32)


def save_label(mask, path, spacing=(1.0, 1.0, 1.0)) -> Path:
    """Write an integer label volume (binary masks or 0-3 error masks)."""
    arr = mask.voxels if isinstance(mask, LabelMask) else np.asarray(mask)
    return _write_nifti(arr, spacing, path, np.uint8)


def label_path_for(path, target: str = "liver") -> Path | None:
    """
    Find the label file that belongs to an image file.

    Two sibling conventions are recognised: ``<stem>_<target>.nii[.gz]`` and
    the LiTS layout ``volume-N`` / ``segmentation-N`` (0 background,
    1 liver, 2 lesion).
    """
    path = Path(path)
    stem = _strip_nii(path)
    for ext in (_nii_ext(path), ".nii.gz", ".nii"):
        cand = path.with_name(f"{stem}_{target}{ext}")
        if cand.exists():
            return cand
    if stem.startswith("volume-"):
        for ext in (_nii_ext(path), ".nii.gz", ".nii"):
            cand = path.with_name("segmentation-" + stem[len("volume-"):] + ext)
            if cand.exists():
                return cand
    return None


def load_label(path, target: str = "liver", shape=None) -> LabelMask:
    path = Path(path)
    arr, _ = _read_nifti(path)
    if shape is not None and arr.shape != tuple(shape):
        raise ConsistencyError(f"label {path} has shape {arr.shape}, image has {tuple(shape)}")
    if _strip_nii(path).startswith("segmentation-"):
        arr = (arr >= 1) if target == "liver" else (arr == 2)
    elif arr.size and not np.isin(arr, (0, 1)).all():
        raise FormatError(f"label {path} is not binary")
    return LabelMask(arr.astype(np.uint8), target)


def load_volume(path, target: str = "liver") -> tuple[Volume, LabelMask | None]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    arr, spacing = _read_nifti(path)
    vol = Volume(arr.astype(np.float32, copy=False), spacing, _strip_nii(path))
    lp = label_path_for(path, target)
    mask = load_label(lp, target, vol.shape) if lp is not None else None
    return vol, mask


# ---------------------------------------------------------------------------
# preprocessing
# ---------------------------------------------------------------------------

def window_and_normalize(v: Volume, lo: float = HU_WINDOW[0], hi: float = HU_WINDOW[1]) -> Volume:
    """Clip to [lo, hi] HU and map linearly onto [0, 1]. Apply exactly once."""
    if not lo < hi:
        raise ParameterError(f"window requires lo < hi, got [{lo}, {hi}]")
    x = np.clip(v.voxels.astype(np.float64), lo, hi)
    x = (x - lo) / (hi - lo)
    return Volume(x.astype(np.float32), v.spacing, v.id)


def _as_array(v) -> np.ndarray:
    return v.voxels if isinstance(v, (Volume, LabelMask)) else np.asarray(v)


def multislice_view(v, axial_index: int, k: int = 3) -> np.ndarray:
    """Stack of ``k`` axial slices centred on ``axial_index``; edges replicate."""
    if k < 1 or k % 2 == 0:
        raise ParameterError(f"slice count must be a positive odd number, got {k}")
    arr = _as_array(v)
    depth = arr.shape[0]
    if not 0 <= axial_index < depth:
        raise ParameterError(f"axial index {axial_index} outside [0, {depth})")
    idx = np.clip(np.arange(axial_index - k // 2, axial_index + k // 2 + 1), 0, depth - 1)
    return arr[idx]


# ---------------------------------------------------------------------------
# cropping
# ---------------------------------------------------------------------------

def _box_size(size, ndim_spatial=3):
    size = tuple(int(s) for s in size)
    if len(size) == 2:
        return (1,) + size
    if len(size) != 3:
        raise ParameterError(f"crop size must have 2 or 3 entries, got {size}")
    return size


def region_centers(region, margin: int = 16) -> np.ndarray:
    """Coordinates (N, 3) of the region dilated by ``margin`` voxels per axis."""
    reg = _as_array(region).astype(bool)
    if margin > 0 and reg.any():
        reg = ndimage.maximum_filter(reg, size=2 * int(margin) + 1)
    return np.argwhere(reg)


def crop_origin(shape, size, center) -> tuple:
    """Origin of a ``size`` box centred on ``center``, clamped into the volume."""
    return tuple(int(np.clip(c - s // 2, 0, max(d - s, 0))) for d, s, c in zip(shape, size, center))


def extract_box(arr: np.ndarray, origin, size, pad_mode: str = "constant") -> np.ndarray:
    """Cut a box from the last three axes of ``arr``, padding at the far end if needed."""
    lead = arr.ndim - 3
    sl = tuple(slice(o, o + s) for o, s in zip(origin, size))
    out = arr[(Ellipsis,) + sl]
    missing = [s - n for s, n in zip(size, out.shape[lead:])]
    if any(missing):
        pad = [(0, 0)] * lead + [(0, m) for m in missing]
        out = np.pad(out, pad, mode=pad_mode)
    return out


def crop_patch(v: Volume, label: np.ndarray, origin, size, weight=None, slices: int = 3,
               extra: dict | None = None) -> Patch:
    """Build a patch at a fixed origin. 2D sizes read a multislice stack at ``origin[0]``."""
    box = _box_size(size)
    two_d = len(size) == 2
    vox = v.voxels if isinstance(v, Volume) else np.asarray(v)
    if two_d:
        stack = multislice_view(vox, origin[0], slices)
        image = extract_box(stack[:, None], (0,) + tuple(origin[1:]), box)[:, 0]
    else:
        image = extract_box(vox, origin, box)[None]
    lab = extract_box(_as_array(label), origin, box)
    w = extract_box(weight, origin, box, pad_mode="edge") if weight is not None else None
    if two_d:
        lab = lab[..., 0, :, :]
        w = w[..., 0, :, :] if w is not None else None
    padded = any(o + s > d for o, s, d in zip(origin, box, vox.shape))
    prov = {"volume": getattr(v, "id", ""), "origin": tuple(int(o) for o in origin),
            "size": tuple(size), "padded": bool(padded), "fallback": False}
    patch = Patch(image.astype(np.float32), lab, None if w is None else w.astype(np.float32), prov)
    if extra:
        patch.provenance["extra"] = {
            k: (extract_box(a, origin, box)[..., 0, :, :] if two_d else extract_box(a, origin, box))
            for k, a in extra.items()
        }
    return patch


def sample_crop(v: Volume, m, size: Sequence[int], *, rng: np.random.Generator,
                policy: str = "uniform", region=None, margin: int = 16, weight=None,
                slices: int = 3, centers: np.ndarray | None = None, extra: dict | None = None) -> Patch:
    """
    Draw a random crop of ``size`` (2 entries for multislice 2D, 3 for 3D).

    ``uniform`` draws the origin uniformly over valid origins;
    ``in_and_around_region`` draws the crop centre from ``region`` dilated by
    ``margin``. An empty region falls back to uniform sampling and sets
    ``provenance["fallback"]``. Precomputed ``centers`` skip the dilation.
    Arrays in ``extra`` are cut at the same place and stored under
    ``provenance["extra"]``.
    """
    if policy not in ("uniform", "in_and_around_region"):
        raise ParameterError(f"unknown crop policy {policy!r}")
    vox = v.voxels if isinstance(v, Volume) else np.asarray(v)
    box = _box_size(size)
    fallback = False
    if policy == "in_and_around_region":
        if centers is None:
            if region is None:
                raise ParameterError("in_and_around_region needs a region mask")
            centers = region_centers(region, margin)
        if len(centers):
            center = centers[rng.integers(len(centers))]
            origin = crop_origin(vox.shape, box, center)
        else:
            fallback = True
    if policy == "uniform" or fallback:
        origin = tuple(int(rng.integers(max(d - s, 0) + 1)) for d, s in zip(vox.shape, box))
    patch = crop_patch(v, m, origin, size, weight=weight, slices=slices, extra=extra)
    patch.provenance["fallback"] = fallback
    return patch


# ---------------------------------------------------------------------------
# augmentation
# ---------------------------------------------------------------------------

@dataclass
class AugmentConfig:
    p_hflip: float = 0.5
    p_vflip: float = 0.5
    p_rotate: float = 0.5
    rotation_range: tuple = (-15.0, 15.0)
    p_zoom: float = 0.5
    zoom_range: tuple = (0.85, 1.15)


def _plane_transform(arr: np.ndarray, angle: float, zoom: float, order: int) -> np.ndarray:
    """Rotate (counter-clockwise, degrees) and zoom the last two axes about the centre."""
    quarter = angle / 90.0
    if zoom == 1.0 and quarter == round(quarter) and arr.shape[-1] == arr.shape[-2]:
        return np.ascontiguousarray(np.rot90(arr, int(round(quarter)) % 4, axes=(-2, -1)))
    th = np.deg2rad(angle)
    a = np.array([[np.cos(th), np.sin(th)], [-np.sin(th), np.cos(th)]]) / zoom
    mat = np.eye(arr.ndim)
    mat[-2:, -2:] = a
    center = (np.array(arr.shape, dtype=np.float64) - 1) / 2
    center[:-2] = 0
    offset = center - mat @ center
    return ndimage.affine_transform(arr, mat, offset=offset, order=order, mode="nearest",
                                    output_shape=arr.shape)


def draw_augmentation(rng: np.random.Generator, cfg: AugmentConfig) -> dict:
    # always consume the same number of draws so streams stay aligned
    u = rng.random(4)
    lo, hi = sorted(cfg.rotation_range)
    angle = float(rng.uniform(lo, hi)) if hi > lo else float(lo)
    zlo, zhi = sorted(max(z, 1e-3) for z in cfg.zoom_range)
    zoom = float(np.clip(rng.uniform(zlo, zhi), zlo, zhi)) if zhi > zlo else float(zlo)
    return {
        "hflip": bool(u[0] < cfg.p_hflip),
        "vflip": bool(u[1] < cfg.p_vflip),
        "angle": angle if u[2] < cfg.p_rotate else 0.0,
        "zoom": zoom if u[3] < cfg.p_zoom else 1.0,
    }


def apply_augmentation(arr: np.ndarray, params: dict, order: int) -> np.ndarray:
    if params["hflip"]:
        arr = arr[..., ::-1]
    if params["vflip"]:
        arr = arr[..., ::-1, :]
    if params["angle"] != 0.0 or params["zoom"] != 1.0:
        arr = _plane_transform(arr, params["angle"], params["zoom"], order)
    return np.ascontiguousarray(arr)


def augment(p: Patch, rng: np.random.Generator, cfg: AugmentConfig | None = None) -> Patch:
    """
    Random flips, rotation and zoom in the axial plane. Image is resampled
    linearly, label and weight with nearest neighbour so labels stay binary.
    """
    cfg = cfg or AugmentConfig()
    params = draw_augmentation(rng, cfg)
    image = apply_augmentation(p.image, params, order=1)
    label = apply_augmentation(p.label, params, order=0)
    weight = apply_augmentation(p.weight, params, order=0) if p.weight is not None else None
    prov = dict(p.provenance, augmentation=params)
    if "extra" in p.provenance:
        prov["extra"] = {k: apply_augmentation(a, params, order=0) for k, a in p.provenance["extra"].items()}
    return Patch(image, label, weight, prov)


# ---------------------------------------------------------------------------
# synthetic phantoms
# ---------------------------------------------------------------------------

def _ellipsoid(shape, center, radii) -> np.ndarray:
    zz, yy, xx = np.ogrid[: shape[0], : shape[1], : shape[2]]
    r = ((zz - center[0]) / radii[0]) ** 2 + ((yy - center[1]) / radii[1]) ** 2 + ((xx - center[2]) / radii[2]) ** 2
    return r <= 1.0


def _blob(rng, shape, radius_range, spacing, inside: np.ndarray | None = None, margin: float = 0.0):
    # radii in voxels; the axial radius is shrunk by the axial spacing ratio
    r = rng.uniform(*radius_range, size=3)
    r[0] = max(r[0] * spacing[1] / spacing[0], 1.0)
    if inside is not None:
        cand = np.argwhere(inside)
        center = cand[rng.integers(len(cand))].astype(float)
    else:
        lo = np.minimum(r + margin, np.array(shape) / 2 - 1)
        center = np.array([rng.uniform(l, s - 1 - l) for l, s in zip(lo, shape)])
    return _ellipsoid(shape, center, r)


def synth_case(spec: SyntheticSpec, index: int):
    """One phantom: returns (HU volume, liver mask, lesion mask)."""
    rng = np.random.default_rng([spec.seed, index])
    shape = spec.shape
    d, h, w = shape
    body = _ellipsoid(shape, ((d - 1) / 2, (h - 1) / 2, (w - 1) / 2), (d * 0.75, h * 0.46, w * 0.46))
    hu = np.where(body, spec.body_hu, spec.air_hu).astype(np.float64)

    liver = np.zeros(shape, bool)
    n_org = int(rng.integers(spec.organ_count[0], spec.organ_count[1] + 1))
    first = None
    for i in range(n_org):
        # further lobes attach to the first blob so the organ stays one piece
        blob = _blob(rng, shape, spec.organ_radius, spec.spacing, inside=first, margin=2)
        blob &= body
        if first is None:
            first = blob.copy()
        liver |= blob
    n_dis = int(rng.integers(spec.distractor_count[0], spec.distractor_count[1] + 1))
    distract = np.zeros(shape, bool)
    for _ in range(n_dis):
        distract |= _blob(rng, shape, spec.distractor_radius, spec.spacing, margin=2)
    distract &= body & ~ndimage.binary_dilation(liver, iterations=2)

    lesion = np.zeros(shape, bool)
    n_les = int(rng.integers(spec.lesion_count[0], spec.lesion_count[1] + 1))
    for _ in range(n_les):
        if not liver.any():
            break
        lesion |= _blob(rng, shape, spec.lesion_radius, spec.spacing, inside=liver) & liver
    lesion &= liver

    hu[liver] = spec.liver_hu
    hu[distract] = spec.distractor_hu
    hu[lesion] = spec.lesion_hu
    texture = ndimage.gaussian_filter(rng.standard_normal(shape), 1.0) * 2.0
    hu = hu + spec.noise_hu * (0.6 * rng.standard_normal(shape) + 0.8 * texture) * body
    return hu.astype(np.float32), liver.astype(np.uint8), lesion.astype(np.uint8)


def split_indices(n: int, val_fraction: float, seed: int) -> list[str]:
    n_val = int(round(n * val_fraction))
    if n >= 2 and val_fraction > 0:
        n_val = min(max(n_val, 1), n - 1)
    order = np.random.default_rng([seed, 85]).permutation(n)
    split = ["train"] * n
    for i in order[:n_val]:
        split[int(i)] = "val"
    return split


def make_synthetic_dataset(spec: SyntheticSpec, out_dir) -> dict:
    """
    Write ``spec.n_volumes`` phantoms plus liver/lesion labels and a
    ``manifest.json`` with an 85/15 train/val split (by default).
    """
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        if not os.access(out, os.W_OK):
            raise PermissionError(f"{out} is not writable")
    except OSError as exc:
        raise OSError(f"cannot write dataset to {out}: {exc}") from exc
    ext = ".nii.gz" if spec.compress else ".nii"
    split = split_indices(spec.n_volumes, spec.val_fraction, spec.seed)
    entries = []
    for i in range(spec.n_volumes):
        hu, liver, lesion = synth_case(spec, i)
        cid = f"case_{i:03d}"
        save_volume(Volume(hu, spec.spacing, cid), out / f"{cid}{ext}")
        save_label(liver, out / f"{cid}_liver{ext}", spec.spacing)
        save_label(lesion, out / f"{cid}_lesion{ext}", spec.spacing)
        entries.append({"id": cid, "image": f"{cid}{ext}", "liver": f"{cid}_liver{ext}",
                        "lesion": f"{cid}_lesion{ext}", "split": split[i]})
    manifest = {"format": "maskmine-dataset", "version": 1, "spec": asdict(spec), "volumes": entries}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    log.info("wrote %d synthetic volumes to %s", spec.n_volumes, out)
    return manifest


def read_manifest(path) -> dict:
    path = Path(path)
    manifest = json.loads(path.read_text())
    if "volumes" not in manifest:
        raise FormatError(f"{path} has no 'volumes' list")
    for e in manifest["volumes"]:
        for key in ("id", "image", "liver", "lesion", "split"):
            if key not in e:
                raise FormatError(f"manifest entry {e} lacks {key!r}")
        for key in ("image", "liver", "lesion"):
            e[key] = str((path.parent / e[key]).resolve())
    return manifest


@dataclass
class Case:
    """A windowed image with its liver and lesion labels, held in memory."""

    id: str
    image: np.ndarray
    liver: np.ndarray
    lesion: np.ndarray
    split: str = "train"
    spacing: tuple = (1.0, 1.0, 1.0)

    def __post_init__(self):
        for name in ("liver", "lesion"):
            if getattr(self, name).shape != self.image.shape:
                raise ConsistencyError(f"{self.id}: {name} shape {getattr(self, name).shape} "
                                       f"differs from image {self.image.shape}")


def load_cases(manifest_path, lo: float = HU_WINDOW[0], hi: float = HU_WINDOW[1]) -> list[Case]:
    cases = []
    for e in read_manifest(manifest_path)["volumes"]:
        vol, _ = load_volume(e["image"])
        liver = load_label(e["liver"], "liver", vol.shape)
        lesion = load_label(e["lesion"], "lesion", vol.shape)
        cases.append(Case(e["id"], window_and_normalize(vol, lo, hi).voxels, liver.voxels,
                          lesion.voxels, e["split"], vol.spacing))
    return cases
