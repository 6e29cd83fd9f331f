"""Dataset discovery, loading, augmentation, splitting and RITE label encoding.

Only the published directory layouts are understood:

* DRIVE   ``training/images/21_training.tif``, ``training/1st_manual/21_manual1.gif``,
  ``training/mask/21_training_mask.gif``; the test split mirrors it with ids 01-20.
* RITE    same image layout as DRIVE, labels under ``{training,test}/av/*.png``.
* CHASE_DB ``Image_01L.jpg`` with ``Image_01L_1stHO.png``, 14 subjects x L/R.
* STARE   ``stare-images/im0001.ppm`` with ``labels-ah/im0001.ah.ppm``.
"""

from __future__ import annotations

import csv
import enum
import logging
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np
import torch
from PIL import Image, UnidentifiedImageError

log = logging.getLogger(__name__)


class DataError(RuntimeError):
    """Missing, corrupt or inconsistent dataset files."""


class LabelError(ValueError):
    """A mask holds labels outside the dataset's label set."""


class Dataset(str, enum.Enum):
    DRIVE = "DRIVE"
    STARE = "STARE"
    CHASE_DB = "CHASE_DB"
    RITE = "RITE"

    @classmethod
    def parse(cls, name: str) -> "Dataset":
        key = name.upper().replace("-", "_")
        if key in ("CHASE", "CHASE_DB1", "CHASEDB1"):
            key = "CHASE_DB"
        try:
            return cls(key)
        except ValueError:
            raise ValueError(f"unknown dataset {name!r}; choose from {[d.value for d in cls]}") from None

    @property
    def multiclass(self) -> bool:
        return self is Dataset.RITE


TABLE_COUNTS = {Dataset.DRIVE: 40, Dataset.CHASE_DB: 28, Dataset.STARE: 20, Dataset.RITE: 40}

STARE_IDS = (
    "0001 0002 0003 0004 0005 0044 0077 0081 0082 0139 "
    "0162 0163 0235 0236 0239 0240 0255 0291 0319 0324"
).split()


@dataclass
class SamplePair:
    image: np.ndarray  # (H, W, 3) uint8
    mask: np.ndarray  # (H, W) uint8 labels
    id: str
    source_dataset: Dataset
    fov: Optional[np.ndarray] = None  # (H, W) bool
    base_id: str = ""
    variant: str = "orig"

    def __post_init__(self):
        if not self.base_id:
            self.base_id = self.id
        if self.image.shape[:2] != self.mask.shape:
            raise DataError(f"{self.id}: image {self.image.shape[:2]} vs mask {self.mask.shape}")


@dataclass(frozen=True)
class ManifestEntry:
    id: str
    image_path: str
    mask_path: str
    split: str  # train | test | all
    dataset: Dataset
    fov_path: str = ""


@dataclass
class DatasetManifest:
    dataset: Dataset
    entries: List[ManifestEntry]
    native_resolution: Tuple[int, int]  # (height, width)
    declared_count: int

    def by_split(self, split: str) -> List[ManifestEntry]:
        return [e for e in self.entries if e.split == split]

    def write(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["id", "image_path", "mask_path", "split", "dataset", "fov_path"])
            for e in self.entries:
                w.writerow([e.id, e.image_path, e.mask_path, e.split, e.dataset.value, e.fov_path])
        return path

    @classmethod
    def read(cls, path) -> "DatasetManifest":
        with open(path, newline="") as fh:
            rows = list(csv.DictReader(fh))
        if not rows:
            raise DataError(f"{path}: empty manifest")
        entries = [
            ManifestEntry(r["id"], r["image_path"], r["mask_path"], r["split"], Dataset(r["dataset"]), r["fov_path"])
            for r in rows
        ]
        ds = entries[0].dataset
        return cls(ds, entries, _image_size(entries[0].image_path), TABLE_COUNTS[ds])


def _image_size(path) -> Tuple[int, int]:
    try:
        with Image.open(path) as im:
            w, h = im.size
    except (OSError, UnidentifiedImageError) as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc
    return (h, w)


def _collect(rows: List[Tuple[str, Path, Path, str, Optional[Path]]], dataset: Dataset, root: Path) -> DatasetManifest:
    absent = []
    for _, img, mask, _, fov in rows:
        for p in (img, mask):
            if not p.is_file():
                absent.append(str(p.relative_to(root)))
        if fov is not None and not fov.is_file():
            absent.append(str(fov.relative_to(root)))
    if absent:
        shown = ", ".join(absent[:10]) + (" ..." if len(absent) > 10 else "")
        raise DataError(f"{dataset.value} at {root}: {len(absent)} missing files: {shown}")
    entries = [
        ManifestEntry(i, str(img), str(mask), split, dataset, str(fov) if fov else "")
        for i, img, mask, split, fov in rows
    ]
    if len(entries) != TABLE_COUNTS[dataset]:
        raise DataError(f"{dataset.value}: found {len(entries)} samples, expected {TABLE_COUNTS[dataset]}")
    return DatasetManifest(dataset, entries, _image_size(entries[0].image_path), TABLE_COUNTS[dataset])


def discover(root, dataset) -> DatasetManifest:
    """Index a dataset laid out as published; raises :class:`DataError` listing absentees."""
    dataset = Dataset.parse(dataset) if isinstance(dataset, str) else dataset
    root = Path(root)
    if not root.is_dir():
        raise DataError(f"{root} is not a directory")
    rows = []
    if dataset in (Dataset.DRIVE, Dataset.RITE):
        for split, sub, ids in (("train", "training", range(21, 41)), ("test", "test", range(1, 21))):
            for n in ids:
                i = f"{n:02d}"
                img = root / sub / "images" / f"{i}_{sub}.tif"
                if dataset is Dataset.DRIVE:
                    mask = root / sub / "1st_manual" / f"{i}_manual1.gif"
                    fov = root / sub / "mask" / f"{i}_{sub}_mask.gif"
                else:
                    mask = root / sub / "av" / f"{i}_{sub}.png"
                    fov = None
                rows.append((i, img, mask, split, fov))
    elif dataset is Dataset.CHASE_DB:
        for n in range(1, 15):
            for eye in "LR":
                i = f"{n:02d}{eye}"
                rows.append((i, root / f"Image_{i}.jpg", root / f"Image_{i}_1stHO.png", "all", None))
    else:
        for i in STARE_IDS:
            rows.append((i, root / "stare-images" / f"im{i}.ppm", root / "labels-ah" / f"im{i}.ah.ppm", "all", None))
    return _collect(rows, dataset, root)


# -- loading ------------------------------------------------------------------

def _open(path) -> Image.Image:
    try:
        im = Image.open(path)
        im.load()
        return im
    except (OSError, UnidentifiedImageError) as exc:
        raise DataError(f"cannot decode {path}: {exc}") from exc


def read_rgb(path) -> np.ndarray:
    im = _open(path)
    if im.mode == "RGBA":
        im = im.convert("RGB")
    if im.mode != "RGB":
        raise DataError(f"{path}: expected a 3-channel RGB image, got mode {im.mode}")
    return np.asarray(im, dtype=np.uint8)


def read_binary_mask(path) -> np.ndarray:
    arr = np.asarray(_open(path).convert("L"))
    return (arr > 127).astype(np.uint8)


def load_pair(entry: ManifestEntry, rite_table: Optional[Dict] = None) -> SamplePair:
    image = read_rgb(entry.image_path)
    if entry.dataset.multiclass:
        mask = encode_rite_labels(read_rgb(entry.mask_path), rite_table)
    else:
        mask = read_binary_mask(entry.mask_path)
    fov = read_binary_mask(entry.fov_path).astype(bool) if entry.fov_path else None
    return SamplePair(image, mask, entry.id, entry.dataset, fov)


def label_set(dataset: Dataset) -> Tuple[int, ...]:
    return (0, 1, 2) if dataset.multiclass else (0, 1)


def check_labels(mask: np.ndarray, dataset: Dataset, where: str = "") -> None:
    bad = np.setdiff1d(np.unique(mask), label_set(dataset))
    if bad.size:
        raise LabelError(f"{where or dataset.value}: labels {bad.tolist()} outside {label_set(dataset)}")


def _resize(arr: np.ndarray, size: Tuple[int, int], resample) -> np.ndarray:
    h, w = size
    if arr.shape[:2] == (h, w):
        return arr
    return np.asarray(Image.fromarray(arr).resize((w, h), resample=resample))


def load_and_resize(pair: SamplePair, target: Tuple[int, int] = (512, 512), num_classes: int = 1):
    """Resample one pair to ``target`` (height, width).

    Returns ``(image, mask, fov)`` tensors: image ``(3, H, W)`` float in
    [0, 1] (bilinear), mask ``(num_classes, H, W)`` float (nearest; one-hot
    when ``num_classes > 1``), fov ``(H, W)`` bool or None.
    """
    check_labels(pair.mask, pair.source_dataset, pair.id)
    image = _resize(pair.image, target, Image.BILINEAR).astype(np.float32) / 255.0
    mask = _resize(pair.mask, target, Image.NEAREST)
    fov = None
    if pair.fov is not None:
        fov = torch.from_numpy(_resize(pair.fov.astype(np.uint8), target, Image.NEAREST).astype(bool))
    if num_classes == 1:
        if mask.max(initial=0) > 1:
            raise LabelError(f"{pair.id}: multi-class mask for a single-class head")
        onehot = mask[None].astype(np.float32)
    else:
        onehot = (mask[None] == np.arange(num_classes)[:, None, None]).astype(np.float32)
    return torch.from_numpy(image.transpose(2, 0, 1).copy()), torch.from_numpy(onehot), fov


def to_tensors(pairs: Sequence[SamplePair], target: Tuple[int, int], num_classes: int = 1):
    """Stack pairs into ``(images, masks, fovs)``; ``fovs`` is None unless every pair has one."""
    loaded = [load_and_resize(p, target, num_classes) for p in pairs]
    images = torch.stack([x[0] for x in loaded])
    masks = torch.stack([x[1] for x in loaded])
    fovs = torch.stack([x[2] for x in loaded]) if all(x[2] is not None for x in loaded) else None
    return images, masks, fovs


# -- augmentation -------------------------------------------------------------

@dataclass(frozen=True)
class AugmentationPlan:
    rotation_step_degrees: float = 20.0
    rotations_per_image: int = 18
    contrast_factors: Tuple[float, ...] = (0.8, 1.2)
    target_pool_size: Optional[int] = 720  # None keeps every variant

    def __post_init__(self):
        object.__setattr__(self, "contrast_factors", tuple(float(f) for f in self.contrast_factors))
        if self.rotations_per_image < 1 or not self.contrast_factors:
            raise ValueError("plan must generate at least one variant per image")
        if any(f <= 0 for f in self.contrast_factors):
            raise ValueError("contrast factors must be positive")

    @property
    def variants_per_image(self) -> int:
        return self.rotations_per_image * len(self.contrast_factors)


IDENTITY_PLAN = AugmentationPlan(rotations_per_image=1, contrast_factors=(1.0,), target_pool_size=None)


def variant_plan(n_bases: int, plan: AugmentationPlan, seed: int) -> List[Tuple[int, int, float]]:
    """(base index, rotation step, contrast factor) for every pool member, in pool order."""
    if n_bases < 1:
        raise ValueError("augmentation needs at least one base pair")
    full = [
        (b, k, f)
        for b in range(n_bases)
        for k in range(plan.rotations_per_image)
        for f in plan.contrast_factors
    ]
    target = plan.target_pool_size
    if target is None or target == len(full):
        return full
    if target < n_bases:
        raise ValueError(f"target pool {target} is smaller than the {n_bases} base images")
    if target > len(full):
        raise ValueError(f"plan yields only {len(full)} variants, cannot reach {target}")
    keep = np.sort(np.random.default_rng(seed).choice(len(full), size=target, replace=False))
    return [full[i] for i in keep]


def adjust_contrast(image: np.ndarray, factor: float) -> np.ndarray:
    """Linear gain about the image mean, clipped to 8 bits."""
    if factor == 1.0:
        return image
    mean = image.mean()
    out = mean + factor * (image.astype(np.float64) - mean)
    return np.clip(np.rint(out), 0, 255).astype(np.uint8)


def rotate_pair(pair: SamplePair, degrees: float) -> Tuple[np.ndarray, np.ndarray, Optional[np.ndarray]]:
    if degrees % 360 == 0:
        return pair.image, pair.mask, pair.fov
    image = np.asarray(Image.fromarray(pair.image).rotate(degrees, resample=Image.BILINEAR, fillcolor=(0, 0, 0)))
    mask = np.asarray(Image.fromarray(pair.mask).rotate(degrees, resample=Image.NEAREST, fillcolor=0))
    fov = None
    if pair.fov is not None:
        f = Image.fromarray(pair.fov.astype(np.uint8)).rotate(degrees, resample=Image.NEAREST, fillcolor=0)
        fov = np.asarray(f).astype(bool)
    return image, mask, fov


def iter_augment(pairs: Sequence[SamplePair], plan: AugmentationPlan = AugmentationPlan(), seed: int = 0) -> Iterator[SamplePair]:
    """Lazily yield the augmented pool in a fixed order (see :func:`augment`)."""
    if not pairs:
        raise ValueError("augment needs a non-empty list of pairs")
    rotated: Dict[Tuple[int, int], tuple] = {}
    for b, k, f in variant_plan(len(pairs), plan, seed):
        base = pairs[b]
        if (b, k) not in rotated:
            rotated = {(b, k): rotate_pair(base, k * plan.rotation_step_degrees)}
        image, mask, fov = rotated[(b, k)]
        variant = f"r{k:02d}c{f:g}"
        identity = variant == "r00c1"
        yield replace(
            base,
            image=adjust_contrast(image, f),
            mask=mask,
            fov=fov,
            id=base.id if identity else f"{base.id}_{variant}",
            base_id=base.base_id,
            variant="orig" if identity else variant,
        )


def augment(pairs: Sequence[SamplePair], plan: AugmentationPlan = AugmentationPlan(), seed: int = 0) -> List[SamplePair]:
    """Rotation orbit x contrast variants, subsampled to the plan's pool size.

    Each base yields rotations ``k * step`` for ``k < rotations_per_image``,
    each at every contrast factor (image only; masks are never re-valued).
    Rotation is bilinear for images, nearest for masks, zero outside.
    """
    return list(iter_augment(pairs, plan, seed))


def split(pool: Sequence[SamplePair], fraction: float = 0.8, seed: int = 0) -> Tuple[List[SamplePair], List[SamplePair]]:
    """Split by base image so no base contributes to both sides."""
    if len(pool) < 5:
        raise ValueError(f"pool of {len(pool)} is too small to split (need >= 5)")
    bases = sorted({p.base_id for p in pool})
    n_train = int(round(fraction * len(bases)))
    if not 0 < n_train < len(bases):
        raise ValueError(f"fraction {fraction} leaves one side empty over {len(bases)} base images")
    order = np.random.default_rng(seed).permutation(len(bases))
    train_ids = {bases[i] for i in order[:n_train]}
    train = [p for p in pool if p.base_id in train_ids]
    val = [p for p in pool if p.base_id not in train_ids]
    return train, val


# -- RITE ---------------------------------------------------------------------

# RITE colour convention: red artery, blue vein, green crossing, white uncertain
DEFAULT_RITE_COLORS: Dict[Tuple[int, int, int], int] = {
    (0, 0, 0): 0,
    (255, 0, 0): 1,
    (0, 0, 255): 2,
    (0, 255, 0): 1,
    (255, 255, 255): 0,
}


def encode_rite_labels(av_mask: np.ndarray, table: Optional[Dict] = None, tolerance: int = 48) -> np.ndarray:
    """Map an RGB artery/vein raster to classes {0 background, 1 artery, 2 vein}.

    Each pixel takes the class of the nearest table colour (Chebyshev
    distance); pixels farther than ``tolerance`` from every colour are an error.
    """
    table = table or DEFAULT_RITE_COLORS
    rgb = np.asarray(av_mask)
    if rgb.ndim != 3 or rgb.shape[2] != 3:
        raise DataError(f"expected an RGB raster, got shape {rgb.shape}")
    colors = np.array(list(table), dtype=np.int16)
    classes = np.array(list(table.values()), dtype=np.uint8)
    dist = np.abs(rgb.astype(np.int16)[:, :, None, :] - colors[None, None]).max(axis=-1)
    nearest = dist.argmin(axis=-1)
    off = dist.min(axis=-1) > tolerance
    if off.any():
        bad = np.unique(rgb[off].reshape(-1, 3), axis=0)
        shown = [tuple(int(v) for v in c) for c in bad[:10]]
        raise LabelError(f"{int(off.sum())} pixels with unmapped colours, e.g. {shown}")
    return classes[nearest]
