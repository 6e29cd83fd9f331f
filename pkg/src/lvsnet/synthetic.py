"""Synthetic fundus-like images written in the published dataset layouts.

The real datasets are licence-restricted and not redistributed, so tests and
smoke runs use procedurally drawn vessel trees instead.  The images are not
meant to look clinical; they only need thin, branching, darker-than-
background structures inside a circular field of view.
"""

from __future__ import annotations

import math
from pathlib import Path
from typing import Tuple

import numpy as np
from PIL import Image, ImageDraw, ImageFilter

from .data import STARE_IDS, Dataset

NATIVE_SIZES = {  # (height, width)
    Dataset.DRIVE: (584, 565),
    Dataset.RITE: (584, 565),
    Dataset.CHASE_DB: (1024, 1024),
    Dataset.STARE: (605, 700),
}


def _branch(draw_fns, rng, x, y, angle, length, width, depth, label):
    steps = max(int(length / 6), 2)
    for _ in range(steps):
        angle += rng.normal(0.0, 0.18)
        nx, ny = x + 6 * math.cos(angle), y + 6 * math.sin(angle)
        for fn in draw_fns:
            fn([(x, y), (nx, ny)], width, label)
        x, y = nx, ny
    if depth > 0 and width > 1:
        for turn in (-1, 1):
            _branch(
                draw_fns, rng, x, y, angle + turn * rng.uniform(0.3, 0.8),
                length * rng.uniform(0.5, 0.8), max(1, int(width * 0.7)), depth - 1, label,
            )


def synthetic_fundus(height: int, width: int, rng: np.random.Generator, av: bool = False):
    """Return ``(rgb uint8, labels uint8, fov bool)``.

    Labels are {0, 1} for vessels, or {0, 1 artery, 2 vein} when ``av``.
    """
    s = min(height, width)
    scale = s / 584.0
    labels = Image.new("L", (width, height), 0)
    ldraw = ImageDraw.Draw(labels)

    def draw_label(seg, w, label):
        ldraw.line(seg, fill=label, width=w)

    cx, cy = width * rng.uniform(0.35, 0.65), height * rng.uniform(0.4, 0.6)
    n_trees = 6
    for t in range(n_trees):
        angle = 2 * math.pi * t / n_trees + rng.uniform(-0.3, 0.3)
        label = (1 + t % 2) if av else 1
        _branch(
            [draw_label], rng, cx, cy, angle, length=0.45 * s * rng.uniform(0.7, 1.0),
            width=max(2, int(round(6 * scale))), depth=4, label=label,
        )
    lab = np.asarray(labels).copy()

    yy, xx = np.mgrid[0:height, 0:width]
    r = np.hypot((yy - height / 2) / (height / 2), (xx - width / 2) / (width / 2))
    fov = r < 0.95
    shade = np.clip(1.0 - 0.5 * r**2, 0, 1)
    base = np.stack([200 * shade, 90 * shade, 40 * shade], axis=-1)
    vessel = lab > 0
    soft = np.asarray(Image.fromarray((vessel * 255).astype(np.uint8)).filter(ImageFilter.GaussianBlur(1.0))) / 255.0
    tint = np.array([0.55, 0.45, 0.6]) if not av else None
    if av:
        artery = np.asarray(Image.fromarray(((lab == 1) * 255).astype(np.uint8)).filter(ImageFilter.GaussianBlur(1.0))) / 255.0
        vein = np.clip(soft - artery, 0, 1)
        img = base * (1 - artery[..., None] * np.array([0.3, 0.5, 0.5]))
        img = img * (1 - vein[..., None] * np.array([0.6, 0.6, 0.4]))
    else:
        img = base * (1 - soft[..., None] * tint)
    img = img + rng.normal(0, 4.0, img.shape)
    img[~fov] = 0
    lab[~fov] = 0
    return np.clip(img, 0, 255).astype(np.uint8), lab, fov


def _save(arr, path: Path, **kw):
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(arr).save(path, **kw)


def _av_rgb(lab: np.ndarray) -> np.ndarray:
    rgb = np.zeros(lab.shape + (3,), np.uint8)
    rgb[lab == 1] = (255, 0, 0)
    rgb[lab == 2] = (0, 0, 255)
    return rgb


def write_layout(root, dataset, size: Tuple[int, int] = None, seed: int = 0) -> Path:
    """Populate ``root`` with a complete synthetic copy of ``dataset``'s layout.

    ``size`` is (height, width) and defaults to the dataset's native size.
    """
    dataset = Dataset.parse(dataset) if isinstance(dataset, str) else dataset
    root = Path(root)
    h, w = size or NATIVE_SIZES[dataset]
    rng = np.random.default_rng(seed)
    if dataset in (Dataset.DRIVE, Dataset.RITE):
        for sub, ids in (("training", range(21, 41)), ("test", range(1, 21))):
            for n in ids:
                i = f"{n:02d}"
                img, lab, fov = synthetic_fundus(h, w, rng, av=dataset is Dataset.RITE)
                _save(img, root / sub / "images" / f"{i}_{sub}.tif")
                if dataset is Dataset.DRIVE:
                    _save((lab * 255).astype(np.uint8), root / sub / "1st_manual" / f"{i}_manual1.gif")
                    _save((fov * 255).astype(np.uint8), root / sub / "mask" / f"{i}_{sub}_mask.gif")
                else:
                    _save(_av_rgb(lab), root / sub / "av" / f"{i}_{sub}.png")
    elif dataset is Dataset.CHASE_DB:
        for n in range(1, 15):
            for eye in "LR":
                img, lab, _ = synthetic_fundus(h, w, rng)
                _save(img, root / f"Image_{n:02d}{eye}.jpg", quality=95)
                _save((lab * 255).astype(np.uint8), root / f"Image_{n:02d}{eye}_1stHO.png")
    else:
        for i in STARE_IDS:
            img, lab, _ = synthetic_fundus(h, w, rng)
            _save(img, root / "stare-images" / f"im{i}.ppm")
            _save(np.repeat((lab * 255).astype(np.uint8)[..., None], 3, axis=2), root / "labels-ah" / f"im{i}.ah.ppm")
    return root
