"""Deterministic synthetic-shapes dataset for desk-scale experiments.

Each class is one (shape, color) pair; every image contains a single colored
shape at a random position and scale (5-40% of the image area) over a
grayscale noise background. Background pixels always have r == g == b and
shape colors never do, so the rendered object is exactly recoverable by a
pixel scan, and the recorded ground-truth box is the tight box of the drawn
pixels. Everything is a pure function of the generation parameters and seed.
"""

from __future__ import annotations

import math
import os

import numpy as np
from PIL import Image, ImageDraw

from .data import DatasetManifest, ManifestEntry, save_manifest
from .errors import ValidationError
from .evaluation import LocBox

SHAPES = ("circle", "square", "triangle", "cross", "ring", "bar")

# Saturated colors; none is gray (r == g == b), which the background always is.
PALETTE = (
    ("red", (204, 44, 44)),
    ("green", (44, 176, 60)),
    ("blue", (52, 84, 216)),
    ("yellow", (228, 200, 40)),
    ("magenta", (196, 56, 196)),
    ("cyan", (52, 196, 196)),
)

AREA_LO, AREA_HI = 0.05, 0.40
MARGIN = 2  # free pixels kept around every shape


def class_catalog(n_classes: int) -> list:
    """(shape, color_name, rgb) per class; a Latin-square pairing so the first
    len(SHAPES) classes all differ in both shape and color."""
    max_classes = len(SHAPES) * len(PALETTE)
    if n_classes > max_classes:
        raise ValidationError(
            f"at most {max_classes} shape/color classes available, got {n_classes}")
    catalog = []
    for i in range(n_classes):
        shape = SHAPES[i % len(SHAPES)]
        color_name, rgb = PALETTE[(i % len(PALETTE) + i // len(SHAPES)) % len(PALETTE)]
        catalog.append((shape, color_name, rgb))
    return catalog


def _shape_extent(shape: str, area: float) -> tuple:
    """(width, height) of the tight box that yields roughly `area` drawn pixels."""
    if shape == "circle":
        r = math.sqrt(area / math.pi)
        return 2 * r, 2 * r
    if shape == "square":
        s = math.sqrt(area)
        return s, s
    if shape == "triangle":
        b = math.sqrt(area / 0.45)  # isoceles, height = 0.9 * base
        return b, 0.9 * b
    if shape == "cross":
        arm = math.sqrt(area * 9.0 / 5.0)  # two arm/3-thick bars minus overlap
        return arm, arm
    if shape == "ring":
        r = math.sqrt(area / (math.pi * 0.5775))  # width = 0.35 * outer radius
        return 2 * r, 2 * r
    if shape == "bar":
        h = math.sqrt(area / 3.0)  # 3:1 aspect
        return 3 * h, h
    raise ValueError(f"unknown shape '{shape}'")


def _draw_shape(draw: ImageDraw.ImageDraw, shape: str, x0: int, y0: int,
                w: int, h: int):
    x1, y1 = x0 + w - 1, y0 + h - 1  # PIL draws inclusive corners
    if shape == "circle" or shape == "ring":
        if shape == "circle":
            draw.ellipse([x0, y0, x1, y1], fill=255)
        else:
            width = max(2, round(0.35 * w / 2))
            draw.ellipse([x0, y0, x1, y1], outline=255, width=width)
    elif shape == "square" or shape == "bar":
        draw.rectangle([x0, y0, x1, y1], fill=255)
    elif shape == "triangle":
        draw.polygon([(x0, y1), (x1, y1), ((x0 + x1) // 2, y0)], fill=255)
    elif shape == "cross":
        t = max(2, h // 3)
        cy = y0 + (h - t) // 2
        cx = x0 + (w - t) // 2
        draw.rectangle([x0, cy, x1, cy + t - 1], fill=255)
        draw.rectangle([cx, y0, cx + t - 1, y1], fill=255)
    else:
        raise ValueError(f"unknown shape '{shape}'")


def render_image(shape: str, rgb: tuple, size: int, rng: np.random.Generator):
    """One image and its exact object box; deterministic in the rng state."""
    gray = rng.integers(90, 161, size=(size, size), dtype=np.uint8)
    img = np.repeat(gray[:, :, None], 3, axis=2)

    for _ in range(40):
        frac = rng.uniform(AREA_LO, AREA_HI)
        w, h = _shape_extent(shape, frac * size * size)
        w, h = max(6, round(w)), max(6, round(h))
        if w <= size - 2 * MARGIN and h <= size - 2 * MARGIN:
            break
    else:
        raise RuntimeError(f"could not fit a '{shape}' into a {size}px image")
    x0 = int(rng.integers(MARGIN, size - MARGIN - w + 1))
    y0 = int(rng.integers(MARGIN, size - MARGIN - h + 1))

    layer = Image.new("L", (size, size), 0)
    _draw_shape(ImageDraw.Draw(layer), shape, x0, y0, w, h)
    mask = np.asarray(layer, dtype=np.uint8) > 0
    if not mask.any():
        raise RuntimeError(f"drawing '{shape}' produced no pixels")
    img[mask] = np.asarray(rgb, dtype=np.uint8)

    ys, xs = np.nonzero(mask)
    box = LocBox(int(xs.min()), int(ys.min()), int(xs.max()) + 1, int(ys.max()) + 1)
    return img, box


def synth_generate(out_dir, n_classes: int, per_class_train: int,
                   per_class_test: int, image_size: int = 64,
                   seed: int = 0) -> DatasetManifest:
    """Render the dataset under `out_dir` and write its manifest.tsv.

    Per-image RNG streams are keyed by (seed, class, split, index), so the
    same parameters always reproduce byte-identical images and manifest.
    """
    catalog = class_catalog(n_classes)
    images_dir = os.path.join(out_dir, "images")
    try:
        os.makedirs(images_dir, exist_ok=True)
    except OSError as exc:
        raise ValidationError(f"cannot create output directory {out_dir}: {exc}") from exc

    entries = []
    names = []
    for cid, (shape, color_name, rgb) in enumerate(catalog):
        names.append(f"{shape}_{color_name}")
        class_dir = os.path.join(images_dir, f"class_{cid:03d}")
        os.makedirs(class_dir, exist_ok=True)
        for split_code, split, count in ((0, "train", per_class_train),
                                         (1, "test", per_class_test)):
            for idx in range(count):
                rng = np.random.default_rng([seed, cid, split_code, idx])
                img, box = render_image(shape, rgb, image_size, rng)
                rel = os.path.join("images", f"class_{cid:03d}", f"{split}_{idx:04d}.png")
                Image.fromarray(img).save(os.path.join(out_dir, rel))
                entries.append(ManifestEntry(rel, cid, split, box))
    manifest = DatasetManifest(entries=entries, class_names=names, root=out_dir)
    save_manifest(manifest, os.path.join(out_dir, "manifest.tsv"))
    return manifest


def object_mask(image: np.ndarray) -> np.ndarray:
    """Recover the rendered object pixels: exactly those that are not gray."""
    r, g, b = image[:, :, 0], image[:, :, 1], image[:, :, 2]
    return (r != g) | (g != b)
