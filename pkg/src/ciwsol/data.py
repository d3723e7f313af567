"""Dataset manifests and in-memory batch streams.

A manifest is a tab-separated text file, one image per line:

    path<TAB>class_id<TAB>split<TAB>x1,y1,x2,y2

The box field is `-` when absent; test images used for localization metrics
must carry one. Class names ride along as comment lines of the form
`# class<TAB>id<TAB>name`. Paths are resolved against the manifest's
directory. Images are decoded once into memory; batches are assembled with a
deterministic per-epoch shuffle.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field, replace

import numpy as np
import torch
from PIL import Image

from .errors import ValidationError
from .evaluation import LocBox
from .model import ImageBatch

# Fixed normalization constants. Per-image statistics would leak global image
# content (and with it the object class) into every pixel, so the constants
# are dataset-level and shared by all images.
PIXEL_MEAN = 0.5
PIXEL_STD = 0.25


@dataclass(frozen=True)
class ManifestEntry:
    path: str
    class_id: int
    split: str  # "train" or "test"
    gt_box: LocBox | None


@dataclass
class DatasetManifest:
    entries: list
    class_names: list
    root: str = "."

    def split(self, name: str) -> list:
        return [e for e in self.entries if e.split == name]

    def num_classes(self) -> int:
        return len(self.class_names)

    def resolve(self, entry: ManifestEntry) -> str:
        return entry.path if os.path.isabs(entry.path) else os.path.join(self.root, entry.path)


def _parse_box(text: str, lineno: int) -> LocBox | None:
    if text == "-":
        return None
    parts = text.split(",")
    if len(parts) != 4:
        raise ValidationError(f"line {lineno}: box must be x1,y1,x2,y2 or '-'")
    try:
        x1, y1, x2, y2 = (int(p) for p in parts)
        return LocBox(x1, y1, x2, y2)
    except ValueError as exc:
        raise ValidationError(f"line {lineno}: bad box '{text}': {exc}") from exc


def load_manifest(path, check_files: bool = True) -> DatasetManifest:
    """Parse and validate a manifest file.

    Checks: well-formed lines, dense class ids, boxes on every test row,
    box coordinates within the image header dimensions, and (optionally)
    image file existence, reporting the first 10 missing files.
    """
    entries = []
    names = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.rstrip("\n")
            if not line.strip():
                continue
            if line.startswith("#"):
                parts = line[1:].strip().split("\t")
                if len(parts) == 3 and parts[0] == "class":
                    names[int(parts[1])] = parts[2]
                continue
            parts = line.split("\t")
            if len(parts) != 4:
                raise ValidationError(
                    f"line {lineno}: expected 4 tab-separated fields, got {len(parts)}")
            img_path, cid_text, split, box_text = parts
            try:
                cid = int(cid_text)
            except ValueError:
                raise ValidationError(f"line {lineno}: class_id '{cid_text}' is not an integer")
            if split not in ("train", "test"):
                raise ValidationError(f"line {lineno}: unknown split '{split}'")
            box = _parse_box(box_text, lineno)
            if split == "test" and box is None:
                raise ValidationError(
                    f"line {lineno}: test row '{img_path}' has no ground-truth box")
            entries.append(ManifestEntry(img_path, cid, split, box))
    if not entries:
        raise ValidationError(f"manifest {path} contains no entries")

    ids = sorted({e.class_id for e in entries})
    if ids != list(range(len(ids))):
        raise ValidationError(f"class ids are not dense in [0, {len(ids)}): {ids}")
    class_names = [names.get(i, f"class_{i}") for i in range(len(ids))]

    root = os.path.dirname(os.path.abspath(path))
    manifest = DatasetManifest(entries=entries, class_names=class_names, root=root)
    if check_files:
        missing = [e.path for e in entries if not os.path.exists(manifest.resolve(e))][:10]
        if missing:
            raise ValidationError(
                f"{len(missing)}+ image files missing, first offenders: {missing}")
        for e in entries:
            if e.gt_box is None:
                continue
            with Image.open(manifest.resolve(e)) as im:
                w, h = im.size
            b = e.gt_box
            if b.x1 < 0 or b.y1 < 0 or b.x2 > w or b.y2 > h:
                raise ValidationError(
                    f"box {b} of '{e.path}' exceeds the {w}x{h} image bounds")
    return manifest


def save_manifest(manifest: DatasetManifest, path):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for cid, name in enumerate(manifest.class_names):
            fh.write(f"# class\t{cid}\t{name}\n")
        for e in manifest.entries:
            box = "-" if e.gt_box is None else (
                f"{e.gt_box.x1},{e.gt_box.y1},{e.gt_box.x2},{e.gt_box.y2}")
            fh.write(f"{e.path}\t{e.class_id}\t{e.split}\t{box}\n")


@dataclass
class ArrayDataset:
    """A decoded split held in memory, labels already remapped to channel ids."""

    images: np.ndarray  # (N, 3, S, S) uint8 at the network input size
    labels: np.ndarray  # (N,) int64 channel indices
    ids: list
    boxes: list  # LocBox or None, original image coordinates
    orig_sizes: list  # (H, W) of the source image

    def __len__(self) -> int:
        return self.images.shape[0]

    def subset(self, indices) -> "ArrayDataset":
        idx = list(indices)
        return ArrayDataset(self.images[idx], self.labels[idx],
                            [self.ids[i] for i in idx],
                            [self.boxes[i] for i in idx],
                            [self.orig_sizes[i] for i in idx])


def concat_datasets(a: ArrayDataset, b: ArrayDataset) -> ArrayDataset:
    return ArrayDataset(np.concatenate([a.images, b.images]),
                        np.concatenate([a.labels, b.labels]),
                        a.ids + b.ids, a.boxes + b.boxes,
                        a.orig_sizes + b.orig_sizes)


def load_images(manifest: DatasetManifest, entries, input_size: int,
                class_map: dict | None = None) -> ArrayDataset:
    """Decode `entries` to uint8 arrays at the network input size.

    `class_map` remaps original class ids to network channel indices; identity
    when omitted. Ground-truth boxes keep original image coordinates.
    """
    images = np.empty((len(entries), 3, input_size, input_size), dtype=np.uint8)
    labels = np.empty(len(entries), dtype=np.int64)
    ids, boxes, sizes = [], [], []
    for i, e in enumerate(entries):
        with Image.open(manifest.resolve(e)) as im:
            im = im.convert("RGB")
            w, h = im.size
            if (w, h) != (input_size, input_size):
                im = im.resize((input_size, input_size), Image.BILINEAR)
            images[i] = np.asarray(im, dtype=np.uint8).transpose(2, 0, 1)
        labels[i] = e.class_id if class_map is None else class_map[e.class_id]
        ids.append(e.path)
        boxes.append(e.gt_box)
        sizes.append((h, w))
    return ArrayDataset(images, labels, ids, boxes, sizes)


def normalize_pixels(u8: np.ndarray) -> torch.Tensor:
    """Map uint8 pixels to roughly zero-mean / unit-variance floats."""
    x = torch.from_numpy(u8.astype(np.float32) / 255.0)
    return (x - PIXEL_MEAN) / PIXEL_STD


@dataclass
class EvalBatch(ImageBatch):
    gt_boxes: list = field(default_factory=list)
    orig_sizes: list = field(default_factory=list)


def make_batch(dataset: ArrayDataset, indices, with_boxes: bool = False) -> ImageBatch:
    idx = list(indices)
    pixels = normalize_pixels(dataset.images[idx])
    labels = torch.from_numpy(dataset.labels[idx])
    ids = [dataset.ids[i] for i in idx]
    if not with_boxes:
        return ImageBatch(pixels=pixels, labels=labels, image_ids=ids)
    return EvalBatch(pixels=pixels, labels=labels, image_ids=ids,
                     gt_boxes=[dataset.boxes[i] for i in idx],
                     orig_sizes=[dataset.orig_sizes[i] for i in idx])


class BatchStream:
    """Deterministically shuffled training batches.

    `epoch(i)` reshuffles with a generator seeded by (seed, i), so any epoch's
    batch sequence is reproducible independent of how many times it is drawn.
    """

    def __init__(self, dataset: ArrayDataset, batch_size: int, seed: int = 0):
        if batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        self.dataset = dataset
        self.batch_size = batch_size
        self.seed = seed

    def epoch(self, index: int):
        order = np.random.default_rng([self.seed, index]).permutation(len(self.dataset))
        for start in range(0, len(order), self.batch_size):
            yield make_batch(self.dataset, order[start:start + self.batch_size])


def eval_batches(dataset: ArrayDataset, batch_size: int):
    """Sequential annotated batches for metric evaluation."""
    for start in range(0, len(dataset), batch_size):
        yield make_batch(dataset, range(start, min(start + batch_size, len(dataset))),
                         with_boxes=True)
