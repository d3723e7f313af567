"""Localization metrics: map-to-box conversion, IoU, and incremental accuracy.

Per test image the localization map of a chosen class channel is upsampled to
the original image size, binarized, and reduced to the tight bounding box of
its largest 8-connected foreground component. Task accuracies follow the
usual WSOL trio: Top-1 Loc (classification and box both right), Top-5 Loc
(label in top 5 plus the ground-truth channel's box), and GT-known Loc (box
criterion only).
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from scipy import ndimage

from .compensation import CompensationPair, fuse_outputs
from .model import WsolNetwork, forward_full

logger = logging.getLogger(__name__)

EIGHT_CONNECTED = np.ones((3, 3), dtype=int)


@dataclass(frozen=True)
class LocBox:
    """Half-open pixel box [x1, x2) x [y1, y2) in original image coordinates."""

    x1: int
    y1: int
    x2: int
    y2: int

    def __post_init__(self):
        if not (self.x1 < self.x2 and self.y1 < self.y2):
            raise ValueError(f"degenerate box {self}")

    def area(self) -> int:
        return (self.x2 - self.x1) * (self.y2 - self.y1)


def iou(a: LocBox, b: LocBox) -> float:
    """Intersection over union under half-open box semantics."""
    iw = min(a.x2, b.x2) - max(a.x1, b.x1)
    ih = min(a.y2, b.y2) - max(a.y1, b.y1)
    inter = max(0, iw) * max(0, ih)
    return inter / (a.area() + b.area() - inter)


def mask_to_box(loc_map_slice, image_size, tau: float = 0.5) -> LocBox:
    """Tight box of the largest 8-connected foreground blob of one channel.

    The sigmoid-activated map is bilinearly upsampled to (H, W) and binarized
    at `tau` (strictly greater). An empty foreground falls back to the
    full-image box so evaluation never crashes.
    """
    h, w = image_size
    t = torch.as_tensor(loc_map_slice, dtype=torch.float32)
    up = F.interpolate(t[None, None], size=(h, w), mode="bilinear",
                       align_corners=False)[0, 0]
    binary = (up > tau).numpy()
    if not binary.any():
        return LocBox(0, 0, w, h)
    labeled, n = ndimage.label(binary, structure=EIGHT_CONNECTED)
    sizes = np.bincount(labeled.ravel())
    sizes[0] = 0  # background
    largest = int(np.argmax(sizes))  # ties: lowest label id, i.e. scan order
    ys, xs = np.nonzero(labeled == largest)
    return LocBox(int(xs.min()), int(ys.min()), int(xs.max()) + 1, int(ys.max()) + 1)


@dataclass
class TaskRecord:
    task: int
    classes: int
    top1_loc: float
    top5_loc: float
    gtk_loc: float


@dataclass
class IncrementalReport:
    """Per-task localization accuracies plus their average and final values."""

    per_task: list  # list[TaskRecord]

    def metric(self, name: str) -> list:
        return [getattr(r, name) for r in self.per_task]

    def acc_avg(self, name: str) -> float:
        return aggregate(self.metric(name))[0]

    def acc_last(self, name: str) -> float:
        return aggregate(self.metric(name))[1]

    def to_dict(self) -> dict:
        metrics = ("top1_loc", "top5_loc", "gtk_loc")
        return {
            "per_task": [vars(r) for r in self.per_task],
            "acc_avg": {m: self.acc_avg(m) for m in metrics},
            "acc_last": {m: self.acc_last(m) for m in metrics},
        }

    def save(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, indent=2)
            fh.write("\n")

    @staticmethod
    def load(path) -> "IncrementalReport":
        with open(path, encoding="utf-8") as fh:
            raw = json.load(fh)
        return IncrementalReport([TaskRecord(**r) for r in raw["per_task"]])


def aggregate(per_task_values) -> tuple:
    """(arithmetic mean, last value) of a nonempty per-task series."""
    values = list(per_task_values)
    if not values:
        raise ValueError("cannot aggregate an empty per-task list")
    return sum(values) / len(values), values[-1]


@torch.no_grad()
def eval_task(net: WsolNetwork, pair: CompensationPair | None, test_batches,
              iou_thresh: float = 0.5, tau: float = 0.5) -> tuple:
    """(top1_loc, top5_loc, gtk_loc) over a stream of annotated test batches.

    Batches must carry `gt_boxes` (list of LocBox or None) and `orig_sizes`
    (list of (H, W)) alongside pixels and channel-index labels. Images without
    a ground-truth box are skipped and counted in a warning. The compensated
    (fused) outputs are used whenever `pair` is given.
    """
    net.eval()
    hits = np.zeros(3, dtype=np.int64)  # top1, top5, gtk
    total = 0
    skipped = 0
    for batch in test_batches:
        outputs = forward_full(net, batch)
        probs, loc_all = fuse_outputs(outputs, pair, loc_classes=None)
        k = probs.shape[1]
        order = torch.argsort(probs, dim=1, descending=True)
        top1 = order[:, 0]
        top5 = order[:, :min(5, k)]
        for b in range(len(batch)):
            gt_box = batch.gt_boxes[b]
            if gt_box is None:
                skipped += 1
                continue
            y = int(batch.labels[b])
            size = batch.orig_sizes[b]
            gt_ok = iou(mask_to_box(loc_all[b, y], size, tau), gt_box) >= iou_thresh
            in_top5 = bool((top5[b] == y).any())
            if int(top1[b]) == y:
                box1 = mask_to_box(loc_all[b, int(top1[b])], size, tau)
                top1_ok = iou(box1, gt_box) >= iou_thresh
            else:
                top1_ok = False
            hits += (top1_ok, in_top5 and gt_ok, gt_ok)
            total += 1
    if skipped:
        logger.warning("skipped %d test images without ground-truth boxes", skipped)
    if total == 0:
        raise ValueError("evaluation stream contained no images with boxes")
    top1_loc, top5_loc, gtk_loc = (hits / total).tolist()
    # Top-5 adds a classification condition to the GT-known box criterion and
    # Top-1 additionally requires the argmax, so the ordering is structural.
    assert top1_loc <= top5_loc <= gtk_loc
    return top1_loc, top5_loc, gtk_loc


def write_metrics_csv(report: IncrementalReport, path):
    """One 6-decimal row per task: task,classes,top1_loc,top5_loc,gtk_loc."""
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("task,classes,top1_loc,top5_loc,gtk_loc\n")
        for r in report.per_task:
            fh.write(f"{r.task},{r.classes},{r.top1_loc:.6f},"
                     f"{r.top5_loc:.6f},{r.gtk_loc:.6f}\n")
