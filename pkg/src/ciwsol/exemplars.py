"""Budgeted exemplar memory with herding selection.

Each class stores an ordered list of (image_id, embedding) pairs in herding
order, so trimming to a smaller quota is a prefix cut. Embeddings are the
globally average pooled shared feature map, l2-normalized.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch

from .model import NORM_EPS, ImageBatch, WsolNetwork, gap


@torch.no_grad()
def compute_embeddings(net: WsolNetwork, batches) -> list:
    """One (image_id, unit-norm embedding) pair per image in the stream."""
    net.eval()
    out = []
    for batch in batches:
        features = net.backbone(batch.pixels)
        vecs = gap(features)
        vecs = vecs / (vecs.norm(dim=1, keepdim=True) + NORM_EPS)
        vecs = vecs.cpu().numpy().astype(np.float32)
        for image_id, vec in zip(batch.image_ids, vecs):
            out.append((image_id, vec))
    return out


def herding_select(candidates: list, m: int) -> list:
    """Greedy herding over one class's candidates; returns m image_ids in order.

    At step j the pick minimizes the distance between the class mean embedding
    and the running mean of the selected embeddings. Selection is without
    replacement; ties break to the lowest candidate index.
    """
    if m > len(candidates):
        raise ValueError(f"cannot select {m} exemplars from {len(candidates)} candidates")
    if m < 0:
        raise ValueError("m must be >= 0")
    vecs = np.stack([np.asarray(v, dtype=np.float64) for _, v in candidates])
    mu = vecs.mean(axis=0)
    chosen = []
    running = np.zeros_like(mu)
    taken = np.zeros(len(candidates), dtype=bool)
    for j in range(1, m + 1):
        dists = np.linalg.norm(mu[None, :] - (running[None, :] + vecs) / j, axis=1)
        dists[taken] = np.inf
        pick = int(np.argmin(dists))  # argmin returns the first (lowest) index on ties
        taken[pick] = True
        running += vecs[pick]
        chosen.append(candidates[pick][0])
    return chosen


@dataclass
class ExemplarStore:
    """Herding-ordered exemplar references under a fixed total budget."""

    budget: int
    per_class: dict = field(default_factory=dict)  # class_id -> [(image_id, embedding)]
    per_class_quota: int = 0

    def size(self) -> int:
        return sum(len(v) for v in self.per_class.values())

    def class_ids(self) -> list:
        return sorted(self.per_class)

    def image_ids(self) -> list:
        ids = []
        for cid in self.class_ids():
            ids.extend(image_id for image_id, _ in self.per_class[cid])
        return ids


def rebalance(store: ExemplarStore, new_classes: dict, k_acc: int) -> ExemplarStore:
    """New store with quotas recomputed for `k_acc` accumulated classes.

    Old class lists are trimmed to the first quota entries (herding prefix);
    each new class gets a fresh herding selection. `new_classes` maps class_id
    to its candidate (image_id, embedding) list and must not overlap stored
    classes.
    """
    if k_acc <= 0:
        raise ValueError("k_acc must be positive")
    if store.budget < k_acc:
        raise ValueError(
            f"budget {store.budget} is below the class count {k_acc}; "
            "the per-class quota would be zero")
    overlap = set(store.per_class) & set(new_classes)
    if overlap:
        raise ValueError(f"new classes overlap stored classes: {sorted(overlap)}")
    quota = store.budget // k_acc
    per_class = {cid: list(entries[:quota]) for cid, entries in store.per_class.items()}
    for cid, candidates in new_classes.items():
        take = min(quota, len(candidates))
        ids = herding_select(candidates, take)
        by_id = {image_id: vec for image_id, vec in candidates}
        per_class[cid] = [(image_id, by_id[image_id]) for image_id in ids]
    out = ExemplarStore(budget=store.budget, per_class=per_class, per_class_quota=quota)
    assert out.size() <= out.budget
    return out


def write_manifest(store: ExemplarStore, path):
    """TSV of `class_id <TAB> image_path <TAB> selection_rank`, one per exemplar."""
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for cid in store.class_ids():
            for rank, (image_id, _) in enumerate(store.per_class[cid]):
                fh.write(f"{cid}\t{image_id}\t{rank}\n")
