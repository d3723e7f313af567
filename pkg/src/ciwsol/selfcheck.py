"""Fast self-contained sanity battery behind `ciwsol selfcheck`.

Each check recomputes an operation with a naive independent routine (plain
loops, flood fill, brute-force greedy) and compares. This is a quick
smoke-level subset of the full test suite, suitable for a fresh install.
"""

from __future__ import annotations

import math

import numpy as np
import torch

from .compensation import CompensationPair, compensation_targets, fuse_outputs
from .distill_losses import loss_kd_cls, loss_kd_feat, loss_kd_loc
from .evaluation import LocBox, iou, mask_to_box
from .exemplars import herding_select
from .model import (ImageBatch, ModelConfig, WsolNetwork, expand_heads,
                    forward_full, freeze)
from .wsol_losses import loss_ac, loss_cls, loss_cls_fg

TINY_MODEL = ModelConfig(input_size=16, backbone_channels=(8, 8),
                         backbone_strides=(2, 2), classifier_channels=(8, 8, 8, 8),
                         scale_init=5.0)


def _rel_close(a: float, b: float, tol: float = 1e-5) -> bool:
    return abs(a - b) <= tol * max(1.0, abs(a), abs(b))


def _random_batch(rng: np.random.Generator, k: int) -> ImageBatch:
    pixels = torch.from_numpy(rng.standard_normal((2, 3, 16, 16)).astype(np.float32))
    labels = torch.from_numpy(rng.integers(0, k, size=2))
    return ImageBatch(pixels, labels, [f"img{i}" for i in range(2)])


def check_loss_oracles() -> bool:
    rng = np.random.default_rng(7)
    for _ in range(10):
        b, k, n = 2, 4, 3
        cls_map = rng.standard_normal((b, k, n, n))
        cam_map = rng.standard_normal((b, k, n, n))
        labels = rng.integers(0, k, size=b)
        # naive pooled cross entropy
        want = 0.0
        for i in range(b):
            pooled = [cls_map[i, c].mean() for c in range(k)]
            mx = max(pooled)
            z = sum(math.exp(p - mx) for p in pooled)
            want += -math.log(math.exp(pooled[labels[i]] - mx) / z)
        want /= b
        got = float(loss_cls(torch.from_numpy(cls_map), torch.from_numpy(labels)))
        if not _rel_close(got, want):
            return False
        # naive area term
        want = float(np.mean([1 / (1 + np.exp(-cam_map[i, labels[i]])) for i in range(b)]))
        got = float(loss_ac(torch.from_numpy(cam_map), torch.from_numpy(labels)))
        if not _rel_close(got, want, 1e-7):
            return False
        # masked classification vs explicit per-element product
        masked = np.empty_like(cls_map)
        for i in range(b):
            fg = 1 / (1 + np.exp(-cam_map[i, labels[i]]))
            masked[i] = cls_map[i] * fg[None]
        want = 0.0
        for i in range(b):
            pooled = [masked[i, c].mean() for c in range(k)]
            mx = max(pooled)
            z = sum(math.exp(p - mx) for p in pooled)
            want += -math.log(math.exp(pooled[labels[i]] - mx) / z)
        want /= b
        got = float(loss_cls_fg(torch.from_numpy(cls_map), torch.from_numpy(cam_map),
                                torch.from_numpy(labels)))
        if not _rel_close(got, want):
            return False
    return True


def check_distill_losses() -> bool:
    rng = np.random.default_rng(8)
    old = torch.from_numpy(rng.standard_normal((2, 3, 3, 3)))
    new = torch.from_numpy(rng.standard_normal((2, 5, 3, 3)))
    # KL against a direct sum p*log(p/q)
    p = torch.softmax(old.mean(dim=(2, 3)), dim=1)
    q = torch.softmax(new[:, :3].mean(dim=(2, 3)), dim=1)
    want = float((p * (p / q).log()).sum(dim=1).mean())
    got = float(loss_kd_cls(new, old))
    if not _rel_close(got, want, 1e-6):
        return False
    if float(loss_kd_cls(torch.cat([old, new[:, 3:]], dim=1), old)) > 1e-7:
        return False
    labels = torch.tensor([0, 2])
    if float(loss_kd_loc(old, old, labels)) != 0.0:
        return False
    tap = torch.from_numpy(rng.standard_normal((2, 4, 3, 3)))
    if not _rel_close(float(loss_kd_feat(5.0 * tap, tap)), 0.0, 1e-6):
        return False
    if not _rel_close(float(loss_kd_feat(-tap, tap)), 2.0, 1e-6):
        return False
    return True


def check_expansion() -> bool:
    rng = np.random.default_rng(9)
    net = freeze(WsolNetwork(TINY_MODEL, num_classes=3, seed=1))
    wider = freeze(expand_heads(net, 2, rng_seed=11))
    for _ in range(2):
        batch = _random_batch(rng, 3)
        with torch.no_grad():
            a, b = forward_full(net, batch), forward_full(wider, batch)
        if not torch.equal(a.cls_map, b.cls_map[:, :3]):
            return False
        if not torch.equal(a.cam_map, b.cam_map[:, :3]):
            return False
    return True


def check_herding() -> bool:
    rng = np.random.default_rng(10)
    for _ in range(5):
        n = int(rng.integers(2, 7))
        vecs = rng.standard_normal((n, 4))
        vecs /= np.linalg.norm(vecs, axis=1, keepdims=True)
        cands = [(f"x{i}", vecs[i]) for i in range(n)]
        m = int(rng.integers(1, n + 1))
        # brute-force greedy
        mu = vecs.mean(axis=0)
        left = list(range(n))
        acc = np.zeros(4)
        want = []
        for j in range(1, m + 1):
            best = min(left, key=lambda i: (np.linalg.norm(mu - (acc + vecs[i]) / j), i))
            want.append(f"x{best}")
            acc += vecs[best]
            left.remove(best)
        if herding_select(cands, m) != want:
            return False
    return True


def check_boxes() -> bool:
    rng = np.random.default_rng(11)
    for _ in range(100):
        def rand_box():
            x1, y1 = rng.integers(0, 20, size=2)
            return LocBox(int(x1), int(y1), int(x1 + rng.integers(1, 10)),
                          int(y1 + rng.integers(1, 10)))
        a, b = rand_box(), rand_box()
        grid = np.zeros((32, 32), dtype=int)
        grid[a.y1:a.y2, a.x1:a.x2] += 1
        grid[b.y1:b.y2, b.x1:b.x2] += 2
        inter = int((grid == 3).sum())
        union = int((grid > 0).sum())
        if not _rel_close(iou(a, b), inter / union, 1e-9):
            return False
    # largest-blob choice on a hand-built two-blob mask
    mask = np.zeros((16, 16), dtype=np.float32)
    mask[2:8, 2:8] = 1.0  # 36 px
    mask[11:14, 11:14] = 1.0  # 9 px
    box = mask_to_box(mask, (16, 16), tau=0.5)
    return (box.x1, box.y1, box.x2, box.y2) == (2, 2, 8, 8)


def check_no_drift_fusion() -> bool:
    rng = np.random.default_rng(12)
    net = freeze(WsolNetwork(TINY_MODEL, num_classes=4, seed=3))
    pair = CompensationPair(net, n_old=2, hidden=8, seed=4)
    batch = _random_batch(rng, 4)
    with torch.no_grad():
        out = forward_full(net, batch)
        fused_p, fused_m = fuse_outputs(out, pair, loc_classes=None)
        plain_p, plain_m = fuse_outputs(out, None, loc_classes=None)
        targets = compensation_targets(net, None, batch)
    if not torch.allclose(fused_p, plain_p, atol=1e-7):
        return False
    if not torch.allclose(fused_m, plain_m, atol=1e-7):
        return False
    return torch.equal(targets.target_cls, out.cls_map)


CHECKS = (
    ("wsol loss oracles", check_loss_oracles),
    ("distillation losses", check_distill_losses),
    ("head expansion preserves old classes", check_expansion),
    ("herding matches brute-force greedy", check_herding),
    ("box iou and largest-blob choice", check_boxes),
    ("zero compensation is a no-op", check_no_drift_fusion),
)


def run_selfcheck(print_fn=print) -> bool:
    ok = True
    for name, check in CHECKS:
        passed = check()
        ok = ok and passed
        print_fn(f"{'PASS' if passed else 'FAIL'}  {name}")
    print_fn("selfcheck: " + ("all checks passed" if ok else "FAILURES detected"))
    return ok
