"""Drift compensation for old-class outputs.

Training a task shifts the shared features, which degrades the score and
activation maps of previously learned classes. Two small networks learn
additive corrections for exactly those old channels: one maps an intermediate
classifier tap to score corrections, the other maps the shared features to
activation-map corrections. New-class channels always pass through untouched.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .distill_losses import rms
from .model import ImageBatch, ModelOutputs, WsolNetwork, forward_full, gap

# Added under the square root of the RMS objective during compensation
# training; the exact RMS has an unbounded gradient at zero difference.
TRAIN_GRAD_EPS = 1e-12


class CompensationModule(nn.Module):
    """Three-convolution map from a feature tensor to per-old-class corrections.

    1x1 -> 3x3 -> 1x1 with ReLU between; the final layer is zero-initialized
    so a fresh module outputs exactly zero (no compensation).
    """

    def __init__(self, in_channels: int, n_old: int, hidden: int = 128,
                 seed: int = 0):
        super().__init__()
        generator = torch.Generator().manual_seed(seed)
        self.conv1 = nn.Conv2d(in_channels, hidden, kernel_size=1)
        self.conv2 = nn.Conv2d(hidden, hidden, kernel_size=3, padding=1)
        self.conv3 = nn.Conv2d(hidden, n_old, kernel_size=1)
        with torch.no_grad():
            for conv in (self.conv1, self.conv2):
                fan_in = conv.in_channels * conv.kernel_size[0] * conv.kernel_size[1]
                conv.weight.copy_(torch.randn(conv.weight.shape, generator=generator)
                                  * (2.0 / fan_in) ** 0.5)
                conv.bias.zero_()
            self.conv3.weight.zero_()
            self.conv3.bias.zero_()

    def forward(self, x):
        x = F.relu(self.conv1(x))
        x = F.relu(self.conv2(x))
        return self.conv3(x)


class CompensationPair(nn.Module):
    """The per-task pair of compensation modules.

    `score_comp` reads the classifier tap taken before its last three layers;
    `mask_comp` reads the shared feature map. Both emit exactly `n_old`
    channels, one per previously learned class.
    """

    def __init__(self, net: WsolNetwork, n_old: int, hidden: int = 128,
                 seed: int = 0):
        super().__init__()
        if n_old < 1:
            raise ValueError("n_old must be >= 1")
        self.n_old = n_old
        self.score_comp = CompensationModule(
            net.classifier.tap_pre_last3_channels, n_old, hidden, seed)
        self.mask_comp = CompensationModule(
            net.backbone.out_channels, n_old, hidden, seed + 1)

    def score_correction(self, outputs: ModelOutputs) -> torch.Tensor:
        return self.score_comp(outputs.cls_tap_pre_last3)

    def mask_correction(self, outputs: ModelOutputs) -> torch.Tensor:
        return self.mask_comp(outputs.features)


@dataclass
class CompensationTargets:
    """Old-class maps reconstructed from the frozen previous-task networks."""

    target_cls: torch.Tensor  # (B, n_old, N, N)
    target_cam: torch.Tensor  # (B, n_old, N, N)


@torch.no_grad()
def compensation_targets(prev_net: WsolNetwork, prev_pair: CompensationPair | None,
                         batch: ImageBatch) -> CompensationTargets:
    """Targets for compensation training: the previous task's corrected outputs.

    For the second task there is no previous pair, so the targets are the raw
    previous-network maps (equivalently, zero previous corrections). For later
    tasks the previous pair's corrections are added on its own old slice and
    the remaining channels are taken raw.
    """
    out = forward_full(prev_net, batch)
    if prev_pair is None:
        return CompensationTargets(out.cls_map.clone(), out.cam_map.clone())
    n_oo = prev_pair.n_old
    if n_oo >= prev_net.num_classes:
        raise ValueError(
            f"previous pair covers {n_oo} classes but the previous network "
            f"only has {prev_net.num_classes}")
    target_cls = torch.cat(
        [out.cls_map[:, :n_oo] + prev_pair.score_correction(out),
         out.cls_map[:, n_oo:]], dim=1)
    target_cam = torch.cat(
        [out.cam_map[:, :n_oo] + prev_pair.mask_correction(out),
         out.cam_map[:, n_oo:]], dim=1)
    return CompensationTargets(target_cls, target_cam)


def _check_frozen(net: WsolNetwork):
    if any(p.requires_grad for p in net.parameters()):
        raise RuntimeError(
            "the WSOL network must be frozen while the compensation modules "
            "train; call freeze() on it first")


def loss_dc(cur_net: WsolNetwork, cur_pair: CompensationPair,
            targets: CompensationTargets, batch: ImageBatch, beta: float = 1.0,
            grad_eps: float = 0.0) -> torch.Tensor:
    """Compensation objective: RMS mismatch of corrected maps to the targets.

    Score and activation terms are per-image RMS distances, combined as
    score + beta * activation. Gradients may only flow into `cur_pair`;
    an unfrozen `cur_net` is a training-contract violation.
    """
    _check_frozen(cur_net)
    n_old = cur_pair.n_old
    if targets.target_cls.shape[1] != n_old or targets.target_cam.shape[1] != n_old:
        raise ValueError(
            f"targets cover {targets.target_cls.shape[1]} classes but the "
            f"pair compensates {n_old}")
    out = forward_full(cur_net, batch)
    pred_cls = out.cls_map[:, :n_old] + cur_pair.score_correction(out)
    pred_cam = out.cam_map[:, :n_old] + cur_pair.mask_correction(out)
    l_c = rms(pred_cls - targets.target_cls, grad_eps)
    l_l = rms(pred_cam - targets.target_cam, grad_eps)
    return l_c + beta * l_l


def fuse_outputs(outputs: ModelOutputs, pair: CompensationPair | None,
                 loc_classes=None):
    """Final class probabilities and localization map with corrections applied.

    Old-class channels get the pair's additive corrections before the softmax
    (scores) and sigmoid (masks); new-class channels are passed through
    unchanged. With `pair=None` this is plain inference. `loc_classes` selects
    the localization channel per image ((B,) tensor or int); None returns all
    K channels.

    Returns (class_probs (B, K), loc_map (B, N, N) or (B, K, N, N)).
    """
    cls_map, cam_map = outputs.cls_map, outputs.cam_map
    if pair is not None:
        k = cls_map.shape[1]
        if pair.n_old >= k:
            raise ValueError(
                f"pair compensates {pair.n_old} classes but the network only "
                f"has {k}")
        cls_map = torch.cat(
            [cls_map[:, :pair.n_old] + pair.score_correction(outputs),
             cls_map[:, pair.n_old:]], dim=1)
        cam_map = torch.cat(
            [cam_map[:, :pair.n_old] + pair.mask_correction(outputs),
             cam_map[:, pair.n_old:]], dim=1)
    class_probs = F.softmax(gap(cls_map), dim=1)
    loc_map = torch.sigmoid(cam_map)
    if loc_classes is not None:
        if isinstance(loc_classes, int):
            loc_classes = torch.full((cls_map.shape[0],), loc_classes, dtype=torch.long)
        loc_map = loc_map[torch.arange(cls_map.shape[0]), loc_classes]
    return class_probs, loc_map


def train_compensation(cur_net: WsolNetwork, prev_net: WsolNetwork,
                       prev_pair: CompensationPair | None, loader, epochs: int,
                       beta: float = 1.0, lr: float = 0.05, momentum: float = 0.9,
                       hidden: int = 128, seed: int = 0) -> CompensationPair:
    """Train a fresh compensation pair against the previous task's outputs.

    Both networks must be frozen; only the pair's parameters receive
    gradients. The square root of the RMS objective is stabilized with
    TRAIN_GRAD_EPS so the no-drift case (zero difference everywhere) trains
    without NaNs and simply stays at zero. With `epochs=0` the zero-initialized
    pair is returned and fusion equals plain inference.
    """
    _check_frozen(cur_net)
    _check_frozen(prev_net)
    pair = CompensationPair(cur_net, prev_net.num_classes, hidden=hidden, seed=seed)
    if epochs == 0:
        return pair
    optimizer = torch.optim.SGD(pair.parameters(), lr=lr, momentum=momentum)
    for epoch in range(epochs):
        for batch in loader.epoch(epoch):
            targets = compensation_targets(prev_net, prev_pair, batch)
            loss = loss_dc(cur_net, pair, targets, batch, beta,
                           grad_eps=TRAIN_GRAD_EPS)
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
    return pair
