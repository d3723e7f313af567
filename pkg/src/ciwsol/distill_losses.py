"""Distillation losses that tie the current network to its frozen predecessor.

Score distillation uses KL divergence on pooled softmax distributions over
the old classes (new channels are sliced off before pooling). Mask
distillation is a per-image RMS between true-class sigmoid masks, and
feature distillation is one minus the mean per-location cosine similarity.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .model import NORM_EPS, gap


@dataclass(frozen=True)
class KdLossWeights:
    alpha4: float = 1.0  # score distillation
    alpha5: float = 1.0  # mask distillation (exemplar samples only)
    alpha6: float = 0.5  # feature distillation, classifier tap
    alpha7: float = 0.5  # feature distillation, localizer tap


def loss_kd_cls(cls_map_new: torch.Tensor, cls_map_old: torch.Tensor) -> torch.Tensor:
    """KL(old || new) between pooled softmax distributions over old classes.

    The new map is restricted to the old channel count before pooling and
    softmax. No temperature is applied.
    """
    n_old = cls_map_old.shape[1]
    if cls_map_new.shape[1] < n_old:
        raise ValueError(
            f"new map has {cls_map_new.shape[1]} channels, fewer than the "
            f"old map's {n_old}")
    log_p = F.log_softmax(gap(cls_map_old), dim=1)
    log_q = F.log_softmax(gap(cls_map_new[:, :n_old]), dim=1)
    p = log_p.exp()
    return (p * (log_p - log_q)).sum(dim=1).mean()


def rms(diff: torch.Tensor, grad_eps: float = 0.0) -> torch.Tensor:
    """Per-image root-mean-square over all non-batch dims, then batch mean.

    `grad_eps` is added under the square root by training code to keep the
    gradient finite when the difference is exactly zero; the default of 0.0
    computes the exact value.
    """
    sq = diff.reshape(diff.shape[0], -1).pow(2).mean(dim=1)
    return (sq + grad_eps).sqrt().mean()


def loss_kd_loc(cam_new: torch.Tensor, cam_old: torch.Tensor,
                labels: torch.Tensor, grad_eps: float = 0.0) -> torch.Tensor:
    """Per-image RMS between the true-class sigmoid masks of the two networks.

    Only valid for old-class (exemplar) samples: the old network has no
    channel for new classes, so a label beyond its channel count is misuse.
    """
    n_old = cam_old.shape[1]
    if (labels >= n_old).any():
        raise ValueError(
            "mask distillation received a label outside the old class range; "
            "it applies only to exemplar-set samples")
    idx = torch.arange(len(labels))
    diff = torch.sigmoid(cam_new[idx, labels]) - torch.sigmoid(cam_old[idx, labels])
    return rms(diff, grad_eps)


def loss_kd_feat(tap_new: torch.Tensor, tap_old: torch.Tensor) -> torch.Tensor:
    """1 - mean cosine similarity between per-location channel vectors.

    Taps are (B, C, H, W); the cosine is taken over C at each (b, i, j) and
    averaged over batch and locations. Bounded in [0, 2]; invariant to
    per-location positive rescaling of either tap.
    """
    if tap_new.shape != tap_old.shape:
        raise ValueError(f"tap shapes differ: {tuple(tap_new.shape)} vs "
                         f"{tuple(tap_old.shape)}")
    dot = (tap_new * tap_old).sum(dim=1)
    denom = (tap_new.norm(dim=1) + NORM_EPS) * (tap_old.norm(dim=1) + NORM_EPS)
    return 1.0 - (dot / denom).mean()


def loss_ci_total(wsol, kd_cls, kd_loc, kd_feat_cls, kd_feat_loc,
                  w: KdLossWeights) -> torch.Tensor:
    """Class-incremental training objective: WSOL terms plus weighted distillation."""
    return (w.alpha4 * kd_cls + w.alpha5 * kd_loc + w.alpha6 * kd_feat_cls
            + w.alpha7 * kd_feat_loc + wsol)
