"""Training losses for the baseline WSOL network.

Four terms: image classification on pooled scores, foreground-masked
classification, background activation suppression, and an area constraint on
the foreground mask. All reductions over the batch are arithmetic means so
the weights stay resolution- and batch-size-independent.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .model import ModelOutputs, WsolNetwork, gap, masked_background_forward


@dataclass(frozen=True)
class WsolLossWeights:
    alpha1: float = 1.0  # foreground classification
    alpha2: float = 1.0  # background suppression
    alpha3: float = 1.0  # area constraint
    epsilon: float = 1e-8  # division guard in the suppression ratio

    def __post_init__(self):
        if self.epsilon <= 0:
            raise ValueError("epsilon must be positive")


def _check_spatial(a: torch.Tensor, b: torch.Tensor):
    if a.shape[-2:] != b.shape[-2:]:
        raise ValueError(f"spatial dims differ: {tuple(a.shape)} vs {tuple(b.shape)}")


def loss_cls(cls_map: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Cross entropy of the pooled class score map against the labels.

    Pool-then-softmax: logits are the spatial mean of each class channel.
    """
    return F.cross_entropy(gap(cls_map), labels)


def loss_cls_fg(cls_map: torch.Tensor, cam_map: torch.Tensor,
                labels: torch.Tensor) -> torch.Tensor:
    """Cross entropy after masking the score map with the true-class foreground.

    The sigmoid of the label's activation channel is broadcast onto every
    class channel of the score map before pooling.
    """
    _check_spatial(cls_map, cam_map)
    fg = torch.sigmoid(cam_map[torch.arange(len(labels)), labels])  # (B, N, N)
    return F.cross_entropy(gap(cls_map * fg.unsqueeze(1)), labels)


def loss_bas(net: WsolNetwork, outputs: ModelOutputs, labels: torch.Tensor,
             epsilon: float = 1e-8) -> torch.Tensor:
    """Background activation suppression ratio s_bg / (s_all + eps).

    s_all pools the label channel of the score map from the primary forward;
    s_bg pools the label channel of a second classifier pass over features
    with the foreground masked out.
    """
    idx = torch.arange(len(labels))
    s_all = gap(outputs.cls_map)[idx, labels]
    fg = torch.sigmoid(outputs.cam_map[idx, labels])
    bg_scores = masked_background_forward(net, outputs.features, fg)
    s_bg = gap(bg_scores)[idx, labels]
    return (s_bg / (s_all + epsilon)).mean()


def loss_ac(cam_map: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Mean foreground area of the true-class mask; always in [0, 1]."""
    fg = torch.sigmoid(cam_map[torch.arange(len(labels)), labels])
    return fg.mean()


def loss_wsol_total(l_cls, l_cls_fg, l_bas, l_ac,
                    weights: WsolLossWeights) -> torch.Tensor:
    return (l_cls + weights.alpha1 * l_cls_fg + weights.alpha2 * l_bas
            + weights.alpha3 * l_ac)


def wsol_losses(net: WsolNetwork, outputs: ModelOutputs, labels: torch.Tensor,
                weights: WsolLossWeights):
    """All four terms plus the weighted total, from one set of outputs."""
    l_cls = loss_cls(outputs.cls_map, labels)
    l_fg = loss_cls_fg(outputs.cls_map, outputs.cam_map, labels)
    l_bas = loss_bas(net, outputs, labels, weights.epsilon)
    l_ac = loss_ac(outputs.cam_map, labels)
    total = loss_wsol_total(l_cls, l_fg, l_bas, l_ac, weights)
    return {"cls": l_cls, "cls_fg": l_fg, "bas": l_bas, "ac": l_ac, "wsol": total}
