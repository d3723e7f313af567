"""WSOL network with class-incremental heads.

The network is a triplet: a shared convolutional backbone, a five-layer
classifier whose last layer is cosine-normalized with one learnable scale,
and a single-convolution localizer with one filter per class. Both heads can
be expanded row-by-row when new classes arrive; expansion preserves the old
rows bit-for-bit.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field

import torch
import torch.nn as nn
import torch.nn.functional as F

# Stabilizer added to l2 norms before division; keeps zero vectors finite.
NORM_EPS = 1e-8


@dataclass
class ImageBatch:
    """One batch of images, channel-normalized, with integer class labels."""

    pixels: torch.Tensor  # (B, 3, H, W) float
    labels: torch.Tensor  # (B,) int64, class indices in [0, K)
    image_ids: list = field(default_factory=list)

    def __len__(self) -> int:
        return self.pixels.shape[0]


@dataclass
class ModelOutputs:
    """All tensors produced by one forward pass.

    Taps come from the same pass as the maps, so recomputing with the same
    weights and batch reproduces them bit-identically.
    """

    features: torch.Tensor  # (B, C_b, h, w) shared feature map
    cls_map: torch.Tensor  # (B, K, N, N) pre-softmax class score map
    cam_map: torch.Tensor  # (B, K, N, N) pre-sigmoid activation map
    cls_tap_pre_last: torch.Tensor  # classifier output before its final layer
    cls_tap_pre_last3: torch.Tensor  # classifier output before its final three layers
    loc_tap_pre_last: torch.Tensor  # localizer input (= features for a 1-layer localizer)


@dataclass(frozen=True)
class ModelConfig:
    """Architecture hyperparameters; all sizes are configurable."""

    input_size: int = 64
    backbone_channels: tuple = (64, 128, 256, 256)
    backbone_strides: tuple = (2, 2, 2, 1)
    classifier_channels: tuple = (128, 128, 128, 128)
    classifier_kernel: int = 1
    cosine_head: bool = True
    scale_init: float = 10.0


class ChannelNorm(nn.Module):
    """Normalize each location's channel vector to zero mean / unit variance.

    Statistics never pool over space or batch, so no global information can
    leak into spatially distant cells (pooling norms would broadcast the
    object's identity into background features and defeat localization).
    Mode-independent and deterministic.
    """

    def __init__(self, channels: int, eps: float = 1e-5):
        super().__init__()
        self.eps = eps
        self.weight = nn.Parameter(torch.ones(channels))
        self.bias = nn.Parameter(torch.zeros(channels))

    def forward(self, x):
        mean = x.mean(dim=1, keepdim=True)
        var = x.var(dim=1, keepdim=True, unbiased=False)
        x = (x - mean) / torch.sqrt(var + self.eps)
        return x * self.weight[:, None, None] + self.bias[:, None, None]


def _init_conv(conv: nn.Conv2d, generator: torch.Generator, gain: float = 2.0):
    fan_in = conv.in_channels * conv.kernel_size[0] * conv.kernel_size[1]
    std = (gain / fan_in) ** 0.5
    with torch.no_grad():
        conv.weight.copy_(torch.randn(conv.weight.shape, generator=generator) * std)
        if conv.bias is not None:
            conv.bias.zero_()


def _unit_sphere_rows(n_rows: int, dim: int, generator: torch.Generator) -> torch.Tensor:
    rows = torch.randn(n_rows, dim, generator=generator)
    return rows / (rows.norm(dim=1, keepdim=True) + NORM_EPS)


def _fan_in_rows(n_rows: int, in_channels: int, kh: int, kw: int,
                 generator: torch.Generator) -> torch.Tensor:
    fan_in = in_channels * kh * kw
    return torch.randn(n_rows, in_channels, kh, kw, generator=generator) / fan_in ** 0.5


class ConvBlock(nn.Module):
    """Convolution + optional per-location channel norm + ReLU.

    The classifier layers skip the norm so that a background-masked input
    stays suppressed instead of renormalizing itself.
    """

    def __init__(self, c_in: int, c_out: int, stride: int = 1, norm: bool = True,
                 kernel: int = 3):
        super().__init__()
        self.conv = nn.Conv2d(c_in, c_out, kernel_size=kernel, stride=stride,
                              padding=kernel // 2)
        self.norm = ChannelNorm(c_out) if norm else nn.Identity()

    def forward(self, x):
        return F.relu(self.norm(self.conv(x)))


class Backbone(nn.Module):
    """Small configurable CNN producing the shared feature map."""

    def __init__(self, channels, strides):
        super().__init__()
        if len(channels) != len(strides):
            raise ValueError("backbone channels and strides must have equal length")
        blocks = []
        c_prev = 3
        for c, s in zip(channels, strides):
            blocks.append(ConvBlock(c_prev, c, stride=s))
            c_prev = c
        self.blocks = nn.Sequential(*blocks)
        self.out_channels = c_prev
        self.total_stride = 1
        for s in strides:
            self.total_stride *= s

    def forward(self, x):
        return self.blocks(x)


def l2_normalize(x: torch.Tensor, dim: int) -> torch.Tensor:
    """x / (||x|| + eps) along `dim`; zero vectors map to zero, never NaN."""
    return x / (x.norm(dim=dim, keepdim=True) + NORM_EPS)


def cosine_class_scores(features: torch.Tensor, class_weights: torch.Tensor,
                        scale: torch.Tensor | float) -> torch.Tensor:
    """Per-location scaled cosine similarity between features and class weights.

    features: (C, N, N); class_weights: (K, C); returns (K, N, N) with every
    score in [-scale, +scale]. Norm denominators are stabilized with NORM_EPS,
    so zero vectors yield score 0.
    """
    if features.dim() != 3 or class_weights.dim() != 2:
        raise ValueError("expected features (C,N,N) and class_weights (K,C)")
    if features.shape[0] != class_weights.shape[1]:
        raise ValueError("feature channels do not match weight columns")
    return _cosine_scores_batched(features.unsqueeze(0), class_weights, scale).squeeze(0)


def _cosine_scores_batched(features: torch.Tensor, class_weights: torch.Tensor,
                           scale) -> torch.Tensor:
    f = l2_normalize(features, dim=1)
    w = l2_normalize(class_weights, dim=1)
    return scale * torch.einsum("kc,bcij->bkij", w, f)


class CosineHead(nn.Module):
    """Final classifier layer: scaled cosine similarity against per-class rows.

    One positive scale scalar is shared across all classes and carried across
    tasks; rows are 1x1-receptive so spatial dims pass through unchanged.
    """

    def __init__(self, in_channels: int, num_classes: int, scale_init: float,
                 generator: torch.Generator):
        super().__init__()
        self.in_channels = in_channels
        self.weight = nn.Parameter(_unit_sphere_rows(num_classes, in_channels, generator))
        self.scale = nn.Parameter(torch.tensor(float(scale_init)))

    @property
    def num_classes(self) -> int:
        return self.weight.shape[0]

    def forward(self, x):
        return _cosine_scores_batched(x, self.weight, self.scale)

    def expand(self, n_new: int, generator: torch.Generator):
        new_rows = _unit_sphere_rows(n_new, self.in_channels, generator)
        self.weight = nn.Parameter(torch.cat([self.weight.data, new_rows], dim=0))


class LinearHead(nn.Module):
    """Plain 1x1-convolution classifier head (the no-cosine-normalization variant)."""

    def __init__(self, in_channels: int, num_classes: int, generator: torch.Generator):
        super().__init__()
        self.in_channels = in_channels
        self.weight = nn.Parameter(_fan_in_rows(num_classes, in_channels, 1, 1, generator))
        self.bias = nn.Parameter(torch.zeros(num_classes))

    @property
    def num_classes(self) -> int:
        return self.weight.shape[0]

    def forward(self, x):
        return F.conv2d(x, self.weight, self.bias)

    def expand(self, n_new: int, generator: torch.Generator):
        new_rows = _fan_in_rows(n_new, self.in_channels, 1, 1, generator)
        self.weight = nn.Parameter(torch.cat([self.weight.data, new_rows], dim=0))
        self.bias = nn.Parameter(torch.cat([self.bias.data, torch.zeros(n_new)]))


class Classifier(nn.Module):
    """Five-layer convolutional classifier over the shared feature map.

    Four 3x3 hidden blocks (stride 1) followed by the per-class head. Exposes
    the taps used elsewhere: the input of the final layer and the output of
    the second layer (i.e. the net with its last three layers removed).
    """

    def __init__(self, in_channels: int, hidden_channels, num_classes: int,
                 cosine: bool, scale_init: float, generator: torch.Generator,
                 kernel: int = 1):
        super().__init__()
        if len(hidden_channels) != 4:
            raise ValueError("classifier takes exactly 4 hidden layer widths")
        c_prev = in_channels
        blocks = []
        for c in hidden_channels:
            blocks.append(ConvBlock(c_prev, c, norm=False, kernel=kernel))
            c_prev = c
        self.blocks = nn.ModuleList(blocks)
        if cosine:
            self.head = CosineHead(c_prev, num_classes, scale_init, generator)
        else:
            self.head = LinearHead(c_prev, num_classes, generator)
        self.tap_pre_last3_channels = hidden_channels[1]
        self.tap_pre_last_channels = hidden_channels[3]

    def forward(self, x):
        for block in self.blocks:
            x = block(x)
        return self.head(x)

    def forward_with_taps(self, x):
        """Returns (pre_last3 tap, pre_last tap, class score map)."""
        x = self.blocks[0](x)
        tap3 = self.blocks[1](x)
        x = self.blocks[2](tap3)
        tap1 = self.blocks[3](x)
        return tap3, tap1, self.head(tap1)


class Localizer(nn.Module):
    """Single 3x3 convolution with one filter per class; preserves spatial dims."""

    def __init__(self, in_channels: int, num_classes: int, generator: torch.Generator):
        super().__init__()
        self.in_channels = in_channels
        self.weight = nn.Parameter(_fan_in_rows(num_classes, in_channels, 3, 3, generator))
        self.bias = nn.Parameter(torch.zeros(num_classes))

    @property
    def num_classes(self) -> int:
        return self.weight.shape[0]

    def forward(self, x):
        return F.conv2d(x, self.weight, self.bias, padding=1)

    def expand(self, n_new: int, generator: torch.Generator):
        new_rows = _fan_in_rows(n_new, self.in_channels, 3, 3, generator)
        self.weight = nn.Parameter(torch.cat([self.weight.data, new_rows], dim=0))
        self.bias = nn.Parameter(torch.cat([self.bias.data, torch.zeros(n_new)]))


class WsolNetwork(nn.Module):
    """The backbone / classifier / localizer triplet."""

    def __init__(self, config: ModelConfig, num_classes: int, seed: int = 0):
        super().__init__()
        generator = torch.Generator().manual_seed(seed)
        self.config = config
        self.backbone = Backbone(config.backbone_channels, config.backbone_strides)
        self.classifier = Classifier(self.backbone.out_channels,
                                     config.classifier_channels, num_classes,
                                     config.cosine_head, config.scale_init, generator,
                                     kernel=config.classifier_kernel)
        self.localizer = Localizer(self.backbone.out_channels, num_classes, generator)
        for m in self.modules():
            if isinstance(m, nn.Conv2d):
                _init_conv(m, generator)

    @property
    def num_classes(self) -> int:
        return self.classifier.head.num_classes

    def forward(self, pixels):
        return forward_full_pixels(self, pixels).cls_map


def forward_full(net: WsolNetwork, batch: ImageBatch) -> ModelOutputs:
    """One forward pass returning all maps and taps.

    Raises ValueError when the batch spatial dims do not match the network's
    configured input size (a configuration error, never silently resized).
    """
    h, w = batch.pixels.shape[-2], batch.pixels.shape[-1]
    expected = net.config.input_size
    if h != expected or w != expected:
        raise ValueError(
            f"batch is {h}x{w} but the network is configured for "
            f"{expected}x{expected} inputs")
    return forward_full_pixels(net, batch.pixels)


def forward_full_pixels(net: WsolNetwork, pixels: torch.Tensor) -> ModelOutputs:
    features = net.backbone(pixels)
    tap3, tap1, cls_map = net.classifier.forward_with_taps(features)
    cam_map = net.localizer(features)
    return ModelOutputs(features=features, cls_map=cls_map, cam_map=cam_map,
                        cls_tap_pre_last=tap1, cls_tap_pre_last3=tap3,
                        loc_tap_pre_last=features)


def masked_background_forward(net: WsolNetwork, features: torch.Tensor,
                              fg_mask: torch.Tensor) -> torch.Tensor:
    """Class score map of the classifier on background-only features.

    `fg_mask` is a (B, N, N) sigmoid-activated foreground mask; the features
    are multiplied channel-wise by (1 - fg_mask) before the classifier runs.
    Spatial dims must already match; there is no silent resize.
    """
    if fg_mask.dim() != 3:
        raise ValueError("fg_mask must be (B, N, N)")
    if features.shape[0] != fg_mask.shape[0] or features.shape[-2:] != fg_mask.shape[-2:]:
        raise ValueError(
            f"fg_mask spatial dims {tuple(fg_mask.shape)} do not match "
            f"features {tuple(features.shape)}")
    return net.classifier(features * (1.0 - fg_mask).unsqueeze(1))


def expand_heads(net: WsolNetwork, n_new: int, rng_seed: int) -> WsolNetwork:
    """Copy of `net` with `n_new` extra classes appended to both heads.

    All pre-existing parameters (including the old head rows) are preserved
    bit-for-bit; only the new rows are drawn from `rng_seed`. Classifier rows
    are sampled uniformly on the unit sphere, localizer filters from a
    fan-in-scaled normal with zero bias.
    """
    if n_new < 1:
        raise ValueError("n_new must be >= 1")
    expanded = copy.deepcopy(net)
    generator = torch.Generator().manual_seed(rng_seed)
    expanded.classifier.head.expand(n_new, generator)
    expanded.localizer.expand(n_new, generator)
    return expanded


def freeze(net: nn.Module) -> nn.Module:
    """Put `net` in eval mode and stop gradient flow into its parameters."""
    net.eval()
    for p in net.parameters():
        p.requires_grad_(False)
    return net


def gap(x: torch.Tensor) -> torch.Tensor:
    """Global average pooling over the two trailing spatial dims."""
    return x.mean(dim=(-2, -1))
