"""Versioned checkpoint archives.

A checkpoint is a zip of named numpy arrays (the `.npz` container) holding
every parameter under stable state-dict keys plus the metadata needed to
rebuild the networks: format version, architecture description, class count,
the cosine scale, and the torch RNG state. `numpy.load` alone is enough to
read one; no training code is required.

Key layout:
    meta/version      scalar int, currently 1
    meta/arch         JSON string with the ModelConfig fields and class counts
    meta/num_classes  scalar int
    meta/scale        scalar float (cosine head scale; 0 for the plain head)
    meta/rng_state    torch RNG state bytes
    net/<name>        one array per network parameter or buffer
    fdc/<name>        compensation pair parameters, when present
"""

from __future__ import annotations

import json

import numpy as np
import torch

from .compensation import CompensationPair
from .model import ModelConfig, WsolNetwork

FORMAT_VERSION = 1


def save_checkpoint(path, net: WsolNetwork, pair: CompensationPair | None = None,
                    rng_state: torch.Tensor | None = None):
    arch = {
        "input_size": net.config.input_size,
        "backbone_channels": list(net.config.backbone_channels),
        "backbone_strides": list(net.config.backbone_strides),
        "classifier_channels": list(net.config.classifier_channels),
        "cosine_head": net.config.cosine_head,
        "scale_init": net.config.scale_init,
        "num_classes": net.num_classes,
        "fdc_n_old": pair.n_old if pair is not None else 0,
        "fdc_hidden": pair.score_comp.conv1.out_channels if pair is not None else 0,
    }
    arrays = {
        "meta/version": np.int64(FORMAT_VERSION),
        "meta/arch": np.bytes_(json.dumps(arch).encode("utf-8")),
        "meta/num_classes": np.int64(net.num_classes),
        "meta/scale": np.float64(
            float(net.classifier.head.scale.detach())
            if net.config.cosine_head else 0.0),
        "meta/rng_state": (rng_state if rng_state is not None
                           else torch.get_rng_state()).numpy(),
    }
    for name, tensor in net.state_dict().items():
        arrays[f"net/{name}"] = tensor.detach().cpu().numpy()
    if pair is not None:
        for name, tensor in pair.state_dict().items():
            arrays[f"fdc/{name}"] = tensor.detach().cpu().numpy()
    # savez appends ".npz" to bare paths; writing through a file object keeps
    # the configured name exactly.
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_checkpoint(path):
    """Rebuild (net, pair_or_None, rng_state) from an archive."""
    with open(path, "rb") as fh:
        archive = np.load(fh)
        arrays = {k: archive[k] for k in archive.files}
    version = int(arrays["meta/version"])
    if version != FORMAT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    arch = json.loads(bytes(arrays["meta/arch"]).decode("utf-8"))
    config = ModelConfig(
        input_size=arch["input_size"],
        backbone_channels=tuple(arch["backbone_channels"]),
        backbone_strides=tuple(arch["backbone_strides"]),
        classifier_channels=tuple(arch["classifier_channels"]),
        cosine_head=arch["cosine_head"],
        scale_init=arch["scale_init"],
    )
    net = WsolNetwork(config, num_classes=arch["num_classes"])
    net.load_state_dict({k[len("net/"):]: torch.from_numpy(v)
                         for k, v in arrays.items() if k.startswith("net/")})
    pair = None
    if arch["fdc_n_old"] > 0:
        pair = CompensationPair(net, arch["fdc_n_old"], hidden=arch["fdc_hidden"])
        pair.load_state_dict({k[len("fdc/"):]: torch.from_numpy(v)
                              for k, v in arrays.items() if k.startswith("fdc/")})
    rng_state = torch.from_numpy(arrays["meta/rng_state"])
    return net, pair, rng_state
