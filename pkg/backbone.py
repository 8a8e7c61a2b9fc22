# -*- coding: utf-8 -*-
"""
Dynamic architecture: one feature extractor per task, all but the newest frozen,
outputs concatenated newest-first into z = [f_t(x); f_{t-1}(x); ...; f_1(x)].
"""
import hashlib
import logging
from typing import Callable, Dict, List, Literal, Optional

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from cil_errors import ConfigurationError, UsageError
from vmf_math import VmfClassifier

logger = logging.getLogger(__name__)


class ConvExtractor(nn.Module):
    """Three conv blocks and a global average pool; works for any H, W >= 8."""

    def __init__(self, in_channels: int, out_dim: int, width: int = 16):
        super().__init__()
        self.out_dim = out_dim
        self.blocks = nn.Sequential(
            nn.Conv2d(in_channels, width, 3, padding=1, bias=False),
            nn.BatchNorm2d(width),
            nn.ReLU(inplace=True),
            nn.MaxPool2d(2),
            nn.Conv2d(width, 2 * width, 3, padding=1, bias=False),
            nn.BatchNorm2d(2 * width),
            nn.ReLU(inplace=True),
            nn.MaxPool2d(2),
            nn.Conv2d(2 * width, out_dim, 3, padding=1, bias=False),
            nn.BatchNorm2d(out_dim),
            nn.ReLU(inplace=True),
            nn.AdaptiveAvgPool2d(1),
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.blocks(x).flatten(1)


class LinearClassifier(nn.Module):
    """Plain affine head on the raw dynamic feature (used when the vMF head is off)."""

    def __init__(self, num_classes: int, dim: int):
        super().__init__()
        self.weight = nn.Parameter(torch.empty(num_classes, dim))
        self.bias = nn.Parameter(torch.zeros(num_classes))
        nn.init.kaiming_uniform_(self.weight, a=5 ** 0.5)

    @property
    def num_classes(self) -> int:
        return self.weight.shape[0]

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        return F.linear(z, self.weight, self.bias)


class IncrementalNet(nn.Module):
    """
    Extractors plus the main head (vMF or linear) and the auxiliary old-vs-new head.
    forward() returns a dict with features, z_bar, logits and aux_logits.
    """

    def __init__(self, in_channels: int, feature_dim: int = 32, conv_width: int = 16,
                 use_vmf: bool = True, architecture: Literal["dynamic", "single"] = "dynamic",
                 kappa_init: float = 10.0):
        super().__init__()
        self.in_channels = in_channels
        self.extractor_dim = feature_dim
        self.conv_width = conv_width
        self.use_vmf = use_vmf
        self.architecture = architecture
        self.kappa_init = kappa_init
        self.extractors = nn.ModuleList()
        self.head: Optional[nn.Module] = None
        self.aux_head: Optional[nn.Linear] = None
        self.in_task = False

    # --- structure ---

    @property
    def feature_dim(self) -> int:
        return sum(e.out_dim for e in self.extractors)

    @property
    def num_classes(self) -> int:
        return 0 if self.head is None else self.head.num_classes

    def frozen_extractors(self) -> List[nn.Module]:
        if self.architecture == "single":
            return []
        return list(self.extractors[:-1])

    def trainable_parameters(self) -> List[nn.Parameter]:
        return [p for p in self.parameters() if p.requires_grad]

    def train(self, mode: bool = True):
        super().train(mode)
        # frozen extractors keep their batch-norm statistics
        for extractor in self.frozen_extractors():
            extractor.eval()
        return self

    # --- forward ---

    def extract(self, x: torch.Tensor) -> torch.Tensor:
        if not self.extractors:
            raise UsageError("Backbone has no extractor; call expand() first")
        outputs = [e(x) for e in reversed(self.extractors)]
        if len({o.shape[1] for o in outputs}) > 1:
            raise ConfigurationError(f"Extractors disagree on width: {[o.shape[1] for o in outputs]}")
        return torch.cat(outputs, dim=1)

    def forward(self, x: torch.Tensor) -> Dict[str, torch.Tensor]:
        z = self.extract(x)
        z_bar = F.normalize(z, dim=1)
        out = {"features": z, "z_bar": z_bar}
        out["logits"] = self.head(z_bar) if self.use_vmf else self.head(z)
        out["aux_logits"] = self.aux_head(z) if self.aux_head is not None else None
        return out


def expand(net: IncrementalNet, new_num_classes: int, new_task_classes: int,
           extractor_template: Optional[Callable[[], nn.Module]] = None) -> IncrementalNet:
    """
    Start a new task: freeze what exists, append a fresh extractor (dynamic mode),
    and rebuild the heads at the new width. Old-class rows keep their directions on
    the z^(o) coordinates with zeros on the new ones; new rows are unit Gaussian draws.
    """
    if net.in_task:
        raise UsageError("expand() called while a task is still training")
    make = extractor_template or (lambda: ConvExtractor(net.in_channels, net.extractor_dim, net.conv_width))

    old_head = net.head
    old_classes = net.num_classes
    if net.architecture == "dynamic" or not net.extractors:
        for p in net.extractors.parameters():
            p.requires_grad = False
        extractor = make()
        if extractor.out_dim != net.extractor_dim:
            raise ConfigurationError(f"New extractor width {extractor.out_dim} != configured width {net.extractor_dim}")
        net.extractors.append(extractor)

    dim = net.feature_dim
    pad = dim - (old_head.weight.shape[1] if old_head is not None else 0)
    if net.use_vmf:
        head = VmfClassifier(new_num_classes, dim, net.kappa_init)
    else:
        head = LinearClassifier(new_num_classes, dim)
    if old_head is not None:
        with torch.no_grad():
            old_rows = old_head.weight.detach()
            if net.use_vmf:
                old_rows = F.normalize(old_rows, dim=1)
                head.log_kappa.copy_(old_head.log_kappa)
            else:
                head.bias[:old_classes] = old_head.bias
            padded = torch.cat([old_rows.new_zeros(old_classes, pad), old_rows], dim=1)
            head.weight[:old_classes] = F.normalize(padded, dim=1) if net.use_vmf else padded
    net.head = head
    net.aux_head = nn.Linear(dim, 1 + new_task_classes) if old_classes > 0 else None

    logger.info(f"Expanded to {len(net.extractors)} extractor(s): feature_dim={dim}, classes {old_classes}->{new_num_classes}")
    return net


def frozen_checksums(net: IncrementalNet) -> List[str]:
    """SHA-256 of each frozen extractor's parameters and buffers."""
    sums = []
    for extractor in net.frozen_extractors():
        digest = hashlib.sha256()
        for name, tensor in sorted(extractor.state_dict().items()):
            digest.update(name.encode())
            digest.update(tensor.detach().cpu().contiguous().numpy().tobytes())
        sums.append(digest.hexdigest())
    return sums


@torch.no_grad()
def extract_features(net: IncrementalNet, images: np.ndarray, batch_size: int = 256, normalize: bool = True) -> np.ndarray:
    """Features for (N, H, W, C) images, evaluated in eval mode."""
    was_training = net.training
    net.eval()
    chunks = []
    for start in range(0, len(images), batch_size):
        x = to_tensor(images[start:start + batch_size])
        z = net.extract(x)
        chunks.append(F.normalize(z, dim=1) if normalize else z)
    net.train(was_training)
    dim = net.feature_dim
    return torch.cat(chunks).double().numpy() if chunks else np.zeros((0, dim))


def to_tensor(images: np.ndarray, dtype: torch.dtype = torch.float32) -> torch.Tensor:
    """(N, H, W, C) numpy -> (N, C, H, W) tensor."""
    return torch.from_numpy(np.ascontiguousarray(images.transpose(0, 3, 1, 2))).to(dtype)
