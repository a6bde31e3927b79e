"""Neural discrimination prior: how far the mixed high-resolution features
sit from a block's low-resolution input, squashed into (0, 1]."""

from __future__ import annotations

from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
from PIL import Image

from .primitives import Conv2d

# |d| is clamped before exp so the map never underflows to exactly zero.
NDP_CLAMP = 80.0


class MultiscaleMixer(nn.Module):
    """Concatenate (x1, x2, x3) on channels and reduce with an s x s, stride-s conv.

    ``factorized=True`` swaps the dense strided conv (3C*C*s*s weights) for a
    strided depthwise conv followed by a pointwise 3C -> C projection.
    """

    def __init__(self, channels: int, s: int, factorized: bool = False):
        super().__init__()
        self.channels = channels
        self.s = s
        self.factorized = factorized
        if factorized:
            self.reduce = nn.Sequential(
                Conv2d("strided", 3 * channels, 3 * channels, s, groups=3 * channels),
                Conv2d("pointwise", 3 * channels, channels),
            )
        else:
            self.reduce = Conv2d("strided", 3 * channels, channels, s)

    def forward(self, x1: torch.Tensor, x2: torch.Tensor, x3: torch.Tensor) -> torch.Tensor:
        if not (x1.shape == x2.shape == x3.shape):
            raise ValueError(f"HR features disagree in shape: {tuple(x1.shape)}, {tuple(x2.shape)}, {tuple(x3.shape)}")
        h, w = x1.shape[-2:]
        if h % self.s or w % self.s:
            raise ValueError(f"HR features {h}x{w} not divisible by shuffle factor {self.s}")
        return self.reduce(torch.cat([x1, x2, x3], dim=1))


def compute_ndp(mixed: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    """exp(-|mixed - y| / 2), the same value as 1 / sqrt(e^|mixed - y|)."""
    if mixed.shape != y.shape:
        raise ValueError(f"prior inputs disagree in shape: {tuple(mixed.shape)} vs {tuple(y.shape)}")
    d = torch.clamp(torch.abs(mixed - y), max=NDP_CLAMP)
    return torch.exp(-0.5 * d)


def ndp_for_block(block_input: torch.Tensor, hr_feats, mixer: MultiscaleMixer) -> torch.Tensor:
    mixed = mixer(*hr_feats)
    if mixed.shape != block_input.shape:
        raise ValueError(f"mixed HR features {tuple(mixed.shape)} do not match block input {tuple(block_input.shape)}")
    return compute_ndp(mixed, block_input)


def prior_to_gray(prior: torch.Tensor) -> np.ndarray:
    """Channel-mean of the first batch item, min-max stretched to uint8.
    A constant map becomes uniform 128."""
    m = prior.detach()[0].double().mean(dim=0).cpu().numpy()
    lo, hi = float(m.min()), float(m.max())
    if hi - lo <= 0.0:
        return np.full(m.shape, 128, dtype=np.uint8)
    return np.round(255.0 * (m - lo) / (hi - lo)).astype(np.uint8)


def dump_ndp_maps(prior: torch.Tensor, path) -> Path:
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        Image.fromarray(prior_to_gray(prior), mode="L").save(path)
    except OSError as exc:
        raise OSError(f"could not write NDP map to {path}: {exc}") from exc
    return path
