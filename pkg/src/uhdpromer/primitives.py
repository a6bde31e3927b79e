"""Low-level building blocks shared by every stage of the network.

All stride-1 convolutions pad with reflection so spatial size is preserved;
strided convolutions use kernel == stride and no padding.
"""

from __future__ import annotations

import math

import torch
import torch.nn as nn
import torch.nn.functional as F

LN_EPS = 1e-6
GRN_EPS = 1e-6
# bound sqrt(3 / fan_in): unit-variance preserving uniform init
INIT_GAIN = 3.0


def pad2d(x: torch.Tensor, left: int, right: int, top: int, bottom: int) -> torch.Tensor:
    """Reflect-pad the last two axes, falling back to edge replication on
    axes too short to reflect (reflection needs pad < size)."""
    if left == right == top == bottom == 0:
        return x
    h, w = x.shape[-2:]
    if max(top, bottom) < h and max(left, right) < w:
        return F.pad(x, (left, right, top, bottom), mode="reflect")
    return F.pad(x, (left, right, top, bottom), mode="replicate")


def pixel_unshuffle(x: torch.Tensor, s: int) -> torch.Tensor:
    """Move ``s x s`` spatial blocks into channels.

    Output channel ``c*s*s + dy*s + dx`` at ``(i, j)`` holds input channel ``c``
    at ``(s*i + dy, s*j + dx)``.
    """
    if s < 1:
        raise ValueError(f"shuffle factor must be positive, got {s}")
    n, c, h, w = x.shape
    if h % s:
        raise ValueError(f"height {h} is not divisible by shuffle factor {s}")
    if w % s:
        raise ValueError(f"width {w} is not divisible by shuffle factor {s}")
    x = x.reshape(n, c, h // s, s, w // s, s)
    x = x.permute(0, 1, 3, 5, 2, 4)
    return x.reshape(n, c * s * s, h // s, w // s)


def pixel_shuffle(x: torch.Tensor, s: int) -> torch.Tensor:
    """Exact inverse of :func:`pixel_unshuffle`."""
    if s < 1:
        raise ValueError(f"shuffle factor must be positive, got {s}")
    n, c, h, w = x.shape
    if c % (s * s):
        raise ValueError(f"channel count {c} is not divisible by {s * s} (shuffle factor {s})")
    x = x.reshape(n, c // (s * s), s, s, h, w)
    x = x.permute(0, 1, 4, 2, 5, 3)
    return x.reshape(n, c // (s * s), h * s, w * s)


def gelu(x: torch.Tensor) -> torch.Tensor:
    return F.gelu(x, approximate="none")


def layer_norm(x: torch.Tensor, weight: torch.Tensor, bias: torch.Tensor, eps: float = LN_EPS) -> torch.Tensor:
    """Normalize over the channel axis at every spatial position."""
    mu = x.mean(dim=1, keepdim=True)
    var = (x - mu).pow(2).mean(dim=1, keepdim=True)
    y = (x - mu) / torch.sqrt(var + eps)
    return y * weight.view(1, -1, 1, 1) + bias.view(1, -1, 1, 1)


class Conv2d(nn.Conv2d):
    """Convolution in one of four kinds: ``pointwise``, ``depthwise``,
    ``dense`` or ``strided`` (kernel == stride, no padding).

    ``zero_init`` marks layers that :func:`init_parameters` sets to zero
    instead of the fan-in uniform default.
    """

    KINDS = ("pointwise", "depthwise", "dense", "strided")

    def __init__(self, kind: str, in_channels: int, out_channels: int, kernel_size: int = 1,
                 bias: bool = True, zero_init: bool = False, groups: int | None = None):
        if kind not in self.KINDS:
            raise ValueError(f"unknown conv kind {kind!r}")
        if kind == "pointwise":
            kernel_size = 1
        if kind == "depthwise" and in_channels != out_channels:
            raise ValueError(f"depthwise conv needs in == out channels, got {in_channels} -> {out_channels}")
        stride = kernel_size if kind == "strided" else 1
        if groups is None:
            groups = in_channels if kind == "depthwise" else 1
        super().__init__(in_channels, out_channels, kernel_size, stride=stride, padding=0,
                         groups=groups, bias=bias)
        self.kind = kind
        self.zero_init = zero_init

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[1] != self.in_channels:
            raise ValueError(f"{self.kind} conv expects {self.in_channels} channels, got {x.shape[1]}")
        k = self.kernel_size[0]
        if self.kind == "strided":
            h, w = x.shape[-2:]
            if h % k or w % k:
                raise ValueError(f"strided conv (k={k}) needs spatial dims divisible by {k}, got {h}x{w}")
        elif k > 1:
            p = k // 2
            x = pad2d(x, p, p, p, p)
        return F.conv2d(x, self.weight, self.bias, self.stride, 0, 1, self.groups)

    def extra_repr(self) -> str:
        return f"{self.kind}, {super().extra_repr()}"


class LayerNorm2d(nn.Module):
    def __init__(self, channels: int, eps: float = LN_EPS):
        super().__init__()
        self.weight = nn.Parameter(torch.ones(channels))
        self.bias = nn.Parameter(torch.zeros(channels))
        self.eps = eps

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return layer_norm(x, self.weight, self.bias, self.eps)


class GRN(nn.Module):
    """Global response normalization: per-channel spatial L2 energy divided by
    its channel mean, applied as a residual affine gate."""

    def __init__(self, channels: int):
        super().__init__()
        self.gamma = nn.Parameter(torch.zeros(channels))
        self.beta = nn.Parameter(torch.zeros(channels))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        gx = torch.sqrt(x.pow(2).sum(dim=(2, 3), keepdim=True))
        nx = gx / (gx.mean(dim=1, keepdim=True) + GRN_EPS)
        return self.gamma.view(1, -1, 1, 1) * (x * nx) + self.beta.view(1, -1, 1, 1) + x


class ConvNeXtV2Block(nn.Module):
    def __init__(self, channels: int, expansion: int = 4, kernel_size: int = 7):
        super().__init__()
        hidden = expansion * channels
        self.dwconv = Conv2d("depthwise", channels, channels, kernel_size)
        self.norm = LayerNorm2d(channels)
        self.pwconv1 = Conv2d("pointwise", channels, hidden)
        self.grn = GRN(hidden)
        self.pwconv2 = Conv2d("pointwise", hidden, channels)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        y = self.norm(self.dwconv(x))
        y = self.grn(gelu(self.pwconv1(y)))
        return x + self.pwconv2(y)


def init_parameters(module: nn.Module, seed: int) -> None:
    """Deterministic init: fan-in scaled uniform conv weights (bound
    sqrt(3 / fan_in)), zero biases,
    identity norms, zero GRN, unit attention temperatures.

    Iterates in registration order so identical configs give identical
    parameters.
    """
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for m in module.modules():
            if isinstance(m, nn.Conv2d):
                if getattr(m, "zero_init", False):
                    m.weight.zero_()
                else:
                    fan_in = m.weight.shape[1] * m.weight.shape[2] * m.weight.shape[3]
                    bound = math.sqrt(INIT_GAIN / fan_in)
                    u = torch.rand(m.weight.shape, generator=gen, dtype=torch.float64)
                    m.weight.copy_((2.0 * u - 1.0) * bound)
                if m.bias is not None:
                    m.bias.zero_()
            elif isinstance(m, LayerNorm2d):
                m.weight.fill_(1.0)
                m.bias.zero_()
            elif isinstance(m, GRN):
                m.gamma.zero_()
                m.beta.zero_()
        for name, p in module.named_parameters():
            if name.endswith("temperature"):
                p.data.fill_(1.0)
