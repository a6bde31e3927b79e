"""Discrimination-prompted transformer blocks operating at low resolution.

Attention is channel-transposed: tokens are channels, so every map is
``(C/heads) x (C/heads)`` and cost grows linearly with pixel count.
"""

from __future__ import annotations

import contextlib

import torch
import torch.nn as nn
import torch.nn.functional as F
from einops import rearrange

from .ndp import MultiscaleMixer, compute_ndp
from .primitives import Conv2d, LayerNorm2d, gelu

_check_softmax = False
SOFTMAX_ROW_TOL = 1e-5


@contextlib.contextmanager
def softmax_checks():
    """Assert inside every attention call that each softmax row sums to 1."""
    global _check_softmax
    prev, _check_softmax = _check_softmax, True
    try:
        yield
    finally:
        _check_softmax = prev


def transposed_attention(q: torch.Tensor, k: torch.Tensor, v: torch.Tensor,
                         temperature: torch.Tensor) -> torch.Tensor:
    """``softmax(norm(q) @ norm(k)^T / temperature) @ v`` over ``(..., d, HW)`` stacks.

    Rows of q and k are L2-normalized along the token axis first.
    ``temperature`` broadcasts against the ``(..., d, d)`` attention map.
    """
    if q.shape[-2] != k.shape[-2] or k.shape[-2] != v.shape[-2]:
        raise ValueError(f"head dims differ: q {tuple(q.shape)}, k {tuple(k.shape)}, v {tuple(v.shape)}")
    q = F.normalize(q, dim=-1)
    k = F.normalize(k, dim=-1)
    attn = torch.softmax((q @ k.transpose(-2, -1)) / temperature, dim=-1)
    if _check_softmax:
        err = (attn.sum(dim=-1) - 1.0).abs().max().item()
        assert err <= SOFTMAX_ROW_TOL, f"softmax row sum off by {err}"
    return attn @ v


class NDPA(nn.Module):
    """Two chained attentions: the query first attends to the prior's keys and
    values, and that result queries the feature's own keys and values.

    With ``use_ndp=False`` this is a single plain transposed attention.
    """

    def __init__(self, channels: int, heads: int, use_ndp: bool = True):
        super().__init__()
        if channels % heads:
            raise ValueError(f"channels {channels} not divisible by heads {heads}")
        self.heads = heads
        self.use_ndp = use_ndp
        self.temperature = nn.Parameter(torch.ones(heads, 1, 1))
        self.qkv = Conv2d("pointwise", channels, 3 * channels)
        self.qkv_dw = Conv2d("depthwise", 3 * channels, 3 * channels, 3)
        if use_ndp:
            self.kv_ndp = Conv2d("pointwise", channels, 2 * channels)
            self.kv_ndp_dw = Conv2d("depthwise", 2 * channels, 2 * channels, 3)
        self.project_out = Conv2d("pointwise", channels, channels, zero_init=True)

    def _heads(self, t: torch.Tensor) -> torch.Tensor:
        return rearrange(t, "b (nh d) h w -> b nh d (h w)", nh=self.heads)

    def forward(self, x: torch.Tensor, y_ndp: torch.Tensor | None = None) -> torch.Tensor:
        _, _, h, w = x.shape
        q, k, v = map(self._heads, self.qkv_dw(self.qkv(x)).chunk(3, dim=1))
        if self.use_ndp:
            if y_ndp is None or y_ndp.shape != x.shape:
                got = None if y_ndp is None else tuple(y_ndp.shape)
                raise ValueError(f"prior shape {got} does not match features {tuple(x.shape)}")
            k_ndp, v_ndp = map(self._heads, self.kv_ndp_dw(self.kv_ndp(y_ndp)).chunk(2, dim=1))
            q = transposed_attention(q, k_ndp, v_ndp, self.temperature)
        out = transposed_attention(q, k, v, self.temperature)
        out = rearrange(out, "b nh d (h w) -> b (nh d) h w", h=h, w=w)
        return self.project_out(out)


class NDPN(nn.Module):
    """Feed-forward network with two consecutive gates; the first gate's
    signal is fused with the prior.

    ``use_ndp=False`` drops the prior from the fusion conv (hidden -> hidden).
    """

    def __init__(self, channels: int, expansion: float = 2.0, use_ndp: bool = True):
        super().__init__()
        hidden = int(round(expansion * channels))
        if hidden < 1:
            raise ValueError(f"expansion {expansion} gives empty hidden width for {channels} channels")
        self.hidden = hidden
        self.use_ndp = use_ndp
        self.project_in = Conv2d("pointwise", channels, 2 * hidden)
        self.project_in_dw = Conv2d("depthwise", 2 * hidden, 2 * hidden, 3)
        self.fusion = Conv2d("pointwise", hidden + (channels if use_ndp else 0), hidden)
        self.gate_dw = Conv2d("depthwise", hidden, hidden, 3)
        self.fusion_proj = Conv2d("pointwise", hidden, hidden)
        self.project_out = Conv2d("pointwise", hidden, channels, zero_init=True)

    def forward(self, x: torch.Tensor, y_ndp: torch.Tensor | None = None) -> torch.Tensor:
        z1, z2 = self.project_in_dw(self.project_in(x)).chunk(2, dim=1)
        if self.use_ndp:
            if y_ndp is None or y_ndp.shape != x.shape:
                got = None if y_ndp is None else tuple(y_ndp.shape)
                raise ValueError(f"prior shape {got} does not match features {tuple(x.shape)}")
            fused = self.fusion(torch.cat([z1, y_ndp], dim=1))
        else:
            fused = self.fusion(z1)
        gate1 = fused * gelu(z2)
        return self.project_out(self.gate_dw(gate1) * self.fusion_proj(fused))


class NDPTBlock(nn.Module):
    """Pre-norm block: ``x' = NDPA(LN(x), p) + x``; ``out = NDPN(LN(x'), p) + x'``.

    The prior ``p`` is rebuilt from this block's own input. Ablation flags:
    ``ndp_source="direct_feature"`` feeds the raw mixer output instead of the
    prior; ``ndp_mode="before_block"`` adds the prior to the input and runs
    plain sub-layers.
    """

    def __init__(self, channels: int, heads: int, expansion: float = 2.0,
                 ndp_in_attn: bool = True, ndp_in_ffn: bool = True,
                 ndp_source: str = "prior", ndp_mode: str = "inside"):
        super().__init__()
        if ndp_source not in ("prior", "direct_feature"):
            raise ValueError(f"unknown ndp_source {ndp_source!r}")
        if ndp_mode not in ("inside", "before_block"):
            raise ValueError(f"unknown ndp_mode {ndp_mode!r}")
        if ndp_mode == "before_block":
            ndp_in_attn = ndp_in_ffn = False
        self.ndp_source = ndp_source
        self.ndp_mode = ndp_mode
        self.norm1 = LayerNorm2d(channels)
        self.attn = NDPA(channels, heads, use_ndp=ndp_in_attn)
        self.norm2 = LayerNorm2d(channels)
        self.ffn = NDPN(channels, expansion, use_ndp=ndp_in_ffn)

    @property
    def uses_prior(self) -> bool:
        return self.attn.use_ndp or self.ffn.use_ndp or self.ndp_mode == "before_block"

    def prior(self, x: torch.Tensor, mixed: torch.Tensor) -> torch.Tensor:
        if mixed.shape != x.shape:
            raise ValueError(f"mixed HR features {tuple(mixed.shape)} do not match block input {tuple(x.shape)}")
        if self.ndp_source == "direct_feature":
            return mixed
        return compute_ndp(mixed, x)

    def forward(self, x: torch.Tensor, mixed: torch.Tensor | None = None,
                record: list | None = None) -> torch.Tensor:
        y = None
        if self.uses_prior:
            if mixed is None:
                raise ValueError("block needs mixed HR features to build its prior")
            y = self.prior(x, mixed)
            if record is not None:
                record.append(y.detach())
        if self.ndp_mode == "before_block":
            x = x + y
            y = None
        x = self.attn(self.norm1(x), y) + x
        return self.ffn(self.norm2(x), y) + x


class NDPTStack(nn.Module):
    """L blocks in sequence. Each block gets its own strided mixer unless
    ``shared_mixer`` is set, in which case the single mixer output is reused."""

    def __init__(self, channels: int, blocks: int, heads: int, s: int, expansion: float = 2.0,
                 shared_mixer: bool = False, factorized_mixer: bool = False, **flags):
        super().__init__()
        self.shared_mixer = shared_mixer
        self.blocks = nn.ModuleList(NDPTBlock(channels, heads, expansion, **flags) for _ in range(blocks))
        n_mixers = 1 if shared_mixer else blocks
        self.mixers = nn.ModuleList(MultiscaleMixer(channels, s, factorized_mixer) for _ in range(n_mixers))

    def forward(self, x: torch.Tensor, hr_feats, record: list | None = None) -> torch.Tensor:
        shared = None
        for i, block in enumerate(self.blocks):
            mixed = None
            if block.uses_prior:
                if self.shared_mixer:
                    if shared is None:
                        shared = self.mixers[0](*hr_feats)
                    mixed = shared
                else:
                    mixed = self.mixers[i](*hr_feats)
            x = block(x, mixed, record)
        return x
