"""Parameter counts, analytic FLOP ledgers and wall-clock profiling.

FLOPs follow the 2 x MAC convention: a conv costs
``2 * k^2 * C_in * C_out * H_out * W_out / groups``; each attention matmul
``2 * d * d * HW`` per head; every elementwise op (add, multiply, GELU, exp,
normalization, softmax...) costs one per output element. Pixel (un)shuffle,
split and concatenation are free rearrangements.
"""

from __future__ import annotations

import gc
import os
import platform
import statistics
import time
from dataclasses import dataclass, field

import torch
import torch.nn as nn

from .model import ModelConfig, UHDPromer
from .primitives import Conv2d, ConvNeXtV2Block
from .transformer import NDPTBlock


@dataclass
class LedgerRow:
    name: str
    op: str
    flops: int
    detail: str = ""


@dataclass
class FlopLedger:
    height: int
    width: int
    rows: list = field(default_factory=list)

    @property
    def total(self) -> int:
        return sum(r.flops for r in self.rows)

    def total_for(self, op: str) -> int:
        return sum(r.flops for r in self.rows if r.op == op)

    def by_stage(self) -> dict:
        out: dict[str, int] = {}
        for r in self.rows:
            stage = r.name.split(".", 1)[0]
            out[stage] = out.get(stage, 0) + r.flops
        return out

    def format(self) -> str:
        w = max([len(r.name) for r in self.rows] + [5])
        lines = [f"FLOP ledger at {self.height}x{self.width} (2 x MAC)",
                 f"{'layer':<{w}}  {'op':<12} {'flops':>16}  detail"]
        lines += [f"{r.name:<{w}}  {r.op:<12} {r.flops:>16,d}  {r.detail}" for r in self.rows]
        lines.append(f"{'TOTAL':<{w}}  {'':<12} {self.total:>16,d}")
        return "\n".join(lines)


def count_params(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


def param_breakdown(model: nn.Module, depth: int = 1) -> list[tuple[str, int]]:
    """Parameter totals grouped by the first ``depth`` components of each dotted name."""
    groups: dict[str, int] = {}
    for name, p in model.named_parameters():
        key = ".".join(name.split(".")[:depth])
        groups[key] = groups.get(key, 0) + p.numel()
    return list(groups.items())


def format_param_table(model: nn.Module, depth: int = 1) -> str:
    rows = param_breakdown(model, depth)
    w = max([len(k) for k, _ in rows] + [6])
    lines = [f"{'module':<{w}}  {'params':>12}"]
    lines += [f"{k:<{w}}  {n:>12,d}" for k, n in rows]
    lines.append(f"{'TOTAL':<{w}}  {count_params(model):>12,d}")
    return "\n".join(lines)


class _Walker:
    def __init__(self):
        self.rows: list[LedgerRow] = []

    def conv(self, name: str, m: Conv2d, h: int, w: int):
        k = m.kernel_size[0]
        ho, wo = (h // k, w // k) if m.kind == "strided" else (h, w)
        f = 2 * k * k * m.in_channels * m.out_channels * ho * wo // m.groups
        self.rows.append(LedgerRow(name, "conv", f, f"{m.kind} {k}x{k} {m.in_channels}->{m.out_channels} @ {ho}x{wo}"))
        return ho, wo

    def elem(self, name: str, op: str, n: int, detail: str = ""):
        self.rows.append(LedgerRow(name, op, n, detail))

    def matmul(self, name: str, f: int, detail: str):
        self.rows.append(LedgerRow(name, "matmul", f, detail))

    def convnext(self, name: str, blk: ConvNeXtV2Block, c: int, h: int, w: int):
        hw = h * w
        hidden = blk.pwconv1.out_channels
        self.conv(f"{name}.dwconv", blk.dwconv, h, w)
        self.elem(f"{name}.norm", "layernorm", c * hw)
        self.conv(f"{name}.pwconv1", blk.pwconv1, h, w)
        self.elem(f"{name}.gelu", "gelu", hidden * hw)
        self.elem(f"{name}.grn", "grn", hidden * hw)
        self.conv(f"{name}.pwconv2", blk.pwconv2, h, w)
        self.elem(f"{name}.residual", "add", c * hw)

    def attention(self, name: str, heads: int, d: int, hw: int):
        self.elem(f"{name}.normalize", "normalize", 2 * heads * d * hw)
        self.matmul(f"{name}.qk", 2 * heads * d * d * hw, f"{heads} heads, {d}x{hw} @ {hw}x{d}")
        self.elem(f"{name}.softmax", "softmax", 2 * heads * d * d, "scale + softmax")
        self.matmul(f"{name}.av", 2 * heads * d * d * hw, f"{heads} heads, {d}x{d} @ {d}x{hw}")

    def block(self, name: str, blk: NDPTBlock, c: int, heads: int, h: int, w: int):
        hw = h * w
        d = c // heads
        if blk.uses_prior and blk.ndp_source == "prior":
            self.elem(f"{name}.ndp", "ndp", 3 * c * hw, "diff, abs, exp")
        if blk.ndp_mode == "before_block":
            self.elem(f"{name}.ndp_inject", "add", c * hw)
        self.elem(f"{name}.norm1", "layernorm", c * hw)
        a = blk.attn
        self.conv(f"{name}.attn.qkv", a.qkv, h, w)
        self.conv(f"{name}.attn.qkv_dw", a.qkv_dw, h, w)
        if a.use_ndp:
            self.conv(f"{name}.attn.kv_ndp", a.kv_ndp, h, w)
            self.conv(f"{name}.attn.kv_ndp_dw", a.kv_ndp_dw, h, w)
            self.attention(f"{name}.attn.cross", heads, d, hw)
        self.attention(f"{name}.attn.self", heads, d, hw)
        self.conv(f"{name}.attn.project_out", a.project_out, h, w)
        self.elem(f"{name}.residual1", "add", c * hw)
        self.elem(f"{name}.norm2", "layernorm", c * hw)
        f = blk.ffn
        hid = f.hidden
        self.conv(f"{name}.ffn.project_in", f.project_in, h, w)
        self.conv(f"{name}.ffn.project_in_dw", f.project_in_dw, h, w)
        self.conv(f"{name}.ffn.fusion", f.fusion, h, w)
        self.elem(f"{name}.ffn.gelu", "gelu", hid * hw)
        self.elem(f"{name}.ffn.gate1", "mul", hid * hw)
        self.conv(f"{name}.ffn.gate_dw", f.gate_dw, h, w)
        self.conv(f"{name}.ffn.fusion_proj", f.fusion_proj, h, w)
        self.elem(f"{name}.ffn.gate2", "mul", hid * hw)
        self.conv(f"{name}.ffn.project_out", f.project_out, h, w)
        self.elem(f"{name}.residual2", "add", c * hw)


def flop_ledger(config: ModelConfig, height: int, width: int, model: UHDPromer | None = None) -> FlopLedger:
    """Per-layer FLOP ledger for one forward pass at ``height x width``."""
    s = config.shuffle
    if height % s or width % s:
        raise ValueError(f"{height}x{width} is not divisible by shuffle factor {s}; counting assumes no padding")
    model = model or UHDPromer(config)
    c, heads = config.channels, config.heads
    h, w = height, width
    lh, lw = h // s, w // s
    wk = _Walker()

    wk.conv("embed", model.embed, h, w)
    for i, blk in enumerate((model.hrfr.block1, model.hrfr.block2, model.hrfr.block3), 1):
        wk.convnext(f"hrfr.block{i}", blk, c, h, w)
    wk.conv("down.proj", model.down.proj, lh, lw)

    stack = model.ndpt
    for i, blk in enumerate(stack.blocks):
        if blk.uses_prior and (not stack.shared_mixer or i == 0):
            mixer = stack.mixers[0 if stack.shared_mixer else i]
            for j, conv in enumerate(m for m in mixer.modules() if isinstance(m, Conv2d)):
                if conv.kind == "strided":
                    wk.conv(f"ndpt.mixers.{i}.{j}", conv, h, w)
                else:
                    wk.conv(f"ndpt.mixers.{i}.{j}", conv, lh, lw)
        wk.block(f"ndpt.blocks.{i}", blk, c, heads, lh, lw)

    wk.conv("feasr.expand", model.feasr.expand, lh, lw)
    if model.feasr.to_rgb is not None:
        wk.conv("feasr.to_rgb", model.feasr.to_rgb, h, w)

    wk.conv("recon.fuse", model.recon.fuse, h, w)
    for i, blk in enumerate(model.recon.body):
        wk.convnext(f"recon.body.{i}", blk, c, h, w)
    wk.conv("recon.proj", model.recon.proj, h, w)
    wk.conv("recon.to_residual", model.recon.to_residual, h, w)
    wk.elem("recon.image_skip", "add", 3 * h * w)
    return FlopLedger(height, width, wk.rows)


def count_flops(config: ModelConfig, height: int, width: int) -> int:
    return flop_ledger(config, height, width).total


@dataclass
class RuntimeProfile:
    height: int
    width: int
    mean_s: float
    std_s: float
    reps: int
    hardware: str
    times: list = field(default_factory=list)


class ProfileOOMError(RuntimeError):
    pass


def hardware_string() -> str:
    cpu = platform.processor() or platform.machine()
    return f"{cpu}, {os.cpu_count()} cpu, torch {torch.__version__} ({torch.get_num_threads()} threads)"


@torch.no_grad()
def profile_runtime(model: UHDPromer, height: int, width: int, reps: int = 10, warmup: int = 3) -> RuntimeProfile:
    """Mean and standard deviation of warm forward passes on a random image."""
    if reps < 1:
        raise ValueError("reps must be >= 1")
    model.eval()
    try:
        x = torch.rand(1, 3, height, width, generator=torch.Generator().manual_seed(0))
        for _ in range(warmup):
            model(x)
        times = []
        for _ in range(reps):
            t0 = time.perf_counter()
            model(x)
            times.append(time.perf_counter() - t0)
    except (MemoryError, RuntimeError) as exc:
        if isinstance(exc, MemoryError) or "memory" in str(exc).lower():
            gc.collect()
            raise ProfileOOMError(f"out of memory profiling {height}x{width}: {exc}") from exc
        raise
    std = statistics.stdev(times) if len(times) > 1 else 0.0
    return RuntimeProfile(height, width, statistics.fmean(times), std, reps, hardware_string(), times)
