"""Full restoration network: embedding, high-resolution feature stage, shuffled-down
transformer stack, feature super-resolution head and SR-guided reconstruction."""

from __future__ import annotations

import dataclasses
import hashlib
from dataclasses import dataclass

import torch
import torch.nn as nn

from .primitives import Conv2d, ConvNeXtV2Block, init_parameters, pad2d, pixel_shuffle, pixel_unshuffle
from .transformer import NDPTStack

VARIANTS = ("full", "a", "b", "c", "d", "e", "cascaded", "no_sr_branch")

# Block-level flags for each variant; cascaded/no_sr_branch keep the full NDPT.
_VARIANT_FLAGS = {
    "full": {},
    "a": dict(ndp_in_attn=False, ndp_in_ffn=False),
    "b": dict(ndp_in_attn=False),
    "c": dict(ndp_in_ffn=False),
    "d": dict(ndp_source="direct_feature"),
    "e": dict(ndp_mode="before_block"),
    "cascaded": {},
    "no_sr_branch": {},
}


@dataclass
class ModelConfig:
    channels: int = 16
    blocks: int = 15
    heads: int = 8
    shuffle: int = 8
    expansion: float = 2.0
    shared_mixer: bool = False
    factorized_mixer: bool = False
    variant: str = "full"
    seed: int = 0

    def __post_init__(self):
        problems = []
        if self.channels < 1:
            problems.append(f"channels must be >= 1 (got {self.channels})")
        if self.blocks < 1:
            problems.append(f"blocks must be >= 1 (got {self.blocks})")
        if self.heads < 1 or (self.channels >= 1 and self.channels % self.heads):
            problems.append(f"heads must divide channels (got heads={self.heads}, channels={self.channels})")
        if self.shuffle < 1:
            problems.append(f"shuffle must be >= 1 (got {self.shuffle})")
        if round(self.expansion * self.channels) < 1:
            problems.append(f"expansion * channels must round to >= 1 (got {self.expansion})")
        if self.variant not in VARIANTS:
            problems.append(f"variant must be one of {', '.join(VARIANTS)} (got {self.variant!r})")
        if problems:
            raise ValueError("invalid ModelConfig: " + "; ".join(problems))

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown ModelConfig fields: {sorted(unknown)}")
        return cls(**d)

    def diff(self, other: "ModelConfig") -> dict:
        a, b = self.to_dict(), other.to_dict()
        return {k: (a[k], b[k]) for k in a if a[k] != b[k]}


class HRFR(nn.Module):
    """Three chained ConvNeXt-v2 blocks; every intermediate is kept."""

    def __init__(self, channels: int):
        super().__init__()
        self.block1 = ConvNeXtV2Block(channels)
        self.block2 = ConvNeXtV2Block(channels)
        self.block3 = ConvNeXtV2Block(channels)

    def forward(self, x0):
        x1 = self.block1(x0)
        x2 = self.block2(x1)
        x3 = self.block3(x2)
        return x1, x2, x3


class ShuffleDown(nn.Module):
    """Pixel-unshuffle by s, then a pointwise projection back to C channels."""

    def __init__(self, channels: int, s: int):
        super().__init__()
        self.s = s
        self.proj = Conv2d("pointwise", channels * s * s, channels)

    def forward(self, x0):
        return self.proj(pixel_unshuffle(x0, self.s))


class FeaSR(nn.Module):
    """Pointwise C -> C*s^2, pixel-shuffle to full resolution, and (unless
    ``with_image`` is off) a 3x3 conv to an RGB super-resolved image."""

    def __init__(self, channels: int, s: int, with_image: bool = True):
        super().__init__()
        self.s = s
        self.expand = Conv2d("pointwise", channels, channels * s * s)
        self.to_rgb = Conv2d("dense", channels, 3, 3) if with_image else None

    def forward(self, x_low):
        feats = pixel_shuffle(self.expand(x_low), self.s)
        image = self.to_rgb(feats) if self.to_rgb is not None else None
        return feats, image


class SRGRecon(nn.Module):
    """fuse 1x1 (2C -> C) -> ConvNeXt-v2 blocks -> 1x1 (C -> C) -> 3x3 (C -> 3).

    The last conv starts at zero, so an untrained network returns its input.
    """

    def __init__(self, channels: int, n_blocks: int = 3):
        super().__init__()
        self.fuse = Conv2d("pointwise", 2 * channels, channels)
        self.body = nn.Sequential(*(ConvNeXtV2Block(channels) for _ in range(n_blocks)))
        self.proj = Conv2d("pointwise", channels, channels)
        self.to_residual = Conv2d("dense", channels, 3, 3, zero_init=True)

    def forward(self, x3, sr_feats, image):
        if x3.shape != sr_feats.shape:
            raise ValueError(f"HR features {tuple(x3.shape)} and SR features {tuple(sr_feats.shape)} differ")
        y = self.fuse(torch.cat([x3, sr_feats], dim=1))
        y = self.proj(self.body(y))
        return image + self.to_residual(y)


class UHDPromer(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        c, s = config.channels, config.shuffle
        cascaded = config.variant == "cascaded"
        self.embed = Conv2d("dense", 3, c, 3)
        self.hrfr = HRFR(c)
        self.down = ShuffleDown(c, s)
        self.ndpt = NDPTStack(c, config.blocks, config.heads, s, config.expansion,
                              shared_mixer=config.shared_mixer,
                              factorized_mixer=config.factorized_mixer,
                              **_VARIANT_FLAGS[config.variant])
        # cascaded: no SR image; 5 reconstruction blocks (3 main + 2 in place of the SR branch)
        self.feasr = FeaSR(c, s, with_image=not cascaded)
        self.recon = SRGRecon(c, n_blocks=5 if cascaded else 3)

    @property
    def has_sr_branch(self) -> bool:
        return self.feasr.to_rgb is not None

    def forward(self, image: torch.Tensor, record: list | None = None):
        """Return ``(restored, sr_image)``; ``sr_image`` is None for the cascaded variant.

        Inputs whose sides are not multiples of the shuffle factor are
        reflect-padded on the bottom/right and both outputs are cropped back.
        """
        if image.dim() != 4 or image.shape[1] != 3:
            raise ValueError(f"expected (N, 3, H, W) image, got {tuple(image.shape)}")
        s = self.config.shuffle
        h, w = image.shape[-2:]
        ph, pw = (-h) % s, (-w) % s
        x = pad2d(image, 0, pw, 0, ph)

        x0 = self.embed(x)
        x1, x2, x3 = self.hrfr(x0)
        low = self.ndpt(self.down(x0), (x1, x2, x3), record)
        sr_feats, sr_image = self.feasr(low)
        restored = self.recon(x3, sr_feats, x)

        if ph or pw:
            restored = restored[..., :h, :w]
            if sr_image is not None:
                sr_image = sr_image[..., :h, :w]
        return restored, sr_image


def build_model(config: ModelConfig | None = None, **overrides) -> UHDPromer:
    """Construct and deterministically initialize a model from ``config.seed``."""
    config = config or ModelConfig()
    if overrides:
        config = dataclasses.replace(config, **overrides)
    model = UHDPromer(config)
    init_parameters(model, config.seed)
    return model


def make_variant(config: ModelConfig, variant: str) -> UHDPromer:
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}; expected one of {', '.join(VARIANTS)}")
    return build_model(dataclasses.replace(config, variant=variant))


def param_checksum(model: nn.Module) -> str:
    h = hashlib.sha256()
    for name, p in model.state_dict().items():
        h.update(name.encode())
        h.update(p.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()
