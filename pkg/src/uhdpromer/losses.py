from __future__ import annotations

from dataclasses import dataclass

import torch


@dataclass
class LossConfig:
    alpha_sr: float = 0.5
    lambda_freq: float = 0.1

    def __post_init__(self):
        if self.alpha_sr < 0 or self.lambda_freq < 0:
            raise ValueError(f"loss weights must be >= 0 (alpha_sr={self.alpha_sr}, lambda_freq={self.lambda_freq})")


def _check_shapes(*tensors):
    shapes = {tuple(t.shape) for t in tensors}
    if len(shapes) != 1:
        raise ValueError(f"loss inputs disagree in shape: {sorted(shapes)}")


def phi_loss(pred: torch.Tensor, target: torch.Tensor, lambda_freq: float = 0.1) -> torch.Tensor:
    """L1 in pixel space plus ``lambda_freq`` times the mean complex magnitude
    of the difference of unnormalized 2-D DFTs."""
    _check_shapes(pred, target)
    spatial = (pred - target).abs().mean()
    if lambda_freq == 0:
        return spatial
    diff = torch.fft.fft2(pred, norm="backward") - torch.fft.fft2(target, norm="backward")
    return spatial + lambda_freq * diff.abs().mean()


def loss_terms(restored, sr_image, target, cfg: LossConfig, variant: str = "full"):
    """Return ``(total, main, sr)``. The SR term is dropped (weight 0) for the
    ``no_sr_branch`` variant or when there is no SR image."""
    main = phi_loss(restored, target, cfg.lambda_freq)
    alpha = 0.0 if variant == "no_sr_branch" else cfg.alpha_sr
    if sr_image is None:
        return main, main, main.new_zeros(())
    _check_shapes(restored, sr_image, target)
    sr = phi_loss(sr_image, target, cfg.lambda_freq)
    if alpha == 0:
        return main, main, sr.detach()
    return main + alpha * sr, main, sr


def total_loss(restored, sr_image, target, cfg: LossConfig | None = None, variant: str = "full") -> torch.Tensor:
    return loss_terms(restored, sr_image, target, cfg or LossConfig(), variant)[0]
