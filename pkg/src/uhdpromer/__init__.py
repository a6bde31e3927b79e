"""UHD image restoration with a neural discrimination prior."""

from .losses import LossConfig, phi_loss, total_loss
from .metrics import psnr, ssim
from .model import VARIANTS, ModelConfig, UHDPromer, build_model, make_variant
from .train import TrainConfig, fit

__all__ = [
    "VARIANTS", "LossConfig", "ModelConfig", "TrainConfig", "UHDPromer",
    "build_model", "fit", "make_variant", "phi_loss", "psnr", "ssim", "total_loss",
]
__version__ = "0.1.0"
