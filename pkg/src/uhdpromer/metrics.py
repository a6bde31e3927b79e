"""Image-quality metrics on RGB in [0, peak] (no luma conversion)."""

from __future__ import annotations

import csv
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F


def _as_nchw64(x) -> torch.Tensor:
    t = torch.as_tensor(np.asarray(x) if not isinstance(x, torch.Tensor) else x).detach()
    t = t.to(torch.float64)
    while t.dim() < 4:
        t = t.unsqueeze(0)
    return t


def psnr(x, y, peak: float = 1.0) -> float:
    """10 log10(peak^2 / MSE) in dB; ``inf`` when the images are identical."""
    a, b = _as_nchw64(x), _as_nchw64(y)
    if a.shape != b.shape:
        raise ValueError(f"psnr inputs disagree in shape: {tuple(a.shape)} vs {tuple(b.shape)}")
    mse = float(((a - b) ** 2).mean())
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(peak * peak / mse)


def gaussian_window(size: int = 11, sigma: float = 1.5) -> torch.Tensor:
    r = torch.arange(size, dtype=torch.float64) - (size - 1) / 2.0
    g = torch.exp(-(r ** 2) / (2.0 * sigma ** 2))
    g = g / g.sum()
    return torch.outer(g, g)


def ssim(x, y, window: int = 11, sigma: float = 1.5, peak: float = 1.0) -> float:
    """Gaussian-windowed SSIM averaged over valid (unpadded) positions, channels
    and batch."""
    a, b = _as_nchw64(x), _as_nchw64(y)
    if a.shape != b.shape:
        raise ValueError(f"ssim inputs disagree in shape: {tuple(a.shape)} vs {tuple(b.shape)}")
    n, c, h, w = a.shape
    if h < window or w < window:
        raise ValueError(f"image {h}x{w} is smaller than the {window}x{window} SSIM window")
    c1, c2 = (0.01 * peak) ** 2, (0.03 * peak) ** 2
    k = gaussian_window(window, sigma).expand(c, 1, window, window)

    def filt(t):
        return F.conv2d(t, k, groups=c)

    mu_a, mu_b = filt(a), filt(b)
    var_a = filt(a * a) - mu_a ** 2
    var_b = filt(b * b) - mu_b ** 2
    cov = filt(a * b) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2)
    return float((num / den).mean())


def _fmt(v: float) -> str:
    return "inf" if math.isinf(v) else f"{v:.4f}"


@dataclass
class MetricsReport:
    rows: list = field(default_factory=list)
    param_count: int | None = None
    flops: int | None = None
    runtime_s: float | None = None

    def add(self, name: str, psnr_db: float, ssim_val: float):
        self.rows.append((name, psnr_db, ssim_val))

    @property
    def mean_psnr(self) -> float:
        return float(np.mean([r[1] for r in self.rows])) if self.rows else math.nan

    @property
    def mean_ssim(self) -> float:
        return float(np.mean([r[2] for r in self.rows])) if self.rows else math.nan

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(["image", "psnr", "ssim"])
            for name, p, s in self.rows:
                wr.writerow([name, _fmt(p), f"{s:.6f}"])

    def summary(self) -> str:
        lines = [f"images: {len(self.rows)}",
                 f"mean_psnr: {_fmt(self.mean_psnr)}",
                 f"mean_ssim: {self.mean_ssim:.6f}"]
        if self.param_count is not None:
            lines.append(f"param_count: {self.param_count}")
        if self.flops is not None:
            lines.append(f"flops: {self.flops}")
        if self.runtime_s is not None:
            lines.append(f"runtime_s: {self.runtime_s:.6f}")
        return "\n".join(lines)


def evaluate_dirs(pred_dir, gt_dir, workers: int = 0) -> MetricsReport:
    """Score every prediction against the same-named ground-truth file.

    Raises ``FileNotFoundError`` listing any names present on only one side.
    """
    from .data import IMAGE_SUFFIXES, load_image

    pred_dir, gt_dir = Path(pred_dir), Path(gt_dir)
    preds = {p.name: p for p in sorted(pred_dir.iterdir()) if p.suffix.lower() in IMAGE_SUFFIXES}
    gts = {p.name: p for p in sorted(gt_dir.iterdir()) if p.suffix.lower() in IMAGE_SUFFIXES}
    unmatched = sorted(set(preds) ^ set(gts))
    if unmatched:
        raise FileNotFoundError("unmatched files between prediction and ground-truth dirs: " + ", ".join(unmatched))

    def score(name):
        a, b = load_image(preds[name]), load_image(gts[name])
        return name, psnr(a, b), ssim(a, b)

    names = sorted(preds)
    if workers > 0:
        with ThreadPoolExecutor(workers) as ex:
            rows = list(ex.map(score, names))
    else:
        rows = [score(n) for n in names]
    report = MetricsReport()
    for row in rows:
        report.add(*row)
    return report
