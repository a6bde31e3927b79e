"""Paired image loading, patch sampling and deterministic batch order.

Every random draw is keyed on ``(seed, global sample index)``, so the batch
for step ``t`` is a pure function of ``t`` and a resumed run sees exactly the
data an uninterrupted run would.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from PIL import Image

IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg")


def load_image(path) -> np.ndarray:
    """Decode to float32 (3, H, W) in [0, 1]."""
    path = Path(path)
    try:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
    except (OSError, ValueError) as exc:
        raise OSError(f"could not read image {path}: {exc}") from exc
    return np.ascontiguousarray(arr.transpose(2, 0, 1))


def to_uint8(img) -> np.ndarray:
    """(3, H, W) float -> (H, W, 3) uint8 after clamping to [0, 1]."""
    if isinstance(img, torch.Tensor):
        img = img.detach().cpu().numpy()
    img = np.clip(np.asarray(img, dtype=np.float64), 0.0, 1.0)
    return np.round(img * 255.0).astype(np.uint8).transpose(1, 2, 0)


def save_image(img, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(to_uint8(img), mode="RGB").save(path)


@dataclass
class ImagePairRecord:
    degraded_path: Path | None
    gt_path: Path | None
    _degraded: np.ndarray | None = None
    _gt: np.ndarray | None = None

    @classmethod
    def from_arrays(cls, degraded: np.ndarray, gt: np.ndarray) -> "ImagePairRecord":
        rec = cls(None, None, np.asarray(degraded, np.float32), np.asarray(gt, np.float32))
        rec._validate(rec._degraded, rec._gt)
        return rec

    def _validate(self, d, g):
        if d.ndim != 3 or d.shape[0] != 3 or g.shape != d.shape:
            raise ValueError(f"pair {self.degraded_path} / {self.gt_path}: shapes {d.shape} vs {g.shape}; "
                             "expected matching (3, H, W)")

    def arrays(self):
        if self._degraded is not None:
            return self._degraded, self._gt
        d, g = load_image(self.degraded_path), load_image(self.gt_path)
        self._validate(d, g)
        return d, g


def find_pairs(root) -> list[ImagePairRecord]:
    """Pair ``root/input/<name>`` with ``root/gt/<name>``."""
    root = Path(root)
    inp, gt = root / "input", root / "gt"
    for d in (inp, gt):
        if not d.is_dir():
            raise FileNotFoundError(f"dataset directory {d} does not exist (expected {root}/input and {root}/gt)")
    pairs, missing = [], []
    for p in sorted(inp.iterdir()):
        if p.suffix.lower() not in IMAGE_SUFFIXES:
            continue
        q = gt / p.name
        if q.exists():
            pairs.append(ImagePairRecord(p, q))
        else:
            missing.append(p.name)
    if missing:
        raise FileNotFoundError(f"no ground truth in {gt} for: {', '.join(missing)}")
    if not pairs:
        raise FileNotFoundError(f"no .png/.jpg images found in {inp}")
    return pairs


def _pad_to(a: np.ndarray, size: int) -> np.ndarray:
    _, h, w = a.shape
    ph, pw = max(0, size - h), max(0, size - w)
    if not (ph or pw):
        return a
    mode = "reflect" if ph < h and pw < w else "symmetric"
    return np.pad(a, ((0, 0), (0, ph), (0, pw)), mode=mode)


def sample_patch(record: ImagePairRecord, size: int, rng: np.random.Generator, flips: bool = True):
    """Crop the same ``size x size`` window from both images, then apply the
    same random horizontal/vertical flips. Images smaller than ``size`` are
    reflect-padded first; an exact fit draws no crop offsets."""
    d, g = record.arrays()
    d, g = _pad_to(d, size), _pad_to(g, size)
    _, h, w = d.shape
    top = 0 if h == size else int(rng.integers(0, h - size + 1))
    left = 0 if w == size else int(rng.integers(0, w - size + 1))
    d = d[:, top:top + size, left:left + size]
    g = g[:, top:top + size, left:left + size]
    if flips:
        if rng.random() < 0.5:
            d, g = d[:, :, ::-1], g[:, :, ::-1]
        if rng.random() < 0.5:
            d, g = d[:, ::-1, :], g[:, ::-1, :]
    return np.ascontiguousarray(d), np.ascontiguousarray(g)


def synthetic_pairs(n: int = 2, size: int = 64, seed: int = 0) -> list[ImagePairRecord]:
    """Smooth random scenes (clean) and a darkened, gamma-shifted copy (degraded)."""
    rng = np.random.default_rng(seed)
    yy, xx = np.meshgrid(np.linspace(0, 1, size), np.linspace(0, 1, size), indexing="ij")
    out = []
    for _ in range(n):
        clean = np.zeros((3, size, size))
        for c in range(3):
            for _ in range(4):
                fy, fx = rng.uniform(0.5, 3.0, 2)
                py, px = rng.uniform(0, 2 * np.pi, 2)
                clean[c] += rng.uniform(0.5, 1.0) * np.sin(2 * np.pi * fy * yy + py) * np.cos(2 * np.pi * fx * xx + px)
        clean = 0.15 + 0.7 * (clean - clean.min()) / (clean.max() - clean.min())
        degraded = 0.35 * clean ** 1.2
        out.append(ImagePairRecord.from_arrays(degraded.astype(np.float32), clean.astype(np.float32)))
    return out


class PairSampler:
    """Maps a training step to its batch: epoch-shuffled order, one seeded
    generator per global sample index."""

    def __init__(self, records, batch_size: int, patch_size: int, seed: int = 0,
                 flips: bool = True, workers: int = 0):
        if not records:
            raise ValueError("no training pairs")
        self.records = list(records)
        self.batch_size = batch_size
        self.patch_size = patch_size
        self.seed = seed
        self.flips = flips
        self.workers = workers
        self._perm_cache: dict[int, np.ndarray] = {}

    def record_index(self, g: int) -> int:
        n = len(self.records)
        epoch, pos = divmod(g, n)
        perm = self._perm_cache.get(epoch)
        if perm is None:
            perm = np.random.default_rng([self.seed, epoch]).permutation(n)
            self._perm_cache = {epoch: perm}
        return int(perm[pos])

    def _sample(self, g: int):
        rec = self.records[self.record_index(g)]
        rng = np.random.default_rng([self.seed, 1, g])
        return sample_patch(rec, self.patch_size, rng, self.flips)

    def batch(self, step: int):
        start = step * self.batch_size
        idx = range(start, start + self.batch_size)
        if self.workers > 0:
            # indices are fixed before dispatch; map() returns in submission order
            with ThreadPoolExecutor(self.workers) as ex:
                items = list(ex.map(self._sample, idx))
        else:
            items = [self._sample(g) for g in idx]
        d = torch.from_numpy(np.stack([a for a, _ in items]))
        g = torch.from_numpy(np.stack([b for _, b in items]))
        return d, g
