"""Synthetic disk corpus for exercising the full annotate-train-predict loop.

Tiles imitate the look of stained tissue at low power: a textured pink
background with darker, roughly round structures scattered over it. Ground
truth masks come for free, so pipeline-level f-scores have an exact reference.
"""
from __future__ import annotations

import numpy as np

BG_RGB = np.array([233, 206, 216], dtype=np.float64)
DISK_RGB = np.array([120, 76, 140], dtype=np.float64)


def disk_tile(seed: int, size: int = 256, n_disks=(6, 14), radius=(9, 22),
              contrast: float = 1.0, noise: float = 6.0):
    """One RGB tile plus its boolean ground-truth mask.

    contrast scales the disk-vs-background color separation; 1.0 is the
    easy setting, ~0.25 is hard to see by intensity alone.
    """
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)

    # coverage in [0,1] per pixel, anti-aliased at disk rims
    coverage = np.zeros((size, size))
    count = int(rng.integers(n_disks[0], n_disks[1] + 1))
    for _ in range(count):
        r = float(rng.uniform(*radius))
        cy = float(rng.uniform(r, size - r))
        cx = float(rng.uniform(r, size - r))
        d = np.sqrt((yy - cy) ** 2 + (xx - cx) ** 2)
        coverage = np.maximum(coverage, np.clip(r + 0.5 - d, 0.0, 1.0))

    disk_rgb = BG_RGB + (DISK_RGB - BG_RGB) * contrast
    img = BG_RGB + (disk_rgb - BG_RGB) * coverage[..., None]

    # low-frequency blotches + pixel noise so flat-color shortcuts fail
    blotch = rng.standard_normal((size // 32 + 1, size // 32 + 1))
    blotch = np.kron(blotch, np.ones((32, 32)))[:size, :size]
    img += blotch[..., None] * 4.0
    img += rng.standard_normal((size, size, 3)) * noise
    img = np.clip(img, 0, 255).astype(np.uint8)
    return img, coverage >= 0.5


def disk_corpus(n: int, seed: int = 0, size: int = 256, contrast: float = 1.0):
    """List of (rgb, truth) pairs with per-tile seeds derived from one seed."""
    return [disk_tile(seed * 100003 + i, size=size, contrast=contrast)
            for i in range(n)]


def truth_labelmap(truth: np.ndarray) -> np.ndarray:
    """Fully-labeled map from a ground-truth mask (2 positive, 1 negative)."""
    return np.where(truth, 2, 1).astype(np.uint8)
