"""Synthetic rectangle scenes for toy training and fixtures."""
from __future__ import annotations

from pathlib import Path

import numpy as np


def rectangle_scenes(n: int, size: int = 64, seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """``n`` RGB images in [0, 1] with one bright rectangle each, plus binary masks.

    Returns images (n, 3, size, size) and masks (n, 1, size, size). Each
    rectangle covers roughly 10-30% of the frame over a dim, noisy background.
    """
    rng = np.random.default_rng(seed)
    images = np.empty((n, 3, size, size))
    masks = np.zeros((n, 1, size, size))
    for k in range(n):
        rh, rw = rng.integers(size // 4, size // 2 + 1, size=2)
        y0 = rng.integers(2, size - rh - 1)
        x0 = rng.integers(2, size - rw - 1)
        masks[k, 0, y0:y0 + rh, x0:x0 + rw] = 1.0
        bg = rng.uniform(0.1, 0.35, size=3)[:, None, None]
        fg = rng.uniform(0.65, 0.9, size=3)[:, None, None]
        m = masks[k]
        images[k] = bg * (1 - m) + fg * m + rng.normal(0.0, 0.05, size=(3, size, size))
    return np.clip(images, 0.0, 1.0), masks


def write_rectangle_dataset(root, n: int = 4, size: int = 64, seed: int = 0) -> Path:
    """Write ``root/image/*.png`` and ``root/gt/*.png`` for ``train-toy``."""
    from .imageio import save_image

    root = Path(root)
    (root / "image").mkdir(parents=True, exist_ok=True)
    (root / "gt").mkdir(parents=True, exist_ok=True)
    images, masks = rectangle_scenes(n, size, seed)
    for k in range(n):
        rgb = np.round(images[k].transpose(1, 2, 0) * 255).astype(np.uint8)
        save_image(root / "image" / f"rect_{k:03d}.png", rgb)
        save_image(root / "gt" / f"rect_{k:03d}.png", (masks[k, 0] * 255).astype(np.uint8))
    return root
