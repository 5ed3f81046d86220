"""Procedural screen-like source images (windows, text rows, rules, gradients).

Used when no source directory is given and throughout the tests: the
content is what a monitor typically shows, with the sharp edges and fine
periodic structure that make moiré appear when it is photographed.
"""
from __future__ import annotations

from pathlib import Path

import numpy as np

from . import imageops as ops


def _smooth_field(rng: np.random.Generator, h: int, w: int, cells: int = 4) -> np.ndarray:
    coarse = rng.uniform(0, 1, size=(cells + 1, cells + 1, 3))
    return ops.resize_bicubic(coarse, h, w)


def screen_image(rng: np.random.Generator, height: int = 256, width: int = 256) -> np.ndarray:
    img = np.empty((height, width, 3))
    img[:] = rng.uniform(0.6, 1.0, size=3) if rng.random() < 0.7 else rng.uniform(0.0, 0.3, size=3)

    # a photo-like region with a smooth colour field
    y0, x0 = rng.integers(0, height // 2), rng.integers(0, width // 2)
    ph, pw = rng.integers(height // 6, height // 2), rng.integers(width // 6, width // 2)
    img[y0:y0 + ph, x0:x0 + pw] = _smooth_field(rng, height, width)[y0:y0 + ph, x0:x0 + pw]

    # windows with title bars
    for _ in range(rng.integers(1, 4)):
        y, x = rng.integers(0, height - 24), rng.integers(0, width - 24)
        h, w = rng.integers(24, max(25, height // 2)), rng.integers(24, max(25, width // 2))
        img[y:y + h, x:x + w] = rng.uniform(0.7, 1.0, size=3)
        img[y:y + 6, x:x + w] = rng.uniform(0.1, 0.6, size=3)

    # rows of glyph-like marks
    ink = rng.uniform(0.0, 0.35, size=3)
    line_pitch = int(rng.integers(6, 11))
    top = int(rng.integers(0, height // 3))
    for row in range(top, height - line_pitch, line_pitch):
        if rng.random() < 0.25:
            continue
        x = int(rng.integers(0, 12))
        while x < width - 6:
            gw = int(rng.integers(2, 6))
            if rng.random() < 0.8:
                glyph = rng.random((line_pitch - 3, gw)) < 0.55
                img[row:row + line_pitch - 3, x:x + gw][glyph] = ink
            x += gw + int(rng.integers(1, 3)) + (4 if rng.random() < 0.15 else 0)

    # thin rules and a fine grating patch
    for _ in range(rng.integers(1, 4)):
        if rng.random() < 0.5:
            img[int(rng.integers(0, height)), :] = rng.uniform(0, 1, size=3)
        else:
            img[:, int(rng.integers(0, width))] = rng.uniform(0, 1, size=3)
    gy, gx = rng.integers(0, height - 32), rng.integers(0, width - 32)
    period = int(rng.integers(2, 5))
    stripes = (np.arange(32) // (period / 2)).astype(int) % 2 == 0
    patch = img[gy:gy + 32, gx:gx + 32]
    if rng.random() < 0.5:
        patch[stripes, :] *= 0.3
    else:
        patch[:, stripes] *= 0.3
    return np.clip(img, 0.0, 1.0)


def write_sources(out_dir, n: int, seed: int = 0, size: int = 256) -> list:
    """Write ``n`` procedural PNG sources and return their paths."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for i in range(n):
        rng = np.random.default_rng([seed, i])
        p = out_dir / f"screen{i:04d}.png"
        ops.write_png(p, screen_image(rng, size, size))
        paths.append(p)
    return paths
