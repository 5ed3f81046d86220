"""Baseline-JPEG quantization round trip (no entropy coding).

Entropy coding is lossless, so the loss of a real encoder comes entirely
from what is simulated here: 8-bit input levels, BT.601 full-range YCbCr,
4:2:0 chroma averaging, 8x8 orthonormal DCT, quantization by the standard
tables scaled with the libjpeg quality law, and 8-bit output levels.
"""
from __future__ import annotations

import numpy as np
from scipy.fft import dctn, idctn

from .errors import ContractError
from .imageops import as_image

BASE_LUMA = np.array([
    [16, 11, 10, 16, 24, 40, 51, 61],
    [12, 12, 14, 19, 26, 58, 60, 55],
    [14, 13, 16, 24, 40, 57, 69, 56],
    [14, 17, 22, 29, 51, 87, 80, 62],
    [18, 22, 37, 56, 68, 109, 103, 77],
    [24, 35, 55, 64, 81, 104, 113, 92],
    [49, 64, 78, 87, 103, 121, 120, 101],
    [72, 92, 95, 98, 112, 100, 103, 99],
], dtype=np.float64)

BASE_CHROMA = np.full((8, 8), 99.0)
BASE_CHROMA[:4, :4] = [
    [17, 18, 24, 47],
    [18, 21, 26, 66],
    [24, 26, 56, 99],
    [47, 66, 99, 99],
]


def quality_scale(quality: int) -> int:
    if not 1 <= quality <= 100:
        raise ContractError(f"JPEG quality must be in [1, 100], got {quality}")
    return 5000 // quality if quality < 50 else 200 - 2 * quality


def quant_table(base: np.ndarray, quality: int) -> np.ndarray:
    s = quality_scale(int(quality))
    return np.clip(np.floor((base * s + 50) / 100), 1, 255)


def rgb_to_ycbcr(rgb: np.ndarray) -> np.ndarray:
    r, g, b = rgb[..., 0], rgb[..., 1], rgb[..., 2]
    y = 0.299 * r + 0.587 * g + 0.114 * b
    cb = -0.168736 * r - 0.331264 * g + 0.5 * b + 128.0
    cr = 0.5 * r - 0.418688 * g - 0.081312 * b + 128.0
    return np.stack([y, cb, cr], axis=-1)


def ycbcr_to_rgb(ycc: np.ndarray) -> np.ndarray:
    y, cb, cr = ycc[..., 0], ycc[..., 1] - 128.0, ycc[..., 2] - 128.0
    r = y + 1.402 * cr
    g = y - 0.344136 * cb - 0.714136 * cr
    b = y + 1.772 * cb
    return np.stack([r, g, b], axis=-1)


def quantize(coef: np.ndarray, table: np.ndarray) -> np.ndarray:
    """Quantize and dequantize, rounding half away from zero."""
    return np.sign(coef) * np.floor(np.abs(coef) / table + 0.5) * table


def _blocks(plane: np.ndarray) -> np.ndarray:
    h, w = plane.shape
    return plane.reshape(h // 8, 8, w // 8, 8).transpose(0, 2, 1, 3)


def _unblocks(blocks: np.ndarray) -> np.ndarray:
    bh, bw = blocks.shape[:2]
    return blocks.transpose(0, 2, 1, 3).reshape(bh * 8, bw * 8)


def roundtrip_plane(plane: np.ndarray, table: np.ndarray) -> np.ndarray:
    """Level shift, blockwise DCT, quantize, inverse DCT. Dims must be multiples of 8."""
    coef = dctn(_blocks(plane - 128.0), axes=(2, 3), norm="ortho")
    return _unblocks(idctn(quantize(coef, table), axes=(2, 3), norm="ortho")) + 128.0


def jpeg_degrade(src: np.ndarray, quality: int) -> np.ndarray:
    src = as_image(src)
    luma_t = quant_table(BASE_LUMA, quality)
    chroma_t = quant_table(BASE_CHROMA, quality)
    h, w, _ = src.shape
    levels = np.round(np.clip(src, 0.0, 1.0) * 255.0)
    ph, pw = -h % 16, -w % 16
    levels = np.pad(levels, ((0, ph), (0, pw), (0, 0)), mode="edge")
    ycc = rgb_to_ycbcr(levels)
    H, W = levels.shape[:2]

    y = roundtrip_plane(ycc[..., 0], luma_t)
    chroma = []
    for c in (1, 2):
        sub = ycc[..., c].reshape(H // 2, 2, W // 2, 2).mean(axis=(1, 3))
        sub = roundtrip_plane(sub, chroma_t)
        chroma.append(np.repeat(np.repeat(sub, 2, axis=0), 2, axis=1))
    rgb = ycbcr_to_rgb(np.stack([y] + chroma, axis=-1))[:h, :w]
    return np.round(np.clip(rgb, 0.0, 255.0)) / 255.0
