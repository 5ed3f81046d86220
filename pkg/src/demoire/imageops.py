"""Deterministic image kernels shared by the synthesizer and the networks.

Images are HxWx3 float64 arrays in [0, 1]; Bayer mosaics are HxW planes.
Pixel centres sit at integer coordinates (x = column, y = row). Every op is
pure and clamps its result to [0, 1]. Borders are handled by replication
unless stated otherwise.
"""
from __future__ import annotations

import os
import tempfile
from pathlib import Path
from typing import Optional, Sequence, Tuple

import numpy as np
from scipy import ndimage
from scipy.special import ndtr

from .errors import ContractError, ShapeError

DENOISE_SIGMA = 0.5
MIN_SIDE = 8


def as_image(a) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 3 or a.shape[2] != 3:
        raise ShapeError(f"expected an HxWx3 image, got shape {a.shape}")
    return a


def _clamp(a: np.ndarray) -> np.ndarray:
    return np.clip(a, 0.0, 1.0)


# ---------------------------------------------------------------------------
# display model

def subpixel_render(src: np.ndarray) -> np.ndarray:
    """Each pixel becomes a 3x3 cell of vertical R, G, B stripes.

    Column c of a cell carries only channel c, at the full channel value;
    the brightness loss of the stripe layout (1/3 per channel) is undone
    when the sensor integrates the cells (see ``bayer_sample``'s gain).
    """
    src = as_image(src)
    h, w, _ = src.shape
    out = np.zeros((3 * h, 3 * w, 3), dtype=np.float64)
    for c in range(3):
        out[:, c::3, c] = np.repeat(src[:, :, c], 3, axis=0)
    return out


# ---------------------------------------------------------------------------
# geometry

def _extend_index(i: np.ndarray, n: int, period: int) -> np.ndarray:
    """Map integer sample indices into [0, n) by replicating the edge cell.

    With ``period == 1`` this is plain edge replication; larger periods
    replicate whole cells (e.g. a subpixel triplet) so phase is preserved.
    """
    if period == 1:
        return np.clip(i, 0, n - 1)
    i = np.where(i < 0, np.mod(i, period), i)
    return np.where(i > n - 1, (n - period) + np.mod(i - (n - period), period), i)


def _bilinear(src: np.ndarray, xs: np.ndarray, ys: np.ndarray, period: int = 1) -> np.ndarray:
    """Sample ``src`` (HxW or HxWxC) at real coordinates, replicating borders."""
    h, w = src.shape[:2]
    if h % period or w % period:
        raise ShapeError(f"{h}x{w} raster is not a whole number of {period}-pixel cells")
    xs = np.clip(xs, -1e6, 1e6)
    ys = np.clip(ys, -1e6, 1e6)
    x0 = np.floor(xs)
    y0 = np.floor(ys)
    fx = xs - x0
    fy = ys - y0
    x0 = x0.astype(np.intp)
    y0 = y0.astype(np.intp)
    x1 = _extend_index(x0 + 1, w, period)
    y1 = _extend_index(y0 + 1, h, period)
    x0 = _extend_index(x0, w, period)
    y0 = _extend_index(y0, h, period)
    if src.ndim == 3:
        fx = fx[..., None]
        fy = fy[..., None]
    top = src[y0, x0] * (1.0 - fx) + src[y0, x1] * fx
    bot = src[y1, x0] * (1.0 - fx) + src[y1, x1] * fx
    return top * (1.0 - fy) + bot * fy


def normalize_homography(h: np.ndarray) -> np.ndarray:
    h = np.asarray(h, dtype=np.float64).reshape(3, 3)
    if abs(np.linalg.det(h)) <= 1e-9 or h[2, 2] == 0:
        raise ContractError(f"homography is not invertible (det={np.linalg.det(h):.3e})")
    return h / h[2, 2]


def warp_perspective(src: np.ndarray, h: np.ndarray, out_shape: Optional[Tuple[int, int]] = None,
                     border_period: int = 1) -> np.ndarray:
    """Warp by the pixel-coordinate homography ``h`` (source -> destination).

    Each output pixel is inverse-mapped through h^-1 and sampled bilinearly.
    Works on images and single planes. Out-of-frame samples replicate the
    border (whole ``border_period``-pixel cells at a time).
    """
    src = np.asarray(src, dtype=np.float64)
    h = normalize_homography(h)
    oh, ow = src.shape[:2] if out_shape is None else (int(out_shape[0]), int(out_shape[1]))
    if np.array_equal(h, np.eye(3)) and (oh, ow) == src.shape[:2]:
        return src.copy()
    inv = np.linalg.inv(h)
    ys, xs = np.mgrid[0:oh, 0:ow].astype(np.float64)
    den = inv[2, 0] * xs + inv[2, 1] * ys + inv[2, 2]
    sx = (inv[0, 0] * xs + inv[0, 1] * ys + inv[0, 2]) / den
    sy = (inv[1, 0] * xs + inv[1, 1] * ys + inv[1, 2]) / den
    return _clamp(_bilinear(src, sx, sy, border_period))


def translation(dx: float, dy: float) -> np.ndarray:
    return np.array([[1.0, 0.0, dx], [0.0, 1.0, dy], [0.0, 0.0, 1.0]])


def view_to_pixels(height: int, width: int) -> np.ndarray:
    """Matrix taking normalized view coordinates ([-1, 1] across the frame
    edges) to pixel coordinates of an image of the given size."""
    return np.array([[width / 2.0, 0.0, (width - 1) / 2.0],
                     [0.0, height / 2.0, (height - 1) / 2.0],
                     [0.0, 0.0, 1.0]])


def pixel_homography(h_view: np.ndarray, in_shape: Sequence[int], out_shape: Sequence[int]) -> np.ndarray:
    """Express a view-coordinate homography between two rasters in pixels."""
    n_in = view_to_pixels(in_shape[0], in_shape[1])
    n_out = view_to_pixels(out_shape[0], out_shape[1])
    return n_out @ np.asarray(h_view, dtype=np.float64) @ np.linalg.inv(n_in)


def homography_from_points(src_pts: np.ndarray, dst_pts: np.ndarray) -> np.ndarray:
    """Direct linear solve for the homography taking 4 points onto 4 points."""
    a = []
    rhs = []
    for (x, y), (u, v) in zip(np.asarray(src_pts, float), np.asarray(dst_pts, float)):
        a.append([x, y, 1, 0, 0, 0, -u * x, -u * y])
        rhs.append(u)
        a.append([0, 0, 0, x, y, 1, -v * x, -v * y])
        rhs.append(v)
    sol = np.linalg.solve(np.array(a), np.array(rhs))
    return np.append(sol, 1.0).reshape(3, 3)


def radial_coordinates(height: int, width: int):
    """Pixel offsets from the frame centre and the normalizing radius."""
    cx, cy = (width - 1) / 2.0, (height - 1) / 2.0
    radius = 0.5 * np.hypot(width, height)
    return cx, cy, radius


def check_monotone(k1: float, k2: float, r_max: float = 1.0) -> None:
    """Reject coefficients for which r(1 + k1 r^2 + k2 r^4) folds over on [0, r_max]."""
    r = np.linspace(0.0, r_max, 2049)
    slope = 1.0 + 3.0 * k1 * r ** 2 + 5.0 * k2 * r ** 4
    if np.any(slope <= 0):
        raise ContractError(f"radial distortion k1={k1}, k2={k2} folds over within r <= {r_max:.3f}")


def radial_distort(src: np.ndarray, k1: float, k2: float = 0.0, margin: int = 0) -> np.ndarray:
    """Radial lens distortion about the frame centre.

    An output pixel at normalized offset p samples the source at
    p * (1 + k1 r^2 + k2 r^4), r = |p|. Positive k1 therefore pulls content
    towards the centre (barrel): off-centre straight lines bow outwards.

    ``margin`` marks a border of extra source pixels around the frame; the
    output is the inner frame, and samples falling outside it use the real
    margin content instead of replicated edges.
    """
    src = np.asarray(src, dtype=np.float64)
    h, w = src.shape[0] - 2 * margin, src.shape[1] - 2 * margin
    if h < 1 or w < 1:
        raise ShapeError(f"margin {margin} leaves no frame in a {src.shape[0]}x{src.shape[1]} raster")
    if k1 == 0 and k2 == 0:
        return src[margin:margin + h, margin:margin + w].copy()
    cx, cy, radius = radial_coordinates(h, w)
    check_monotone(k1, k2, np.hypot(cx, cy) / radius)
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    px = (xs - cx) / radius
    py = (ys - cy) / radius
    r2 = px * px + py * py
    f = 1.0 + k1 * r2 + k2 * r2 * r2
    return _clamp(_bilinear(src, margin + cx + px * f * radius, margin + cy + py * f * radius))


# ---------------------------------------------------------------------------
# linear filters

def flat_top_kernel(sigma: float, plateau: float) -> np.ndarray:
    """Box of width ``plateau`` convolved with a Gaussian, sampled at integers."""
    if sigma <= 0 or plateau < 0:
        raise ContractError(f"flat-top filter needs sigma > 0 and plateau >= 0, got {sigma}, {plateau}")
    radius = int(np.ceil(plateau / 2.0 + 4.0 * sigma))
    n = np.arange(-radius, radius + 1, dtype=np.float64)
    if plateau == 0:
        k = np.exp(-0.5 * (n / sigma) ** 2)
    else:
        k = ndtr((n + plateau / 2.0) / sigma) - ndtr((n - plateau / 2.0) / sigma)
    return k / k.sum()


def separable_filter(src: np.ndarray, k: np.ndarray) -> np.ndarray:
    """Apply a symmetric 1-D kernel along rows and columns, replicating borders."""
    out = ndimage.correlate1d(np.asarray(src, dtype=np.float64), k, axis=0, mode="nearest")
    return ndimage.correlate1d(out, k, axis=1, mode="nearest")


def flat_top_gaussian(src: np.ndarray, sigma: float, plateau: float) -> np.ndarray:
    return _clamp(separable_filter(src, flat_top_kernel(sigma, plateau)))


def gaussian_kernel(sigma: float, radius: int) -> np.ndarray:
    n = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-0.5 * (n / sigma) ** 2)
    return k / k.sum()


def denoise_kernel() -> np.ndarray:
    return gaussian_kernel(DENOISE_SIGMA, 1)


def denoise_light(src: np.ndarray) -> np.ndarray:
    """3x3 Gaussian smoothing (sigma 0.5) standing in for in-camera denoising."""
    return _clamp(separable_filter(src, denoise_kernel()))


# ---------------------------------------------------------------------------
# sensor model

CFA_CHANNEL = np.array([[0, 1], [1, 2]])  # RGGB


def cfa_channel_map(height: int, width: int) -> np.ndarray:
    """HxW array of the channel index sampled at each site."""
    return np.tile(CFA_CHANNEL, (height // 2 + 1, width // 2 + 1))[:height, :width]


def bayer_sample(src: np.ndarray, pitch: int = 1, gain: float = 1.0) -> np.ndarray:
    """Integrate ``pitch`` x ``pitch`` blocks into sensor sites and keep the
    RGGB channel of each site.

    ``gain`` scales the block mean before clamping; the synthesizer uses
    gain 3 with pitch 3 so a stripe-rendered cell integrates back to the
    original pixel value.
    """
    src = as_image(src)
    h, w, _ = src.shape
    if h % pitch or w % pitch:
        raise ShapeError(f"image {h}x{w} is not divisible by sensor pitch {pitch}")
    sh, sw = h // pitch, w // pitch
    if sh % 2 or sw % 2:
        raise ShapeError(f"Bayer mosaic needs even dimensions, got {sh}x{sw}")
    if pitch > 1:
        src = src.reshape(sh, pitch, sw, pitch, 3).mean(axis=(1, 3))
    ch = cfa_channel_map(sh, sw)
    plane = np.take_along_axis(src, ch[..., None], axis=2)[..., 0]
    return _clamp(plane * gain) if gain != 1.0 else _clamp(plane)


def mosaic_to_rgb(m: np.ndarray) -> np.ndarray:
    """Place each site's sample in its own channel, zeros elsewhere."""
    m = np.asarray(m, dtype=np.float64)
    out = np.zeros(m.shape + (3,), dtype=np.float64)
    ch = cfa_channel_map(*m.shape)
    np.put_along_axis(out, ch[..., None], m[..., None], axis=2)
    return out


def demosaic_bilinear(m: np.ndarray) -> np.ndarray:
    """Bilinear RGGB demosaicing.

    Missing samples are the mean of the nearest same-colour sites: 2
    horizontal or vertical neighbours, or 4 orthogonal / diagonal ones. The
    plane is mirrored at the border (which keeps the CFA phase, so an edge
    site reuses its nearest same-colour neighbour).
    """
    m = np.asarray(m, dtype=np.float64)
    if m.ndim != 2:
        raise ShapeError(f"expected a mosaic plane, got shape {m.shape}")
    h, w = m.shape
    if h < 2 or w < 2:
        raise ShapeError(f"mosaic {h}x{w} too small to demosaic")
    p = np.pad(m, 1, mode="reflect")
    up, down = p[:-2, 1:-1], p[2:, 1:-1]
    left, right = p[1:-1, :-2], p[1:-1, 2:]
    horiz = (left + right) / 2.0
    vert = (up + down) / 2.0
    orth = ((up + down) + (left + right)) / 4.0
    diag = ((p[:-2, :-2] + p[:-2, 2:]) + (p[2:, :-2] + p[2:, 2:])) / 4.0

    row_even = (np.arange(h) % 2 == 0)[:, None]
    col_even = (np.arange(w) % 2 == 0)[None, :]
    r_site = row_even & col_even
    b_site = ~row_even & ~col_even
    g_in_r_row = row_even & ~col_even
    g_in_b_row = ~row_even & col_even

    out = np.empty((h, w, 3), dtype=np.float64)
    out[..., 0] = np.select([r_site, g_in_r_row, g_in_b_row], [m, horiz, vert], diag)
    out[..., 1] = np.where(r_site | b_site, orth, m)
    out[..., 2] = np.select([b_site, g_in_b_row, g_in_r_row], [m, horiz, vert], diag)
    return _clamp(out)


def add_gaussian_noise(src: np.ndarray, sigma: float, seed=None) -> np.ndarray:
    """Add i.i.d. N(0, sigma^2) noise and clamp. Works on images and mosaics."""
    if sigma < 0:
        raise ContractError(f"noise sigma must be >= 0, got {sigma}")
    src = np.asarray(src, dtype=np.float64)
    if sigma == 0:
        return src.copy()
    rng = np.random.default_rng(seed)
    return _clamp(src + sigma * rng.standard_normal(src.shape))


# ---------------------------------------------------------------------------
# resampling

def _downsample_axis(a: np.ndarray, factor: int, k: np.ndarray, offsets: np.ndarray, axis: int) -> np.ndarray:
    n = a.shape[axis]
    idx = np.clip(factor * np.arange(n // factor)[:, None] + offsets[None, :], 0, n - 1)
    moved = np.moveaxis(a, axis, 0)
    out = np.tensordot(k, moved[idx], axes=([0], [1]))
    return np.moveaxis(out, 0, axis)


def downsample_gaussian(src: np.ndarray, factor: int = 4) -> np.ndarray:
    """Gaussian blur (sigma = factor/2) and decimation by ``factor``.

    Coarse pixel i is centred on fine coordinate factor*i + (factor-1)/2, so
    the coarse grid covers exactly the same area as the fine one.
    """
    src = np.asarray(src, dtype=np.float64)
    h, w = src.shape[:2]
    if h % factor or w % factor:
        raise ShapeError(f"image {h}x{w} is not divisible by {factor}")
    sigma = factor / 2.0
    centre = (factor - 1) / 2.0
    offsets = np.arange(int(np.floor(centre - 4 * sigma)), int(np.ceil(centre + 4 * sigma)) + 1)
    k = np.exp(-0.5 * ((offsets - centre) / sigma) ** 2)
    k /= k.sum()
    out = _downsample_axis(src, factor, k, offsets, 0)
    return _clamp(_downsample_axis(out, factor, k, offsets, 1))


def cubic_weight(x: np.ndarray, a: float = -0.5) -> np.ndarray:
    x = np.abs(np.asarray(x, dtype=np.float64))
    near = ((a + 2) * x - (a + 3)) * x * x + 1
    far = ((a * x - 5 * a) * x + 8 * a) * x - 4 * a
    return np.where(x <= 1, near, np.where(x < 2, far, 0.0))


def _cubic_matrix(n_in: int, n_out: int, antialias: bool = False) -> np.ndarray:
    scale = n_in / n_out
    pos = (np.arange(n_out) + 0.5) * scale - 0.5
    # when shrinking with antialiasing the kernel is stretched by the scale
    # factor, so it low-passes at the output Nyquist rate
    stretch = scale if (antialias and scale > 1) else 1.0
    reach = int(np.ceil(2 * stretch))
    base = np.floor(pos).astype(np.intp)
    mat = np.zeros((n_out, n_in), dtype=np.float64)
    rows = np.arange(n_out)
    for tap in range(1 - reach, reach + 1):
        idx = base + tap
        np.add.at(mat, (rows, np.clip(idx, 0, n_in - 1)), cubic_weight((pos - idx) / stretch))
    return mat / mat.sum(axis=1, keepdims=True)


def resize_bicubic(src: np.ndarray, out_h: int, out_w: int, clamp: bool = True,
                   antialias: bool = False) -> np.ndarray:
    """Catmull-Rom (a = -0.5) resize with half-pixel alignment.

    ``antialias`` widens the kernel when shrinking (the usual image-library
    behaviour); enlarging is unaffected.
    """
    src = np.asarray(src, dtype=np.float64)
    h, w = src.shape[:2]
    if (h, w) == (out_h, out_w):
        return src.copy()
    out = np.tensordot(_cubic_matrix(h, out_h, antialias), src, axes=([1], [0]))
    out = np.moveaxis(np.tensordot(_cubic_matrix(w, out_w, antialias), out, axes=([1], [1])), 0, 1)
    return _clamp(out) if clamp else out


def upsample_bicubic(src: np.ndarray, factor: int = 4, clamp: bool = True) -> np.ndarray:
    h, w = np.asarray(src).shape[:2]
    return resize_bicubic(src, h * factor, w * factor, clamp=clamp)


# ---------------------------------------------------------------------------
# PNG I/O

def read_png(path) -> np.ndarray:
    from PIL import Image as PILImage

    with PILImage.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float64)
    return arr / 255.0


def to_uint8(img: np.ndarray) -> np.ndarray:
    return np.round(np.clip(np.asarray(img, dtype=np.float64), 0.0, 1.0) * 255.0).astype(np.uint8)


def write_png(path, img: np.ndarray) -> None:
    """Write an 8-bit RGB PNG atomically (temp file + rename)."""
    from PIL import Image as PILImage

    path = Path(path)
    data = to_uint8(as_image(img))
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=".tmp-", suffix=".png")
    try:
        with os.fdopen(fd, "wb") as fh:
            PILImage.fromarray(data, "RGB").save(fh, format="PNG")
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
