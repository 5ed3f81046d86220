"""Moiré photo synthesizer: screen rendering, camera geometry, sensor, ISP.

A clean source image is displayed on a simulated stripe-subpixel panel,
photographed through a tilted, slightly distorting lens onto a Bayer
sensor, then run through demosaicing, denoising and JPEG. The matching
groundtruth takes the same geometric path without the panel and sensor.

Geometry: the panel plane is rendered 3x finer than the source and the
sensor is simulated 3x finer than its output pixels, so each output pixel
integrates a 3x3 block. The random homography is kept in normalized view
coordinates ([-1, 1] across the frame) and composed with a zoom that sets
the sensor pitch to ``output_scale`` panel pixels, so one set of parameters
describes the geometry at every raster size.
"""
from __future__ import annotations

import hashlib
import json
import logging
import os
import tempfile
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import imageops as ops
from .errors import (ContractError, DanglingPathError, DuplicateIdError, InsufficientSourcesError, ManifestError,
                     ManifestNotFoundError, PoolOverlapError, ShapeError)
from .jpeg import jpeg_degrade

log = logging.getLogger(__name__)

MIN_SOURCE_SIDE = 128
CONTEXT_FACTOR = 1.55
FLAT_PATCH_STD = 1e-3
DISTORTION_MARGIN = 0.06
MANIFEST_FORMAT = "demoire-manifest"
MANIFEST_VERSION = 1
IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff", ".webp"}

PIPELINE_STEPS = ("render", "warp", "distort", "antialias", "bayer", "noise", "demosaic", "denoise", "jpeg", "emit")


@dataclass(frozen=True)
class SamplingRanges:
    corner_jitter: float = 0.08          # view units; 0.08 = 4% of the frame width
    k1: Tuple[float, float] = (-0.08, 0.04)
    k2: float = 0.0
    aa_sigma: Tuple[float, float] = (0.5, 1.2)
    aa_plateau: Tuple[int, int] = (0, 2)
    noise_sigma: Tuple[float, float] = (0.002, 0.01)
    jpeg_quality: Tuple[int, int] = (60, 95)
    output_scale: Tuple[float, float] = (0.8, 1.3)


SYNTH_RANGES = SamplingRanges()
# Stand-in for real captures: same geometry, harsher noise and compression.
REAL_RANGES = SamplingRanges(noise_sigma=(0.012, 0.02), jpeg_quality=(40, 59))

PARAM_FIELDS = ("seed", "homography", "k1", "k2", "aa_sigma", "aa_plateau", "noise_sigma", "jpeg_quality",
                "output_scale")


@dataclass(frozen=True)
class SynthesisParams:
    seed: int
    homography: Tuple[float, ...]   # 3x3 row-major, view coords, panel -> sensor, before the pitch zoom
    k1: float
    k2: float
    aa_sigma: float
    aa_plateau: int
    noise_sigma: float
    jpeg_quality: int
    output_scale: float

    @classmethod
    def identity(cls, seed: int = 0) -> "SynthesisParams":
        """Parameters under which every stage is (nearly) the identity."""
        return cls(seed, tuple(np.eye(3).ravel()), 0.0, 0.0, 0.2, 0, 0.0, 100, 1.0)

    @property
    def h(self) -> np.ndarray:
        return np.asarray(self.homography, dtype=np.float64).reshape(3, 3)

    def in_ranges(self, r: SamplingRanges = SYNTH_RANGES) -> bool:
        return (r.k1[0] <= self.k1 <= r.k1[1] and self.k2 == r.k2
                and r.aa_sigma[0] <= self.aa_sigma <= r.aa_sigma[1]
                and r.aa_plateau[0] <= self.aa_plateau <= r.aa_plateau[1]
                and r.noise_sigma[0] <= self.noise_sigma <= r.noise_sigma[1]
                and r.jpeg_quality[0] <= self.jpeg_quality <= r.jpeg_quality[1]
                and r.output_scale[0] <= self.output_scale <= r.output_scale[1])

    def to_dict(self) -> dict:
        d = asdict(self)
        d["homography"] = list(self.homography)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SynthesisParams":
        try:
            return cls(int(d["seed"]), tuple(float(v) for v in d["homography"]), float(d["k1"]), float(d["k2"]),
                       float(d["aa_sigma"]), int(d["aa_plateau"]), float(d["noise_sigma"]),
                       int(d["jpeg_quality"]), float(d["output_scale"]))
        except (KeyError, TypeError, ValueError) as exc:
            raise ManifestError(f"bad synthesis parameters: {exc}") from exc


def sample_params(seed: int, ranges: SamplingRanges = SYNTH_RANGES) -> SynthesisParams:
    """Draw every field uniformly from ``ranges``; deterministic in ``seed``."""
    rng = np.random.default_rng(seed)
    corners = np.array([[-1.0, -1.0], [1.0, -1.0], [1.0, 1.0], [-1.0, 1.0]])
    moved = corners + rng.uniform(-ranges.corner_jitter, ranges.corner_jitter, size=(4, 2))
    h = ops.homography_from_points(corners, moved)
    return SynthesisParams(
        seed=int(seed),
        homography=tuple(float(v) for v in h.ravel()),
        k1=float(rng.uniform(*ranges.k1)),
        k2=float(ranges.k2),
        aa_sigma=float(rng.uniform(*ranges.aa_sigma)),
        aa_plateau=int(rng.integers(ranges.aa_plateau[0], ranges.aa_plateau[1] + 1)),
        noise_sigma=float(rng.uniform(*ranges.noise_sigma)),
        jpeg_quality=int(rng.integers(ranges.jpeg_quality[0], ranges.jpeg_quality[1] + 1)),
        output_scale=float(rng.uniform(*ranges.output_scale)),
    )


def view_homography(p: SynthesisParams, src_shape: Sequence[int], out_shape: Sequence[int]) -> np.ndarray:
    """Panel-to-sensor map in view coordinates including the pitch zoom."""
    zx = src_shape[1] / (p.output_scale * out_shape[1])
    zy = src_shape[0] / (p.output_scale * out_shape[0])
    return np.diag([zx, zy, 1.0]) @ p.h


# ---------------------------------------------------------------------------
# the step executor

@dataclass
class _Run:
    params: SynthesisParams
    src_shape: Tuple[int, int]
    out_shape: Tuple[int, int]
    cell: int = 1      # border cell size of the current raster (3 once rendered)
    margin: int = 0    # extra border left by the warp for the distortion to use


def _as_rgb(state: np.ndarray) -> np.ndarray:
    return ops.mosaic_to_rgb(state) if state.ndim == 2 else state


def _crop_to(a: np.ndarray, mh: int, mw: int) -> np.ndarray:
    h, w = a.shape[:2]
    return a[: h - h % mh, : w - w % mw]


def _as_mosaic(state: np.ndarray) -> np.ndarray:
    return state if state.ndim == 2 else ops.bayer_sample(_crop_to(state, 2, 2))


def distortion_margin(shape: Sequence[int]) -> int:
    """Border wide enough for any in-range distortion to sample real content."""
    return int(np.ceil(DISTORTION_MARGIN * max(shape[:2]))) + 2


def warp_with_margin(src: np.ndarray, hv: np.ndarray, out_shape: Sequence[int], cell: int = 1):
    """Warp onto ``out_shape`` plus a margin; returns (raster, margin)."""
    m = distortion_margin(out_shape)
    hp = ops.translation(m, m) @ ops.pixel_homography(hv, src.shape[:2], out_shape)
    return ops.warp_perspective(src, hp, (out_shape[0] + 2 * m, out_shape[1] + 2 * m), cell), m


def _settle(state, run: _Run):
    """Drop a pending distortion margin (only the distort step consumes it)."""
    m, run.margin = run.margin, 0
    return state[m:state.shape[0] - m, m:state.shape[1] - m] if m else state


def _step_render(state, run: _Run):
    run.cell = 3
    return ops.subpixel_render(_as_rgb(_settle(state, run)))


def _step_warp(state, run: _Run):
    state = _settle(state, run)
    ih, iw = state.shape[:2]
    out = (ih * run.out_shape[0] // run.src_shape[0], iw * run.out_shape[1] // run.src_shape[1])
    hv = view_homography(run.params, run.src_shape, run.out_shape)
    state, run.margin = warp_with_margin(state, hv, out, run.cell if ih % run.cell == 0 == iw % run.cell else 1)
    return state


def _step_distort(state, run: _Run):
    m, run.margin = run.margin, 0
    return ops.radial_distort(state, run.params.k1, run.params.k2, margin=m)


def noise_seed(p: SynthesisParams) -> np.random.SeedSequence:
    return np.random.SeedSequence([p.seed, 6])


_STEPS: Dict[str, Callable] = {
    "render": _step_render,
    "warp": _step_warp,
    "distort": _step_distort,
    "antialias": lambda s, r: ops.flat_top_gaussian(_settle(s, r), r.params.aa_sigma, r.params.aa_plateau),
    "bayer": lambda s, r: ops.bayer_sample(_crop_to(_as_rgb(_settle(s, r)), 6, 6), pitch=3, gain=3.0),
    "noise": lambda s, r: ops.add_gaussian_noise(_settle(s, r), r.params.noise_sigma, noise_seed(r.params)),
    "demosaic": lambda s, r: ops.demosaic_bilinear(_as_mosaic(_settle(s, r))),
    "denoise": lambda s, r: ops.denoise_light(_settle(s, r)),
    "jpeg": lambda s, r: jpeg_degrade(_as_rgb(_settle(s, r)), r.params.jpeg_quality),
}


def run_steps(src: np.ndarray, p: SynthesisParams, out_shape: Tuple[int, int],
              order: Sequence[str] = PIPELINE_STEPS) -> np.ndarray:
    """Apply the degradation steps in ``order``; the result is the state at "emit".

    Steps convert their input as needed (mosaic <-> masked RGB, cropping to
    the multiples a step requires) so any ordering runs; only the canonical
    one is physically meaningful.
    """
    if sorted(order) != sorted(PIPELINE_STEPS):
        raise ContractError(f"order must be a permutation of {PIPELINE_STEPS}, got {tuple(order)}")
    run = _Run(p, tuple(src.shape[:2]), tuple(out_shape))
    state = np.asarray(src, dtype=np.float64)
    for name in order:
        if name == "emit":
            return _as_rgb(_settle(state, run))
        state = _STEPS[name](state, run)
    raise AssertionError("unreachable")


def _check_source(src: np.ndarray, out_shape: Optional[Tuple[int, int]]) -> Tuple[int, int]:
    src = ops.as_image(src)
    h, w, _ = src.shape
    if min(h, w) < MIN_SOURCE_SIDE:
        raise ShapeError(f"source image {h}x{w} is smaller than {MIN_SOURCE_SIDE}x{MIN_SOURCE_SIDE}")
    if out_shape is None:
        out_shape = (h - h % 2, w - w % 2)
    oh, ow = int(out_shape[0]), int(out_shape[1])
    if oh % 2 or ow % 2 or min(oh, ow) < ops.MIN_SIDE:
        raise ShapeError(f"output shape must be even and >= {ops.MIN_SIDE}, got {oh}x{ow}")
    return oh, ow


GT_SUPERSAMPLE = 3


def render_groundtruth(src: np.ndarray, p: SynthesisParams, out_shape: Tuple[int, int]) -> np.ndarray:
    """Clean view through the same geometry, at ``GT_SUPERSAMPLE`` x the output grid.

    The warp and distortion run on the same supersampled frame the degraded
    branch uses, so the shrink to output size is a proper antialiased resize
    rather than point sampling, which would itself alias fine source detail.
    """
    sup = (GT_SUPERSAMPLE * out_shape[0], GT_SUPERSAMPLE * out_shape[1])
    gt, m = warp_with_margin(src, view_homography(p, src.shape[:2], out_shape), sup)
    return ops.radial_distort(gt, p.k1, p.k2, margin=m)


def synthesize_pair(src: np.ndarray, p: SynthesisParams, out_shape: Optional[Tuple[int, int]] = None,
                    order: Sequence[str] = PIPELINE_STEPS) -> Tuple[np.ndarray, np.ndarray]:
    """Return (degraded, groundtruth), both ``out_shape`` (default: source dims)."""
    out_shape = _check_source(src, out_shape)
    src = np.asarray(src, dtype=np.float64)
    degraded = run_steps(src, p, out_shape, order)
    gt = render_groundtruth(src, p, out_shape)
    gt = ops.resize_bicubic(gt, degraded.shape[0], degraded.shape[1], antialias=True)
    return degraded, gt


# ---------------------------------------------------------------------------
# manifest

@dataclass(frozen=True)
class ManifestRecord:
    id: str
    degraded: str
    groundtruth: str
    split: str
    params: SynthesisParams
    origin: Optional[Tuple[str, int, int, int]] = None   # (source file name, y, x, crop size)

    def to_json(self) -> str:
        d = {"id": self.id, "degraded": self.degraded, "groundtruth": self.groundtruth, "split": self.split}
        d.update(self.params.to_dict())
        if self.origin is not None:
            d["origin"] = list(self.origin)
        return json.dumps(d)


@dataclass
class DatasetManifest:
    root: Path
    records: List[ManifestRecord] = field(default_factory=list)
    clean_pool: List[str] = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    def path(self, rel: str) -> Path:
        return self.root / rel

    def split(self, name: str) -> List[ManifestRecord]:
        return [r for r in self.records if r.split == name]

    def splits(self) -> List[str]:
        return sorted({r.split for r in self.records})

    def lines(self) -> List[str]:
        header = {"format": MANIFEST_FORMAT, "version": MANIFEST_VERSION,
                  "fields": ["id", "degraded", "groundtruth", "split", *PARAM_FIELDS], **self.meta}
        return ([json.dumps(header)] + [r.to_json() for r in self.records]
                + [json.dumps({"clean": c}) for c in self.clean_pool])

    def write(self, path) -> None:
        text = "\n".join(self.lines()) + "\n"
        atomic_write_text(path, text)


def atomic_write_text(path, text: str) -> None:
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=".tmp-")
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _decodes(path: Path) -> bool:
    from PIL import Image as PILImage

    try:
        with PILImage.open(path) as im:
            im.verify()
        return True
    except Exception:
        return False


def load_manifest(path) -> DatasetManifest:
    """Parse and validate a manifest file (ids, files, pool disjointness)."""
    path = Path(path)
    if not path.is_file():
        raise ManifestNotFoundError(f"manifest not found: {path}")
    lines = [ln for ln in path.read_text(encoding="utf-8").splitlines() if ln.strip()]
    if not lines:
        raise ManifestError(f"{path}: empty manifest")
    try:
        rows = [json.loads(ln) for ln in lines]
    except json.JSONDecodeError as exc:
        raise ManifestError(f"{path}: malformed line: {exc}") from exc
    header = rows[0]
    if header.get("format") != MANIFEST_FORMAT:
        raise ManifestError(f"{path}: not a dataset manifest")
    if header.get("version") != MANIFEST_VERSION:
        raise ManifestError(f"{path}: unsupported manifest version {header.get('version')}")
    meta = {k: v for k, v in header.items() if k not in ("format", "version", "fields")}
    m = DatasetManifest(root=path.parent, meta=meta)
    seen = set()
    for row in rows[1:]:
        if "clean" in row:
            m.clean_pool.append(str(row["clean"]))
            continue
        try:
            origin = row.get("origin")
            rec = ManifestRecord(str(row["id"]), str(row["degraded"]), str(row["groundtruth"]), str(row["split"]),
                                 SynthesisParams.from_dict(row),
                                 None if origin is None else (str(origin[0]), *map(int, origin[1:4])))
        except KeyError as exc:
            raise ManifestError(f"{path}: record missing field {exc}") from exc
        if rec.id in seen:
            raise DuplicateIdError(f"{path}: duplicate record id {rec.id!r}")
        seen.add(rec.id)
        m.records.append(rec)
    for rec in m.records:
        for rel in (rec.degraded, rec.groundtruth):
            if not m.path(rel).is_file() or not _decodes(m.path(rel)):
                raise DanglingPathError(f"record {rec.id!r}: missing or unreadable image {rel}")
    for rel in m.clean_pool:
        if not m.path(rel).is_file() or not _decodes(m.path(rel)):
            raise DanglingPathError(f"clean pool entry {rel}: missing or unreadable image")
    gts = {m.path(r.groundtruth).resolve() for r in m.records}
    overlap = sorted(str(c) for c in m.clean_pool if m.path(c).resolve() in gts)
    if overlap:
        raise PoolOverlapError(f"clean pool entries are also groundtruth images: {overlap}")
    return m


# ---------------------------------------------------------------------------
# dataset building

def round_up_even(x: float) -> int:
    n = int(np.ceil(x))
    return n + (n % 2)


def list_sources(src_dir, min_side: int) -> List[Tuple[Path, np.ndarray]]:
    """Decodable images of at least ``min_side`` on both axes, sorted by name."""
    out, too_small = [], []
    for p in sorted(Path(src_dir).iterdir()):
        if p.suffix.lower() not in IMAGE_SUFFIXES or not p.is_file():
            continue
        try:
            img = ops.read_png(p)
        except Exception as exc:  # unreadable source: skip, keep going
            log.warning("skipping unreadable source %s: %s", p, exc)
            continue
        if min(img.shape[:2]) < min_side:
            too_small.append(p.name)
            continue
        out.append((p, img))
    if not out:
        raise InsufficientSourcesError(
            f"no usable source images in {src_dir}: need at least 1 image >= {min_side}x{min_side}, "
            f"found 0 ({len(too_small)} too small: {too_small[:10]})")
    return out


def record_seed(master_seed: int, pool: int, index: int) -> int:
    return int(np.random.SeedSequence([master_seed, pool, index]).generate_state(1, np.uint64)[0])


def random_crop(img: np.ndarray, size: int, rng: np.random.Generator, tries: int = 50):
    """Uniform random square crop, rejecting near-constant patches.

    Returns (crop, y, x).
    """
    h, w = img.shape[:2]
    for _ in range(tries):
        y = int(rng.integers(0, h - size + 1))
        x = int(rng.integers(0, w - size + 1))
        crop = img[y:y + size, x:x + size]
        if crop.std() >= FLAT_PATCH_STD:
            return crop, y, x
    log.warning("no textured %dx%d crop found after %d tries; using a flat one", size, size, tries)
    return crop, y, x


def worker_count(default: Optional[int] = None) -> int:
    n = default or os.cpu_count() or 1
    env = os.environ.get("DEMOIRE_THREADS")
    if env:
        try:
            n = min(n, max(1, int(env)))
        except ValueError:
            raise ContractError(f"DEMOIRE_THREADS must be an integer, got {env!r}")
    return max(1, n)


POOL_SYNTH, POOL_CLEAN, POOL_REAL = 0, 1, 2


def build_dataset(src_dir, n_patches: int, out_dir, master_seed: int = 0, patch_size: int = 512,
                  n_clean: int = 0, n_real: int = 0, workers: Optional[int] = None) -> DatasetManifest:
    """Crop, synthesize and write ``n_patches`` pairs plus optional extra pools.

    * records ``i % 4 == 3`` form the test split (a 75/25 split);
    * ``n_real`` more pairs drawn from ``REAL_RANGES`` form the "real" split,
      the unpaired input of adversarial retraining;
    * ``n_clean`` clean crops form the discriminator's clean pool.
    """
    if n_patches < 0 or n_clean < 0 or n_real < 0:
        raise ContractError("pool sizes must be non-negative")
    if patch_size % 4 or patch_size < MIN_SOURCE_SIDE:
        raise ContractError(f"patch size must be a multiple of 4 and >= {MIN_SOURCE_SIDE}, got {patch_size}")
    sources = list_sources(src_dir, patch_size)
    out_dir = Path(out_dir)
    for sub in ("degraded", "groundtruth", "clean"):
        (out_dir / sub).mkdir(parents=True, exist_ok=True)

    jobs = [(POOL_SYNTH, i) for i in range(n_patches)] + [(POOL_REAL, i) for i in range(n_real)]

    def make_pair(job):
        pool, i = job
        seed = record_seed(master_seed, pool, i)
        src_path, img = sources[i % len(sources)]
        context = min(round_up_even(CONTEXT_FACTOR * patch_size), min(img.shape[:2]))
        crop, y, x = random_crop(img, context, np.random.default_rng([seed, 1]))
        params = sample_params(seed, SYNTH_RANGES if pool == POOL_SYNTH else REAL_RANGES)
        degraded, gt = synthesize_pair(crop, params, (patch_size, patch_size))
        rid = f"{i:06d}" if pool == POOL_SYNTH else f"real{i:06d}"
        split = ("test" if i % 4 == 3 else "train") if pool == POOL_SYNTH else "real"
        rec = ManifestRecord(rid, f"degraded/{rid}.png", f"groundtruth/{rid}.png", split, params,
                             (src_path.name, y, x, context))
        ops.write_png(out_dir / rec.degraded, degraded)
        ops.write_png(out_dir / rec.groundtruth, gt)
        return rec

    def make_clean(i):
        seed = record_seed(master_seed, POOL_CLEAN, i)
        _, img = sources[(i + 1) % len(sources)]
        rel = f"clean/{i:06d}.png"
        ops.write_png(out_dir / rel, random_crop(img, patch_size, np.random.default_rng([seed, 1]))[0])
        return rel

    n_workers = worker_count(workers)
    if n_workers == 1:
        records = [make_pair(j) for j in jobs]
        clean = [make_clean(i) for i in range(n_clean)]
    else:
        with ThreadPoolExecutor(n_workers) as pool:
            records = list(pool.map(make_pair, jobs))
            clean = list(pool.map(make_clean, range(n_clean)))
    meta = {"master_seed": int(master_seed), "patch_size": int(patch_size)}
    m = DatasetManifest(root=out_dir, records=records, clean_pool=clean, meta=meta)
    m.write(out_dir / "manifest.jsonl")
    return m


def replay_record(m: DatasetManifest, rec: ManifestRecord, src_dir) -> Tuple[np.ndarray, np.ndarray]:
    """Re-run the synthesizer for a record from its source image and stored crop."""
    if rec.origin is None:
        raise ManifestError(f"record {rec.id!r} does not store its source crop")
    name, y, x, size = rec.origin
    src = ops.read_png(Path(src_dir) / name)[y:y + size, x:x + size]
    return synthesize_pair(src, rec.params, tuple(ops.read_png(m.path(rec.degraded)).shape[:2]))


def file_digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
