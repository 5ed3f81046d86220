"""In-memory training data drawn from a dataset manifest.

Images are held as float32 NHWC arrays in [0, 1]; the batch helpers return
NCHW float32 arrays in the networks' [-1, 1] convention.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Optional

import numpy as np

from . import imageops as ops
from .errors import ContractError
from .networks import to_net
from .synth import DatasetManifest

COARSE_FACTOR = 4


@dataclass
class PairSet:
    ids: List[str]
    degraded: np.ndarray                 # N x H x W x 3
    groundtruth: Optional[np.ndarray]    # N x H x W x 3, or None for unpaired inputs
    _coarse: Optional["PairSet"] = field(default=None, repr=False)

    def __len__(self) -> int:
        return len(self.ids)

    def coarse(self) -> "PairSet":
        """Both sides blurred and downsampled by 4 (cached)."""
        if self._coarse is None:
            down = lambda a: np.stack([ops.downsample_gaussian(x, COARSE_FACTOR) for x in a]).astype(np.float32)
            self._coarse = PairSet(list(self.ids), down(self.degraded),
                                   None if self.groundtruth is None else down(self.groundtruth))
        return self._coarse

    def subset(self, idx) -> "PairSet":
        idx = list(idx)
        return PairSet([self.ids[i] for i in idx], self.degraded[idx],
                       None if self.groundtruth is None else self.groundtruth[idx])


def load_pairs(m: DatasetManifest, split: str, limit: Optional[int] = None) -> PairSet:
    recs = m.split(split)[:limit]
    if not recs:
        raise ContractError(f"split {split!r} is empty (available: {m.splits()})")
    deg = np.stack([ops.read_png(m.path(r.degraded)) for r in recs]).astype(np.float32)
    gt = np.stack([ops.read_png(m.path(r.groundtruth)) for r in recs]).astype(np.float32)
    return PairSet([r.id for r in recs], deg, gt)


def load_clean(m: DatasetManifest) -> np.ndarray:
    if not m.clean_pool:
        raise ContractError("the manifest has no clean pool")
    return np.stack([ops.read_png(m.path(c)) for c in m.clean_pool]).astype(np.float32)


@dataclass
class TrainingData:
    """The pools a training run draws from."""
    train: PairSet
    test: Optional[PairSet] = None
    real: Optional[PairSet] = None       # unpaired inputs for adversarial retraining
    clean: Optional[np.ndarray] = None   # unrelated clean images for the discriminator

    @classmethod
    def from_manifest(cls, m: DatasetManifest) -> "TrainingData":
        splits = m.splits()
        return cls(train=load_pairs(m, "train"),
                   test=load_pairs(m, "test") if "test" in splits else None,
                   real=load_pairs(m, "real") if "real" in splits else None,
                   clean=load_clean(m) if m.clean_pool else None)

    def adversarial_inputs(self) -> PairSet:
        return self.real if self.real is not None else self.train


def as_training_data(data) -> TrainingData:
    if isinstance(data, TrainingData):
        return data
    if isinstance(data, DatasetManifest):
        return TrainingData.from_manifest(data)
    if isinstance(data, PairSet):
        return TrainingData(train=data)
    raise ContractError(f"cannot train from {type(data).__name__}")


def sample_indices(n: int, batch: int, rng: np.random.Generator) -> np.ndarray:
    """Uniform draws with replacement."""
    if n <= 0:
        raise ContractError("cannot sample from an empty split")
    if batch <= 0:
        raise ContractError(f"batch size must be positive, got {batch}")
    return rng.integers(0, n, size=batch)


def sample_minibatch(data, split: Optional[str], batch: int, rng: np.random.Generator):
    """(inputs, targets) as NCHW arrays in [-1, 1], sampled uniformly with replacement.

    ``data`` is a PairSet, or a manifest together with a split name.
    """
    pairs = data if isinstance(data, PairSet) else load_pairs(data, split)
    idx = sample_indices(len(pairs), batch, rng)
    x = to_net(pairs.degraded[idx])
    y = None if pairs.groundtruth is None else to_net(pairs.groundtruth[idx])
    return x, y


def random_crops(rng: np.random.Generator, size: int, shape, batch: int):
    """Top-left corners of ``batch`` uniform crops of ``size`` inside ``shape``."""
    h, w = shape
    if size > min(h, w):
        raise ContractError(f"crop {size} exceeds image {h}x{w}")
    return rng.integers(0, h - size + 1, size=batch), rng.integers(0, w - size + 1, size=batch)
