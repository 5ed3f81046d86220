"""Evaluation of trained checkpoints on a manifest split.

Two protocols:

* ``coarse``: G(Î) against Ĵ, both at 1/4 resolution;
* ``full``:   H(up(G(Î)), I) against J at native resolution.

Passing ``coarse=None`` evaluates the degraded input itself against the
groundtruth, which is the no-op baseline every model has to beat.
"""
from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Optional

import numpy as np

from . import imageops as ops
from .data import COARSE_FACTOR, PairSet, load_pairs
from .errors import ContractError
from .metrics import EvalReport
from .networks import COARSE_KINDS, FINE_KINDS, CoarseGenerator, FineNetwork, from_net, infer_coarse, infer_fine, \
    load_checkpoint, to_net
from .synth import DatasetManifest, worker_count

MODES = ("coarse", "full")


def _resolve(net, kinds):
    """Accept a network or a checkpoint path; paths must exist before any work starts."""
    if net is None or not isinstance(net, (str, os.PathLike)):
        return net
    if not Path(net).is_file():
        raise FileNotFoundError(f"checkpoint not found: {net}")
    return load_checkpoint(net, kind=kinds)


def side_by_side(*images: np.ndarray, gap: int = 4) -> np.ndarray:
    """Horizontal strip of equally tall images separated by white gaps."""
    h = images[0].shape[0]
    if any(im.shape[0] != h for im in images):
        raise ContractError("grid images must share their height")
    sep = np.ones((h, gap, 3))
    parts = []
    for im in images:
        parts += [np.asarray(im, dtype=np.float64), sep]
    return np.concatenate(parts[:-1], axis=1)


def coarse_outputs(g: Optional[CoarseGenerator], pairs: PairSet, chunk: int = 16) -> np.ndarray:
    c = pairs.coarse()
    if g is None:
        return c.degraded.astype(np.float64)
    outs = [from_net(infer_coarse(g, to_net(c.degraded[i:i + chunk]))) for i in range(0, len(c), chunk)]
    return np.concatenate(outs).astype(np.float64)


def full_output(g: Optional[CoarseGenerator], h: Optional[FineNetwork], degraded: np.ndarray) -> np.ndarray:
    degraded = np.asarray(degraded, dtype=np.float64)
    if g is None:
        return degraded
    coarse = ops.downsample_gaussian(degraded, COARSE_FACTOR)
    up = ops.upsample_bicubic(from_net(infer_coarse(g, to_net(coarse)))[0], COARSE_FACTOR)
    if h is None:
        return up
    return from_net(infer_fine(h, to_net(up), to_net(degraded)))[0].astype(np.float64)


def evaluate(source, split: str = "test", mode: str = "coarse", coarse=None, fine=None,
             limit: Optional[int] = None, grid_dir=None, workers: Optional[int] = None) -> EvalReport:
    """Score a model (or the no-op baseline when ``coarse`` is None) on one split.

    ``source`` is a DatasetManifest or a PairSet; ``coarse``/``fine`` are
    networks or checkpoint paths. Rows come back sorted by id.
    """
    if mode not in MODES:
        raise ContractError(f"mode must be one of {MODES}, got {mode!r}")
    if fine is not None and mode != "full":
        raise ContractError("a fine network is only used in full mode")
    if fine is not None and coarse is None:
        raise ContractError("full-mode evaluation with a fine network needs a coarse network too")
    g = _resolve(coarse, COARSE_KINDS)
    h = _resolve(fine, FINE_KINDS)
    if isinstance(source, DatasetManifest):
        pairs = load_pairs(source, split, limit)
    elif isinstance(source, PairSet):
        pairs = source if limit is None else source.subset(range(min(limit, len(source))))
    else:
        raise ContractError(f"cannot evaluate on {type(source).__name__}")
    if pairs.groundtruth is None:
        raise ContractError("evaluation needs groundtruth")

    config = {"split": split, "mode": mode, "n": len(pairs), "model": "noop" if g is None else g.kind,
              "fine": None if h is None else h.kind}
    report = EvalReport(config=config)
    if mode == "coarse":
        outs = coarse_outputs(g, pairs)
        refs = pairs.coarse().groundtruth.astype(np.float64)
        inputs = pairs.coarse().degraded
    else:
        with ThreadPoolExecutor(max_workers=worker_count(workers)) as pool:
            outs = list(pool.map(lambda d: full_output(g, h, d), pairs.degraded))
        refs = pairs.groundtruth.astype(np.float64)
        inputs = pairs.degraded

    for rid, out, ref in zip(pairs.ids, outs, refs):
        report.add(rid, out, ref)
    if grid_dir is not None:
        grid_dir = Path(grid_dir)
        grid_dir.mkdir(parents=True, exist_ok=True)
        for rid, inp, out, ref in zip(pairs.ids, inputs, outs, refs):
            ops.write_png(grid_dir / f"{rid}.png", side_by_side(inp, out, ref))
    return report.sorted()
