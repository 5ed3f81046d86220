"""PSNR / SSIM and the evaluation harness producing comparison tables."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional

import numpy as np
from scipy import ndimage

from .errors import ContractError, ShapeError

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2


def _pair(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"image dims differ: {a.shape} vs {b.shape}")
    return a, b


def psnr(a, b) -> float:
    """10 log10(1 / MSE) over all channels; ``math.inf`` for identical images."""
    a, b = _pair(a, b)
    mse = float(np.mean((a - b) ** 2))
    return math.inf if mse == 0 else 10.0 * math.log10(1.0 / mse)


def ssim_window() -> np.ndarray:
    r = SSIM_WINDOW // 2
    g = np.exp(-0.5 * (np.arange(-r, r + 1) / SSIM_SIGMA) ** 2)
    g /= g.sum()
    return g


def _filter_valid(x: np.ndarray, g: np.ndarray) -> np.ndarray:
    r = len(g) // 2
    out = ndimage.correlate1d(x, g, axis=0, mode="constant")
    out = ndimage.correlate1d(out, g, axis=1, mode="constant")
    return out[r:x.shape[0] - r, r:x.shape[1] - r]


def ssim_map(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Per-window SSIM of two single-channel images (valid windows only)."""
    g = ssim_window()
    mu_a, mu_b = _filter_valid(a, g), _filter_valid(b, g)
    var_a = _filter_valid(a * a, g) - mu_a ** 2
    var_b = _filter_valid(b * b, g) - mu_b ** 2
    cov = _filter_valid(a * b, g) - mu_a * mu_b
    num = (2 * mu_a * mu_b + SSIM_C1) * (2 * cov + SSIM_C2)
    den = (mu_a ** 2 + mu_b ** 2 + SSIM_C1) * (var_a + var_b + SSIM_C2)
    return num / den


def ssim(a, b) -> float:
    """Mean single-scale SSIM, averaged over channels with equal weight."""
    a, b = _pair(a, b)
    if a.ndim not in (2, 3) or min(a.shape[:2]) < SSIM_WINDOW:
        raise ContractError(f"SSIM needs images of at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {a.shape}")
    if np.array_equal(a, b):
        return 1.0
    if a.ndim == 2:
        return float(np.mean(ssim_map(a, b)))
    return float(np.mean([np.mean(ssim_map(a[..., c], b[..., c])) for c in range(a.shape[2])]))


def format_psnr(v: float):
    """JSON-safe PSNR: infinite values become the token "inf"."""
    return "inf" if math.isinf(v) else v


def parse_psnr(v) -> float:
    return math.inf if v == "inf" else float(v)


@dataclass
class EvalRow:
    id: str
    psnr: float
    ssim: float


@dataclass
class EvalReport:
    rows: List[EvalRow] = field(default_factory=list)
    config: dict = field(default_factory=dict)

    @property
    def mean_psnr(self) -> float:
        return float(np.mean([r.psnr for r in self.rows])) if self.rows else math.nan

    @property
    def mean_ssim(self) -> float:
        return float(np.mean([r.ssim for r in self.rows])) if self.rows else math.nan

    def add(self, rid: str, out: np.ndarray, ref: np.ndarray) -> EvalRow:
        row = EvalRow(rid, psnr(out, ref), ssim(out, ref))
        self.rows.append(row)
        return row

    def sorted(self) -> "EvalReport":
        return EvalReport(sorted(self.rows, key=lambda r: r.id), dict(self.config))

    def to_jsonl(self) -> str:
        lines = [json.dumps({"config": self.config})]
        lines += [json.dumps({"id": r.id, "psnr": format_psnr(r.psnr), "ssim": r.ssim}) for r in self.rows]
        lines.append(json.dumps({"mean_psnr": format_psnr(self.mean_psnr), "mean_ssim": self.mean_ssim,
                                 "n": len(self.rows)}))
        return "\n".join(lines) + "\n"

    @classmethod
    def from_jsonl(cls, text: str) -> "EvalReport":
        rep = cls()
        for line in text.splitlines():
            if not line.strip():
                continue
            d = json.loads(line)
            if "config" in d:
                rep.config = d["config"]
            elif "id" in d:
                rep.rows.append(EvalRow(d["id"], parse_psnr(d["psnr"]), float(d["ssim"])))
        return rep

    def table(self) -> str:
        width = max([len("id")] + [len(r.id) for r in self.rows])
        out = [f"{'id':<{width}}  {'PSNR (dB)':>10}  {'SSIM':>7}"]
        for r in self.rows:
            out.append(f"{r.id:<{width}}  {r.psnr:>10.3f}  {r.ssim:>7.4f}")
        out.append(f"{'mean':<{width}}  {self.mean_psnr:>10.3f}  {self.mean_ssim:>7.4f}")
        return "\n".join(out)
