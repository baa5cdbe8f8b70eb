"""Treetop candidates from a canopy height model.

The CHM is clamped to a plausible height range, smoothed with a truncated
Gaussian and scanned for local maxima in a fixed square window. Flat
plateaus keep a single pixel: the first one in (y, x) order within the
window.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .errors import ValidationError
from .geodata import RasterCube


@dataclass(frozen=True)
class TreetopConfig:
    clip_lo: float = 5.0
    clip_hi: float = 40.0
    sigma: float = 1.0
    window: int = 5
    h_min: float = 5.0

    def __post_init__(self):
        if not self.clip_lo < self.clip_hi:
            raise ValidationError("clip_lo must be below clip_hi")
        if not self.sigma > 0:
            raise ValidationError("sigma must be positive")
        if self.window < 3 or self.window % 2 == 0:
            raise ValidationError("window must be an odd integer >= 3")


@dataclass(frozen=True, eq=False)
class CandidateSet:
    x: np.ndarray
    y: np.ndarray
    height: np.ndarray

    def __len__(self):
        return len(self.x)

    def coords(self) -> list[tuple[int, int]]:
        return list(zip(self.x.tolist(), self.y.tolist()))


def _chm_array(chm) -> np.ndarray:
    if isinstance(chm, RasterCube):
        if chm.bands != 1:
            raise ValidationError(f"CHM must have a single band, got {chm.bands}")
        return chm.values[0]
    a = np.asarray(chm)
    if a.ndim == 3:
        if a.shape[0] != 1:
            raise ValidationError(f"CHM must have a single band, got {a.shape[0]}")
        a = a[0]
    return a


def gaussian_kernel_radius(sigma: float) -> int:
    return int(math.ceil(3 * sigma))


def preprocess_chm(chm, cfg: TreetopConfig = TreetopConfig()) -> np.ndarray:
    """Clamp to [clip_lo, clip_hi] (NaN counts as ground) and smooth.

    Returns a float64 ``(height, width)`` array.
    """
    a = np.array(_chm_array(chm), dtype=np.float64)
    a[np.isnan(a)] = cfg.clip_lo
    np.clip(a, cfg.clip_lo, cfg.clip_hi, out=a)
    return ndimage.gaussian_filter(a, cfg.sigma, mode="reflect", radius=gaussian_kernel_radius(cfg.sigma))


def detect_treetops(smoothed, cfg: TreetopConfig = TreetopConfig()) -> CandidateSet:
    """Windowed local maxima with lexicographic plateau suppression."""
    h = np.asarray(_chm_array(smoothed), dtype=np.float64)
    rows, cols = h.shape
    half = cfg.window // 2
    padded = np.pad(h, half, mode="constant", constant_values=-np.inf)
    keep = h >= cfg.h_min
    for dy in range(-half, half + 1):
        for dx in range(-half, half + 1):
            if dy == 0 and dx == 0:
                continue
            q = padded[half + dy : half + dy + rows, half + dx : half + dx + cols]
            keep &= h >= q
            if (dy, dx) < (0, 0):
                # an equal neighbour earlier in (y, x) order owns the plateau
                keep &= q != h
    ys, xs = np.nonzero(keep)
    return CandidateSet(x=xs, y=ys, height=h[ys, xs])


def find_treetops(chm, cfg: TreetopConfig = TreetopConfig()) -> CandidateSet:
    return detect_treetops(preprocess_chm(chm, cfg), cfg)


def write_candidates(cands: CandidateSet, path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["x", "y", "height"])
        for x, y, hgt in zip(cands.x.tolist(), cands.y.tolist(), cands.height.tolist()):
            w.writerow([x, y, repr(hgt)])


def read_candidates(path) -> CandidateSet:
    with open(path, newline="") as f:
        rows = list(csv.DictReader(f))
    return CandidateSet(
        x=np.array([int(r["x"]) for r in rows], dtype=np.int64),
        y=np.array([int(r["y"]) for r in rows], dtype=np.int64),
        height=np.array([float(r.get("height", "nan")) for r in rows]),
    )
