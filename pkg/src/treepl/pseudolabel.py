"""Cohabitation-aware pseudo-labels for treetop candidates.

Every labeled training pixel (a *parent*) proposes a refined class
distribution for each candidate within ``r_max``: the classifier's
probabilities are multiplied by the parent's prior row and the parent's own
class is damped by a distance weight. The candidate keeps the proposal with
the single highest class score. Confident proposals are expanded into small
pixel blocks to form the augmented training set.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.spatial import cKDTree

from .cohabitation import ScaledPrior
from .errors import ValidationError


@dataclass(frozen=True)
class FusionConfig:
    r_min: float = 5.0
    r_max: float = 20.0
    epsilon: float = 0.05
    tau: float = 0.99
    expand_n: int = 1
    delta_scale: float = 0.75
    pixel_size: float = 1.0  # metres per pixel

    def __post_init__(self):
        if not 0 <= self.r_min < self.r_max:
            raise ValidationError("need 0 <= r_min < r_max")
        if not 0 < self.epsilon < 1:
            raise ValidationError("epsilon must lie in (0, 1)")
        if not 0 < self.tau <= 1:
            raise ValidationError("tau must lie in (0, 1]")
        if self.expand_n < 0:
            raise ValidationError("expand_n must be >= 0")


@dataclass(frozen=True)
class Candidate:
    x: int
    y: int
    probs: np.ndarray


@dataclass(frozen=True)
class Parent:
    x: int
    y: int
    label: int


@dataclass(frozen=True)
class PseudoLabel:
    x: int
    y: int
    label: int
    confidence: float
    parent_index: int
    expanded: bool = False


def distance_weight(d, cfg: FusionConfig = FusionConfig()):
    """Contextual weight of a parent at distance ``d`` (metres).

    1 up to ``r_min``, a quarter-ellipse falling to ``epsilon`` at ``r_max``,
    and ``epsilon`` beyond.
    """
    d = np.asarray(d, dtype=np.float64)
    t = np.clip((d - cfg.r_min) / (cfg.r_max - cfg.r_min), 0.0, 1.0)
    w = cfg.epsilon + (1.0 - cfg.epsilon) * np.sqrt(1.0 - t * t)
    w = np.where(d <= cfg.r_min, 1.0, np.where(d >= cfg.r_max, cfg.epsilon, w))
    return float(w) if w.ndim == 0 else w


def _fuse(probs: np.ndarray, parent_labels: np.ndarray, pi: np.ndarray, w: np.ndarray):
    # probs, pi rows and the damping all (n, K); returns normalized scores and usable mask
    s = probs * pi[parent_labels]
    rows = np.arange(len(parent_labels))
    s[rows, parent_labels] *= w
    total = s.sum(axis=1)
    usable = total > 0
    out = np.zeros_like(s)
    out[usable] = s[usable] / total[usable, None]
    return out, usable


def fuse_scores(candidate: Candidate, parent: Parent, prior: ScaledPrior, d: float, cfg: FusionConfig = FusionConfig()):
    """Normalized fused score vector, or ``None`` when every class scores zero."""
    p = np.asarray(candidate.probs, dtype=np.float64)[None]
    out, usable = _fuse(p, np.array([parent.label]), prior.pi, np.array([distance_weight(d, cfg)]))
    return out[0] if usable[0] else None


def _pick(scores: np.ndarray, usable: np.ndarray, parent_idx: np.ndarray):
    # best (confidence, parent, class) among one candidate's pairings
    if not usable.any():
        return None
    conf = np.where(usable, scores.max(axis=1), -np.inf)
    best = conf.max()
    tied = np.nonzero(conf == best)[0]
    row = tied[np.argmin(parent_idx[tied])]
    return int(np.argmax(scores[row])), float(best), int(parent_idx[row])


def select_best_parent(
    candidate: Candidate, parents: Sequence[Parent], prior: ScaledPrior, cfg: FusionConfig = FusionConfig()
) -> PseudoLabel | None:
    if not parents:
        return None
    px = np.array([p.x for p in parents], dtype=np.float64)
    py = np.array([p.y for p in parents], dtype=np.float64)
    d = np.hypot(px - candidate.x, py - candidate.y) * cfg.pixel_size
    near = np.nonzero(d <= cfg.r_max)[0]
    if len(near) == 0:
        return None
    labels = np.array([parents[j].label for j in near])
    probs = np.broadcast_to(np.asarray(candidate.probs, dtype=np.float64), (len(near), prior.pi.shape[0]))
    scores, usable = _fuse(probs.copy(), labels, prior.pi, distance_weight(d[near], cfg))
    picked = _pick(scores, usable, near)
    if picked is None:
        return None
    label, conf, j = picked
    return PseudoLabel(candidate.x, candidate.y, label, conf, j)


def refine_candidates(
    cand_xy: np.ndarray,
    cand_probs: np.ndarray,
    parent_xy: np.ndarray,
    parent_labels: np.ndarray,
    prior: ScaledPrior,
    cfg: FusionConfig = FusionConfig(),
) -> list[PseudoLabel | None]:
    """Vectorized :func:`select_best_parent` over many candidates.

    ``cand_xy`` and ``parent_xy`` are ``(n, 2)`` integer pixel coordinates.
    """
    cand_xy = np.asarray(cand_xy, dtype=np.float64).reshape(-1, 2)
    parent_xy = np.asarray(parent_xy, dtype=np.float64).reshape(-1, 2)
    cand_probs = np.asarray(cand_probs, dtype=np.float64)
    parent_labels = np.asarray(parent_labels, dtype=np.int64)
    k = prior.pi.shape[0]
    if cand_probs.shape != (len(cand_xy), k):
        raise ValidationError(f"probability matrix shape {cand_probs.shape} != ({len(cand_xy)}, {k})")
    if len(parent_labels) and (parent_labels.min() < 0 or parent_labels.max() >= k):
        raise ValidationError("parent label outside the prior's class range")
    result: list[PseudoLabel | None] = [None] * len(cand_xy)
    if len(parent_xy) == 0 or len(cand_xy) == 0:
        return result
    tree = cKDTree(parent_xy)
    # small slack so boundary parents are never lost to rounding; exact test below
    reach = cfg.r_max / cfg.pixel_size * (1 + 1e-9) + 1e-9
    for i, nbrs in enumerate(tree.query_ball_point(cand_xy, reach)):
        if not nbrs:
            continue
        near = np.array(sorted(nbrs), dtype=np.int64)
        d = np.hypot(parent_xy[near, 0] - cand_xy[i, 0], parent_xy[near, 1] - cand_xy[i, 1]) * cfg.pixel_size
        near = near[d <= cfg.r_max]
        d = d[d <= cfg.r_max]
        if len(near) == 0:
            continue
        probs = np.repeat(cand_probs[i][None], len(near), axis=0)
        scores, usable = _fuse(probs, parent_labels[near], prior.pi, distance_weight(d, cfg))
        picked = _pick(scores, usable, near)
        if picked is not None:
            label, conf, j = picked
            result[i] = PseudoLabel(int(cand_xy[i, 0]), int(cand_xy[i, 1]), label, conf, j)
    return result


def build_augmented_set(
    cand_xy: np.ndarray,
    cand_probs: np.ndarray,
    parent_xy: np.ndarray,
    parent_labels: np.ndarray,
    prior: ScaledPrior,
    cfg: FusionConfig = FusionConfig(),
    training_coords=None,
    shape: tuple[int, int] | None = None,
    seed: int | None = None,
) -> list[PseudoLabel]:
    """Confident pseudo-labels expanded into ``(2n+1)^2`` blocks.

    ``training_coords`` defaults to the parent coordinates. ``shape`` is
    ``(width, height)`` for clipping blocks; ``None`` leaves them unclipped.
    With a ``seed`` the candidate order is shuffled before overlaps are
    resolved, otherwise the given order decides which block claims a pixel.
    """
    refined = refine_candidates(cand_xy, cand_probs, parent_xy, parent_labels, prior, cfg)
    if training_coords is None:
        training_coords = np.asarray(parent_xy).reshape(-1, 2)
    taken = {(int(x), int(y)) for x, y in training_coords}
    survivors = [
        pl for pl in refined if pl is not None and pl.confidence > cfg.tau and (pl.x, pl.y) not in taken
    ]
    if seed is not None:
        order = np.random.default_rng(seed).permutation(len(survivors))
        survivors = [survivors[i] for i in order]

    out: list[PseudoLabel] = []
    claimed: set[tuple[int, int]] = set()
    n = cfg.expand_n
    for pl in survivors:
        for dy in range(-n, n + 1):
            for dx in range(-n, n + 1):
                x, y = pl.x + dx, pl.y + dy
                if shape is not None and not (0 <= x < shape[0] and 0 <= y < shape[1]):
                    continue
                if (x, y) in taken or (x, y) in claimed:
                    continue
                claimed.add((x, y))
                out.append(PseudoLabel(x, y, pl.label, pl.confidence, pl.parent_index, expanded=(dx, dy) != (0, 0)))
    return out


def augmented_arrays(labels: Sequence[PseudoLabel]):
    """``(xs, ys, labels)`` integer arrays of an augmented set."""
    xs = np.array([p.x for p in labels], dtype=np.int64)
    ys = np.array([p.y for p in labels], dtype=np.int64)
    ls = np.array([p.label for p in labels], dtype=np.int64)
    return xs, ys, ls


def write_augmented(labels: Sequence[PseudoLabel], path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["x", "y", "label", "confidence", "parent_index", "expanded"])
        for p in labels:
            w.writerow([p.x, p.y, p.label, repr(p.confidence), p.parent_index, int(p.expanded)])


def read_augmented(path) -> list[PseudoLabel]:
    with open(path, newline="") as f:
        return [
            PseudoLabel(int(r["x"]), int(r["y"]), int(r["label"]), float(r["confidence"]),
                        int(r["parent_index"]), bool(int(r["expanded"])))
            for r in csv.DictReader(f)
        ]


def read_parents(path) -> tuple[np.ndarray, np.ndarray]:
    """Parents CSV with columns ``x,y,label`` -> ``(xy, labels)``."""
    with open(path, newline="") as f:
        rows = list(csv.DictReader(f))
    xy = np.array([[int(r["x"]), int(r["y"])] for r in rows], dtype=np.int64).reshape(-1, 2)
    return xy, np.array([int(r["label"]) for r in rows], dtype=np.int64)


def write_parents(xy: np.ndarray, labels: np.ndarray, path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["x", "y", "label"])
        for (x, y), lab in zip(np.asarray(xy).tolist(), np.asarray(labels).tolist()):
            w.writerow([x, y, lab])
