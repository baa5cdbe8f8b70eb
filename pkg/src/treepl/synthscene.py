"""Synthetic forest scenes with known ground truth.

Trees are planted one after another at random pixel positions respecting a
minimum spacing. A new tree's species is drawn in proportion to the summed
cohabitation rows of the trees already standing within ``neighbor_radius``,
so the scene carries the co-occurrence structure of ``gt_cohab``.

Each tree is a Gaussian bump in the canopy height model. Pixel spectra mix
the signatures of all nearby crowns by their Gaussian coverage, so crown
edges produce mixed pixels. ALS bands are local height statistics.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree

from .cohabitation import CohabitationMatrix, resolve_missing, save_matrix
from .errors import ValidationError
from .geodata import (
    UNLABELED,
    PolygonLabel,
    RasterCube,
    label_cube,
    save_cube,
    split_by_polygon,
    write_classes,
    write_polygons,
    write_splits,
)

GROUND_HEIGHT = 5.0


@dataclass(frozen=True)
class SceneConfig:
    width: int = 96
    height: int = 96
    n_trees: int = 400
    species: tuple[str, ...] = ("sp0", "sp1", "sp2", "sp3", "sp4", "sp5")
    gt_cohab: CohabitationMatrix | None = None
    crown_radius_range: tuple[float, float] = (1.5, 3.5)
    height_range: tuple[float, float] = (12.0, 30.0)
    spectral_bands: int = 20
    als_bands: int = 6
    noise_sigma: float = 0.02
    label_fraction: float = 0.15
    seed: int = 0
    min_spacing: float = 3.0
    neighbor_radius: float = 20.0
    tree_variability: float = 0.02
    species_contrast: float = 0.03
    spectral_groups: tuple[int, ...] | None = None
    group_contrast: float = 0.03
    als_noise_sigma: float = 1.0
    split_fractions: tuple[float, float, float] = (0.66, 0.23, 0.11)
    max_tries: int = 5000

    def __post_init__(self):
        object.__setattr__(self, "species", tuple(self.species))
        lo, hi = self.crown_radius_range
        if not 0 < lo <= hi:
            raise ValidationError("crown_radius_range must be a non-empty positive range")
        lo, hi = self.height_range
        if not 5 <= lo <= hi <= 40:
            raise ValidationError("height_range must lie within [5, 40] m")
        if not 0 < self.label_fraction <= 1:
            raise ValidationError("label_fraction must lie in (0, 1]")
        if self.n_trees < 1 or self.width < 1 or self.height < 1:
            raise ValidationError("scene needs positive size and at least one tree")
        if self.spectral_groups is not None:
            object.__setattr__(self, "spectral_groups", tuple(int(g) for g in self.spectral_groups))
            if len(self.spectral_groups) != len(self.species):
                raise ValidationError("spectral_groups needs one entry per species")
        if self.gt_cohab is not None and self.gt_cohab.species != self.species:
            raise ValidationError("gt_cohab species differ from scene species")

    def cohab(self) -> CohabitationMatrix:
        if self.gt_cohab is not None:
            return self.gt_cohab
        k = len(self.species)
        return CohabitationMatrix(self.species, np.ones((k, k)))


@dataclass(frozen=True, eq=False)
class GroundTruth:
    species: tuple[str, ...]
    tree_x: np.ndarray
    tree_y: np.ndarray
    tree_species: np.ndarray
    tree_radius: np.ndarray
    tree_height: np.ndarray
    species_map: np.ndarray  # (height, width), UNLABELED where no crown
    tree_map: np.ndarray  # index of the covering tree or -1
    polygons: tuple[PolygonLabel, ...]
    splits: dict
    gt_cohab: CohabitationMatrix

    @property
    def n_trees(self) -> int:
        return len(self.tree_x)

    def to_dict(self) -> dict:
        return {
            "species": list(self.species),
            "trees": [
                {"x": int(x), "y": int(y), "species": int(s), "crown_radius": float(r), "height": float(h)}
                for x, y, s, r, h in zip(self.tree_x, self.tree_y, self.tree_species, self.tree_radius, self.tree_height)
            ],
            "labeled_polygons": [asdict(p) for p in self.polygons],
            "splits": {str(k): v for k, v in sorted(self.splits.items())},
        }


@dataclass(frozen=True, eq=False)
class Scene:
    hsi: RasterCube
    als: RasterCube
    chm: RasterCube
    truth: GroundTruth
    config: SceneConfig = field(repr=False)


def random_cohabitation(species: Sequence[str], seed: int = 0, low: float = 0.0, high: float = 0.8) -> CohabitationMatrix:
    """Symmetric matrix with unit diagonal and uniform off-diagonal scores."""
    k = len(species)
    rng = np.random.default_rng(seed)
    v = np.triu(rng.uniform(low, high, (k, k)), 1)
    v = v + v.T
    np.fill_diagonal(v, 1.0)
    return CohabitationMatrix(species, np.round(v, 6))


def block_cohabitation(
    species: Sequence[str],
    habitats: Sequence[int],
    seed: int = 0,
    within: tuple[float, float] = (0.5, 0.9),
    across: tuple[float, float] = (0.0, 0.1),
) -> CohabitationMatrix:
    """Cohabitation matrix of species sorted into habitats: pairs sharing a
    habitat score in ``within``, all other pairs in ``across``."""
    k = len(species)
    if len(habitats) != k:
        raise ValidationError("habitats needs one entry per species")
    rng = np.random.default_rng(seed)
    h = np.asarray(habitats)
    same = h[:, None] == h[None, :]
    v = np.where(same, rng.uniform(*within, (k, k)), rng.uniform(*across, (k, k)))
    v = np.triu(v, 1)
    v = v + v.T
    np.fill_diagonal(v, 1.0)
    return CohabitationMatrix(species, np.round(v, 6))


def benchmark_config(seed: int = 0) -> SceneConfig:
    """The standard 96 x 96 test scene: 6 species, 400 trees, 15% labeled,
    20 spectral and 6 structural bands, with a random affinity matrix."""
    species = tuple(f"sp{i}" for i in range(6))
    return SceneConfig(gt_cohab=random_cohabitation(species, seed=100, high=0.6), species=species, seed=seed)


def _place_trees(cfg: SceneConfig, rng: np.random.Generator, cohab: np.ndarray):
    xs, ys, sp = [], [], []
    occupied = np.zeros((cfg.height, cfg.width), dtype=bool)
    k = len(cfg.species)
    r_sp = int(np.ceil(cfg.min_spacing))
    dy, dx = np.mgrid[-r_sp : r_sp + 1, -r_sp : r_sp + 1]
    disk = (dx**2 + dy**2) < cfg.min_spacing**2
    for t in range(cfg.n_trees):
        for _ in range(cfg.max_tries):
            x = int(rng.integers(cfg.width))
            y = int(rng.integers(cfg.height))
            if not occupied[y, x]:
                break
        else:
            raise ValidationError(
                f"could not place tree {t + 1} of {cfg.n_trees} with spacing {cfg.min_spacing} "
                f"after {cfg.max_tries} tries; lower n_trees or min_spacing"
            )
        if xs:
            d2 = (np.asarray(xs) - x) ** 2 + (np.asarray(ys) - y) ** 2
            near = np.asarray(sp)[d2 <= cfg.neighbor_radius**2]
        else:
            near = np.empty(0, dtype=np.int64)
        w = cohab[near].sum(axis=0) if len(near) else np.ones(k)
        if w.sum() <= 0:
            w = np.ones(k)
        s = int(rng.choice(k, p=w / w.sum()))
        xs.append(x)
        ys.append(y)
        sp.append(s)
        # block every pixel closer than min_spacing
        y0, y1 = max(0, y - r_sp), min(cfg.height, y + r_sp + 1)
        x0, x1 = max(0, x - r_sp), min(cfg.width, x + r_sp + 1)
        occupied[y0:y1, x0:x1] |= disk[y0 - y + r_sp : y1 - y + r_sp, x0 - x + r_sp : x1 - x + r_sp]
    return np.array(xs), np.array(ys), np.array(sp)


def _signatures(cfg: SceneConfig, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    b = cfg.spectral_bands
    t = np.linspace(0.0, 1.0, b)
    base = 0.08 + 0.35 / (1.0 + np.exp(-(t - 0.4) * 18.0))

    def smooth_dev():
        amp = rng.normal(0, 1, 3)
        phase = rng.uniform(0, 2 * np.pi, 3)
        return sum(amp[j] * np.sin(np.pi * (j + 1) * t + phase[j]) for j in range(3))

    k = len(cfg.species)
    if cfg.spectral_groups is None:
        sig = np.array([base + cfg.species_contrast * smooth_dev() for _ in range(k)])
    else:
        # species sharing a group share most of their signature
        group_dev = {g: smooth_dev() for g in sorted(set(cfg.spectral_groups))}
        sig = np.array([
            base + cfg.group_contrast * group_dev[g] + cfg.species_contrast * smooth_dev()
            for g in cfg.spectral_groups
        ])
    ground = 0.15 + 0.1 * t
    return sig, ground


def _smooth_offsets(rng, n: int, bands: int, amplitude: float) -> np.ndarray:
    t = np.linspace(0.0, 1.0, bands)
    amp = rng.normal(0, 1, (n, 2))
    phase = rng.uniform(0, 2 * np.pi, (n, 2))
    return amplitude * (
        amp[:, :1] * np.sin(np.pi * t + phase[:, :1]) + amp[:, 1:] * np.sin(2 * np.pi * t + phase[:, 1:])
    ) / np.sqrt(2)


def _als_features(chm: np.ndarray, n_bands: int) -> tuple[np.ndarray, list[str]]:
    def local_std(a, size):
        m = ndimage.uniform_filter(a, size, mode="nearest")
        m2 = ndimage.uniform_filter(a * a, size, mode="nearest")
        return np.sqrt(np.maximum(m2 - m * m, 0.0))

    stats = [
        ("mean3", lambda a: ndimage.uniform_filter(a, 3, mode="nearest")),
        ("std3", lambda a: local_std(a, 3)),
        ("max3", lambda a: ndimage.maximum_filter(a, 3, mode="nearest")),
        ("height", lambda a: a),
        ("mean5", lambda a: ndimage.uniform_filter(a, 5, mode="nearest")),
        ("std5", lambda a: local_std(a, 5)),
        ("max5", lambda a: ndimage.maximum_filter(a, 5, mode="nearest")),
        ("min3", lambda a: ndimage.minimum_filter(a, 3, mode="nearest")),
    ]
    out, names = [], []
    for i in range(n_bands):
        name, fn = stats[i % len(stats)]
        size_scale = 1 + i // len(stats)
        a = chm if size_scale == 1 else ndimage.uniform_filter(chm, 2 * size_scale + 1, mode="nearest")
        out.append(fn(a))
        names.append(name if size_scale == 1 else f"{name}_s{size_scale}")
    return np.stack(out) if out else np.zeros((0,) + chm.shape), names


def generate_scene(cfg: SceneConfig) -> Scene:
    """Build the HSI cube, ALS cube, CHM and ground truth of one scene.

    Deterministic for a fixed ``cfg.seed``.
    """
    rng = np.random.default_rng(cfg.seed)
    cohab = resolve_missing(cfg.cohab(), 0.0)
    k = len(cfg.species)

    # per-species structure: typical height and crown size
    h_lo, h_hi = cfg.height_range
    r_lo, r_hi = cfg.crown_radius_range
    sp_height = rng.uniform(h_lo, h_hi, k)
    sp_radius = rng.uniform(r_lo, r_hi, k)
    sig, ground_sig = _signatures(cfg, rng)

    xs, ys, sp = _place_trees(cfg, rng, cohab.values)
    n = len(xs)
    heights = np.clip(sp_height[sp] + rng.normal(0, 0.1 * (h_hi - h_lo) + 0.5, n), h_lo, h_hi)
    radii = np.clip(sp_radius[sp] + rng.normal(0, 0.15 * (r_hi - r_lo) + 0.1, n), r_lo, r_hi)
    tree_sig = sig[sp] + _smooth_offsets(rng, n, cfg.spectral_bands, cfg.tree_variability)

    H, W = cfg.height, cfg.width
    chm = np.full((H, W), GROUND_HEIGHT)
    best = np.full((H, W), -np.inf)
    tree_map = np.full((H, W), -1, dtype=np.int64)
    weight_sum = np.full((H, W), 0.05)  # ground share
    spec_sum = 0.05 * np.broadcast_to(ground_sig[:, None, None], (cfg.spectral_bands, H, W)).copy()
    for t in range(n):
        s_t = radii[t] / 2.0
        reach = int(np.ceil(3 * s_t))
        y0, y1 = max(0, ys[t] - reach), min(H, ys[t] + reach + 1)
        x0, x1 = max(0, xs[t] - reach), min(W, xs[t] + reach + 1)
        yy, xx = np.mgrid[y0:y1, x0:x1]
        d2 = (xx - xs[t]) ** 2 + (yy - ys[t]) ** 2
        a = np.exp(-d2 / (2 * s_t * s_t))
        bump = GROUND_HEIGHT + (heights[t] - GROUND_HEIGHT) * a
        chm[y0:y1, x0:x1] = np.maximum(chm[y0:y1, x0:x1], bump)
        inside = (d2 <= radii[t] ** 2) & (bump > best[y0:y1, x0:x1])
        best[y0:y1, x0:x1] = np.where(inside, bump, best[y0:y1, x0:x1])
        tree_map[y0:y1, x0:x1] = np.where(inside, t, tree_map[y0:y1, x0:x1])
        weight_sum[y0:y1, x0:x1] += a
        spec_sum[:, y0:y1, x0:x1] += a[None] * tree_sig[t][:, None, None]
    spectra = spec_sum / weight_sum[None] + rng.normal(0, cfg.noise_sigma, spec_sum.shape)
    species_map = np.where(tree_map >= 0, sp[np.maximum(tree_map, 0)], UNLABELED)

    als, als_names = _als_features(chm, cfg.als_bands)
    als = als + rng.normal(0, cfg.als_noise_sigma, als.shape)

    # labeled subset -> circle polygons, kept inside the crown and away from neighbours
    n_lab = max(1, int(round(cfg.label_fraction * n)))
    chosen = np.sort(rng.choice(n, n_lab, replace=False))
    if n > 1:
        nn_dist = cKDTree(np.c_[xs, ys]).query(np.c_[xs, ys], k=2)[0][:, 1]
    else:
        nn_dist = np.full(1, np.inf)
    polygons = tuple(
        PolygonLabel(
            polygon_id=int(i),
            center_x=float(xs[t]),
            center_y=float(ys[t]),
            radius=float(max(1.0, min(0.8 * radii[t], 0.5 * nn_dist[t]))),
            label=int(sp[t]),
        )
        for i, t in enumerate(chosen)
    )
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        splits = split_by_polygon(polygons, cfg.split_fractions, cfg.seed)

    truth = GroundTruth(
        species=cfg.species,
        tree_x=xs, tree_y=ys, tree_species=sp, tree_radius=radii, tree_height=heights,
        species_map=species_map, tree_map=tree_map,
        polygons=polygons, splits=splits, gt_cohab=cohab,
    )
    band_names = tuple(f"b{i:03d}" for i in range(cfg.spectral_bands))
    return Scene(
        hsi=RasterCube(spectra.astype(np.float32), name="hsi", band_names=band_names),
        als=RasterCube(als.astype(np.float32), name="als", band_names=tuple(als_names)),
        chm=RasterCube(chm[None].astype(np.float32), name="chm", band_names=("chm",)),
        truth=truth,
        config=cfg,
    )


def write_scene(scene: Scene, out_dir) -> Path:
    """Write a scene in the on-disk layout read by the pipeline."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_cube(scene.hsi, out / "hsi")
    save_cube(scene.als, out / "als")
    save_cube(scene.chm, out / "chm")
    save_cube(label_cube(scene.truth.species_map, "species_map"), out / "species_map")
    write_polygons(scene.truth.polygons, out / "polygons.csv")
    write_splits(scene.truth.splits, out / "splits.csv")
    write_classes(scene.truth.species, out / "classes.txt")
    save_matrix(scene.truth.gt_cohab, out / "cohabitation.csv")
    (out / "ground_truth.json").write_text(json.dumps(scene.truth.to_dict(), indent=1))
    return out


def measure_empirical_cohabitation(truth: GroundTruth, radius: float) -> np.ndarray:
    """Observed/expected ratio of species pairs within ``radius``.

    Entry (a, b) counts ordered tree pairs of species a and b closer than
    ``radius``, divided by the count expected if the same number of close
    pairs were spread over species at random (n_a * n_b possible pairs, or
    n_a * (n_a - 1) on the diagonal). 1 means no association.
    """
    k = len(truth.species)
    n = truth.n_trees
    if n < 2:
        raise ValidationError("need at least two trees")
    pts = np.c_[truth.tree_x, truth.tree_y].astype(np.float64)
    pairs = cKDTree(pts).query_pairs(radius, output_type="ndarray")
    s = truth.tree_species
    counts = np.zeros((k, k))
    if len(pairs):
        np.add.at(counts, (s[pairs[:, 0]], s[pairs[:, 1]]), 1)
        np.add.at(counts, (s[pairs[:, 1]], s[pairs[:, 0]]), 1)
    n_s = np.bincount(s, minlength=k).astype(np.float64)
    possible = np.outer(n_s, n_s) - np.diag(n_s)
    density = 2 * len(pairs) / (n * (n - 1))
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(possible > 0, counts / (possible * density), 0.0) if density > 0 else np.zeros((k, k))
