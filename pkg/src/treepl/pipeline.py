"""Two-pass experiment driver, class maps and run comparison.

A run trains the dual-stream network on the training polygons (DSNN),
pseudo-labels treetop candidates around the training pixels, retrains a
freshly initialised network on the union (DSNN+P) and scores both on the
test polygons. The test split is only read once both models are trained;
:class:`~treepl.geodata.AuditedSamples` keeps the evidence.
"""

from __future__ import annotations

import hashlib
import json
import logging
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import dsnn
from .cohabitation import CohabitationMatrix, ScaledPrior, build_prior, load_matrix
from .errors import TreeplError, ValidationError
from .geodata import (
    UNLABELED,
    AuditedSamples,
    PolygonLabel,
    RasterCube,
    SampleSet,
    Standardizer,
    cube_labels,
    extract_samples,
    fit_standardizer,
    load_cube,
    read_classes,
    read_polygons,
    read_splits,
    split_by_polygon,
)
from .metrics import class_area_fractions, evaluate, jaccard_maps
from .pseudolabel import FusionConfig, augmented_arrays, build_augmented_set
from .synthscene import Scene
from .treetops import TreetopConfig, find_treetops

logger = logging.getLogger(__name__)

MANIFEST_SCHEMA = "treepl.manifest/1"


class StageError(TreeplError):
    """A run failed; ``manifest`` holds the runs completed before it."""

    def __init__(self, stage: str, run: int, cause: Exception):
        super().__init__(f"run {run}, stage {stage!r}: {type(cause).__name__}: {cause}")
        self.stage = stage
        self.run = run
        self.cause = cause
        self.exit_code = getattr(cause, "exit_code", 1)
        self.manifest: dict | None = None


@dataclass
class SceneData:
    """Everything one experiment reads: cubes, labels, classes and prior."""

    hsi: RasterCube
    als: RasterCube
    chm: RasterCube
    classes: tuple[str, ...]
    polygons: tuple[PolygonLabel, ...]
    splits: dict
    cohabitation: CohabitationMatrix | None = None
    species_map: np.ndarray | None = None  # full ground truth, synthetic scenes only
    hashes: dict = field(default_factory=dict)

    @classmethod
    def from_scene(cls, scene: Scene) -> "SceneData":
        data = cls(scene.hsi, scene.als, scene.chm, scene.truth.species, scene.truth.polygons,
                   dict(scene.truth.splits), scene.truth.gt_cohab, scene.truth.species_map)
        data.hashes = {
            name: hashlib.sha256(c.values.tobytes()).hexdigest()
            for name, c in (("hsi", scene.hsi), ("als", scene.als), ("chm", scene.chm))
        }
        return data

    @classmethod
    def from_dir(cls, path, cohabitation=None, split_seed: int = 0,
                 split_fractions=(0.66, 0.23, 0.11)) -> "SceneData":
        d = Path(path)
        polygons = tuple(read_polygons(d / "polygons.csv"))
        if (d / "splits.csv").exists():
            splits = read_splits(d / "splits.csv")
        else:
            splits = split_by_polygon(polygons, split_fractions, split_seed)
        cohab_path = Path(cohabitation) if cohabitation else d / "cohabitation.csv"
        truth_path = d / "species_map.f32"
        data = cls(
            hsi=load_cube(d / "hsi"),
            als=load_cube(d / "als"),
            chm=load_cube(d / "chm"),
            classes=tuple(read_classes(d / "classes.txt")),
            polygons=polygons,
            splits=splits,
            cohabitation=load_matrix(cohab_path) if cohab_path.exists() else None,
            species_map=cube_labels(load_cube(truth_path)) if truth_path.exists() else None,
        )
        data.hashes = {
            p.name: hashlib.sha256(p.read_bytes()).hexdigest()
            for p in sorted(d.iterdir())
            if p.is_file() and p.suffix in (".f32", ".json", ".csv", ".txt")
        }
        if cohab_path.exists() and cohab_path.parent != d:
            data.hashes[str(cohab_path)] = hashlib.sha256(cohab_path.read_bytes()).hexdigest()
        return data

    @property
    def shape(self) -> tuple[int, int]:
        return self.hsi.width, self.hsi.height


@dataclass(frozen=True)
class ExperimentConfig:
    network: dict = field(default_factory=dict)  # NetworkConfig overrides
    treetops: TreetopConfig = TreetopConfig()
    fusion: FusionConfig = FusionConfig()
    n_runs: int = 5
    base_seed: int = 0
    prior: str = "cohabitation"  # or "uniform"
    missing_as: float = 0.0

    def __post_init__(self):
        if self.n_runs < 1:
            raise ValidationError("n_runs must be >= 1")
        if self.prior not in ("cohabitation", "uniform"):
            raise ValidationError("prior must be 'cohabitation' or 'uniform'")

    def to_dict(self) -> dict:
        return {
            "network": dict(self.network),
            "treetops": asdict(self.treetops),
            "fusion": asdict(self.fusion),
            "n_runs": self.n_runs,
            "base_seed": self.base_seed,
            "prior": self.prior,
            "missing_as": self.missing_as,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        return cls(
            network=dict(d.get("network", {})),
            treetops=TreetopConfig(**d.get("treetops", {})),
            fusion=FusionConfig(**d.get("fusion", {})),
            n_runs=int(d.get("n_runs", 5)),
            base_seed=int(d.get("base_seed", 0)),
            prior=d.get("prior", "cohabitation"),
            missing_as=float(d.get("missing_as", 0.0)),
        )


def benchmark_experiment(n_runs: int = 5, base_seed: int = 0, **kw) -> "ExperimentConfig":
    """Settings sized for the benchmark scene: 80 epochs with a larger step
    and smaller batches than the full-size defaults, and a treetop floor
    above the 5 m ground so flat ground is never a candidate."""
    return ExperimentConfig(
        network=dict(epochs=80, lr=1e-3, batch_size=64),
        treetops=TreetopConfig(h_min=8.0),
        n_runs=n_runs, base_seed=base_seed, **kw,
    )


def network_config(data: SceneData, overrides: dict, seed: int) -> dsnn.NetworkConfig:
    kw = {k: tuple(v) if isinstance(v, list) else v for k, v in overrides.items()}
    kw["seed"] = seed
    return dsnn.NetworkConfig.for_data(data.hsi.bands, data.als.bands, len(data.classes), **kw)


@dataclass
class FittedModel:
    """A trained network together with the feature scaling it expects."""

    net: dsnn.DualStreamNet
    hsi_scaler: Standardizer
    als_scaler: Standardizer

    def proba(self, hsi: np.ndarray, als: np.ndarray) -> np.ndarray:
        return dsnn.predict_proba(self.net, self.hsi_scaler.apply(hsi), self.als_scaler.apply(als))

    def save(self, path) -> None:
        dsnn.save_model(self.net, path, {"hsi_scaler": self.hsi_scaler.to_dict(),
                                         "als_scaler": self.als_scaler.to_dict()})

    @classmethod
    def load(cls, path) -> "FittedModel":
        net, extra = dsnn.load_model(path)
        return cls(net, Standardizer.from_dict(extra["hsi_scaler"]), Standardizer.from_dict(extra["als_scaler"]))


def fit_model(train: SampleSet, val: SampleSet | None, cfg: dsnn.NetworkConfig,
              scalers: tuple[Standardizer, Standardizer] | None = None):
    """Standardize, initialise from ``cfg.seed`` and train."""
    if len(train) == 0:
        raise ValidationError("empty training set")
    hs, als = scalers or (fit_standardizer(train.hsi), fit_standardizer(train.als))
    net = dsnn.init_model(cfg)
    val_set = None
    if val is not None and len(val):
        val_set = (hs.apply(val.hsi), als.apply(val.als), val.label)
    history = dsnn.train(net, (hs.apply(train.hsi), als.apply(train.als), train.label), val_set, cfg)
    return FittedModel(net, hs, als), history


def _pixel_samples(data: SceneData, xs, ys, labels, split="train") -> SampleSet:
    xs = np.asarray(xs, dtype=np.int64)
    ys = np.asarray(ys, dtype=np.int64)
    return SampleSet(
        x=xs, y=ys,
        hsi=data.hsi.pixel_vectors(xs, ys), als=data.als.pixel_vectors(xs, ys),
        label=np.asarray(labels, dtype=np.int64),
        polygon_id=np.full(len(xs), UNLABELED, dtype=np.int64),
        split=np.full(len(xs), split, dtype="<U10"),
    )


def make_prior(data: SceneData, cfg: ExperimentConfig) -> ScaledPrior:
    if cfg.prior == "uniform":
        return ScaledPrior.uniform(data.classes)
    if data.cohabitation is None:
        raise ValidationError("no cohabitation matrix available; supply one or use prior='uniform'")
    if data.cohabitation.species != data.classes:
        raise ValidationError("cohabitation species do not match the class list")
    return build_prior(data.cohabitation, cfg.fusion.delta_scale, cfg.missing_as)


def pseudo_label_stage(data: SceneData, model: FittedModel, train: SampleSet, prior: ScaledPrior,
                       cfg: ExperimentConfig, seed: int):
    """Treetops -> first-pass probabilities -> augmented pixel list."""
    valid = data.hsi.valid_mask() & data.als.valid_mask()
    cands = find_treetops(data.chm, cfg.treetops)
    keep = valid[cands.y, cands.x]
    cx, cy = cands.x[keep], cands.y[keep]
    if len(cx):
        probs = model.proba(data.hsi.pixel_vectors(cx, cy), data.als.pixel_vectors(cx, cy))
    else:
        probs = np.zeros((0, len(data.classes)))
    parent_xy = np.c_[train.x, train.y]
    aug = build_augmented_set(
        np.c_[cx, cy], probs, parent_xy, train.label, prior, cfg.fusion,
        training_coords=parent_xy, shape=data.shape, seed=seed,
    )
    # expanded blocks may reach nodata pixels
    aug = [p for p in aug if valid[p.y, p.x]]
    return aug, len(cx)


def _summary(values: Sequence[float]) -> dict:
    a = np.asarray(values, dtype=np.float64)
    return {"mean": float(a.mean()), "std": float(a.std()), "n": int(len(a))}


def run_two_pass(data: SceneData, cfg: ExperimentConfig, keep_models: bool = False) -> dict:
    """Run ``cfg.n_runs`` two-pass experiments and return the manifest dict.

    Run ``r`` uses seed ``base_seed + r`` for both networks (so they start
    from identical weights) and for the pseudo-label collision shuffle.
    """
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        samples = extract_samples(data.hsi, data.als, data.polygons, data.splits)
    notes = [str(w.message) for w in caught]
    runs, models = [], []
    for r in range(cfg.n_runs):
        seed = cfg.base_seed + r
        audited = AuditedSamples(samples)
        stage = "load"
        try:
            train, val = audited.get("train"), audited.get("validation")
            net_cfg = network_config(data, cfg.network, seed)
            stage = "train_dsnn"
            first, hist1 = fit_model(train, val, net_cfg)
            stage = "pseudo_label"
            prior = make_prior(data, cfg)
            aug, n_cands = pseudo_label_stage(data, first, train, prior, cfg, seed)
            stage = "train_dsnn_p"
            ax, ay, al = augmented_arrays(aug)
            union = SampleSet.concat([train, _pixel_samples(data, ax, ay, al)]) if aug else train
            second, hist2 = fit_model(union, val, net_cfg, (first.hsi_scaler, first.als_scaler))
            stage = "evaluate"
            test_reads_before = audited.reads("test")
            test = audited.get("test")
            rec = {
                "run": r,
                "seed": seed,
                "n_train_pixels": len(train),
                "n_candidates": n_cands,
                "n_augmented": len(aug),
                "test_reads_before_evaluation": test_reads_before,
            }
            if data.species_map is not None:
                rec["pseudo_label_precision"] = pseudo_label_precision(aug, data.species_map)
            for name, model, hist in (("dsnn", first, hist1), ("dsnn_p", second, hist2)):
                pred = model.proba(test.hsi, test.als).argmax(axis=1) if len(test) else np.zeros(0, int)
                rep = evaluate(test.label, pred, data.classes) if len(test) else None
                rec[name] = {
                    "test": rep.to_dict() if rep else None,
                    "final_train_loss": hist[-1]["train_loss"],
                    "final_val_macro_f1": hist[-1].get("val_macro_f1"),
                }
        except Exception as exc:
            err = StageError(stage, r, exc)
            logger.error("%s", err)
            runs.append({"run": r, "seed": seed, "failed_stage": stage, "error": str(err)})
            err.manifest = _manifest(data, cfg, notes, runs)
            raise err from exc
        runs.append(rec)
        if keep_models:
            models.append((first, second))

    manifest = _manifest(data, cfg, notes, runs)
    if keep_models:
        manifest["_models"] = models
    return manifest


def _manifest(data: SceneData, cfg: ExperimentConfig, notes: list, runs: list) -> dict:
    return {
        "schema": MANIFEST_SCHEMA,
        "config": cfg.to_dict(),
        "classes": list(data.classes),
        "seeds": [cfg.base_seed + r for r in range(cfg.n_runs)],
        "inputs": dict(sorted(data.hashes.items())),
        "notes": notes,
        "runs": runs,
        "aggregate": aggregate(runs),
    }


def pseudo_label_precision(aug, species_map: np.ndarray) -> float | None:
    if not aug:
        return None
    xs, ys, ls = augmented_arrays(aug)
    return float(np.mean(species_map[ys, xs] == ls))


def aggregate(runs: Sequence[dict]) -> dict:
    ok = [r for r in runs if "dsnn" in r and r["dsnn"]["test"] is not None]
    if not ok:
        return {}
    out = {}
    for name in ("dsnn", "dsnn_p"):
        out[name] = {
            key: _summary([r[name]["test"][key] for r in ok])
            for key in ("macro_f1", "accuracy", "balanced_accuracy")
        }
        f1 = np.array([r[name]["test"]["f1"] for r in ok], dtype=np.float64)
        out[name]["per_class_f1_mean"] = _column_means(f1)
    out["macro_f1_gain"] = _summary([r["dsnn_p"]["test"]["macro_f1"] - r["dsnn"]["test"]["macro_f1"] for r in ok])
    out["n_augmented"] = _summary([r["n_augmented"] for r in ok])
    prec = [r["pseudo_label_precision"] for r in ok if r.get("pseudo_label_precision") is not None]
    if prec:
        out["pseudo_label_precision"] = _summary(prec)
    return out


def _column_means(a: np.ndarray) -> list:
    # mean over finite entries per column; None where a class never had support
    out = []
    for col in a.T:
        col = col[np.isfinite(col)]
        out.append(float(col.mean()) if len(col) else None)
    return out


def metrics_json(manifest: dict) -> str:
    """Canonical JSON of the metric part of a manifest (no timings, no paths)."""
    keep = {k: manifest[k] for k in ("schema", "config", "classes", "seeds", "runs", "aggregate")}
    return json.dumps(_jsonable(keep), indent=2, sort_keys=True, allow_nan=True)


def _jsonable(o):
    if isinstance(o, dict):
        return {str(k): _jsonable(v) for k, v in o.items() if not str(k).startswith("_")}
    if isinstance(o, (list, tuple)):
        return [_jsonable(v) for v in o]
    if isinstance(o, np.generic):
        return o.item()
    return o


def save_manifest(manifest: dict, path) -> None:
    Path(path).write_text(json.dumps(_jsonable(manifest), indent=2, sort_keys=True))


def load_manifest(path) -> dict:
    return json.loads(Path(path).read_text())


# maps ---------------------------------------------------------------------------

DEFAULT_PALETTE = [
    (31, 119, 180), (255, 127, 14), (44, 160, 44), (214, 39, 40), (148, 103, 189), (140, 86, 75),
    (227, 119, 194), (127, 127, 127), (188, 189, 34), (23, 190, 207), (174, 199, 232), (255, 187, 120),
    (152, 223, 138), (255, 152, 150), (197, 176, 213), (196, 156, 148), (247, 182, 210), (199, 199, 199),
]


def predict_map(model: FittedModel, hsi: RasterCube, als: RasterCube, mask: np.ndarray | None = None) -> np.ndarray:
    """Per-pixel argmax class; ``UNLABELED`` at nodata or masked-out pixels."""
    valid = hsi.valid_mask() & als.valid_mask()
    if mask is not None:
        valid &= mask
    ys, xs = np.nonzero(valid)
    out = np.full((hsi.height, hsi.width), UNLABELED, dtype=np.int64)
    if len(xs):
        out[ys, xs] = model.proba(hsi.pixel_vectors(xs, ys), als.pixel_vectors(xs, ys)).argmax(axis=1)
    return out


def map_to_png(class_map: np.ndarray, palette, path, legend: Sequence[str] = ()) -> None:
    """RGBA PNG of a class map; unlabeled pixels are transparent. A legend
    strip of palette swatches is appended below the map when ``legend`` is
    given."""
    from PIL import Image

    pal = np.asarray(palette, dtype=np.uint8)
    if class_map.max(initial=UNLABELED) >= len(pal):
        raise ValidationError(f"palette has {len(pal)} colours but the map uses class {class_map.max()}")
    if legend and len(legend) != len(pal):
        raise ValidationError("legend length differs from palette size")
    h, w = class_map.shape
    rgba = np.zeros((h, w, 4), dtype=np.uint8)
    lab = class_map != UNLABELED
    rgba[lab, :3] = pal[class_map[lab]]
    rgba[lab, 3] = 255
    if legend:
        sw = max(1, w // len(pal))
        strip = np.zeros((max(4, sw), w, 4), dtype=np.uint8)
        for i in range(len(pal)):
            strip[:, i * sw : (i + 1) * sw, :3] = pal[i]
            strip[:, i * sw : (i + 1) * sw, 3] = 255
        rgba = np.concatenate([rgba, strip], axis=0)
    Image.fromarray(rgba, "RGBA").save(path)


def render_map(model: FittedModel, hsi: RasterCube, als: RasterCube, palette=None, png_path=None,
               mask=None, legend: Sequence[str] = ()) -> np.ndarray:
    n_classes = model.net.cfg.n_classes
    palette = DEFAULT_PALETTE[:n_classes] if palette is None else palette
    if len(palette) != n_classes:
        raise ValidationError(f"palette has {len(palette)} entries for {n_classes} classes")
    class_map = predict_map(model, hsi, als, mask)
    if png_path is not None:
        map_to_png(class_map, palette, png_path, legend)
    return class_map


def canopy_mask(chm: RasterCube, threshold: float = 0.5) -> np.ndarray:
    """Pixels standing at least ``threshold`` m above the lowest CHM value."""
    v = chm.values[0]
    return np.nan_to_num(v, nan=-np.inf) >= np.nanmin(v) + threshold


# comparison ---------------------------------------------------------------------


def compare_runs(a: dict, b: dict, map_a: np.ndarray | None = None, map_b: np.ndarray | None = None,
                 model: str = "dsnn_p", model_b: str | None = None) -> dict:
    """Differences ``b - a`` in per-class F1 and macro F1 for one model key
    of two manifests, plus map agreement when class maps are supplied."""
    if list(a["classes"]) != list(b["classes"]):
        raise ValidationError("manifests use different class lists")
    model_b = model_b or model
    ra = [r[model]["test"] for r in a["runs"] if r.get(model) and r[model]["test"]]
    rb = [r[model_b]["test"] for r in b["runs"] if r.get(model_b) and r[model_b]["test"]]
    fa = _column_means(np.array([r["f1"] for r in ra], dtype=np.float64))
    fb = _column_means(np.array([r["f1"] for r in rb], dtype=np.float64))
    ma = np.array([r["macro_f1"] for r in ra])
    mb = np.array([r["macro_f1"] for r in rb])
    out = {
        "classes": list(a["classes"]),
        # None where either side never saw the class in a test split
        "per_class_f1_delta": [None if va is None or vb is None else vb - va for va, vb in zip(fa, fb)],
        "macro_f1_a": {"mean": float(ma.mean()), "std": float(ma.std())},
        "macro_f1_b": {"mean": float(mb.mean()), "std": float(mb.std())},
        "macro_f1_delta": float(mb.mean() - ma.mean()),
    }
    if len(ma) == len(mb):
        out["macro_f1_delta_std"] = float((mb - ma).std())
    if map_a is not None and map_b is not None:
        k = len(a["classes"])
        out["jaccard"] = jaccard_maps(map_a, map_b)
        out["area_fraction_delta"] = [float(v) for v in class_area_fractions(map_b, k) - class_area_fractions(map_a, k)]
    return out
