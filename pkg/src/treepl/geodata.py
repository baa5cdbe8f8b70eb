"""Raster cubes, polygon labels, polygon-level splits and feature scaling.

Cubes live on disk as a raw little-endian float32 band-sequential payload
(``<name>.f32``) next to a JSON sidecar (``<name>.json``). In memory the
values are a ``(bands, height, width)`` array, which is the same BSQ order.
"""

from __future__ import annotations

import csv
import json
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import FormatError, ValidationError


UNLABELED = -1
SPLITS = ("train", "validation", "test")


@dataclass(frozen=True, eq=False)
class RasterCube:
    values: np.ndarray
    nodata: float = float("nan")
    name: str = ""
    band_names: tuple[str, ...] = ()

    def __post_init__(self):
        v = np.asarray(self.values, dtype="<f4")
        if v.ndim == 2:
            v = v[None]
        if v.ndim != 3:
            raise ValidationError(f"cube values must be 3-D (bands, height, width), got shape {v.shape}")
        object.__setattr__(self, "values", v)
        if self.band_names and len(self.band_names) != v.shape[0]:
            raise ValidationError("band_names length does not match band count")
        object.__setattr__(self, "band_names", tuple(self.band_names))

    @property
    def bands(self) -> int:
        return self.values.shape[0]

    @property
    def height(self) -> int:
        return self.values.shape[1]

    @property
    def width(self) -> int:
        return self.values.shape[2]

    def valid_mask(self) -> np.ndarray:
        """Pixels where every band differs from nodata, shape (height, width)."""
        if math.isnan(self.nodata):
            bad = np.isnan(self.values)
        else:
            bad = self.values == self.nodata
        return ~bad.any(axis=0)

    def pixel_vectors(self, xs, ys) -> np.ndarray:
        """Band vectors at integer pixel coordinates, shape (n, bands)."""
        return self.values[:, np.asarray(ys), np.asarray(xs)].T.copy()

    def __eq__(self, other):
        if not isinstance(other, RasterCube):
            return NotImplemented
        return (
            self.values.shape == other.values.shape
            and self.values.tobytes() == other.values.tobytes()
            and _same_float(self.nodata, other.nodata)
            and self.name == other.name
            and self.band_names == other.band_names
        )


def _same_float(a: float, b: float) -> bool:
    return (math.isnan(a) and math.isnan(b)) or a == b


def _cube_paths(path) -> tuple[Path, Path]:
    p = Path(path)
    if p.suffix in (".f32", ".json"):
        p = p.with_suffix("")
    return p.with_name(p.name + ".f32"), p.with_name(p.name + ".json")


def load_cube(path) -> RasterCube:
    """Read a cube from ``<name>.f32`` and its ``<name>.json`` header.

    ``path`` may name either file or the common stem.
    """
    data_path, header_path = _cube_paths(path)
    with open(header_path) as f:
        header = json.load(f)
    dtype = header.get("dtype", "f32")
    layout = header.get("layout", "bsq")
    if dtype != "f32" or layout != "bsq":
        raise FormatError(f"unsupported format dtype={dtype!r} layout={layout!r} in {header_path}")
    try:
        w, h, b = int(header["width"]), int(header["height"]), int(header["bands"])
    except KeyError as exc:
        raise FormatError(f"header {header_path} lacks field {exc}") from None
    payload = data_path.read_bytes()
    expected = w * h * b * 4
    if len(payload) != expected:
        raise FormatError(
            f"{data_path}: expected {expected} bytes for {w}x{h}x{b} float32, found {len(payload)}"
        )
    values = np.frombuffer(payload, dtype="<f4").reshape(b, h, w).copy()
    nodata = header.get("nodata")
    nodata = float("nan") if nodata is None else float(nodata)
    return RasterCube(
        values,
        nodata=nodata,
        name=header.get("name", data_path.stem),
        band_names=tuple(header.get("band_names", ())),
    )


def save_cube(cube: RasterCube, path) -> None:
    data_path, header_path = _cube_paths(path)
    data_path.parent.mkdir(parents=True, exist_ok=True)
    header = {
        "width": cube.width,
        "height": cube.height,
        "bands": cube.bands,
        "dtype": "f32",
        "layout": "bsq",
        # JSON has no NaN literal; null stands for NaN nodata
        "nodata": None if math.isnan(cube.nodata) else cube.nodata,
        "name": cube.name,
        "band_names": list(cube.band_names),
    }
    data_path.write_bytes(np.ascontiguousarray(cube.values, dtype="<f4").tobytes())
    with open(header_path, "w") as f:
        json.dump(header, f, indent=2)


def label_cube(labels: np.ndarray, name: str = "labels") -> RasterCube:
    """Wrap an integer label raster as a 1-band cube, unlabeled pixels as NaN."""
    v = np.where(labels == UNLABELED, np.nan, labels).astype("<f4")
    return RasterCube(v[None], name=name)


def cube_labels(cube: RasterCube) -> np.ndarray:
    """Inverse of :func:`label_cube`."""
    if cube.bands != 1:
        raise ValidationError("a label raster must have exactly one band")
    v = cube.values[0]
    out = np.full(v.shape, UNLABELED, dtype=np.int64)
    ok = cube.valid_mask()
    out[ok] = v[ok].astype(np.int64)
    return out


# polygons -------------------------------------------------------------------


@dataclass(frozen=True)
class PolygonLabel:
    polygon_id: int
    center_x: float
    center_y: float
    radius: float
    label: int

    def __post_init__(self):
        if not self.radius > 0:
            raise ValidationError(f"polygon {self.polygon_id}: radius must be positive, got {self.radius}")


def read_polygons(path) -> list[PolygonLabel]:
    with open(path, newline="") as f:
        reader = csv.DictReader(f)
        missing = {"polygon_id", "center_x", "center_y", "radius", "label"} - set(reader.fieldnames or ())
        if missing:
            raise FormatError(f"{path}: missing columns {sorted(missing)}")
        return [
            PolygonLabel(
                int(row["polygon_id"]),
                float(row["center_x"]),
                float(row["center_y"]),
                float(row["radius"]),
                int(row["label"]),
            )
            for row in reader
        ]


def write_polygons(polygons: Iterable[PolygonLabel], path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["polygon_id", "center_x", "center_y", "radius", "label"])
        for p in polygons:
            w.writerow([p.polygon_id, repr(float(p.center_x)), repr(float(p.center_y)), repr(float(p.radius)), p.label])


def read_classes(path) -> list[str]:
    with open(path) as f:
        return [line.strip() for line in f if line.strip()]


def write_classes(classes: Sequence[str], path) -> None:
    with open(path, "w") as f:
        f.write("".join(f"{c}\n" for c in classes))


def rasterize_polygons(
    polygons: Sequence[PolygonLabel], width: int, height: int, return_ids: bool = False
):
    """Burn circle polygons into a label raster.

    A pixel takes a polygon's label when its center lies within ``radius`` of
    the polygon center. Where circles overlap, the smallest polygon_id wins.
    Unlabeled pixels hold ``UNLABELED``. With ``return_ids`` the polygon id
    raster (``UNLABELED`` outside polygons) is returned as well.
    """
    labels = np.full((height, width), UNLABELED, dtype=np.int64)
    ids = np.full((height, width), UNLABELED, dtype=np.int64)
    # descending id so the smallest id is painted last
    for p in sorted(polygons, key=lambda q: q.polygon_id, reverse=True):
        r = p.radius
        x0, x1 = max(0, math.floor(p.center_x - r)), min(width - 1, math.ceil(p.center_x + r))
        y0, y1 = max(0, math.floor(p.center_y - r)), min(height - 1, math.ceil(p.center_y + r))
        if x0 > x1 or y0 > y1:
            continue
        yy, xx = np.mgrid[y0 : y1 + 1, x0 : x1 + 1]
        inside = (xx - p.center_x) ** 2 + (yy - p.center_y) ** 2 <= r * r
        labels[y0 : y1 + 1, x0 : x1 + 1][inside] = p.label
        ids[y0 : y1 + 1, x0 : x1 + 1][inside] = p.polygon_id
    if return_ids:
        return labels, ids
    return labels


class SmallClassWarning(UserWarning):
    pass


def _apportion(n: int, fractions: Sequence[float]) -> list[int]:
    # largest-remainder rounding; ties go to the earlier split
    raw = [n * f for f in fractions]
    counts = [math.floor(r + 1e-9) for r in raw]
    order = sorted(range(len(raw)), key=lambda i: (-(raw[i] - counts[i]), i))
    for i in order[: n - sum(counts)]:
        counts[i] += 1
    return counts


def split_by_polygon(
    polygons: Sequence[PolygonLabel],
    fractions: Sequence[float] = (0.66, 0.23, 0.11),
    seed: int = 0,
) -> dict[int, str]:
    """Assign every polygon to train/validation/test, stratified by class.

    Each class's polygon ids are sorted, shuffled with a generator seeded by
    ``seed`` (classes visited in ascending label order, one shared generator)
    and cut according to ``fractions``. Classes with fewer than 3 polygons go
    wholly to train and raise a :class:`SmallClassWarning`.
    """
    fractions = tuple(float(f) for f in fractions)
    if len(fractions) != 3 or any(f < 0 for f in fractions) or abs(sum(fractions) - 1) > 1e-9:
        raise ValidationError(f"split fractions must be three non-negative numbers summing to 1, got {fractions}")
    by_class: dict[int, list[int]] = {}
    for p in polygons:
        by_class.setdefault(p.label, []).append(p.polygon_id)
    rng = np.random.default_rng(seed)
    out: dict[int, str] = {}
    for label in sorted(by_class):
        ids = sorted(by_class[label])
        if len(ids) < 3:
            warnings.warn(
                f"class {label} has only {len(ids)} polygon(s); placed entirely in train",
                SmallClassWarning,
                stacklevel=2,
            )
            out.update((i, "train") for i in ids)
            continue
        order = [ids[k] for k in rng.permutation(len(ids))]
        n_train, n_val, _ = _apportion(len(ids), fractions)
        for k, pid in enumerate(order):
            out[pid] = "train" if k < n_train else "validation" if k < n_train + n_val else "test"
    return out


def read_splits(path) -> dict[int, str]:
    with open(path, newline="") as f:
        return {int(r["polygon_id"]): r["split"] for r in csv.DictReader(f)}


def write_splits(splits: dict[int, str], path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["polygon_id", "split"])
        for pid in sorted(splits):
            w.writerow([pid, splits[pid]])


# samples --------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class SampleSet:
    """Columnar set of labeled pixels (one row per pixel)."""

    x: np.ndarray
    y: np.ndarray
    hsi: np.ndarray
    als: np.ndarray
    label: np.ndarray
    polygon_id: np.ndarray
    split: np.ndarray

    def __len__(self):
        return len(self.label)

    def take(self, mask_or_index) -> "SampleSet":
        return SampleSet(
            *(getattr(self, f)[mask_or_index] for f in ("x", "y", "hsi", "als", "label", "polygon_id", "split"))
        )

    @staticmethod
    def concat(parts: Sequence["SampleSet"]) -> "SampleSet":
        return SampleSet(
            *(
                np.concatenate([getattr(p, f) for p in parts])
                for f in ("x", "y", "hsi", "als", "label", "polygon_id", "split")
            )
        )


def extract_samples(
    hsi: RasterCube,
    als: RasterCube,
    polygons: Sequence[PolygonLabel],
    splits: dict[int, str],
) -> SampleSet:
    """Rasterize polygons and gather per-pixel features with their split tag.

    Pixels with nodata in either cube are skipped.
    """
    if (hsi.width, hsi.height) != (als.width, als.height):
        raise ValidationError("HSI and ALS cubes are not co-registered (different sizes)")
    labels, ids = rasterize_polygons(polygons, hsi.width, hsi.height, return_ids=True)
    ok = (labels != UNLABELED) & hsi.valid_mask() & als.valid_mask()
    ys, xs = np.nonzero(ok)
    pid = ids[ys, xs]
    missing = set(np.unique(pid).tolist()) - set(splits)
    if missing:
        raise ValidationError(f"polygons without split assignment: {sorted(missing)[:10]}")
    return SampleSet(
        x=xs.astype(np.int64),
        y=ys.astype(np.int64),
        hsi=hsi.pixel_vectors(xs, ys),
        als=als.pixel_vectors(xs, ys),
        label=labels[ys, xs],
        polygon_id=pid,
        split=np.array([splits[int(i)] for i in pid], dtype="<U10"),
    )


class AuditedSamples:
    """Split accessor that records every read, so callers can prove the
    test split stayed untouched until final evaluation."""

    def __init__(self, samples: SampleSet):
        self._samples = samples
        self.log: list[str] = []

    def get(self, split: str) -> SampleSet:
        if split not in SPLITS:
            raise ValidationError(f"unknown split {split!r}")
        self.log.append(split)
        return self._samples.take(self._samples.split == split)

    def reads(self, split: str) -> int:
        return self.log.count(split)


# standardization ------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class Standardizer:
    mean: np.ndarray
    std: np.ndarray
    degenerate: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.degenerate is None:
            object.__setattr__(self, "degenerate", np.zeros(len(self.mean), dtype=bool))

    def apply(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x)
        if x.shape[-1] != len(self.mean):
            raise ValidationError(f"expected {len(self.mean)} bands, got {x.shape[-1]}")
        out = (x - self.mean) / self.std
        return np.where(self.degenerate, 0.0, out).astype(x.dtype if x.dtype.kind == "f" else np.float64)

    def to_dict(self) -> dict:
        return {"mean": self.mean.tolist(), "std": self.std.tolist(), "degenerate": self.degenerate.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "Standardizer":
        return cls(np.asarray(d["mean"]), np.asarray(d["std"]), np.asarray(d["degenerate"], dtype=bool))


def fit_standardizer(features: np.ndarray) -> Standardizer:
    """Per-band mean and population standard deviation of training features.

    Bands whose std falls below 1e-12 are flagged degenerate and map to 0.
    """
    f = np.asarray(features, dtype=np.float64)
    if f.ndim != 2 or len(f) == 0:
        raise ValidationError("cannot fit a standardizer on an empty training set")
    if len(f) < 2:
        raise ValidationError("need at least two training samples to fit a standardizer")
    mean = f.mean(axis=0)
    std = f.std(axis=0)
    degenerate = std < 1e-12
    return Standardizer(mean, np.where(degenerate, 1.0, std), degenerate)
