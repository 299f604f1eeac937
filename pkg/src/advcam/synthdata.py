"""Synthetic multi-label shapes benchmark with exact pixel ground truth.

Layout on disk::

    index.json
    images/NNNN.ppm
    masks/NNNN.pgm      # 0 = background, 1 + class index otherwise

With ``marker_bias`` each object carries a 3x3 black/white class pattern that
a classifier can latch onto, which keeps its CAM concentrated on a few pixels.
"""

from __future__ import annotations

import colorsys
import hashlib
import json
from dataclasses import dataclass, asdict
from pathlib import Path
from typing import Iterator

import numpy as np

from .errors import DatasetError, ValidationError
from .netpbm import read_netpbm, write_pgm, write_ppm

CLASSES = ("circle", "square", "triangle", "cross")
BACKGROUND = 0
INDEX_VERSION = 1
IMAGE_SIZE = 64
MIN_PIXELS = 40
SUPERSAMPLE = 4

_BASE_HUES = {"circle": 0.0, "square": 0.33, "triangle": 0.66, "cross": 0.16}

_MARKERS = {
    "circle": [[1, 1, 1], [1, 0, 1], [1, 1, 1]],
    "square": [[0, 1, 0], [1, 1, 1], [0, 1, 0]],
    "triangle": [[1, 0, 1], [0, 1, 0], [1, 0, 1]],
    "cross": [[1, 1, 1], [0, 0, 0], [1, 1, 1]],
}


@dataclass(frozen=True)
class DatasetSpec:
    seed: int = 7
    train: int = 800
    val: int = 100
    test: int = 100
    min_objects: int = 1
    max_objects: int = 3
    marker_bias: bool = True
    background_amplitude: float = 0.12
    hue_jitter: float = 0.12
    min_radius: float = 8.0
    max_radius: float = 20.0

    def validate(self):
        if min(self.train, self.val, self.test) < 1:
            raise ValidationError("every split needs at least one image")
        if not 1 <= self.min_objects <= self.max_objects <= len(CLASSES):
            raise ValidationError(f"object range [{self.min_objects}, {self.max_objects}] invalid")
        if not 0 < self.min_radius <= self.max_radius <= IMAGE_SIZE / 2:
            raise ValidationError("radius range invalid")
        if self.background_amplitude < 0 or self.hue_jitter < 0:
            raise ValidationError("amplitudes must be non-negative")

    @property
    def total(self) -> int:
        return self.train + self.val + self.test

    def split_of(self, index: int) -> str:
        if index < self.train:
            return "train"
        return "val" if index < self.train + self.val else "test"


@dataclass
class Record:
    id: str
    split: str
    tags: list[int]
    image: np.ndarray  # [3, H, W] in [0, 1]
    mask: np.ndarray  # [H, W] uint8 label ids

    @property
    def targets(self) -> np.ndarray:
        t = np.zeros(len(CLASSES))
        t[self.tags] = 1.0
        return t


# ---------------------------------------------------------------------------
# rendering

def _shape_inside(kind: str, xs, ys, cx, cy, r):
    dx, dy = xs - cx, ys - cy
    if kind == "circle":
        return dx * dx + dy * dy <= r * r
    if kind == "square":
        a = 0.8 * r
        return (np.abs(dx) <= a) & (np.abs(dy) <= a)
    if kind == "triangle":
        # equilateral, apex up, circumradius r
        h = 1.5 * r
        top = -r
        rel = dy - top
        half = rel / h * (np.sqrt(3) / 2 * r)
        return (rel >= 0) & (rel <= h) & (np.abs(dx) <= half)
    if kind == "cross":
        arm = r / 3.0
        return ((np.abs(dx) <= arm) & (np.abs(dy) <= r)) | ((np.abs(dy) <= arm) & (np.abs(dx) <= r))
    raise ValueError(kind)


def _coverage(kind, cx, cy, r, size=IMAGE_SIZE, ss=SUPERSAMPLE):
    coords = (np.arange(size * ss) + 0.5) / ss
    ys, xs = np.meshgrid(coords, coords, indexing="ij")
    inside = _shape_inside(kind, xs, ys, cx, cy, r).astype(np.float64)
    return inside.reshape(size, ss, size, ss).mean(axis=(1, 3))


def _background(rng, spec: DatasetSpec, size=IMAGE_SIZE):
    from .autodiff import resize_array

    base = rng.uniform(0.35, 0.65)
    coarse = rng.normal(0.0, 1.0, size=(3, 4, 4)) * spec.background_amplitude
    return np.clip(base + resize_array(coarse, size, size), 0.0, 1.0)


def _object_color(rng, kind, spec):
    hue = (_BASE_HUES[kind] + rng.uniform(-spec.hue_jitter, spec.hue_jitter)) % 1.0
    sat = rng.uniform(0.45, 0.85)
    val = rng.uniform(0.55, 0.9)
    return np.array(colorsys.hsv_to_rgb(hue, sat, val))


def render(spec: DatasetSpec, index: int, max_attempts: int = 200) -> tuple[np.ndarray, np.ndarray, list[int]]:
    """Render image ``index``: ``(uint8 [H, W, 3], uint8 mask [H, W], sorted tags)``."""
    rng = np.random.default_rng([spec.seed, index])
    for _ in range(max_attempts):
        n_obj = int(rng.integers(spec.min_objects, spec.max_objects + 1))
        kinds = [int(k) for k in rng.choice(len(CLASSES), size=n_obj, replace=False)]
        img = _background(rng, spec)
        mask = np.zeros((IMAGE_SIZE, IMAGE_SIZE), dtype=np.uint8)
        ok = True
        for k in kinds:
            name = CLASSES[k]
            placed = False
            for _ in range(50):
                r = rng.uniform(spec.min_radius, spec.max_radius)
                cx = rng.uniform(r, IMAGE_SIZE - r)
                cy = rng.uniform(r, IMAGE_SIZE - r)
                cov = _coverage(name, cx, cy, r)
                area = (cov >= 0.5).sum()
                overlap = ((cov >= 0.5) & (mask != BACKGROUND)).sum()
                if overlap <= 0.25 * area:
                    placed = True
                    break
            if not placed:
                ok = False
                break
            color = _object_color(rng, name, spec)
            img = cov[None] * color[:, None, None] + (1.0 - cov[None]) * img
            mask[cov >= 0.5] = k + 1
        if not ok:
            continue
        counts = [(mask == k + 1).sum() for k in kinds]
        if min(counts) < MIN_PIXELS:
            continue
        if spec.marker_bias and not _place_markers(rng, img, mask, kinds):
            continue
        u8 = np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)
        return u8.transpose(1, 2, 0).copy(), mask, sorted(kinds)
    raise DatasetError(f"could not render image {index} within {max_attempts} attempts")


def _place_markers(rng, img, mask, kinds) -> bool:
    for k in kinds:
        own = mask == k + 1
        # 3x3 windows fully inside the visible region of this object
        win = own[:-2, :-2] & own[1:-1, :-2] & own[2:, :-2] & own[:-2, 1:-1] & own[1:-1, 1:-1] \
            & own[2:, 1:-1] & own[:-2, 2:] & own[1:-1, 2:] & own[2:, 2:]
        ys, xs = np.nonzero(win)
        if len(ys) == 0:
            return False
        j = int(rng.integers(len(ys)))
        y, x = ys[j], xs[j]
        pattern = np.asarray(_MARKERS[CLASSES[k]], dtype=np.float64)
        img[:, y:y + 3, x:x + 3] = pattern[None]
    return True


# ---------------------------------------------------------------------------
# disk I/O

def generate(spec: DatasetSpec, out_dir) -> Path:
    """Render every image of ``spec`` under ``out_dir``; returns the index path."""
    spec.validate()
    out = Path(out_dir)
    try:
        (out / "images").mkdir(parents=True, exist_ok=True)
        (out / "masks").mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DatasetError(f"cannot create dataset directories under {out}: {exc}") from exc
    records = []
    for i in range(spec.total):
        rgb, mask, tags = render(spec, i)
        rid = f"{i:04d}"
        img_rel, mask_rel = f"images/{rid}.ppm", f"masks/{rid}.pgm"
        try:
            write_ppm(out / img_rel, rgb)
            write_pgm(out / mask_rel, mask)
        except OSError as exc:
            raise DatasetError(f"failed writing {out / img_rel}: {exc}") from exc
        records.append({
            "id": rid,
            "split": spec.split_of(i),
            "tags": [CLASSES[t] for t in tags],
            "image": img_rel,
            "mask": mask_rel,
        })
    index = {
        "version": INDEX_VERSION,
        "classes": list(CLASSES),
        "background_id": BACKGROUND,
        "spec": asdict(spec),
        "records": records,
    }
    path = out / "index.json"
    try:
        path.write_text(json.dumps(index, indent=1, sort_keys=True) + "\n")
    except OSError as exc:
        raise DatasetError(f"failed writing {path}: {exc}") from exc
    return path


class Dataset:
    """All records of an on-disk dataset, held in memory."""

    def __init__(self, records: list[Record], classes=CLASSES, root: Path | None = None, digest: str = ""):
        self.records = records
        self.classes = tuple(classes)
        self.root = root
        self.digest = digest

    @property
    def num_classes(self) -> int:
        return len(self.classes)

    def split(self, name: str) -> list[Record]:
        return [r for r in self.records if r.split == name]

    def iterate(self, split: str, shuffle_seed: int | None = None) -> Iterator[tuple[np.ndarray, list[int], np.ndarray]]:
        recs = self.split(split)
        order = np.arange(len(recs))
        if shuffle_seed is not None:
            order = np.random.default_rng(shuffle_seed).permutation(len(recs))
        for i in order:
            r = recs[i]
            yield r.image, r.tags, r.mask

    def arrays(self, split: str) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        recs = self.split(split)
        return (
            np.stack([r.image for r in recs]),
            np.stack([r.targets for r in recs]),
            np.stack([r.mask for r in recs]),
        )


def check_record(rid: str, tags: list[int], mask: np.ndarray, num_classes: int) -> None:
    for k in range(num_classes):
        n = int((mask == k + 1).sum())
        if k in tags and n < MIN_PIXELS:
            raise DatasetError(f"record {rid}: tagged class {k} covers only {n} pixels")
        if k not in tags and n:
            raise DatasetError(f"record {rid}: untagged class {k} covers {n} pixels")
    if mask.max() > num_classes:
        raise DatasetError(f"record {rid}: mask holds unknown label {int(mask.max())}")


def load(index_path) -> Dataset:
    index_path = Path(index_path)
    try:
        raw = index_path.read_bytes()
        index = json.loads(raw)
    except (OSError, ValueError) as exc:
        raise DatasetError(f"cannot read dataset index {index_path}: {exc}") from exc
    if index.get("version") != INDEX_VERSION:
        raise DatasetError(f"{index_path}: index version {index.get('version')} unsupported")
    classes = index["classes"]
    root = index_path.parent
    h = hashlib.sha256(raw)
    records = []
    for entry in index["records"]:
        rid = entry.get("id", "?")
        try:
            tags = sorted(classes.index(t) for t in entry["tags"])
            img_path, mask_path = root / entry["image"], root / entry["mask"]
            img_bytes = img_path.read_bytes()
            mask_bytes = mask_path.read_bytes()
            rgb = read_netpbm(img_path)
            mask = read_netpbm(mask_path)
        except (OSError, ValueError, KeyError) as exc:
            raise DatasetError(f"record {rid}: {exc}") from exc
        if rgb.ndim != 3 or mask.shape != rgb.shape[:2]:
            raise DatasetError(f"record {rid}: image {rgb.shape} and mask {mask.shape} disagree")
        check_record(rid, tags, mask, len(classes))
        h.update(img_bytes)
        h.update(mask_bytes)
        image = rgb.transpose(2, 0, 1).astype(np.float64) / 255.0
        records.append(Record(rid, entry["split"], tags, image, mask))
    return Dataset(records, classes, root, h.hexdigest())
