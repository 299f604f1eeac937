"""Seeds, mIoU, noise proportion, amplification ratios, landscapes, and sweeps.

Label maps use 0 for background and ``1 + class_index`` for object classes.
Dataset-level mIoU accumulates one confusion matrix over all images before
dividing, the usual convention for segmentation benchmarks.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from . import autodiff as ad
from .cam import upsample_bilinear
from .climb import ClimbConfig, ClimbTrajectory, aggregate, climb_pairs
from .errors import DegenerateDirectionError, DimensionError, ValidationError

BACKGROUND = 0


@dataclass
class Seed:
    labels: np.ndarray  # [H, W] int
    theta: float | None = None
    source: str = ""


# ---------------------------------------------------------------------------
# seeds and overlap scores

def seed_from_map(maps: Mapping[int, np.ndarray], theta: float, source: str = "") -> Seed:
    """Background where every class score is below ``theta``, else the arg-max class.

    ``maps`` holds image-resolution scores in [0, 1] keyed by class index.
    Ties go to the lowest class index.
    """
    if not maps:
        raise ValidationError("seed_from_map needs at least one class map")
    ids = sorted(maps)
    stack = np.stack([np.asarray(maps[c], dtype=np.float64) for c in ids])
    best = stack.argmax(axis=0)
    labels = np.asarray(ids)[best] + 1
    labels[stack.max(axis=0) < theta] = BACKGROUND
    return Seed(labels.astype(np.int64), theta, source)


def _labels(s) -> np.ndarray:
    return s.labels if isinstance(s, Seed) else np.asarray(s)


def confusion(pred, gt, num_labels: int) -> np.ndarray:
    """``[num_labels, num_labels]`` counts indexed ``[gt, pred]``."""
    p, g = _labels(pred).astype(np.int64), _labels(gt).astype(np.int64)
    if p.shape != g.shape:
        raise DimensionError(f"prediction shape {p.shape} != ground truth shape {g.shape}")
    return np.bincount(g.ravel() * num_labels + p.ravel(), minlength=num_labels ** 2).reshape(num_labels, num_labels)


def iou_from_confusion(conf: np.ndarray) -> tuple[np.ndarray, float]:
    inter = np.diag(conf).astype(np.float64)
    union = conf.sum(0) + conf.sum(1) - inter
    iou = np.full(len(conf), np.nan)
    present = union > 0
    iou[present] = inter[present] / union[present]
    return iou, float(np.mean(iou[present])) if present.any() else float("nan")


def miou(seed, gt, num_labels: int) -> tuple[np.ndarray, float]:
    """Per-label IoU (NaN where a label is absent from both maps) and their mean.

    ``num_labels`` counts the background label too.
    """
    return iou_from_confusion(confusion(seed, gt, num_labels))


def noise_counts(seed, gt) -> tuple[int, int]:
    s, g = _labels(seed), _labels(gt)
    if s.shape != g.shape:
        raise DimensionError(f"seed shape {s.shape} != ground truth shape {g.shape}")
    fg = s != BACKGROUND
    return int((fg & (g == BACKGROUND)).sum()), int(fg.sum())


def noise_proportion(seed, gt) -> float:
    """Fraction of predicted-foreground pixels that are background in ``gt``."""
    noisy, fg = noise_counts(seed, gt)
    return noisy / fg if fg else 0.0


# ---------------------------------------------------------------------------
# threshold sweeps

DEFAULT_THETAS = tuple(round(0.05 * i, 2) for i in range(1, 20))


@dataclass
class ThresholdCurve:
    thetas: list[float]
    mious: list[float]
    best_theta: float
    best_miou: float
    noise: list[float] = field(default_factory=list)

    @property
    def best_noise(self) -> float:
        return self.noise[self.thetas.index(self.best_theta)]


def threshold_sweep(image_maps: Sequence[Mapping[int, np.ndarray]], gts: Sequence[np.ndarray],
                    thetas: Sequence[float], num_labels: int) -> ThresholdCurve:
    """Dataset mIoU of thresholded seeds for every ``theta``; the first maximum wins ties."""
    if len(thetas) == 0:
        raise ValidationError("threshold_sweep needs at least one threshold")
    if len(image_maps) != len(gts):
        raise ValidationError(f"{len(image_maps)} map sets vs {len(gts)} ground truths")
    mious, noise = [], []
    for theta in thetas:
        conf = np.zeros((num_labels, num_labels), dtype=np.int64)
        noisy = fg = 0
        for maps, gt in zip(image_maps, gts):
            s = seed_from_map(maps, theta)
            conf += confusion(s, gt, num_labels)
            a, b = noise_counts(s, gt)
            noisy, fg = noisy + a, fg + b
        mious.append(iou_from_confusion(conf)[1])
        noise.append(noisy / fg if fg else 0.0)
    best = int(np.argmax(mious))
    return ThresholdCurve([float(t) for t in thetas], mious, float(thetas[best]), mious[best], noise)


def image_res_aggregate(agg: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    """Upsample a feature-resolution map and re-normalize so its maximum is 1."""
    up = upsample_bilinear(agg, *size)
    m = up.max()
    return up / m if m > 0 else np.zeros_like(up)


# ---------------------------------------------------------------------------
# amplification ratios

@dataclass
class AmplificationStats:
    discriminative: list[np.ndarray]  # per step, ratios over R_D
    non_discriminative: list[np.ndarray]  # per step, ratios over R_ND

    @staticmethod
    def _median(a):
        return float(np.median(a)) if len(a) else float("nan")

    def medians(self, t: int) -> tuple[float, float]:
        return self._median(self.discriminative[t]), self._median(self.non_discriminative[t])


def regions(cam0: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Boolean ``(R_D, R_ND)`` from the self-normalized initial CAM."""
    m = cam0.max()
    norm = cam0 / m if m > 0 else np.zeros_like(cam0)
    valid = cam0 > 0
    return valid & (norm >= 0.5), valid & (norm > 0.1) & (norm < 0.5)


def amplification_stats(traj: ClimbTrajectory) -> AmplificationStats:
    cam0 = traj.cams[0]
    rd, rnd = regions(cam0)
    disc, nondisc = [], []
    for cam in traj.cams:
        disc.append(cam[rd] / cam0[rd])
        nondisc.append(cam[rnd] / cam0[rnd])
    return AmplificationStats(disc, nondisc)


# ---------------------------------------------------------------------------
# loss landscape

@dataclass
class LandscapeGrid:
    a_values: np.ndarray
    b_values: np.ndarray
    losses: np.ndarray  # [len(a), len(b)]
    direction: str
    rng_seed: int
    normal: np.ndarray
    random: np.ndarray

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["a_normal", "b_random", "loss"])
        for i, a in enumerate(self.a_values):
            for j, b in enumerate(self.b_values):
                w.writerow([repr(float(a)), repr(float(b)), repr(float(self.losses[i, j]))])
        return buf.getvalue()


def target_loss(model, image: np.ndarray, class_id: int, with_grad: bool = False):
    """Target-class BCE with target 1, optionally with its input gradient."""
    g = ad.Graph()
    x = g.leaf(image, requires_grad=with_grad)
    logits, _ = model.forward(x)
    oh = np.zeros(logits.shape)
    oh[..., class_id] = 1.0
    yc = ad.reshape(ad.sum_(ad.mul_const(logits, oh)), (1,))
    loss = ad.sigmoid_bce(yc, np.ones(1))
    if not with_grad:
        g.release()
        return float(loss.data)
    g.backward(loss)
    return float(loss.data), x.grad


def grid_values(lo: float, hi: float, steps: int) -> np.ndarray:
    if steps < 1:
        raise ValidationError("grid needs at least one step")
    if steps == 1:
        return np.array([float(lo)])
    v = lo + (hi - lo) * np.arange(steps) / (steps - 1)
    v[np.abs(v) < 1e-12 * max(abs(lo), abs(hi))] = 0.0
    return v


def landscape_directions(model, image, class_id, direction: str, rng_seed: int):
    """Unit manipulation vector ``n`` and unit random vector ``r`` with ``r . n = 0``."""
    if direction not in ("climb", "attack"):
        raise ValidationError(f"direction must be 'climb' or 'attack', got {direction!r}")
    _, grad = target_loss(model, image, class_id, with_grad=True)
    norm = np.linalg.norm(grad)
    if norm == 0 or not np.isfinite(norm):
        raise DegenerateDirectionError("loss gradient is zero; no manipulation direction")
    n = grad / norm if direction == "attack" else -grad / norm
    r = np.random.default_rng(rng_seed).normal(size=grad.shape)
    r = r - np.sum(r * n) * n
    r = r - np.sum(r * n) * n
    r = r / np.linalg.norm(r)
    return n, r


def landscape_probe(model, image, class_id: int, direction: str = "climb",
                    a_range=(-1.0, 1.0), b_range=(-1.0, 1.0), steps: int = 21,
                    rng_seed: int = 0) -> LandscapeGrid:
    """Loss over ``image + a * n + b * r`` for a regular ``steps x steps`` grid."""
    image = np.asarray(image, dtype=np.float64)
    n, r = landscape_directions(model, image, class_id, direction, rng_seed)
    a = grid_values(*a_range, steps)
    b = grid_values(*b_range, steps)
    losses = np.empty((len(a), len(b)))
    for i, ai in enumerate(a):
        for j, bj in enumerate(b):
            losses[i, j] = target_loss(model, image + ai * n + bj * r, class_id)
    return LandscapeGrid(a, b, losses, direction, rng_seed, n, r)


# ---------------------------------------------------------------------------
# dataset-level evaluation

@dataclass
class MapSet:
    """Aggregate maps for every (image, tagged class) pair of a split."""

    trajectories: list[list[ClimbTrajectory]]  # per image, one per tag
    gts: list[np.ndarray]
    image_size: tuple[int, int]

    def maps_at(self, t: int | None = None) -> list[dict[int, np.ndarray]]:
        out = []
        for trs in self.trajectories:
            out.append({
                tr.class_id: image_res_aggregate(
                    tr.aggregate if t is None else tr.aggregate_upto(t), self.image_size)
                for tr in trs
            })
        return out


def climb_records(model, records, config: ClimbConfig, chunk: int = 32, map_fn=map) -> MapSet:
    """Climb every (image, tag) pair of ``records``.

    ``map_fn`` may be a parallel, order-preserving map over chunks.
    """
    pairs = [(i, c) for i, r in enumerate(records) for c in r.tags]
    jobs = [pairs[s:s + chunk] for s in range(0, len(pairs), chunk)]
    results = list(map_fn(_ClimbJob(model, records, config), jobs))
    per_image: list[list[ClimbTrajectory]] = [[] for _ in records]
    for job, trs in zip(jobs, results):
        for (i, _), tr in zip(job, trs):
            per_image[i].append(tr)
    size = tuple(records[0].image.shape[-2:]) if records else (0, 0)
    return MapSet(per_image, [r.mask for r in records], size)


class _ClimbJob:
    def __init__(self, model, records, config):
        self.model, self.records, self.config = model, records, config

    def __call__(self, job):
        imgs = np.stack([self.records[i].image for i, _ in job])
        cls = np.array([c for _, c in job])
        return climb_pairs(self.model, imgs, cls, self.config, chunk=len(job))


def evaluate_maps(mapset: MapSet, thetas=DEFAULT_THETAS, num_labels: int = 5, t: int | None = None) -> ThresholdCurve:
    return threshold_sweep(mapset.maps_at(t), mapset.gts, thetas, num_labels)


def iteration_curve(mapset: MapSet, thetas=DEFAULT_THETAS, num_labels: int = 5) -> list[ThresholdCurve]:
    """Best-threshold result for prefix aggregates t = 0..T of each trajectory."""
    T = mapset.trajectories[0][0].config.T if mapset.trajectories and mapset.trajectories[0] else 0
    return [evaluate_maps(mapset, thetas, num_labels, t) for t in range(T + 1)]


SWEEP_PARAMS = {"lambda": "lam", "tau": "tau", "xi": "xi", "T": "T"}


def sweep(model, records, param: str, values, base: ClimbConfig = ClimbConfig(),
          thetas=DEFAULT_THETAS, num_labels: int = 5, map_fn=map) -> list[dict]:
    """Vary one climbing hyper-parameter, keeping the others at ``base``."""
    if param not in SWEEP_PARAMS:
        raise ValidationError(f"unknown sweep parameter {param!r}; choose from {sorted(SWEEP_PARAMS)}")
    rows = []
    for v in values:
        v = int(v) if param == "T" else float(v)
        cfg = base.with_(**{SWEEP_PARAMS[param]: v})
        curve = evaluate_maps(climb_records(model, records, cfg, map_fn=map_fn), thetas, num_labels)
        rows.append({param: v, "best_theta": curve.best_theta, "miou": curve.best_miou,
                     "noise": curve.best_noise})
    return rows


def rows_to_csv(rows: list[dict], columns: Sequence[str] | None = None) -> str:
    buf = io.StringIO()
    cols = list(columns or (rows[0].keys() if rows else []))
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(cols)
    for row in rows:
        w.writerow([repr(row[c]) if isinstance(row[c], float) else row[c] for c in cols])
    return buf.getvalue()


# ---------------------------------------------------------------------------
# feature trajectories

def export_feature_trajectory(model, traj: ClimbTrajectory) -> np.ndarray:
    """GAP-pooled feature vectors ``[T+1, D]`` for the stored iterates."""
    if traj.images is None:
        raise ValidationError("trajectory was recorded without images")
    _, feats = model.predict(traj.images)
    return feats.mean(axis=(-2, -1))


def feature_trajectory_csv(features: np.ndarray) -> str:
    rows = [{"t": t, **{f"f{d}": float(v) for d, v in enumerate(row)}} for t, row in enumerate(features)]
    return rows_to_csv(rows)
