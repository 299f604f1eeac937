"""Adversarial attack, adversarial climbing, and the regularized climbing loop.

All step functions accept a single image ``[3, H, W]`` or a batch
``[N, 3, H, W]`` with one class per batch element. Per-sample objectives are
summed before differentiation; since samples do not interact, each image
receives the gradient of its own objective.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from .cam import AttributionMap, DEFAULT_SCALES, make_variants, realign
from .errors import ClimbDivergenceError, ValidationError


STEP_DOMAINS = ("network", "pixel")


def step_metric(model, domain: str = "network") -> float:
    """Factor mapping a pixel-space gradient to a pixel-space step.

    In the ``"network"`` domain the step is taken on the standardized input
    ``z = (x - mean) / std`` the convolutions see, which moves pixels by
    ``xi * std**2 * grad_x``. Models without input standardization use 1.
    """
    if domain == "pixel":
        return 1.0
    std = getattr(getattr(model, "arch", None), "input_std", 1.0)
    return float(std) ** 2


@dataclass(frozen=True)
class ClimbConfig:
    T: int = 27
    xi: float = 0.008
    lam: float = 7.0
    tau: float = 0.5
    suppress_others: bool = True
    masking: bool = True
    ensemble: bool = False
    scales: tuple[float, ...] = DEFAULT_SCALES
    flip: bool = True
    step_domain: str = "network"

    def __post_init__(self):
        if self.step_domain not in STEP_DOMAINS:
            raise ValidationError(f"step_domain must be one of {STEP_DOMAINS}, got {self.step_domain!r}")
        if self.T < 0 or self.xi < 0 or self.lam < 0:
            raise ValidationError(f"T, xi and lambda must be non-negative: {self}")
        if not 0.0 < self.tau < 1.0:
            raise ValidationError(f"tau must lie in (0, 1), got {self.tau}")

    @classmethod
    def plain(cls, **kw) -> "ClimbConfig":
        return cls(suppress_others=False, masking=False, **kw)

    def with_(self, **kw) -> "ClimbConfig":
        return replace(self, **kw)

    def to_json(self) -> dict:
        return {
            "T": self.T, "xi": self.xi, "lambda": self.lam, "tau": self.tau,
            "suppress_others": self.suppress_others, "masking": self.masking,
            "ensemble": self.ensemble, "scales": list(self.scales), "flip": self.flip,
            "step_domain": self.step_domain,
        }


@dataclass
class ClimbTrajectory:
    class_id: int
    config: ClimbConfig
    logits: np.ndarray  # [T+1, K]
    cams: np.ndarray  # [T+1, h, w], raw post-ReLU (sum-pooled over variants in ensemble mode)
    masks: np.ndarray  # [T, h, w]; masks[t-1] restricted step t
    images: np.ndarray | None = None  # [T+1, 3, H, W]
    objective: np.ndarray | None = None  # [T]
    variants: list["ClimbTrajectory"] = field(default_factory=list)

    @property
    def aggregate(self) -> np.ndarray:
        return aggregate(self.cams)

    def aggregate_upto(self, t: int) -> np.ndarray:
        return aggregate(self.cams[:t + 1])

    @property
    def image_size(self) -> tuple[int, int] | None:
        return None if self.images is None else tuple(self.images.shape[-2:])


def aggregate(cams: np.ndarray) -> np.ndarray:
    """Sum raw CAMs over steps, then divide by the maximum (zeros if all-zero)."""
    total = np.sum(cams, axis=0)
    m = total.max()
    return total / m if m > 0 else np.zeros_like(total)


# ---------------------------------------------------------------------------
# single steps

def _batched(x: np.ndarray, classes) -> tuple[np.ndarray, np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 3:
        return x[None], np.atleast_1d(np.asarray(classes, dtype=int)), True
    return x, np.asarray(classes, dtype=int).reshape(len(x)), False


def _onehot(classes: np.ndarray, k: int) -> np.ndarray:
    oh = np.zeros((len(classes), k))
    oh[np.arange(len(classes)), classes] = 1.0
    return oh


def evaluate_objective(model, x, classes, cam0=None, lam: float = 0.0, tau: float = 0.5,
                       suppress_others: bool = False, masking: bool = False, need_grad: bool = True):
    """One forward/backward pass of the climbing objective at ``x``.

    Returns a dict with the input gradient, logits, raw target-class CAMs,
    the restricting mask built from those CAMs, and the objective value.
    Shapes are batched unless ``x`` was a single image.
    """
    xb, cls, single = _batched(x, classes)
    k = model.num_classes
    if np.any(cls < 0) or np.any(cls >= k):
        raise ValidationError(f"class ids {cls} outside [0, {k})")
    g = ad.Graph()
    xt = g.leaf(xb, requires_grad=need_grad)
    logits, feats = model.forward(xt)
    oh = _onehot(cls, k)
    weights = oh - (1.0 - oh) if suppress_others else oh
    obj = ad.sum_(ad.mul_const(logits, weights))
    maps = ad.class_maps(feats, g.constant(model.params["head.w"]))
    cam_c = ad.relu(ad.sum_(ad.mul_const(maps, oh[:, :, None, None] * np.ones(maps.shape)), axis=1))
    mask = restricting_mask_array(cam_c.data, tau) if masking else np.zeros(cam_c.shape)
    penalty_value = np.zeros(len(xb))
    if masking and lam > 0:
        c0 = cam_c.data if cam0 is None else np.asarray(cam0, dtype=np.float64).reshape(cam_c.shape)
        dev = ad.abs_(ad.add_const(cam_c, -c0))
        penalty_value = (mask * dev.data).sum(axis=(1, 2))
        obj = ad.add(obj, ad.scale(ad.masked_sum(dev, mask), -lam))
    if need_grad:
        g.backward(obj)
    else:
        g.release()
    value = (logits.data * weights).sum(axis=1) - lam * penalty_value
    out = {
        "grad": xt.grad,
        "logits": logits.data,
        "cam": cam_c.data,
        "mask": mask,
        "objective": value,
        "penalty": penalty_value,
    }
    if single:
        out = {name: None if v is None else v[0] for name, v in out.items()}
    return out


def _ascent_step(model, x, class_id, xi, domain):
    return (xi * step_metric(model, domain)) * evaluate_objective(model, x, class_id)["grad"]


def attack_displacement(model, x, class_id, xi: float, domain: str = "network") -> np.ndarray:
    return -_ascent_step(model, x, class_id, xi, domain)


def climb_displacement(model, x, class_id, xi: float, domain: str = "network") -> np.ndarray:
    return _ascent_step(model, x, class_id, xi, domain)


def attack_step(model, x, class_id, xi: float, domain: str = "network") -> np.ndarray:
    """Gradient descent on the target logit: ``x - xi * grad y_c``."""
    return np.asarray(x) + attack_displacement(model, x, class_id, xi, domain)


def climb_step_plain(model, x, class_id, xi: float, domain: str = "network") -> np.ndarray:
    """Gradient ascent on the target logit: ``x + xi * grad y_c``; no clipping."""
    return np.asarray(x) + climb_displacement(model, x, class_id, xi, domain)


def restricting_mask_array(cam: np.ndarray, tau: float) -> np.ndarray:
    """1 where the self-normalized map exceeds ``tau`` (per leading batch element)."""
    cam = np.asarray(cam, dtype=np.float64)
    mx = cam.max(axis=(-2, -1), keepdims=True)
    norm = np.divide(cam, mx, out=np.zeros_like(cam), where=mx > 0)
    return (norm > tau).astype(np.float64)


def restricting_mask(cam_prev: AttributionMap, tau: float) -> np.ndarray:
    return (cam_prev.self_normalized > tau).astype(np.float64)


def climb_step_regularized(model, x, cam0, class_id, config: ClimbConfig = ClimbConfig()):
    """One step of regularized climbing from ``x`` (the previous iterate).

    ``cam0`` is the raw target-class CAM of the starting image (an
    :class:`AttributionMap` or array). Returns ``(x_next, diagnostics)``.
    """
    c0 = cam0.raw if isinstance(cam0, AttributionMap) else cam0
    res = evaluate_objective(model, x, class_id, c0, config.lam, config.tau,
                             config.suppress_others, config.masking)
    step = config.xi * step_metric(model, config.step_domain)
    return np.asarray(x) + step * res["grad"], res


# ---------------------------------------------------------------------------
# full trajectories

def climb_batch(model, images: np.ndarray, classes, config: ClimbConfig = ClimbConfig(),
                keep_images: bool = True) -> list[ClimbTrajectory]:
    """Run independent single-view trajectories for a batch of (image, class) pairs."""
    x = np.array(images, dtype=np.float64)
    cls = np.asarray(classes, dtype=int).reshape(len(x))
    n, T = len(x), config.T
    logits, cams, masks, objs = [], [], [], []
    frames = [x.copy()] if keep_images else None
    cam0 = None
    step = config.xi * step_metric(model, config.step_domain)
    for t in range(T + 1):
        try:
            res = evaluate_objective(model, x, cls, cam0, config.lam, config.tau,
                                     config.suppress_others, config.masking and t < T,
                                     need_grad=t < T)
        except ad.NonFiniteError as exc:
            raise ClimbDivergenceError(f"non-finite values at step {t}: {exc}", step=t) from None
        if not np.all(np.isfinite(res["logits"])):
            raise ClimbDivergenceError(f"non-finite logit at step {t}", step=t)
        logits.append(res["logits"])
        cams.append(res["cam"])
        if t == 0:
            cam0 = res["cam"].copy()
        if t == T:
            break
        masks.append(res["mask"])
        objs.append(res["objective"])
        x = x + step * res["grad"]
        if not np.all(np.isfinite(x)):
            raise ClimbDivergenceError(f"non-finite image after step {t + 1}", step=t + 1)
        if keep_images:
            frames.append(x.copy())
    logits, cams = np.stack(logits, 1), np.stack(cams, 1)
    h, w = cams.shape[-2:]
    masks = np.stack(masks, 1) if masks else np.zeros((n, 0, h, w))
    objs = np.stack(objs, 1) if objs else np.zeros((n, 0))
    imgs = np.stack(frames, 1) if keep_images else None
    return [
        ClimbTrajectory(int(cls[i]), config, logits[i], cams[i], masks[i],
                        None if imgs is None else imgs[i], objs[i])
        for i in range(n)
    ]


def _climb_ensemble(model, image, class_id, config, keep_images):
    stride = model.arch.stride
    h, w = image.shape[-2:]
    ref = (-(-h // stride), -(-w // stride))
    variants = make_variants(image, config.scales, config.flip, stride)
    runs = []
    pooled = None
    for v in variants:
        tr = climb_batch(model, v.image[None], [class_id], config, keep_images)[0]
        aligned = np.stack([realign(c, v, ref) for c in tr.cams])
        pooled = aligned if pooled is None else pooled + aligned
        runs.append(tr)
    base = next((r for r, v in zip(runs, variants) if v.scale == 1.0 and not v.flipped), None)
    logits = sum(r.logits for r in runs) / len(runs)
    masks = np.zeros((config.T, *ref))
    return ClimbTrajectory(class_id, config, logits, pooled, masks,
                           base.images if base is not None else None,
                           sum(r.objective for r in runs), runs)


def run_climb(model, image: np.ndarray, class_id: int, config: ClimbConfig = ClimbConfig(),
              keep_images: bool = True) -> ClimbTrajectory:
    """Climb from ``image`` for ``config.T`` steps and record the trajectory.

    In ensemble mode each scale/flip variant climbs independently; the
    trajectory's ``cams`` are the per-step sums of the re-aligned variant
    CAMs and ``logits`` the per-step variant mean.
    """
    if not 0 <= class_id < model.num_classes:
        raise ValidationError(f"class {class_id} outside [0, {model.num_classes})")
    if config.ensemble:
        return _climb_ensemble(model, np.asarray(image, dtype=np.float64), class_id, config, keep_images)
    return climb_batch(model, np.asarray(image)[None], [class_id], config, keep_images)[0]


def climb_pairs(model, images: np.ndarray, classes, config: ClimbConfig = ClimbConfig(),
                chunk: int = 32, keep_images: bool = False) -> list[ClimbTrajectory]:
    """Trajectories for many (image, class) pairs, batched in fixed-size chunks."""
    if config.ensemble:
        return [run_climb(model, im, int(c), config, keep_images) for im, c in zip(images, classes)]
    out = []
    for i in range(0, len(images), chunk):
        out.extend(climb_batch(model, images[i:i + chunk], classes[i:i + chunk], config, keep_images))
    return out
