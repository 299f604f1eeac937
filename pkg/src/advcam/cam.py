"""Class activation maps: extraction, resampling, and the scale/flip ensemble."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .errors import ValidationError

DEFAULT_SCALES = (0.5, 1.0, 1.5, 2.0)


@dataclass
class AttributionMap:
    """Per-pixel class evidence at feature resolution.

    ``raw`` is post-ReLU and un-normalized; ``signed`` keeps the pre-ReLU
    values when available. ``normalizer`` defaults to ``max(raw)``.
    """

    class_id: int
    raw: np.ndarray
    image_size: tuple[int, int]
    signed: np.ndarray | None = None
    normalizer: float | None = None

    def __post_init__(self):
        if self.normalizer is None:
            self.normalizer = float(self.raw.max()) if self.raw.size else 0.0

    @property
    def self_normalized(self) -> np.ndarray:
        m = self.raw.max()
        return self.raw / m if m > 0 else np.zeros_like(self.raw)

    @property
    def normalized(self) -> np.ndarray:
        return self.raw / self.normalizer if self.normalizer > 0 else np.zeros_like(self.raw)

    def image_res(self, size: tuple[int, int] | None = None) -> np.ndarray:
        h, w = size or self.image_size
        return upsample_bilinear(self.raw, h, w)


def upsample_bilinear(m: np.ndarray, h: int, w: int) -> np.ndarray:
    """Bilinear resize with half-pixel centres (align_corners=False)."""
    return ad.resize_array(np.asarray(m, dtype=np.float64), h, w)


def signed_cams(model, images: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """``(logits, signed maps [..., K, h, w])`` for an image or batch."""
    logits, feats = model.predict(images)
    return logits, np.einsum("kd,...dhw->...khw", model.params["head.w"], feats)


def extract_cam(model, image: np.ndarray, class_id: int) -> AttributionMap:
    if not 0 <= class_id < model.num_classes:
        raise ValidationError(f"class {class_id} outside [0, {model.num_classes})")
    _, maps = signed_cams(model, image)
    signed = maps[class_id]
    return AttributionMap(class_id, np.maximum(signed, 0.0), tuple(image.shape[-2:]), signed)


# ---------------------------------------------------------------------------
# scale / flip variants

@dataclass(frozen=True)
class Variant:
    scale: float
    flipped: bool
    image: np.ndarray  # [3, H', W'], padded to a multiple of the stride
    valid: tuple[int, int]  # feature-map extent covering real pixels


def make_variants(image: np.ndarray, scales=DEFAULT_SCALES, flip: bool = True, stride: int = 8) -> list[Variant]:
    """Resized (and optionally mirrored) copies in canonical ``(scale, flipped)`` order."""
    if len(scales) == 0:
        raise ValidationError("at least one scale is required")
    h, w = image.shape[-2:]
    out = []
    for s in sorted(float(s) for s in scales):
        hs, ws = int(round(h * s)), int(round(w * s))
        if s <= 0 or hs < 1 or ws < 1:
            raise ValidationError(f"scale {s} gives spatial size ({hs}, {ws}) < 1")
        resized = image if (hs, ws) == (h, w) else ad.resize_array(image, hs, ws)
        ph, pw = -hs % stride, -ws % stride
        if ph or pw:
            resized = np.pad(resized, ((0, 0), (0, ph), (0, pw)))
        valid = (-(-hs // stride), -(-ws // stride))
        for flipped in ((False, True) if flip else (False,)):
            img = resized[..., ::-1].copy() if flipped else resized
            out.append(Variant(s, flipped, img, valid))
    return out


def realign(raw: np.ndarray, variant: Variant, ref_hw: tuple[int, int]) -> np.ndarray:
    """Map a variant's feature-resolution CAM back onto the reference grid."""
    if variant.flipped:
        raw = raw[..., ::-1]
    vh, vw = variant.valid
    raw = raw[..., :vh, :vw]
    if raw.shape[-2:] == tuple(ref_hw):
        return np.array(raw)
    return ad.resize_array(raw, *ref_hw)


def ensemble_cam(model, image: np.ndarray, class_id: int, scales=DEFAULT_SCALES, flip: bool = True) -> AttributionMap:
    """Sum-pool the post-ReLU CAMs of every scale/flip variant on the scale-1 grid."""
    if not 0 <= class_id < model.num_classes:
        raise ValidationError(f"class {class_id} outside [0, {model.num_classes})")
    stride = model.arch.stride
    h, w = image.shape[-2:]
    ref = (-(-h // stride), -(-w // stride))
    total = np.zeros(ref)
    for v in make_variants(image, scales, flip, stride):
        _, maps = signed_cams(model, v.image)
        total = total + realign(np.maximum(maps[class_id], 0.0), v, ref)
    return AttributionMap(class_id, total, (h, w))


def to_pgm_bytes(m: np.ndarray) -> np.ndarray:
    """Self-normalize to [0, 255] uint8."""
    mx = m.max()
    norm = m / mx if mx > 0 else np.zeros_like(m)
    return np.round(np.clip(norm, 0.0, 1.0) * 255.0).astype(np.uint8)
