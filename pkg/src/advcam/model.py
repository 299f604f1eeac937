"""GAP-headed multi-label classifier, its trainer, and the checkpoint format."""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .errors import CheckpointFormatError, DimensionError, TrainingError, ValidationError

MAGIC = b"ADVC"
FORMAT_VERSION = 1


@dataclass(frozen=True)
class Architecture:
    widths: tuple[int, ...] = (16, 32, 64)
    num_classes: int = 4
    feature_dim: int = 64
    in_channels: int = 3
    input_mean: float = 0.5
    input_std: float = 0.25

    @property
    def stride(self) -> int:
        return 2 ** len(self.widths)

    def param_shapes(self) -> list[tuple[str, tuple[int, ...]]]:
        shapes = []
        c_in = self.in_channels
        for i, c_out in enumerate(self.widths):
            shapes.append((f"conv{i}.w", (c_out, c_in, 3, 3)))
            shapes.append((f"conv{i}.b", (c_out,)))
            c_in = c_out
        shapes.append(("feat.w", (self.feature_dim, c_in, 1, 1)))
        shapes.append(("feat.b", (self.feature_dim,)))
        shapes.append(("head.w", (self.num_classes, self.feature_dim)))
        shapes.append(("head.b", (self.num_classes,)))
        return shapes

    def to_json(self) -> dict:
        return {
            "widths": list(self.widths),
            "num_classes": self.num_classes,
            "feature_dim": self.feature_dim,
            "in_channels": self.in_channels,
            "input_mean": self.input_mean,
            "input_std": self.input_std,
        }

    @classmethod
    def from_json(cls, d: dict) -> "Architecture":
        return cls(
            tuple(d["widths"]),
            int(d["num_classes"]),
            int(d["feature_dim"]),
            int(d.get("in_channels", 3)),
            float(d.get("input_mean", 0.5)),
            float(d.get("input_std", 0.25)),
        )


class GapClassifier:
    """Input standardization, three conv stages (3x3 conv, ReLU, 2x2 average pool), a 1x1 feature
    conv with ReLU giving ``f(x)``, global average pooling and a linear head.

    Parameters are plain arrays; :meth:`forward` binds them into the graph of
    its input as constants unless bound tensors are passed explicitly.
    """

    def __init__(self, arch: Architecture, params: dict[str, np.ndarray], meta: dict | None = None):
        for name, shape in arch.param_shapes():
            if name not in params:
                raise ValidationError(f"missing parameter {name}")
            if params[name].shape != shape:
                raise DimensionError(f"parameter {name}: shape {params[name].shape} != {shape}")
        self.arch = arch
        self.params = {name: np.asarray(params[name], dtype=np.float64) for name, _ in arch.param_shapes()}
        self.meta = dict(meta or {})

    @classmethod
    def initialize(cls, arch: Architecture = Architecture(), seed: int = 0, zero: bool = False) -> "GapClassifier":
        """He fan-in normal weights and zero biases drawn from ``seed``."""
        rng = np.random.default_rng(seed)
        params = {}
        for name, shape in arch.param_shapes():
            if zero or name.endswith(".b"):
                params[name] = np.zeros(shape)
            else:
                fan_in = int(np.prod(shape[1:]))
                params[name] = rng.normal(0.0, math.sqrt(2.0 / fan_in), size=shape)
        return cls(arch, params, {"init_seed": seed})

    @property
    def num_classes(self) -> int:
        return self.arch.num_classes

    def copy(self) -> "GapClassifier":
        return GapClassifier(self.arch, {k: v.copy() for k, v in self.params.items()}, self.meta)

    def bind(self, graph: ad.Graph, requires_grad: bool = False) -> dict[str, ad.Tensor]:
        return {k: graph.leaf(v, requires_grad=requires_grad) for k, v in self.params.items()}

    def check_input(self, shape) -> None:
        if len(shape) not in (3, 4) or shape[-3] != self.arch.in_channels:
            raise DimensionError(f"image must be [{self.arch.in_channels}, H, W] (optionally batched), got {shape}")
        s = self.arch.stride
        h, w = shape[-2:]
        if h % s or w % s or h == 0 or w == 0:
            raise DimensionError(f"image height/width axes ({h}, {w}) must be positive multiples of {s}")

    def forward(self, x: ad.Tensor, params: dict[str, ad.Tensor] | None = None):
        """Return ``(logits, features)`` for an image or a batch of images."""
        self.check_input(x.shape)
        p = params if params is not None else self.bind(x.graph)
        h = ad.scale(ad.add_const(x, -self.arch.input_mean), 1.0 / self.arch.input_std)
        for i in range(len(self.arch.widths)):
            h = ad.conv2d(h, p[f"conv{i}.w"], p[f"conv{i}.b"], stride=1, padding=1)
            h = ad.relu(h)
            h = ad.avg_pool2(h)
        feats = ad.relu(ad.conv2d(h, p["feat.w"], p["feat.b"]))
        logits = ad.linear(ad.gap(feats), p["head.w"], p["head.b"])
        return logits, feats

    def predict(self, images: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Plain-array forward pass: ``(logits, features)``."""
        g = ad.Graph()
        logits, feats = self.forward(g.constant(images))
        g.release()
        return logits.data, feats.data

    # flat parameter buffer in declaration order
    def flat_params(self) -> np.ndarray:
        return np.concatenate([self.params[n].ravel() for n, _ in self.arch.param_shapes()])

    @classmethod
    def from_flat(cls, arch: Architecture, flat: np.ndarray, meta: dict | None = None) -> "GapClassifier":
        params, pos = {}, 0
        for name, shape in arch.param_shapes():
            size = int(np.prod(shape))
            params[name] = flat[pos:pos + size].reshape(shape).copy()
            pos += size
        return cls(arch, params, meta)


# ---------------------------------------------------------------------------
# training

@dataclass
class TrainConfig:
    epochs: int = 30
    lr: float = 0.007
    batch: int = 16
    seed: int = 0
    momentum: float = 0.9
    weight_decay: float = 0.025
    cosine: bool = True
    flip: bool = True
    min_accuracy: float = 0.95

    def validate(self):
        if self.epochs < 0 or self.batch < 1 or self.lr < 0 or not 0 <= self.momentum < 1:
            raise ValidationError(f"invalid training config {self}")


def per_class_accuracy(model: GapClassifier, images: np.ndarray, targets: np.ndarray, batch: int = 64) -> np.ndarray:
    preds = []
    for i in range(0, len(images), batch):
        logits, _ = model.predict(images[i:i + batch])
        preds.append(logits > 0.0)
    pred = np.concatenate(preds)
    return (pred == (targets > 0.5)).mean(axis=0)


def train(
    images: np.ndarray,
    targets: np.ndarray,
    config: TrainConfig = TrainConfig(),
    heldout: tuple[np.ndarray, np.ndarray] | None = None,
    arch: Architecture | None = None,
) -> GapClassifier:
    """Minibatch momentum SGD on sigmoid BCE, summed over the images of a batch.

    When ``heldout`` is given, the mean per-class accuracy on it must reach
    ``config.min_accuracy`` or :class:`TrainingError` is raised. The recorded
    ``loss_history`` holds the mean minibatch loss of each epoch.
    """
    config.validate()
    targets = np.asarray(targets, dtype=np.float64)
    if targets.ndim != 2 or targets.shape[1] < 2:
        raise ValidationError("training needs multi-label targets with at least 2 classes")
    if len(images) != len(targets):
        raise ValidationError(f"{len(images)} images vs {len(targets)} target rows")
    arch = arch or Architecture(num_classes=targets.shape[1])
    model = GapClassifier.initialize(arch, seed=config.seed)
    velocity = {k: np.zeros_like(v) for k, v in model.params.items()}
    rng = np.random.default_rng([config.seed, 1])
    history = []
    step = 0
    n = len(images)
    steps_per_epoch = -(-n // config.batch)
    total_steps = max(config.epochs * steps_per_epoch, 1)
    for epoch in range(config.epochs):
        order = rng.permutation(n)
        flips = rng.random(n) < 0.5 if config.flip else np.zeros(n, dtype=bool)
        total, count = 0.0, 0
        for start in range(0, n, config.batch):
            idx = order[start:start + config.batch]
            xb = images[idx].copy()
            fl = flips[idx]
            xb[fl] = xb[fl][..., ::-1]
            g = ad.Graph()
            p = model.bind(g, requires_grad=True)
            try:
                logits, _ = model.forward(g.constant(xb), p)
                loss = ad.sigmoid_bce(logits, targets[idx])
                g.backward(ad.scale(loss, float(len(idx))))
            except ad.NonFiniteError as exc:
                raise TrainingError(f"loss diverged at step {step}: {exc}", step=step) from None
            value = float(loss.data)
            lr = config.lr
            if config.cosine:
                lr = 0.5 * config.lr * (1.0 + math.cos(math.pi * step / total_steps))
            for k, t in p.items():
                grad = t.grad
                if config.weight_decay and k.endswith(".w"):
                    grad = grad + config.weight_decay * model.params[k]
                velocity[k] = config.momentum * velocity[k] + grad
                model.params[k] = model.params[k] - lr * velocity[k]
            total += value * len(idx)
            count += len(idx)
            step += 1
        history.append(total / count)
    model.meta = {
        "seed": config.seed,
        "epochs": config.epochs,
        "lr": config.lr,
        "batch": config.batch,
        "loss_history": history,
        "final_loss": history[-1] if history else None,
    }
    if heldout is not None:
        acc = per_class_accuracy(model, *heldout)
        model.meta["heldout_accuracy"] = [float(a) for a in acc]
        model.meta["heldout_mean_accuracy"] = float(acc.mean())
        if acc.mean() < config.min_accuracy:
            raise TrainingError(
                f"held-out mean per-class accuracy {acc.mean():.4f} below gate {config.min_accuracy}"
            )
    return model


# ---------------------------------------------------------------------------
# checkpoints

def checkpoint_bytes(model: GapClassifier) -> bytes:
    flat = model.flat_params()
    header = {
        "arch": model.arch.to_json(),
        "param_count": int(flat.size),
        "meta": model.meta,
    }
    hb = json.dumps(header, sort_keys=True).encode("utf-8")
    return MAGIC + struct.pack("<II", FORMAT_VERSION, len(hb)) + hb + flat.astype("<f8").tobytes()


def save_checkpoint(model: GapClassifier, path) -> None:
    Path(path).write_bytes(checkpoint_bytes(model))


def parse_checkpoint(blob: bytes) -> GapClassifier:
    if len(blob) < 12 or blob[:4] != MAGIC:
        raise CheckpointFormatError("not an ADVC checkpoint (bad magic or truncated)")
    version, hlen = struct.unpack("<II", blob[4:12])
    if version != FORMAT_VERSION:
        raise CheckpointFormatError(f"checkpoint version {version}, expected {FORMAT_VERSION}")
    if len(blob) < 12 + hlen:
        raise CheckpointFormatError("truncated checkpoint header")
    try:
        header = json.loads(blob[12:12 + hlen].decode("utf-8"))
        arch = Architecture.from_json(header["arch"])
        count = int(header["param_count"])
    except (ValueError, KeyError, TypeError) as exc:
        raise CheckpointFormatError(f"corrupt checkpoint header: {exc}") from None
    body = blob[12 + hlen:]
    expected = sum(int(np.prod(s)) for _, s in arch.param_shapes())
    if count != expected:
        raise CheckpointFormatError(f"header declares {count} parameters, architecture needs {expected}")
    if len(body) != 8 * count:
        raise CheckpointFormatError(f"parameter block holds {len(body)} bytes, header declares {8 * count}")
    flat = np.frombuffer(body, dtype="<f8").astype(np.float64)
    return GapClassifier.from_flat(arch, flat, header.get("meta"))


def load_checkpoint(path) -> GapClassifier:
    return parse_checkpoint(Path(path).read_bytes())
