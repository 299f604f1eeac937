"""Minimal reverse-mode differentiation over float64 numpy arrays.

A :class:`Graph` is a tape. Tensors created through it (leaves, constants, or
op outputs) append nodes in execution order; :meth:`Graph.backward` walks the
tape once in reverse. Only the operations the classifier and the climbing
objective need are provided.

Most ops accept an optional leading batch axis, so ``conv2d`` works on both
``[C, H, W]`` and ``[N, C, H, W]`` inputs.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .errors import DimensionError, GraphStateError, AdvCamError, ValidationError


class NonFiniteError(AdvCamError, FloatingPointError):
    pass


class Tensor:
    """A node value living on a :class:`Graph`."""

    __slots__ = ("data", "graph", "index", "requires_grad", "grad")

    def __init__(self, data: np.ndarray, graph: "Graph", index: int, requires_grad: bool):
        self.data = data
        self.graph = graph
        self.index = index
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, op={self.graph.nodes[self.index].op!r})"

    def __add__(self, other):
        return add(self, other) if isinstance(other, Tensor) else add_const(self, other)

    def __sub__(self, other):
        return sub(self, other) if isinstance(other, Tensor) else add_const(self, -np.asarray(other))

    def __mul__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("tensor-by-tensor products are not supported")
        if np.isscalar(other):
            return scale(self, float(other))
        return mul_const(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)


class _Node:
    __slots__ = ("op", "inputs", "backward")

    def __init__(self, op: str, inputs: tuple[int, ...], backward: Callable | None):
        self.op = op
        self.inputs = inputs
        self.backward = backward


class Graph:
    """Operation tape. Use one graph per forward/backward pass."""

    def __init__(self):
        self.nodes: list[_Node] = []
        self._tensors: list[Tensor] = []
        self._consumed = False

    def __len__(self):
        return len(self.nodes)

    def leaf(self, data, requires_grad: bool = True) -> Tensor:
        arr = np.array(data, dtype=np.float64)
        return self._record("leaf", (), arr, None, requires_grad)

    def constant(self, data) -> Tensor:
        return self.leaf(data, requires_grad=False)

    def _record(self, op, inputs: Sequence[Tensor], out: np.ndarray, backward, requires_grad=None) -> Tensor:
        if self._consumed:
            raise GraphStateError("graph already differentiated; record a new graph")
        for t in inputs:
            if t.graph is not self:
                raise GraphStateError(f"{op}: input belongs to a different graph")
        if not np.all(np.isfinite(out)):
            raise NonFiniteError(f"{op} produced non-finite values")
        if requires_grad is None:
            requires_grad = any(t.requires_grad for t in inputs)
        node = _Node(op, tuple(t.index for t in inputs), backward if requires_grad else None)
        t = Tensor(out, self, len(self.nodes), requires_grad)
        self.nodes.append(node)
        self._tensors.append(t)
        return t

    def backward(self, loss: Tensor) -> None:
        """Populate ``.grad`` on every leaf. Leaves that do not reach ``loss`` get zeros."""
        if self._consumed:
            raise GraphStateError("backward already called on this graph")
        if loss.graph is not self:
            raise GraphStateError("loss belongs to a different graph")
        if loss.data.size != 1:
            raise DimensionError(f"backward needs a scalar loss, got shape {loss.data.shape}")
        self._consumed = True
        grads: list[np.ndarray | None] = [None] * len(self.nodes)
        grads[loss.index] = np.ones_like(loss.data)
        for i in range(loss.index, -1, -1):
            node = self.nodes[i]
            g = grads[i]
            if g is None or node.backward is None:
                continue
            in_grads = node.backward(g)
            for j, gj in zip(node.inputs, in_grads):
                if gj is None or not self._tensors[j].requires_grad:
                    continue
                if grads[j] is None:
                    grads[j] = gj
                else:
                    grads[j] = grads[j] + gj
        for i, node in enumerate(self.nodes):
            if node.op == "leaf":
                t = self._tensors[i]
                if t.requires_grad:
                    t.grad = grads[i] if grads[i] is not None else np.zeros_like(t.data)
        self.release()

    def release(self) -> None:
        """Drop saved activations and tensor references; the graph becomes unusable.

        Tensors point back at their graph, so without this a discarded tape
        lingers until the cyclic garbage collector runs.
        """
        self._consumed = True
        for node in self.nodes:
            node.backward = None
        self._tensors = []


def _as_graph(*ts: Tensor) -> Graph:
    return ts[0].graph


# ---------------------------------------------------------------------------
# elementwise / reduction ops

def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise DimensionError(f"add: shapes {a.shape} and {b.shape} differ")
    return a.graph._record("add", (a, b), a.data + b.data, lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise DimensionError(f"sub: shapes {a.shape} and {b.shape} differ")
    return a.graph._record("sub", (a, b), a.data - b.data, lambda g: (g, -g))


def add_const(a: Tensor, c) -> Tensor:
    c = np.asarray(c, dtype=np.float64)
    out = a.data + c
    if out.shape != a.shape:
        raise DimensionError(f"add_const: constant of shape {c.shape} changes shape {a.shape}")
    return a.graph._record("add_const", (a,), out, lambda g: (g,))


def scale(a: Tensor, s: float) -> Tensor:
    s = float(s)
    return a.graph._record("scale", (a,), a.data * s, lambda g: (g * s,))


def mul_const(a: Tensor, c) -> Tensor:
    c = np.asarray(c, dtype=np.float64)
    out = a.data * c
    if out.shape != a.shape:
        raise DimensionError(f"mul_const: constant of shape {c.shape} changes shape {a.shape}")
    return a.graph._record("mul_const", (a,), out, lambda g: (g * c,))


def abs_(a: Tensor) -> Tensor:
    # subgradient 0 at exactly 0
    sign = np.sign(a.data)
    return a.graph._record("abs", (a,), np.abs(a.data), lambda g: (g * sign,))


def relu(a: Tensor) -> Tensor:
    pos = a.data > 0
    return a.graph._record("relu", (a,), np.where(pos, a.data, 0.0), lambda g: (g * pos,))


def sum_(a: Tensor, axis=None) -> Tensor:
    out = np.sum(a.data, axis=axis)
    shape = a.shape

    def backward(g):
        if axis is None:
            return (np.full(shape, float(g)),)
        return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)

    return a.graph._record("sum", (a,), np.asarray(out, dtype=np.float64), backward)


def masked_sum(a: Tensor, mask) -> Tensor:
    """Sum of ``a * mask`` over all elements; ``mask`` is a constant."""
    mask = np.asarray(mask, dtype=np.float64)
    if mask.shape != a.shape:
        raise DimensionError(f"masked_sum: mask shape {mask.shape} != tensor shape {a.shape}")
    out = np.asarray(np.sum(a.data * mask))
    return a.graph._record("masked_sum", (a,), out, lambda g: (float(g) * mask,))


def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    return a.graph._record("reshape", (a,), a.data.reshape(shape), lambda g: (g.reshape(old),))


def hflip(a: Tensor) -> Tensor:
    return a.graph._record("hflip", (a,), a.data[..., ::-1].copy(), lambda g: (g[..., ::-1].copy(),))


# ---------------------------------------------------------------------------
# network ops

def _with_batch(x: np.ndarray, ndim: int) -> tuple[np.ndarray, bool]:
    if x.ndim == ndim - 1:
        return x[None], True
    if x.ndim != ndim:
        raise DimensionError(f"expected {ndim - 1}-d or {ndim}-d input, got shape {x.shape}")
    return x, False


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of ``[N?, C_in, H, W]`` with ``[C_out, C_in, k, k]``."""
    xd, squeezed = _with_batch(x.data, 4)
    w = kernel.data
    if w.ndim != 4 or w.shape[2] != w.shape[3]:
        raise DimensionError(f"conv2d: kernel must be [C_out, C_in, k, k], got {w.shape}")
    c_out, c_in, k, _ = w.shape
    if k % 2 == 0:
        raise DimensionError(f"conv2d: kernel size along axes (2, 3) must be odd, got {k}")
    n, c, h, wd = xd.shape
    if c != c_in:
        raise DimensionError(f"conv2d: input channel axis has {c}, kernel axis 1 expects {c_in}")
    if bias is not None and bias.shape != (c_out,):
        raise DimensionError(f"conv2d: bias shape {bias.shape} != ({c_out},)")
    ho_num, wo_num = h + 2 * padding - k, wd + 2 * padding - k
    if ho_num < 0 or ho_num % stride:
        raise DimensionError(f"conv2d: height axis {h} incompatible with k={k}, stride={stride}, padding={padding}")
    if wo_num < 0 or wo_num % stride:
        raise DimensionError(f"conv2d: width axis {wd} incompatible with k={k}, stride={stride}, padding={padding}")
    ho, wo = ho_num // stride + 1, wo_num // stride + 1

    xp = np.pad(xd, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else xd
    xp = np.ascontiguousarray(xp)
    s = xp.strides
    cols = np.lib.stride_tricks.as_strided(
        xp, shape=(n, ho, wo, c, k, k), strides=(s[0], s[2] * stride, s[3] * stride, s[1], s[2], s[3])
    ).reshape(n * ho * wo, c * k * k)
    wm = w.reshape(c_out, c * k * k)
    out = cols @ wm.T
    if bias is not None:
        out = out + bias.data
    out = np.ascontiguousarray(out.reshape(n, ho, wo, c_out).transpose(0, 3, 1, 2))
    if squeezed:
        out = out[0]
    hp, wp = xp.shape[2], xp.shape[3]
    x_needs, w_needs = x.requires_grad, kernel.requires_grad

    def backward(g):
        gb = g[None] if squeezed else g
        go = gb.transpose(0, 2, 3, 1).reshape(-1, c_out)
        gx = gw = gbias = None
        if w_needs:
            gw = (go.T @ cols).reshape(w.shape)
        if bias is not None and bias.requires_grad:
            gbias = go.sum(axis=0)
        if x_needs:
            dcols = (go @ wm).reshape(n, ho, wo, c, k, k)
            dxp = np.zeros((n, c, hp, wp))
            for i in range(k):
                for j in range(k):
                    dxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            gx = dxp[:, :, padding:hp - padding, padding:wp - padding] if padding else dxp
            if squeezed:
                gx = gx[0]
        return (gx, gw) if bias is None else (gx, gw, gbias)

    inputs = (x, kernel) if bias is None else (x, kernel, bias)
    return x.graph._record("conv2d", inputs, out, backward)


def avg_pool2(x: Tensor) -> Tensor:
    """2x2 average downsampling over the last two axes."""
    *lead, h, w = x.shape
    if h % 2 or w % 2:
        raise DimensionError(f"avg_pool2: spatial axes ({h}, {w}) must be even")
    out = x.data.reshape(*lead, h // 2, 2, w // 2, 2).mean(axis=(-3, -1))

    def backward(g):
        return (np.repeat(np.repeat(g, 2, axis=-2), 2, axis=-1) * 0.25,)

    return x.graph._record("avg_pool2", (x,), out, backward)


def gap(x: Tensor) -> Tensor:
    """Per-channel spatial mean: ``[..., C, H, W] -> [..., C]``."""
    if x.ndim < 3:
        raise DimensionError(f"gap: expected [..., C, H, W], got {x.shape}")
    h, w = x.shape[-2:]
    shape = x.shape
    out = x.data.mean(axis=(-2, -1))
    inv = 1.0 / (h * w)
    return x.graph._record(
        "gap", (x,), out, lambda g: (np.broadcast_to(g[..., None, None] * inv, shape).copy(),)
    )


def linear(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """``weight @ x + bias`` on ``[..., C]`` inputs with ``weight`` of shape ``[K, C]``."""
    if weight.ndim != 2 or x.shape[-1] != weight.shape[1]:
        raise DimensionError(f"linear: input last axis {x.shape[-1:]} vs weight axis 1 of {weight.shape}")
    if bias.shape != (weight.shape[0],):
        raise DimensionError(f"linear: bias shape {bias.shape} != ({weight.shape[0]},)")
    out = x.data @ weight.data.T + bias.data
    k, c = weight.shape

    def backward(g):
        g2 = g.reshape(-1, k)
        return (
            g @ weight.data,
            g2.T @ x.data.reshape(-1, c),
            g2.sum(axis=0),
        )

    return x.graph._record("linear", (x, weight, bias), out, backward)


def class_maps(features: Tensor, weight: Tensor) -> Tensor:
    """Signed class activation maps: ``[..., D, h, w]`` x ``[K, D]`` -> ``[..., K, h, w]``."""
    d = features.shape[-3]
    if weight.ndim != 2 or weight.shape[1] != d:
        raise DimensionError(f"class_maps: feature channel axis {d} vs weight axis 1 of {weight.shape}")
    f = features.data
    w = weight.data
    out = np.einsum("kd,...dhw->...khw", w, f)

    def backward(g):
        gf = np.einsum("kd,...khw->...dhw", w, g)
        gw = np.einsum("...khw,...dhw->kd", g, f) if weight.requires_grad else None
        return gf, gw

    return features.graph._record("class_maps", (features, weight), out, backward)


def _stable_sigmoid(z: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(z))
    return np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def sigmoid_bce(logits: Tensor, targets) -> Tensor:
    """Mean binary cross-entropy with logits, computed in log-sum-exp form."""
    t = np.asarray(targets, dtype=np.float64)
    if t.shape != logits.shape:
        raise DimensionError(f"sigmoid_bce: targets {t.shape} vs logits {logits.shape}")
    if not np.all((t == 0.0) | (t == 1.0)):
        raise ValidationError("sigmoid_bce: targets must be 0 or 1")
    z = logits.data
    n = z.size
    loss = np.asarray(np.mean(np.maximum(z, 0.0) - z * t + np.log1p(np.exp(-np.abs(z)))))
    return logits.graph._record(
        "sigmoid_bce", (logits,), loss, lambda g: (float(g) * (_stable_sigmoid(z) - t) / n,)
    )


# ---------------------------------------------------------------------------
# resampling

def bilinear_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Row-stochastic ``[n_out, n_in]`` interpolation matrix (half-pixel centres)."""
    if n_in < 1 or n_out < 1:
        raise DimensionError(f"bilinear resize needs positive sizes, got {n_in} -> {n_out}")
    m = np.zeros((n_out, n_in))
    ratio = n_in / n_out
    for i in range(n_out):
        src = max((i + 0.5) * ratio - 0.5, 0.0)
        i0 = min(int(np.floor(src)), n_in - 1)
        i1 = min(i0 + 1, n_in - 1)
        frac = src - i0
        m[i, i0] += 1.0 - frac
        m[i, i1] += frac
    return m


def resize_array(a: np.ndarray, h: int, w: int) -> np.ndarray:
    """Bilinear resize of the last two axes of a plain array."""
    rh = bilinear_matrix(a.shape[-2], h)
    rw = bilinear_matrix(a.shape[-1], w)
    return rh @ a @ rw.T


def bilinear_resize(x: Tensor, h: int, w: int) -> Tensor:
    rh = bilinear_matrix(x.shape[-2], h)
    rw = bilinear_matrix(x.shape[-1], w)
    out = rh @ x.data @ rw.T
    return x.graph._record("bilinear_resize", (x,), out, lambda g: (rh.T @ g @ rw,))
