"""Dense 4-D tensors with a tape-based reverse-mode autodiff.

Every value is a float64 array of shape (n, c, h, w), row-major. Operations
record themselves on the active :class:`Tape` (if any) together with a
closure that maps the output gradient to input gradients.

    with Tape() as tape:
        y = conv2d(x, kernel, padding=1)
        loss = total(hadamard(y, y))
    tape.backward(loss)
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, NamedTuple, Sequence

import numpy as np


class ShapeError(ValueError):
    pass


class NumericError(ArithmeticError):
    pass


class Shape(NamedTuple):
    n: int
    c: int
    h: int
    w: int


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=np.float64)
        if arr.ndim != 4:
            raise ShapeError(f"tensor must be 4-D (n, c, h, w), got shape {arr.shape}")
        if min(arr.shape) < 1:
            raise ShapeError(f"all dimensions must be >= 1, got {arr.shape}")
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name

    @classmethod
    def _wrap(cls, arr: np.ndarray, requires_grad: bool) -> "Tensor":
        t = cls.__new__(cls)
        t.data = arr
        t.grad = None
        t.requires_grad = requires_grad
        t.name = None
        return t

    @property
    def shape(self) -> Shape:
        return Shape(*self.data.shape)

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got {self.shape}")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={tuple(self.shape)}, requires_grad={self.requires_grad})"


def zeros(n: int, c: int, h: int, w: int, requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros((n, c, h, w)), requires_grad=requires_grad)


@dataclass
class ConvKernel:
    """Convolution weights (out, in, kh, kw) plus an optional per-channel bias."""

    weight: Tensor
    bias: Tensor | None = None

    def __post_init__(self):
        o, _, kh, kw = self.weight.shape
        if kh % 2 == 0 or kw % 2 == 0:
            raise ShapeError(f"kernel extents must be odd, got {kh}x{kw}")
        if self.bias is not None and tuple(self.bias.shape) != (1, o, 1, 1):
            raise ShapeError(f"bias must have shape (1, {o}, 1, 1), got {tuple(self.bias.shape)}")

    @property
    def out_channels(self) -> int:
        return self.weight.shape[0]

    @property
    def in_channels(self) -> int:
        return self.weight.shape[1]

    @property
    def kh(self) -> int:
        return self.weight.shape[2]

    @property
    def kw(self) -> int:
        return self.weight.shape[3]

    def parameters(self) -> list[Tensor]:
        return [self.weight] if self.bias is None else [self.weight, self.bias]

    @classmethod
    def uniform(cls, rng: np.random.Generator, out_ch: int, in_ch: int, k: int,
                bias: bool = True, scale: float | None = None) -> "ConvKernel":
        """Uniform init in [-scale, scale]; scale defaults to 1/sqrt(fan_in)."""
        fan_in = in_ch * k * k
        a = 1.0 / np.sqrt(fan_in) if scale is None else scale
        w = Tensor(rng.uniform(-a, a, size=(out_ch, in_ch, k, k)), requires_grad=True)
        b = Tensor(np.zeros((1, out_ch, 1, 1)), requires_grad=True) if bias else None
        return cls(w, b)

    @classmethod
    def he_normal(cls, rng: np.random.Generator, out_ch: int, in_ch: int, k: int,
                  bias: bool = True) -> "ConvKernel":
        std = np.sqrt(2.0 / (in_ch * k * k))
        w = Tensor(rng.normal(0.0, std, size=(out_ch, in_ch, k, k)), requires_grad=True)
        b = Tensor(np.zeros((1, out_ch, 1, 1)), requires_grad=True) if bias else None
        return cls(w, b)


@dataclass
class Node:
    op: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


_ACTIVE: list["Tape"] = []


class Tape:
    """Ordered record of differentiable ops. Use as a context manager."""

    def __init__(self):
        self.nodes: list[Node] = []

    def __enter__(self) -> "Tape":
        _ACTIVE.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE.remove(self)

    def __len__(self) -> int:
        return len(self.nodes)

    def backward(self, output: Tensor, seed: np.ndarray | None = None) -> int:
        """Propagate gradients from ``output`` back to every leaf.

        Leaf grads accumulate across calls. Returns the number of nodes visited.
        """
        if seed is None:
            if output.data.size != 1:
                raise ShapeError("backward from a non-scalar output needs a seed gradient")
            seed = np.ones_like(output.data)
        else:
            seed = np.asarray(seed, dtype=np.float64)
            if seed.shape != output.data.shape:
                raise ShapeError(f"seed shape {seed.shape} != output shape {output.data.shape}")

        produced = {id(node.output) for node in self.nodes}
        grads: dict[int, np.ndarray] = {id(output): seed}
        leaves: dict[int, Tensor] = {}
        if id(output) not in produced:
            leaves[id(output)] = output

        visited = 0
        for node in reversed(self.nodes):
            visited += 1
            g = grads.pop(id(node.output), None)
            if g is None:
                continue
            for t, gi in zip(node.inputs, node.backward(g)):
                if gi is None or not t.requires_grad:
                    continue
                key = id(t)
                grads[key] = grads[key] + gi if key in grads else gi
                if key not in produced:
                    leaves[key] = t

        for key, t in leaves.items():
            g = grads.get(key)
            if g is None:
                continue
            t.grad = g.copy() if t.grad is None else t.grad + g
        return visited


def backward(output: Tensor, tape: Tape, seed: np.ndarray | None = None) -> int:
    return tape.backward(output, seed)


def active_tape() -> Tape | None:
    return _ACTIVE[-1] if _ACTIVE else None


def apply_op(op: str, inputs: Sequence[Tensor], out: np.ndarray,
             grad_fn: Callable[[np.ndarray], Sequence[np.ndarray | None]]) -> Tensor:
    """Wrap ``out`` as a Tensor and record it on the active tape."""
    if not np.all(np.isfinite(out)):
        raise NumericError(f"{op} produced a non-finite value")
    tape = active_tape()
    track = tape is not None and any(t.requires_grad for t in inputs)
    result = Tensor._wrap(out, track)
    if track:
        tape.nodes.append(Node(op, tuple(inputs), result, grad_fn))
    return result


# --------------------------------------------------------------------------
# convolution


def _out_size(size: int, k: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - k) // stride + 1


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int, oh: int, ow: int) -> np.ndarray:
    n, c = xp.shape[:2]
    cols = np.empty((c, kh, kw, n, oh, ow))
    for i in range(kh):
        for j in range(kw):
            patch = xp[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride]
            cols[:, i, j] = patch.transpose(1, 0, 2, 3)
    return cols.reshape(c * kh * kw, n * oh * ow)


def conv2d(x: Tensor, kernel: ConvKernel, stride: int = 1, padding: int = 0) -> Tensor:
    n, c, h, w = x.shape
    o, ci, kh, kw = kernel.weight.shape
    if c != ci:
        raise ShapeError(f"conv2d: input has {c} channels, kernel expects {ci}")
    if stride < 1 or padding < 0:
        raise ShapeError("conv2d: stride must be >= 1 and padding >= 0")
    oh, ow = _out_size(h, kh, stride, padding), _out_size(w, kw, stride, padding)
    if oh < 1 or ow < 1:
        raise ShapeError(f"conv2d: kernel {kh}x{kw} does not fit input {h}x{w}")

    w2d = kernel.weight.data.reshape(o, -1)
    pointwise = kh == 1 and kw == 1 and stride == 1 and padding == 0
    if pointwise:
        cols = x.data.transpose(1, 0, 2, 3).reshape(c, -1)
    else:
        xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
        cols = _im2col(xp, kh, kw, stride, oh, ow)
    out = (w2d @ cols).reshape(o, n, oh, ow).transpose(1, 0, 2, 3)
    if kernel.bias is not None:
        out = out + kernel.bias.data
    out = np.ascontiguousarray(out)

    def grad_fn(g):
        g2d = g.transpose(1, 0, 2, 3).reshape(o, -1)
        dw = (g2d @ cols.T).reshape(kernel.weight.data.shape)
        db = g.sum(axis=(0, 2, 3)).reshape(1, o, 1, 1) if kernel.bias is not None else None
        if not x.requires_grad:
            return [None, dw] + ([db] if db is not None else [])
        dcols = w2d.T @ g2d
        if pointwise:
            dx = dcols.reshape(c, n, h, w).transpose(1, 0, 2, 3)
        else:
            dcols = dcols.reshape(c, kh, kw, n, oh, ow)
            dxp = np.zeros((n, c, h + 2 * padding, w + 2 * padding))
            for i in range(kh):
                for j in range(kw):
                    dxp[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride] += \
                        dcols[:, i, j].transpose(1, 0, 2, 3)
            dx = dxp[:, :, padding:padding + h, padding:padding + w]
        return [np.ascontiguousarray(dx), dw] + ([db] if db is not None else [])

    return apply_op("conv2d", [x, *kernel.parameters()], out, grad_fn)


def conv2d_reference(x: np.ndarray, weight: np.ndarray, bias: np.ndarray | None = None,
                     stride: int = 1, padding: int = 0) -> np.ndarray:
    """Direct-loop convolution. Slow; used to check :func:`conv2d`."""
    n, c, h, w = x.shape
    o, _, kh, kw = weight.shape
    oh, ow = _out_size(h, kh, stride, padding), _out_size(w, kw, stride, padding)
    out = np.zeros((n, o, oh, ow))
    for b in range(n):
        for oc in range(o):
            for y in range(oh):
                for xx in range(ow):
                    acc = 0.0 if bias is None else float(bias.reshape(-1)[oc])
                    for ic in range(c):
                        for i in range(kh):
                            for j in range(kw):
                                r = y * stride + i - padding
                                s = xx * stride + j - padding
                                if 0 <= r < h and 0 <= s < w:
                                    acc += x[b, ic, r, s] * weight[oc, ic, i, j]
                    out[b, oc, y, xx] = acc
    return out


def max_pool2d(x: Tensor, size: int = 2) -> Tensor:
    n, c, h, w = x.shape
    if h % size or w % size:
        raise ShapeError(f"max_pool2d: {h}x{w} not divisible by {size}")
    blocks = x.data.reshape(n, c, h // size, size, w // size, size)
    out = blocks.max(axis=(3, 5))

    def grad_fn(g):
        # route to the first maximum in each window
        flat = blocks.transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // size, w // size, size * size)
        arg = flat.argmax(axis=-1)
        mask = np.zeros_like(flat)
        np.put_along_axis(mask, arg[..., None], 1.0, axis=-1)
        dx = (mask * g[..., None]).reshape(n, c, h // size, w // size, size, size)
        return [dx.transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w)]

    return apply_op("max_pool2d", [x], out, grad_fn)


# --------------------------------------------------------------------------
# elementwise


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return apply_op("relu", [x], x.data * mask, lambda g: [g * mask])


def _stable_sigmoid(z: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(z))
    return np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def sigmoid(x: Tensor) -> Tensor:
    y = _stable_sigmoid(x.data)
    return apply_op("sigmoid", [x], y, lambda g: [g * y * (1.0 - y)])


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    return apply_op("tanh", [x], y, lambda g: [g * (1.0 - y * y)])


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> bool:
    """True when b is a single-channel tensor broadcast over a's channels."""
    if a.shape == b.shape:
        return False
    if b.shape.c == 1 and (a.shape.n, a.shape.h, a.shape.w) == (b.shape.n, b.shape.h, b.shape.w):
        return True
    raise ShapeError(f"{op}: incompatible shapes {tuple(a.shape)} and {tuple(b.shape)}")


def add(a: Tensor, b: Tensor) -> Tensor:
    bc = _check_broadcast(a, b, "add")

    def grad_fn(g):
        return [g, g.sum(axis=1, keepdims=True) if bc else g]

    return apply_op("add", [a, b], a.data + b.data, grad_fn)


def hadamard(a: Tensor, b: Tensor) -> Tensor:
    bc = _check_broadcast(a, b, "hadamard")
    ad, bd = a.data, b.data

    def grad_fn(g):
        gb = g * ad
        return [g * bd, gb.sum(axis=1, keepdims=True) if bc else gb]

    return apply_op("hadamard", [a, b], ad * bd, grad_fn)


def add_bias(x: Tensor, bias: Tensor) -> Tensor:
    """x + bias with bias of shape (1, c, 1, 1)."""
    if tuple(bias.shape) != (1, x.shape.c, 1, 1):
        raise ShapeError(f"add_bias: bias shape {tuple(bias.shape)} vs {x.shape.c} channels")
    return apply_op("add_bias", [x, bias], x.data + bias.data,
                    lambda g: [g, g.sum(axis=(0, 2, 3)).reshape(bias.data.shape)])


def scale(x: Tensor, k: float) -> Tensor:
    return apply_op("scale", [x], x.data * k, lambda g: [g * k])


def total(x: Tensor) -> Tensor:
    """Sum of all entries as a (1, 1, 1, 1) tensor."""
    shape = x.data.shape
    return apply_op("total", [x], np.array(x.data.sum()).reshape(1, 1, 1, 1),
                    lambda g: [np.broadcast_to(g.reshape(()), shape).copy()])


# --------------------------------------------------------------------------
# structural


def concat(tensors: Sequence[Tensor]) -> Tensor:
    """Channel-axis concatenation."""
    ref = tensors[0].shape
    for t in tensors[1:]:
        if (t.shape.n, t.shape.h, t.shape.w) != (ref.n, ref.h, ref.w):
            raise ShapeError(f"concat: {tuple(t.shape)} incompatible with {tuple(ref)}")
    bounds = np.cumsum([0] + [t.shape.c for t in tensors])
    out = np.concatenate([t.data for t in tensors], axis=1)

    def grad_fn(g):
        return [g[:, bounds[i]:bounds[i + 1]] for i in range(len(tensors))]

    return apply_op("concat", list(tensors), out, grad_fn)


def channel_slice(x: Tensor, start: int, stop: int) -> Tensor:
    if not 0 <= start < stop <= x.shape.c:
        raise ShapeError(f"channel_slice [{start}:{stop}] out of range for {x.shape.c} channels")
    c = x.shape.c

    def grad_fn(g):
        dx = np.zeros((x.shape.n, c, x.shape.h, x.shape.w))
        dx[:, start:stop] = g
        return [dx]

    return apply_op("channel_slice", [x], x.data[:, start:stop].copy(), grad_fn)


def repeat_batch(x: Tensor, n: int) -> Tensor:
    if x.shape.n != 1:
        raise ShapeError("repeat_batch needs a batch-1 tensor")
    out = np.repeat(x.data, n, axis=0)
    return apply_op("repeat_batch", [x], out, lambda g: [g.sum(axis=0, keepdims=True)])


def spatial_softmax(x: Tensor) -> Tensor:
    """Softmax over all h*w positions, separately per batch item."""
    n, c, h, w = x.shape
    if c != 1:
        raise ShapeError(f"spatial_softmax expects 1 channel, got {c}")
    z = x.data.reshape(n, -1)
    e = np.exp(z - z.max(axis=1, keepdims=True))
    y = (e / e.sum(axis=1, keepdims=True)).reshape(n, 1, h, w)

    def grad_fn(g):
        inner = (g * y).sum(axis=(1, 2, 3), keepdims=True)
        return [y * (g - inner)]

    return apply_op("spatial_softmax", [x], y, grad_fn)
