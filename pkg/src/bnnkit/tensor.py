"""Dense float64 tensors with a define-by-run reverse-mode tape.

Operations record themselves on the active :class:`Tape` (if any) whenever at
least one input requires a gradient. ``Tape.backward`` walks the recorded
nodes in reverse order exactly once and accumulates gradients on leaves.

Only the handful of ops a binary ResNet needs are provided. Elementwise ops
require equal shapes (or a python scalar); per-channel ops are explicit.
"""
from __future__ import annotations

import threading
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import _conv_kernels as _k

DTYPE = np.float64
DIRECT_MAX_CHANNEL_PRODUCT = 256


class ShapeError(ValueError):
    pass


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=DTYPE)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def zero_grad(self) -> None:
        self.grad = None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(neg(self), other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def sum(self):
        return tsum(self)

    def mean(self):
        return tmean(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(data, name: str | None = None) -> Tensor:
    return Tensor(np.array(data, dtype=DTYPE), requires_grad=True, name=name)


class _Node:
    __slots__ = ("inputs", "output", "backward", "op")

    def __init__(self, inputs, output, backward, op):
        self.inputs = inputs
        self.output = output
        self.backward = backward
        self.op = op


_local = threading.local()


def _tape_stack() -> list:
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = []
    return stack


def active_tape() -> "Tape | None":
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tape:
    """Ordered record of differentiable operations.

    Use as a context manager around a forward pass, then call
    :meth:`backward` on the scalar loss.
    """

    def __init__(self):
        self.nodes: list[_Node] = []

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        _tape_stack().pop()

    def __len__(self) -> int:
        return len(self.nodes)

    def record(self, inputs: Sequence[Tensor], output: Tensor, backward: Callable, op: str) -> None:
        self.nodes.append(_Node(tuple(inputs), output, backward, op))

    def backward(self, loss: Tensor) -> None:
        if loss.data.size != 1:
            raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
        if not self.nodes:
            raise ValueError("backward called on an empty tape")
        # intermediates get fresh grads; leaves accumulate across calls
        for node in self.nodes:
            node.output.grad = None
        loss.grad = np.ones_like(loss.data)
        for node in reversed(self.nodes):
            g = node.output.grad
            if g is None:
                continue
            grads = node.backward(g)
            for inp, gi in zip(node.inputs, grads):
                if gi is None or not inp.requires_grad:
                    continue
                gi = np.asarray(gi, dtype=DTYPE)
                if gi.shape != inp.data.shape:
                    raise ShapeError(f"{node.op}: gradient shape {gi.shape} != input shape {inp.data.shape}")
                inp.grad = gi if inp.grad is None else inp.grad + gi


def make_node(data: np.ndarray, inputs: Sequence[Tensor], backward: Callable, op: str) -> Tensor:
    """Wrap ``data`` as the output of an op, recording it when a tape is active.

    ``backward(g_out)`` must return one gradient (or None) per input. This is
    also the hook used by custom-gradient nodes such as straight-through
    estimators.
    """
    needs = any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=needs)
    tape = active_tape()
    if needs and tape is not None:
        tape.record(inputs, out, backward, op)
    return out


def _check_same(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# -- elementwise ---------------------------------------------------------------

def add(a, b) -> Tensor:
    a = as_tensor(a)
    if not isinstance(b, Tensor):
        c = float(b)
        return make_node(a.data + c, (a,), lambda g: (g,), "add_scalar")
    _check_same(a, b, "add")
    return make_node(a.data + b.data, (a, b), lambda g: (g, g), "add")


def sub(a, b) -> Tensor:
    return add(a, neg(b) if isinstance(b, Tensor) else -float(b))


def neg(a: Tensor) -> Tensor:
    return make_node(-a.data, (a,), lambda g: (-g,), "neg")


def mul(a, b) -> Tensor:
    a = as_tensor(a)
    if not isinstance(b, Tensor):
        c = float(b)
        return make_node(a.data * c, (a,), lambda g: (g * c,), "mul_scalar")
    _check_same(a, b, "mul")
    ad, bd = a.data, b.data
    return make_node(ad * bd, (a, b), lambda g: (g * bd, g * ad), "mul")


def square(a: Tensor) -> Tensor:
    ad = a.data
    return make_node(ad * ad, (a,), lambda g: (2.0 * ad * g,), "square")


def tabs(a: Tensor) -> Tensor:
    ad = a.data
    return make_node(np.abs(ad), (a,), lambda g: (np.sign(ad) * g,), "abs")


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return make_node(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,), "relu")


def tsum(a: Tensor) -> Tensor:
    shape = a.shape
    return make_node(np.array(a.data.sum()), (a,), lambda g: (np.full(shape, float(g)),), "sum")


def tmean(a: Tensor) -> Tensor:
    shape, n = a.shape, a.size
    return make_node(np.array(a.data.mean()), (a,), lambda g: (np.full(shape, float(g) / n),), "mean")


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    old = a.shape
    return make_node(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),), "reshape")


def stack_scalars(items: Iterable[Tensor]) -> Tensor:
    """Sum of scalar tensors (used to total per-layer losses)."""
    items = list(items)
    if not items:
        return Tensor(0.0)
    total = items[0]
    for t in items[1:]:
        total = add(total, t)
    return total


# -- per-channel ---------------------------------------------------------------

def _channel_view(v: np.ndarray, ndim: int) -> np.ndarray:
    return v.reshape((1, -1) + (1,) * (ndim - 2))


def _reduce_channel(g: np.ndarray) -> np.ndarray:
    axes = (0,) + tuple(range(2, g.ndim))
    return g.sum(axis=axes)


def channel_mul(x: Tensor, s: Tensor) -> Tensor:
    """``x[:, c, ...] * s[c]``."""
    if s.data.ndim != 1 or s.shape[0] != x.shape[1]:
        raise ShapeError(f"channel_mul: {s.shape} does not match {x.shape[1]} channels")
    sv = _channel_view(s.data, x.data.ndim)
    xd = x.data

    def backward(g):
        return g * sv, _reduce_channel(g * xd)

    return make_node(xd * sv, (x, s), backward, "channel_mul")


def channel_add(x: Tensor, b: Tensor) -> Tensor:
    """``x[:, c, ...] + b[c]``."""
    if b.data.ndim != 1 or b.shape[0] != x.shape[1]:
        raise ShapeError(f"channel_add: {b.shape} does not match {x.shape[1]} channels")
    bv = _channel_view(b.data, x.data.ndim)
    return make_node(x.data + bv, (x, b), lambda g: (g, _reduce_channel(g)), "channel_add")


# -- linear algebra ------------------------------------------------------------

def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """``x @ w.T + b`` with x: [N, I], w: [O, I], b: [O]."""
    if x.data.ndim != 2 or w.data.ndim != 2 or x.shape[1] != w.shape[1]:
        raise ShapeError(f"linear: input {x.shape} incompatible with weight {w.shape}")
    xd, wd = x.data, w.data
    out = xd @ wd.T
    if b is None:
        return make_node(out, (x, w), lambda g: (g @ wd, g.T @ xd), "linear")
    out = out + b.data
    return make_node(out, (x, w, b), lambda g: (g @ wd, g.T @ xd, g.sum(axis=0)), "linear")


def conv_output_size(size: int, k: int, stride: int, padding: int) -> int:
    # floor division, as in standard strided convolution
    span = size + 2 * padding - k
    if span < 0:
        raise ShapeError(f"kernel {k} larger than padded input {size + 2 * padding}")
    return span // stride + 1


def _pad(x: np.ndarray, padding: int, value: float) -> np.ndarray:
    if padding == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)), constant_values=value)


def _windows(xp: np.ndarray, kh: int, kw: int, stride: int, oh: int, ow: int) -> np.ndarray:
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))
    return win[:, :, : (oh - 1) * stride + 1 : stride, : (ow - 1) * stride + 1 : stride]


class _ConvPlan:
    """im2col over a flat, padded, channel-major copy of the input.

    The padded input is stored as ``[C, N*Hp*Wp]``; the kernel offset (i, j)
    is then a contiguous shift by ``i*Wp + j``. Outputs are computed on the
    full stride-1 grid and subsampled, so border garbage is simply dropped.
    """

    def __init__(self, x_shape, w_shape, stride, padding):
        n, c, h, w = x_shape
        o, ci, kh, kw = w_shape
        if c != ci:
            raise ShapeError(f"conv2d: input has {c} channels, weight expects {ci}")
        self.n, self.c, self.h, self.w = n, c, h, w
        self.o, self.kh, self.kw = o, kh, kw
        self.stride, self.padding = stride, padding
        self.oh = conv_output_size(h, kh, stride, padding)
        self.ow = conv_output_size(w, kw, stride, padding)
        self.hp, self.wp = h + 2 * padding, w + 2 * padding
        self.length = n * self.hp * self.wp
        self.extra = (kh - 1) * self.wp + (kw - 1)
        self.offsets = [i * self.wp + j for i in range(kh) for j in range(kw)]

    def _grid(self, a: np.ndarray) -> np.ndarray:
        s = self.stride
        return a[:, :, : (self.oh - 1) * s + 1 : s, : (self.ow - 1) * s + 1 : s]

    def padded(self, x: np.ndarray, pad_value: float) -> np.ndarray:
        p, L = self.padding, self.length
        buf = np.full((self.c, L + self.extra), pad_value, dtype=DTYPE)
        buf[:, :L].reshape(self.c, self.n, self.hp, self.wp)[:, :, p : p + self.h, p : p + self.w] = x.transpose(1, 0, 2, 3)
        return buf

    def columns(self, buf: np.ndarray) -> np.ndarray:
        L = self.length
        cols = np.empty((self.c, len(self.offsets), L), dtype=DTYPE)
        for k, off in enumerate(self.offsets):
            cols[:, k] = buf[:, off : off + L]
        return cols.reshape(-1, L)

    def output(self, full: np.ndarray) -> np.ndarray:
        grid = self._grid(full.reshape(self.o, self.n, self.hp, self.wp))
        return np.ascontiguousarray(grid.transpose(1, 0, 2, 3))

    def scatter_grad(self, g: np.ndarray) -> np.ndarray:
        full = np.zeros((self.o, self.n, self.hp, self.wp), dtype=DTYPE)
        self._grid(full)[...] = g.transpose(1, 0, 2, 3)
        return full.reshape(self.o, self.length)

    def unpad(self, gbuf: np.ndarray) -> np.ndarray:
        p, L = self.padding, self.length
        grid = gbuf[:, :L].reshape(self.c, self.n, self.hp, self.wp)[:, :, p : p + self.h, p : p + self.w]
        return np.ascontiguousarray(grid.transpose(1, 0, 2, 3))

    def fold(self, gcols: np.ndarray) -> np.ndarray:
        """col2im: sum column gradients back onto the padded buffer."""
        L = self.length
        gcols = gcols.reshape(self.c, len(self.offsets), L)
        gbuf = np.zeros((self.c, L + self.extra), dtype=DTYPE)
        for k, off in enumerate(self.offsets):
            gbuf[:, off : off + L] += gcols[:, k]
        return gbuf

    @property
    def direct(self) -> bool:
        # tiled loops win while the channel product is small; BLAS beyond that
        return self.o * self.c <= DIRECT_MAX_CHANNEL_PRODUCT

    def forward(self, buf: np.ndarray, w: np.ndarray) -> tuple[np.ndarray, np.ndarray | None]:
        if self.direct:
            offs = np.asarray(self.offsets, dtype=np.int64)
            return _k.conv_forward(buf, w.reshape(self.o, self.c, -1), offs, self.length), None
        cols = self.columns(buf)
        return w.reshape(self.o, -1) @ cols, cols

    def grad_weight(self, gfull, buf, cols) -> np.ndarray:
        if cols is None:
            offs = np.asarray(self.offsets, dtype=np.int64)
            return _k.conv_grad_weight(gfull, buf, offs, self.length, self.c).reshape(self.o, self.c, self.kh, self.kw)
        return (gfull @ cols.T).reshape(self.o, self.c, self.kh, self.kw)

    def grad_input(self, gfull, w) -> np.ndarray:
        if self.direct:
            offs = np.asarray(self.offsets, dtype=np.int64)
            gbuf = _k.conv_grad_input(gfull, w.reshape(self.o, self.c, -1), offs, self.length, self.extra)
        else:
            gbuf = self.fold(w.reshape(self.o, -1).T @ gfull)
        return self.unpad(gbuf)


def conv2d_array(x: np.ndarray, w: np.ndarray, stride: int = 1, padding: int = 0, pad_value: float = 0.0) -> np.ndarray:
    """Cross-correlation on raw arrays (no tape)."""
    plan = _ConvPlan(x.shape, w.shape, stride, padding)
    full, _ = plan.forward(plan.padded(np.asarray(x, dtype=DTYPE), pad_value), np.asarray(w, dtype=DTYPE))
    return plan.output(full)


def conv2d_real(x: Tensor, w: Tensor, stride: int = 1, padding: int = 0, pad_value: float = 0.0) -> Tensor:
    """Differentiable 2-D cross-correlation; padded cells hold ``pad_value``.

    x: [N, C, H, W], w: [O, C, Kh, Kw] -> [N, O, H', W'].
    """
    if stride < 1 or padding < 0:
        raise ValueError("stride must be >= 1 and padding >= 0")
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise ShapeError(f"conv2d: expected 4-d input and weight, got {x.shape} and {w.shape}")
    plan = _ConvPlan(x.shape, w.shape, stride, padding)
    buf = plan.padded(x.data, pad_value)
    wd = w.data
    full, cols = plan.forward(buf, wd)
    out = plan.output(full)

    def backward(g):
        gfull = plan.scatter_grad(g)
        gw = plan.grad_weight(gfull, buf, cols) if w.requires_grad else None
        gx = plan.grad_input(gfull, wd) if x.requires_grad else None
        return gx, gw

    return make_node(out, (x, w), backward, "conv2d")


def global_avg_pool(x: Tensor) -> Tensor:
    """[N, C, H, W] -> [N, C]."""
    n, c, h, w = x.shape
    area = h * w

    def backward(g):
        return (np.broadcast_to(g[:, :, None, None] / area, (n, c, h, w)).copy(),)

    return make_node(x.data.mean(axis=(2, 3)), (x,), backward, "global_avg_pool")


def max_pool2d(x: Tensor, k: int = 3, stride: int = 2, padding: int = 1) -> Tensor:
    n, c, h, w = x.shape
    oh = conv_output_size(h, k, stride, padding)
    ow = conv_output_size(w, k, stride, padding)
    xp = _pad(x.data, padding, -np.inf)
    win = _windows(xp, k, k, stride, oh, ow).reshape(n, c, oh, ow, k * k)
    arg = win.argmax(axis=-1)
    out = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]

    def backward(g):
        gxp = np.zeros(xp.shape, dtype=DTYPE)
        ki, kj = np.divmod(arg, k)
        rows = np.arange(oh)[None, None, :, None] * stride + ki
        cols = np.arange(ow)[None, None, None, :] * stride + kj
        nn = np.arange(n)[:, None, None, None]
        cc = np.arange(c)[None, :, None, None]
        np.add.at(gxp, (nn, cc, rows, cols), g)
        return (gxp[:, :, padding : padding + h, padding : padding + w],)

    return make_node(out, (x,), backward, "max_pool2d")


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean softmax cross-entropy over the batch."""
    z = logits.data
    labels = np.asarray(labels, dtype=np.int64)
    n = z.shape[0]
    shifted = z - z.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - logsum
    loss = -logp[np.arange(n), labels].mean()

    def backward(g):
        p = np.exp(logp)
        p[np.arange(n), labels] -= 1.0
        return (p * (float(g) / n),)

    return make_node(np.array(loss), (logits,), backward, "cross_entropy")


def finite_diff_grad(f: Callable[[np.ndarray], float], x, h: float = 1e-4) -> np.ndarray:
    """Central-difference gradient of a scalar function of an array."""
    if h <= 0:
        raise ValueError("h must be positive")
    x = np.array(x.data if isinstance(x, Tensor) else x, dtype=DTYPE)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(f(x))
        flat[i] = orig - h
        fm = float(f(x))
        flat[i] = orig
        gflat[i] = (fp - fm) / (2 * h)
    return grad
