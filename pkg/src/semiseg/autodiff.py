"""Dense numpy tensors with reverse-mode automatic differentiation.

Only the handful of operators a 2D U-Net needs are provided.  Every operator
records its parents and a closure computing the vector-Jacobian product, and
:func:`backward` walks the resulting graph once in reverse topological order.

Image tensors are laid out ``(batch, channels, height, width)``.
"""
from __future__ import annotations

import contextlib
import threading
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

DEFAULT_DTYPE = np.float64


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible with an operator."""


_state = threading.local()


def is_grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (inference only)."""
    prev = is_grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype if dtype is not None else None)
        if arr.dtype.kind != "f":
            arr = arr.astype(DEFAULT_DTYPE)
        self.data: np.ndarray = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self.op = "leaf"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op!r}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, _as_tensor(other, self))

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, _as_tensor(other, self))

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __sub__(self, other):
        return add(self, scale(_as_tensor(other, self), -1.0))

    def sum(self) -> "Tensor":
        return sum_all(self)

    def backward(self) -> int:
        return backward(self)


def _as_tensor(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.broadcast_to(np.asarray(x, dtype=like.dtype), like.shape).copy())


def _make(data: np.ndarray, parents: tuple[Tensor, ...], backward_fn, op: str) -> Tensor:
    out = Tensor(data)
    if is_grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward_fn
        out.op = op
    return out


def backward(loss: Tensor) -> int:
    """Populate ``.grad`` on every ``requires_grad`` tensor reachable from ``loss``.

    Gradients accumulate additively, both across fan-out within the graph and
    into leaves that already hold a gradient.  Returns the number of recorded
    operations visited, which is each operation exactly once.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward() needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ValueError("loss does not depend on any tensor requiring gradients")

    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    visited = 0
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.is_leaf:
            node.grad = g if node.grad is None else node.grad + g
            continue
        node.grad = g
        visited += 1
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
    return visited


def count_graph_ops(loss: Tensor) -> int:
    """Number of distinct recorded (non-leaf) operations reachable from ``loss``."""
    seen: set[int] = set()
    stack = [loss]
    n = 0
    while stack:
        node = stack.pop()
        if id(node) in seen or not node.requires_grad:
            continue
        seen.add(id(node))
        if not node.is_leaf:
            n += 1
        stack.extend(node._parents)
    return n


# ---------------------------------------------------------------------------
# elementwise


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"add: shape mismatch {a.shape} vs {b.shape}")
    return _make(a.data + b.data, (a, b), lambda g: (g, g), "add")


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"mul: shape mismatch {a.shape} vs {b.shape}")
    ad, bd = a.data, b.data
    return _make(ad * bd, (a, b), lambda g: (g * bd, g * ad), "mul")


def scale(a: Tensor, k: float) -> Tensor:
    return _make(a.data * k, (a,), lambda g: (g * k,), "scale")


def sum_all(a: Tensor) -> Tensor:
    shape = a.shape
    return _make(np.asarray(a.data.sum()), (a,), lambda g: (np.broadcast_to(g, shape).copy(),), "sum")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _make(np.maximum(x.data, 0), (x,), lambda g: (g * mask,), "relu")


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 4 or b.data.ndim != 4:
        raise ShapeError("concat_channels expects 4-D tensors")
    if (a.shape[0], *a.shape[2:]) != (b.shape[0], *b.shape[2:]):
        raise ShapeError(f"concat_channels: batch/spatial mismatch {a.shape} vs {b.shape}")
    ca = a.shape[1]
    out = np.concatenate([a.data, b.data], axis=1)
    return _make(out, (a, b), lambda g: (g[:, :ca], g[:, ca:]), "concat")


def softmax_channels(logits: Tensor) -> Tensor:
    x = logits.data
    if x.ndim != 4 or x.shape[1] < 2:
        raise ShapeError(f"softmax_channels expects (B, C>=2, H, W), got {x.shape}")
    e = np.exp(x - x.max(axis=1, keepdims=True))
    p = e / e.sum(axis=1, keepdims=True)

    def _bw(g):
        return (p * (g - (g * p).sum(axis=1, keepdims=True)),)

    return _make(p, (logits,), _bw, "softmax")


def log_softmax_channels(x: np.ndarray) -> np.ndarray:
    shifted = x - x.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


# ---------------------------------------------------------------------------
# spatial


def _pad_hw(x: np.ndarray, top: int, bottom: int, left: int, right: int) -> np.ndarray:
    if not (top or bottom or left or right):
        return x
    return np.pad(x, ((0, 0), (0, 0), (top, bottom), (left, right)))


def pad2d(x: Tensor, top: int, bottom: int, left: int, right: int) -> Tensor:
    h, w = x.shape[2:]

    def _bw(g):
        return (g[:, :, top:top + h, left:left + w],)

    return _make(_pad_hw(x.data, top, bottom, left, right), (x,), _bw, "pad2d")


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None,
           stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation (no kernel flip) via im2col and one matmul."""
    if x.data.ndim != 4 or weight.data.ndim != 4:
        raise ShapeError("conv2d expects 4-D input and weight")
    B, C, H, W = x.shape
    Cout, Cin, kh, kw = weight.shape
    if Cin != C:
        raise ShapeError(f"conv2d: input has {C} channels but weight expects {Cin}")
    if stride < 1:
        raise ValueError("conv2d: stride must be >= 1")
    Hp, Wp = H + 2 * padding, W + 2 * padding
    if kh > Hp or kw > Wp:
        raise ShapeError(f"conv2d: kernel {kh}x{kw} larger than padded input {Hp}x{Wp}")
    if bias is not None and bias.shape != (Cout,):
        raise ShapeError(f"conv2d: bias shape {bias.shape} != ({Cout},)")
    Ho, Wo = (Hp - kh) // stride + 1, (Wp - kw) // stride + 1

    xp = _pad_hw(x.data, padding, padding, padding, padding)
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    # channel-major columns (C*kh*kw, B*Ho*Wo): the copy runs over contiguous pixels
    cols = np.ascontiguousarray(win.transpose(1, 4, 5, 0, 2, 3)).reshape(C * kh * kw, B * Ho * Wo)
    wmat = weight.data.reshape(Cout, C * kh * kw)
    out = wmat @ cols
    if bias is not None:
        out += bias.data[:, None]
    out = np.ascontiguousarray(out.reshape(Cout, B, Ho, Wo).transpose(1, 0, 2, 3))

    def _bw(g):
        g2 = np.ascontiguousarray(g.transpose(1, 0, 2, 3)).reshape(Cout, B * Ho * Wo)
        gw = (g2 @ cols.T).reshape(weight.shape) if weight.requires_grad else None
        gb = g2.sum(axis=1) if bias is not None and bias.requires_grad else None
        gx = None
        if x.requires_grad:
            gcols = (wmat.T @ g2).reshape(C, kh, kw, B, Ho, Wo)
            gxp = np.zeros((C, B, Hp, Wp), dtype=g.dtype)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i:i + stride * Ho:stride, j:j + stride * Wo:stride] += gcols[:, i, j]
            gx = gxp[:, :, padding:padding + H, padding:padding + W].transpose(1, 0, 2, 3)
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _make(out, parents, _bw, "conv2d")


def transposed_conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 2) -> Tensor:
    """Transposed convolution, the adjoint of a strided ``conv2d``.

    ``weight`` is laid out ``(Cin, Cout, kh, kw)``.  Output spatial size is
    ``(H - 1) * stride + kh``, so a 2x2 kernel at stride 2 doubles H and W.
    """
    if x.data.ndim != 4 or weight.data.ndim != 4:
        raise ShapeError("transposed_conv2d expects 4-D input and weight")
    B, C, H, W = x.shape
    Cin, Cout, kh, kw = weight.shape
    if Cin != C:
        raise ShapeError(f"transposed_conv2d: input has {C} channels but weight expects {Cin}")
    Ho, Wo = (H - 1) * stride + kh, (W - 1) * stride + kw

    rows = np.ascontiguousarray(x.data.transpose(0, 2, 3, 1)).reshape(B * H * W, C)
    wmat = weight.data.reshape(C, Cout * kh * kw)
    cols = (rows @ wmat).reshape(B, H, W, Cout, kh, kw)
    if kh == stride and kw == stride:
        # non-overlapping windows: a pure reshuffle
        out = cols.transpose(0, 3, 1, 4, 2, 5).reshape(B, Cout, Ho, Wo)
    else:
        out = np.zeros((B, Cout, Ho, Wo), dtype=cols.dtype)
        ct = cols.transpose(0, 3, 1, 2, 4, 5)
        for i in range(kh):
            for j in range(kw):
                out[:, :, i:i + stride * H:stride, j:j + stride * W:stride] += ct[..., i, j]
    if bias is not None:
        out = out + bias.data[None, :, None, None]
    out = np.ascontiguousarray(out)

    def _bw(g):
        win = sliding_window_view(g, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
        gcols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(B * H * W, Cout * kh * kw)
        gx = (gcols @ wmat.T).reshape(B, H, W, C).transpose(0, 3, 1, 2) if x.requires_grad else None
        gw = (rows.T @ gcols).reshape(weight.shape) if weight.requires_grad else None
        gb = g.sum(axis=(0, 2, 3)) if bias is not None and bias.requires_grad else None
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _make(out, parents, _bw, "transposed_conv2d")


def maxpool2d(x: Tensor, window: int = 2, stride: int = 2) -> Tensor:
    """Non-overlapping max pooling; ties route the gradient to the first
    element of the window in row-major order."""
    if window != stride:
        raise ValueError("maxpool2d only supports window == stride")
    B, C, H, W = x.shape
    if H % window or W % window:
        raise ShapeError(f"maxpool2d: spatial dims {H}x{W} not divisible by {window}")
    k = window
    Ho, Wo = H // k, W // k
    blocks = x.data.reshape(B, C, Ho, k, Wo, k).transpose(0, 1, 2, 4, 3, 5).reshape(B, C, Ho, Wo, k * k)
    idx = blocks.argmax(axis=-1)[..., None]
    out = np.take_along_axis(blocks, idx, axis=-1)[..., 0]

    def _bw(g):
        gb = np.zeros((B, C, Ho, Wo, k * k), dtype=g.dtype)
        np.put_along_axis(gb, idx, g[..., None], axis=-1)
        return (gb.reshape(B, C, Ho, Wo, k, k).transpose(0, 1, 2, 4, 3, 5).reshape(B, C, H, W),)

    return _make(out, (x,), _bw, "maxpool2d")


def upsample_nearest(x: Tensor, factor: int = 2) -> Tensor:
    B, C, H, W = x.shape
    out = np.repeat(np.repeat(x.data, factor, axis=2), factor, axis=3)

    def _bw(g):
        return (g.reshape(B, C, H, factor, W, factor).sum(axis=(3, 5)),)

    return _make(out, (x,), _bw, "upsample_nearest")


# ---------------------------------------------------------------------------
# parameters and optimisation


class Parameter:
    """A trainable tensor plus its Adam state."""

    def __init__(self, name: str, data: np.ndarray):
        self.name = name
        self.tensor = Tensor(data, requires_grad=True)
        self.adam_m = np.zeros_like(self.tensor.data)
        self.adam_v = np.zeros_like(self.tensor.data)
        self.step_count = 0

    @property
    def data(self) -> np.ndarray:
        return self.tensor.data

    @property
    def grad(self) -> np.ndarray | None:
        return self.tensor.grad

    @property
    def shape(self) -> tuple[int, ...]:
        return self.tensor.shape

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.shape})"


def adam_step(params: Iterable[Parameter], lr: float, beta1: float = 0.9,
              beta2: float = 0.999, eps: float = 1e-8) -> None:
    """One bias-corrected Adam update.  Gradients are cleared afterwards."""
    params = list(params)
    missing = [p.name for p in params if p.grad is None]
    if missing:
        raise ValueError(f"adam_step: no gradient for {', '.join(missing[:5])}")
    for p in params:
        g = p.grad
        p.step_count += 1
        t = p.step_count
        p.adam_m *= beta1
        p.adam_m += (1.0 - beta1) * g
        p.adam_v *= beta2
        p.adam_v += (1.0 - beta2) * (g * g)
        m_hat = p.adam_m / (1.0 - beta1 ** t)
        v_hat = p.adam_v / (1.0 - beta2 ** t)
        p.tensor.data -= lr * m_hat / (np.sqrt(v_hat) + eps)
        p.tensor.grad = None
