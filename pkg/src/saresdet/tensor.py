"""Dense tensors with tape-based reverse-mode differentiation.

Every differentiable op builds its output with :func:`record`, which appends a
node to the active :class:`Tape`. ``Tape.backward`` walks the nodes in exact
reverse recording order and accumulates gradients additively.

Feature maps are 4-axis ``(N, C, H, W)``; router vectors and dense-layer
activations are 2-axis ``(N, D)``. Broadcasting is limited to per-channel
vectors.
"""

from __future__ import annotations

import contextlib
import threading
from dataclasses import dataclass, field
from typing import Callable, Iterator, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

_state = threading.local()


def _dtype() -> np.dtype:
    return getattr(_state, "dtype", np.dtype(np.float32))


def get_dtype() -> np.dtype:
    return _dtype()


@contextlib.contextmanager
def precision(dtype) -> Iterator[None]:
    """Switch the working float type (``float32`` default, ``float64`` for checks)."""
    prev = _dtype()
    _state.dtype = np.dtype(dtype)
    try:
        yield
    finally:
        _state.dtype = prev


class ShapeError(ValueError):
    """Raised when operand shapes violate an op's contract."""


class NonFiniteError(FloatingPointError):
    pass


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data)
        if arr.dtype.kind != "f":
            arr = arr.astype(_dtype())
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}{tag})"

    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __mul__(self, other: "Tensor | float") -> "Tensor":
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__

    def __sub__(self, other: "Tensor") -> "Tensor":
        return add(self, scale(other, -1.0))


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=_dtype()))


@dataclass
class Node:
    op: str
    out: Tensor
    inputs: tuple[Tensor, ...]
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


@dataclass
class Tape:
    """Records differentiable ops issued while it is active (``with Tape() as t``)."""

    nodes: list[Node] = field(default_factory=list)

    def __enter__(self) -> "Tape":
        stack = _tape_stack()
        stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _tape_stack().pop()

    def backward(self, loss: Tensor, grad: np.ndarray | None = None) -> list[str]:
        """Accumulate d(loss)/d(t) into ``t.grad`` for every tensor requiring grad.

        Returns the op names in the order they were visited.
        """
        if grad is None:
            if loss.size != 1:
                raise ShapeError("backward needs a scalar loss or an explicit upstream gradient")
            grad = np.ones_like(loss.data)
        _accumulate(loss, np.asarray(grad, dtype=loss.data.dtype))
        visited = []
        for node in reversed(self.nodes):
            g = node.out.grad
            if g is None:
                continue
            visited.append(node.op)
            grads = node.backward(g)
            for inp, gi in zip(node.inputs, grads):
                if gi is not None and inp.requires_grad:
                    _accumulate(inp, gi)
        return visited

    def first_non_finite(self) -> Node | None:
        for node in self.nodes:
            if not np.all(np.isfinite(node.out.data)):
                return node
        return None


def _tape_stack() -> list[Tape]:
    if not hasattr(_state, "tapes"):
        _state.tapes = []
    return _state.tapes


def current_tape() -> Tape | None:
    stack = _tape_stack()
    return stack[-1] if stack else None


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    stack = _tape_stack()
    saved = list(stack)
    stack.clear()
    try:
        yield
    finally:
        stack.extend(saved)


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if g.shape != t.data.shape:
        g = g.reshape(t.data.shape)
    if t.grad is None:
        t.grad = np.array(g, dtype=t.data.dtype, copy=True)
    else:
        t.grad += g


def record(op: str, data: np.ndarray, inputs: Sequence[Tensor], backward) -> Tensor:
    """Wrap ``data`` as an op output and register ``backward`` on the active tape."""
    out = Tensor(data)
    tape = current_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out.name = op
        tape.nodes.append(Node(op, out, tuple(inputs), backward))
    return out


# ---------------------------------------------------------------------------
# parameters


def init_uniform(rng: np.random.Generator, shape: Sequence[int], fan_in: int, name: str | None = None) -> Tensor:
    """Parameter drawn from U(-sqrt(1/fan_in), sqrt(1/fan_in))."""
    bound = float(np.sqrt(1.0 / max(fan_in, 1)))
    data = rng.uniform(-bound, bound, size=tuple(shape)).astype(_dtype())
    return Tensor(data, requires_grad=True, name=name)


def param(value, name: str | None = None) -> Tensor:
    return Tensor(np.array(value, dtype=_dtype()), requires_grad=True, name=name)


class Module:
    """Attribute-walking parameter container."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for key, value in vars(self).items():
            if key.startswith("_"):
                continue
            yield from _walk(value, f"{prefix}{key}")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        missing = sorted(set(own) - set(state))
        if missing:
            raise KeyError(f"missing parameters: {missing[:5]}")
        for name, p in own.items():
            arr = np.asarray(state[name])
            if arr.shape != p.data.shape:
                raise ShapeError(f"{name}: expected shape {p.data.shape}, got {arr.shape}")
            p.data = arr.astype(p.data.dtype, copy=True)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None


def _walk(value, name: str) -> Iterator[tuple[str, Tensor]]:
    if isinstance(value, Tensor):
        if value.requires_grad:
            yield name, value
    elif isinstance(value, Module):
        yield from value.named_parameters(name + ".")
    elif isinstance(value, (list, tuple)):
        for i, v in enumerate(value):
            yield from _walk(v, f"{name}.{i}")
    elif isinstance(value, dict):
        for k in sorted(value):
            yield from _walk(value[k], f"{name}.{k}")


# ---------------------------------------------------------------------------
# convolution


def _norm_padding(padding) -> tuple[int, int, int, int]:
    if isinstance(padding, int):
        return (padding, padding, padding, padding)
    if len(padding) == 2:
        ph, pw = padding
        return (ph, ph, pw, pw)
    top, bottom, left, right = padding
    return (int(top), int(bottom), int(left), int(right))


def conv_output_size(size: int, k: int, stride: int, pad_lo: int, pad_hi: int, axis: str) -> int:
    span = size + pad_lo + pad_hi - k
    if span < 0:
        raise ShapeError(f"{axis}: kernel {k} larger than padded extent {size + pad_lo + pad_hi}")
    if span % stride:
        raise ShapeError(
            f"{axis}: output size ({size} + {pad_lo + pad_hi} - {k})/{stride} + 1 is not an integer"
        )
    return span // stride + 1


def _windows(x: np.ndarray, kh: int, kw: int, stride: int, pad) -> tuple[np.ndarray, tuple]:
    top, bottom, left, right = pad
    xp = np.pad(x, ((0, 0), (0, 0), (top, bottom), (left, right))) if any(pad) else x
    ho = conv_output_size(x.shape[2], kh, stride, top, bottom, "height")
    wo = conv_output_size(x.shape[3], kw, stride, left, right, "width")
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    return win[:, :, :ho, :wo], xp.shape


def _col2im(gcols: np.ndarray, xp_shape, kh: int, kw: int, stride: int, pad) -> np.ndarray:
    # gcols: (N, C, Ho, Wo, kh, kw)
    gxp = np.zeros(xp_shape, dtype=gcols.dtype)
    ho, wo = gcols.shape[2], gcols.shape[3]
    for i in range(kh):
        for j in range(kw):
            gxp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += gcols[..., i, j]
    top, bottom, left, right = pad
    return gxp[:, :, top : xp_shape[2] - bottom, left : xp_shape[3] - right]


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1, padding=0) -> Tensor:
    """Cross-correlation with zero padding. ``padding`` is an int or ``(top, bottom, left, right)``."""
    if x.ndim != 4:
        raise ShapeError(f"conv2d input must be 4-axis (N,C,H,W), got {x.shape}")
    if weight.ndim != 4:
        raise ShapeError(f"conv2d weight must be (Cout,Cin,kh,kw), got {weight.shape}")
    if stride < 1:
        raise ShapeError("stride must be >= 1")
    cout, cin, kh, kw = weight.shape
    if cin != x.shape[1]:
        raise ShapeError(f"channel: weight expects Cin={cin}, input has {x.shape[1]}")
    if bias is not None and bias.shape != (cout,):
        raise ShapeError(f"bias: expected ({cout},), got {bias.shape}")
    pad = _norm_padding(padding)
    win, xp_shape = _windows(x.data, kh, kw, stride, pad)
    w = weight.data
    out = np.tensordot(win, w, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
    if bias is not None:
        out = out + bias.data[None, :, None, None]
    out = np.ascontiguousarray(out)

    def backward(g):
        gw = np.tensordot(g, win, axes=([0, 2, 3], [0, 2, 3])) if weight.requires_grad else None
        gx = None
        if x.requires_grad:
            gcols = np.tensordot(g, w, axes=([1], [0])).transpose(0, 3, 1, 2, 4, 5)
            gx = _col2im(gcols, xp_shape, kh, kw, stride, pad)
        gb = g.sum(axis=(0, 2, 3)) if bias is not None else None
        return (gx, gw, gb) if bias is not None else (gx, gw)

    inputs = (x, weight, bias) if bias is not None else (x, weight)
    return record("conv2d", out, inputs, backward)


def depthwise_conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1, padding=0) -> Tensor:
    """One ``kh x kw`` filter per channel; ``weight`` is ``(C, 1, kh, kw)``."""
    if x.ndim != 4:
        raise ShapeError(f"depthwise_conv2d input must be 4-axis, got {x.shape}")
    c = x.shape[1]
    if weight.ndim != 4 or weight.shape[0] != c or weight.shape[1] != 1:
        raise ShapeError(f"channel: depthwise weight must be ({c},1,kh,kw), got {weight.shape}")
    if stride < 1:
        raise ShapeError("stride must be >= 1")
    kh, kw = weight.shape[2:]
    pad = _norm_padding(padding)
    win, xp_shape = _windows(x.data, kh, kw, stride, pad)
    w = weight.data[:, 0]
    out = np.einsum("nchwij,cij->nchw", win, w, optimize=True)
    if bias is not None:
        out = out + bias.data[None, :, None, None]

    def backward(g):
        gw = np.einsum("nchw,nchwij->cij", g, win, optimize=True)[:, None] if weight.requires_grad else None
        gx = None
        if x.requires_grad:
            gcols = g[..., None, None] * w[None, :, None, None]
            gx = _col2im(gcols, xp_shape, kh, kw, stride, pad)
        gb = g.sum(axis=(0, 2, 3)) if bias is not None else None
        return (gx, gw, gb) if bias is not None else (gx, gw)

    inputs = (x, weight, bias) if bias is not None else (x, weight)
    return record("depthwise_conv2d", out, inputs, backward)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight.T + bias`` for ``x`` of shape ``(N, D)`` and ``weight`` ``(E, D)``."""
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise ShapeError(f"linear: input {x.shape} incompatible with weight {weight.shape}")
    out = x.data @ weight.data.T
    if bias is not None:
        out = out + bias.data

    def backward(g):
        gx = g @ weight.data
        gw = g.T @ x.data
        if bias is None:
            return gx, gw
        return gx, gw, g.sum(axis=0)

    inputs = (x, weight, bias) if bias is not None else (x, weight)
    return record("linear", out, inputs, backward)


# ---------------------------------------------------------------------------
# pointwise


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return record("relu", x.data * mask, (x,), lambda g: (g * mask,))


def _sigmoid(a: np.ndarray) -> np.ndarray:
    out = np.empty_like(a)
    pos = a >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-a[pos]))
    e = np.exp(a[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def sigmoid(x: Tensor) -> Tensor:
    s = _sigmoid(x.data)
    return record("sigmoid", s, (x,), lambda g: (g * s * (1.0 - s),))


def softplus(x: Tensor) -> Tensor:
    a = x.data
    out = np.logaddexp(0.0, a).astype(a.dtype)
    return record("softplus", out, (x,), lambda g: (g * _sigmoid(a),))


def scale(x: Tensor, c: float) -> Tensor:
    return record("scale", x.data * x.data.dtype.type(c), (x,), lambda g: (g * c,))


def _channel_view(b: np.ndarray, like: np.ndarray) -> np.ndarray:
    """Reshape a per-channel operand so it broadcasts against ``like`` along axis 1."""
    if b.shape == like.shape:
        return b
    if like.ndim == 4:
        n, c = like.shape[:2]
        if b.shape == (c,):
            return b.reshape(1, c, 1, 1)
        if b.shape in ((n, c), (1, c)):
            return b.reshape(b.shape[0], c, 1, 1)
        if b.shape in ((n, c, 1, 1), (1, c, 1, 1)):
            return b
    elif like.ndim == 2:
        if b.shape in ((like.shape[1],), (1, like.shape[1])):
            return b.reshape(1, like.shape[1])
    raise ShapeError(f"broadcast: {b.shape} is neither {like.shape} nor a per-channel vector for it")


def _unbroadcast(g: np.ndarray, view_shape, orig_shape) -> np.ndarray:
    if g.shape == tuple(view_shape):
        return g.reshape(orig_shape)
    axes = tuple(i for i, (gs, vs) in enumerate(zip(g.shape, view_shape)) if vs == 1 and gs != 1)
    return g.sum(axis=axes, keepdims=True).reshape(orig_shape)


def add(a: Tensor, b: Tensor) -> Tensor:
    """Sum of same-shape tensors, or tensor + per-channel vector ``b``."""
    bv = _channel_view(b.data, a.data)
    return record(
        "add",
        a.data + bv,
        (a, b),
        lambda g: (g, _unbroadcast(g, bv.shape, b.shape)),
    )


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Product of same-shape tensors, or tensor * per-channel vector ``b``."""
    av, bv = a.data, _channel_view(b.data, a.data)

    def backward(g):
        return g * bv, _unbroadcast(g * av, bv.shape, b.shape)

    return record("mul", av * bv, (a, b), backward)


def add_n(tensors: Sequence[Tensor]) -> Tensor:
    out = tensors[0]
    for t in tensors[1:]:
        out = add(out, t)
    return out


def scale_samples(x: Tensor, w: Tensor) -> Tensor:
    """Multiply sample ``i`` of ``x`` by the scalar ``w[i]``."""
    if w.shape != (x.shape[0],):
        raise ShapeError(f"scale_samples: weights {w.shape} do not match batch {x.shape[0]}")
    view = w.data.reshape((-1,) + (1,) * (x.ndim - 1))

    def backward(g):
        return g * view, (g * x.data).reshape(x.shape[0], -1).sum(axis=1)

    return record("scale_samples", x.data * view, (x, w), backward)


# ---------------------------------------------------------------------------
# reductions, pooling, resampling


def global_avg_pool(x: Tensor) -> Tensor:
    if x.ndim != 4 or x.shape[2] < 1 or x.shape[3] < 1:
        raise ShapeError(f"global_avg_pool needs (N,C,H,W) with H,W >= 1, got {x.shape}")
    hw = x.shape[2] * x.shape[3]
    out = x.data.mean(axis=(2, 3), keepdims=True)
    return record("global_avg_pool", out, (x,), lambda g: (np.broadcast_to(g / hw, x.shape),))


def upsample_nearest2x(x: Tensor) -> Tensor:
    out = x.data.repeat(2, axis=2).repeat(2, axis=3)
    n, c, h, w = x.shape

    def backward(g):
        return (g.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5)),)

    return record("upsample_nearest2x", out, (x,), backward)


def avg_pool2x(x: Tensor) -> Tensor:
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"avg_pool2x needs even H, W, got {x.shape}")
    out = x.data.reshape(n, c, h // 2, 2, w // 2, 2).mean(axis=(3, 5))

    def backward(g):
        return (g.repeat(2, axis=2).repeat(2, axis=3) * 0.25,)

    return record("avg_pool2x", out, (x,), backward)


def total(x: Tensor) -> Tensor:
    return record("sum", np.asarray(x.data.sum()).reshape(1), (x,), lambda g: (np.broadcast_to(g.reshape(()), x.shape),))


def mean(x: Tensor) -> Tensor:
    n = x.size
    return record("mean", np.asarray(x.data.mean()).reshape(1), (x,), lambda g: (np.broadcast_to(g.reshape(()) / n, x.shape),))


def square(x: Tensor) -> Tensor:
    return record("square", x.data * x.data, (x,), lambda g: (2.0 * g * x.data,))


def weighted_sum(x: Tensor, w: np.ndarray) -> Tensor:
    """``sum(x * w)`` against a constant array; handy for gradient checks."""
    w = np.asarray(w, dtype=x.data.dtype)
    return record("weighted_sum", np.asarray((x.data * w).sum()).reshape(1), (x,), lambda g: (g.reshape(()) * w,))


# ---------------------------------------------------------------------------
# structural


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    orig = x.shape
    return record("reshape", x.data.reshape(shape), (x,), lambda g: (g.reshape(orig),))


def flatten(x: Tensor) -> Tensor:
    return reshape(x, (x.shape[0], -1))


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    sizes = [t.shape[axis] for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    cuts = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, cuts, axis=axis))

    return record("concat", out, tuple(tensors), backward)


def index(x: Tensor, key) -> Tensor:
    """Fancy-index gather ``x[key]`` with scatter-add backward."""
    out = np.array(x.data[key])

    def backward(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, key, g)
        return (gx,)

    return record("index", out, (x,), backward)


def embed(x: Tensor, key, shape: Sequence[int]) -> Tensor:
    """Place ``x`` at ``key`` inside a zero tensor of ``shape``."""
    out = np.zeros(tuple(shape), dtype=x.data.dtype)
    out[key] = x.data
    return record("embed", out, (x,), lambda g: (g[key],))


# ---------------------------------------------------------------------------
# softmax


def softmax_with_temperature(logits: Tensor, tau: float) -> Tensor:
    """Softmax of ``logits / tau`` along the last axis, max-subtracted."""
    if not tau > 0:
        raise ValueError(f"tau must be positive, got {tau}")
    if logits.shape[-1] < 1:
        raise ShapeError("softmax needs at least one logit")
    z = logits.data / tau
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return ((p * (g - (g * p).sum(axis=-1, keepdims=True))) / tau,)

    return record("softmax", p, (logits,), backward)


# ---------------------------------------------------------------------------
# gradient oracle


def finite_diff_grad(f: Callable[[Tensor], "Tensor | float"], x: Tensor, h: float | None = None) -> np.ndarray:
    """Central-difference gradient of scalar ``f`` at ``x`` (perturbs ``x.data`` in place)."""
    if h is None:
        h = 1e-3 if x.data.dtype == np.float32 else 1e-6
    if not h > 0:
        raise ValueError("step h must be positive")

    def value() -> float:
        with no_grad():
            out = f(x)
        return float(out.data.sum()) if isinstance(out, Tensor) else float(out)

    flat = x.data.reshape(-1)
    grad = np.zeros(flat.shape, dtype=np.float64)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = value()
        flat[i] = orig - h
        fm = value()
        flat[i] = orig
        grad[i] = (fp - fm) / (2 * h)
    return grad.reshape(x.shape)


def grad_rel_error(a: np.ndarray, b: np.ndarray) -> float:
    """Max absolute deviation scaled by the larger gradient magnitude."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = max(np.abs(a).max(initial=0.0), np.abs(b).max(initial=0.0), 1e-12)
    return float(np.abs(a - b).max(initial=0.0) / denom)


def analytic_grad(f: Callable[[Tensor], Tensor], x: Tensor) -> np.ndarray:
    """Gradient of scalar ``f`` at ``x`` via the tape."""
    was = x.requires_grad
    x.requires_grad = True
    x.grad = None
    with Tape() as tape:
        out = f(x)
    if out.size != 1:
        raise ShapeError("analytic_grad needs a scalar-valued function")
    tape.backward(out)
    g = np.zeros_like(x.data) if x.grad is None else x.grad
    x.grad = None
    x.requires_grad = was
    return g


def check_finite(t: Tensor, what: str = "tensor") -> None:
    if not np.all(np.isfinite(t.data)):
        raise NonFiniteError(f"{what} contains NaN/Inf")
