"""Dense tensors with reverse-mode automatic differentiation.

A Tensor wraps a contiguous numpy array; differentiable operations record
nodes on an explicit Tape in execution order (so the tape is already
topologically sorted), and ``backward`` replays it once in reverse.
Gradients *accumulate* into ``.grad`` buffers — calling backward twice
doubles them — which is exactly the mechanism the trainer uses for
gradient accumulation across slides.

Ops take ``tape=None`` for forward-only evaluation (validation, finite
differences). Precision follows the operands: train in float32, verify
in float64.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import (
    ConfigurationError,
    ContractError,
    DimensionError,
    EmptyBagError,
    NonFiniteError,
)
from .rng import Rng

# When enabled, every op output is scanned for NaN/Inf. Costs one pass per
# op, so it is off in training loops and on in verification harnesses.
_DEBUG_FINITE = False


def set_debug_checks(enabled: bool) -> None:
    global _DEBUG_FINITE
    _DEBUG_FINITE = bool(enabled)


class Tensor:
    """A dense real-valued array, optionally tracked for gradients."""

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        if not arr.flags["C_CONTIGUOUS"]:  # ascontiguousarray would promote 0-d
            arr = np.ascontiguousarray(arr)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _non_scalar(self)

    def zero_grad(self) -> None:
        self.grad = None

    def accumulate_grad(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype, copy=True)
        else:
            self.grad += g

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"


def _non_scalar(t: Tensor):
    raise ContractError(f"expected a scalar tensor, got shape {t.shape}")


def as_tensor(x, dtype=None) -> Tensor:
    """Wrap arrays / scalars as a constant Tensor (no grad)."""
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


class TapeNode:
    """One executed op: its output, inputs, and a pullback closure.

    ``backward_fn(upstream)`` returns one gradient array (or None) per
    input, in input order. Saved activations live in the closure.
    """

    __slots__ = ("output", "inputs", "backward_fn", "name")

    def __init__(self, output: Tensor, inputs: Sequence[Tensor], backward_fn: Callable, name: str):
        self.output = output
        self.inputs = tuple(inputs)
        self.backward_fn = backward_fn
        self.name = name


class Tape:
    """Execution-ordered record of differentiable ops for one forward pass.

    Append order is the execution order, so parents always precede their
    consumers; backward simply walks the list once in reverse.
    """

    __slots__ = ("nodes",)

    def __init__(self):
        self.nodes: list[TapeNode] = []

    def __len__(self) -> int:
        return len(self.nodes)


def _record(tape: Tape | None, name: str, out_data: np.ndarray,
            inputs: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    """Finish an op: wrap the result and push a node if anything needs grad."""
    if _DEBUG_FINITE and not np.all(np.isfinite(out_data)):
        raise NonFiniteError(f"non-finite values produced by op '{name}'")
    track = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=track)
    if track:
        tape.nodes.append(TapeNode(out, inputs, backward_fn, name))
    return out


def backward(loss: Tensor, tape: Tape) -> None:
    """Reverse pass: add d(loss)/d(t) into ``t.grad`` for every tensor that
    requires grad. Leaf buffers persist, so repeated calls sum gradients —
    this is the accumulation mechanism used across slides.
    """
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not tape.nodes:
        raise ContractError("backward called with an empty tape")
    produced = {id(node.output) for node in tape.nodes}
    # Per-call upstream gradients for tape-produced tensors; leaves get +=
    # into their persistent .grad so separate backward calls accumulate.
    local: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        g = local.pop(id(node.output), None)
        if g is None:
            continue
        if node.output.requires_grad:
            node.output.accumulate_grad(g)
        grads = node.backward_fn(g)
        for inp, dg in zip(node.inputs, grads):
            if dg is None or not inp.requires_grad:
                continue
            if id(inp) in produced:
                key = id(inp)
                if key in local:
                    local[key] = local[key] + dg
                else:
                    local[key] = dg
            else:
                inp.accumulate_grad(dg)


# ---------------------------------------------------------------------------
# broadcasting helper


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``g`` down to ``shape`` (inverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# arithmetic


def add(a, b, tape: Tape | None = None) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data + b.data

    def back(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _record(tape, "add", out, (a, b), back)


def sub(a, b, tape: Tape | None = None) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data - b.data

    def back(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _record(tape, "sub", out, (a, b), back)


def mul(a, b, tape: Tape | None = None) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data * b.data

    def back(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _record(tape, "mul", out, (a, b), back)


def div(a, b, tape: Tape | None = None) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data

    def back(g):
        da = _unbroadcast(g / b.data, a.shape)
        db = _unbroadcast(-g * a.data / (b.data * b.data), b.shape)
        return da, db

    return _record(tape, "div", out, (a, b), back)


def neg(a, tape: Tape | None = None) -> Tensor:
    a = as_tensor(a)
    return _record(tape, "neg", -a.data, (a,), lambda g: (-g,))


def matmul(a, b, tape: Tape | None = None) -> Tensor:
    """Matrix product; supports stacked (batched) operands with equal batch
    dims. Gradient is exact: da = g @ bᵀ, db = aᵀ @ g.
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner dimensions disagree: {a.shape} @ {b.shape}")
    if a.shape[:-2] != b.shape[:-2]:
        raise DimensionError(f"matmul batch dimensions disagree: {a.shape} @ {b.shape}")
    out = a.data @ b.data

    def back(g):
        da = g @ np.swapaxes(b.data, -1, -2)
        db = np.swapaxes(a.data, -1, -2) @ g
        return da, db

    return _record(tape, "matmul", out, (a, b), back)


# ---------------------------------------------------------------------------
# shape ops


def transpose(a, axes: tuple[int, ...] | None = None, tape: Tape | None = None) -> Tensor:
    a = as_tensor(a)
    out = np.transpose(a.data, axes)
    if axes is None:
        inv = None
    else:
        inv = tuple(np.argsort(axes))

    def back(g):
        return (np.transpose(g, inv),)

    return _record(tape, "transpose", np.ascontiguousarray(out), (a,), back)


def reshape(a, shape: tuple[int, ...], tape: Tape | None = None) -> Tensor:
    a = as_tensor(a)
    out = a.data.reshape(shape)

    def back(g):
        return (g.reshape(a.shape),)

    return _record(tape, "reshape", out, (a,), back)


def concat(parts: Iterable, axis: int = 0, tape: Tape | None = None) -> Tensor:
    ts = [as_tensor(p) for p in parts]
    out = np.concatenate([t.data for t in ts], axis=axis)
    sizes = [t.shape[axis] for t in ts]
    offsets = np.cumsum([0] + sizes)

    def back(g):
        return tuple(
            np.take(g, np.arange(offsets[i], offsets[i + 1]), axis=axis) for i in range(len(ts))
        )

    return _record(tape, "concat", out, ts, back)


def slice_axis(a, axis: int, start: int, stop: int, tape: Tape | None = None) -> Tensor:
    a = as_tensor(a)
    idx = [slice(None)] * a.ndim
    idx[axis] = slice(start, stop)
    idx = tuple(idx)
    out = a.data[idx]

    def back(g):
        dg = np.zeros_like(a.data)
        dg[idx] = g
        return (dg,)

    return _record(tape, "slice", np.ascontiguousarray(out), (a,), back)


def take_rows(a, indices, tape: Tape | None = None) -> Tensor:
    """Gather rows (axis 0); repeated indices sum their gradients."""
    a = as_tensor(a)
    idx = np.asarray(indices, dtype=np.intp)
    out = a.data[idx]

    def back(g):
        dg = np.zeros_like(a.data)
        np.add.at(dg, idx, g)
        return (dg,)

    return _record(tape, "take_rows", out, (a,), back)


# ---------------------------------------------------------------------------
# activations


def relu(a, tape: Tape | None = None) -> Tensor:
    a = as_tensor(a)
    out = np.maximum(a.data, 0)

    def back(g):
        return (g * (a.data > 0),)

    return _record(tape, "relu", out, (a,), back)


def tanh(a, tape: Tape | None = None) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)

    def back(g):
        return (g * (1 - out * out),)

    return _record(tape, "tanh", out, (a,), back)


def sigmoid(a, tape: Tape | None = None) -> Tensor:
    a = as_tensor(a)
    # evaluate in the two half-planes to avoid overflow in exp
    x = a.data
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)

    def back(g):
        return (g * out * (1 - out),)

    return _record(tape, "sigmoid", out, (a,), back)


def softmax(a, axis: int, tape: Tape | None = None) -> Tensor:
    a = as_tensor(a)
    shifted = a.data - np.max(a.data, axis=axis, keepdims=True)
    ex = np.exp(shifted)
    out = ex / np.sum(ex, axis=axis, keepdims=True)

    def back(g):
        inner = np.sum(g * out, axis=axis, keepdims=True)
        return (out * (g - inner),)

    return _record(tape, "softmax", out, (a,), back)


def activation(a, kind: str, axis: int | None = None, tape: Tape | None = None) -> Tensor:
    """Dispatch by name; softmax requires an axis."""
    if kind == "relu":
        return relu(a, tape)
    if kind == "tanh":
        return tanh(a, tape)
    if kind == "sigmoid":
        return sigmoid(a, tape)
    if kind == "softmax":
        if axis is None:
            raise ConfigurationError("softmax activation needs an axis")
        return softmax(a, axis, tape)
    raise ConfigurationError(f"unknown activation kind: {kind!r}")


def log(a, tape: Tape | None = None) -> Tensor:
    a = as_tensor(a)
    out = np.log(a.data)

    def back(g):
        return (g / a.data,)

    return _record(tape, "log", out, (a,), back)


def absolute(a, tape: Tape | None = None) -> Tensor:
    a = as_tensor(a)
    out = np.abs(a.data)

    def back(g):
        return (g * np.sign(a.data),)

    return _record(tape, "abs", out, (a,), back)


def clamp(a, lo: float, hi: float, tape: Tape | None = None) -> Tensor:
    """Clip to [lo, hi]; gradient passes only through the unclamped region."""
    a = as_tensor(a)
    out = np.clip(a.data, lo, hi)
    inside = (a.data > lo) & (a.data < hi)

    def back(g):
        return (g * inside,)

    return _record(tape, "clamp", out, (a,), back)


# ---------------------------------------------------------------------------
# reductions


def reduce_sum(a, axis: int | None = None, keepdims: bool = False,
               tape: Tape | None = None) -> Tensor:
    a = as_tensor(a)
    out = np.sum(a.data, axis=axis, keepdims=keepdims)

    def back(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape).copy(),)
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg, a.shape).copy(),)

    return _record(tape, "sum", out, (a,), back)


def reduce_mean(a, axis: int | None = None, keepdims: bool = False,
                tape: Tape | None = None) -> Tensor:
    a = as_tensor(a)
    n = a.size if axis is None else a.shape[axis]
    out = np.mean(a.data, axis=axis, keepdims=keepdims)

    def back(g):
        if axis is None:
            return (np.broadcast_to(g / n, a.shape).copy(),)
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg / n, a.shape).copy(),)

    return _record(tape, "mean", out, (a,), back)


def reduce_max(a, axis: int, keepdims: bool = False, tape: Tape | None = None) -> Tensor:
    """Max along an axis; the gradient routes to the first occurrence of the
    maximum (deterministic tie-break).
    """
    a = as_tensor(a)
    out = np.max(a.data, axis=axis, keepdims=keepdims)
    argmax = np.argmax(a.data, axis=axis)  # first occurrence on ties

    def back(g):
        gg = g if keepdims else np.expand_dims(g, axis)
        dg = np.zeros_like(a.data)
        np.put_along_axis(dg, np.expand_dims(argmax, axis), gg, axis=axis)
        return (dg,)

    return _record(tape, "max", out, (a,), back)


def reduce(a, kind: str, axis: int = 0, tape: Tape | None = None) -> Tensor:
    """Instance-axis pooling used by the MIL heads: 'mean' or 'max'."""
    a = as_tensor(a)
    if a.shape[axis] == 0:
        raise EmptyBagError(f"cannot reduce over an empty axis (shape {a.shape}, axis {axis})")
    if kind == "mean":
        return reduce_mean(a, axis=axis, tape=tape)
    if kind == "max":
        return reduce_max(a, axis=axis, tape=tape)
    raise ConfigurationError(f"unknown reduce kind: {kind!r}")


# ---------------------------------------------------------------------------
# layers


def linear(x, weight, bias=None, tape: Tape | None = None) -> Tensor:
    """y = x @ W (+ b). x: (n, p), W: (p, q), b: (q,)."""
    x, weight = as_tensor(x), as_tensor(weight)
    if x.shape[-1] != weight.shape[0]:
        raise DimensionError(
            f"linear: input shape {x.shape} does not match weight shape {weight.shape}"
        )
    y = matmul(x, weight, tape)
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (weight.shape[1],):
            raise DimensionError(
                f"linear: bias shape {bias.shape} does not match weight shape {weight.shape}"
            )
        y = add(y, bias, tape)
    return y


def layer_norm(x, gain, shift, eps: float = 1e-5, tape: Tape | None = None) -> Tensor:
    """Normalize each row to zero mean / unit variance, then affine."""
    x, gain, shift = as_tensor(x), as_tensor(gain), as_tensor(shift)
    if eps <= 0:
        raise ConfigurationError("layer_norm eps must be positive")
    mu = np.mean(x.data, axis=-1, keepdims=True)
    var = np.mean((x.data - mu) ** 2, axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    out = xhat * gain.data + shift.data
    q = x.shape[-1]

    def back(g):
        dgain = _unbroadcast(g * xhat, gain.shape)
        dshift = _unbroadcast(g, shift.shape)
        gh = g * gain.data
        dx = inv * (gh - np.mean(gh, axis=-1, keepdims=True)
                    - xhat * np.mean(gh * xhat, axis=-1, keepdims=True))
        return dx, dgain, dshift

    return _record(tape, "layer_norm", out, (x, gain, shift), back)


def dropout(x, rate: float, rng: Rng | None, training: bool, tape: Tape | None = None) -> Tensor:
    """Inverted dropout: zero with probability ``rate`` and scale survivors
    by 1/(1-rate) during training; the identity in evaluation mode.
    """
    if not (0.0 <= rate < 1.0):
        raise ConfigurationError(f"dropout rate must be in [0, 1), got {rate}")
    x = as_tensor(x)
    if not training or rate == 0.0:
        return _record(tape, "dropout", x.data.copy(), (x,), lambda g: (g,))
    if rng is None:
        raise ConfigurationError("dropout in training mode needs an Rng")
    keep = (rng.random(x.shape) >= rate).astype(x.data.dtype)
    scale = np.asarray(1.0 / (1.0 - rate), dtype=x.data.dtype)
    mask = keep * scale
    out = x.data * mask

    def back(g):
        return (g * mask,)

    return _record(tape, "dropout", out, (x,), back)


def depthwise_conv2d(x, weight, bias=None, tape: Tape | None = None) -> Tensor:
    """Per-channel 2-D convolution, stride 1, same padding.

    x: (C, H, W); weight: (C, kh, kw) — one kernel per channel (groups = C);
    bias: (C,) or None. Odd kernel sizes only.
    """
    x, weight = as_tensor(x), as_tensor(weight)
    c, h, w = x.shape
    cw, kh, kw = weight.shape
    if cw != c:
        raise DimensionError(f"depthwise_conv2d: {c} channels vs kernel for {cw}")
    if kh % 2 == 0 or kw % 2 == 0:
        raise ConfigurationError("depthwise_conv2d supports odd kernel sizes only")
    ph, pw = kh // 2, kw // 2
    xp = np.pad(x.data, ((0, 0), (ph, ph), (pw, pw)))
    out = np.zeros_like(x.data)
    for i in range(kh):
        for j in range(kw):
            out += weight.data[:, i, j][:, None, None] * xp[:, i:i + h, j:j + w]
    inputs = [x, weight]
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (c,):
            raise DimensionError(f"depthwise_conv2d: bias shape {bias.shape} for {c} channels")
        out = out + bias.data[:, None, None]
        inputs.append(bias)

    def back(g):
        dxp = np.zeros_like(xp)
        dw = np.zeros_like(weight.data)
        for i in range(kh):
            for j in range(kw):
                patch = xp[:, i:i + h, j:j + w]
                dw[:, i, j] = np.sum(g * patch, axis=(1, 2))
                dxp[:, i:i + h, j:j + w] += weight.data[:, i, j][:, None, None] * g
        dx = dxp[:, ph:ph + h, pw:pw + w] if (ph or pw) else dxp
        grads = [dx, dw]
        if bias is not None:
            grads.append(np.sum(g, axis=(1, 2)))
        return tuple(grads)

    return _record(tape, "depthwise_conv2d", out, inputs, back)
