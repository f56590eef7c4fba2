"""Dense float64 tensors with tape-based reverse-mode differentiation.

Every numeric primitive the backend models need lives here: matrix product,
1D/2D convolution (cross-correlation convention, no kernel flip), adaptive
average pooling, batch normalization, the usual activations, and the small
set of reshapes/reductions used to compose attention blocks.

Ops executed while a tape is active append a gradient rule to it;
``Tape.backward`` replays the rules in exact reverse recording order and
accumulates gradients into every tensor that requires them. With no active
tape, ops are plain forward computations (evaluation mode).
"""

from __future__ import annotations

import threading
from contextlib import contextmanager

import numpy as np

__all__ = [
    "DimensionError",
    "Tensor",
    "Tape",
    "RunningStats",
    "recording",
    "active_tape",
    "backward",
    "add",
    "mul",
    "scale",
    "matmul",
    "linear",
    "conv1d",
    "conv2d",
    "adaptive_avg_pool1d",
    "adaptive_avg_pool2d",
    "batch_norm",
    "leaky_relu",
    "relu",
    "sigmoid",
    "log_softmax",
    "mean",
    "sum_all",
    "reshape",
    "transpose",
]


class DimensionError(ValueError):
    """Operand shapes cannot be combined the way an operation requires."""


class Tensor:
    """A dense float64 array plus an optional same-shape gradient.

    Tensors are treated as immutable during a recorded forward pass;
    parameter updates happen between passes (see ``training.Adam``).
    """

    __slots__ = ("data", "grad", "requires_grad")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise DimensionError(f"item() needs a scalar, got shape {self.data.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


class Tape:
    """Ordered record of gradient rules for one forward pass."""

    def __init__(self):
        self._rules: list = []

    def __len__(self) -> int:
        return len(self._rules)

    def record(self, rule) -> None:
        self._rules.append(rule)

    def backward(self, loss: Tensor) -> None:
        """Seed d(loss)/d(loss)=1 and replay rules in reverse order.

        The tape is cleared afterwards so a session can reuse it.
        """
        if loss.data.size != 1:
            raise DimensionError(
                f"backward needs a scalar loss, got shape {loss.data.shape}"
            )
        if not self._rules:
            raise ValueError("backward on an empty tape")
        loss.grad = np.ones_like(loss.data)
        for rule in reversed(self._rules):
            rule()
        self._rules.clear()


# The active-tape stack is thread-local so independent sessions can run in
# parallel without sharing state.
_LOCAL = threading.local()


def _stack() -> list:
    if not hasattr(_LOCAL, "stack"):
        _LOCAL.stack = []
    return _LOCAL.stack


def active_tape() -> Tape | None:
    stack = _stack()
    return stack[-1] if stack else None


@contextmanager
def recording(tape: Tape | None = None):
    """Route ops executed in the body onto ``tape`` (fresh one by default)."""
    tape = Tape() if tape is None else tape
    stack = _stack()
    stack.append(tape)
    try:
        yield tape
    finally:
        stack.pop()


def backward(loss: Tensor, tape: Tape) -> None:
    tape.backward(loss)


def _finish(out: Tensor, inputs: tuple[Tensor, ...], rule) -> Tensor:
    tape = active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape.record(rule)
    return out


def _accumulate(t: Tensor, g: np.ndarray, own: bool = False) -> None:
    """Add ``g`` into ``t.grad``.

    ``own=True`` lets the rule hand over a freshly built array (or a view of
    one) without a defensive copy; replay order guarantees nothing reads the
    donated buffer afterwards. Parameters always receive reduced or freshly
    computed arrays, so their grads never alias an activation buffer.
    """
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = g if own else np.array(g)
    else:
        t.grad += g


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``g`` down to ``shape``: the adjoint of numpy broadcasting."""
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise / shape ops


def add(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.data + b.data)

    def rule():
        g = out.grad
        if g is None:
            return
        ga = _unbroadcast(g, a.data.shape)
        _accumulate(a, ga, own=ga is not g)
        gb = _unbroadcast(g, b.data.shape)
        _accumulate(b, gb, own=gb is not g)

    return _finish(out, (a, b), rule)


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product with numpy broadcasting."""
    out = Tensor(a.data * b.data)

    def rule():
        g = out.grad
        if g is None:
            return
        _accumulate(a, _unbroadcast(g * b.data, a.data.shape), own=True)
        _accumulate(b, _unbroadcast(g * a.data, b.data.shape), own=True)

    return _finish(out, (a, b), rule)


def scale(x: Tensor, s: float) -> Tensor:
    s = float(s)
    out = Tensor(x.data * s)

    def rule():
        g = out.grad
        if g is None:
            return
        _accumulate(x, g * s, own=True)

    return _finish(out, (x,), rule)


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    out = Tensor(x.data.reshape(shape))

    def rule():
        g = out.grad
        if g is None:
            return
        _accumulate(x, g.reshape(x.data.shape), own=True)

    return _finish(out, (x,), rule)


def transpose(x: Tensor, axes: tuple[int, ...]) -> Tensor:
    out = Tensor(x.data.transpose(axes))
    inverse = tuple(np.argsort(axes))

    def rule():
        g = out.grad
        if g is None:
            return
        _accumulate(x, g.transpose(inverse), own=True)

    return _finish(out, (x,), rule)


def mean(x: Tensor, axis: int) -> Tensor:
    """Mean over a single axis (no keepdims)."""
    axis = axis % x.data.ndim
    n = x.data.shape[axis]
    out = Tensor(x.data.mean(axis=axis))

    def rule():
        g = out.grad
        if g is None:
            return
        _accumulate(x, np.broadcast_to(np.expand_dims(g, axis), x.data.shape) / n, own=True)

    return _finish(out, (x,), rule)


def sum_all(x: Tensor) -> Tensor:
    out = Tensor(x.data.sum())

    def rule():
        g = out.grad
        if g is None:
            return
        _accumulate(x, np.broadcast_to(g, x.data.shape).copy(), own=True)

    return _finish(out, (x,), rule)


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product of a 2-D MxK tensor with a 2-D KxN tensor."""
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise DimensionError(
            f"matmul needs MxK by KxN, got {a.data.shape} and {b.data.shape}"
        )
    out = Tensor(a.data @ b.data)

    def rule():
        g = out.grad
        if g is None:
            return
        if a.requires_grad:
            _accumulate(a, g @ b.data.T, own=True)
        if b.requires_grad:
            _accumulate(b, a.data.T @ g, own=True)

    return _finish(out, (a, b), rule)


def linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """x @ w + b with b broadcast over rows."""
    return add(matmul(x, w), b)


# ---------------------------------------------------------------------------
# convolution

# im2col iterates over kernel offsets and slices over positions, writing
# straight into position-major (GEMM-ready) layout; the forward matrix is
# kept for the weight gradient so backward never rebuilds it.


def _im2col1d(xp: np.ndarray, k: int, stride: int, lout: int) -> np.ndarray:
    b, c, _ = xp.shape
    cols = np.empty((b, lout, c, k), dtype=np.float64)
    for i in range(k):
        cols[:, :, :, i] = xp[:, :, i : i + stride * lout : stride].transpose(0, 2, 1)
    return cols.reshape(b * lout, c * k)


def conv1d(x: Tensor, w: Tensor, bias: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Batched 1D cross-correlation: x is BxCinxL, w is CoutxCinxk."""
    if x.data.ndim != 3 or w.data.ndim != 3:
        raise DimensionError(
            f"conv1d needs BxCinxL input and CoutxCinxk weight, got {x.data.shape} and {w.data.shape}"
        )
    b, cin, length = x.data.shape
    cout, cin_w, k = w.data.shape
    if cin != cin_w:
        raise DimensionError(f"conv1d channel mismatch: input {cin}, weight {cin_w}")
    if bias.data.shape != (cout,):
        raise DimensionError(f"conv1d bias must have shape ({cout},), got {bias.data.shape}")
    lp = length + 2 * padding
    lout = (lp - k) // stride + 1
    if k > lp or lout < 1:
        raise DimensionError(
            f"conv1d kernel {k} does not fit padded length {lp} (stride {stride})"
        )
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding))) if padding else x.data
    xmat = _im2col1d(xp, k, stride, lout)
    wmat = w.data.reshape(cout, cin * k)
    y = xmat @ wmat.T
    out = Tensor(y.reshape(b, lout, cout).transpose(0, 2, 1) + bias.data[:, None])

    def rule():
        g = out.grad
        if g is None:
            return
        gmat = g.transpose(0, 2, 1).reshape(b * lout, cout)
        if bias.requires_grad:
            _accumulate(bias, g.sum(axis=(0, 2)), own=True)
        if w.requires_grad:
            _accumulate(w, (gmat.T @ xmat).reshape(w.data.shape), own=True)
        if x.requires_grad:
            dcols = (gmat @ wmat).reshape(b, lout, cin, k)
            dxp = np.zeros((b, cin, lp), dtype=np.float64)
            for i in range(k):
                dxp[:, :, i : i + stride * lout : stride] += dcols[:, :, :, i].transpose(0, 2, 1)
            _accumulate(x, dxp[:, :, padding : padding + length] if padding else dxp, own=True)

    return _finish(out, (x, w, bias), rule)


def _im2col2d(xp: np.ndarray, k: int, stride: int, hout: int, wout: int) -> np.ndarray:
    b, c, _, _ = xp.shape
    view = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(2, 3))
    view = view[:, :, :: stride, :: stride]
    cols = np.ascontiguousarray(view.transpose(0, 2, 3, 1, 4, 5))
    return cols.reshape(b * hout * wout, c * k * k)


def conv2d(x: Tensor, w: Tensor, bias: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Batched 2D cross-correlation: x is BxCinxHxW, w is CoutxCinxkxk."""
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise DimensionError(
            f"conv2d needs BxCinxHxW input and CoutxCinxkxk weight, got {x.data.shape} and {w.data.shape}"
        )
    b, cin, h, wdt = x.data.shape
    cout, cin_w, k, k2 = w.data.shape
    if cin != cin_w:
        raise DimensionError(f"conv2d channel mismatch: input {cin}, weight {cin_w}")
    if k != k2:
        raise DimensionError(f"conv2d kernel must be square, got {k}x{k2}")
    if bias.data.shape != (cout,):
        raise DimensionError(f"conv2d bias must have shape ({cout},), got {bias.data.shape}")
    hp, wp = h + 2 * padding, wdt + 2 * padding
    hout = (hp - k) // stride + 1
    wout = (wp - k) // stride + 1
    if k > hp or k > wp or hout < 1 or wout < 1:
        raise DimensionError(
            f"conv2d kernel {k} does not fit padded size {hp}x{wp} (stride {stride})"
        )
    if padding:
        xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    else:
        xp = x.data
    xmat = _im2col2d(xp, k, stride, hout, wout)
    wmat = w.data.reshape(cout, cin * k * k)
    y = xmat @ wmat.T
    out = Tensor(
        y.reshape(b, hout, wout, cout).transpose(0, 3, 1, 2) + bias.data[:, None, None]
    )

    def rule():
        g = out.grad
        if g is None:
            return
        gmat = g.transpose(0, 2, 3, 1).reshape(b * hout * wout, cout)
        if bias.requires_grad:
            _accumulate(bias, g.sum(axis=(0, 2, 3)), own=True)
        if w.requires_grad:
            _accumulate(w, (gmat.T @ xmat).reshape(w.data.shape), own=True)
        if x.requires_grad:
            dcols = (gmat @ wmat).reshape(b, hout, wout, cin, k, k)
            dxp = np.zeros((b, hp, wp, cin), dtype=np.float64)
            for i in range(k):
                for j in range(k):
                    dxp[
                        :, i : i + stride * hout : stride, j : j + stride * wout : stride, :
                    ] += dcols[:, :, :, :, i, j]
            if padding:
                dxp = dxp[:, padding : padding + h, padding : padding + wdt, :]
            _accumulate(x, np.ascontiguousarray(dxp.transpose(0, 3, 1, 2)), own=True)

    return _finish(out, (x, w, bias), rule)


# ---------------------------------------------------------------------------
# pooling

# Bin i covers [floor(i*L/O), ceil((i+1)*L/O)); bins overlap when O does not
# divide L, and each input element inside a bin receives 1/binsize of the
# output gradient.


def _pool_bins(length: int, out: int) -> list[tuple[int, int]]:
    return [(i * length // out, -((-(i + 1) * length) // out)) for i in range(out)]


def adaptive_avg_pool1d(x: Tensor, output_size: int) -> Tensor:
    if x.data.ndim != 3:
        raise DimensionError(f"adaptive_avg_pool1d needs BxCxL input, got {x.data.shape}")
    b, c, length = x.data.shape
    if output_size < 1 or output_size > length:
        raise DimensionError(
            f"pool output size {output_size} invalid for input length {length}"
        )
    if output_size == length:
        out = Tensor(x.data.copy())

        def rule_id():
            g = out.grad
            if g is None:
                return
            _accumulate(x, g, own=True)

        return _finish(out, (x,), rule_id)

    bins = _pool_bins(length, output_size)
    out_data = np.empty((b, c, output_size), dtype=np.float64)
    for i, (s, e) in enumerate(bins):
        out_data[:, :, i] = x.data[:, :, s:e].mean(axis=2)
    out = Tensor(out_data)

    def rule():
        g = out.grad
        if g is None:
            return
        dx = np.zeros_like(x.data)
        for i, (s, e) in enumerate(bins):
            dx[:, :, s:e] += g[:, :, i : i + 1] / (e - s)
        _accumulate(x, dx, own=True)

    return _finish(out, (x,), rule)


def adaptive_avg_pool2d(x: Tensor, output_size: tuple[int, int]) -> Tensor:
    if x.data.ndim != 4:
        raise DimensionError(f"adaptive_avg_pool2d needs BxCxHxW input, got {x.data.shape}")
    b, c, h, w = x.data.shape
    oh, ow = output_size
    if oh < 1 or ow < 1 or oh > h or ow > w:
        raise DimensionError(
            f"pool output size {output_size} invalid for input size {h}x{w}"
        )
    if (oh, ow) == (h, w):
        out = Tensor(x.data.copy())

        def rule_id():
            g = out.grad
            if g is None:
                return
            _accumulate(x, g, own=True)

        return _finish(out, (x,), rule_id)

    hbins = _pool_bins(h, oh)
    wbins = _pool_bins(w, ow)
    out_data = np.empty((b, c, oh, ow), dtype=np.float64)
    for i, (hs, he) in enumerate(hbins):
        for j, (ws, we) in enumerate(wbins):
            out_data[:, :, i, j] = x.data[:, :, hs:he, ws:we].mean(axis=(2, 3))
    out = Tensor(out_data)

    def rule():
        g = out.grad
        if g is None:
            return
        dx = np.zeros_like(x.data)
        for i, (hs, he) in enumerate(hbins):
            for j, (ws, we) in enumerate(wbins):
                dx[:, :, hs:he, ws:we] += g[:, :, i : i + 1, j : j + 1] / (
                    (he - hs) * (we - ws)
                )
        _accumulate(x, dx, own=True)

    return _finish(out, (x,), rule)


# ---------------------------------------------------------------------------
# normalization


class RunningStats:
    """Per-channel running mean/variance buffers for batch_norm eval mode."""

    def __init__(self, channels: int):
        self.mean = np.zeros(channels, dtype=np.float64)
        self.var = np.ones(channels, dtype=np.float64)

    def copy(self) -> "RunningStats":
        fresh = RunningStats(len(self.mean))
        fresh.mean = self.mean.copy()
        fresh.var = self.var.copy()
        return fresh


def batch_norm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    stats: RunningStats,
    training: bool,
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> Tensor:
    """Normalize per channel over batch and spatial axes.

    Training mode uses batch moments (biased variance) and updates the
    running buffers in place; eval mode normalizes with the buffers.
    """
    if x.data.ndim < 2:
        raise DimensionError(f"batch_norm needs a BxCx... input, got {x.data.shape}")
    c = x.data.shape[1]
    if gamma.data.shape != (c,) or beta.data.shape != (c,):
        raise DimensionError(
            f"batch_norm gamma/beta must have shape ({c},), got {gamma.data.shape} and {beta.data.shape}"
        )
    axes = (0,) + tuple(range(2, x.data.ndim))
    cshape = (1, c) + (1,) * (x.data.ndim - 2)
    if training:
        if x.data.shape[0] < 2:
            raise DimensionError(
                f"batch_norm training mode needs batch >= 2, got {x.data.shape[0]}"
            )
        mu = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        stats.mean = (1.0 - momentum) * stats.mean + momentum * mu
        stats.var = (1.0 - momentum) * stats.var + momentum * var
    else:
        mu, var = stats.mean, stats.var
    inv = 1.0 / np.sqrt(var + eps)
    xhat = x.data - mu.reshape(cshape)
    xhat *= inv.reshape(cshape)
    out_data = gamma.data.reshape(cshape) * xhat
    out_data += beta.data.reshape(cshape)
    out = Tensor(out_data)

    def rule():
        g = out.grad
        if g is None:
            return
        if beta.requires_grad:
            _accumulate(beta, g.sum(axis=axes), own=True)
        if gamma.requires_grad:
            _accumulate(gamma, (g * xhat).sum(axis=axes), own=True)
        if x.requires_grad:
            gg = g * gamma.data.reshape(cshape)
            if training:
                mean_gg = gg.mean(axis=axes).reshape(cshape)
                mean_ggx = (gg * xhat).mean(axis=axes).reshape(cshape)
                dx = inv.reshape(cshape) * (gg - mean_gg - xhat * mean_ggx)
            else:
                dx = gg * inv.reshape(cshape)
            _accumulate(x, dx, own=True)

    return _finish(out, (x, gamma, beta), rule)


# ---------------------------------------------------------------------------
# activations


def leaky_relu(x: Tensor, slope: float = 0.01) -> Tensor:
    factor = np.where(x.data >= 0, 1.0, slope)
    out = Tensor(x.data * factor)

    def rule():
        g = out.grad
        if g is None:
            return
        _accumulate(x, g * factor, own=True)

    return _finish(out, (x,), rule)


def relu(x: Tensor) -> Tensor:
    pos = x.data >= 0
    out = Tensor(np.where(pos, x.data, 0.0))

    def rule():
        g = out.grad
        if g is None:
            return
        _accumulate(x, g * pos, own=True)

    return _finish(out, (x,), rule)


def sigmoid(x: Tensor) -> Tensor:
    """1/(1+exp(-v)) computed in the branch form that never overflows."""
    d = x.data
    out_data = np.empty_like(d)
    pos = d >= 0
    out_data[pos] = 1.0 / (1.0 + np.exp(-d[pos]))
    e = np.exp(d[~pos])
    out_data[~pos] = e / (1.0 + e)
    out = Tensor(out_data)

    def rule():
        g = out.grad
        if g is None:
            return
        _accumulate(x, g * out_data * (1.0 - out_data), own=True)

    return _finish(out, (x,), rule)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    axis = axis % x.data.ndim
    m = x.data.max(axis=axis, keepdims=True)
    z = x.data - m
    out_data = z - np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = Tensor(out_data)

    def rule():
        g = out.grad
        if g is None:
            return
        _accumulate(x, g - np.exp(out_data) * g.sum(axis=axis, keepdims=True), own=True)

    return _finish(out, (x,), rule)
