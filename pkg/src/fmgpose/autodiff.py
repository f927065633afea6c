"""Minimal reverse-mode automatic differentiation over dense numpy tensors.

Ops executed inside a ``Tape`` context record themselves on a Wengert list;
``Tape.backward`` walks the list in reverse and accumulates gradients into
every reachable ``Tensor``. Outside a tape, ops are plain numpy forwards with
no recording overhead, which is what inference uses.

Forward/backward run in the dtype of the operands (float32 for training,
float64 when a caller wants a high-precision oracle). Reductions accumulate
in float64 regardless and cast back.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

# Set True to assert every op output is finite (slow; meant for tests/debug).
CHECK_FINITE = False

_FLOAT_DTYPES = (np.float32, np.float64)


class ShapeError(ValueError):
    """Raised when op inputs have incompatible shapes or dtypes."""


class Tensor:
    """A dense float array plus a gradient slot filled in by backward()."""

    __slots__ = ("data", "grad")

    def __init__(self, data, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in _FLOAT_DTYPES:
            arr = arr.astype(np.float32)
        self.data = arr
        self.grad: np.ndarray | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype})"


class Param(Tensor):
    """Trainable tensor carrying Adam state (two moments + step count)."""

    __slots__ = ("m", "v", "step")

    def __init__(self, data, dtype=None):
        super().__init__(data, dtype=dtype)
        self.m = np.zeros_like(self.data)
        self.v = np.zeros_like(self.data)
        self.step = 0
        self.grad = np.zeros_like(self.data)

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def astype(self, dtype) -> "Param":
        """Copy with a new dtype; optimizer state reset."""
        return Param(self.data.astype(dtype))


# --- tape ------------------------------------------------------------------

_TAPE_STACK: list["Tape"] = []


class Tape:
    """Ordered record of executed ops; reverse order is a valid backward order."""

    def __init__(self):
        # entries: (output, inputs tuple, backward fn mapping output grad ->
        # tuple of per-input grads or None)
        self._entries: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []

    def __enter__(self) -> "Tape":
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _TAPE_STACK.pop()

    def _record(self, out: Tensor, inputs: tuple[Tensor, ...], bwd: Callable) -> None:
        self._entries.append((out, inputs, bwd))

    def __len__(self) -> int:
        return len(self._entries)

    def backward(self, loss: Tensor) -> None:
        """Accumulate d(loss)/d(input) into every tensor on the tape.

        Visits each recorded node exactly once, in reverse execution order.
        Gradients add into existing ``.grad`` buffers, so shared
        subexpressions and pre-zeroed Params accumulate correctly.
        """
        if loss.data.size != 1:
            raise ShapeError(f"backward: loss must be scalar, got shape {loss.data.shape}")
        # Clear stale grads on intermediates produced under this tape, but
        # keep Param grads (they are zeroed explicitly by the optimizer loop).
        for out, _, _ in self._entries:
            if not isinstance(out, Param):
                out.grad = None
        loss.grad = np.ones_like(loss.data)
        for out, inputs, bwd in reversed(self._entries):
            g = out.grad
            if g is None:
                continue  # not reachable from the loss
            in_grads = bwd(g)
            for t, gi in zip(inputs, in_grads):
                if gi is None:
                    continue
                if t.grad is None:
                    t.grad = gi
                else:
                    t.grad = t.grad + gi


def _active_tape() -> Tape | None:
    return _TAPE_STACK[-1] if _TAPE_STACK else None


def _make(out_data: np.ndarray, inputs: tuple[Tensor, ...], bwd: Callable) -> Tensor:
    if CHECK_FINITE and not np.all(np.isfinite(out_data)):
        raise FloatingPointError("op produced non-finite values")
    out = Tensor(out_data)
    tape = _active_tape()
    if tape is not None:
        tape._record(out, inputs, bwd)
    return out


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _check_same_dtype(op: str, a: Tensor, b: Tensor) -> None:
    if a.dtype != b.dtype:
        raise ShapeError(f"{op}: dtype mismatch {a.dtype} vs {b.dtype}")


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to ``shape``."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _broadcast_ok(a_shape: tuple[int, ...], b_shape: tuple[int, ...]) -> bool:
    """Allow equal shapes or trailing-dims (bias-style) broadcasting only."""
    if a_shape == b_shape:
        return True
    small, big = (a_shape, b_shape) if len(a_shape) <= len(b_shape) else (b_shape, a_shape)
    if len(small) == 0:
        return True
    tail = big[len(big) - len(small):]
    return all(s == t or s == 1 for s, t in zip(small, tail))


# --- elementwise and linear ops ---------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_same_dtype("add", a, b)
    if not _broadcast_ok(a.shape, b.shape):
        raise ShapeError(f"add: incompatible shapes {a.shape} and {b.shape}")
    out = a.data + b.data

    def bwd(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(out, (a, b), bwd)


def sub(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_same_dtype("sub", a, b)
    if not _broadcast_ok(a.shape, b.shape):
        raise ShapeError(f"sub: incompatible shapes {a.shape} and {b.shape}")
    out = a.data - b.data

    def bwd(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(out, (a, b), bwd)


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_same_dtype("mul", a, b)
    if not _broadcast_ok(a.shape, b.shape):
        raise ShapeError(f"mul: incompatible shapes {a.shape} and {b.shape}")
    out = a.data * b.data
    ad, bd = a.data, b.data

    def bwd(g):
        return _unbroadcast(g * bd, a.shape), _unbroadcast(g * ad, b.shape)

    return _make(out, (a, b), bwd)


def scale(a: Tensor, s: float) -> Tensor:
    a = _as_tensor(a)
    s = a.dtype.type(s)
    out = a.data * s

    def bwd(g):
        return (g * s,)

    return _make(out, (a,), bwd)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product; either side may carry leading batch dims."""
    a, b = _as_tensor(a), _as_tensor(b)
    _check_same_dtype("matmul", a, b)
    if a.ndim < 1 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    out = a.data @ b.data
    ad, bd = a.data, b.data

    def bwd(g):
        if ad.ndim == 1:
            ga = g @ np.swapaxes(bd, -1, -2)
            gb = np.outer(ad, g) if bd.ndim == 2 else None
            if gb is None:
                raise ShapeError("matmul backward: unsupported 1-d/batched combination")
        else:
            ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape)
            gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape)
        return ga, gb

    return _make(out, (a, b), bwd)


def linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """x @ w + b with b broadcast over leading dims."""
    return add(matmul(x, w), b)


def relu(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    mask = x.data > 0
    out = np.where(mask, x.data, x.dtype.type(0))

    def bwd(g):
        return (g * mask,)

    return _make(out, (x,), bwd)


def dropout(x: Tensor, p: float, train: bool, rng: np.random.Generator | None = None) -> Tensor:
    """Inverted dropout: keeps scale 1/(1-p) while training, identity otherwise."""
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout: p must be in [0, 1), got {p}")
    if not train or p == 0.0:
        return x
    if rng is None:
        raise ValueError("dropout: rng required when train=True and p > 0")
    x = _as_tensor(x)
    keep = (rng.random(x.shape) >= p).astype(x.dtype) / x.dtype.type(1.0 - p)
    out = x.data * keep

    def bwd(g):
        return (g * keep,)

    return _make(out, (x,), bwd)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    x = _as_tensor(x)
    y = x.data - x.data.max(axis=axis, keepdims=True)
    np.exp(y, out=y)
    y /= y.sum(axis=axis, keepdims=True)

    def bwd(g):
        gx = g * y
        gx -= gx.sum(axis=axis, keepdims=True) * y
        return (gx,)

    return _make(y, (x,), bwd)


def layer_norm(x: Tensor, axis: int = -1, eps: float = 1e-5) -> Tensor:
    """Normalize to zero mean / unit variance along ``axis`` (no affine)."""
    x = _as_tensor(x)
    mu = x.data.mean(axis=axis, keepdims=True)
    var = x.data.var(axis=axis, keepdims=True)
    inv = 1.0 / np.sqrt(var + x.dtype.type(eps))
    y = (x.data - mu) * inv
    n = x.shape[axis]

    def bwd(g):
        gm = g.mean(axis=axis, keepdims=True)
        gy = (g * y).mean(axis=axis, keepdims=True)
        return ((g - gm - y * gy) * inv,)

    return _make(y.astype(x.dtype, copy=False), (x,), bwd)


# --- shape ops ---------------------------------------------------------------


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    x = _as_tensor(x)
    shape = tuple(shape)
    out = x.data.reshape(shape)
    orig = x.shape

    def bwd(g):
        return (g.reshape(orig),)

    return _make(out, (x,), bwd)


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    x = _as_tensor(x)
    axes = tuple(axes)
    out = np.transpose(x.data, axes)
    inv = tuple(np.argsort(axes))

    def bwd(g):
        return (np.transpose(g, inv),)

    return _make(out, (x,), bwd)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    ts = [_as_tensor(t) for t in tensors]
    for t in ts[1:]:
        _check_same_dtype("concat", ts[0], t)
    out = np.concatenate([t.data for t in ts], axis=axis)
    sizes = [t.shape[axis] for t in ts]
    splits = np.cumsum(sizes)[:-1]

    def bwd(g):
        return tuple(np.split(g, splits, axis=axis))

    return _make(out, tuple(ts), bwd)


def select_index(x: Tensor, axis: int, index: int) -> Tensor:
    """Pick one slice along ``axis`` (the axis is dropped)."""
    x = _as_tensor(x)
    out = np.take(x.data, index, axis=axis)
    shape = x.shape

    def bwd(g):
        gx = np.zeros(shape, dtype=g.dtype)
        sl = [slice(None)] * len(shape)
        sl[axis] = index
        gx[tuple(sl)] = g
        return (gx,)

    return _make(out, (x,), bwd)


def narrow(x: Tensor, axis: int, start: int, length: int) -> Tensor:
    """Contiguous slice [start, start+length) along ``axis``."""
    x = _as_tensor(x)
    if start < 0 or start + length > x.shape[axis]:
        raise ShapeError(f"narrow: [{start}, {start + length}) out of range for axis {axis} of {x.shape}")
    sl = [slice(None)] * x.ndim
    sl[axis] = slice(start, start + length)
    out = x.data[tuple(sl)]
    shape = x.shape

    def bwd(g):
        gx = np.zeros(shape, dtype=g.dtype)
        gx[tuple(sl)] = g
        return (gx,)

    return _make(out, (x,), bwd)


def gather_time(x: Tensor, idx: np.ndarray) -> Tensor:
    """Gather rows along axis 1: x (B, T, C), idx (L, K) -> (B, L, K, C).

    Backward scatter-adds, so repeated indices (edge-clamped padding,
    overlapping conv windows) accumulate correctly.
    """
    x = _as_tensor(x)
    if x.ndim != 3:
        raise ShapeError(f"gather_time: expected (B, T, C) input, got {x.shape}")
    idx = np.asarray(idx, dtype=np.intp)
    out = x.data[:, idx, :]
    shape = x.shape

    def bwd(g):
        gx = np.zeros(shape, dtype=g.dtype)
        np.add.at(gx, (slice(None), idx), g)
        return (gx,)

    return _make(out, (x,), bwd)


# --- reductions and losses ---------------------------------------------------


def mean(x: Tensor, axis: int | None = None) -> Tensor:
    x = _as_tensor(x)
    out = np.asarray(x.data.mean(axis=axis, dtype=np.float64)).astype(x.dtype)
    shape = x.shape
    count = x.size if axis is None else shape[axis]

    def bwd(g):
        if axis is None:
            return (np.broadcast_to(g / count, shape).astype(g.dtype),)
        return (np.broadcast_to(np.expand_dims(g, axis) / count, shape).astype(g.dtype),)

    return _make(out, (x,), bwd)


def sum_(x: Tensor, axis: int | None = None) -> Tensor:
    x = _as_tensor(x)
    out = np.asarray(x.data.sum(axis=axis, dtype=np.float64)).astype(x.dtype)
    shape = x.shape

    def bwd(g):
        if axis is None:
            return (np.broadcast_to(g, shape).astype(g.dtype),)
        return (np.broadcast_to(np.expand_dims(g, axis), shape).astype(g.dtype),)

    return _make(out, (x,), bwd)


def mse(pred: Tensor, target: Tensor) -> Tensor:
    """Mean over all elements of squared difference."""
    pred, target = _as_tensor(pred), _as_tensor(target)
    _check_same_dtype("mse", pred, target)
    if pred.shape != target.shape:
        raise ShapeError(f"mse: incompatible shapes {pred.shape} and {target.shape}")
    diff = pred.data - target.data
    out = np.asarray(np.mean(diff * diff, dtype=np.float64)).astype(pred.dtype)
    n = pred.size

    def bwd(g):
        gd = (2.0 / n) * g * diff
        return gd.astype(pred.dtype, copy=False), (-gd).astype(pred.dtype, copy=False)

    return _make(out, (pred, target), bwd)


# --- optimizer ---------------------------------------------------------------


def adam_step(
    params: Iterable[Param],
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
    weight_decay: float = 0.0,
) -> None:
    """One Adam update with bias correction and decoupled weight decay.

    Weight decay is applied as lr * wd * theta, independent of the moments.
    """
    for p in params:
        g = p.grad
        if g is None:
            g = np.zeros_like(p.data)
        p.step += 1
        p.m = beta1 * p.m + (1.0 - beta1) * g
        p.v = beta2 * p.v + (1.0 - beta2) * (g * g)
        m_hat = p.m / (1.0 - beta1 ** p.step)
        v_hat = p.v / (1.0 - beta2 ** p.step)
        update = lr * m_hat / (np.sqrt(v_hat) + eps)
        if weight_decay:
            update = update + lr * weight_decay * p.data
        p.data = p.data - update.astype(p.data.dtype, copy=False)


def zero_grads(params: Iterable[Param]) -> None:
    for p in params:
        p.zero_grad()


# --- finite-difference oracle -------------------------------------------------


def fd_gradient_check(
    loss_fn: Callable[[], Tensor],
    params: Sequence[Param],
    n_samples: int = 200,
    h: float = 1e-4,
    rng: np.random.Generator | None = None,
) -> float:
    """Compare tape gradients against central finite differences.

    ``loss_fn`` must be a deterministic closure over ``params`` that rebuilds
    the loss from scratch on each call. Returns the max relative error over
    ``n_samples`` randomly chosen scalar parameters. The finite-difference
    side only ever calls ``loss_fn`` forward, so it is independent of the
    tape's backward rules.

    Central differences are only a valid oracle where the loss is locally
    smooth. When the two one-sided differences disagree, the step crosses a
    relu-style kink and that scalar is skipped; more than 10% skipped fails
    loudly rather than silently validating nothing.
    """
    rng = rng or np.random.default_rng(0)
    with Tape() as tape:
        loss = loss_fn()
    zero_grads(params)
    tape.backward(loss)
    analytic = [p.grad.copy() for p in params]
    l0 = float(loss.data)

    sizes = np.array([p.size for p in params])
    total = int(sizes.sum())
    flat_picks = rng.choice(total, size=min(n_samples, total), replace=False)
    offsets = np.concatenate([[0], np.cumsum(sizes)])

    worst = 0.0
    skipped = 0
    for flat in flat_picks:
        pi = int(np.searchsorted(offsets, flat, side="right") - 1)
        j = int(flat - offsets[pi])
        p = params[pi]
        orig = p.data.flat[j]
        p.data.flat[j] = orig + h
        lp = float(loss_fn().data)
        p.data.flat[j] = orig - h
        lm = float(loss_fn().data)
        p.data.flat[j] = orig
        fd = (lp - lm) / (2.0 * h)
        fd_fwd = (lp - l0) / h
        fd_bwd = (l0 - lm) / h
        scale_ = max(abs(fd_fwd), abs(fd_bwd), 1.0)
        if abs(fd_fwd - fd_bwd) > 0.05 * scale_ + 1e-7:
            skipped += 1
            continue
        an = float(analytic[pi].flat[j])
        # denominator floor absorbs the oracle's own rounding noise on
        # vanishing gradients (softmax key-bias invariance gives exact zeros)
        denom = max(abs(fd), abs(an), 1e-6)
        worst = max(worst, abs(fd - an) / denom)
    if skipped > 0.1 * len(flat_picks):
        raise FloatingPointError(
            f"{skipped}/{len(flat_picks)} sampled parameters sit on kinks; "
            "check point is unsuitable for finite differences")
    return worst
