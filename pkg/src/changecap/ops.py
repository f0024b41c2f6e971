"""Differentiable primitives over :class:`~changecap.tensor.Tensor`.

Every function computes its result in numpy and registers an analytic
vector-Jacobian product on the active tape. Binary operations broadcast
with trailing-dimension alignment; gradients of broadcast operands are
summed back to the operand shape.
"""

from __future__ import annotations

import builtins

import numpy as np

from .tensor import ShapeError, ConfigError, Tensor, record


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to ``shape``."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, s) in enumerate(zip(g.shape, shape)) if s == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _check_binary(a: Tensor, b: Tensor, name: str) -> None:
    if a.dtype != b.dtype:
        raise TypeError(f"{name}: dtype mismatch {a.dtype} vs {b.dtype}")
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{name}: cannot broadcast {a.shape} with {b.shape}") from None


# ---- elementwise ----------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    _check_binary(a, b, "add")
    out = a.data + b.data
    return record(out, (a, b),
                  lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_binary(a, b, "sub")
    out = a.data - b.data
    return record(out, (a, b),
                  lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_binary(a, b, "mul")
    out = a.data * b.data
    return record(out, (a, b),
                  lambda g: (_unbroadcast(g * b.data, a.shape),
                             _unbroadcast(g * a.data, b.shape)))


def div(a: Tensor, b: Tensor) -> Tensor:
    _check_binary(a, b, "div")
    out = a.data / b.data
    return record(out, (a, b),
                  lambda g: (_unbroadcast(g / b.data, a.shape),
                             _unbroadcast(-g * a.data / (b.data * b.data), b.shape)))


def neg(a: Tensor) -> Tensor:
    return record(-a.data, (a,), lambda g: (-g,))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return record(out, (a,), lambda g: (g * out,))


def _sigmoid_data(x: np.ndarray) -> np.ndarray:
    # two-branch form avoids overflow warnings at large |x|
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a: Tensor) -> Tensor:
    out = _sigmoid_data(a.data)
    return record(out, (a,), lambda g: (g * out * (1.0 - out),))


def softplus(a: Tensor) -> Tensor:
    # log1p(exp(-|x|)) + max(x, 0) is exact and overflow-free
    x = a.data
    out = np.log1p(np.exp(-np.abs(x))) + np.maximum(x, 0)
    return record(out, (a,), lambda g: (g * _sigmoid_data(x),))


def silu(a: Tensor) -> Tensor:
    s = _sigmoid_data(a.data)
    out = a.data * s
    return record(out, (a,), lambda g: (g * (s + a.data * s * (1.0 - s)),))


_ELEMENTWISE_BINARY = {"add": add, "sub": sub, "mul": mul}
_ELEMENTWISE_UNARY = {"exp": exp, "softplus": softplus, "sigmoid": sigmoid, "silu": silu}


def elementwise(op: str, a: Tensor, b: Tensor | None = None) -> Tensor:
    """Dispatch by name; binary ops require ``b``, unary ops forbid it."""
    if op in _ELEMENTWISE_BINARY:
        if b is None:
            raise ValueError(f"elementwise '{op}' needs two operands")
        return _ELEMENTWISE_BINARY[op](a, b)
    if op in _ELEMENTWISE_UNARY:
        if b is not None:
            raise ValueError(f"elementwise '{op}' is unary")
        return _ELEMENTWISE_UNARY[op](a)
    raise ValueError(f"unknown elementwise op '{op}'")


# ---- linear algebra --------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs rank >= 2 operands, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner-dimension mismatch: {a.shape} @ {b.shape}")
    out = a.data @ b.data

    def vjp(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return record(out, (a, b), vjp)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    if eps <= 0:
        raise ValueError("layer_norm eps must be positive")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data

    def vjp(g):
        dgamma = _unbroadcast(g * xhat, gamma.shape)
        dbeta = _unbroadcast(g, beta.shape)
        dxhat = g * gamma.data
        dx = inv * (dxhat
                    - dxhat.mean(axis=-1, keepdims=True)
                    - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        return dx, dgamma, dbeta

    return record(out, (x, gamma, beta), vjp)


def depthwise_conv1d(x: Tensor, kernel: Tensor, padding: str = "same") -> Tensor:
    """Per-channel 1-d convolution along axis -2 with zero padding.

    ``same`` pads symmetrically (odd kernel only); ``causal`` pads left so
    output position l sees only inputs <= l.
    """
    k = kernel.shape[0]
    length = x.shape[-2]
    if kernel.ndim != 2 or kernel.shape[1] != x.shape[-1]:
        raise ShapeError(f"kernel {kernel.shape} does not match channels of {x.shape}")
    if k > 2 * length + 1:
        raise ConfigError(f"kernel size {k} too large for sequence length {length}")
    if padding == "same":
        if k % 2 == 0:
            raise ConfigError("'same' padding requires an odd kernel size")
        pl = pr = k // 2
    elif padding == "causal":
        pl, pr = k - 1, 0
    else:
        raise ValueError(f"unknown padding '{padding}'")

    pad = [(0, 0)] * (x.ndim - 2) + [(pl, pr), (0, 0)]
    xp = np.pad(x.data, pad)
    out = np.zeros_like(x.data)
    for j in range(k):
        out += kernel.data[j] * xp[..., j:j + length, :]

    def vjp(g):
        gp = np.zeros_like(xp)
        dk = np.empty_like(kernel.data)
        lead = tuple(range(g.ndim - 1))
        for j in range(k):
            gp[..., j:j + length, :] += g * kernel.data[j]
            dk[j] = (g * xp[..., j:j + length, :]).sum(axis=lead)
        dx = gp[..., pl:pl + length, :] if pr else gp[..., pl:, :]
        return dx, dk

    return record(out, (x, kernel), vjp)


def flip_seq(x: Tensor) -> Tensor:
    """Reverse the row order (axis -2)."""
    out = np.flip(x.data, axis=-2).copy()
    return record(out, (x,), lambda g: (np.flip(g, axis=-2).copy(),))


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return record(out, (x,), vjp)


def softmax_cross_entropy(logits: Tensor, targets: np.ndarray,
                          mask: np.ndarray | None = None) -> Tensor:
    """Mean negative log-likelihood with a numerically stable log-softmax.

    ``targets`` holds integer ids with shape ``logits.shape[:-1]``; ``mask``
    (same shape, optional) selects which positions enter the average.
    """
    targets = np.asarray(targets)
    if targets.shape != logits.shape[:-1]:
        raise ShapeError(f"targets {targets.shape} do not match logits {logits.shape}")
    vocab = logits.shape[-1]
    bad = (targets < 0) | (targets >= vocab)
    if bad.any():
        pos = tuple(int(v) for v in np.argwhere(bad)[0])
        raise IndexError(
            f"target id {int(targets[pos])} out of range [0, {vocab}) at position {pos}")
    if mask is None:
        mask_f = np.ones(targets.shape, dtype=logits.dtype)
    else:
        mask_f = np.asarray(mask).astype(logits.dtype)
    n = mask_f.sum()
    if n <= 0:
        raise ValueError("softmax_cross_entropy: no unmasked positions to score")

    z = logits.data - logits.data.max(axis=-1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
    idx = targets[..., None]
    picked = np.take_along_axis(logp, idx, axis=-1)[..., 0]
    loss = np.asarray(-(picked * mask_f).sum() / n, dtype=logits.dtype)

    def vjp(g):
        grad = np.exp(logp)
        np.put_along_axis(grad, idx, np.take_along_axis(grad, idx, axis=-1) - 1.0, axis=-1)
        grad *= (mask_f / n)[..., None]
        return (grad * g,)

    return record(loss, (logits,), vjp)


# ---- reductions and shape plumbing ----------------------------------------

def reduce_sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is not None and not keepdims:
            axes = axis if isinstance(axis, tuple) else (axis,)
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, x.shape).copy(),)

    return record(out, (x,), vjp)


def reduce_mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = x.data.mean(axis=axis, keepdims=keepdims)
    scale = x.size / builtins.max(out.size, 1)

    def vjp(g):
        if axis is not None and not keepdims:
            axes = axis if isinstance(axis, tuple) else (axis,)
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, x.shape).copy() / scale,)

    return record(out, (x,), vjp)


def reshape(x: Tensor, shape) -> Tensor:
    out = x.data.reshape(shape)
    return record(out, (x,), lambda g: (g.reshape(x.shape),))


def transpose(x: Tensor, axes: tuple[int, ...]) -> Tensor:
    inv = tuple(np.argsort(axes))
    out = x.data.transpose(axes)
    return record(out, (x,), lambda g: (g.transpose(inv),))


def concat(parts: list[Tensor], axis: int = -1) -> Tensor:
    if not parts:
        raise ValueError("concat of zero tensors")
    out = np.concatenate([p.data for p in parts], axis=axis)
    offsets = np.cumsum([p.shape[axis] for p in parts])[:-1]

    def vjp(g):
        return tuple(np.ascontiguousarray(piece) for piece in np.split(g, offsets, axis=axis))

    return record(out, tuple(parts), vjp)


def slice_axis(x: Tensor, axis: int, start: int | None, stop: int | None,
               step: int = 1) -> Tensor:
    sl = [slice(None)] * x.ndim
    sl[axis] = slice(start, stop, step)
    sl = tuple(sl)
    out = x.data[sl].copy()

    def vjp(g):
        dx = np.zeros_like(x.data)
        dx[sl] = g
        return (dx,)

    return record(out, (x,), vjp)


def row_slice(x: Tensor, start: int | None, stop: int | None, step: int = 1) -> Tensor:
    """Slice along the sequence axis (-2)."""
    return slice_axis(x, -2, start, stop, step)


def interleave_rows(a: Tensor, b: Tensor) -> Tensor:
    """[a0, b0, a1, b1, ...] along axis -2; operands must share shape."""
    if a.shape != b.shape:
        raise ShapeError(f"interleave_rows needs equal shapes, got {a.shape} vs {b.shape}")
    length = a.shape[-2]
    out_shape = a.shape[:-2] + (2 * length,) + a.shape[-1:]
    out = np.empty(out_shape, dtype=a.data.dtype)
    out[..., 0::2, :] = a.data
    out[..., 1::2, :] = b.data

    def vjp(g):
        return (np.ascontiguousarray(g[..., 0::2, :]),
                np.ascontiguousarray(g[..., 1::2, :]))

    return record(out, (a, b), vjp)


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    """Row gather from ``table`` ([V, D]); backward scatter-adds."""
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError(f"embedding id out of range [0, {table.shape[0]})")
    out = table.data[ids]

    def vjp(g):
        dt = np.zeros_like(table.data)
        np.add.at(dt, ids, g)
        return (dt,)

    return record(out, (table,), vjp)
