"""Dense tensors on a reverse-mode differentiation tape.

The engine is deliberately small: a ``Tensor`` wraps a numpy array (f32 or
f64), and every differentiable primitive appends one ``Node`` to the
innermost active ``Tape``. Creation order on a tape is a topological order,
so the reverse pass is a single backward sweep over the node list.

Conventions that the rest of the package relies on:
  * binary primitives broadcast with trailing-dimension alignment
  * nothing ever mutates the ``data`` buffer of a tensor that has been
    recorded as an operand on a live tape (optimizers run between tapes)
  * a tensor created outside any tape never receives gradient
"""

from __future__ import annotations

import struct
import threading
from typing import Callable, Sequence

import numpy as np


class ShapeError(ValueError):
    """Operand shapes violate an operation's contract."""


class ConfigError(ValueError):
    """A structural hyperparameter is outside its legal range."""


class TapeError(RuntimeError):
    """Misuse of the differentiation tape."""


class Node:
    """One recorded primitive application.

    ``vjp`` maps the gradient at the output to a tuple of gradients aligned
    with ``inputs`` (entries may be None for non-differentiable arguments).
    """

    __slots__ = ("inputs", "output", "vjp")

    def __init__(self, inputs: tuple["Tensor", ...], output: "Tensor",
                 vjp: Callable[[np.ndarray], Sequence[np.ndarray | None]]):
        self.inputs = inputs
        self.output = output
        self.vjp = vjp


_tls = threading.local()


def _tape_stack() -> list["Tape"]:
    stack = getattr(_tls, "tapes", None)
    if stack is None:
        stack = []
        _tls.tapes = stack
    return stack


def active_tape() -> "Tape | None":
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tape:
    """Ordered record of primitive applications on one thread."""

    def __init__(self):
        self.nodes: list[Node] = []

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc):
        popped = _tape_stack().pop()
        assert popped is self, "tapes must unwind in LIFO order"
        return False

    def backward(self, loss: "Tensor") -> None:
        """Populate ``grad`` on every requires_grad leaf reachable from ``loss``.

        Gradients accumulate additively across fan-out, and across repeated
        backward calls (callers zero grads between steps).
        """
        if loss.size != 1:
            raise TapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        if loss.node is None and not loss.requires_grad:
            raise TapeError("loss is not attached to a tape")
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        holders: dict[int, Tensor] = {id(loss): loss}
        for node in reversed(self.nodes):
            g_out = grads.pop(id(node.output), None)
            if g_out is None:
                continue
            holders.pop(id(node.output), None)
            for t, g in zip(node.inputs, node.vjp(g_out)):
                if g is None or not t.tracked:
                    continue
                key = id(t)
                if key in grads:
                    grads[key] = grads[key] + g
                else:
                    grads[key] = g
                    holders[key] = t
        for key, g in grads.items():
            t = holders[key]
            if t.requires_grad:
                t.grad = g if t.grad is None else t.grad + g


class Tensor:
    """A dense n-dimensional array that can participate in a tape."""

    __slots__ = ("data", "requires_grad", "grad", "node")

    def __init__(self, data, dtype=None, requires_grad: bool = False):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.node: Node | None = None

    # ---- introspection -------------------------------------------------

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

    @property
    def tracked(self) -> bool:
        """True when gradient must flow into or through this tensor."""
        return self.requires_grad or self.node is not None

    def item(self) -> float:
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return np.array(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        flags = []
        if self.requires_grad:
            flags.append("requires_grad")
        if self.node is not None:
            flags.append("on_tape")
        tail = (", " + ",".join(flags)) if flags else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype.name}{tail})"

    # ---- operator sugar (delegates to ops primitives) -------------------

    def _coerce(self, other) -> "Tensor":
        if isinstance(other, Tensor):
            return other
        return Tensor(np.asarray(other, dtype=self.data.dtype))

    def __add__(self, other):
        from . import ops
        return ops.add(self, self._coerce(other))

    __radd__ = __add__

    def __sub__(self, other):
        from . import ops
        return ops.sub(self, self._coerce(other))

    def __rsub__(self, other):
        from . import ops
        return ops.sub(self._coerce(other), self)

    def __mul__(self, other):
        from . import ops
        return ops.mul(self, self._coerce(other))

    __rmul__ = __mul__

    def __neg__(self):
        from . import ops
        return ops.neg(self)

    def __matmul__(self, other):
        from . import ops
        return ops.matmul(self, other)

    def sum(self, axis=None, keepdims: bool = False):
        from . import ops
        return ops.reduce_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        from . import ops
        return ops.reduce_mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        from . import ops
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return ops.reshape(self, shape)


def backward(loss: Tensor) -> None:
    """Run the reverse pass of the innermost active tape from ``loss``."""
    tape = active_tape()
    if tape is None:
        raise TapeError("backward called with no active tape")
    tape.backward(loss)


def record(out_data: np.ndarray, inputs: Sequence[Tensor], vjp) -> Tensor:
    """Wrap a primitive's result, appending a node when a tape is listening."""
    out = Tensor(out_data)
    tape = active_tape()
    if tape is not None and any(t.tracked for t in inputs):
        node = Node(tuple(inputs), out, vjp)
        out.node = node
        tape.nodes.append(node)
    return out


def tensor(data, dtype=None, requires_grad: bool = False) -> Tensor:
    return Tensor(data, dtype=dtype, requires_grad=requires_grad)


def zeros(shape, dtype=np.float32, requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype), requires_grad=requires_grad)


def ones(shape, dtype=np.float32, requires_grad: bool = False) -> Tensor:
    return Tensor(np.ones(shape, dtype=dtype), requires_grad=requires_grad)


# ---- binary tensor serialization ----------------------------------------
#
# Layout (little-endian): magic "CAMT", u8 dtype tag (0 = f32, 1 = f64),
# u8 rank, rank x u64 extents, then the raw row-major scalars.

TENSOR_MAGIC = b"CAMT"
_DTYPE_TAG = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}
_TAG_DTYPE = {0: "<f4", 1: "<f8"}


def write_array(fh, arr: np.ndarray) -> None:
    arr = np.ascontiguousarray(arr)
    if arr.dtype not in _DTYPE_TAG:
        raise ValueError(f"unsupported dtype for serialization: {arr.dtype}")
    fh.write(TENSOR_MAGIC)
    fh.write(struct.pack("<BB", _DTYPE_TAG[arr.dtype], arr.ndim))
    fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
    fh.write(arr.astype(_TAG_DTYPE[_DTYPE_TAG[arr.dtype]], copy=False).tobytes())


def read_array(fh) -> np.ndarray:
    magic = fh.read(4)
    if magic != TENSOR_MAGIC:
        raise ValueError(f"bad tensor magic: {magic!r}")
    tag, rank = struct.unpack("<BB", fh.read(2))
    if tag not in _TAG_DTYPE:
        raise ValueError(f"unknown dtype tag {tag}")
    shape = struct.unpack(f"<{rank}Q", fh.read(8 * rank)) if rank else ()
    count = int(np.prod(shape)) if shape else 1
    dt = np.dtype(_TAG_DTYPE[tag])
    buf = fh.read(count * dt.itemsize)
    if len(buf) != count * dt.itemsize:
        raise ValueError("truncated tensor payload")
    return np.frombuffer(buf, dtype=dt).reshape(shape).copy()
