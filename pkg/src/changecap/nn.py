"""Parameter-holding building blocks and the named-parameter tree walker.

Modules are plain dataclasses of tensors (or of other modules); anything
reachable through dataclass fields, lists, or the special tied-direction
convention shows up in ``named_parameters`` with a stable, slash-separated
name. Checkpoints and the optimizer both key off that tree.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass

import numpy as np

from . import ops
from .tensor import Tensor


@dataclass
class Linear:
    """y = x @ w (+ b), with x shaped (..., fan_in)."""

    w: Tensor
    b: Tensor | None = None

    def __call__(self, x: Tensor) -> Tensor:
        y = ops.matmul(x, self.w)
        return y + self.b if self.b is not None else y


@dataclass
class LayerNorm:
    gamma: Tensor
    beta: Tensor
    eps: float = 1e-5

    def __call__(self, x: Tensor) -> Tensor:
        return ops.layer_norm(x, self.gamma, self.beta, self.eps)


@dataclass
class DepthwiseConv1d:
    kernel: Tensor  # (k, D)
    padding: str = "same"

    def __call__(self, x: Tensor) -> Tensor:
        return ops.depthwise_conv1d(x, self.kernel, padding=self.padding)


def init_linear(fan_in: int, fan_out: int, rng: np.random.Generator,
                dtype=np.float32, bias: bool = True) -> Linear:
    """Uniform in +-sqrt(1/fan_in); bias starts at zero."""
    lim = math.sqrt(1.0 / fan_in)
    w = Tensor(rng.uniform(-lim, lim, size=(fan_in, fan_out)), dtype=dtype, requires_grad=True)
    b = Tensor(np.zeros(fan_out), dtype=dtype, requires_grad=True) if bias else None
    return Linear(w=w, b=b)


def init_layer_norm(width: int, dtype=np.float32) -> LayerNorm:
    return LayerNorm(gamma=Tensor(np.ones(width), dtype=dtype, requires_grad=True),
                     beta=Tensor(np.zeros(width), dtype=dtype, requires_grad=True))


def init_depthwise_conv(width: int, rng: np.random.Generator, kernel_size: int = 3,
                        padding: str = "same", dtype=np.float32) -> DepthwiseConv1d:
    lim = math.sqrt(1.0 / kernel_size)
    k = Tensor(rng.uniform(-lim, lim, size=(kernel_size, width)), dtype=dtype,
               requires_grad=True)
    return DepthwiseConv1d(kernel=k, padding=padding)


def init_embedding(rows: int, width: int, rng: np.random.Generator,
                   dtype=np.float32) -> Tensor:
    return Tensor(rng.normal(0.0, 0.02, size=(rows, width)), dtype=dtype,
                  requires_grad=True)


def named_parameters(module, prefix: str = "") -> dict[str, Tensor]:
    """Flatten a module tree into {slash/separated/name: Tensor}.

    Walks dataclass fields, lists/tuples, and dicts. A tensor object that
    appears more than once (tied weights) is reported only at its first
    name, so optimizers never double-step shared storage.
    """
    out: dict[str, Tensor] = {}
    seen: set[int] = set()

    def walk(obj, path: str):
        if obj is None:
            return
        if isinstance(obj, Tensor):
            if obj.requires_grad and id(obj) not in seen:
                seen.add(id(obj))
                out[path] = obj
            return
        if dataclasses.is_dataclass(obj):
            for f in dataclasses.fields(obj):
                walk(getattr(obj, f.name), f"{path}/{f.name}" if path else f.name)
            return
        if isinstance(obj, (list, tuple)):
            for i, item in enumerate(obj):
                walk(item, f"{path}/{i}")
            return
        if isinstance(obj, dict):
            for key in sorted(obj):
                walk(obj[key], f"{path}/{key}")

    walk(module, prefix)
    return out
