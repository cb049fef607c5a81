"""Small parameter-owning building blocks on top of the autodiff tensors.

A Module discovers its parameters by walking its attributes, so checkpoint
names come out as dotted paths like "decoder.fuse.0.conv.weight". Attribute
insertion order is the construction order, which keeps both the name order
and the RNG consumption order deterministic.

Weight matrices and conv kernels initialize from a shared Generator with
uniform values in [-1/sqrt(fan_in), +1/sqrt(fan_in)]; biases start at zero;
norm gains start at one.
"""

from __future__ import annotations

from typing import Iterator

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ShapeError, UsageError


class Module:
    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, value in vars(self).items():
            path = f"{prefix}{name}"
            if isinstance(value, Tensor):
                if value.requires_grad:
                    yield path, value
            elif isinstance(value, Module):
                yield from value.named_parameters(path + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{path}.{i}.")
                    elif isinstance(item, Tensor) and item.requires_grad:
                        yield f"{path}.{i}", item

    def parameters(self) -> list[Tensor]:
        return [t for _, t in self.named_parameters()]

    def zero_grad(self) -> None:
        for t in self.parameters():
            t.grad = None


def _init_weight(shape: tuple[int, ...], fan_in: int, rng: np.random.Generator, dtype) -> Tensor:
    bound = 1.0 / np.sqrt(fan_in)
    return Tensor.uniform(shape, -bound, bound, rng, dtype=dtype, requires_grad=True)


class Linear(Module):
    """y = x @ weight + bias, applied to the last axis of [T, d_in] tokens."""

    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, dtype=np.float32):
        self.weight = _init_weight((d_in, d_out), d_in, rng, dtype)
        self.bias = Tensor.zeros((d_out,), dtype=dtype, requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return ad.matmul(x, self.weight) + self.bias


class Conv(Module):
    """conv2d with its own kernel and bias; kernel [C_out, C_in, k, k]."""

    def __init__(self, c_in: int, c_out: int, k: int, rng: np.random.Generator, pad: int | None = None, dtype=np.float32):
        if pad is None:
            pad = k // 2  # same-size output for odd k at stride 1
        self.weight = _init_weight((c_out, c_in, k, k), c_in * k * k, rng, dtype)
        self.bias = Tensor.zeros((c_out,), dtype=dtype, requires_grad=True)
        self.pad = pad

    def __call__(self, x: Tensor) -> Tensor:
        return ad.conv2d(x, self.weight, self.bias, stride=1, pad=self.pad)


class LayerNorm(Module):
    def __init__(self, d: int, dtype=np.float32, eps: float = 1e-5):
        self.gain = Tensor(np.ones(d, dtype=dtype), requires_grad=True)
        self.bias = Tensor.zeros((d,), dtype=dtype, requires_grad=True)
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return ad.layer_norm(x, self.gain, self.bias, self.eps)


def load_state(module: Module, state: dict[str, np.ndarray], prefix: str = "") -> None:
    """Copy named arrays into an already-constructed module, strictly."""
    params = dict(module.named_parameters())
    wanted = {k[len(prefix):]: v for k, v in state.items() if k.startswith(prefix)}
    missing = sorted(set(params) - set(wanted))
    extra = sorted(set(wanted) - set(params))
    if missing or extra:
        raise UsageError(f"state mismatch; missing={missing[:5]} extra={extra[:5]}")
    for name, tensor in params.items():
        arr = wanted[name]
        if tuple(arr.shape) != tensor.shape:
            raise ShapeError(f"parameter {name}: checkpoint shape {arr.shape} != model shape {tensor.shape}")
        tensor.data = arr.astype(tensor.data.dtype, copy=True)
