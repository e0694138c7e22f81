"""Minimal parameter containers on top of :mod:`fsct.tensor`."""
from __future__ import annotations

import math
from typing import Iterator, Optional

import numpy as np

from . import tensor as T
from .tensor import Tensor


def parameter(data) -> Tensor:
    return Tensor(data, requires_grad=True)


def uniform_fan_in(rng: np.random.Generator, shape: tuple, fan_in: int) -> Tensor:
    bound = 1.0 / math.sqrt(fan_in)
    return parameter(rng.uniform(-bound, bound, size=shape))


class Module:
    """Discovers parameters and buffers from attributes.

    Parameters are ``Tensor`` attributes with ``requires_grad``; buffers are
    names listed in ``_buffers`` (plain numpy arrays).  Traversal follows
    attribute assignment order, so names are stable across runs.
    """

    _buffers: tuple = ()

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, value in vars(self).items():
            if isinstance(value, Tensor) and value.requires_grad:
                yield prefix + name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(f"{prefix}{name}.")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{prefix}{name}.{i}.")

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for name, value in vars(self).items():
            if name in self._buffers:
                yield prefix + name, value
            elif isinstance(value, Module):
                yield from value.named_buffers(f"{prefix}{name}.")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_buffers(f"{prefix}{name}.{i}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def modules(self) -> Iterator["Module"]:
        yield self
        for value in vars(self).values():
            if isinstance(value, Module):
                yield from value.modules()
            elif isinstance(value, (list, tuple)):
                for item in value:
                    if isinstance(item, Module):
                        yield from item.modules()

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def state_arrays(self) -> dict[str, np.ndarray]:
        arrays = {name: p.data for name, p in self.named_parameters()}
        arrays.update({name: b for name, b in self.named_buffers()})
        return arrays

    def load_state_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        params = dict(self.named_parameters())
        expected = set(params) | {name for name, _ in self.named_buffers()}
        missing = expected - set(arrays)
        unexpected = set(arrays) - expected
        if missing or unexpected:
            raise KeyError(f"state mismatch: missing {sorted(missing)}, unexpected {sorted(unexpected)}")
        for name, p in params.items():
            if arrays[name].shape != p.shape:
                raise ValueError(f"{name}: expected shape {p.shape}, got {arrays[name].shape}")
            p.data = np.array(arrays[name], dtype=np.float64)
        for m_prefix, module in self._named_modules():
            for buf in module._buffers:
                key = m_prefix + buf
                setattr(module, buf, np.array(arrays[key], dtype=np.float64))

    def _named_modules(self, prefix: str = "") -> Iterator[tuple[str, "Module"]]:
        yield prefix, self
        for name, value in vars(self).items():
            if isinstance(value, Module):
                yield from value._named_modules(f"{prefix}{name}.")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item._named_modules(f"{prefix}{name}.{i}.")


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, bias: bool = True) -> None:
        self.weight = uniform_fan_in(rng, (d_in, d_out), d_in)
        self.bias: Optional[Tensor] = uniform_fan_in(rng, (d_out,), d_in) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        out = T.matmul(x, self.weight)
        return out + self.bias if self.bias is not None else out


class LayerNorm(Module):
    def __init__(self, width: int, eps: float = 1e-5) -> None:
        self.gain = parameter(np.ones(width))
        self.bias = parameter(np.zeros(width))
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.gain, self.bias, self.eps)


class BatchNorm2d(Module):
    """Batch statistics while training, running statistics in eval mode."""

    _buffers = ("running_mean", "running_var")

    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5) -> None:
        self.gain = parameter(np.ones(channels))
        self.bias = parameter(np.zeros(channels))
        self.running_mean = np.zeros(channels)
        self.running_var = np.ones(channels)
        self.momentum = momentum
        self.eps = eps

    def __call__(self, x: Tensor, training: bool) -> Tensor:
        shape = (1, -1, 1, 1)
        if training:
            mu = T.mean(x, (0, 2, 3), keepdims=True)
            centered = x - mu
            var = T.mean(centered * centered, (0, 2, 3), keepdims=True)
            count = x.shape[0] * x.shape[2] * x.shape[3]
            unbiased = var.data.reshape(-1) * count / max(count - 1, 1)
            m = self.momentum
            self.running_mean = (1 - m) * self.running_mean + m * mu.data.reshape(-1)
            self.running_var = (1 - m) * self.running_var + m * unbiased
            normed = centered / T.sqrt(var + self.eps)
        else:
            mu = self.running_mean.reshape(shape)
            std = np.sqrt(self.running_var.reshape(shape) + self.eps)
            normed = (x - mu) / std
        return normed * T.reshape(self.gain, shape) + T.reshape(self.bias, shape)
