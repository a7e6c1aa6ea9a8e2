"""Minimal layer containers holding named parameters."""

from __future__ import annotations

from typing import Iterator, Optional

import numpy as np

from . import ops
from .tensor import Tensor, get_dtype


def normal_init(rng: np.random.Generator, shape, std: float, truncated: bool = False) -> np.ndarray:
    w = rng.normal(0.0, std, size=shape)
    if truncated:
        # redraw samples beyond two standard deviations
        bad = np.abs(w) > 2 * std
        while bad.any():
            w[bad] = rng.normal(0.0, std, size=int(bad.sum()))
            bad = np.abs(w) > 2 * std
    return w.astype(get_dtype())


def param(data: np.ndarray) -> Tensor:
    return Tensor(data, requires_grad=True)


class Module:
    """Container with named parameters, buffers and child modules."""

    training = True

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, value in vars(self).items():
            if isinstance(value, Tensor) and value.requires_grad:
                yield prefix + name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(f"{prefix}{name}.")
            elif isinstance(value, list) and value and isinstance(value[0], Module):
                for i, child in enumerate(value):
                    yield from child.named_parameters(f"{prefix}{name}.{i}.")

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for name, value in vars(self).items():
            if isinstance(value, Module):
                yield from value.named_buffers(f"{prefix}{name}.")
            elif isinstance(value, list) and value and isinstance(value[0], Module):
                for i, child in enumerate(value):
                    yield from child.named_buffers(f"{prefix}{name}.{i}.")
        for name in getattr(self, "_buffers", ()):
            yield prefix + name, getattr(self, name)

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {k: p.data for k, p in self.named_parameters()}
        state.update(dict(self.named_buffers()))
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        buffers = dict(self.named_buffers())
        expected = set(own) | set(buffers)
        if set(state) != expected:
            missing = sorted(expected - set(state))
            extra = sorted(set(state) - expected)
            raise KeyError(f"state mismatch: missing {missing}, unexpected {extra}")
        for k, p in own.items():
            if state[k].shape != p.shape:
                raise ValueError(f"{k}: checkpoint shape {state[k].shape} != {p.shape}")
            p.data[...] = state[k]
        for k, buf in buffers.items():
            buf[...] = state[k]

    def train(self, mode: bool = True):
        for m in self._modules():
            m.training = mode
        return self

    def eval(self):
        return self.train(False)

    def _modules(self) -> Iterator["Module"]:
        yield self
        for value in vars(self).values():
            if isinstance(value, Module):
                yield from value._modules()
            elif isinstance(value, list) and value and isinstance(value[0], Module):
                for child in value:
                    yield from child._modules()


class Dense(Module):
    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator, std: float = 0.05,
                 truncated: bool = False):
        self.w = param(normal_init(rng, (n_in, n_out), std, truncated))
        self.b = param(np.zeros(n_out, dtype=get_dtype()))

    def __call__(self, x: Tensor) -> Tensor:
        return ops.dense(x, self.w, self.b)


class Conv2d(Module):
    def __init__(self, c_in: int, c_out: int, k: int, rng: np.random.Generator, stride: int = 1,
                 pad: int = 0, std: float = 0.05, truncated: bool = False):
        self.w = param(normal_init(rng, (k, k, c_in, c_out), std, truncated))
        self.b = param(np.zeros(c_out, dtype=get_dtype()))
        self.stride, self.pad = stride, pad

    def __call__(self, x: Tensor) -> Tensor:
        return ops.conv2d(x, self.w, self.b, self.stride, self.pad)


class ConvTranspose2d(Module):
    def __init__(self, c_in: int, c_out: int, k: int, rng: np.random.Generator, stride: int = 1,
                 pad: int = 0, std: float = 0.05):
        self.w = param(normal_init(rng, (c_in, k, k, c_out), std))
        self.b = param(np.zeros(c_out, dtype=get_dtype()))
        self.stride, self.pad = stride, pad

    def __call__(self, x: Tensor) -> Tensor:
        return ops.conv_transpose2d(x, self.w, self.b, self.stride, self.pad)


class BatchNorm(Module):
    """Batch normalization over all but the last (channel) axis.

    Training mode normalizes with batch statistics and updates running
    averages; eval mode uses the running averages.
    """

    _buffers = ("running_mean", "running_var")

    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5):
        dt = get_dtype()
        self.gamma = param(np.ones(channels, dtype=dt))
        self.beta = param(np.zeros(channels, dtype=dt))
        self.running_mean = np.zeros(channels, dtype=dt)
        self.running_var = np.ones(channels, dtype=dt)
        self.momentum, self.eps = momentum, eps

    def __call__(self, x: Tensor) -> Tensor:
        axes = tuple(range(x.ndim - 1))
        if self.training:
            mu = x.data.mean(axis=axes)
            var = x.data.var(axis=axes)
            self.running_mean *= 1 - self.momentum
            self.running_mean += self.momentum * mu
            self.running_var *= 1 - self.momentum
            self.running_var += self.momentum * var
            return ops.batch_norm(x, self.gamma, self.beta, axes, self.eps)
        scale = Tensor(1.0 / np.sqrt(self.running_var + self.eps), dtype=x.dtype)
        return (x - Tensor(self.running_mean, dtype=x.dtype)) * scale * self.gamma + self.beta
