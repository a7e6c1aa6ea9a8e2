"""DCGAN-shaped generator and critic for 64x64 mel patches."""

from __future__ import annotations

import math
from typing import Sequence

import numpy as np

from ..engine import ShapeError, Tensor, ops
from ..engine.nn import BatchNorm, Conv2d, ConvTranspose2d, Dense, Module

INIT_STD = 0.05


class Generator(Module):
    """Noise vector -> (N, size, size, 1) non-negative patch.

    A dense layer feeds a 4x4 seed through stride-2 transposed convolutions
    (kernel 4, padding 1), each doubling the spatial size. Default widths give
    4x4x256 -> 8x8x128 -> 16x16x64 -> 32x32x32 -> 64x64x1. The final ReLU
    is multiplied by the constant ``output_scale`` buffer.
    """

    _buffers = ("output_scale",)

    def __init__(self, latent_dim: int = 128, seed: int = 0, size: int = 64,
                 widths: Sequence[int] = (256, 128, 64, 32), std: float = INIT_STD,
                 output_scale: float = 1.0):
        if latent_dim < 1:
            raise ValueError(f"latent_dim must be >= 1, got {latent_dim}")
        n_up = int(math.log2(size // 4))
        if 4 * 2 ** n_up != size or len(widths) != n_up:
            raise ValueError(f"size {size} needs {n_up} widths, got {len(widths)}")
        rng = np.random.default_rng(seed)
        self.latent_dim = latent_dim
        self.size = size
        self.widths = tuple(widths)
        self.fc = Dense(latent_dim, 16 * widths[0], rng, std)
        self.bn0 = BatchNorm(widths[0])
        chans = list(widths) + [1]
        self.ups = [ConvTranspose2d(chans[i], chans[i + 1], 4, rng, stride=2, pad=1, std=std)
                    for i in range(n_up)]
        self.bns = [BatchNorm(c) for c in chans[1:-1]]
        # fixed multiplier on the final activation, matched to the data magnitude
        self.output_scale = np.full(1, output_scale, dtype=self.fc.w.dtype)

    def __call__(self, z: Tensor) -> Tensor:
        if z.ndim != 2 or z.shape[1] != self.latent_dim:
            raise ShapeError(f"generator expects (N, {self.latent_dim}) noise, got {z.shape}")
        h = self.fc(z).reshape(z.shape[0], 4, 4, self.widths[0])
        h = ops.relu(self.bn0(h))
        for i, up in enumerate(self.ups):
            h = up(h)
            if i < len(self.bns):
                h = ops.relu(self.bns[i](h))
        return ops.relu(h) * Tensor(self.output_scale, dtype=h.dtype)


class Critic(Module):
    """(N, size, size, 1) patch -> (N,) unbounded score.

    Stride-2 kernel-4 convolutions with leaky-ReLU (slope 0.2), no
    normalization, then a dense layer with no output nonlinearity.
    Default widths give 64 -> 32x32x32 -> 16x16x64 -> 8x8x128 -> 4x4x256.
    """

    def __init__(self, seed: int = 0, size: int = 64, widths: Sequence[int] = (32, 64, 128, 256),
                 std: float = INIT_STD, slope: float = 0.2):
        n_down = int(math.log2(size // 4))
        if 4 * 2 ** n_down != size or len(widths) != n_down:
            raise ValueError(f"size {size} needs {n_down} widths, got {len(widths)}")
        rng = np.random.default_rng(seed)
        self.size = size
        self.widths = tuple(widths)
        self.slope = slope
        chans = [1] + list(widths)
        self.convs = [Conv2d(chans[i], chans[i + 1], 4, rng, stride=2, pad=1, std=std)
                      for i in range(n_down)]
        self.fc = Dense(16 * widths[-1], 1, rng, std)

    def __call__(self, x: Tensor) -> Tensor:
        if x.ndim == 3:
            x = x.reshape(*x.shape, 1)
        if x.shape[1:] != (self.size, self.size, 1):
            raise ShapeError(f"critic expects (N, {self.size}, {self.size}, 1), got {x.shape}")
        h = x
        for conv in self.convs:
            h = ops.leaky_relu(conv(h), self.slope)
        return self.fc(h.reshape(x.shape[0], 16 * self.widths[-1])).reshape(x.shape[0])


def generator_from_state(state: dict) -> Generator:
    """Rebuild a generator whose architecture is implied by checkpoint shapes."""
    latent_dim, seed_units = state["fc.w"].shape
    n_up = sum(1 for k in state if k.startswith("ups.") and k.endswith(".w"))
    widths = [state[f"ups.{i}.w"].shape[0] for i in range(n_up)]
    if seed_units != 16 * widths[0]:
        raise ValueError(f"fc.w output {seed_units} does not match first width {widths[0]}")
    g = Generator(latent_dim, size=4 * 2 ** n_up, widths=widths)
    g.load_state_dict(state)
    return g


def critic_from_state(state: dict) -> Critic:
    n_down = sum(1 for k in state if k.startswith("convs.") and k.endswith(".w"))
    widths = [state[f"convs.{i}.w"].shape[3] for i in range(n_down)]
    c = Critic(size=4 * 2 ** n_down, widths=widths)
    c.load_state_dict(state)
    return c
