"""Generator loss and the WGAN-GP / mixed critic losses."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, NamedTuple, Optional

import numpy as np

from ..engine import ShapeError, Tensor, grad, ops


@dataclass(frozen=True)
class CriticLossConfig:
    """``mode="mixed"`` adds ``alpha * E[D(others)]``; ``alpha`` is ignored in plain mode."""

    lam: float = 10.0
    alpha: float = 1.0
    mode: str = "plain"

    def __post_init__(self):
        if self.mode not in ("plain", "mixed"):
            raise ValueError(f"mode must be 'plain' or 'mixed', got {self.mode!r}")
        if self.lam < 0 or self.alpha < 0:
            raise ValueError("lam and alpha must be non-negative")


class CriticTerms(NamedTuple):
    total: Tensor
    fake: Tensor
    real: Tensor
    others: Optional[Tensor]
    penalty: Tensor  # unweighted E[(|grad| - 1)^2]
    grad_norm: np.ndarray  # per-sample |grad D(x_hat)|

    @property
    def wasserstein(self) -> float:
        """Critic estimate E[D(real)] - E[D(fake)]."""
        return self.real.item() - self.fake.item()


def generator_loss(critic: Callable[[Tensor], Tensor], fake: Tensor) -> Tensor:
    return -ops.mean(critic(fake))


def interpolate(real: Tensor, fake: Tensor, rng: np.random.Generator | None = None,
                eps: np.ndarray | None = None) -> Tensor:
    """Per-sample ``eps*real + (1-eps)*fake`` with ``eps ~ U[0, 1]`` unless given."""
    if real.shape != fake.shape:
        raise ShapeError(f"interpolate: real {real.shape} vs fake {fake.shape}")
    if eps is None:
        eps = rng.random(real.shape[0])
    e = np.asarray(eps, dtype=real.dtype).reshape((real.shape[0],) + (1,) * (real.ndim - 1))
    e = np.broadcast_to(e, real.shape)
    return Tensor(e * real.data + (1 - e) * fake.data, dtype=real.dtype)


def gradient_penalty(critic: Callable[[Tensor], Tensor], x_hat: Tensor) -> tuple[Tensor, np.ndarray]:
    """``E[(||grad_x D(x_hat)||_2 - 1)^2]`` with the gradient kept in the graph.

    Samples are independent under the critic, so the gradient of the summed
    scores yields every per-sample gradient at once.
    """
    x_hat = Tensor(x_hat.data, requires_grad=True, dtype=x_hat.dtype)
    scores = critic(x_hat)
    (g,) = grad(ops.sum(scores), [x_hat], create_graph=True)
    norms = ops.l2_norm(g, axis=tuple(range(1, g.ndim)))
    return ops.mean((norms - 1.0) ** 2), norms.data.copy()


def critic_loss_terms(critic: Callable[[Tensor], Tensor], real: Tensor, fake: Tensor,
                      others: Optional[Tensor], cfg: CriticLossConfig,
                      rng: np.random.Generator | None = None,
                      eps: np.ndarray | None = None) -> CriticTerms:
    """``E[D(fake)] (+ alpha E[D(others)]) - E[D(real)] + lam E[(|grad D(x_hat)| - 1)^2]``.

    ``x_hat`` interpolates between ``real`` and ``fake`` only.
    """
    if cfg.mode == "mixed" and others is None:
        raise ValueError("mixed critic loss needs an others batch")
    d_fake = ops.mean(critic(fake))
    total = d_fake
    d_others = None
    if cfg.mode == "mixed":
        d_others = ops.mean(critic(others))
        total = total + d_others * cfg.alpha
    d_real = ops.mean(critic(real))
    penalty, norms = gradient_penalty(critic, interpolate(real, fake, rng, eps))
    total = total - d_real + penalty * cfg.lam
    if not np.isfinite(total.item()):
        raise FloatingPointError(f"non-finite critic loss {total.item()}")
    return CriticTerms(total, d_fake, d_real, d_others, penalty, norms)


def critic_loss(critic, real, fake, others, cfg: CriticLossConfig, rng=None, eps=None) -> Tensor:
    return critic_loss_terms(critic, real, fake, others, cfg, rng, eps).total
