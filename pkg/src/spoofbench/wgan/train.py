"""Alternating WGAN-GP training loops and sampling."""

from __future__ import annotations

import logging
import math
import os
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np

from ..engine import Adam, Tensor, grad, no_grad
from ..formats import save_spfb
from ..rng import stream
from .losses import CriticLossConfig, critic_loss_terms, generator_loss
from .models import Critic, Generator

log = logging.getLogger(__name__)

TRACE_FIELDS = ("iteration", "critic_loss", "generator_loss", "penalty_mean", "grad_norm_mean",
                "wasserstein")


@dataclass
class GanTrainConfig:
    iterations: int = 2000  # generator iterations
    n_critic: int = 5
    batch_size: int = 64
    latent_dim: int = 128
    critic_lr: float = 1e-4
    critic_betas: tuple[float, float] = (0.0, 0.9)
    generator_lr: float = 1e-4
    generator_betas: tuple[float, float] = (0.0, 0.9)
    sigma: float = 0.0  # target-data noise std, as a fraction of the data std
    init_std: float = 0.05
    seed: int = 0
    checkpoint_every: int = 0
    checkpoint_dir: Optional[str] = None

    def __post_init__(self):
        if self.n_critic < 1:
            raise ValueError("n_critic must be >= 1")
        if self.sigma < 0:
            raise ValueError("sigma must be >= 0")
        if self.iterations < 0 or self.batch_size < 1:
            raise ValueError("iterations must be >= 0 and batch_size >= 1")

    @classmethod
    def for_loss(cls, mode: str, **overrides) -> "GanTrainConfig":
        """Defaults per loss mode: mixed runs 20 critic iterations, a 3x generator
        learning rate and target noise of 0.02 data std."""
        base = cls()
        if mode == "mixed":
            base = replace(base, n_critic=20, generator_lr=3e-4, sigma=0.02)
        return replace(base, **overrides)


@dataclass
class GanResult:
    generator: Generator
    critic: Critic
    trace: list[dict] = field(default_factory=list)

    def trace_column(self, name: str) -> np.ndarray:
        return np.array([row[name] for row in self.trace])


class TrainingDiverged(RuntimeError):
    """Non-finite loss; ``checkpoint`` holds the last good generator/critic state."""

    def __init__(self, msg: str, checkpoint: dict):
        super().__init__(msg)
        self.checkpoint = checkpoint


def _to_nhwc(x: np.ndarray, dtype) -> Tensor:
    x = np.asarray(x, dtype=dtype)
    return Tensor(x.reshape(x.shape + (1,)) if x.ndim == 3 else x, dtype=dtype)


def _snapshot(g: Generator, c: Critic) -> dict:
    return {"generator": {k: v.copy() for k, v in g.state_dict().items()},
            "critic": {k: v.copy() for k, v in c.state_dict().items()}}


def save_models(result_or_pair, directory: str | os.PathLike, suffix: str = "") -> tuple[Path, Path]:
    g, c = (result_or_pair.generator, result_or_pair.critic) if isinstance(result_or_pair, GanResult) \
        else result_or_pair
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    gp, cp = d / f"generator{suffix}.spfb", d / f"critic{suffix}.spfb"
    save_spfb(gp, g.state_dict())
    save_spfb(cp, c.state_dict())
    return gp, cp


def _run(real: np.ndarray, others: Optional[np.ndarray], cfg: GanTrainConfig,
         loss_cfg: CriticLossConfig, target_noise: float,
         generator: Optional[Generator] = None, critic: Optional[Critic] = None) -> GanResult:
    if len(real) == 0:
        raise ValueError("no training patches")
    if loss_cfg.mode == "mixed" and (others is None or len(others) == 0):
        raise ValueError("mixed loss needs non-target patches")
    size = real.shape[1]
    g = generator or Generator(cfg.latent_dim, seed=int(stream(cfg.seed, "gen-init").integers(2**31)),
                               size=size, std=cfg.init_std, output_scale=float(real.mean()))
    c = critic or Critic(seed=int(stream(cfg.seed, "critic-init").integers(2**31)), size=size,
                         std=cfg.init_std)
    g.train()
    dtype = g.fc.w.dtype
    g_params, c_params = g.parameters(), c.parameters()
    g_opt = Adam(g_params, lr=cfg.generator_lr, betas=cfg.generator_betas)
    c_opt = Adam(c_params, lr=cfg.critic_lr, betas=cfg.critic_betas)

    rng_real = stream(cfg.seed, "gan-real")
    rng_others = stream(cfg.seed, "gan-others")
    rng_noise = stream(cfg.seed, "gan-target-noise")
    rng_z = stream(cfg.seed, "gan-z")
    rng_eps = stream(cfg.seed, "gan-eps")
    B = cfg.batch_size

    result = GanResult(g, c)
    last_good = _snapshot(g, c)
    for it in range(1, cfg.iterations + 1):
        c_losses, penalties, norms, w_est = [], [], [], []
        for _ in range(cfg.n_critic):
            xb = real[rng_real.integers(0, len(real), B)]
            if target_noise > 0:
                xb = xb + rng_noise.normal(0.0, target_noise, size=xb.shape)
            ob = None
            if loss_cfg.mode == "mixed":
                ob = _to_nhwc(others[rng_others.integers(0, len(others), B)], dtype)
            z = Tensor(rng_z.standard_normal((B, g.latent_dim)), dtype=dtype)
            with no_grad():
                fake = g(z)
            try:
                terms = critic_loss_terms(c, _to_nhwc(xb, dtype), fake, ob, loss_cfg, rng_eps)
            except FloatingPointError as exc:
                raise TrainingDiverged(f"iteration {it}: {exc}", last_good) from exc
            c_opt.step(grad(terms.total, c_params))
            c_losses.append(terms.total.item())
            penalties.append(terms.penalty.item())
            norms.append(float(terms.grad_norm.mean()))
            w_est.append(terms.wasserstein)

        z = Tensor(rng_z.standard_normal((B, g.latent_dim)), dtype=dtype)
        g_loss = generator_loss(c, g(z))
        if not math.isfinite(g_loss.item()):
            raise TrainingDiverged(f"generator loss non-finite at iteration {it}", last_good)
        g_opt.step(grad(g_loss, g_params))

        result.trace.append({
            "iteration": it,
            "critic_loss": float(np.mean(c_losses)),
            "generator_loss": g_loss.item(),
            "penalty_mean": float(np.mean(penalties)),
            "grad_norm_mean": float(np.mean(norms)),
            "wasserstein": float(np.mean(w_est)),
        })
        if it % 50 == 0:
            row = result.trace[-1]
            log.info("iter %d critic %.4f gen %.4f W %.4f |grad| %.3f", it, row["critic_loss"],
                     row["generator_loss"], row["wasserstein"], row["grad_norm_mean"])
        if cfg.checkpoint_every and it % cfg.checkpoint_every == 0:
            last_good = _snapshot(g, c)
            if cfg.checkpoint_dir:
                save_models((g, c), cfg.checkpoint_dir, suffix=f"_{it:06d}")
    return result


def train_untargeted(data: np.ndarray, cfg: GanTrainConfig = GanTrainConfig(), **models) -> GanResult:
    """Plain WGAN-GP on patches from every speaker, shape (N, 64, 64)."""
    data = np.asarray(data, dtype=np.float32)
    return _run(data, None, cfg, CriticLossConfig(mode="plain"), 0.0, **models)


def train_targeted(target: np.ndarray, others: np.ndarray, cfg: GanTrainConfig,
                   loss_cfg: CriticLossConfig, **models) -> GanResult:
    """WGAN-GP on one speaker's patches; in mixed mode the critic also pushes
    down its score on a uniformly drawn batch of non-target patches.

    Target batches get Gaussian noise of std ``cfg.sigma * std(target)``.
    """
    target = np.asarray(target, dtype=np.float32)
    others = None if others is None else np.asarray(others, dtype=np.float32)
    noise = cfg.sigma * float(target.std()) if len(target) else 0.0
    return _run(target, others, cfg, loss_cfg, noise, **models)


def sample(g: Generator, n: int, seed: int, batch: int = 64) -> np.ndarray:
    """``n`` generated patches (n, size, size), clamped to be non-negative.

    Batch norm runs in eval mode (running statistics), so each patch depends
    only on its own noise vector.
    """
    was_training = g.training
    g.eval()
    rng = stream(seed, "sample")
    z = rng.standard_normal((n, g.latent_dim))
    out = []
    with no_grad():
        for i in range(0, n, batch):
            out.append(g(Tensor(z[i:i + batch], dtype=g.fc.w.dtype)).data[..., 0])
    g.train(was_training)
    if not out:
        return np.zeros((0, g.size, g.size), dtype=np.float32)
    return np.maximum(np.concatenate(out), 0.0)
