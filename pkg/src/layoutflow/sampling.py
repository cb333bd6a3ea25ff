"""Euler integration of the learned flow from noise to image."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, SamplerDivergenceError


@dataclass(frozen=True)
class SampleConfig:
    steps: int = 50
    t_start: float = 0.999
    seed: int = 0

    def __post_init__(self):
        if self.steps < 1:
            raise ConfigError(f"steps must be >= 1, got {self.steps}")
        if not 0.0 < self.t_start < 1.0:
            raise ConfigError(f"t_start {self.t_start} outside (0, 1)")


def euler_sample(forward, prompt, cond, cfg: SampleConfig, shape, rng=None) -> np.ndarray:
    """Integrate x' = -(eps_hat - x) / (1 - t) from t_start down to zero.

    forward(x, t, prompt, cond) must return a plain noise-prediction array.
    The returned image is clipped to [0, 1].
    """
    if rng is None:
        rng = np.random.default_rng(cfg.seed)
    x = rng.standard_normal(shape)
    dt = cfg.t_start / cfg.steps
    for k in range(cfg.steps):
        t = cfg.t_start - k * dt
        eps_hat = np.asarray(forward(x, t, prompt, cond))
        if not np.isfinite(eps_hat).all():
            raise SamplerDivergenceError(f"non-finite prediction at step {k}")
        v = (eps_hat - x) / max(1.0 - t, 1e-3)
        x = x - dt * v
        if not np.isfinite(x).all():
            raise SamplerDivergenceError(f"non-finite state at step {k}")
    return np.clip(x, 0.0, 1.0)


def euler_sample_many(forward_batch, prompts, conds, seeds, cfg: SampleConfig, shape) -> np.ndarray:
    """Jointly integrate several records whose layouts share an entity count.

    Each record draws its own starting noise from its seed, exactly as a
    solo euler_sample with that seed would. forward_batch(x, t, prompts,
    conds) must return a stacked noise-prediction array.
    """
    n = len(seeds)
    x = np.stack([np.random.default_rng(s).standard_normal(shape) for s in seeds])
    dt = cfg.t_start / cfg.steps
    for k in range(cfg.steps):
        t = cfg.t_start - k * dt
        eps_hat = np.asarray(forward_batch(x, np.full(n, t), prompts, conds))
        if not np.isfinite(eps_hat).all():
            raise SamplerDivergenceError(f"non-finite prediction at step {k}")
        x = x - dt * (eps_hat - x) / max(1.0 - t, 1e-3)
        if not np.isfinite(x).all():
            raise SamplerDivergenceError(f"non-finite state at step {k}")
    return np.clip(x, 0.0, 1.0)


def to_u8(image: np.ndarray) -> np.ndarray:
    """Quantize a [0, 1] float image to 8-bit."""
    return np.clip(np.round(image * 255.0), 0, 255).astype(np.uint8)
