"""DDIM schedule arithmetic.

The grid has T+1 indices: k=0 is the clean latent (alpha_bar = 1) and
k=T is the noisiest state. Training-time alphas follow the scaled-linear
beta schedule common to latent diffusion checkpoints; the grid strides
evenly through the 1000 training steps.
"""

from __future__ import annotations

import dataclasses

import torch

from ..errors import ConfigError

TRAIN_STEPS = 1000
BETA_START = 0.00085
BETA_END = 0.012


@dataclasses.dataclass
class SamplerConfig:
    steps: int = 50
    guidance_scale_invert: float = 0.0
    guidance_scale_edit: float = 2.5
    seed: int = 0

    def __post_init__(self):
        if self.steps < 2:
            raise ConfigError("steps must be at least 2")
        if self.guidance_scale_invert < 0 or self.guidance_scale_edit < 0:
            raise ConfigError("guidance scales must be nonnegative")


def train_alphas_bar(train_steps: int = TRAIN_STEPS) -> torch.Tensor:
    betas = torch.linspace(BETA_START ** 0.5, BETA_END ** 0.5, train_steps,
                           dtype=torch.float64) ** 2
    return torch.cumprod(1.0 - betas, dim=0)


class DdimSchedule:
    """Deterministic DDIM updates over a T+1 point alpha_bar grid."""

    def __init__(self, steps: int = 50, train_steps: int = TRAIN_STEPS):
        if steps < 2 or train_steps % steps != 0:
            raise ConfigError(
                f"steps must be >= 2 and divide {train_steps}, got {steps}")
        self.steps = steps
        stride = train_steps // steps
        full = train_alphas_bar(train_steps)
        grid = torch.empty(steps + 1, dtype=torch.float64)
        grid[0] = 1.0
        for k in range(1, steps + 1):
            grid[k] = full[k * stride - 1]
        self.alphas_bar = grid

    def alpha_bar(self, k: int) -> float:
        return float(self.alphas_bar[k])

    def sqrt_alpha_bar(self, k: int) -> float:
        return float(self.alphas_bar[k].sqrt())

    def sigma(self, k: int) -> float:
        """Noise-to-signal ratio sqrt((1 - alpha_bar)/alpha_bar) at k."""
        ab = self.alphas_bar[k]
        return float(((1.0 - ab) / ab).sqrt())

    def predict_x0(self, latent: torch.Tensor, k: int,
                   noise: torch.Tensor) -> torch.Tensor:
        """Predicted clean latent from the state at grid index k."""
        ab = self.alphas_bar[k]
        return (latent - (1.0 - ab).sqrt() * noise) / ab.sqrt()

    def ddim_step(self, latent: torch.Tensor, k: int,
                  noise: torch.Tensor) -> torch.Tensor:
        """One deterministic step k -> k-1."""
        if not 1 <= k <= self.steps:
            raise ConfigError(f"ddim_step needs 1 <= k <= {self.steps}, got {k}")
        x0 = self.predict_x0(latent, k, noise)
        ab_prev = self.alphas_bar[k - 1]
        return ab_prev.sqrt() * x0 + (1.0 - ab_prev).sqrt() * noise

    def ddim_inverse_step(self, latent: torch.Tensor, k: int,
                          noise: torch.Tensor) -> torch.Tensor:
        """One deterministic inversion step k -> k+1."""
        if not 0 <= k <= self.steps - 1:
            raise ConfigError(
                f"ddim_inverse_step needs 0 <= k <= {self.steps - 1}, got {k}")
        x0 = self.predict_x0(latent, k, noise)
        ab_next = self.alphas_bar[k + 1]
        return ab_next.sqrt() * x0 + (1.0 - ab_next).sqrt() * noise
