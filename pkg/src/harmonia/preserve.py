"""Content structure preservation during editing.

Two mechanisms keep the edited foreground recognizably the same object:

- Attention control: self-attention maps recorded during inversion are
  injected back at configured timesteps of the edit pass, and the
  cross-attention columns of the foreground condition tokens are frozen
  to their recorded maps while the embedding under those tokens is
  swapped for the fused background embedding.
- Edge-constrained null-text optimization: at every sampling step the
  unconditional embedding takes a few gradient updates that pull the
  intermediate decoded image's edges (Sobel, plus an optional deep
  detector weighted by gamma) toward the original image's edges.

Sobel responses are computed on Rec.601 luma with reflective padding.
The horizontal and vertical kernel responses are summed with sign, so a
map may be negative; a gradient-magnitude variant sits behind a flag.
Deep edge maps are normalized to [0, 1].
"""

from __future__ import annotations

import dataclasses
import importlib
import warnings
from typing import Callable, Optional

import numpy as np
import torch

from .diffusion.attention import AttentionController, RecordingController
from .diffusion.backend import DiffusionBackend, DiffusionTrajectory, Latent
from .diffusion.tokens import PromptTokens
from .errors import ConfigError, InputError
from .imagecore import LUMA_WEIGHTS, RasterImage

SOBEL_HORIZONTAL = torch.tensor(
    [[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]],
    dtype=torch.float64)
SOBEL_VERTICAL = SOBEL_HORIZONTAL.T.contiguous()

NORMALIZATION_GUARD = 1e-8


@dataclasses.dataclass
class PreserveConfig:
    """Structure-preservation settings.

    self_attention_steps of None means every sampling step; pass an
    explicit set (such as painterly_steps()) to restrict injection.
    """

    gamma: float = 0.1
    self_attention_steps: Optional[set[int]] = None
    painterly_fraction: float = 0.6
    null_lr: float = 1e-2
    null_inner_steps: int = 10
    null_loss_floor: float = 1e-8
    magnitude_edges: bool = False

    def __post_init__(self):
        if self.gamma < 0:
            raise ConfigError("gamma must be nonnegative")
        if not 0.0 < self.painterly_fraction <= 1.0:
            raise ConfigError("painterly_fraction must be in (0, 1]")
        if self.null_lr <= 0 or self.null_inner_steps < 0:
            raise ConfigError("null_lr must be positive, inner steps >= 0")
        if self.null_loss_floor < 0:
            raise ConfigError("null_loss_floor must be nonnegative")

    def injection_steps(self, total_steps: int) -> set[int]:
        if self.self_attention_steps is None:
            return set(range(1, total_steps + 1))
        bad = [k for k in self.self_attention_steps
               if not 1 <= k <= total_steps]
        if bad:
            raise ConfigError(
                f"self-attention steps {bad} outside 1..{total_steps}")
        return set(self.self_attention_steps)


def painterly_steps(total_steps: int, fraction: float = 0.6) -> set[int]:
    """The earliest `fraction` of denoising steps (noisiest grid indices).

    Painterly inputs keep their stylized texture better when injection
    stops before the late, detail-forming steps.
    """
    if not 0.0 < fraction <= 1.0:
        raise ConfigError("fraction must be in (0, 1]")
    count = int(round(fraction * total_steps))
    return set(range(total_steps - count + 1, total_steps + 1))


# -- edge extraction -------------------------------------------------------


def _to_image_tensor(image) -> torch.Tensor:
    """Accept RasterImage, (H,W,3) array, or (3,H,W) tensor."""
    if isinstance(image, RasterImage):
        return torch.from_numpy(image.pixels.astype(np.float64)).permute(2, 0, 1)
    if isinstance(image, np.ndarray):
        if image.ndim != 3 or image.shape[2] != 3:
            raise InputError(f"expected (H,W,3) array, got {image.shape}")
        return torch.from_numpy(image.astype(np.float64)).permute(2, 0, 1)
    if isinstance(image, torch.Tensor):
        if image.ndim != 3 or image.shape[0] != 3:
            raise InputError(f"expected (3,H,W) tensor, got {tuple(image.shape)}")
        return image
    raise InputError(f"unsupported image type {type(image)!r}")


def _luma(image: torch.Tensor) -> torch.Tensor:
    weights = torch.tensor(LUMA_WEIGHTS, dtype=image.dtype)
    return (image * weights[:, None, None]).sum(dim=0)


def sobel_edges_tensor(image: torch.Tensor,
                       magnitude: bool = False) -> torch.Tensor:
    """Differentiable Sobel response of a (3,H,W) image tensor."""
    luma = _luma(image)[None, None]
    padded = torch.nn.functional.pad(luma, (1, 1, 1, 1), mode="reflect")
    kh = SOBEL_HORIZONTAL.to(image.dtype)[None, None]
    kv = SOBEL_VERTICAL.to(image.dtype)[None, None]
    h = torch.nn.functional.conv2d(padded, kh)[0, 0]
    v = torch.nn.functional.conv2d(padded, kv)[0, 0]
    if magnitude:
        return torch.sqrt(h * h + v * v + 1e-12)
    return h + v


def sobel_edges(image, magnitude: bool = False) -> np.ndarray:
    """Sobel edge map of an image (H,W float array, signed by default)."""
    return sobel_edges_tensor(_to_image_tensor(image),
                              magnitude=magnitude).numpy()


def load_detector(spec: str) -> Callable:
    """Resolve a deep edge detector from a 'module:attribute' path."""
    module_name, _, attr = spec.partition(":")
    if not module_name or not attr:
        raise ConfigError(f"detector path must be 'module:attribute', got {spec!r}")
    module = importlib.import_module(module_name)
    return getattr(module, attr)


def deep_edges_tensor(image: torch.Tensor,
                      detector: Callable | None = None) -> torch.Tensor:
    """Deep edge map in [0,1]; falls back to normalized Sobel magnitude."""
    if detector is not None:
        out = detector(image)
        if not isinstance(out, torch.Tensor):
            out = torch.as_tensor(np.asarray(out), dtype=image.dtype)
        if out.shape != image.shape[1:]:
            raise InputError(
                f"detector returned {tuple(out.shape)}, expected {tuple(image.shape[1:])}")
        peak = out.abs().max().clamp_min(NORMALIZATION_GUARD)
        return (out.abs() / peak).clamp(0.0, 1.0)
    response = sobel_edges_tensor(image, magnitude=True)
    peak = response.max().clamp_min(NORMALIZATION_GUARD)
    return response / peak


def deep_edges(image, detector: Callable | None = None,
               warn_on_fallback: bool = True) -> np.ndarray:
    """Deep edge map of an image; normalized Sobel when no detector."""
    tensor = _to_image_tensor(image)
    if detector is None and warn_on_fallback:
        warnings.warn("no deep edge detector configured; "
                      "falling back to normalized Sobel magnitude")
    return deep_edges_tensor(tensor, detector).detach().numpy()


def edge_loss(original, candidate, gamma: float = 0.1,
              detector: Callable | None = None,
              magnitude: bool = False) -> torch.Tensor:
    """Pixel-averaged squared edge difference between two images.

    The Sobel term always contributes; the deep term is weighted by
    gamma. Differentiable when the inputs are tensors carrying grad.
    """
    a = _to_image_tensor(original)
    b = _to_image_tensor(candidate)
    if a.shape != b.shape:
        raise InputError(
            f"image shapes differ: {tuple(a.shape)} vs {tuple(b.shape)}")
    b = b.to(a.dtype) if not b.requires_grad else b
    a = a.to(b.dtype)
    loss = ((sobel_edges_tensor(a, magnitude)
             - sobel_edges_tensor(b, magnitude)) ** 2).mean()
    if gamma > 0:
        loss = loss + gamma * ((deep_edges_tensor(a, detector)
                                - deep_edges_tensor(b, detector)) ** 2).mean()
    return loss


# -- attention control ------------------------------------------------------


class InjectionController(AttentionController):
    """Replays recorded attention during the edit pass.

    Self-attention maps are replaced wholesale at the configured
    timesteps; cross-attention columns at the frozen token positions are
    replaced at every timestep a record exists for.
    """

    def __init__(self, recorder: RecordingController,
                 self_steps: set[int],
                 freeze_positions: list[int] | None = None):
        self.recorder = recorder
        self.self_steps = set(self_steps)
        self.freeze_positions = list(freeze_positions or [])

    def _record_at(self, timestep: int, layer: str):
        try:
            return self.recorder.at(timestep, layer)
        except KeyError as exc:
            raise InputError(
                f"no recorded attention for timestep {timestep}") from exc

    def cross_attention(self, maps, timestep, layer, tokens):
        if not self.freeze_positions:
            return maps
        record = self._record_at(timestep, layer)
        if record.cross.shape != maps.shape:
            raise InputError(
                f"recorded cross-attention {tuple(record.cross.shape)} does "
                f"not match live maps {tuple(maps.shape)}")
        out = maps.clone()
        for p in self.freeze_positions:
            out[:, p] = record.cross[:, p]
        return out

    def self_attention(self, maps, timestep, layer):
        if timestep not in self.self_steps:
            return maps
        record = self._record_at(timestep, layer)
        if record.self_attn.shape != maps.shape:
            raise InputError(
                f"recorded self-attention {tuple(record.self_attn.shape)} "
                f"does not match live maps {tuple(maps.shape)}")
        return record.self_attn


def make_self_attention_controller(
        trajectory: DiffusionTrajectory, cfg: PreserveConfig,
        freeze_positions: list[int] | None = None) -> InjectionController:
    """Controller that injects a trajectory's recorded attention."""
    steps = cfg.injection_steps(trajectory.steps)
    return InjectionController(trajectory.recorder, steps, freeze_positions)


# -- null-text optimization --------------------------------------------------


@dataclasses.dataclass
class NullTextResult:
    """Outcome of an edit pass with per-step null-text optimization."""

    null_embeddings: list[torch.Tensor]  # index k-1 used at step k -> k-1
    final_latent: Latent
    losses: list[dict]
    flagged_steps: list[int]


def optimize_null_text(backend: DiffusionBackend,
                       trajectory: DiffusionTrajectory,
                       tokens_for_step: PromptTokens | Callable[[int], PromptTokens],
                       original_image: RasterImage,
                       cfg: PreserveConfig | None = None,
                       guidance_scale: float | None = None,
                       controller: AttentionController | None = None
                       ) -> NullTextResult:
    """Edit pass with edge-constrained null-text optimization.

    Walks the trajectory's noisiest latent down to t=0. At each step the
    unconditional embedding (warm-started from the previous step) takes
    cfg.null_inner_steps gradient updates minimizing edge_loss between
    the original image and the decoded x0 prediction, then the step is
    taken with the updated embedding. With zero inner steps the walk is
    exactly the plain edit pass.

    Steps whose loss turns non-finite keep the last finite embedding and
    are listed in flagged_steps.
    """
    cfg = cfg or PreserveConfig()
    scale = (trajectory.config.guidance_scale_edit if guidance_scale is None
             else guidance_scale)
    if callable(tokens_for_step):
        tokens_fn = tokens_for_step
    else:
        fixed = tokens_for_step
        tokens_fn = lambda k: fixed  # noqa: E731

    original = _to_image_tensor(original_image)
    null = trajectory.null_embedding.detach().clone()
    z = trajectory.latents[-1]
    nulls: list[torch.Tensor] = [torch.empty(0)] * trajectory.steps
    losses: list[dict] = []
    flagged: list[int] = []

    for k in range(trajectory.steps, 0, -1):
        tokens = tokens_fn(k)

        def decoded_loss(null_emb: torch.Tensor) -> torch.Tensor:
            eps = backend.predict_noise(z, tokens, null_emb, scale, controller)
            x0 = backend.schedule.predict_x0(z.data, k, eps)
            image = backend.decode_latent_tensor(x0)
            return edge_loss(original, image, gamma=cfg.gamma,
                             magnitude=cfg.magnitude_edges)

        if cfg.null_inner_steps > 0:
            with torch.no_grad():
                before = float(decoded_loss(null))
            # below the floor there is nothing to optimize: Adam would
            # amplify float-roundoff gradients into real embedding drift
            if before < cfg.null_loss_floor:
                losses.append({"timestep": k, "before": before,
                               "after": before})
            else:
                param = null.detach().clone().requires_grad_(True)
                optimizer = torch.optim.AdamW([param], lr=cfg.null_lr,
                                              weight_decay=0.0)
                diverged = False
                for _ in range(cfg.null_inner_steps):
                    optimizer.zero_grad()
                    loss = decoded_loss(param)
                    if not torch.isfinite(loss):
                        diverged = True
                        break
                    if float(loss.detach()) < cfg.null_loss_floor:
                        break
                    loss.backward()
                    optimizer.step()
                    if not torch.isfinite(param).all():
                        diverged = True
                        break
                if diverged:
                    flagged.append(k)
                else:
                    null = param.detach().clone()
                with torch.no_grad():
                    after = float(decoded_loss(null))
                losses.append({"timestep": k, "before": before,
                               "after": after})

        nulls[k - 1] = null.clone()
        eps = backend.predict_noise(z, tokens, null, scale, controller)
        prev = backend.schedule.ddim_step(z.data, k, eps)
        z = Latent(prev.detach(), t=k - 1)

    return NullTextResult(null_embeddings=nulls, final_latent=z,
                          losses=losses, flagged_steps=flagged)
