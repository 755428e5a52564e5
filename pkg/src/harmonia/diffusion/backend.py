"""Backend interface, trajectories, and the invert/resample loops."""

from __future__ import annotations

import abc
import dataclasses

import torch

from ..errors import BackendNumericsError, BackendUnavailable, ConfigError
from ..imagecore import RasterImage
from .attention import AttentionController, ChainController, RecordingController
from .schedule import DdimSchedule, SamplerConfig
from .tokens import PromptTokens


@dataclasses.dataclass
class Latent:
    """A latent tensor (C, h, w) at grid index t (0 = clean)."""

    data: torch.Tensor
    t: int

    def __post_init__(self):
        if self.data.ndim != 3:
            raise ConfigError(f"latent must be (C,h,w), got {tuple(self.data.shape)}")
        if not torch.isfinite(self.data).all():
            raise BackendNumericsError("latent contains non-finite values")


class DiffusionBackend(abc.ABC):
    """A pretrained (or synthetic) latent diffusion model.

    One backend instance serves one run at a time: attention hooks are
    per-run state. The service layer builds a session per job.
    """

    name: str = "abstract"
    native_size: int = 512
    latent_channels: int = 4
    latent_size: int = 64
    embed_dim: int = 768
    attention_layers: tuple[str, ...] = ()
    # Spatial side of the canonical attention-capture grid. None means
    # attention is captured at the latent resolution itself.
    capture_size: int | None = None

    def __init__(self, schedule: DdimSchedule | None = None):
        self.schedule = schedule or DdimSchedule()

    @abc.abstractmethod
    def encode_image(self, image: RasterImage) -> Latent:
        """Encode a working-resolution image to a clean latent (t=0)."""

    def decode_latent_tensor(self, data: torch.Tensor) -> torch.Tensor:
        """Differentiable decode to a (3, H, W) image tensor in [0,1].

        Needed by null-text optimization, which backpropagates an image
        loss through the decoder.
        """
        raise BackendUnavailable(
            f"backend {self.name!r} has no differentiable decoder")

    @abc.abstractmethod
    def decode_latent(self, latent: Latent | torch.Tensor) -> RasterImage:
        """Decode a latent tensor to an image at the native size."""

    @abc.abstractmethod
    def embed_text(self, words: list[str], tags: list[str]) -> PromptTokens:
        """Embed a word sequence; one embedding row per word token."""

    @abc.abstractmethod
    def null_embedding(self) -> torch.Tensor:
        """Unconditional embedding (empty-string encoding)."""

    @abc.abstractmethod
    def predict_noise(self, latent: Latent, tokens: PromptTokens,
                      null_embedding: torch.Tensor, guidance_scale: float,
                      controller: AttentionController | None = None
                      ) -> torch.Tensor:
        """Classifier-free-guided noise estimate at the latent's timestep."""

    @abc.abstractmethod
    def cross_attention_for(self, latent: Latent, embeddings: torch.Tensor
                            ) -> torch.Tensor:
        """Differentiable cross-attention (pixels, tokens) for the given
        embedding matrix, at the canonical capture resolution."""

    def check_finite(self, tensor: torch.Tensor, what: str) -> torch.Tensor:
        if not torch.isfinite(tensor).all():
            raise BackendNumericsError(f"{what} contains non-finite values")
        return tensor


@dataclasses.dataclass
class DiffusionTrajectory:
    """Latents z_0..z_T of an inversion plus captured attention records."""

    latents: list[Latent]
    recorder: RecordingController
    tokens: PromptTokens
    config: SamplerConfig
    null_embedding: torch.Tensor

    @property
    def steps(self) -> int:
        return len(self.latents) - 1

    def latent_at(self, k: int) -> Latent:
        return self.latents[k]


def invert(backend: DiffusionBackend, image: RasterImage,
           tokens: PromptTokens, config: SamplerConfig,
           controller: AttentionController | None = None
           ) -> DiffusionTrajectory:
    """DDIM-invert an image, capturing attention at every step.

    Guidance during inversion defaults to 0 via the config. The returned
    trajectory owns a recording controller; a caller-supplied controller
    is chained after it.
    """
    if config.steps != backend.schedule.steps:
        backend.schedule = DdimSchedule(config.steps)
    recorder = RecordingController()
    chain: AttentionController = recorder
    if controller is not None:
        chain = ChainController(recorder, controller)

    null_emb = backend.null_embedding()
    z = backend.encode_image(image)
    latents = [z]
    for k in range(config.steps):
        current = latents[k]
        eps = backend.predict_noise(current, tokens, null_emb,
                                    config.guidance_scale_invert, chain)
        nxt = backend.schedule.ddim_inverse_step(current.data, k, eps)
        latents.append(Latent(nxt, t=k + 1))
    # capture attention for the noisiest state too: the edit pass visits
    # grid indices T..1, and index T is never stepped from during inversion
    backend.predict_noise(latents[-1], tokens, null_emb,
                          config.guidance_scale_invert, chain)
    return DiffusionTrajectory(latents=latents, recorder=recorder,
                               tokens=tokens, config=config,
                               null_embedding=null_emb)


def resample(backend: DiffusionBackend, trajectory: DiffusionTrajectory,
             tokens: PromptTokens | None = None,
             guidance_scale: float | None = None,
             null_embeddings: list[torch.Tensor] | None = None,
             controller: AttentionController | None = None) -> Latent:
    """Walk a trajectory's noisiest latent back to t=0.

    With the inversion's own tokens and guidance this reconstructs the
    input; with swapped tokens/guidance it performs the edit. Per-step
    null embeddings (index k-1 used at step k->k-1) override the
    trajectory's single null embedding when given.
    """
    config = trajectory.config
    tokens = tokens or trajectory.tokens
    scale = (config.guidance_scale_invert if guidance_scale is None
             else guidance_scale)
    z = trajectory.latents[-1]
    for k in range(config.steps, 0, -1):
        null_emb = (trajectory.null_embedding if null_embeddings is None
                    else null_embeddings[k - 1])
        eps = backend.predict_noise(z, tokens, null_emb, scale, controller)
        prev = backend.schedule.ddim_step(z.data, k, eps)
        z = Latent(prev, t=k - 1)
    return z


def get_backend(name: str, **kwargs) -> DiffusionBackend:
    """Construct a backend by name ('toy' or 'stable')."""
    if name == "toy":
        from .toy import ToyBackend

        return ToyBackend(**kwargs)
    if name in ("stable", "sd15", "stable-diffusion"):
        from .stable import StableBackend

        return StableBackend(**kwargs)
    raise BackendUnavailable(f"unknown backend {name!r}")
