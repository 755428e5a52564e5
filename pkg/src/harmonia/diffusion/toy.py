"""Deterministic synthetic backend.

Exists so every objective and control path in the engine has an exact,
CPU-cheap oracle. Design:

- The autoencoder is the identity at the 16x16 native size: latent
  channels are (R, G, B, luma) of the image itself, so decode(encode(x))
  is bit-exact and pipeline-level statements stay sharp.
- Words embed into a small vector whose first three coordinates carry
  color semantics (brightness, warmth, greenness) from a fixed lexicon;
  remaining coordinates are word-specific detail derived from a stable
  hash. The empty prompt embeds to the zero vector, which doubles as the
  null embedding.
- The conditional noise branch pulls the latent's mean color toward the
  target color implied by the condition tokens:

      eps_cond = eps_null - misfit * (pull + pattern_gain * B)

  with misfit = target - current mean (per channel) and B a fixed
  zero-mean spatial pattern. The sign is negative because predicted noise
  is subtracted during sampling: a negative mean in eps raises the
  clean-scale mean of the trajectory. Editing toward a condition the image already
  satisfies is therefore an exact no-op, and the mean's trajectory during
  an edit has a closed form (exponential approach to the target along the
  schedule's noise-to-signal coordinate). With guidance 0 the prediction
  is constant in the latent, so invert-then-resample is exact to float
  precision.
- Cross-attention compares per-pixel color features against a fixed
  linear readout of each token embedding, softmaxed over tokens; it is
  differentiable in the embeddings and constant along the inversion
  trajectory (features are divided by sqrt(alpha_bar)). The readout
  ignores the semantic coordinates and the detail coordinates are kept
  small, so token logits sit in the softmax's active band: maps respond
  smoothly to embedding changes instead of saturating, and embedding
  refinement never disturbs the color semantics that drive editing.
"""

from __future__ import annotations

import hashlib

import numpy as np
import torch

from ..errors import InputError
from ..imagecore import LUMA_WEIGHTS, RasterImage, resize_image
from .attention import AttentionController
from .backend import DiffusionBackend, Latent
from .schedule import DdimSchedule
from .tokens import CONDITION_TAGS, PromptTokens

# (brightness, warmth, greenness) per lexicon word; unknown words carry
# zero semantics and only detail dimensions.
LEXICON: dict[str, tuple[float, float, float]] = {
    "bright": (0.35, 0.0, 0.0),
    "overbright": (0.45, 0.0, 0.0),
    "sunny": (0.30, 0.10, 0.0),
    "sunlit": (0.30, 0.10, 0.0),
    "daylight": (0.30, 0.0, 0.0),
    "noon": (0.35, 0.0, 0.0),
    "harsh": (0.25, 0.0, 0.0),
    "pale": (0.15, -0.05, 0.0),
    "light": (0.20, 0.0, 0.0),
    "dark": (-0.35, 0.0, 0.0),
    "dim": (-0.30, 0.0, 0.0),
    "dusky": (-0.25, 0.10, 0.0),
    "dusk": (-0.25, 0.10, 0.0),
    "night": (-0.45, -0.10, 0.0),
    "midnight": (-0.50, -0.15, 0.0),
    "shadow": (-0.30, 0.0, 0.0),
    "overcast": (-0.15, -0.05, 0.0),
    "evening": (-0.20, 0.10, 0.0),
    "warm": (0.0, 0.30, 0.0),
    "orange": (0.05, 0.35, 0.0),
    "golden": (0.10, 0.30, 0.0),
    "amber": (0.05, 0.25, 0.0),
    "sunset": (-0.05, 0.30, 0.0),
    "red": (0.0, 0.30, -0.10),
    "cool": (0.0, -0.25, 0.0),
    "cold": (0.0, -0.30, 0.0),
    "blue": (-0.05, -0.35, 0.0),
    "icy": (0.10, -0.35, 0.0),
    "winter": (0.0, -0.25, 0.0),
    "snowy": (0.25, -0.20, 0.0),
    "misty": (0.05, -0.05, 0.0),
    "foggy": (0.0, -0.05, 0.0),
    "green": (0.0, 0.0, 0.30),
    "forest": (-0.10, 0.0, 0.20),
    "spring": (0.10, 0.05, 0.15),
    "autumn": (0.0, 0.25, -0.05),
    "neutral": (0.0, 0.0, 0.0),
}

SEMANTIC_DIMS = 3
COLOR_ANCHOR = np.array([0.5, 0.5, 0.5], dtype=np.float64)


def _word_token_id(word: str) -> int:
    digest = hashlib.md5(word.encode("utf-8")).hexdigest()
    return int(digest[:12], 16)


class ToyBackend(DiffusionBackend):
    name = "toy"
    native_size = 16
    latent_channels = 4
    latent_size = 16
    embed_dim = 16
    attention_layers = ("attn16",)

    def __init__(self, schedule: DdimSchedule | None = None,
                 condition_pull: float = 0.12,
                 pattern_gain: float = 0.08,
                 attn_sharpness: float = 320.0,
                 self_sharpness: float = 4.0,
                 detail_scale: float = 0.00125):
        super().__init__(schedule)
        self.condition_pull = condition_pull
        self.pattern_gain = pattern_gain
        self.attn_sharpness = attn_sharpness
        self.self_sharpness = self_sharpness
        self.detail_scale = detail_scale

        # fixed internal weights, independent of any run seed
        gen = torch.Generator().manual_seed(90210)
        self._readout = torch.randn(
            (self.latent_channels, self.embed_dim), generator=gen,
            dtype=torch.float64) / float(self.latent_channels)
        # attention reads only the detail dimensions: embedding refinement
        # then steers spatial focus without ever touching color semantics,
        # whose coordinates see zero attention gradient and are held at
        # their initialization by the refinement regularizer
        self._readout[:, :SEMANTIC_DIMS] = 0.0
        self._pattern = self._make_pattern()

    def _make_pattern(self) -> torch.Tensor:
        """Per-channel fixed spatial pattern, exactly zero-mean, unit RMS."""
        size = self.latent_size
        ys, xs = np.meshgrid(np.arange(size), np.arange(size), indexing="ij")
        fields = []
        for c in range(self.latent_channels):
            field = (np.sin(2 * np.pi * (xs + 3 * c) / size)
                     * np.cos(2 * np.pi * ys * (c + 1) / size))
            field = field - field.mean()
            rms = np.sqrt((field ** 2).mean())
            fields.append(field / rms)
        return torch.tensor(np.stack(fields), dtype=torch.float64)

    # -- autoencoder ---------------------------------------------------

    def encode_image(self, image: RasterImage) -> Latent:
        if image.size != (self.native_size, self.native_size):
            image = resize_image(image, self.native_size, self.native_size)
        rgb = image.pixels.astype(np.float64)
        luma = rgb @ LUMA_WEIGHTS.astype(np.float64)
        data = np.concatenate([rgb.transpose(2, 0, 1), luma[None]], axis=0)
        tensor = self.check_finite(torch.from_numpy(data), "encoded latent")
        return Latent(tensor, t=0)

    def decode_latent(self, latent: Latent | torch.Tensor) -> RasterImage:
        data = latent.data if isinstance(latent, Latent) else latent
        rgb = data[:3].clamp(0.0, 1.0)
        self.check_finite(rgb, "decoded image")
        return RasterImage(rgb.detach().cpu().numpy().transpose(1, 2, 0)
                           .astype(np.float32))

    def decode_latent_tensor(self, data: torch.Tensor) -> torch.Tensor:
        """Differentiable decode: (3, H, W) image tensor in [0,1]."""
        return data[:3].clamp(0.0, 1.0)

    # -- text ----------------------------------------------------------

    def _embed_word(self, word: str) -> torch.Tensor:
        emb = torch.zeros(self.embed_dim, dtype=torch.float64)
        sem = LEXICON.get(word)
        if sem is not None:
            emb[:SEMANTIC_DIMS] = torch.tensor(sem, dtype=torch.float64)
        gen = torch.Generator().manual_seed(_word_token_id(word) % (2 ** 31))
        detail = torch.randn(self.embed_dim - SEMANTIC_DIMS, generator=gen,
                             dtype=torch.float64)
        emb[SEMANTIC_DIMS:] = self.detail_scale * detail
        return emb

    def embed_text(self, words: list[str], tags: list[str]) -> PromptTokens:
        if not words:
            raise InputError("cannot embed an empty word list")
        rows = torch.stack([self._embed_word(w) for w in words])
        ids = [_word_token_id(w) for w in words]
        return PromptTokens(list(words), list(tags), ids, rows)

    def null_embedding(self) -> torch.Tensor:
        return torch.zeros(self.embed_dim, dtype=torch.float64)

    # -- color semantics ------------------------------------------------

    def condition_target(self, tokens: PromptTokens,
                         embeddings: torch.Tensor | None = None
                         ) -> torch.Tensor | None:
        """Target (R, G, B, luma) implied by the condition tokens.

        Differentiable in the embeddings when they are passed explicitly.
        Returns None when the prompt has no condition tokens.
        """
        positions = tokens.condition_positions()
        if not positions:
            return None
        emb = tokens.embeddings if embeddings is None else embeddings
        sem = emb[positions, :SEMANTIC_DIMS].mean(dim=0)
        b, w, g = sem[0], sem[1], sem[2]
        anchor = torch.tensor(COLOR_ANCHOR, dtype=emb.dtype)
        rgb = torch.stack([anchor[0] + b + w, anchor[1] + b + g,
                           anchor[2] + b - w]).clamp(0.0, 1.0)
        luma = (rgb * torch.tensor(LUMA_WEIGHTS, dtype=rgb.dtype)).sum()
        return torch.cat([rgb, luma.reshape(1)])

    def latent_mean(self, latent: Latent) -> torch.Tensor:
        """Current per-channel mean, normalized to clean-latent scale."""
        scale = self.schedule.sqrt_alpha_bar(latent.t)
        return latent.data.mean(dim=(1, 2)) / scale

    # -- attention -------------------------------------------------------

    def _pixel_features(self, latent: Latent) -> torch.Tensor:
        scale = self.schedule.sqrt_alpha_bar(latent.t)
        return (latent.data / scale).reshape(self.latent_channels, -1)

    def cross_attention_for(self, latent: Latent, embeddings: torch.Tensor
                            ) -> torch.Tensor:
        feats = self._pixel_features(latent).to(embeddings.dtype)
        keys = self._readout.to(embeddings.dtype) @ embeddings.T  # (C, n)
        logits = self.attn_sharpness * (feats.T @ keys)  # (P, n)
        return torch.softmax(logits, dim=1)

    def self_attention_map(self, latent: Latent) -> torch.Tensor:
        feats = self._pixel_features(latent)
        logits = self.self_sharpness * (feats.T @ feats)
        return torch.softmax(logits, dim=1)

    # -- noise prediction -------------------------------------------------

    def predict_noise(self, latent: Latent, tokens: PromptTokens,
                      null_embedding: torch.Tensor, guidance_scale: float,
                      controller: AttentionController | None = None
                      ) -> torch.Tensor:
        self.check_finite(latent.data, "latent")
        cross = self.cross_attention_for(latent, tokens.embeddings)
        self_map = self.self_attention_map(latent)
        if controller is not None:
            cross = controller.cross_attention(cross, latent.t, "attn16", tokens)
            self_map = controller.self_attention(self_map, latent.t, "attn16")
            if cross.shape != (latent.data[0].numel(), len(tokens.words)):
                raise InputError("replacement cross-attention shape mismatch")
            if self_map.shape[0] != self_map.shape[1]:
                raise InputError("replacement self-attention shape mismatch")

        eps = self._null_field(null_embedding)
        delta = self._condition_delta(latent, tokens)
        if delta is not None and guidance_scale != 0.0:
            eps = eps + guidance_scale * delta
        return self.check_finite(eps, "noise prediction")

    def _null_field(self, null_embedding: torch.Tensor) -> torch.Tensor:
        c = self.latent_channels
        consts = null_embedding[:c].reshape(c, 1, 1)
        pattern_coeff = null_embedding[c:2 * c].reshape(c, 1, 1)
        return consts + pattern_coeff * self._pattern.to(null_embedding.dtype)

    def _condition_delta(self, latent: Latent, tokens: PromptTokens
                         ) -> torch.Tensor | None:
        target = self.condition_target(tokens)
        if target is None:
            return None
        misfit = (target - self.latent_mean(latent)).reshape(-1, 1, 1)
        pattern = self._pattern.to(misfit.dtype)
        return -misfit * (self.condition_pull + self.pattern_gain * pattern)

    def conditional_mean_oracle(self, start_mean: torch.Tensor,
                                target: torch.Tensor,
                                guidance_scale: float) -> torch.Tensor:
        """Closed-form final mean of an edit pass that starts from an
        inversion of a latent with per-channel mean `start_mean`.

        The per-channel mean m obeys m_{k-1} = m_k + s * pull *
        (target - m_k) * (sigma_k - sigma_{k-1}) along the sampling walk.
        """
        m = start_mean.clone()
        for k in range(self.schedule.steps, 0, -1):
            dsigma = self.schedule.sigma(k) - self.schedule.sigma(k - 1)
            m = m + guidance_scale * self.condition_pull * (target - m) * dsigma
        return m
