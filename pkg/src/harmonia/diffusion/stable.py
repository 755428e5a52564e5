"""Adapter over a pretrained latent diffusion checkpoint (the Stable
Diffusion 1.x family), loaded through the diffusers and transformers
libraries.

The adapter speaks the same backend contract as the toy model while
mapping it onto a real UNet:

- The autoencoder is the checkpoint VAE; encoding uses the posterior
  mode (not a sample) so trajectories are deterministic for a fixed
  config. ``decode_latent_tensor`` keeps gradients for null-text
  optimization.
- ``embed_text`` expands each word into its text-encoder subtokens, so
  every embedding row the engine optimizes or swaps is one real context
  row; the word's tag is repeated across its subtokens. The full
  77-row encoder context (start token, content rows, end-of-text and
  padding rows) is cached per token-id sequence so the UNet context can
  be reassembled after rows are refined or replaced.
- Attention is captured on the transformer blocks that run at the
  canonical 16x16 map resolution. Controllers see head-averaged maps;
  cross maps are sliced to the content-token columns and row-normalized.
  A replaced cross map reweights only the content columns inside every
  head (each row's total content mass is preserved), and a replaced
  self map is broadcast to all heads. Value projections are never
  touched.
- ``cross_attention_for`` runs the UNet with the candidate embedding
  rows scattered into an empty-prompt frame and returns the
  layer-averaged 16x16 map, differentiable in the rows.
- Classifier-free guidance runs the conditional and unconditional
  branches as separate forwards; controllers fire on the conditional
  branch, gradients flow only through the unconditional branch (the one
  null-text optimization trains).

The heavy dependencies are imported lazily: constructing the backend
without diffusers/transformers installed, or without reachable weights,
raises BackendUnavailable and leaves the rest of the package fully
usable.
"""

from __future__ import annotations

import math
from typing import Callable, Optional

import numpy as np
import torch

from ..errors import BackendUnavailable, InputError
from ..imagecore import RasterImage, resize_image
from .attention import AttentionController
from .backend import DiffusionBackend, Latent
from .schedule import TRAIN_STEPS, DdimSchedule
from .tokens import PromptTokens

DEFAULT_WEIGHTS = "runwayml/stable-diffusion-v1-5"
CAPTURE_SIDE = 16


class _HookState:
    """Mutable per-forward wiring shared by the attention processors."""

    def __init__(self):
        self.active = False
        self.controller: Optional[AttentionController] = None
        self.grid_index = 0
        self.tokens: Optional[PromptTokens] = None
        self.content_positions: list[int] = []
        self.capture_pixels = CAPTURE_SIDE * CAPTURE_SIDE
        # When set, every hooked cross map (with gradients intact) is
        # handed to this sink instead of the controller path.
        self.grad_sink: Optional[Callable[[torch.Tensor], None]] = None


class _InstrumentedAttention:
    """Attention processor that exposes maps to the engine's controllers.

    Computes standard attention with the module's own projections, then,
    when the layer runs at the capture resolution and hooks are active,
    presents the head-averaged probabilities for observation or
    replacement before applying them to the values.
    """

    def __init__(self, layer_name: str, is_cross: bool, state: _HookState):
        self.layer_name = layer_name
        self.is_cross = is_cross
        self.state = state

    def __call__(self, attn, hidden_states, encoder_hidden_states=None,
                 attention_mask=None, **kwargs):
        if hidden_states.dim() != 3:
            raise BackendUnavailable(
                "instrumented attention expects transformer-block inputs "
                f"(batch, pixels, channels), got {hidden_states.dim()}-d")
        query = attn.to_q(hidden_states)
        context = (hidden_states if encoder_hidden_states is None
                   else encoder_hidden_states)
        if encoder_hidden_states is not None and attn.norm_cross:
            context = attn.norm_encoder_hidden_states(context)
        key = attn.to_k(context)
        value = attn.to_v(context)
        query = attn.head_to_batch_dim(query)
        key = attn.head_to_batch_dim(key)
        value = attn.head_to_batch_dim(value)
        probs = attn.get_attention_scores(query, key, attention_mask)

        state = self.state
        if (state.active and probs.shape[1] == state.capture_pixels
                and probs.shape[0] >= attn.heads):
            probs = self._present(attn.heads, probs)

        out = torch.bmm(probs, value)
        out = attn.batch_to_head_dim(out)
        out = attn.to_out[0](out)
        return attn.to_out[1](out)

    def _present(self, heads: int, probs: torch.Tensor) -> torch.Tensor:
        """Show the head-averaged map to the sink or controller and fold
        any replacement back into the per-head probabilities."""
        state = self.state
        batch = probs.shape[0] // heads
        stacked = probs.reshape(batch, heads, *probs.shape[1:])
        mean = stacked.mean(dim=1)[0]  # (pixels, keys)

        if self.is_cross:
            columns = state.content_positions
            content = mean[:, columns]
            row_mass = content.sum(dim=1, keepdim=True).clamp_min(1e-12)
            presented = content / row_mass
            if state.grad_sink is not None:
                state.grad_sink(presented)
                return probs
            if state.controller is None:
                return probs
            replaced = state.controller.cross_attention(
                presented, state.grid_index, self.layer_name, state.tokens)
            if replaced is presented:
                return probs
            if replaced.shape != presented.shape:
                raise InputError(
                    f"replacement cross-attention {tuple(replaced.shape)} "
                    f"does not match {tuple(presented.shape)}")
            # Reweight the content columns inside each head, preserving
            # every row's total content mass (start/end/pad columns and
            # the value projections stay untouched).
            new = probs.clone()
            head_mass = probs[:, :, columns].sum(dim=2, keepdim=True)
            new[:, :, columns] = head_mass * replaced.to(probs.dtype)[None]
            return new

        if state.grad_sink is not None or state.controller is None:
            return probs
        replaced = state.controller.self_attention(
            mean, state.grid_index, self.layer_name)
        if replaced is mean:
            return probs
        if replaced.shape != mean.shape:
            raise InputError(
                f"replacement self-attention {tuple(replaced.shape)} "
                f"does not match {tuple(mean.shape)}")
        return (replaced.to(probs.dtype)[None]
                .expand(probs.shape[0], -1, -1).contiguous())


class StableBackend(DiffusionBackend):
    """A Stable Diffusion 1.x checkpoint behind the backend contract."""

    name = "stable"
    native_size = 512
    latent_channels = 4
    latent_size = 64
    embed_dim = 768
    capture_size = CAPTURE_SIDE

    def __init__(self, weights: str = DEFAULT_WEIGHTS,
                 device: str | None = None,
                 schedule: DdimSchedule | None = None,
                 local_files_only: bool = False):
        super().__init__(schedule)
        try:
            from diffusers import AutoencoderKL, UNet2DConditionModel
            from diffusers.models.attention_processor import AttnProcessor
            from transformers import CLIPTextModel, CLIPTokenizer
        except ImportError as exc:
            raise BackendUnavailable(
                "the 'stable' backend needs the diffusers and transformers "
                "packages (pip install diffusers transformers)") from exc

        self.device = torch.device(
            device or ("cuda" if torch.cuda.is_available() else "cpu"))
        load = {"local_files_only": local_files_only}
        try:
            self.tokenizer = CLIPTokenizer.from_pretrained(
                weights, subfolder="tokenizer", **load)
            self.text_encoder = CLIPTextModel.from_pretrained(
                weights, subfolder="text_encoder", **load)
            self.vae = AutoencoderKL.from_pretrained(
                weights, subfolder="vae", **load)
            self.unet = UNet2DConditionModel.from_pretrained(
                weights, subfolder="unet", **load)
        except Exception as exc:
            raise BackendUnavailable(
                f"cannot load diffusion weights {weights!r}: {exc}") from exc

        for model in (self.text_encoder, self.vae, self.unet):
            model.to(self.device)
            model.eval()
            model.requires_grad_(False)

        self.latent_size = self.unet.config.sample_size
        self.latent_channels = self.unet.config.in_channels
        self.embed_dim = self.text_encoder.config.hidden_size
        self._scaling = self.vae.config.scaling_factor
        self._max_tokens = self.tokenizer.model_max_length
        self._frames: dict[tuple[int, ...], torch.Tensor] = {}
        self._hooks = _HookState()
        self._install_processors(AttnProcessor)

    # -- attention wiring ------------------------------------------------

    def _install_processors(self, default_cls) -> None:
        """Instrument the attention modules that run at the capture
        resolution; everything else keeps the stock processor."""
        depth = int(math.log2(self.latent_size // CAPTURE_SIDE))
        capture_prefixes = (f"down_blocks.{depth}.",
                            f"up_blocks.{len(self.unet.up_blocks) - 1 - depth}.")
        processors = {}
        layers = []
        for key in self.unet.attn_processors:
            if key.startswith(capture_prefixes):
                block = key.rsplit(".attn", 1)[0]
                is_cross = key.endswith("attn2.processor")
                processors[key] = _InstrumentedAttention(
                    block, is_cross, self._hooks)
                if block not in layers:
                    layers.append(block)
            else:
                processors[key] = default_cls()
        self.unet.set_attn_processor(processors)
        self.attention_layers = tuple(layers)

    # -- autoencoder -----------------------------------------------------

    def encode_image(self, image: RasterImage) -> Latent:
        if image.size != (self.native_size, self.native_size):
            image = resize_image(image, self.native_size, self.native_size)
        array = image.pixels.astype(np.float32).transpose(2, 0, 1)
        tensor = torch.from_numpy(array)[None].to(self.device) * 2.0 - 1.0
        with torch.no_grad():
            posterior = self.vae.encode(tensor).latent_dist
            data = posterior.mode()[0] * self._scaling
        return Latent(self.check_finite(data, "encoded latent"), t=0)

    def decode_latent_tensor(self, data: torch.Tensor) -> torch.Tensor:
        sample = data.to(self.device, torch.float32)[None] / self._scaling
        image = self.vae.decode(sample).sample[0]
        return ((image + 1.0) / 2.0).clamp(0.0, 1.0)

    def decode_latent(self, latent: Latent | torch.Tensor) -> RasterImage:
        data = latent.data if isinstance(latent, Latent) else latent
        with torch.no_grad():
            image = self.decode_latent_tensor(data)
        self.check_finite(image, "decoded image")
        return RasterImage(
            image.cpu().numpy().transpose(1, 2, 0).astype(np.float32))

    # -- text --------------------------------------------------------------

    def _encode_ids(self, content_ids: list[int]) -> torch.Tensor:
        """Full encoder context for start + content + end + padding."""
        bos = self.tokenizer.bos_token_id
        eos = self.tokenizer.eos_token_id
        pad = self.tokenizer.pad_token_id
        if pad is None:
            pad = eos
        room = self._max_tokens - 2
        if len(content_ids) > room:
            raise InputError(
                f"prompt needs {len(content_ids)} tokens; the text encoder "
                f"fits {room}")
        ids = ([bos] + list(content_ids) + [eos]
               + [pad] * (room - len(content_ids)))
        batch = torch.tensor([ids], device=self.device)
        with torch.no_grad():
            states = self.text_encoder(batch)[0][0]
        return self.check_finite(states, "text embedding")

    def embed_text(self, words: list[str], tags: list[str]) -> PromptTokens:
        if not words:
            raise InputError("cannot embed an empty word list")
        sub_words: list[str] = []
        sub_tags: list[str] = []
        sub_ids: list[int] = []
        for word, tag in zip(words, tags):
            ids = self.tokenizer(word, add_special_tokens=False).input_ids
            if not ids:
                raise InputError(f"word {word!r} produced no tokens")
            pieces = self.tokenizer.convert_ids_to_tokens(ids)
            sub_words.extend(p.replace("</w>", "") or word for p in pieces)
            sub_tags.extend([tag] * len(ids))
            sub_ids.extend(ids)
        states = self._encode_ids(sub_ids)
        self._frames[tuple(sub_ids)] = states.detach().clone()
        rows = states[1:1 + len(sub_ids)].detach().clone()
        return PromptTokens(sub_words, sub_tags, sub_ids, rows)

    def null_embedding(self) -> torch.Tensor:
        return self._encode_ids([]).detach().clone()

    def _context_for(self, tokens: PromptTokens) -> torch.Tensor:
        key = tuple(tokens.token_ids)
        frame = self._frames.get(key)
        if frame is None:
            frame = self._encode_ids(list(key))
            self._frames[key] = frame.detach().clone()
        context = frame.detach().clone().to(tokens.embeddings.dtype)
        context[1:1 + len(key)] = tokens.embeddings
        return context

    @staticmethod
    def _content_positions(tokens: PromptTokens) -> list[int]:
        return list(range(1, 1 + len(tokens.token_ids)))

    # -- UNet forwards -----------------------------------------------------

    def _train_timestep(self, grid_index: int) -> torch.Tensor:
        stride = TRAIN_STEPS // self.schedule.steps
        value = grid_index * stride - 1 if grid_index > 0 else 0
        return torch.tensor([value], device=self.device)

    def _unet_eps(self, latent: Latent, context: torch.Tensor
                  ) -> torch.Tensor:
        sample = latent.data.to(self.device, torch.float32)[None]
        timestep = self._train_timestep(latent.t)
        out = self.unet(sample, timestep,
                        encoder_hidden_states=context[None].to(
                            self.device, torch.float32))
        return out.sample[0]

    def predict_noise(self, latent: Latent, tokens: PromptTokens,
                      null_embedding: torch.Tensor, guidance_scale: float,
                      controller: AttentionController | None = None
                      ) -> torch.Tensor:
        self.check_finite(latent.data, "latent")
        hooks = self._hooks
        hooks.active = True
        hooks.controller = controller
        hooks.grid_index = latent.t
        hooks.tokens = tokens
        hooks.content_positions = self._content_positions(tokens)
        hooks.capture_pixels = self.capture_size * self.capture_size
        try:
            with torch.no_grad():
                eps_cond = self._unet_eps(latent,
                                          self._context_for(tokens))
        finally:
            hooks.active = False
            hooks.controller = None
            hooks.tokens = None
        eps_null = self._unet_eps(latent, null_embedding)
        eps = eps_null + guidance_scale * (eps_cond - eps_null)
        return self.check_finite(eps, "noise prediction")

    def cross_attention_for(self, latent: Latent, embeddings: torch.Tensor
                            ) -> torch.Tensor:
        """Layer-averaged 16x16 cross-attention map for candidate rows.

        The rows are scattered into an empty-prompt frame (the true frame
        rows of the original prompt are not differentiable anyway), so
        the map moves smoothly as refinement updates the rows.
        """
        null_frame = self._encode_ids([])
        n = embeddings.shape[0]
        context = null_frame.detach().clone().to(embeddings.dtype)
        context[1:1 + n] = embeddings
        captured: list[torch.Tensor] = []
        hooks = self._hooks
        hooks.active = True
        hooks.content_positions = list(range(1, 1 + n))
        hooks.capture_pixels = self.capture_size * self.capture_size
        hooks.grad_sink = captured.append
        try:
            self._unet_eps(latent, context)
        finally:
            hooks.active = False
            hooks.grad_sink = None
        if not captured:
            raise BackendUnavailable(
                "no attention layers run at the capture resolution")
        return torch.stack(captured).mean(dim=0)
