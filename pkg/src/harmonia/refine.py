"""Text embedding refinement and background-embedding fusion.

The engine refines condition-token embeddings so their cross-attention
concentrates on the region they describe, under a pull-back toward the
initial embedding:

    L = || M - Att(Emb) / max(Att(Emb)) ||^2  (pixel-averaged)
        + w * || Emb - Emb_init ||^2

Att(Emb) sums the attention maps of the description's tokens. Two styles
are supported: per-timestep optimization walking the trajectory from its
noisiest state down (embeddings warm-start from the previous timestep),
and a single shared embedding trained with the timesteps as a dataset.
Background refinement can additionally learn fusion weights alpha over
the background condition tokens; the fused embedding is what the edit
pass substitutes at the foreground's condition positions.
"""

from __future__ import annotations

import dataclasses
from typing import Optional

import numpy as np
import torch

from .diffusion.backend import DiffusionBackend, DiffusionTrajectory
from .diffusion.tokens import PromptTokens
from .errors import (
    ConfigError,
    DegenerateAttentionError,
    NoConditionTokens,
    RefinementDiverged,
)

MAX_GUARD = 1e-8


@dataclasses.dataclass
class RefineConfig:
    """Optimization settings; defaults follow the optimizing style."""

    w: float = 5000.0
    lr: float = 1e-3
    inner_steps: int = 2
    epochs: int = 50
    batch_size: int = 4
    seed: int = 0

    def __post_init__(self):
        if self.w <= 0 or self.lr <= 0:
            raise ConfigError("w and lr must be positive")
        if self.inner_steps < 0 or self.epochs < 0 or self.batch_size < 1:
            raise ConfigError("step counts must be nonnegative, batch >= 1")

    @classmethod
    def training_defaults(cls) -> "RefineConfig":
        return cls(w=1000.0, lr=1e-2)


@dataclasses.dataclass
class RefinedPromptState:
    """Outcome of one refinement: per-timestep (or single) embeddings."""

    style: str
    tokens: PromptTokens
    refined_positions: list[int]
    embeddings_per_timestep: Optional[dict[int, torch.Tensor]] = None
    embeddings: Optional[torch.Tensor] = None
    fusion_weights: Optional[list[float]] = None
    loss_log: list[dict] = dataclasses.field(default_factory=list)

    def __post_init__(self):
        if self.fusion_weights is not None:
            total = float(sum(self.fusion_weights))
            if abs(total - 1.0) > 1e-6 or any(a < 0 for a in self.fusion_weights):
                raise ConfigError(
                    f"fusion weights must be a convex combination, got {self.fusion_weights}")

    def embedding_at(self, k: int) -> torch.Tensor:
        """Full embedding matrix to use at grid index k."""
        if self.embeddings_per_timestep is not None:
            return self.embeddings_per_timestep[k]
        assert self.embeddings is not None
        return self.embeddings


def downsample_mask(mask_values: np.ndarray, size: int) -> torch.Tensor:
    """Area-average a binary mask to size x size, threshold at 0.5."""
    tensor = torch.from_numpy(mask_values.astype(np.float32))[None, None]
    pooled = torch.nn.functional.adaptive_avg_pool2d(tensor, (size, size))[0, 0]
    return (pooled > 0.5).to(torch.float64)


def attention_objective(att_maps: torch.Tensor,
                        region_mask: torch.Tensor) -> torch.Tensor:
    """Pixel-averaged squared error between the mask and the
    max-normalized aggregate attention.

    Args:
        att_maps: (pixels,) aggregated map, or (pixels, n) per-token maps
            which are summed over tokens first.
        region_mask: (pixels,) or (h, w) binary/float target region.

    Raises:
        DegenerateAttentionError: the aggregate map is identically zero.
    """
    att = att_maps
    if att.ndim == 2:
        att = att.sum(dim=1)
    mask = region_mask.reshape(-1).to(att.dtype)
    if mask.shape != att.shape:
        raise ConfigError(
            f"mask has {mask.shape[0]} pixels, attention has {att.shape[0]}")
    peak = att.max()
    with torch.no_grad():
        if float(peak) == 0.0 and float(att.min()) == 0.0:
            raise DegenerateAttentionError("aggregated attention map is all zero")
    normalized = att / peak.clamp_min(MAX_GUARD)
    return ((mask - normalized) ** 2).mean()


def _aggregate(att: torch.Tensor, positions: list[int],
               weights: torch.Tensor | None) -> torch.Tensor:
    maps = att[:, positions]
    if weights is None:
        return maps.sum(dim=1)
    return maps @ weights


def _check_finite(loss: torch.Tensor, emb: torch.Tensor, state: RefinedPromptState):
    if not (torch.isfinite(loss) and torch.isfinite(emb).all()):
        raise RefinementDiverged("refinement produced non-finite values",
                                 last_finite=state)


def refine_optimizing(backend: DiffusionBackend,
                      trajectory: DiffusionTrajectory,
                      init_tokens: PromptTokens,
                      region_mask: torch.Tensor,
                      cfg: RefineConfig | None = None,
                      learn_fusion: bool = False) -> RefinedPromptState:
    """Per-timestep refinement, walking T..1 with warm starts.

    At each timestep a fresh optimizer performs cfg.inner_steps updates of
    the condition-token rows (and, when learn_fusion is set, the fusion
    logits). The attention objective value (without the regularizer) is
    logged before and after each timestep's updates.

    Args:
        region_mask: target region at the attention resolution, (pixels,)
            or (h, w). Foreground descriptions refine against the mask,
            background ones against its complement.

    Raises:
        NoConditionTokens: the prompt has no condition-tagged tokens.
        RefinementDiverged: non-finite loss or embedding; carries the
            last finite state.
    """
    cfg = cfg or RefineConfig()
    positions = init_tokens.condition_positions()
    if not positions:
        raise NoConditionTokens("nothing to refine: no condition tokens")

    init_rows = init_tokens.embeddings[positions].detach().clone()
    rows = init_rows.clone().requires_grad_(True)
    logits = torch.zeros(len(positions), dtype=init_rows.dtype,
                         requires_grad=True) if learn_fusion else None
    params = [rows] + ([logits] if logits is not None else [])

    state = RefinedPromptState(style="optimizing", tokens=init_tokens,
                               refined_positions=list(positions),
                               embeddings_per_timestep={})

    row_index = {p: i for i, p in enumerate(positions)}

    def live_matrix() -> torch.Tensor:
        return torch.stack([
            rows[row_index[p]] if p in row_index
            else init_tokens.embeddings[p].detach()
            for p in range(len(init_tokens.words))
        ])

    def objective(k: int, matrix: torch.Tensor | None = None) -> torch.Tensor:
        att = backend.cross_attention_for(
            trajectory.latent_at(k),
            live_matrix() if matrix is None else matrix)
        weights = torch.softmax(logits, dim=0) if logits is not None else None
        return attention_objective(_aggregate(att, positions, weights),
                                   region_mask)

    for k in range(trajectory.steps, 0, -1):
        optimizer = torch.optim.AdamW(params, lr=cfg.lr, weight_decay=0.0)
        with torch.no_grad():
            init_loss = float(objective(k, init_tokens.embeddings.detach()))
            before = float(objective(k))
        for _ in range(cfg.inner_steps):
            optimizer.zero_grad()
            loss = objective(k) + cfg.w * ((rows - init_rows) ** 2).sum()
            _check_finite(loss, rows, state)
            loss.backward()
            optimizer.step()
        _check_finite(rows.detach().sum(), rows.detach(), state)
        with torch.no_grad():
            after = float(objective(k))
            state.embeddings_per_timestep[k] = live_matrix().detach().clone()
        state.loss_log.append({"timestep": k, "init": init_loss,
                               "before": before, "after": after})

    if logits is not None:
        state.fusion_weights = [float(a) for a in
                                torch.softmax(logits.detach(), dim=0)]
    return state


def refine_training(backend: DiffusionBackend,
                    trajectory: DiffusionTrajectory,
                    init_tokens: PromptTokens,
                    region_mask: torch.Tensor,
                    cfg: RefineConfig | None = None) -> RefinedPromptState:
    """Single shared embedding trained over the timesteps as a dataset."""
    cfg = cfg or RefineConfig.training_defaults()
    positions = init_tokens.condition_positions()
    if not positions:
        raise NoConditionTokens("nothing to refine: no condition tokens")

    init_rows = init_tokens.embeddings[positions].detach().clone()
    rows = init_rows.clone().requires_grad_(True)
    row_index = {p: i for i, p in enumerate(positions)}
    state = RefinedPromptState(style="training", tokens=init_tokens,
                               refined_positions=list(positions))

    def live_matrix() -> torch.Tensor:
        return torch.stack([
            rows[row_index[p]] if p in row_index
            else init_tokens.embeddings[p].detach()
            for p in range(len(init_tokens.words))
        ])

    def matrix_now() -> torch.Tensor:
        with torch.no_grad():
            return live_matrix().detach().clone()

    def batch_objective(ks: list[int]) -> torch.Tensor:
        total = None
        for k in ks:
            att = backend.cross_attention_for(trajectory.latent_at(k),
                                              live_matrix())
            loss_k = attention_objective(_aggregate(att, positions, None),
                                         region_mask)
            total = loss_k if total is None else total + loss_k
        return total / len(ks)

    if cfg.epochs == 0:
        state.embeddings = matrix_now()
        return state

    optimizer = torch.optim.AdamW([rows], lr=cfg.lr, weight_decay=0.0)
    gen = torch.Generator().manual_seed(cfg.seed)
    timesteps = list(range(1, trajectory.steps + 1))

    with torch.no_grad():
        initial = float(batch_objective(timesteps))
    for epoch in range(cfg.epochs):
        order = torch.randperm(len(timesteps), generator=gen).tolist()
        for start in range(0, len(order), cfg.batch_size):
            ks = [timesteps[i] for i in order[start:start + cfg.batch_size]]
            optimizer.zero_grad()
            loss = batch_objective(ks) + cfg.w * ((rows - init_rows) ** 2).sum()
            _check_finite(loss, rows, state)
            loss.backward()
            optimizer.step()
        with torch.no_grad():
            state.loss_log.append(
                {"epoch": epoch, "objective": float(batch_objective(timesteps))})
    with torch.no_grad():
        final = float(batch_objective(timesteps))
    state.loss_log.insert(0, {"epoch": -1, "objective": initial})
    state.embeddings = matrix_now()
    state.loss_log.append({"epoch": cfg.epochs, "objective": final})
    return state


def learn_fusion_weights(backend: DiffusionBackend,
                         trajectory: DiffusionTrajectory,
                         back_tokens: PromptTokens,
                         background_mask: torch.Tensor,
                         cfg: RefineConfig | None = None) -> list[float]:
    """Fusion weights over the background condition tokens.

    Learned jointly with background refinement: the aggregate attention
    in the objective becomes sum_n alpha_n Att(Emb_n), with alpha a
    normalized exponential of free logits. Returns alpha only; callers
    needing the refined embeddings too should call refine_optimizing
    with learn_fusion=True.
    """
    state = refine_optimizing(backend, trajectory, back_tokens,
                              background_mask, cfg, learn_fusion=True)
    assert state.fusion_weights is not None
    return state.fusion_weights


def fused_background_embedding(back_embeddings: torch.Tensor,
                               alphas: list[float]) -> torch.Tensor:
    """Convex combination of background condition embeddings (one row
    each); the edit pass substitutes this at foreground condition slots."""
    if back_embeddings.ndim != 2:
        raise ConfigError("expected (n, dim) background embeddings")
    if back_embeddings.shape[0] != len(alphas):
        raise ConfigError(
            f"{back_embeddings.shape[0]} embeddings vs {len(alphas)} weights")
    total = float(sum(alphas))
    if abs(total - 1.0) > 1e-6:
        raise ConfigError(f"fusion weights sum to {total}, expected 1")
    weights = torch.tensor(alphas, dtype=back_embeddings.dtype)
    return (weights[:, None] * back_embeddings).sum(dim=0)
