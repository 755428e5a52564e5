"""Attention objective, embedding refinement, and fusion weights."""

import numpy as np
import pytest
import torch

from harmonia.diffusion import SamplerConfig, get_backend, invert, make_prompt
from harmonia.diffusion.toy import SEMANTIC_DIMS, ToyBackend
from harmonia.errors import (
    ConfigError,
    DegenerateAttentionError,
    NoConditionTokens,
    RefinementDiverged,
)
from harmonia.imagecore import ForegroundMask, RasterImage
from harmonia.refine import (
    RefineConfig,
    attention_objective,
    downsample_mask,
    fused_background_embedding,
    learn_fusion_weights,
    refine_optimizing,
    refine_training,
)


def checker_mask(pixels=64):
    mask = torch.zeros(pixels, dtype=torch.float64)
    mask[::3] = 1.0
    return mask


def contrasty_fixture(seed=11):
    """Dim scene with a bright rectangle: attention correlates with it."""
    rng = np.random.default_rng(seed)
    img = rng.uniform(0.05, 0.35, (16, 16, 3)).astype(np.float32)
    mask_values = np.zeros((16, 16), dtype=np.uint8)
    mask_values[4:12, 5:11] = 1
    img[4:12, 5:11] = rng.uniform(0.6, 0.95, (8, 6, 3)).astype(np.float32)
    return RasterImage(img), ForegroundMask(mask_values)


def refine_setup(seed=11, condition="bright"):
    image, mask = contrasty_fixture(seed)
    backend = get_backend("toy")
    tokens = make_prompt(backend, ["lamp"], [condition])
    trajectory = invert(backend, image, tokens, SamplerConfig(steps=50))
    region = downsample_mask(mask.values, backend.latent_size)
    return backend, tokens, trajectory, region


# -- the objective itself ----------------------------------------------


def test_objective_is_zero_when_attention_matches_the_mask():
    mask = checker_mask()
    att = 0.37 * mask
    assert float(attention_objective(att, mask)) <= 1e-10


def test_objective_is_scale_invariant():
    gen = torch.Generator().manual_seed(2)
    att = torch.rand(64, generator=gen, dtype=torch.float64)
    mask = checker_mask()
    base = float(attention_objective(att, mask))
    for c in (1e-3, 7.0, 1e3):
        assert abs(float(attention_objective(c * att, mask)) - base) <= 1e-10


def test_objective_on_uniform_attention_matches_brute_force():
    mask = checker_mask()
    att = torch.full((64,), 0.2, dtype=torch.float64)
    got = float(attention_objective(att, mask))
    peak = 0.2
    total = 0.0
    for p in range(64):
        total += (float(mask[p]) - 0.2 / peak) ** 2
    assert abs(got - total / 64) <= 1e-8


def test_objective_matches_brute_force_on_random_maps():
    gen = torch.Generator().manual_seed(3)
    mask = checker_mask()
    for _ in range(5):
        att = torch.rand(64, generator=gen, dtype=torch.float64)
        peak = float(att.max())
        total = sum((float(mask[p]) - float(att[p]) / peak) ** 2
                    for p in range(64))
        assert abs(float(attention_objective(att, mask)) - total / 64) <= 1e-12


def test_objective_sums_per_token_maps():
    gen = torch.Generator().manual_seed(4)
    maps = torch.rand((64, 3), generator=gen, dtype=torch.float64)
    mask = checker_mask()
    assert torch.isclose(attention_objective(maps, mask),
                         attention_objective(maps.sum(dim=1), mask))


def test_all_zero_attention_is_degenerate():
    with pytest.raises(DegenerateAttentionError):
        attention_objective(torch.zeros(64, dtype=torch.float64),
                            checker_mask())


def test_objective_rejects_pixel_count_mismatch():
    with pytest.raises(ConfigError):
        attention_objective(torch.rand(32, dtype=torch.float64), checker_mask())


# -- mask downsampling ---------------------------------------------------


def test_downsample_mask_is_identity_at_matching_size():
    values = np.zeros((16, 16), dtype=np.uint8)
    values[2:9, 3:12] = 1
    out = downsample_mask(values, 16)
    assert np.array_equal(out.numpy(), values.astype(np.float64))


def test_downsample_mask_thresholds_area_coverage():
    values = np.zeros((32, 32), dtype=np.uint8)
    values[0:2, 0:2] = 1          # cell (0,0) fully covered
    values[0:2, 2:3] = 1          # cell (0,1) half covered
    values[2:3, 0:1] = 1          # cell (1,0) quarter covered
    out = downsample_mask(values, 16)
    assert out[0, 0] == 1.0
    assert out[0, 1] == 0.0       # exactly 0.5 does not pass the threshold
    assert out[1, 0] == 0.0


# -- optimizing-style refinement -----------------------------------------


def test_refinement_beats_the_initial_embedding_at_every_timestep():
    backend, tokens, trajectory, region = refine_setup()
    state = refine_optimizing(backend, trajectory, tokens, region,
                              RefineConfig())
    assert len(state.loss_log) == 50
    for entry in state.loss_log:
        assert entry["after"] < entry["init"]


def test_refinement_warm_starts_from_the_previous_timestep():
    backend, tokens, trajectory, region = refine_setup()
    state = refine_optimizing(backend, trajectory, tokens, region,
                              RefineConfig())
    first = state.loss_log[0]
    assert first["before"] == pytest.approx(first["init"], abs=1e-12)
    for prev, nxt in zip(state.loss_log, state.loss_log[1:]):
        assert nxt["before"] == pytest.approx(prev["after"], abs=1e-12)


def test_huge_regularization_pins_the_embedding():
    backend, tokens, trajectory, region = refine_setup()
    state = refine_optimizing(backend, trajectory, tokens, region,
                              RefineConfig(w=1e9))
    drift = float((state.embedding_at(1) - tokens.embeddings).abs().max())
    assert drift < 1e-3


def test_embedding_drift_shrinks_as_regularization_grows():
    backend, tokens, trajectory, region = refine_setup()
    drifts = []
    for w in (10.0, 5000.0, 1e7):
        state = refine_optimizing(backend, trajectory, tokens, region,
                                  RefineConfig(w=w))
        drifts.append(
            float((state.embedding_at(1) - tokens.embeddings).abs().max()))
    assert drifts[0] >= drifts[1] >= drifts[2]


def test_refinement_never_moves_semantic_coordinates():
    backend, tokens, trajectory, region = refine_setup()
    state = refine_optimizing(backend, trajectory, tokens, region,
                              RefineConfig())
    for k in (1, 25, 50):
        refined = state.embedding_at(k)
        assert torch.equal(refined[:, :SEMANTIC_DIMS],
                           tokens.embeddings[:, :SEMANTIC_DIMS])


def test_refinement_requires_condition_tokens():
    backend, _, trajectory, region = refine_setup()
    bare = make_prompt(backend, ["lamp"], [])
    with pytest.raises(NoConditionTokens):
        refine_optimizing(backend, trajectory, bare, region, RefineConfig())


def test_divergence_raises_and_carries_the_last_finite_state():
    backend, tokens, trajectory, region = refine_setup()

    class PoisonedBackend(ToyBackend):
        def __init__(self, inner):
            super().__init__()
            self.calls = 0

        def cross_attention_for(self, latent, embeddings):
            self.calls += 1
            maps = super().cross_attention_for(latent, embeddings)
            if self.calls > 6:
                return maps * float("nan")
            return maps

    poisoned = PoisonedBackend(backend)
    with pytest.raises(RefinementDiverged) as excinfo:
        refine_optimizing(poisoned, trajectory, tokens, region, RefineConfig())
    assert excinfo.value.last_finite is not None
    assert excinfo.value.last_finite.style == "optimizing"


def test_refined_state_is_deterministic():
    backend, tokens, trajectory, region = refine_setup()
    a = refine_optimizing(backend, trajectory, tokens, region, RefineConfig())
    b = refine_optimizing(backend, trajectory, tokens, region, RefineConfig())
    assert torch.equal(a.embedding_at(1), b.embedding_at(1))


# -- training-style refinement -------------------------------------------


def test_training_style_reduces_the_averaged_objective():
    backend, tokens, trajectory, region = refine_setup()
    state = refine_training(backend, trajectory, tokens, region,
                            RefineConfig.training_defaults())
    assert state.loss_log[-1]["objective"] < state.loss_log[0]["objective"]
    assert state.embeddings is not None
    assert state.embedding_at(1) is state.embedding_at(50)


def test_training_style_with_zero_epochs_returns_the_input():
    backend, tokens, trajectory, region = refine_setup()
    cfg = RefineConfig(w=1000.0, lr=1e-2, epochs=0)
    state = refine_training(backend, trajectory, tokens, region, cfg)
    assert torch.equal(state.embeddings, tokens.embeddings)


def test_training_style_is_seed_deterministic():
    backend, tokens, trajectory, region = refine_setup()
    cfg = RefineConfig(w=1000.0, lr=1e-2, epochs=3, seed=5)
    a = refine_training(backend, trajectory, tokens, region, cfg)
    b = refine_training(backend, trajectory, tokens, region, cfg)
    assert torch.equal(a.embeddings, b.embeddings)


# -- fusion ----------------------------------------------------------------


def test_fusion_weights_are_a_convex_combination():
    backend, _, trajectory, region = refine_setup()
    tokens = make_prompt(backend, ["field"], ["dark", "cool"],
                         condition_tag="back_cond")
    alphas = learn_fusion_weights(backend, trajectory, tokens, 1.0 - region)
    assert len(alphas) == 2
    assert abs(sum(alphas) - 1.0) <= 1e-6
    assert all(a >= 0.0 for a in alphas)


def test_symmetric_descriptions_keep_symmetric_weights():
    backend, _, trajectory, region = refine_setup()
    tokens = make_prompt(backend, ["field"], ["dark", "dark"],
                         condition_tag="back_cond")
    alphas = learn_fusion_weights(backend, trajectory, tokens, 1.0 - region)
    assert abs(alphas[0] - 0.5) <= 0.05
    assert abs(alphas[1] - 0.5) <= 0.05


def test_single_description_gets_weight_one():
    backend, _, trajectory, region = refine_setup()
    tokens = make_prompt(backend, ["field"], ["dark"],
                         condition_tag="back_cond")
    alphas = learn_fusion_weights(backend, trajectory, tokens, 1.0 - region)
    assert alphas == [1.0]


def test_fused_embedding_is_the_weighted_row_sum():
    gen = torch.Generator().manual_seed(6)
    rows = torch.randn((3, 16), generator=gen, dtype=torch.float64)
    alphas = [0.2, 0.3, 0.5]
    fused = fused_background_embedding(rows, alphas)
    manual = 0.2 * rows[0] + 0.3 * rows[1] + 0.5 * rows[2]
    assert torch.allclose(fused, manual, atol=1e-12)


def test_fused_embedding_validates_inputs():
    rows = torch.zeros((2, 16), dtype=torch.float64)
    with pytest.raises(ConfigError):
        fused_background_embedding(rows, [0.5])
    with pytest.raises(ConfigError):
        fused_background_embedding(rows, [0.9, 0.9])
    with pytest.raises(ConfigError):
        fused_background_embedding(rows[0], [1.0])
