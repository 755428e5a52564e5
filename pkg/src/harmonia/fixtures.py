"""Deterministic synthetic fixtures for tests, demos, and training.

Every generator is seeded and pure: the same arguments always produce
bit-identical images. Composite cases pair a smooth background with a
rectangular foreground patch whose color statistics are either matched
to the background (harmonious) or shifted in brightness and warmth
(disharmonious). Scored corpora label each case on the 10-rank grid
according to the size of that shift.
"""

from __future__ import annotations

import dataclasses
from typing import Sequence

import numpy as np

from .errors import InputError
from .evaluate import LABEL_GRID, ScoredExample
from .imagecore import CompositeCase, ForegroundMask, RasterImage


@dataclasses.dataclass(frozen=True)
class ShiftSpec:
    """Foreground stat offsets: d_brightness moves all channels,
    d_warmth moves red up and blue down."""

    d_brightness: float = 0.0
    d_warmth: float = 0.0

    @property
    def magnitude(self) -> float:
        return abs(self.d_brightness) + abs(self.d_warmth)


def _smooth_field(rng: np.random.Generator, height: int, width: int,
                  base: np.ndarray, ripple: float) -> np.ndarray:
    """Base color plus a low-frequency ripple and light pixel noise."""
    ys = np.linspace(0.0, np.pi, height)[:, None, None]
    xs = np.linspace(0.0, np.pi, width)[None, :, None]
    phase = rng.uniform(0.0, np.pi, size=3)[None, None, :]
    wave = np.sin(2.0 * ys + phase) * np.cos(xs + phase)
    noise = rng.normal(0.0, 0.01, size=(height, width, 3))
    return base[None, None, :] + ripple * wave + noise


def make_composite_case(seed: int, height: int = 16, width: int = 16,
                        shift: ShiftSpec = ShiftSpec(),
                        case_id: str | None = None) -> CompositeCase:
    """A composite with a centered rectangular foreground.

    The foreground repeats the background's color field, then applies
    the requested statistic shift, so shift=(0,0) is already seamless.
    """
    rng = np.random.default_rng(seed)
    base = rng.uniform(0.3, 0.6, size=3)
    pixels = _smooth_field(rng, height, width, base, ripple=0.05)

    top, left = height // 4, width // 4
    bottom, right = height - top, width - left
    region = pixels[top:bottom, left:right]
    region += shift.d_brightness
    region[:, :, 0] += shift.d_warmth
    region[:, :, 2] -= shift.d_warmth

    mask = np.zeros((height, width), dtype=np.uint8)
    mask[top:bottom, left:right] = 1
    return CompositeCase(
        image=RasterImage(np.clip(pixels, 0.0, 1.0)),
        mask=ForegroundMask(mask),
        case_id=case_id or f"synthetic-{seed}",
    )


def make_mean_anchored_case(seed: int, mean_rgb: tuple[float, float, float],
                            height: int = 16, width: int = 16,
                            case_id: str | None = None) -> CompositeCase:
    """A composite whose global per-channel means equal mean_rgb exactly.

    Editing such an image toward a condition whose color target equals
    mean_rgb is a no-op, which makes this the fixture for identity-swap
    tests. Amplitudes are kept small enough that no pixel clips.
    """
    rng = np.random.default_rng(seed)
    base = np.asarray(mean_rgb, dtype=np.float64)
    if (base < 0.12).any() or (base > 0.88).any():
        raise InputError("mean_rgb channels must lie in [0.12, 0.88] so the "
                         "ripple cannot clip")
    pixels = _smooth_field(rng, height, width, base, ripple=0.04)
    pixels = pixels - pixels.mean(axis=(0, 1), keepdims=True) + base
    if (pixels <= 0.0).any() or (pixels >= 1.0).any():
        raise InputError(f"fixture seed {seed} produced clipping pixels")

    top, left = height // 4, width // 4
    mask = np.zeros((height, width), dtype=np.uint8)
    mask[top:height - top, left:width - left] = 1
    return CompositeCase(
        image=RasterImage(pixels),
        mask=ForegroundMask(mask),
        case_id=case_id or f"anchored-{seed}",
    )


def _label_for(magnitude: float) -> float:
    """Grid label decaying with shift size: 0 maps to 1.0, large to 0.1."""
    raw = 1.0 - 2.0 * magnitude
    return min(LABEL_GRID, key=lambda rank: abs(rank - max(raw, 0.1)))


def make_scored_examples(count: int = 200, seed: int = 0,
                         height: int = 16, width: int = 16
                         ) -> list[ScoredExample]:
    """A balanced soft-labeled corpus for evaluator training.

    Even indices are near-harmonious (small or zero shift), odd indices
    carry a visible brightness/warmth mismatch. Labels follow the shift
    magnitude on the 10-rank grid.
    """
    rng = np.random.default_rng(seed)
    examples = []
    for i in range(count):
        if i % 2 == 0:
            shift = ShiftSpec(
                d_brightness=float(rng.uniform(-0.03, 0.03)),
                d_warmth=float(rng.uniform(-0.02, 0.02)))
        else:
            sign = 1.0 if rng.uniform() < 0.5 else -1.0
            shift = ShiftSpec(
                d_brightness=sign * float(rng.uniform(0.18, 0.38)),
                d_warmth=float(rng.uniform(-0.12, 0.12)))
        case = make_composite_case(
            seed=int(rng.integers(0, 2**31 - 1)),
            height=height, width=width, shift=shift)
        examples.append(ScoredExample(image=case.image,
                                      label=_label_for(shift.magnitude)))
    return examples


def scripted_descriptions(case: CompositeCase,
                          words: Sequence[str] = ("neutral",),
                          ) -> dict[str, list[str]]:
    """Fixed description pairs for offline runs: the foreground and
    background each get the same caption word list."""
    return {"foreground": list(words), "background": list(words)}
