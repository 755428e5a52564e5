from __future__ import annotations

import numpy as np
import pytest

from harmonia.imagecore import CompositeCase, ForegroundMask, RasterImage


def random_image(height: int, width: int, seed: int = 0) -> RasterImage:
    rng = np.random.default_rng(seed)
    return RasterImage(rng.random((height, width, 3), dtype=np.float32))


def rect_mask(height: int, width: int, top: int, left: int,
              bottom: int, right: int) -> ForegroundMask:
    values = np.zeros((height, width), dtype=np.uint8)
    values[top:bottom, left:right] = 1
    return ForegroundMask(values)


def make_case(height: int = 16, width: int = 16, seed: int = 0) -> CompositeCase:
    image = random_image(height, width, seed)
    mask = rect_mask(height, width, height // 4, width // 4,
                     3 * height // 4, 3 * width // 4)
    return CompositeCase(image=image, mask=mask, case_id=f"case{seed}")


@pytest.fixture
def small_case() -> CompositeCase:
    return make_case(16, 16, seed=7)
