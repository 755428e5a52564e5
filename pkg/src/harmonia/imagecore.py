"""Image and mask primitives shared by every other module.

External contract is 8-bit sRGB PNG/JPEG; internally everything is float32
in [0,1]. Masks are strictly binary {0,1} with 1 = foreground. All
operations here are pure value-semantics functions, safe to call from
concurrent contexts.
"""

from __future__ import annotations

import dataclasses
from pathlib import Path
from typing import Optional

import numpy as np
from PIL import Image

from .errors import DegenerateMaskError, InputError, MaskShapeError

MIN_SIDE = 8

# Rec.601 luma coefficients, used for edge maps and toy latents alike.
LUMA_WEIGHTS = np.array([0.299, 0.587, 0.114], dtype=np.float32)


@dataclasses.dataclass
class RasterImage:
    """An sRGB image as float32 H x W x 3 in [0,1]."""

    pixels: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.pixels, dtype=np.float32)
        if arr.ndim != 3 or arr.shape[2] != 3:
            raise InputError(f"expected H x W x 3 image, got shape {arr.shape}")
        if arr.shape[0] < MIN_SIDE or arr.shape[1] < MIN_SIDE:
            raise InputError(
                f"image sides must be at least {MIN_SIDE}px, got {arr.shape[:2]}"
            )
        self.pixels = np.clip(arr, 0.0, 1.0)

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def size(self) -> tuple[int, int]:
        """(height, width)."""
        return self.pixels.shape[0], self.pixels.shape[1]

    @classmethod
    def from_uint8(cls, arr: np.ndarray) -> "RasterImage":
        return cls(np.asarray(arr, dtype=np.float32) / 255.0)

    def to_uint8(self) -> np.ndarray:
        return np.clip(np.rint(self.pixels * 255.0), 0, 255).astype(np.uint8)

    def luma(self) -> np.ndarray:
        """Rec.601 luma, H x W float32."""
        return self.pixels @ LUMA_WEIGHTS


@dataclasses.dataclass
class ForegroundMask:
    """Binary H x W mask, 1 = foreground."""

    values: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.values)
        if arr.ndim != 2:
            raise InputError(f"expected H x W mask, got shape {arr.shape}")
        arr = (arr.astype(np.float32) > 0.5).astype(np.uint8)
        if arr.sum() == 0 or arr.sum() == arr.size:
            raise DegenerateMaskError(
                "mask must contain at least one foreground and one background pixel"
            )
        self.values = arr

    @property
    def size(self) -> tuple[int, int]:
        return self.values.shape[0], self.values.shape[1]

    @property
    def foreground_fraction(self) -> float:
        return float(self.values.mean())

    def complement(self) -> np.ndarray:
        """Background indicator (1 - mask) as uint8. Not a ForegroundMask:
        it is a plain array because its semantics are inverted."""
        return (1 - self.values).astype(np.uint8)


@dataclasses.dataclass
class CompositeCase:
    """A composite image, its foreground mask, and bookkeeping."""

    image: RasterImage
    mask: ForegroundMask
    case_id: str = ""
    tags: list[str] = dataclasses.field(default_factory=list)
    original_size: Optional[tuple[int, int]] = None

    def __post_init__(self):
        if self.image.size != self.mask.size:
            raise MaskShapeError(self.image.pixels.shape, self.mask.values.shape)
        if self.original_size is None:
            self.original_size = self.image.size


def load_image(path: str | Path) -> RasterImage:
    """Load a PNG/JPEG as an RGB RasterImage."""
    try:
        with Image.open(path) as im:
            rgb = im.convert("RGB")
            arr = np.asarray(rgb, dtype=np.uint8)
    except (OSError, ValueError) as exc:
        raise InputError(f"cannot decode image {path}: {exc}") from exc
    return RasterImage.from_uint8(arr)


def load_mask(path: str | Path) -> ForegroundMask:
    """Load a mask image; any channel collapses to gray, threshold at 0.5."""
    try:
        with Image.open(path) as im:
            gray = im.convert("L")
            arr = np.asarray(gray, dtype=np.uint8)
    except (OSError, ValueError) as exc:
        raise InputError(f"cannot decode mask {path}: {exc}") from exc
    return ForegroundMask((arr > 127).astype(np.uint8))


def load_case(image_path: str | Path, mask_path: str | Path,
              case_id: str = "") -> CompositeCase:
    """Load an image/mask pair into a shape-checked CompositeCase.

    Args:
        image_path: path to an RGB PNG or JPEG.
        mask_path: path to a single-channel mask (255 = foreground).
        case_id: optional identifier; defaults to the image stem.

    Raises:
        MaskShapeError: mask dimensions differ from the image's.
        DegenerateMaskError: mask is empty or full after binarization.
        InputError: a file is missing or undecodable.
    """
    image = load_image(image_path)
    mask = load_mask(mask_path)
    if not case_id:
        case_id = Path(image_path).stem
    return CompositeCase(image=image, mask=mask, case_id=case_id)


def resize_image(image: RasterImage, height: int, width: int) -> RasterImage:
    """Bilinear resize of a float image (per-channel, full precision)."""
    if (height, width) == image.size:
        return RasterImage(image.pixels.copy())
    channels = []
    for c in range(3):
        band = Image.fromarray(image.pixels[:, :, c], mode="F")
        band = band.resize((width, height), resample=Image.BILINEAR)
        channels.append(np.asarray(band, dtype=np.float32))
    return RasterImage(np.stack(channels, axis=2))


def resize_mask(mask: ForegroundMask, height: int, width: int) -> ForegroundMask:
    """Nearest-neighbor mask resize, re-binarized.

    Raises:
        DegenerateMaskError: resampling dropped the last foreground (or
            background) pixel.
    """
    if (height, width) == mask.size:
        return ForegroundMask(mask.values.copy())
    im = Image.fromarray((mask.values * 255).astype(np.uint8), mode="L")
    im = im.resize((width, height), resample=Image.NEAREST)
    arr = np.asarray(im, dtype=np.uint8)
    return ForegroundMask((arr > 127).astype(np.uint8))


def resize_to_working(case: CompositeCase, size: int = 512) -> CompositeCase:
    """Resize a case to the square working resolution.

    The original size is recorded on the returned case so the final output
    can be resized back. A case already at the working size passes through
    unchanged (modulo a defensive copy).
    """
    resized = CompositeCase(
        image=resize_image(case.image, size, size),
        mask=resize_mask(case.mask, size, size),
        case_id=case.case_id,
        tags=list(case.tags),
        original_size=case.original_size,
    )
    return resized


def composite_back(original: RasterImage, edited: RasterImage,
                   mask: ForegroundMask) -> RasterImage:
    """Paste the edited foreground over the original background.

    output = mask * edited + (1 - mask) * original, computed by pixelwise
    selection so background pixels are bit-identical to the original.

    Raises:
        MaskShapeError: any shape disagreement.
    """
    if original.size != edited.size or original.size != mask.size:
        raise MaskShapeError(original.pixels.shape, mask.values.shape)
    sel = mask.values.astype(bool)[:, :, None]
    out = np.where(sel, edited.pixels, original.pixels)
    return RasterImage(out)


def composite_back_feathered(original: RasterImage, edited: RasterImage,
                             mask: ForegroundMask, radius: int = 3) -> RasterImage:
    """Feathered variant for aesthetics: blends across a softened seam.

    Not used on the default path because it breaks the bit-exact
    background guarantee; enable via the run config only.
    """
    if radius <= 0:
        return composite_back(original, edited, mask)
    if original.size != edited.size or original.size != mask.size:
        raise MaskShapeError(original.pixels.shape, mask.values.shape)
    from scipy.ndimage import gaussian_filter

    weight = gaussian_filter(mask.values.astype(np.float32), sigma=radius / 2.0)
    weight = np.clip(weight, 0.0, 1.0)[:, :, None]
    out = weight * edited.pixels + (1.0 - weight) * original.pixels
    return RasterImage(out)


def save_png(image: RasterImage, path: str | Path) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(image.to_uint8(), mode="RGB").save(path, format="PNG")


def save_mask_png(mask: ForegroundMask, path: str | Path) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray((mask.values * 255).astype(np.uint8), mode="L").save(
        path, format="PNG"
    )
