"""3D lookup tables mapping RGB between two images.

Fitting a small LUT between adjacent iteration outputs turns the model's
latent color operation into something a human editor can inspect and
reuse. The fit is a sparse least-squares problem over the lattice nodes:

    sum_masked ||LUT(from_p) - to_p||^2  +  lambda * ||Laplacian(table)||^2

with the Laplacian taken as second differences along each lattice axis, so
any affine color map (identity included) is penalty-free. A tiny identity
anchor removes the null space and pins nodes never touched by a pixel to
the identity map.
"""

from __future__ import annotations

import dataclasses
from pathlib import Path

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import spsolve

from .errors import DegenerateMaskError, InputError
from .imagecore import ForegroundMask, RasterImage

DEFAULT_LATTICE = 17
DEFAULT_SMOOTHNESS = 0.01
IDENTITY_ANCHOR = 1e-6

# Fit is declared ill-conditioned when lattice values stray this far out of
# gamut before clipping. The smoothness weight and the identity anchor are
# then raised together and the fit retried: raising curvature alone is not
# enough because steep linear ramps are curvature-free, so the anchor must
# grow with it to pull the extrapolation back toward identity.
WILD_NODE_MARGIN = 0.25
MAX_SMOOTHNESS_RAISES = 8


@dataclasses.dataclass
class Lut3D:
    """An L x L x L x 3 lattice over the [0,1]^3 RGB cube.

    table[ri, gi, bi] holds the output RGB for input
    (ri, gi, bi) / (L - 1). Values are kept in [0,1].
    """

    table: np.ndarray
    region: str = "global"
    smoothness_raised: bool = False

    def __post_init__(self):
        arr = np.asarray(self.table, dtype=np.float64)
        if arr.ndim != 4 or arr.shape[3] != 3 or len(set(arr.shape[:3])) != 1:
            raise InputError(f"expected L x L x L x 3 table, got {arr.shape}")
        self.table = np.clip(arr, 0.0, 1.0)

    @property
    def lattice_size(self) -> int:
        return self.table.shape[0]


def identity_lut(lattice_size: int = DEFAULT_LATTICE) -> Lut3D:
    axis = np.linspace(0.0, 1.0, lattice_size)
    r, g, b = np.meshgrid(axis, axis, axis, indexing="ij")
    return Lut3D(np.stack([r, g, b], axis=3))


def _trilinear_weights(rgb: np.ndarray, lattice_size: int):
    """Corner indices and weights for each input color.

    Args:
        rgb: (n, 3) colors in [0,1].

    Returns:
        (indices, weights): both (n, 8); indices are flat lattice node ids.
    """
    L = lattice_size
    scaled = np.clip(rgb, 0.0, 1.0) * (L - 1)
    base = np.minimum(scaled.astype(np.int64), L - 2)
    frac = scaled - base

    corner_ids = np.empty((rgb.shape[0], 8), dtype=np.int64)
    corner_w = np.empty((rgb.shape[0], 8), dtype=np.float64)
    k = 0
    for dr in (0, 1):
        for dg in (0, 1):
            for db in (0, 1):
                idx = ((base[:, 0] + dr) * L + (base[:, 1] + dg)) * L + (base[:, 2] + db)
                wr = frac[:, 0] if dr else 1.0 - frac[:, 0]
                wg = frac[:, 1] if dg else 1.0 - frac[:, 1]
                wb = frac[:, 2] if db else 1.0 - frac[:, 2]
                corner_ids[:, k] = idx
                corner_w[:, k] = wr * wg * wb
                k += 1
    return corner_ids, corner_w


def _second_difference_operator(lattice_size: int) -> sp.csr_matrix:
    """Stacked 1D second-difference (Laplacian) rows along all three axes."""
    L = lattice_size
    eye = sp.identity(L, format="csr")
    d2 = sp.diags([1.0, -2.0, 1.0], [0, 1, 2], shape=(L - 2, L), format="csr")
    blocks = [
        sp.kron(sp.kron(d2, eye), eye),
        sp.kron(sp.kron(eye, d2), eye),
        sp.kron(sp.kron(eye, eye), d2),
    ]
    return sp.vstack(blocks).tocsr()


def fit_lut(img_from: RasterImage, img_to: RasterImage, mask: ForegroundMask,
            lattice_size: int = DEFAULT_LATTICE,
            smoothness: float = DEFAULT_SMOOTHNESS,
            region: str = "global") -> Lut3D:
    """Fit a LUT so that LUT(img_from) approximates img_to on the mask.

    Args:
        img_from: source image (colors index into the lattice).
        img_to: target image (regression targets).
        mask: pixels participating in the fit (1 = include).
        lattice_size: nodes per axis, default 17.
        smoothness: weight of the Laplacian curvature penalty.
        region: tag recorded on the result (global or a named sub-mask).

    Returns:
        A Lut3D. If the initial system was ill-conditioned the smoothness
        weight was raised automatically and `smoothness_raised` is set.

    Raises:
        MaskShapeError / DegenerateMaskError via input validation.
        InputError: shape mismatch between the two images.
    """
    if img_from.size != img_to.size:
        raise InputError(
            f"image sizes differ: {img_from.size} vs {img_to.size}")
    if img_from.size != mask.size:
        raise InputError(
            f"mask size {mask.size} does not match images {img_from.size}")
    sel = mask.values.astype(bool)
    if not sel.any():
        raise DegenerateMaskError("LUT fit needs at least one masked pixel")

    src = img_from.pixels[sel].astype(np.float64)
    dst = img_to.pixels[sel].astype(np.float64)
    L = lattice_size
    n_nodes = L ** 3

    ids, weights = _trilinear_weights(src, L)
    rows = np.repeat(np.arange(src.shape[0]), 8)
    a_data = sp.csr_matrix(
        (weights.ravel(), (rows, ids.ravel())), shape=(src.shape[0], n_nodes))

    d2 = _second_difference_operator(L)
    identity_nodes = identity_lut(L).table.reshape(n_nodes, 3)

    gram_data = (a_data.T @ a_data).tocsr()
    gram_smooth = (d2.T @ d2).tocsr()
    eye = sp.identity(n_nodes, format="csr")

    raised = False
    for attempt in range(MAX_SMOOTHNESS_RAISES + 1):
        lam = float(smoothness) * 10.0 ** attempt
        mu = IDENTITY_ANCHOR * 10.0 ** attempt
        system = (gram_data + lam * gram_smooth + mu * eye).tocsc()
        table = np.empty((n_nodes, 3), dtype=np.float64)
        for c in range(3):
            rhs = a_data.T @ dst[:, c] + mu * identity_nodes[:, c]
            table[:, c] = spsolve(system, rhs)
        overshoot = max(-table.min(), table.max() - 1.0, 0.0)
        if np.isfinite(table).all() and overshoot <= WILD_NODE_MARGIN:
            break
        raised = True
    return Lut3D(table.reshape(L, L, L, 3), region=region,
                 smoothness_raised=raised)


def fit_local_luts(img_from: RasterImage, img_to: RasterImage,
                   sub_masks: dict[str, ForegroundMask],
                   lattice_size: int = DEFAULT_LATTICE,
                   smoothness: float = DEFAULT_SMOOTHNESS) -> dict[str, Lut3D]:
    """Fit one LUT per named sub-mask (local per-part guidance)."""
    return {
        name: fit_lut(img_from, img_to, m, lattice_size, smoothness, region=name)
        for name, m in sub_masks.items()
    }


def resample_lut(lut: Lut3D, lattice_size: int) -> Lut3D:
    """Evaluate a LUT on a new lattice (trilinear, same mapping)."""
    if lattice_size < 2:
        raise InputError("lattice_size must be at least 2")
    if lattice_size == lut.lattice_size:
        return Lut3D(lut.table.copy(), region=lut.region)
    axis = np.linspace(0.0, 1.0, lattice_size)
    r, g, b = np.meshgrid(axis, axis, axis, indexing="ij")
    coords = np.stack([r, g, b], axis=3).reshape(-1, 3)
    ids, weights = _trilinear_weights(coords, lut.lattice_size)
    nodes = lut.table.reshape(-1, 3)
    mapped = np.einsum("nk,nkc->nc", weights, nodes[ids])
    table = mapped.reshape(lattice_size, lattice_size, lattice_size, 3)
    return Lut3D(table, region=lut.region)


def apply_lut(image: RasterImage, lut: Lut3D,
              mask: ForegroundMask | None = None) -> RasterImage:
    """Apply a LUT by trilinear interpolation; pixels outside the mask
    (when given) pass through untouched."""
    h, w = image.size
    flat = image.pixels.reshape(-1, 3).astype(np.float64)
    if mask is not None:
        if mask.size != image.size:
            raise InputError(
                f"mask size {mask.size} does not match image {image.size}")
        sel = mask.values.astype(bool).reshape(-1)
    else:
        sel = np.ones(flat.shape[0], dtype=bool)

    nodes = lut.table.reshape(-1, 3)
    ids, weights = _trilinear_weights(flat[sel], lut.lattice_size)
    mapped = np.einsum("nk,nkc->nc", weights, nodes[ids])

    out = flat.copy()
    out[sel] = mapped
    return RasterImage(out.reshape(h, w, 3).astype(np.float32))


def export_lut(lut: Lut3D, path: str | Path, title: str = "harmonia") -> None:
    """Write a .cube file (red index varies fastest, 6 decimal digits)."""
    L = lut.lattice_size
    lines = [
        f'TITLE "{title}"',
        f"LUT_3D_SIZE {L}",
        "DOMAIN_MIN 0.000000 0.000000 0.000000",
        "DOMAIN_MAX 1.000000 1.000000 1.000000",
    ]
    for bi in range(L):
        for gi in range(L):
            for ri in range(L):
                r, g, b = lut.table[ri, gi, bi]
                lines.append(f"{r:.6f} {g:.6f} {b:.6f}")
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text("\n".join(lines) + "\n")


def import_lut(path: str | Path, region: str = "global") -> Lut3D:
    """Read a .cube file written by export_lut (or any standard writer)."""
    size = None
    data: list[tuple[float, float, float]] = []
    for raw_line in Path(path).read_text().splitlines():
        line = raw_line.strip()
        if not line or line.startswith("#"):
            continue
        upper = line.upper()
        if upper.startswith("TITLE") or upper.startswith("DOMAIN_"):
            continue
        if upper.startswith("LUT_3D_SIZE"):
            size = int(line.split()[1])
            continue
        if upper.startswith("LUT_1D_SIZE"):
            raise InputError("1D LUTs are not supported")
        parts = line.split()
        if len(parts) != 3:
            raise InputError(f"malformed .cube data line: {line!r}")
        data.append((float(parts[0]), float(parts[1]), float(parts[2])))
    if size is None:
        raise InputError("missing LUT_3D_SIZE header")
    if len(data) != size ** 3:
        raise InputError(
            f"expected {size ** 3} data lines for LUT_3D_SIZE {size}, got {len(data)}")
    table = np.empty((size, size, size, 3), dtype=np.float64)
    k = 0
    for bi in range(size):
        for gi in range(size):
            for ri in range(size):
                table[ri, gi, bi] = data[k]
                k += 1
    return Lut3D(table, region=region)
