"""Distilling a color transform into a 3D LUT and a portable .cube file.

Every harmonization iteration can be summarized as a color lookup
table: fit the lattice on the before/after pair, export it as .cube,
and the same grade can be replayed in any editor. Here the "edit" is a
known gamma curve, so fidelity is easy to judge.
"""

from pathlib import Path

import numpy as np

from harmonia.imagecore import ForegroundMask, RasterImage
from harmonia.luts import apply_lut, export_lut, fit_lut, import_lut

OUT_DIR = Path(__file__).parent / "output" / "luts"


def color_sweep(side: int = 64, seed: int = 2) -> RasterImage:
    """Random coverage of the RGB cube plus its eight corners."""
    rng = np.random.default_rng(seed)
    pixels = rng.random((side, side, 3), dtype=np.float32)
    corners = np.array([[r, g, b] for r in (0.0, 1.0)
                        for g in (0.0, 1.0) for b in (0.0, 1.0)],
                       dtype=np.float32)
    pixels[0, :8] = corners
    return RasterImage(pixels)


def main() -> None:
    source = color_sweep()
    target = RasterImage(np.power(source.pixels, np.float32(1.0 / 2.2)))
    values = np.ones(source.pixels.shape[:2], dtype=np.uint8)
    values[0, 0] = 0  # a mask must leave at least one pixel out
    mask = ForegroundMask(values)

    # 1. Fit a 17-node lattice so that LUT(source) approximates target.
    lut = fit_lut(source, target, mask)
    mapped = apply_lut(source, lut, mask)
    selected = values.astype(bool)
    mae = np.abs(mapped.pixels[selected] - target.pixels[selected]).mean()
    print(f"gamma 1/2.2 fit on a {lut.lattice_size}-node lattice: "
          f"mean abs error {mae:.5f} ({mae * 255:.2f}/255)")

    # 2. Sanity: fitting an image onto itself recovers the identity grid.
    identity = fit_lut(source, source, mask)
    axis = np.linspace(0.0, 1.0, identity.lattice_size)
    nodes = np.stack(np.meshgrid(axis, axis, axis, indexing="ij"), axis=-1)
    print(f"identity fit: max node deviation "
          f"{np.abs(identity.table - nodes).max():.2e}")

    # 3. Export and re-import the grade.
    OUT_DIR.mkdir(parents=True, exist_ok=True)
    path = OUT_DIR / "gamma.cube"
    export_lut(lut, path, title="gamma 1/2.2")
    back = import_lut(path)
    print(f"exported {path.name}: {path.stat().st_size} bytes, "
          f"roundtrip max deviation "
          f"{np.abs(back.table - lut.table).max():.2e}")


if __name__ == "__main__":
    main()
