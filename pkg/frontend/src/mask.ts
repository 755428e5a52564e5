/** Foreground mask painting model.
 *
 * A mask is a width x height grid of 0/1 bytes: 1 marks foreground to
 * be harmonized, 0 marks background the engine must leave untouched.
 * Painting logic is pure so it can be tested without a canvas; the DOM
 * layer only rasterizes the grid into pixels for display and upload.
 */

export interface MaskGrid {
  width: number;
  height: number;
  /** Row-major 0/1 bytes, length width * height. */
  data: Uint8Array;
}

export function createMask(width: number, height: number): MaskGrid {
  if (!Number.isInteger(width) || !Number.isInteger(height) ||
      width <= 0 || height <= 0) {
    throw new Error(`mask dimensions must be positive integers, got ${width}x${height}`);
  }
  return { width, height, data: new Uint8Array(width * height) };
}

/** Stamp a filled disc of the given value (1 = brush, 0 = erase)
 * centered at (cx, cy). Coordinates outside the grid are clipped, so
 * strokes may run off the edge safely. Mutates and returns the grid. */
export function paintDisc(
  grid: MaskGrid,
  cx: number,
  cy: number,
  radius: number,
  value: 0 | 1,
): MaskGrid {
  const r = Math.max(0, radius);
  const r2 = r * r;
  const x0 = Math.max(0, Math.floor(cx - r));
  const x1 = Math.min(grid.width - 1, Math.ceil(cx + r));
  const y0 = Math.max(0, Math.floor(cy - r));
  const y1 = Math.min(grid.height - 1, Math.ceil(cy + r));
  for (let y = y0; y <= y1; y += 1) {
    const dy = y - cy;
    for (let x = x0; x <= x1; x += 1) {
      const dx = x - cx;
      if (dx * dx + dy * dy <= r2) {
        grid.data[y * grid.width + x] = value;
      }
    }
  }
  return grid;
}

/** Connect two brush positions with a solid stroke so fast pointer
 * moves do not leave gaps. */
export function paintStroke(
  grid: MaskGrid,
  fromX: number,
  fromY: number,
  toX: number,
  toY: number,
  radius: number,
  value: 0 | 1,
): MaskGrid {
  const steps = Math.max(
    1,
    Math.ceil(Math.hypot(toX - fromX, toY - fromY) / Math.max(1, radius / 2)),
  );
  for (let i = 0; i <= steps; i += 1) {
    const t = i / steps;
    paintDisc(grid, fromX + (toX - fromX) * t, fromY + (toY - fromY) * t,
              radius, value);
  }
  return grid;
}

export function clearMask(grid: MaskGrid): MaskGrid {
  grid.data.fill(0);
  return grid;
}

/** Fraction of the grid currently marked foreground, for the UI's
 * "mask is empty" guard before submitting. */
export function paintedFraction(grid: MaskGrid): number {
  let count = 0;
  for (let i = 0; i < grid.data.length; i += 1) {
    count += grid.data[i] === 0 ? 0 : 1;
  }
  return count / grid.data.length;
}

/** Expand the grid into opaque RGBA pixels: foreground becomes pure
 * white (255) and background pure black, the binary contract the
 * service expects in the uploaded mask image. */
export function toBinaryPixels(grid: MaskGrid) {
  const out = new Uint8ClampedArray(grid.width * grid.height * 4);
  for (let i = 0; i < grid.data.length; i += 1) {
    const v = grid.data[i] === 0 ? 0 : 255;
    out[i * 4] = v;
    out[i * 4 + 1] = v;
    out[i * 4 + 2] = v;
    out[i * 4 + 3] = 255;
  }
  return out;
}

/** Read pixels (e.g. an uploaded existing mask) back into a grid,
 * treating any channel above the threshold as foreground. */
export function fromPixels(
  width: number,
  height: number,
  rgba: Uint8ClampedArray | Uint8Array,
  threshold = 127,
): MaskGrid {
  const grid = createMask(width, height);
  for (let i = 0; i < width * height; i += 1) {
    const r = rgba[i * 4] ?? 0;
    const g = rgba[i * 4 + 1] ?? 0;
    const b = rgba[i * 4 + 2] ?? 0;
    grid.data[i] = Math.max(r, g, b) > threshold ? 1 : 0;
  }
  return grid;
}
