/**
 * Pixel composition for the review canvas: colorize a class-index mask
 * and blend it over the microscope photograph. Pure array-in/array-out
 * so the same code is exercised by tests and by the browser canvas.
 */

import type { Mask } from "./mask.js";
import { colorTable, type Palette } from "./palette.js";

/** Solid RGBA rendering of a mask, one legend color per class. */
export function maskToRgba(mask: Mask, palette: Palette): Uint8ClampedArray<ArrayBuffer> {
  const table = colorTable(palette);
  const out = new Uint8ClampedArray(mask.width * mask.height * 4);
  for (let i = 0; i < mask.pixels.length; i++) {
    const c = mask.pixels[i] * 3;
    const o = i * 4;
    out[o] = table[c];
    out[o + 1] = table[c + 1];
    out[o + 2] = table[c + 2];
    out[o + 3] = 255;
  }
  return out;
}

/**
 * Blend each pixel's legend color over the photograph:
 * out = (1 - alpha) * image + alpha * color. The image is RGBA at the
 * mask's resolution, as produced by canvas getImageData.
 */
export function composeOverlay(
  image: Uint8ClampedArray,
  mask: Mask,
  palette: Palette,
  alpha = 0.45,
): Uint8ClampedArray<ArrayBuffer> {
  const count = mask.width * mask.height;
  if (image.length !== count * 4) {
    throw new Error(
      `image carries ${image.length} bytes, expected ${count * 4} ` +
        `RGBA bytes for ${mask.width}x${mask.height}`,
    );
  }
  if (alpha < 0 || alpha > 1) {
    throw new Error(`alpha must sit in [0, 1], got ${alpha}`);
  }
  const table = colorTable(palette);
  const keep = 1 - alpha;
  const out = new Uint8ClampedArray(image.length);
  for (let i = 0; i < count; i++) {
    const c = mask.pixels[i] * 3;
    const o = i * 4;
    out[o] = image[o] * keep + table[c] * alpha;
    out[o + 1] = image[o + 1] * keep + table[c + 1] * alpha;
    out[o + 2] = image[o + 2] * keep + table[c + 2] * alpha;
    out[o + 3] = 255;
  }
  return out;
}
