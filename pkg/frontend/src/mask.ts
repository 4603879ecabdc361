/**
 * Wire codec for segmentation masks.
 *
 * The service moves masks as {width, height, data} where data is the
 * base64 encoding of the raw uint8 class indices in row-major order.
 * Review edits must survive this codec byte for byte, so both
 * directions are exact: no resampling, no palette indirection.
 */

export interface MaskPayload {
  width: number;
  height: number;
  data: string;
}

export interface Mask {
  width: number;
  height: number;
  /** Class index per pixel, row-major, length width * height. */
  pixels: Uint8Array;
}

/** Largest slice handed to String.fromCharCode in one call. */
const CHUNK = 0x2000;

export function decodeMask(payload: MaskPayload): Mask {
  const raw = atob(payload.data);
  const expected = payload.width * payload.height;
  if (raw.length !== expected) {
    throw new Error(
      `mask payload carries ${raw.length} bytes, expected ${expected} ` +
        `for ${payload.width}x${payload.height}`,
    );
  }
  const pixels = new Uint8Array(expected);
  for (let i = 0; i < expected; i++) {
    pixels[i] = raw.charCodeAt(i);
  }
  return { width: payload.width, height: payload.height, pixels };
}

export function encodeMask(mask: Mask): MaskPayload {
  if (mask.pixels.length !== mask.width * mask.height) {
    throw new Error(
      `mask holds ${mask.pixels.length} pixels, expected ` +
        `${mask.width * mask.height} for ${mask.width}x${mask.height}`,
    );
  }
  let binary = "";
  for (let i = 0; i < mask.pixels.length; i += CHUNK) {
    binary += String.fromCharCode(...mask.pixels.subarray(i, i + CHUNK));
  }
  return { width: mask.width, height: mask.height, data: btoa(binary) };
}

export function cloneMask(mask: Mask): Mask {
  return { width: mask.width, height: mask.height, pixels: new Uint8Array(mask.pixels) };
}

export function masksEqual(a: Mask, b: Mask): boolean {
  if (a.width !== b.width || a.height !== b.height) {
    return false;
  }
  for (let i = 0; i < a.pixels.length; i++) {
    if (a.pixels[i] !== b.pixels[i]) {
      return false;
    }
  }
  return true;
}
