/**
 * Mask editing for the review screen: circular brush strokes and
 * 4-connected region fill over the raw class-index array, with
 * stroke-level undo. All edits happen in place so the canvas renderer
 * can keep one Mask reference.
 */

import { cloneMask, masksEqual, type Mask } from "./mask.js";

/**
 * Stamp a filled circle of `value` centred on (cx, cy); fractional
 * centres and radii are honoured so strokes follow the pointer.
 * Returns how many pixels changed.
 */
export function paintBrush(
  mask: Mask,
  cx: number,
  cy: number,
  radius: number,
  value: number,
): number {
  if (radius < 0) {
    return 0;
  }
  const rr = radius * radius;
  const x0 = Math.max(0, Math.ceil(cx - radius));
  const x1 = Math.min(mask.width - 1, Math.floor(cx + radius));
  const y0 = Math.max(0, Math.ceil(cy - radius));
  const y1 = Math.min(mask.height - 1, Math.floor(cy + radius));
  let changed = 0;
  for (let y = y0; y <= y1; y++) {
    const dy = y - cy;
    for (let x = x0; x <= x1; x++) {
      const dx = x - cx;
      if (dx * dx + dy * dy > rr) {
        continue;
      }
      const i = y * mask.width + x;
      if (mask.pixels[i] !== value) {
        mask.pixels[i] = value;
        changed++;
      }
    }
  }
  return changed;
}

/**
 * Repaint the 4-connected region containing (x, y) with `value`.
 * Returns how many pixels changed; zero when the seed is out of bounds
 * or already carries `value`.
 */
export function floodFill(mask: Mask, x: number, y: number, value: number): number {
  const { width, height, pixels } = mask;
  if (x < 0 || y < 0 || x >= width || y >= height) {
    return 0;
  }
  const from = pixels[y * width + x];
  if (from === value) {
    return 0;
  }
  const stack = [y * width + x];
  let changed = 0;
  while (stack.length > 0) {
    const i = stack.pop()!;
    if (pixels[i] !== from) {
      continue;
    }
    pixels[i] = value;
    changed++;
    const px = i % width;
    if (px > 0) stack.push(i - 1);
    if (px < width - 1) stack.push(i + 1);
    if (i >= width) stack.push(i - width);
    if (i < width * (height - 1)) stack.push(i + width);
  }
  return changed;
}

/**
 * Editing session over one mask. A pointer drag is bracketed by
 * beginStroke/endStroke so the whole gesture undoes as a unit; fill()
 * checkpoints itself. Undo depth is bounded; the oldest states fall off.
 */
export class MaskEditor {
  private history: Mask[] = [];

  constructor(
    readonly mask: Mask,
    private readonly maxUndo = 32,
  ) {}

  get undoDepth(): number {
    return this.history.length;
  }

  beginStroke(): void {
    this.history.push(cloneMask(this.mask));
    if (this.history.length > this.maxUndo) {
      this.history.shift();
    }
  }

  /** Drop the checkpoint again when the gesture changed nothing. */
  endStroke(): void {
    const top = this.history[this.history.length - 1];
    if (top !== undefined && masksEqual(top, this.mask)) {
      this.history.pop();
    }
  }

  /** Paint one brush stamp inside the current stroke. */
  brush(cx: number, cy: number, radius: number, value: number): number {
    return paintBrush(this.mask, cx, cy, radius, value);
  }

  /** One-shot region fill, undoable on its own. */
  fill(x: number, y: number, value: number): number {
    this.beginStroke();
    const changed = floodFill(this.mask, x, y, value);
    this.endStroke();
    return changed;
  }

  undo(): boolean {
    const previous = this.history.pop();
    if (previous === undefined) {
      return false;
    }
    this.mask.pixels.set(previous.pixels);
    return true;
  }
}
