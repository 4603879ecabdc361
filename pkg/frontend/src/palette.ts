/**
 * Color legend for the maceral classes, matching what the service
 * reports on GET /v1/palette.
 */

export interface PaletteEntry {
  index: number;
  name: string;
  color: [number, number, number];
}

export interface Palette {
  classes: PaletteEntry[];
  ignore: { index: number; color: [number, number, number] };
}

/** Mirror of the server's legend, used until /v1/palette has answered. */
export const DEFAULT_PALETTE: Palette = {
  classes: [
    { index: 0, name: "vitrinite", color: [120, 190, 255] },
    { index: 1, name: "inertinite", color: [220, 50, 50] },
    { index: 2, name: "exinite", color: [250, 160, 200] },
    { index: 3, name: "mineral", color: [60, 180, 90] },
    { index: 4, name: "adhesive", color: [25, 35, 140] },
  ],
  ignore: { index: 255, color: [255, 255, 255] },
};

/** RGB for one class index; unknown indices come back mid-grey. */
export function colorFor(palette: Palette, classIndex: number): [number, number, number] {
  if (classIndex === palette.ignore.index) {
    return palette.ignore.color;
  }
  const entry = palette.classes.find((c) => c.index === classIndex);
  return entry ? entry.color : [128, 128, 128];
}

/**
 * Flat 256-entry RGB lookup table (three bytes per class index) so the
 * per-pixel composition loops never search the palette.
 */
export function colorTable(palette: Palette): Uint8Array {
  const table = new Uint8Array(256 * 3);
  table.fill(128);
  for (const entry of palette.classes) {
    table.set(entry.color, entry.index * 3);
  }
  table.set(palette.ignore.color, palette.ignore.index * 3);
  return table;
}
