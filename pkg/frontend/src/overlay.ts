/**
 * Mask overlay rendering helpers: run-length decoding and RGBA compositing.
 * Pure functions over typed arrays so they are trivially unit-testable.
 */

import { MaskRle } from "./api.js";

/** Colors follow the usual convention: green marks foreground clicks,
 * red marks background clicks. */
export const POSITIVE_COLOR = "#2ecc71";
export const NEGATIVE_COLOR = "#e74c3c";
export const OVERLAY_RGBA: [number, number, number, number] = [46, 204, 113, 110];

/**
 * Decode alternating zero/one run lengths (starting with a zero run) into a
 * flat row-major 0/1 array of width*height entries.
 */
export function decodeRle(rle: MaskRle): Uint8Array {
  const total = rle.width * rle.height;
  const out = new Uint8Array(total);
  let offset = 0;
  let value = 0;
  for (const run of rle.counts) {
    if (run < 0) throw new Error(`negative run length ${run}`);
    if (value === 1) out.fill(1, offset, offset + run);
    offset += run;
    value ^= 1;
  }
  if (offset !== total) {
    throw new Error(`run lengths sum to ${offset}, expected ${total}`);
  }
  return out;
}

/** Number of foreground pixels in a decoded mask. */
export function maskArea(mask: Uint8Array): number {
  let area = 0;
  for (let i = 0; i < mask.length; i++) area += mask[i];
  return area;
}

/**
 * Turn a decoded mask into the RGBA pixel buffer for a canvas overlay.
 * Background pixels stay fully transparent.
 */
export function maskToRgba(
  mask: Uint8Array,
  rgba: [number, number, number, number] = OVERLAY_RGBA,
): Uint8ClampedArray {
  const out = new Uint8ClampedArray(mask.length * 4);
  const [r, g, b, a] = rgba;
  for (let i = 0; i < mask.length; i++) {
    if (mask[i]) {
      const j = i * 4;
      out[j] = r;
      out[j + 1] = g;
      out[j + 2] = b;
      out[j + 3] = a;
    }
  }
  return out;
}
