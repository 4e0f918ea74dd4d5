/**
 * RGBA compositing for the annotation and review canvases. Positive labels
 * and predicted regions render fuchsia; negatives get a cool blue so the two
 * polarities stay distinguishable at a glance.
 */
import { LabelRaster } from "./labels.js";
import { decodePng } from "./png.js";
import { NEGATIVE, POSITIVE } from "./tools.js";

export const FUCHSIA: [number, number, number] = [255, 0, 255];
export const NEGATIVE_TINT: [number, number, number] = [70, 110, 255];

/** Label overlay: transparent where unlabeled. */
export function labelOverlayRgba(raster: LabelRaster,
                                 opacity: number): Uint8ClampedArray {
  const alpha = Math.round(255 * Math.min(1, Math.max(0, opacity)));
  const out = new Uint8ClampedArray(raster.width * raster.height * 4);
  for (let i = 0; i < raster.data.length; i++) {
    const v = raster.data[i];
    if (v === POSITIVE) {
      out[4 * i] = FUCHSIA[0];
      out[4 * i + 1] = FUCHSIA[1];
      out[4 * i + 2] = FUCHSIA[2];
      out[4 * i + 3] = alpha;
    } else if (v === NEGATIVE) {
      out[4 * i] = NEGATIVE_TINT[0];
      out[4 * i + 1] = NEGATIVE_TINT[1];
      out[4 * i + 2] = NEGATIVE_TINT[2];
      out[4 * i + 3] = alpha;
    }
  }
  return out;
}

/**
 * Prediction overlay from the server's binary mask PNG. The client never
 * thresholds probabilities itself; a threshold change re-requests the mask,
 * so what is on screen is exactly what the server would import.
 */
export function maskOverlayRgba(maskPng: Uint8Array,
                                opacity: number): Uint8ClampedArray {
  const img = decodePng(maskPng);
  const alpha = Math.round(255 * Math.min(1, Math.max(0, opacity)));
  const out = new Uint8ClampedArray(img.width * img.height * 4);
  for (let i = 0; i < img.width * img.height; i++) {
    if (img.data[i]) {
      out[4 * i] = FUCHSIA[0];
      out[4 * i + 1] = FUCHSIA[1];
      out[4 * i + 2] = FUCHSIA[2];
      out[4 * i + 3] = alpha;
    }
  }
  return out;
}

/** Positive-pixel count of a mask PNG, shown next to the threshold slider. */
export function countPositive(maskPng: Uint8Array): number {
  const img = decodePng(maskPng);
  let n = 0;
  for (let i = 0; i < img.width * img.height; i++) {
    if (img.data[i]) n++;
  }
  return n;
}

/** Region outline pixels for superpixel hover: set where any 4-neighbor has
 * a different region id. `labels16` is the decoded superpixel map. */
export function regionEdges(labels16: Uint16Array, width: number,
                            height: number): Uint8Array {
  const out = new Uint8Array(width * height);
  for (let y = 0; y < height; y++) {
    for (let x = 0; x < width; x++) {
      const v = labels16[y * width + x];
      if ((x + 1 < width && labels16[y * width + x + 1] !== v) ||
          (y + 1 < height && labels16[(y + 1) * width + x] !== v)) {
        out[y * width + x] = 1;
        if (x + 1 < width) out[y * width + x + 1] = 1;
        if (y + 1 < height) out[(y + 1) * width + x] = 1;
      }
    }
  }
  return out;
}
