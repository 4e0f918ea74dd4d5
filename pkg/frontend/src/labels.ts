/**
 * Client-side 3-state label raster and the tools that draw into it.
 *
 * The server stores labels as an 8-bit gray PNG with exactly three values:
 * 0 unlabeled, 128 negative, 255 positive. Everything here rasterizes at the
 * tile's pixel grid so a save/reload round-trip is bit-identical; the client
 * never produces label pixels the server would re-interpret.
 */
import { boundsOf, insideEvenOdd, Pt } from "./geom.js";
import { decodePng, encodePng } from "./png.js";

const GRAY_OF = [0, 128, 255];

export class LabelRaster {
  readonly width: number;
  readonly height: number;
  readonly data: Uint8Array; // values 0|1|2

  constructor(width: number, height: number, data?: Uint8Array) {
    this.width = width;
    this.height = height;
    this.data = data ?? new Uint8Array(width * height);
  }

  static fromGrayPng(bytes: Uint8Array): LabelRaster {
    const img = decodePng(bytes);
    if (img.channels !== 1 || img.data instanceof Uint16Array) {
      throw new Error("label image must be 8-bit grayscale");
    }
    const data = new Uint8Array(img.width * img.height);
    for (let i = 0; i < data.length; i++) {
      const g = img.data[i];
      const v = GRAY_OF.indexOf(g);
      if (v < 0) throw new Error(`label PNG has unexpected gray value ${g}`);
      data[i] = v;
    }
    return new LabelRaster(img.width, img.height, data);
  }

  toGrayPng(): Uint8Array {
    const gray = new Uint8Array(this.data.length);
    for (let i = 0; i < gray.length; i++) gray[i] = GRAY_OF[this.data[i]];
    return encodePng({
      width: this.width,
      height: this.height,
      channels: 1,
      data: gray,
    });
  }

  clone(): LabelRaster {
    return new LabelRaster(this.width, this.height, this.data.slice());
  }

  equals(other: LabelRaster): boolean {
    if (other.width !== this.width || other.height !== this.height) {
      return false;
    }
    for (let i = 0; i < this.data.length; i++) {
      if (this.data[i] !== other.data[i]) return false;
    }
    return true;
  }

  countChanged(other: LabelRaster): number {
    let n = 0;
    for (let i = 0; i < this.data.length; i++) {
      if (this.data[i] !== other.data[i]) n++;
    }
    return n;
  }

  /** Stamp one brush disk. Pixel (x, y) is covered when its center lies
   * within `radius` of the click point. */
  stampDisk(cx: number, cy: number, radius: number, value: number): void {
    const r2 = radius * radius;
    const x0 = Math.max(0, Math.floor(cx - radius));
    const x1 = Math.min(this.width - 1, Math.ceil(cx + radius));
    const y0 = Math.max(0, Math.floor(cy - radius));
    const y1 = Math.min(this.height - 1, Math.ceil(cy + radius));
    for (let y = y0; y <= y1; y++) {
      const dy = y + 0.5 - cy;
      for (let x = x0; x <= x1; x++) {
        const dx = x + 0.5 - cx;
        if (dx * dx + dy * dy <= r2) {
          this.data[y * this.width + x] = value;
        }
      }
    }
  }

  /** Brush stroke along a polyline: disks stamped at sub-pixel steps so a
   * fast drag leaves no gaps. */
  stroke(points: Pt[], radius: number, value: number): void {
    if (points.length === 0) return;
    this.stampDisk(points[0].x, points[0].y, radius, value);
    for (let i = 1; i < points.length; i++) {
      const a = points[i - 1];
      const b = points[i];
      const dist = Math.hypot(b.x - a.x, b.y - a.y);
      const steps = Math.max(1, Math.ceil(dist));
      for (let s = 1; s <= steps; s++) {
        const t = s / steps;
        this.stampDisk(a.x + t * (b.x - a.x), a.y + t * (b.y - a.y),
                       radius, value);
      }
    }
  }

  /**
   * Even-odd polygon fill sampled at pixel centers. Scanline version of the
   * same rule `insideEvenOdd` implements; the tests hold the two equal.
   */
  fillPolygon(poly: Pt[], value: number): void {
    if (poly.length < 3) return;
    const { yMin, yMax } = boundsOf(poly);
    const y0 = Math.max(0, Math.floor(yMin));
    const y1 = Math.min(this.height - 1, Math.ceil(yMax));
    const xs: number[] = [];
    for (let y = y0; y <= y1; y++) {
      const cy = y + 0.5;
      xs.length = 0;
      for (let i = 0, j = poly.length - 1; i < poly.length; j = i++) {
        const yi = poly[i].y;
        const yj = poly[j].y;
        if (yi > cy !== yj > cy) {
          xs.push(poly[i].x + ((cy - yi) / (yj - yi)) * (poly[j].x - poly[i].x));
        }
      }
      xs.sort((a, b) => a - b);
      for (let k = 0; k + 1 < xs.length; k += 2) {
        // pixel center x+0.5 in [xs[k], xs[k+1])
        const from = Math.max(0, Math.ceil(xs[k] - 0.5));
        const to = Math.min(this.width - 1, Math.ceil(xs[k + 1] - 0.5) - 1);
        for (let x = from; x <= to; x++) {
          this.data[y * this.width + x] = value;
        }
      }
    }
  }

  /** Superpixel click: write `value` wherever the server's region mask is
   * set. The mask is the gray PNG from the region endpoint (255 = inside). */
  fillRegion(maskPng: Uint8Array, value: number): number {
    const img = decodePng(maskPng);
    if (img.width !== this.width || img.height !== this.height) {
      throw new Error("region mask does not match tile size");
    }
    let n = 0;
    for (let i = 0; i < this.data.length; i++) {
      if (img.data[i]) {
        this.data[i] = value;
        n++;
      }
    }
    return n;
  }
}
