export type Tool =
  | "brush"
  | "eraser"
  | "polygon"
  | "superpixel_click"
  | "pan_zoom";

export type Polarity = "positive" | "negative";

/** Label raster values: 0 unlabeled, 1 negative, 2 positive. */
export const UNLABELED = 0;
export const NEGATIVE = 1;
export const POSITIVE = 2;

/**
 * Current editing state shared by the annotation and review surfaces.
 * Setters clamp instead of throwing so slider input can be wired directly.
 */
export class ToolState {
  tool: Tool = "brush";
  polarity: Polarity = "positive";
  private _radius = 6;
  private _opacity = 0.45;
  private _threshold = 0.5;

  get radius(): number {
    return this._radius;
  }
  set radius(px: number) {
    this._radius = Math.max(1, Math.round(px)); // radius >= 1
  }

  get opacity(): number {
    return this._opacity;
  }
  set opacity(v: number) {
    this._opacity = Math.min(1, Math.max(0, v));
  }

  get threshold(): number {
    return this._threshold;
  }
  set threshold(v: number) {
    this._threshold = Math.min(1, Math.max(0, v));
  }

  /** Raster value the active tool writes. */
  labelValue(): number {
    if (this.tool === "eraser") return UNLABELED;
    return this.polarity === "positive" ? POSITIVE : NEGATIVE;
  }
}
