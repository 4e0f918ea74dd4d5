/**
 * Embedding scatter model: data-to-screen projection, lasso and click
 * selection, and suggestion highlighting. Pure state, no canvas here; the
 * shell renders whatever this reports.
 */
import { Client, EmbeddingPoint } from "./api.js";
import { boundsOf, insideEvenOdd, Pt } from "./geom.js";

export interface ScreenPoint {
  patchId: string;
  sx: number;
  sy: number;
  annotated: boolean;
  suggested: boolean;
  selected: boolean;
}

export class EmbeddingView {
  points: EmbeddingPoint[] = [];
  selected = new Set<string>();
  suggested = new Set<string>();
  private scale = 1;
  private offX = 0;
  private offY = 0;

  constructor(private viewW: number, private viewH: number,
              private margin = 20) {}

  setPoints(points: EmbeddingPoint[]): void {
    this.points = points;
    this.selected.clear();
    this.suggested.clear();
    if (!points.length) return;
    const b = boundsOf(points.map((p) => ({ x: p.x, y: p.y })));
    const spanX = Math.max(b.xMax - b.xMin, 1e-9);
    const spanY = Math.max(b.yMax - b.yMin, 1e-9);
    this.scale = Math.min(
      (this.viewW - 2 * this.margin) / spanX,
      (this.viewH - 2 * this.margin) / spanY,
    );
    // center the cloud
    this.offX = this.margin +
      ((this.viewW - 2 * this.margin) - spanX * this.scale) / 2 -
      b.xMin * this.scale;
    this.offY = this.margin +
      ((this.viewH - 2 * this.margin) - spanY * this.scale) / 2 -
      b.yMin * this.scale;
  }

  toScreen(p: EmbeddingPoint): Pt {
    return { x: p.x * this.scale + this.offX, y: p.y * this.scale + this.offY };
  }

  screenPoints(): ScreenPoint[] {
    return this.points.map((p) => {
      const s = this.toScreen(p);
      return {
        patchId: p.patch_id,
        sx: s.x,
        sy: s.y,
        annotated: p.annotated,
        suggested: this.suggested.has(p.patch_id),
        selected: this.selected.has(p.patch_id),
      };
    });
  }

  /** Even-odd lasso over screen coordinates; replaces the selection. */
  lasso(polygon: Pt[]): Set<string> {
    this.selected.clear();
    if (polygon.length >= 3) {
      for (const p of this.points) {
        const s = this.toScreen(p);
        if (insideEvenOdd(s.x, s.y, polygon)) this.selected.add(p.patch_id);
      }
    }
    return this.selected;
  }

  /** Nearest point within `tol` screen pixels of a click, or null. */
  hit(sx: number, sy: number, tol = 6): string | null {
    let best: string | null = null;
    let bestD = tol * tol;
    for (const p of this.points) {
      const s = this.toScreen(p);
      const d = (s.x - sx) ** 2 + (s.y - sy) ** 2;
      if (d <= bestD) {
        bestD = d;
        best = p.patch_id;
      }
    }
    return best;
  }

  /** Ask the server for the next patches to annotate and highlight exactly
   * those. Returns the ids in server order. */
  async requestSuggestions(client: Client, project: string,
                           n: number): Promise<string[]> {
    const ids = await client.suggest(project, n);
    this.suggested = new Set(ids);
    return ids;
  }

  markAnnotated(patchId: string): void {
    const p = this.points.find((q) => q.patch_id === patchId);
    if (p) p.annotated = true;
    this.suggested.delete(patchId);
  }
}
