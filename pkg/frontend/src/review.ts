/**
 * Prediction review state: threshold-driven mask display, import, accept,
 * and the 1 s training-status poll. Nothing here blocks editing; the poll
 * only updates a status line.
 */
import { ApiError, Client, JobSnapshot, TileRecord } from "./api.js";
import { LabelRaster } from "./labels.js";
import { countPositive } from "./overlay.js";
import { LabelSaver } from "./saver.js";

export class ReviewFlow {
  tile: TileRecord | null = null;
  labels: LabelRaster | null = null;
  maskPng: Uint8Array | null = null;
  /** positive pixels at the current threshold, per the server mask */
  positiveCount = 0;
  /** true when no usable checkpoint exists; manual tools only */
  degraded = false;

  constructor(private client: Client, private project: string,
              private saver: LabelSaver, public threshold = 0.5) {}

  async open(tile: TileRecord): Promise<void> {
    this.tile = tile;
    this.labels = LabelRaster.fromGrayPng(
      await this.client.labelsPng(this.project, tile.tile_id));
    this.saver.setBaseline(tile.tile_id, this.labels);
    await this.refreshMask();
  }

  /** Re-request the server mask; called on open and on slider change. */
  async refreshMask(): Promise<void> {
    if (!this.tile) return;
    try {
      this.maskPng = await this.client.prediction(
        this.project, this.tile.tile_id, this.threshold);
      this.positiveCount = countPositive(this.maskPng);
      this.degraded = false;
    } catch (e) {
      if (e instanceof ApiError &&
          (e.code === "checkpoint_not_found" || e.code === "checkpoint_stage")) {
        this.maskPng = null;
        this.positiveCount = 0;
        this.degraded = true;
        return;
      }
      throw e;
    }
  }

  async setThreshold(v: number): Promise<void> {
    this.threshold = Math.min(1, Math.max(0, v));
    await this.refreshMask();
  }

  /**
   * Merge the current prediction into the labels server-side, then reload
   * so the canvas shows exactly what the server stored. User-drawn pixels
   * survive the merge; that is the server's contract, the client just never
   * merges locally.
   */
  async importPrediction(): Promise<number> {
    if (!this.tile || this.degraded) return 0;
    const r = await this.client.importPrediction(
      this.project, this.tile.tile_id, this.threshold);
    this.labels = LabelRaster.fromGrayPng(
      await this.client.labelsPng(this.project, this.tile.tile_id));
    this.saver.setBaseline(this.tile.tile_id, this.labels);
    return r.pixels_changed;
  }

  /**
   * Accept the tile as reviewed: posts the labels under the accept edit
   * kind (one accept_tile event) and returns the next tile without any
   * annotation, or null when everything has been touched.
   */
  async acceptTile(): Promise<TileRecord | null> {
    if (!this.tile || !this.labels) return null;
    await this.saver.save(this.tile.tile_id, this.labels, "accept");
    const done = this.tile.tile_id;
    const patches = await this.client.patches(this.project);
    const touched = new Set(
      patches.filter((p) => p.annotated).map((p) => p.tile_id));
    const tiles = await this.client.tiles(this.project);
    return tiles.find((t) => t.tile_id !== done && !touched.has(t.tile_id))
      ?? null;
  }
}

/** Polls one project's jobs until stopped. Fixed 1 s cadence. */
export class JobPoller {
  private timer: ReturnType<typeof setInterval> | null = null;
  latest: JobSnapshot[] = [];

  constructor(private client: Client, private project: string,
              private onUpdate: (jobs: JobSnapshot[]) => void,
              private intervalMs = 1000) {}

  start(): void {
    if (this.timer) return;
    this.timer = setInterval(() => void this.tick(), this.intervalMs);
  }

  private async tick(): Promise<void> {
    try {
      this.latest = await this.client.jobs(this.project);
      this.onUpdate(this.latest);
    } catch {
      // transient poll failures must not take the UI down
    }
  }

  stop(): void {
    if (this.timer) clearInterval(this.timer);
    this.timer = null;
  }
}
