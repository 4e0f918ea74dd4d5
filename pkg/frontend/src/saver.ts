/**
 * Save pipeline for label rasters: one request in flight per tile, queued
 * saves coalesce to the latest state, and a save never silently overwrites
 * another client's edits.
 */
import { Client, EditKind, SaveResult } from "./api.js";
import { LabelRaster } from "./labels.js";

export interface SaveOutcome {
  result: SaveResult | null;
  /** set when the server had labels differing from our baseline */
  conflict: LabelRaster | null;
}

type Pending = {
  raster: LabelRaster;
  kind: EditKind;
  resolvers: Array<(o: SaveOutcome) => void>;
  rejecters: Array<(e: unknown) => void>;
};

export class LabelSaver {
  /** label state the server is known to hold, per tile */
  private baseline = new Map<string, LabelRaster>();
  private inflight = new Set<string>();
  private pending = new Map<string, Pending>();

  constructor(private client: Client, private project: string) {}

  /** Record what the server currently holds (after a load or reload). */
  setBaseline(tileId: string, raster: LabelRaster): void {
    this.baseline.set(tileId, raster.clone());
  }

  baselineOf(tileId: string): LabelRaster | undefined {
    return this.baseline.get(tileId);
  }

  /**
   * Save `raster` for a tile. While a save is in flight further calls stack
   * into one pending slot that keeps only the newest raster; every caller's
   * promise resolves with the outcome of the save that actually carried
   * their state (the coalesced one).
   */
  save(tileId: string, raster: LabelRaster,
       kind: EditKind): Promise<SaveOutcome> {
    return new Promise((resolve, reject) => {
      const slot = this.pending.get(tileId);
      if (slot) {
        slot.raster = raster.clone();
        slot.kind = kind;
        slot.resolvers.push(resolve);
        slot.rejecters.push(reject);
      } else {
        this.pending.set(tileId, {
          raster: raster.clone(),
          kind,
          resolvers: [resolve],
          rejecters: [reject],
        });
      }
      if (!this.inflight.has(tileId)) void this.pump(tileId);
    });
  }

  private async pump(tileId: string): Promise<void> {
    const slot = this.pending.get(tileId);
    if (!slot) return;
    this.pending.delete(tileId);
    this.inflight.add(tileId);
    try {
      const outcome = await this.push(tileId, slot.raster, slot.kind);
      for (const r of slot.resolvers) r(outcome);
    } catch (e) {
      for (const r of slot.rejecters) r(e);
    } finally {
      this.inflight.delete(tileId);
      if (this.pending.has(tileId)) void this.pump(tileId);
    }
  }

  private async push(tileId: string, raster: LabelRaster,
                     kind: EditKind): Promise<SaveOutcome> {
    const base = this.baseline.get(tileId);
    if (base) {
      // stale check: another client may have written since we loaded
      const current = LabelRaster.fromGrayPng(
        await this.client.labelsPng(this.project, tileId));
      if (!current.equals(base)) {
        return { result: null, conflict: current };
      }
    }
    const result = await this.client.saveLabels(
      this.project, tileId, raster.toGrayPng(), kind);
    this.baseline.set(tileId, raster.clone());
    return { result, conflict: null };
  }
}
