/**
 * Typed client for the annotation server. This module is the only place the
 * frontend touches the network; everything else works on decoded values.
 */

export interface TileRecord {
  tile_id: string;
  width: number;
  height: number;
  n_patches: number;
  content_hash: string;
}

export interface PatchRecord {
  patch_id: string;
  tile_id: string;
  origin: [number, number];
  annotated: boolean;
}

export interface EventRecord {
  event_id: number;
  timestamp_ms: number;
  kind: string;
  tile_id: string | null;
  payload: Record<string, string>;
}

export interface JobSnapshot {
  job_id: string;
  project_id: string;
  kind: string;
  state: "queued" | "running" | "cancel_requested" | "done" | "cancelled"
    | "failed";
  progress: number;
  started_at: number | null;
  ended_at: number | null;
  result_checkpoint: string | null;
  error: string | null;
}

export interface EmbeddingPoint {
  patch_id: string;
  x: number;
  y: number;
  annotated: boolean;
}

export interface SaveResult {
  event_id: number;
  kind: string;
  pixels_changed: number;
  structures: number;
}

export interface ProjectRecord {
  name: string;
  project_id: string;
  created_at_ms: number;
  tile_ids: string[];
  superpixel: Record<string, unknown>;
  train: Record<string, unknown>;
}

export type EditKind =
  | "stroke"
  | "erase"
  | "polygon"
  | "superpixel_select"
  | "import"
  | "accept";

export class ApiError extends Error {
  constructor(
    readonly status: number,
    readonly code: string,
    message: string,
  ) {
    super(message);
  }
}

export type FetchLike = (
  url: string,
  init?: RequestInit,
) => Promise<Response>;

async function fail(res: Response): Promise<never> {
  let code = "unknown";
  let message = res.statusText;
  try {
    const body = await res.json();
    code = body.code ?? code;
    message = body.message ?? message;
  } catch {
    // non-JSON error body; keep the status text
  }
  throw new ApiError(res.status, code, message);
}

export class Client {
  private fetchFn: FetchLike;

  constructor(readonly base: string, fetchFn?: FetchLike) {
    this.fetchFn = fetchFn ?? ((url, init) => fetch(url, init));
  }

  private async json<T>(path: string, init?: RequestInit): Promise<T> {
    const res = await this.fetchFn(this.base + path, init);
    if (!res.ok) await fail(res);
    return (await res.json()) as T;
  }

  private async binary(
    path: string,
  ): Promise<{ bytes: Uint8Array; headers: Headers }> {
    const res = await this.fetchFn(this.base + path);
    if (!res.ok) await fail(res);
    return {
      bytes: new Uint8Array(await res.arrayBuffer()),
      headers: res.headers,
    };
  }

  health() {
    return this.json<{ status: string; version: string }>("/health");
  }

  presets() {
    return this.json<{ presets: Record<string, Record<string, number>> }>(
      "/presets");
  }

  createProject(name: string, opts: Record<string, unknown> = {}) {
    return this.json<ProjectRecord>("/projects", {
      method: "POST",
      headers: { "content-type": "application/json" },
      body: JSON.stringify({ name, ...opts }),
    });
  }

  project(p: string) {
    return this.json<ProjectRecord>(`/projects/${p}`);
  }

  async tiles(p: string): Promise<TileRecord[]> {
    return (await this.json<{ tiles: TileRecord[] }>(
      `/projects/${p}/tiles`)).tiles;
  }

  addTile(p: string, png: Uint8Array) {
    return this.json<TileRecord>(`/projects/${p}/tiles`, {
      method: "POST",
      headers: { "content-type": "image/png" },
      body: png as BodyInit,
    });
  }

  async tilePng(p: string, t: string): Promise<Uint8Array> {
    return (await this.binary(`/projects/${p}/tiles/${t}.png`)).bytes;
  }

  async patches(p: string): Promise<PatchRecord[]> {
    return (await this.json<{ patches: PatchRecord[] }>(
      `/projects/${p}/patches`)).patches;
  }

  async labelsPng(p: string, t: string): Promise<Uint8Array> {
    return (await this.binary(`/projects/${p}/tiles/${t}/labels`)).bytes;
  }

  saveLabels(p: string, t: string, png: Uint8Array, kind: EditKind) {
    return this.json<SaveResult>(`/projects/${p}/tiles/${t}/labels`, {
      method: "POST",
      headers: { "content-type": "image/png", "x-edit-kind": kind },
      body: png as BodyInit,
    });
  }

  async events(p: string, start?: number, end?: number) {
    const q = new URLSearchParams();
    if (start !== undefined) q.set("start", String(start));
    if (end !== undefined) q.set("end", String(end));
    const suffix = q.size ? `?${q}` : "";
    return (await this.json<{ events: EventRecord[] }>(
      `/projects/${p}/events${suffix}`)).events;
  }

  postEvent(p: string, kind: "tile_open" | "tile_close", tileId?: string) {
    return this.json<{ event_id: number; kind: string }>(
      `/projects/${p}/events`, {
        method: "POST",
        headers: { "content-type": "application/json" },
        body: JSON.stringify({ kind, tile_id: tileId }),
      });
  }

  submitJob(p: string, kind: string, params: Record<string, unknown> = {}) {
    return this.json<JobSnapshot>(`/projects/${p}/jobs`, {
      method: "POST",
      headers: { "content-type": "application/json" },
      body: JSON.stringify({ kind, params }),
    });
  }

  job(p: string, jobId: string) {
    return this.json<JobSnapshot>(`/projects/${p}/jobs/${jobId}`);
  }

  async jobs(p: string): Promise<JobSnapshot[]> {
    return (await this.json<{ jobs: JobSnapshot[] }>(
      `/projects/${p}/jobs`)).jobs;
  }

  cancelJob(p: string, jobId: string) {
    return this.json<JobSnapshot>(`/projects/${p}/jobs/${jobId}`, {
      method: "DELETE",
    });
  }

  async embedding(p: string): Promise<EmbeddingPoint[]> {
    return (await this.json<{ points: EmbeddingPoint[] }>(
      `/projects/${p}/embedding`)).points;
  }

  async suggest(p: string, n: number): Promise<string[]> {
    return (await this.json<{ patch_ids: string[] }>(
      `/projects/${p}/embedding/suggest`, {
        method: "POST",
        headers: { "content-type": "application/json" },
        body: JSON.stringify({ n }),
      })).patch_ids;
  }

  async superpixels(p: string, t: string, mode: "intensity" | "dl" =
    "intensity") {
    const { bytes, headers } = await this.binary(
      `/projects/${p}/tiles/${t}/superpixels?mode=${mode}`);
    return {
      png: bytes,
      numRegions: Number(headers.get("x-num-regions") ?? 0),
      sourceCheckpoint: headers.get("x-source-checkpoint") ?? "-",
    };
  }

  async region(p: string, t: string, x: number, y: number,
               mode: "intensity" | "dl" = "intensity") {
    const { bytes, headers } = await this.binary(
      `/projects/${p}/tiles/${t}/superpixels/region?x=${x}&y=${y}` +
      `&mode=${mode}`);
    return { maskPng: bytes, region: Number(headers.get("x-region") ?? -1) };
  }

  async prediction(p: string, t: string, threshold: number,
                   kind: "mask" | "probability" = "mask") {
    const { bytes } = await this.binary(
      `/projects/${p}/tiles/${t}/prediction?threshold=${threshold}` +
      `&kind=${kind}`);
    return bytes;
  }

  importPrediction(p: string, t: string, threshold: number) {
    return this.json<{ event_id: number; pixels_changed: number }>(
      `/projects/${p}/tiles/${t}/prediction/import`, {
        method: "POST",
        headers: { "content-type": "application/json" },
        body: JSON.stringify({ threshold }),
      });
  }

  metrics(p: string) {
    return this.json<Record<string, unknown>>(`/projects/${p}/metrics`);
  }
}
