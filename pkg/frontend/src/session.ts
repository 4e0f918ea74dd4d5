/**
 * Scripted end-to-end session against a live server. Drives the same code
 * paths the interactive surfaces use (LabelRaster, LabelSaver, EmbeddingView,
 * ReviewFlow) and verifies the round-trip contracts:
 *
 *   - draw a stroke, save, reload: canvas and server label images identical
 *   - superpixel click fill equals the server's region mask
 *   - importing the prediction never touches user-drawn pixels
 *   - all of the above while a training job is running
 *
 * Used by the vitest acceptance test and by `npm run session` against any
 * running server.
 */
import { Client } from "./api.js";
import { LabelRaster } from "./labels.js";
import { decodePng, encodePng } from "./png.js";
import { ReviewFlow } from "./review.js";
import { LabelSaver } from "./saver.js";
import { EmbeddingView } from "./scatter.js";
import { NEGATIVE, POSITIVE } from "./tools.js";

export interface Check {
  name: string;
  ok: boolean;
  detail: string;
}

export interface SessionReport {
  ok: boolean;
  checks: Check[];
}

function mulberry32(seed: number): () => number {
  let a = seed >>> 0;
  return () => {
    a = (a + 0x6d2b79f5) >>> 0;
    let t = a;
    t = Math.imul(t ^ (t >>> 15), t | 1);
    t ^= t + Math.imul(t ^ (t >>> 7), t | 61);
    return ((t ^ (t >>> 14)) >>> 0) / 4294967296;
  };
}

interface Disk {
  cx: number;
  cy: number;
  r: number;
}

/** Dark disks on a noisy light background, like stained structures. */
function makeTile(seed: number, size = 256): { png: Uint8Array; disks: Disk[] } {
  const rng = mulberry32(seed);
  const data = new Uint8Array(size * size * 3);
  for (let i = 0; i < size * size; i++) {
    data[3 * i] = 195 + Math.floor(rng() * 30);
    data[3 * i + 1] = 160 + Math.floor(rng() * 30);
    data[3 * i + 2] = 185 + Math.floor(rng() * 30);
  }
  const disks: Disk[] = [];
  const n = 7 + Math.floor(rng() * 4);
  for (let k = 0; k < n; k++) {
    const r = 10 + Math.floor(rng() * 9);
    const cx = r + 2 + rng() * (size - 2 * r - 4);
    const cy = r + 2 + rng() * (size - 2 * r - 4);
    disks.push({ cx, cy, r });
    for (let y = Math.floor(cy - r); y <= Math.ceil(cy + r); y++) {
      for (let x = Math.floor(cx - r); x <= Math.ceil(cx + r); x++) {
        const dx = x + 0.5 - cx;
        const dy = y + 0.5 - cy;
        if (dx * dx + dy * dy <= r * r) {
          const i = y * size + x;
          data[3 * i] = 75 + Math.floor(rng() * 20);
          data[3 * i + 1] = 35 + Math.floor(rng() * 20);
          data[3 * i + 2] = 90 + Math.floor(rng() * 20);
        }
      }
    }
  }
  return { png: encodePng({ width: size, height: size, channels: 3, data }),
           disks };
}

async function waitJob(client: Client, project: string, jobId: string,
                       timeoutMs = 180_000) {
  const t0 = Date.now();
  for (;;) {
    const snap = await client.job(project, jobId);
    if (["done", "failed", "cancelled"].includes(snap.state)) return snap;
    if (Date.now() - t0 > timeoutMs) {
      throw new Error(`job ${jobId} still ${snap.state} after ${timeoutMs}ms`);
    }
    await new Promise((r) => setTimeout(r, 150));
  }
}

export async function runScriptedSession(base: string,
                                         log: (line: string) => void =
                                           () => {}): Promise<SessionReport> {
  const client = new Client(base);
  const checks: Check[] = [];
  const check = (name: string, ok: boolean, detail = "") => {
    checks.push({ name, ok, detail });
    log(`${ok ? "ok " : "FAIL"} ${name}${detail ? ` (${detail})` : ""}`);
  };

  await client.health();
  const project = `ui-${Date.now() % 100000}`;
  await client.createProject(project, { preset: "nuclei" });
  const saver = new LabelSaver(client, project);

  // two synthetic tiles; the generator tells us where the structures are
  const t0 = makeTile(11);
  const t1 = makeTile(22);
  const rec0 = await client.addTile(project, t0.png);
  const rec1 = await client.addTile(project, t1.png);

  // ---- annotate the first tile from its known geometry (setup labels)
  await client.postEvent(project, "tile_open", rec0.tile_id);
  const full = new LabelRaster(rec0.width, rec0.height);
  full.fillPolygon([
    { x: 0, y: 0 }, { x: rec0.width, y: 0 },
    { x: rec0.width, y: rec0.height }, { x: 0, y: rec0.height },
  ], NEGATIVE);
  for (const d of t0.disks) full.stampDisk(d.cx, d.cy, d.r, POSITIVE);
  saver.setBaseline(rec0.tile_id, LabelRaster.fromGrayPng(
    await client.labelsPng(project, rec0.tile_id)));
  const saved = await saver.save(rec0.tile_id, full, "stroke");
  check("seed labels saved", saved.result !== null,
        `${saved.result?.pixels_changed ?? 0} px`);
  await client.postEvent(project, "tile_close", rec0.tile_id);

  // ---- train a small model so predictions exist
  let job = await client.submitJob(project, "pretrain",
    { depth: 2, base_channels: 2, epochs: 4, seed: 0 });
  const pre = await waitJob(client, project, job.job_id);
  check("pretrain job done", pre.state === "done", pre.error ?? "");

  job = await client.submitJob(project, "finetune",
    { epochs: 30, seed: 0, edgeweight: 2 });
  const fin = await waitJob(client, project, job.job_id);
  check("finetune job done", fin.state === "done",
        fin.result_checkpoint ?? "");

  // ---- embedding: server suggestions drive the highlight set
  job = await client.submitJob(project, "embed", {});
  const emb = await waitJob(client, project, job.job_id);
  check("embed job done", emb.state === "done", emb.error ?? "");
  const view = new EmbeddingView(800, 600);
  view.setPoints(await client.embedding(project));
  const suggested = await view.requestSuggestions(client, project, 1);
  check("suggestions highlighted verbatim",
        suggested.length === 1 && view.suggested.has(suggested[0]) &&
        view.suggested.size === 1, suggested.join(","));

  // ---- long-running training job; every edit below happens under it
  const long = await client.submitJob(project, "finetune",
    { epochs: 5000, seed: 1, edgeweight: 2 });

  try {
    await client.postEvent(project, "tile_open", rec1.tile_id);
    const canvas = LabelRaster.fromGrayPng(
      await client.labelsPng(project, rec1.tile_id));
    saver.setBaseline(rec1.tile_id, canvas);

    // stroke round-trip
    canvas.stroke([
      { x: 40, y: 40 }, { x: 80, y: 62 }, { x: 120, y: 44 },
    ], 5, POSITIVE);
    canvas.stroke([{ x: 180, y: 180 }, { x: 205, y: 200 }], 8, NEGATIVE);
    const strokeSave = await saver.save(rec1.tile_id, canvas, "stroke");
    let reload = LabelRaster.fromGrayPng(
      await client.labelsPng(project, rec1.tile_id));
    check("stroke save/reload bit-identical",
          strokeSave.result !== null && reload.equals(canvas),
          `${strokeSave.result?.pixels_changed ?? 0} px saved`);

    // superpixel click fill vs the server's own region mask
    const click = { x: 64, y: 200 };
    const { maskPng, region } = await client.region(
      project, rec1.tile_id, click.x, click.y);
    const before = canvas.clone();
    const filled = canvas.fillRegion(maskPng, POSITIVE);
    const mask = decodePng(maskPng);
    const sp = await client.superpixels(project, rec1.tile_id);
    const map = decodePng(sp.png);
    let maskMatches = map.width === mask.width && map.height === mask.height;
    let maskCount = 0;
    for (let i = 0; i < map.data.length && maskMatches; i++) {
      const inRegion = map.data[i] === region;
      if (inRegion) maskCount++;
      if (inRegion !== (mask.data[i] !== 0)) maskMatches = false;
      const changed = canvas.data[i] !== before.data[i];
      if (changed && !inRegion) maskMatches = false;
      if (inRegion && canvas.data[i] !== POSITIVE) maskMatches = false;
    }
    check("superpixel click equals server region mask",
          maskMatches && filled === maskCount,
          `region ${region}, ${filled} px`);
    const spSave = await saver.save(rec1.tile_id, canvas, "superpixel_select");
    reload = LabelRaster.fromGrayPng(
      await client.labelsPng(project, rec1.tile_id));
    check("superpixel save/reload bit-identical",
          spSave.result !== null && reload.equals(canvas), "");

    // import a prediction; user pixels must come through untouched
    const review = new ReviewFlow(client, project, saver, 0.5);
    await review.open(rec1);
    check("prediction available during training", !review.degraded,
          `${review.positiveCount} positive px at 0.5`);
    const userPixels = reload;
    const imported = await review.importPrediction();
    const after = review.labels!;
    let preserved = true;
    let userCount = 0;
    for (let i = 0; i < userPixels.data.length; i++) {
      if (userPixels.data[i] !== 0) {
        userCount++;
        if (after.data[i] !== userPixels.data[i]) preserved = false;
      }
    }
    check("import preserves user-drawn pixels", preserved,
          `${imported} px imported over ${userCount} user px`);
    await client.postEvent(project, "tile_close", rec1.tile_id);

    const still = await client.job(project, long.job_id);
    check("training job ran through every edit", still.state === "running",
          `state ${still.state}`);
  } finally {
    await client.cancelJob(project, long.job_id).catch(() => {});
  }
  const ended = await waitJob(client, project, long.job_id);
  check("long job cancelled cleanly",
        ended.state === "cancelled" || ended.state === "done", ended.state);

  // the event log should tell the whole story in order
  const events = await client.events(project);
  const ids = events.map((e) => e.event_id);
  const ordered = ids.every((v, i) => i === 0 || v > ids[i - 1]);
  const kinds = new Set(events.map((e) => e.kind));
  check("event log ordered and complete",
        ordered && kinds.has("stroke") && kinds.has("superpixel_select") &&
        kinds.has("import_prediction") && kinds.has("train_start"),
        `${events.length} events`);

  return { ok: checks.every((c) => c.ok), checks };
}
