/**
 * Browser shell: wires the embedding, annotation, and review surfaces to the
 * models in scatter.ts / labels.ts / review.ts. All pixel math lives in those
 * modules; this file is DOM plumbing and canvas blitting only.
 */
import { ApiError, Client, JobSnapshot, TileRecord } from "./api.js";
import { Pt } from "./geom.js";
import { LabelRaster } from "./labels.js";
import { labelOverlayRgba, maskOverlayRgba, regionEdges } from "./overlay.js";
import { decodePng } from "./png.js";
import { JobPoller, ReviewFlow } from "./review.js";
import { LabelSaver } from "./saver.js";
import { EmbeddingView } from "./scatter.js";
import { ToolState } from "./tools.js";

const $ = <T extends HTMLElement>(id: string): T =>
  document.getElementById(id) as T;

const apiBase = new URLSearchParams(location.search).get("api") ?? "";
const client = new Client(apiBase);
const tools = new ToolState();

let project = "";
let saver: LabelSaver | null = null;
let review: ReviewFlow | null = null;
let poller: JobPoller | null = null;

// ------------------------------------------------------------- tab switching

for (const btn of document.querySelectorAll<HTMLButtonElement>("nav button")) {
  btn.addEventListener("click", () => {
    document.querySelectorAll("nav button").forEach(
      (b) => b.classList.remove("active"));
    document.querySelectorAll("main section").forEach(
      (s) => s.classList.remove("active"));
    btn.classList.add("active");
    $(`tab-${btn.dataset.tab}`).classList.add("active");
    if (btn.dataset.tab === "review") void openReview();
  });
}

function switchTab(name: string): void {
  document.querySelector<HTMLButtonElement>(
    `nav button[data-tab="${name}"]`)?.click();
}

// ---------------------------------------------------------------- projects

async function refreshProjects(): Promise<void> {
  const res = await fetch(`${apiBase}/projects`);
  const names: string[] = (await res.json()).projects;
  const sel = $<HTMLSelectElement>("project-select");
  sel.innerHTML = "";
  for (const n of names) {
    const opt = document.createElement("option");
    opt.value = opt.textContent = n;
    sel.appendChild(opt);
  }
  if (!project && names.length) await openProject(names[0]);
  else if (project) sel.value = project;
}

async function refreshPresets(): Promise<void> {
  const { presets } = await client.presets();
  const sel = $<HTMLSelectElement>("preset-select");
  sel.innerHTML = "<option value=''>no preset</option>";
  for (const name of Object.keys(presets)) {
    const opt = document.createElement("option");
    opt.value = opt.textContent = name;
    sel.appendChild(opt);
  }
}

async function openProject(name: string): Promise<void> {
  project = name;
  $<HTMLSelectElement>("project-select").value = name;
  saver = new LabelSaver(client, project);
  review = new ReviewFlow(client, project, saver, tools.threshold);
  poller?.stop();
  poller = new JobPoller(client, project, renderJobs);
  poller.start();
  await refreshTiles();
  await loadEmbedding();
}

$("project-create").addEventListener("click", async () => {
  const name = $<HTMLInputElement>("project-name").value.trim();
  if (!name) return;
  const preset = $<HTMLSelectElement>("preset-select").value;
  await client.createProject(name, preset ? { preset } : {});
  await refreshProjects();
  await openProject(name);
});

$("project-select").addEventListener("change", (e) => {
  void openProject((e.target as HTMLSelectElement).value);
});

function renderJobs(jobs: JobSnapshot[]): void {
  const active = jobs.filter(
    (j) => j.state === "running" || j.state === "queued");
  $("job-status").textContent = active.length
    ? active.map(
        (j) => `${j.kind} ${(j.progress * 100).toFixed(0)}%`).join(", ")
    : "no jobs";
}

// the trainer lane holds one job at a time: surface "busy" instead of queueing
function trainButton(id: string, kind: "pretrain" | "finetune"): void {
  $(id).addEventListener("click", async () => {
    if (!project) return;
    try {
      await client.submitJob(project, kind, {});
    } catch (e) {
      if (e instanceof ApiError) {
        $("job-status").textContent =
          e.code === "busy" ? "trainer busy" : e.message;
        return;
      }
      throw e;
    }
  });
}
trainButton("pretrain-btn", "pretrain");
trainButton("finetune-btn", "finetune");

// ---------------------------------------------------------------- embedding

const embedView = new EmbeddingView(860, 620);
const embedCanvas = $<HTMLCanvasElement>("embed-canvas");
let lassoPath: Pt[] = [];
let lassoActive = false;

async function loadEmbedding(): Promise<void> {
  try {
    embedView.setPoints(await client.embedding(project));
    $("embed-hint").textContent =
      `${embedView.points.length} patches; lasso: drag, click to open`;
  } catch (e) {
    if (e instanceof ApiError && e.code === "embedding_not_found") {
      embedView.setPoints([]);
      $("embed-hint").textContent =
        "no embedding yet: press “compute embedding”";
    } else throw e;
  }
  drawEmbedding();
}

function drawEmbedding(): void {
  const ctx = embedCanvas.getContext("2d")!;
  ctx.clearRect(0, 0, embedCanvas.width, embedCanvas.height);
  for (const p of embedView.screenPoints()) {
    ctx.beginPath();
    ctx.arc(p.sx, p.sy, p.selected ? 5 : 3.5, 0, 2 * Math.PI);
    ctx.fillStyle = p.annotated ? "#2e9e44" : "#8a8496";
    ctx.fill();
    if (p.suggested) {
      ctx.beginPath();
      ctx.arc(p.sx, p.sy, 7, 0, 2 * Math.PI);
      ctx.strokeStyle = "#ff8c00";
      ctx.lineWidth = 2;
      ctx.stroke();
    }
    if (p.selected) {
      ctx.strokeStyle = "#c400c4";
      ctx.lineWidth = 1.5;
      ctx.stroke();
    }
  }
  if (lassoPath.length > 1) {
    ctx.beginPath();
    ctx.moveTo(lassoPath[0].x, lassoPath[0].y);
    for (const p of lassoPath.slice(1)) ctx.lineTo(p.x, p.y);
    ctx.strokeStyle = "#c400c4";
    ctx.setLineDash([4, 3]);
    ctx.stroke();
    ctx.setLineDash([]);
  }
}

function canvasPos(canvas: HTMLCanvasElement, ev: PointerEvent): Pt {
  const r = canvas.getBoundingClientRect();
  return { x: ev.clientX - r.left, y: ev.clientY - r.top };
}

embedCanvas.addEventListener("pointerdown", (ev) => {
  lassoActive = true;
  lassoPath = [canvasPos(embedCanvas, ev)];
});
embedCanvas.addEventListener("pointermove", (ev) => {
  if (!lassoActive) return;
  lassoPath.push(canvasPos(embedCanvas, ev));
  drawEmbedding();
});
embedCanvas.addEventListener("pointerup", async (ev) => {
  lassoActive = false;
  const pos = canvasPos(embedCanvas, ev);
  if (lassoPath.length < 8) {
    // treat as a click: open the patch under the cursor
    const id = embedView.hit(pos.x, pos.y);
    lassoPath = [];
    drawEmbedding();
    if (id) {
      const tileId = id.split("-p")[0];
      switchTab("annotate");
      await openTile(tileId);
    }
    return;
  }
  embedView.lasso(lassoPath);
  lassoPath = [];
  drawEmbedding();
});

$("embed-run").addEventListener("click", async () => {
  if (!project) return;
  const job = await client.submitJob(project, "embed", {});
  const wait = setInterval(async () => {
    const snap = await client.job(project, job.job_id);
    if (["done", "failed", "cancelled"].includes(snap.state)) {
      clearInterval(wait);
      await loadEmbedding();
    }
  }, 1000);
});

$("suggest-btn").addEventListener("click", async () => {
  if (!project || !embedView.points.length) return;
  const n = Number($<HTMLInputElement>("suggest-n").value) || 1;
  try {
    await embedView.requestSuggestions(client, project, n);
  } catch (e) {
    if (e instanceof ApiError) {
      $("embed-hint").textContent = e.message;
      return;
    }
    throw e;
  }
  drawEmbedding();
});

// ----------------------------------------------------------------- annotate

const annotCanvas = $<HTMLCanvasElement>("annot-canvas");
let currentTile: TileRecord | null = null;
let tileImage: HTMLCanvasElement | null = null; // decoded tile as a bitmap
let canvasLabels: LabelRaster | null = null;
let spLabels: Uint16Array | null = null;
let spEdgeMask: Uint8Array | null = null;
// view transform: screen = world * zoom + pan
let zoom = 1;
let pan: Pt = { x: 0, y: 0 };
let strokePts: Pt[] = [];
let polygonPts: Pt[] = [];
let drawing = false;
let panning = false;
let panStart: Pt = { x: 0, y: 0 };

function toWorld(p: Pt): Pt {
  return { x: (p.x - pan.x) / zoom, y: (p.y - pan.y) / zoom };
}

function rgbaCanvas(width: number, height: number,
                    rgba: Uint8ClampedArray): HTMLCanvasElement {
  const c = document.createElement("canvas");
  c.width = width;
  c.height = height;
  // copy pins the buffer type to ArrayBuffer, which ImageData requires
  c.getContext("2d")!.putImageData(
    new ImageData(Uint8ClampedArray.from(rgba), width, height), 0, 0);
  return c;
}

function tileToBitmap(png: Uint8Array): HTMLCanvasElement {
  const img = decodePng(png);
  const rgba = new Uint8ClampedArray(img.width * img.height * 4);
  const ch = img.channels;
  for (let i = 0; i < img.width * img.height; i++) {
    rgba[4 * i] = Number(img.data[ch * i]);
    rgba[4 * i + 1] = Number(img.data[ch * i + (ch > 1 ? 1 : 0)]);
    rgba[4 * i + 2] = Number(img.data[ch * i + (ch > 1 ? 2 : 0)]);
    rgba[4 * i + 3] = ch === 4 ? Number(img.data[4 * i + 3]) : 255;
  }
  return rgbaCanvas(img.width, img.height, rgba);
}

async function refreshTiles(): Promise<void> {
  const tiles = await client.tiles(project);
  const list = $("tile-list");
  list.innerHTML = "";
  for (const t of tiles) {
    const btn = document.createElement("button");
    btn.textContent = t.tile_id;
    if (currentTile?.tile_id === t.tile_id) btn.classList.add("current");
    btn.addEventListener("click", () => void openTile(t.tile_id));
    list.appendChild(btn);
  }
  if (!currentTile && tiles.length) await openTile(tiles[0].tile_id);
}

async function openTile(tileId: string): Promise<void> {
  const tiles = await client.tiles(project);
  const rec = tiles.find((t) => t.tile_id === tileId);
  if (!rec || !saver) return;
  if (currentTile) {
    await client.postEvent(project, "tile_close", currentTile.tile_id)
      .catch(() => {});
  }
  currentTile = rec;
  await client.postEvent(project, "tile_open", tileId).catch(() => {});
  tileImage = tileToBitmap(await client.tilePng(project, tileId));
  canvasLabels = LabelRaster.fromGrayPng(
    await client.labelsPng(project, tileId));
  saver.setBaseline(tileId, canvasLabels);
  spLabels = null;
  spEdgeMask = null;
  zoom = Math.min(annotCanvas.width / rec.width,
                  annotCanvas.height / rec.height);
  pan = { x: 0, y: 0 };
  $("conflict-bar").classList.remove("visible");
  await refreshTiles();
  drawAnnotate();
}

async function loadSuperpixels(): Promise<void> {
  const mode = $<HTMLSelectElement>("sp-mode").value as "" | "intensity" | "dl";
  if (!mode || !currentTile) {
    spLabels = null;
    spEdgeMask = null;
    drawAnnotate();
    return;
  }
  const sp = await client.superpixels(project, currentTile.tile_id, mode);
  const img = decodePng(sp.png);
  spLabels = img.data instanceof Uint16Array
    ? img.data
    : Uint16Array.from(img.data);
  spEdgeMask = regionEdges(spLabels, img.width, img.height);
  drawAnnotate();
}

$("sp-mode").addEventListener("change", () => void loadSuperpixels());

function drawAnnotate(): void {
  const ctx = annotCanvas.getContext("2d")!;
  ctx.clearRect(0, 0, annotCanvas.width, annotCanvas.height);
  if (!tileImage || !canvasLabels || !currentTile) return;
  ctx.save();
  ctx.translate(pan.x, pan.y);
  ctx.scale(zoom, zoom);
  ctx.imageSmoothingEnabled = zoom < 1;
  ctx.drawImage(tileImage, 0, 0);
  ctx.drawImage(rgbaCanvas(canvasLabels.width, canvasLabels.height,
                           labelOverlayRgba(canvasLabels, tools.opacity)),
                0, 0);
  if (spEdgeMask) {
    const w = canvasLabels.width;
    const h = canvasLabels.height;
    const rgba = new Uint8ClampedArray(w * h * 4);
    for (let i = 0; i < w * h; i++) {
      if (spEdgeMask[i]) {
        rgba[4 * i] = 255;
        rgba[4 * i + 1] = 230;
        rgba[4 * i + 2] = 0;
        rgba[4 * i + 3] = 140;
      }
    }
    ctx.drawImage(rgbaCanvas(w, h, rgba), 0, 0);
  }
  if (polygonPts.length) {
    ctx.beginPath();
    ctx.moveTo(polygonPts[0].x, polygonPts[0].y);
    for (const p of polygonPts.slice(1)) ctx.lineTo(p.x, p.y);
    ctx.strokeStyle = "#c400c4";
    ctx.lineWidth = 1 / zoom;
    ctx.stroke();
  }
  ctx.restore();
}

function setSaveState(text: string): void {
  $("save-state").textContent = text;
}

async function saveLabels(kind: "stroke" | "erase" | "polygon" |
                          "superpixel_select"): Promise<void> {
  if (!currentTile || !canvasLabels || !saver) return;
  setSaveState("saving…");
  const out = await saver.save(currentTile.tile_id, canvasLabels, kind);
  if (out.conflict) {
    $("conflict-bar").classList.add("visible");
    setSaveState("conflict: not saved");
    return;
  }
  setSaveState(`saved (${out.result!.pixels_changed} px)`);
}

$("conflict-reload").addEventListener("click", async () => {
  if (!currentTile) return;
  await openTile(currentTile.tile_id);
});

annotCanvas.addEventListener("pointerdown", (ev) => {
  if (!canvasLabels) return;
  const world = toWorld(canvasPos(annotCanvas, ev));
  if (tools.tool === "pan_zoom") {
    panning = true;
    panStart = { x: ev.clientX - pan.x, y: ev.clientY - pan.y };
    return;
  }
  if (tools.tool === "brush" || tools.tool === "eraser") {
    drawing = true;
    strokePts = [world];
    canvasLabels.stampDisk(world.x, world.y, tools.radius, tools.labelValue());
    drawAnnotate();
  } else if (tools.tool === "polygon") {
    polygonPts.push(world);
    drawAnnotate();
  } else if (tools.tool === "superpixel_click") {
    void superpixelClick(world);
  }
});

annotCanvas.addEventListener("pointermove", (ev) => {
  if (panning) {
    pan = { x: ev.clientX - panStart.x, y: ev.clientY - panStart.y };
    drawAnnotate();
    return;
  }
  if (!drawing || !canvasLabels) return;
  const world = toWorld(canvasPos(annotCanvas, ev));
  const last = strokePts[strokePts.length - 1];
  canvasLabels.stroke([last, world], tools.radius, tools.labelValue());
  strokePts.push(world);
  drawAnnotate();
});

annotCanvas.addEventListener("pointerup", () => {
  if (panning) {
    panning = false;
    return;
  }
  if (drawing) {
    drawing = false;
    strokePts = [];
    void saveLabels(tools.tool === "eraser" ? "erase" : "stroke");
  }
});

annotCanvas.addEventListener("dblclick", () => {
  if (tools.tool !== "polygon" || polygonPts.length < 3 || !canvasLabels) {
    polygonPts = [];
    return;
  }
  canvasLabels.fillPolygon(polygonPts, tools.labelValue());
  polygonPts = [];
  drawAnnotate();
  void saveLabels("polygon");
});

annotCanvas.addEventListener("wheel", (ev) => {
  ev.preventDefault();
  const pos = canvasPos(annotCanvas, ev as unknown as PointerEvent);
  const factor = ev.deltaY < 0 ? 1.15 : 1 / 1.15;
  // zoom about the cursor
  pan = {
    x: pos.x - (pos.x - pan.x) * factor,
    y: pos.y - (pos.y - pan.y) * factor,
  };
  zoom *= factor;
  drawAnnotate();
}, { passive: false });

async function superpixelClick(world: Pt): Promise<void> {
  if (!currentTile || !canvasLabels) return;
  const x = Math.floor(world.x);
  const y = Math.floor(world.y);
  if (x < 0 || y < 0 || x >= canvasLabels.width ||
      y >= canvasLabels.height) return;
  const mode = $<HTMLSelectElement>("sp-mode").value || "intensity";
  const { maskPng } = await client.region(
    project, currentTile.tile_id, x, y, mode as "intensity" | "dl");
  canvasLabels.fillRegion(maskPng, tools.labelValue());
  drawAnnotate();
  await saveLabels("superpixel_select");
}

$("save-btn").addEventListener("click", () => void saveLabels("stroke"));

$("tool-select").addEventListener("change", (e) => {
  tools.tool = (e.target as HTMLSelectElement).value as typeof tools.tool;
  polygonPts = [];
});
$("polarity-select").addEventListener("change", (e) => {
  tools.polarity =
    (e.target as HTMLSelectElement).value as typeof tools.polarity;
});
$("radius-range").addEventListener("input", (e) => {
  tools.radius = Number((e.target as HTMLInputElement).value);
  $("radius-out").textContent = String(tools.radius);
});
$("opacity-range").addEventListener("input", (e) => {
  tools.opacity = Number((e.target as HTMLInputElement).value) / 100;
  drawAnnotate();
  drawReview();
});

// ------------------------------------------------------------------- review

const reviewCanvas = $<HTMLCanvasElement>("review-canvas");

async function openReview(): Promise<void> {
  if (!review || !currentTile) return;
  review.threshold = tools.threshold;
  await review.open(currentTile);
  $("review-state").textContent = review.degraded
    ? "no fine-tuned model yet: manual tools only"
    : "";
  $("positive-count").textContent =
    review.degraded ? "" : `${review.positiveCount} px positive`;
  drawReview();
}

function drawReview(): void {
  const ctx = reviewCanvas.getContext("2d")!;
  ctx.clearRect(0, 0, reviewCanvas.width, reviewCanvas.height);
  if (!tileImage || !review?.labels) return;
  const scale = Math.min(reviewCanvas.width / review.labels.width,
                         reviewCanvas.height / review.labels.height);
  ctx.save();
  ctx.scale(scale, scale);
  ctx.drawImage(tileImage, 0, 0);
  ctx.drawImage(rgbaCanvas(review.labels.width, review.labels.height,
                           labelOverlayRgba(review.labels, tools.opacity)),
                0, 0);
  if (review.maskPng) {
    const img = decodePng(review.maskPng);
    ctx.drawImage(rgbaCanvas(img.width, img.height,
                             maskOverlayRgba(review.maskPng,
                                             tools.opacity * 0.7)),
                  0, 0);
  }
  ctx.restore();
}

$("threshold-range").addEventListener("change", async (e) => {
  tools.threshold = Number((e.target as HTMLInputElement).value) / 100;
  $("threshold-out").textContent = tools.threshold.toFixed(2);
  if (!review) return;
  await review.setThreshold(tools.threshold);
  $("positive-count").textContent =
    review.degraded ? "" : `${review.positiveCount} px positive`;
  drawReview();
});

$("import-btn").addEventListener("click", async () => {
  if (!review || review.degraded) return;
  const changed = await review.importPrediction();
  $("review-state").textContent = `imported ${changed} px`;
  if (review.labels && currentTile) {
    canvasLabels = review.labels.clone();
  }
  drawReview();
  drawAnnotate();
});

$("accept-btn").addEventListener("click", async () => {
  if (!review) return;
  const next = await review.acceptTile();
  $("review-state").textContent = next
    ? `accepted; next: ${next.tile_id}`
    : "accepted; nothing left unannotated";
  if (next) {
    await openTile(next.tile_id);
    await openReview();
  }
});

// --------------------------------------------------------------------- boot

void (async () => {
  await refreshPresets().catch(() => {});
  await refreshProjects().catch((e) => {
    $("job-status").textContent = `server unreachable: ${e}`;
  });
})();
