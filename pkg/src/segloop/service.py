"""HTTP API over the project store, training loop, and metrics.

App factory plus a blocking `serve()`. All bodies are JSON records except
raster payloads, which travel as PNG. Errors map package exceptions onto
{status, code, message} JSON bodies. Mutations take the project write lock
so the label-save-plus-event-append pair is atomic under concurrent clients.
"""
from __future__ import annotations

import io
import os
import threading
from contextlib import asynccontextmanager
from dataclasses import asdict, dataclass, field, replace

import numpy as np
from fastapi import FastAPI, Header, Query, Request, Response
from fastapi.responses import JSONResponse
from fastapi.staticfiles import StaticFiles
from PIL import Image

from . import metrics as mx
from . import store as st
from . import superpixel as sp
from .embedding import EmbeddingPoint, embed_2d, export_csv, suggest_patches
from .errors import (
    BusyError,
    CheckpointStageError,
    CorruptStoreError,
    DataError,
    DuplicateError,
    EmptySupervisionError,
    NotFoundError,
    ProjectLockedError,
    SegloopError,
    ShapeMismatchError,
)
from .loop import JobManager, TrainConfig, finetune, make_patch_pairs, pretrain
from .loop.core import predict_probabilities, import_prediction, make_patches
from .superpixel import SuperpixelConfig
from .unet import UNetConfig

VERSION = "1.0.0"

# Table S2 presets: per-structure defaults for edge weighting and superpixels
PRESETS = {
    "nuclei": {"edgeweight": 8.0, "approxcellsize": 20, "compactness": 1e-4},
    "tubules": {"edgeweight": 2.0, "approxcellsize": 80, "compactness": 1e-5},
    "epithelium": {"edgeweight": 25.0, "approxcellsize": 55,
                   "compactness": 1e-6},
}

EDIT_KINDS = {
    "stroke": "stroke",
    "erase": "erase",
    "polygon": "polygon",
    "superpixel_select": "superpixel_select",
    "import": "import_prediction",
    "accept": "accept_tile",
}

_STATUS = {
    NotFoundError: 404,
    DuplicateError: 409,
    BusyError: 409,
    CheckpointStageError: 409,
    ProjectLockedError: 423,
    CorruptStoreError: 500,
    EmptySupervisionError: 400,
    ShapeMismatchError: 400,
    DataError: 400,
}


class ApiError(SegloopError):
    """Error with an explicit HTTP status and machine code."""

    def __init__(self, status: int, code: str, message: str):
        super().__init__(message)
        self.status = status
        self.code = code


def _status_of(exc: SegloopError) -> int:
    if isinstance(exc, ApiError):
        return exc.status
    for klass, status in _STATUS.items():
        if isinstance(exc, klass):
            return status
    return 500


@dataclass
class ServiceConfig:
    bind: str = "127.0.0.1:8765"
    trainer_workers: int = 1
    aux_workers: int = 1
    frontend_dir: str | None = None
    presets: dict = field(default_factory=lambda: dict(PRESETS))


def load_config(path: str) -> ServiceConfig:
    """Key-value text: `bind=...`, `trainer_workers=...`, and preset rows
    `preset.<name>.<field>=<value>`."""
    cfg = ServiceConfig()
    cfg.presets = {k: dict(v) for k, v in PRESETS.items()}
    for raw in open(path, encoding="utf-8"):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        key, _, val = line.partition("=")
        key, val = key.strip(), val.strip()
        if key == "bind":
            cfg.bind = val
        elif key == "trainer_workers":
            cfg.trainer_workers = int(val)
        elif key == "aux_workers":
            cfg.aux_workers = int(val)
        elif key == "frontend_dir":
            cfg.frontend_dir = val
        elif key.startswith("preset."):
            _, name, leaf = key.split(".", 2)
            slot = cfg.presets.setdefault(name, {})
            slot[leaf] = int(val) if leaf == "approxcellsize" else float(val)
        else:
            raise DataError(f"unknown config key {key!r}")
    return cfg


def _png_response(arr: np.ndarray, mode: str | None = None, **headers):
    buf = io.BytesIO()
    Image.fromarray(arr, mode=mode).save(buf, format="PNG")
    return Response(content=buf.getvalue(), media_type="image/png",
                    headers={k.replace("_", "-"): str(v)
                             for k, v in headers.items()})


class AppState:
    """Open project handles, job manager, and per-process caches."""

    def __init__(self, root: str, config: ServiceConfig):
        self.root = root
        self.config = config
        self.jobs = JobManager()
        self._projects: dict[str, st.Project] = {}
        self._guard = threading.Lock()
        self.embeddings: dict[str, list[EmbeddingPoint]] = {}
        self.sp_cache: dict[tuple, sp.SuperpixelMap] = {}
        self.pred_cache: dict[tuple, tuple] = {}
        self.structure_ledger: dict[str, set] = {}

    def project(self, name: str) -> st.Project:
        with self._guard:
            if name not in self._projects:
                try:
                    self._projects[name] = st.open_project(self.root, name)
                except NotFoundError:
                    raise ApiError(404, "project_not_found",
                                   f"no project named {name!r}")
            return self._projects[name]

    def create(self, name: str, spc, trc) -> st.Project:
        with self._guard:
            proj = st.create_project(self.root, name, superpixel_config=spc,
                                     train_config=trc)
            self._projects[name] = proj
            return proj

    def close_all(self):
        with self._guard:
            for p in self._projects.values():
                p.close()
            self._projects.clear()


def _project_record(p: st.Project) -> dict:
    return {
        "name": p.name,
        "project_id": p.project_id,
        "created_at_ms": p.created_at_ms,
        "tile_ids": p.tile_ids,
        "superpixel": asdict(p.superpixel_config),
        "train": asdict(p.train_config),
    }


def _tile_record(rec: st.TileRecord) -> dict:
    return {"tile_id": rec.tile_id, "width": rec.width, "height": rec.height,
            "n_patches": rec.n_patches, "content_hash": rec.content_hash}


def _patch_annotated(labels: np.ndarray, origin, h: int, w: int) -> bool:
    ox, oy = origin
    window = labels[oy:min(oy + 256, h), ox:min(ox + 256, w)]
    return bool(window.any())


def _require_tile(p: st.Project, tile_id: str):
    try:
        return p.load_tile(tile_id)
    except NotFoundError:
        raise ApiError(404, "tile_not_found",
                       f"no tile {tile_id!r} in project {p.name!r}")


def _require_checkpoint(p: st.Project, name: str = "latest"):
    try:
        return p.load_checkpoint(name)
    except NotFoundError as e:
        raise ApiError(404, "checkpoint_not_found", str(e))


async def _json_body(request: Request) -> dict:
    try:
        body = await request.json()
    except Exception:
        raise ApiError(400, "bad_json", "request body must be JSON")
    if not isinstance(body, dict):
        raise ApiError(400, "bad_json", "request body must be a JSON object")
    return body


def create_app(root: str, config: ServiceConfig | None = None) -> FastAPI:
    config = config or ServiceConfig()
    state = AppState(root, config)

    @asynccontextmanager
    async def lifespan(app):
        yield
        state.close_all()

    app = FastAPI(title="segloop", version=VERSION, lifespan=lifespan)
    app.state.segloop = state

    @app.exception_handler(SegloopError)
    def _handle(request: Request, exc: SegloopError):
        status = _status_of(exc)
        code = exc.code if isinstance(exc, ApiError) else type(exc).code
        return JSONResponse(status_code=status, content={
            "status": status, "code": code, "message": str(exc)})

    # ------------------------------------------------------------- basics

    @app.get("/health")
    def health():
        return {"status": "ok", "version": VERSION}

    @app.get("/presets")
    def presets():
        return state.config.presets

    @app.get("/projects")
    def list_projects():
        return {"projects": st.list_projects(state.root)}

    @app.post("/projects", status_code=201)
    async def create_project(request: Request):
        body = await _json_body(request)
        name = body.get("name", "")
        preset = body.get("preset")
        spc_kw = dict(body.get("superpixel", {}))
        trc_kw = dict(body.get("train", {}))
        if preset:
            if preset not in state.config.presets:
                raise ApiError(404, "preset_not_found",
                               f"no preset named {preset!r}")
            row = state.config.presets[preset]
            spc_kw.setdefault("approxcellsize", row["approxcellsize"])
            spc_kw.setdefault("compactness", row["compactness"])
            trc_kw.setdefault("edgeweight", row["edgeweight"])
        spc = SuperpixelConfig(
            approxcellsize=int(spc_kw.get("approxcellsize", 20)),
            compactness=float(spc_kw.get("compactness", 1e-4)),
            iterations=int(spc_kw.get("iterations", 10)),
            mode=spc_kw.get("mode", "intensity")).validate()
        trc = TrainConfig(
            edgeweight=float(trc_kw.get("edgeweight", 1.0)),
            epochs=int(trc_kw.get("epochs", 1)),
            batch_size=int(trc_kw.get("batch_size", 4)),
            seed=int(trc_kw.get("seed", 0)),
            learning_rate=float(trc_kw.get("learning_rate", 1e-3))).validate()
        return _project_record(state.create(name, spc, trc))

    @app.get("/projects/{p}")
    def get_project(p: str):
        return _project_record(state.project(p))

    # -------------------------------------------------------------- tiles

    @app.get("/projects/{p}/tiles")
    def list_tiles(p: str):
        proj = state.project(p)
        return {"tiles": [_tile_record(t) for t in proj.tiles]}

    @app.post("/projects/{p}/tiles", status_code=201)
    async def add_tile(p: str, request: Request):
        proj = state.project(p)
        body = await request.body()
        with proj.write_lock:
            tile = proj.add_tile(body)
            return _tile_record(proj._tile_record(tile.tile_id))

    @app.get("/projects/{p}/tiles/{t}.png")
    def tile_png(p: str, t: str):
        proj = state.project(p)
        rec = next((r for r in proj.tiles if r.tile_id == t), None)
        if rec is None:
            raise ApiError(404, "tile_not_found", f"no tile {t!r}")
        return Response(content=open(proj._tile_path(t), "rb").read(),
                        media_type="image/png")

    @app.get("/projects/{p}/patches")
    def list_patches(p: str):
        proj = state.project(p)
        out = []
        for rec in proj.tiles:
            labels = proj.load_labelmap(rec.tile_id)
            tile = proj.load_tile(rec.tile_id)
            for patch in make_patches(tile):
                out.append({
                    "patch_id": patch.patch_id,
                    "tile_id": rec.tile_id,
                    "origin": list(patch.origin),
                    "annotated": _patch_annotated(labels, patch.origin,
                                                  rec.height, rec.width),
                })
        return {"patches": out}

    # ------------------------------------------------------------- labels

    @app.get("/projects/{p}/tiles/{t}/labels")
    def get_labels(p: str, t: str):
        proj = state.project(p)
        labels = proj.load_labelmap(t)  # zeros when never saved
        return _png_response(st.LABEL_TO_GRAY[labels], mode="L")

    @app.post("/projects/{p}/tiles/{t}/labels")
    async def post_labels(p: str, t: str, request: Request,
                          x_edit_kind: str = Header(default="stroke")):
        proj = state.project(p)
        if x_edit_kind not in EDIT_KINDS:
            raise ApiError(400, "bad_edit_kind",
                           f"X-Edit-Kind must be one of "
                           f"{sorted(EDIT_KINDS)}, got {x_edit_kind!r}")
        event_kind = EDIT_KINDS[x_edit_kind]
        body = await request.body()
        rec = proj._tile_record(t)
        with proj.write_lock:
            new = st.decode_label_png(body, (rec.height, rec.width))
            old = proj.load_labelmap(t)
            changed = int((new != old).sum())
            payload = {"pixels": changed}
            if event_kind in mx.STRUCTURE_KINDS:
                ledger = state.structure_ledger.setdefault(p, set())
                fresh = mx.new_structures(new == 2, ledger)
                ledger.update(fresh)
                payload["structures"] = len(fresh)
            proj.save_labelmap(t, new)
            ev = proj.append_event(event_kind, t, **payload)
        return {"event_id": ev.event_id, "kind": event_kind,
                "pixels_changed": changed,
                "structures": payload.get("structures", 0)}

    # ------------------------------------------------------------- events

    @app.get("/projects/{p}/events")
    def get_events(p: str, start: int | None = None, end: int | None = None):
        proj = state.project(p)
        evs = proj.read_events(start_id=start, end_id=end)
        return {"events": [{
            "event_id": e.event_id, "timestamp_ms": e.timestamp_ms,
            "kind": e.kind, "tile_id": e.tile_id, "payload": e.payload,
        } for e in evs]}

    @app.post("/projects/{p}/events", status_code=201)
    async def post_event(p: str, request: Request):
        proj = state.project(p)
        body = await _json_body(request)
        kind = body.get("kind", "")
        if kind not in ("tile_open", "tile_close"):
            raise ApiError(400, "bad_event_kind",
                           "only tile_open/tile_close may be posted directly")
        tile_id = body.get("tile_id")
        if tile_id is not None:
            proj._tile_record(tile_id)
        with proj.write_lock:
            ev = proj.append_event(kind, tile_id)
        return {"event_id": ev.event_id, "kind": ev.kind}

    # --------------------------------------------------------------- jobs

    def _run_pretrain(proj: st.Project, params: dict):
        cfg = replace(proj.train_config,
                      epochs=int(params.get("epochs", proj.train_config.epochs)),
                      batch_size=int(params.get("batch_size",
                                                proj.train_config.batch_size)),
                      seed=int(params.get("seed", proj.train_config.seed)))
        net = UNetConfig(depth=int(params.get("depth", 5)),
                         base_channels=int(params.get("base_channels", 4)),
                         out_channels=3)
        if not proj.tile_ids:
            raise DataError("project has no tiles to pretrain on")

        def run(progress, should_stop):
            patches = []
            for tid in proj.tile_ids:
                patches.extend(pt.pixels for pt in proj.patches(tid))
            with proj.write_lock:
                proj.append_event("train_start", None, job="pretrain")
            try:
                ckpt = pretrain(patches, cfg, net=net, progress=progress,
                                should_stop=should_stop)
                with proj.write_lock:
                    name = proj.save_checkpoint(ckpt)
            finally:
                with proj.write_lock:
                    proj.append_event("train_end", None, job="pretrain")
            return name

        return run

    def _run_finetune(proj: st.Project, params: dict):
        cfg = replace(
            proj.train_config,
            edgeweight=float(params.get("edgeweight",
                                        proj.train_config.edgeweight)),
            epochs=int(params.get("epochs", proj.train_config.epochs)),
            batch_size=int(params.get("batch_size",
                                      proj.train_config.batch_size)),
            seed=int(params.get("seed", proj.train_config.seed)))
        base = _require_checkpoint(proj, params.get("from", "latest"))
        samples = []
        for tid in proj.tile_ids:
            if not proj.has_labelmap(tid):
                continue
            tile = proj.load_tile(tid)
            samples.extend(make_patch_pairs(tile.pixels,
                                            proj.load_labelmap(tid)))
        if not samples:
            raise EmptySupervisionError("no labeled tiles to finetune on")

        def run(progress, should_stop):
            with proj.write_lock:
                proj.append_event("train_start", None, job="finetune")
            try:
                ckpt = finetune(base, samples, cfg, progress=progress,
                                should_stop=should_stop)
                with proj.write_lock:
                    name = proj.save_checkpoint(ckpt)
            finally:
                with proj.write_lock:
                    proj.append_event("train_end", None, job="finetune")
            return name

        return run

    def _predict_arrays(proj: st.Project, tile_id: str, threshold: float):
        ckpt = _require_checkpoint(proj)
        tile = _require_tile(proj, tile_id)
        key = (proj.name, tile_id, ckpt.content_hash(), round(threshold, 6))
        if key not in state.pred_cache:
            prob = predict_probabilities(ckpt, tile.pixels)
            state.pred_cache[key] = (prob, prob >= threshold)
            if len(state.pred_cache) > 32:
                state.pred_cache.pop(next(iter(state.pred_cache)))
        return state.pred_cache[key]

    def _run_predict(proj: st.Project, params: dict):
        tile_id = params.get("tile_id")
        if not tile_id:
            raise ApiError(400, "missing_param", "predict needs tile_id")
        threshold = float(params.get("threshold", 0.5))

        def run(progress, should_stop):
            _predict_arrays(proj, tile_id, threshold)
            return None

        return run

    def _embed_features(proj: st.Project, ckpt):
        model = ckpt.model()
        ids, vectors, annotated = [], [], []
        for rec in proj.tiles:
            labels = proj.load_labelmap(rec.tile_id)
            tile = proj.load_tile(rec.tile_id)
            for patch in make_patches(tile):
                x = patch.pixels.astype(np.float32).transpose(2, 0, 1)[None] / 255.0
                vectors.append(model.bottleneck_features(x)[0])
                ids.append(patch.patch_id)
                annotated.append(_patch_annotated(labels, patch.origin,
                                                  rec.height, rec.width))
        return ids, np.stack(vectors), annotated

    def _run_embed(proj: st.Project, params: dict):
        seed = int(params.get("seed", 0))
        ckpt = _require_checkpoint(proj, params.get("from", "latest"))

        def run(progress, should_stop):
            ids, vectors, annotated = _embed_features(proj, ckpt)
            progress(0.5)
            points = embed_2d(vectors, seed=seed, patch_ids=ids,
                              annotated=annotated)
            # swap in the complete embedding only once it is fully built
            state.embeddings[proj.name] = points
            st._atomic_write(os.path.join(proj.dir, "embedding.csv"),
                             export_csv(points).encode())
            return None

        return run

    _RUNNERS = {"pretrain": _run_pretrain, "finetune": _run_finetune,
                "predict": _run_predict, "embed": _run_embed}

    @app.post("/projects/{p}/jobs", status_code=202)
    async def submit_job(p: str, request: Request):
        proj = state.project(p)
        body = await _json_body(request)
        kind = body.get("kind", "")
        if kind not in _RUNNERS:
            raise ApiError(400, "bad_job_kind",
                           f"kind must be one of {sorted(_RUNNERS)}")
        fn = _RUNNERS[kind](proj, body.get("params", {}))
        job = state.jobs.submit(p, kind, fn)
        return job.snapshot()

    @app.get("/projects/{p}/jobs")
    def list_jobs(p: str):
        state.project(p)
        return {"jobs": [j.snapshot() for j in state.jobs.jobs_for(p)]}

    @app.get("/projects/{p}/jobs/{j}")
    def job_status(p: str, j: str):
        state.project(p)
        try:
            return state.jobs.job_status(j).snapshot()
        except NotFoundError:
            raise ApiError(404, "job_not_found", f"no job {j!r}")

    @app.delete("/projects/{p}/jobs/{j}")
    def cancel_job(p: str, j: str):
        state.project(p)
        try:
            state.jobs.cancel(j)
        except NotFoundError:
            raise ApiError(404, "job_not_found", f"no job {j!r}")
        return state.jobs.job_status(j).snapshot()

    # ---------------------------------------------------------- embedding

    def _load_embedding(proj: st.Project):
        points = state.embeddings.get(proj.name)
        if points is None:
            # survive a restart: the embed job leaves a CSV behind
            path = os.path.join(proj.dir, "embedding.csv")
            if os.path.exists(path):
                points = []
                for line in open(path, encoding="utf-8").read().splitlines()[1:]:
                    pid, x, y, ann = line.split(",")
                    points.append(EmbeddingPoint(pid, float(x), float(y),
                                                 ann == "1"))
                state.embeddings[proj.name] = points
        if points is None:
            raise ApiError(404, "embedding_not_found", "run an embed job first")
        return points

    @app.get("/projects/{p}/embedding")
    def get_embedding(p: str, format: str = Query(default="json")):
        proj = state.project(p)
        points = _load_embedding(proj)
        if format == "csv":
            return Response(content=export_csv(points),
                            media_type="text/csv")
        return {"points": [{
            "patch_id": q.patch_id, "x": q.x, "y": q.y,
            "annotated": q.annotated,
        } for q in points]}

    @app.post("/projects/{p}/embedding/suggest")
    async def suggest(p: str, request: Request):
        proj = state.project(p)
        points = _load_embedding(proj)
        body = await _json_body(request)
        n = int(body.get("n", 0))
        # current annotation state wins over the flags frozen at embed time
        annotated = set()
        for rec in proj.tiles:
            labels = proj.load_labelmap(rec.tile_id)
            tile = proj.load_tile(rec.tile_id)
            for patch in make_patches(tile):
                if _patch_annotated(labels, patch.origin, rec.height,
                                    rec.width):
                    annotated.add(patch.patch_id)
        return {"patch_ids": suggest_patches(points, n, annotated)}

    # --------------------------------------------------------- superpixels

    def _superpixel_map(proj: st.Project, tile_id: str, mode: str,
                        cell: int | None, compact: float | None):
        cfg = proj.superpixel_config
        cfg = replace(cfg, mode=mode,
                      approxcellsize=cell or cfg.approxcellsize,
                      compactness=compact or cfg.compactness)
        ckpt = None
        src = None
        if mode == "dl_features":
            try:
                ckpt = proj.load_checkpoint()
                src = ckpt.checkpoint_id
            except NotFoundError:
                ckpt = None  # intensity fallback inside features_for
        tile = _require_tile(proj, tile_id)
        cfg.validate(tile.pixels.shape)
        key = (proj.name, tile_id, cfg.mode, cfg.approxcellsize,
               cfg.compactness, cfg.iterations,
               ckpt.content_hash() if ckpt else "-")
        if key not in state.sp_cache:
            feats = sp.features_for(cfg, tile, checkpoint=ckpt)
            spmap = sp.slic(feats, cfg)
            spmap.source_checkpoint = src
            state.sp_cache[key] = spmap
            if len(state.sp_cache) > 16:
                state.sp_cache.pop(next(iter(state.sp_cache)))
        return state.sp_cache[key]

    def _mode_param(mode: str) -> str:
        if mode in ("dl", "dl_features"):
            return "dl_features"
        if mode == "intensity":
            return "intensity"
        raise ApiError(400, "bad_mode", f"mode must be intensity|dl, "
                                        f"got {mode!r}")

    @app.get("/projects/{p}/tiles/{t}/superpixels")
    def get_superpixels(p: str, t: str, mode: str = "intensity",
                        approxcellsize: int | None = None,
                        compactness: float | None = None):
        proj = state.project(p)
        spmap = _superpixel_map(proj, t, _mode_param(mode), approxcellsize,
                                compactness)
        return Response(content=sp.to_png_bytes(spmap),
                        media_type="image/png", headers={
                            "X-Num-Regions": str(spmap.num_regions),
                            "X-Mode": mode,
                            "X-Source-Checkpoint":
                                spmap.source_checkpoint or "-",
                        })

    @app.get("/projects/{p}/tiles/{t}/superpixels/region")
    def get_region(p: str, t: str, x: int, y: int, mode: str = "intensity",
                   approxcellsize: int | None = None,
                   compactness: float | None = None):
        proj = state.project(p)
        spmap = _superpixel_map(proj, t, _mode_param(mode), approxcellsize,
                                compactness)
        mask = sp.region_at(spmap, x, y)
        return _png_response(np.where(mask, 255, 0).astype(np.uint8),
                             mode="L", x_region=int(spmap.labels[y, x]))

    # ---------------------------------------------------------- prediction

    @app.get("/projects/{p}/tiles/{t}/prediction")
    def get_prediction(p: str, t: str, threshold: float = 0.5,
                       kind: str = Query(default="mask")):
        proj = state.project(p)
        prob, mask = _predict_arrays(proj, t, threshold)
        if kind == "mask":
            return _png_response(np.where(mask, 255, 0).astype(np.uint8),
                                 mode="L", x_threshold=threshold)
        if kind == "probability":
            return _png_response(np.round(prob * 255).astype(np.uint8),
                                 mode="L", x_threshold=threshold)
        raise ApiError(400, "bad_kind", "kind must be mask|probability")

    @app.post("/projects/{p}/tiles/{t}/prediction/import")
    async def import_pred(p: str, t: str, request: Request):
        proj = state.project(p)
        body = await request.json() if int(request.headers.get(
            "content-length", 0) or 0) else {}
        threshold = float(body.get("threshold", 0.5))
        _, mask = _predict_arrays(proj, t, threshold)
        with proj.write_lock:
            old = proj.load_labelmap(t)
            merged = import_prediction(mask, old)
            changed = int((merged != old).sum())
            proj.save_labelmap(t, merged)
            ev = proj.append_event("import_prediction", t, pixels=changed)
        return {"event_id": ev.event_id, "pixels_changed": changed}

    # ------------------------------------------------------------- metrics

    @app.get("/projects/{p}/metrics")
    def get_metrics(p: str, sample_structures: int = 84,
                    sample_minutes: float = 10.0,
                    format: str = Query(default="json")):
        proj = state.project(p)
        report = mx.efficiency_report(proj.read_events(),
                                      sample_structures, sample_minutes)
        if format == "csv":
            return Response(content=report.as_csv(), media_type="text/csv")
        if format == "text":
            return Response(content=report.as_text(),
                            media_type="text/plain")
        return {
            "m_t": report.m_t, "qa_t": report.qa_t,
            "total_t": report.total_t, "theta_t": report.theta_t,
            "theta_label": mx.speedup_label(report.theta_t),
            "structure_count": report.structure_count,
            "rate_series": [{"bucket_start_min": b, "per_min": r}
                            for b, r in report.rate_series],
        }

    if config.frontend_dir:
        app.mount("/", StaticFiles(directory=config.frontend_dir, html=True),
                  name="frontend")

    return app


def serve(root: str, bind: str | None = None,
          config: ServiceConfig | None = None):
    """Blocking server start. `bind` is host:port."""
    import uvicorn

    config = config or ServiceConfig()
    host, _, port = (bind or config.bind).rpartition(":")
    app = create_app(root, config)
    uvicorn.run(app, host=host or "127.0.0.1", port=int(port),
                log_level="warning")
