"""Durable per-project persistence.

One directory per project: `tiles/` (RGB PNG), `labels/` (grayscale PNG,
0 unlabeled / 128 negative / 255 positive), `checkpoints/` (binary model
snapshots plus a `latest` pointer carrying a sha256), `superpixels/` (16-bit
PNG + text sidecar), `events.log` (append-only TSV), `project.meta`
(versioned key=value text). Everything is human-inspectable; writes go
through temp-file-then-rename so readers never observe a half-written file.
"""
from __future__ import annotations

import fcntl
import hashlib
import io
import os
import re
import threading
import time
from dataclasses import dataclass, field

import numpy as np
from PIL import Image

from . import superpixel as sp
from .errors import (
    CorruptStoreError,
    DataError,
    DuplicateError,
    NotFoundError,
    ProjectLockedError,
    ShapeMismatchError,
)
from .loop.core import LabelMap, Tile, TrainConfig, make_patches
from .superpixel import SuperpixelConfig, SuperpixelMap
from .unet import ModelCheckpoint

META_MAGIC = "QAPROJ1"
META_VERSION = 1

EVENT_KINDS = (
    "stroke", "polygon", "superpixel_select", "erase", "import_prediction",
    "accept_tile", "train_start", "train_end", "tile_open", "tile_close",
)

LABEL_TO_GRAY = np.array([0, 128, 255], dtype=np.uint8)
GRAY_TO_LABEL = {0: 0, 128: 1, 255: 2}

_NAME_RE = re.compile(r"^[A-Za-z0-9][A-Za-z0-9_.-]{0,63}$")


def decode_label_png(data: bytes, shape=None) -> np.ndarray:
    """Grayscale label PNG (0/128/255) to a {0,1,2} uint8 map. Shared by
    every path that accepts label images from outside."""
    try:
        img = Image.open(io.BytesIO(data))
        img.load()
    except Exception:
        raise DataError("label body is not a decodable image")
    gray = np.asarray(img.convert("L"))
    if shape is not None and gray.shape != tuple(shape):
        raise ShapeMismatchError(
            f"label PNG is {gray.shape}, tile is {tuple(shape)}")
    bad = set(np.unique(gray)) - set(GRAY_TO_LABEL)
    if bad:
        raise DataError(f"label PNG must use gray levels 0/128/255, "
                        f"found {sorted(bad)}")
    out = np.zeros(gray.shape, dtype=np.uint8)
    out[gray == 128] = 1
    out[gray == 255] = 2
    return out


def _now_ms() -> int:
    return int(time.time() * 1000)


def _fsync_dir(path: str):
    fd = os.open(path, os.O_RDONLY)
    try:
        os.fsync(fd)
    finally:
        os.close(fd)


def _atomic_write(path: str, data: bytes):
    """write-temp, fsync, rename: a crash leaves either the old file or the
    new one, never a mix."""
    tmp = f"{path}.tmp{os.getpid()}"
    with open(tmp, "wb") as f:
        f.write(data)
        f.flush()
        os.fsync(f.fileno())
    os.replace(tmp, path)
    _fsync_dir(os.path.dirname(path))


def _png_bytes(img: Image.Image) -> bytes:
    buf = io.BytesIO()
    img.save(buf, format="PNG")
    return buf.getvalue()



def _locked(method):
    def wrapper(self, *args, **kwargs):
        with self.write_lock:
            return method(self, *args, **kwargs)
    wrapper.__name__ = method.__name__
    wrapper.__doc__ = method.__doc__
    return wrapper

@dataclass
class AnnotationEvent:
    event_id: int
    timestamp_ms: int
    kind: str
    tile_id: str | None = None
    payload: dict = field(default_factory=dict)

    def to_line(self) -> str:
        if self.kind not in EVENT_KINDS:
            raise DataError(f"unknown event kind {self.kind!r}")
        pl = ",".join(f"{k}={v}" for k, v in sorted(self.payload.items())) or "-"
        tid = self.tile_id or "-"
        return f"{self.event_id}\t{self.timestamp_ms}\t{self.kind}\t{tid}\t{pl}"

    @classmethod
    def from_line(cls, line: str) -> "AnnotationEvent":
        parts = line.rstrip("\n").split("\t")
        if len(parts) != 5:
            raise CorruptStoreError(f"malformed event record: {line!r}")
        eid, ts, kind, tid, pl = parts
        payload = {}
        if pl != "-":
            for item in pl.split(","):
                k, _, v = item.partition("=")
                payload[k] = v
        return cls(int(eid), int(ts), kind,
                   None if tid == "-" else tid, payload)


@dataclass
class TileRecord:
    tile_id: str
    content_hash: str
    width: int
    height: int
    n_patches: int


class Project:
    """Handle to one on-disk project. Opened for writing it holds the
    project's advisory lock until close(); readers pass readonly=True."""

    def __init__(self, root: str, name: str, *, readonly: bool = False,
                 _create: bool = False,
                 superpixel_config: SuperpixelConfig | None = None,
                 train_config: TrainConfig | None = None):
        self.root = root
        self.name = name
        self.dir = os.path.join(root, name)
        self.readonly = readonly
        self._lock_fd = None
        self._last_event_id = 0
        self._last_event_ts = 0
        self._train_open = False
        # flock covers cross-process writers; this covers threads sharing
        # one handle. Mutating methods take it; callers may hold it around
        # multi-step sequences (read-modify-write plus event append).
        self.write_lock = threading.RLock()

        if _create:
            if not _NAME_RE.match(name):
                raise DataError(f"invalid project name {name!r}")
            if os.path.exists(self.dir):
                raise DuplicateError(f"project {name!r} already exists")
            os.makedirs(os.path.join(self.dir, "tiles"))
            for sub in ("labels", "checkpoints", "superpixels"):
                os.makedirs(os.path.join(self.dir, sub))
            self.project_id = hashlib.sha256(
                f"{name}:{_now_ms()}".encode()).hexdigest()[:12]
            self.created_at_ms = _now_ms()
            self.superpixel_config = superpixel_config or SuperpixelConfig(
                approxcellsize=20, compactness=1e-4)
            self.train_config = train_config or TrainConfig()
            self.tiles: list[TileRecord] = []
            open(os.path.join(self.dir, "events.log"), "w").close()
            self._acquire_lock()
            self._write_meta()
        else:
            if not os.path.isdir(self.dir):
                raise NotFoundError(f"project {name!r} not found under {root}")
            if not readonly:
                self._acquire_lock()
            try:
                self._read_meta()
                self._scan_event_tail()
            except Exception:
                self.close()
                raise

    # ------------------------------------------------------------- lifecycle

    def _acquire_lock(self):
        path = os.path.join(self.dir, "lock")
        fd = os.open(path, os.O_CREAT | os.O_RDWR, 0o644)
        try:
            fcntl.flock(fd, fcntl.LOCK_EX | fcntl.LOCK_NB)
        except OSError:
            os.close(fd)
            raise ProjectLockedError(
                f"project {self.name!r} is locked by another writer")
        self._lock_fd = fd

    def close(self):
        if self._lock_fd is not None:
            fcntl.flock(self._lock_fd, fcntl.LOCK_UN)
            os.close(self._lock_fd)
            self._lock_fd = None

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    def _check_writable(self):
        if self.readonly:
            raise ProjectLockedError(f"project {self.name!r} opened readonly")

    # ------------------------------------------------------------------ meta

    def _write_meta(self):
        spc, trc = self.superpixel_config, self.train_config
        lines = [
            META_MAGIC,
            f"version={META_VERSION}",
            f"project_id={self.project_id}",
            f"name={self.name}",
            f"created_at_ms={self.created_at_ms}",
            f"sp_approxcellsize={spc.approxcellsize}",
            f"sp_compactness={spc.compactness!r}",
            f"sp_iterations={spc.iterations}",
            f"sp_mode={spc.mode}",
            f"tr_edgeweight={trc.edgeweight!r}",
            f"tr_epochs={trc.epochs}",
            f"tr_batch_size={trc.batch_size}",
            f"tr_seed={trc.seed}",
            f"tr_learning_rate={trc.learning_rate!r}",
        ]
        for t in self.tiles:
            lines.append(f"tile={t.tile_id},{t.content_hash},"
                         f"{t.width},{t.height},{t.n_patches}")
        _atomic_write(os.path.join(self.dir, "project.meta"),
                      ("\n".join(lines) + "\n").encode())

    def _read_meta(self):
        path = os.path.join(self.dir, "project.meta")
        try:
            text = open(path, encoding="utf-8").read()
        except FileNotFoundError:
            raise CorruptStoreError(f"missing project.meta in {self.dir}")
        lines = text.splitlines()
        if not lines or lines[0] != META_MAGIC:
            raise CorruptStoreError(f"bad magic in {path}")
        kv = {}
        self.tiles = []
        for line in lines[1:]:
            if not line:
                continue
            key, _, val = line.partition("=")
            if key == "tile":
                tid, chash, w, h, np_ = val.split(",")
                self.tiles.append(TileRecord(tid, chash, int(w), int(h), int(np_)))
            else:
                kv[key] = val
        try:
            if int(kv["version"]) != META_VERSION:
                raise CorruptStoreError(f"unsupported version {kv['version']}")
            self.project_id = kv["project_id"]
            self.created_at_ms = int(kv["created_at_ms"])
            self.superpixel_config = SuperpixelConfig(
                approxcellsize=int(kv["sp_approxcellsize"]),
                compactness=float(kv["sp_compactness"]),
                iterations=int(kv["sp_iterations"]),
                mode=kv["sp_mode"])
            self.train_config = TrainConfig(
                edgeweight=float(kv["tr_edgeweight"]),
                epochs=int(kv["tr_epochs"]),
                batch_size=int(kv["tr_batch_size"]),
                seed=int(kv["tr_seed"]),
                learning_rate=float(kv["tr_learning_rate"]))
        except (KeyError, ValueError) as e:
            raise CorruptStoreError(f"project.meta incomplete: {e}")

    @property
    def tile_ids(self) -> list[str]:
        return [t.tile_id for t in self.tiles]

    # ----------------------------------------------------------------- tiles

    @_locked
    def add_tile(self, png_bytes: bytes) -> Tile:
        self._check_writable()
        try:
            img = Image.open(io.BytesIO(png_bytes))
            img.load()
        except Exception:
            raise DataError("tile is not a decodable image")
        if img.format != "PNG":
            raise DataError(f"tiles must be PNG, got {img.format}")
        if img.mode not in ("RGB", "RGBA"):
            raise DataError(f"tiles must be 8-bit RGB or RGBA, got {img.mode}")
        pixels = np.asarray(img.convert("RGB"), dtype=np.uint8)
        chash = hashlib.sha256(pixels.tobytes()).hexdigest()
        for t in self.tiles:
            if t.content_hash == chash:
                raise DuplicateError(
                    f"identical tile already stored as {t.tile_id}")
        tile_id = f"t{len(self.tiles):04d}"
        tile = Tile(tile_id=tile_id, project_id=self.project_id,
                    pixels=pixels).validate()
        patches = make_patches(tile)
        _atomic_write(self._tile_path(tile_id),
                      _png_bytes(Image.fromarray(pixels)))
        self.tiles.append(TileRecord(tile_id, chash, pixels.shape[1],
                                     pixels.shape[0], len(patches)))
        self._write_meta()
        return tile

    def _tile_path(self, tile_id: str) -> str:
        return os.path.join(self.dir, "tiles", f"{tile_id}.png")

    def _tile_record(self, tile_id: str) -> TileRecord:
        for t in self.tiles:
            if t.tile_id == tile_id:
                return t
        raise NotFoundError(f"tile {tile_id!r} not in project {self.name!r}")

    def load_tile(self, tile_id: str) -> Tile:
        rec = self._tile_record(tile_id)
        img = Image.open(self._tile_path(tile_id))
        pixels = np.asarray(img.convert("RGB"), dtype=np.uint8)
        if hashlib.sha256(pixels.tobytes()).hexdigest() != rec.content_hash:
            raise CorruptStoreError(f"tile {tile_id} failed its content hash")
        return Tile(tile_id=tile_id, project_id=self.project_id, pixels=pixels)

    def patches(self, tile_id: str):
        return make_patches(self.load_tile(tile_id))

    # ---------------------------------------------------------------- labels

    def _label_path(self, tile_id: str) -> str:
        return os.path.join(self.dir, "labels", f"{tile_id}.png")

    @_locked
    def save_labelmap(self, tile_id: str, labels) -> None:
        self._check_writable()
        rec = self._tile_record(tile_id)
        arr = labels.values if isinstance(labels, LabelMap) else np.asarray(labels)
        LabelMap(values=arr).validate()  # before the uint8 cast can truncate
        arr = arr.astype(np.uint8)
        if arr.shape != (rec.height, rec.width):
            raise DataError(f"label map {arr.shape} does not match tile "
                            f"({rec.height}, {rec.width})")
        gray = LABEL_TO_GRAY[arr.astype(np.uint8)]
        _atomic_write(self._label_path(tile_id),
                      _png_bytes(Image.fromarray(gray, mode="L")))

    def load_labelmap(self, tile_id: str) -> np.ndarray:
        rec = self._tile_record(tile_id)
        path = self._label_path(tile_id)
        if not os.path.exists(path):
            return np.zeros((rec.height, rec.width), dtype=np.uint8)
        gray = np.asarray(Image.open(path).convert("L"))
        bad = set(np.unique(gray)) - set(GRAY_TO_LABEL)
        if bad:
            raise CorruptStoreError(
                f"label PNG for {tile_id} holds non-label values {sorted(bad)}")
        out = np.zeros(gray.shape, dtype=np.uint8)
        out[gray == 128] = 1
        out[gray == 255] = 2
        return out

    def has_labelmap(self, tile_id: str) -> bool:
        self._tile_record(tile_id)
        return os.path.exists(self._label_path(tile_id))

    # ------------------------------------------------------------ checkpoints

    @_locked
    def save_checkpoint(self, ckpt: ModelCheckpoint, name: str | None = None,
                        publish: bool = True) -> str:
        self._check_writable()
        name = name or ckpt.checkpoint_id
        blob = ckpt.to_bytes()
        _atomic_write(os.path.join(self.dir, "checkpoints", f"{name}.ckpt"), blob)
        if publish:
            digest = hashlib.sha256(blob).hexdigest()
            pointer = f"{name}.ckpt\t{digest}\n".encode()
            _atomic_write(os.path.join(self.dir, "checkpoints", "latest"), pointer)
        return name

    def load_checkpoint(self, name: str = "latest") -> ModelCheckpoint:
        cdir = os.path.join(self.dir, "checkpoints")
        if name == "latest":
            try:
                fname, digest = open(os.path.join(cdir, "latest"),
                                     encoding="utf-8").read().split()
            except FileNotFoundError:
                raise NotFoundError(f"project {self.name!r} has no checkpoint yet")
            blob = open(os.path.join(cdir, fname), "rb").read()
            if hashlib.sha256(blob).hexdigest() != digest:
                raise CorruptStoreError("checkpoint does not match its "
                                        "published sha256")
        else:
            try:
                blob = open(os.path.join(cdir, f"{name}.ckpt"), "rb").read()
            except FileNotFoundError:
                raise NotFoundError(f"no checkpoint named {name!r}")
        try:
            return ModelCheckpoint.from_bytes(blob)
        except ValueError as e:
            raise CorruptStoreError(str(e))

    def list_checkpoints(self) -> list[str]:
        cdir = os.path.join(self.dir, "checkpoints")
        return sorted(f[:-5] for f in os.listdir(cdir) if f.endswith(".ckpt"))

    # ------------------------------------------------------------ superpixels

    @_locked
    def save_superpixels(self, tile_id: str, spmap: SuperpixelMap) -> None:
        self._check_writable()
        self._tile_record(tile_id)
        base = os.path.join(self.dir, "superpixels", tile_id)
        sidecar = (f"num_regions={spmap.num_regions}\n"
                   f"source_checkpoint={spmap.source_checkpoint or '-'}\n")
        _atomic_write(base + ".png", sp.to_png_bytes(spmap))
        _atomic_write(base + ".meta", sidecar.encode())

    def load_superpixels(self, tile_id: str) -> SuperpixelMap:
        self._tile_record(tile_id)
        base = os.path.join(self.dir, "superpixels", tile_id)
        try:
            blob = open(base + ".png", "rb").read()
            kv = dict(line.split("=", 1) for line in
                      open(base + ".meta", encoding="utf-8").read().splitlines())
        except FileNotFoundError:
            raise NotFoundError(f"no superpixels cached for tile {tile_id!r}")
        src = kv.get("source_checkpoint", "-")
        return sp.from_png_bytes(blob, int(kv["num_regions"]),
                                 None if src == "-" else src)

    # ---------------------------------------------------------------- events

    def _scan_event_tail(self):
        self._train_open = False
        for ev in self.read_events():
            self._last_event_id = ev.event_id
            self._last_event_ts = ev.timestamp_ms
            if ev.kind == "train_start":
                self._train_open = True
            elif ev.kind == "train_end":
                self._train_open = False

    @_locked
    def append_event(self, kind: str, tile_id: str | None = None,
                     **payload) -> AnnotationEvent:
        """Timestamps come from the server clock (clamped non-decreasing);
        callers cannot supply their own."""
        self._check_writable()
        if kind not in EVENT_KINDS:
            raise DataError(f"unknown event kind {kind!r}")
        if kind == "train_start" and self._train_open:
            raise DataError("train_start while a training interval is open")
        if kind == "train_end" and not self._train_open:
            raise DataError("train_end without a matching train_start")
        ev = AnnotationEvent(
            event_id=self._last_event_id + 1,
            timestamp_ms=max(_now_ms(), self._last_event_ts),
            kind=kind, tile_id=tile_id,
            payload={k: v for k, v in payload.items()})
        line = (ev.to_line() + "\n").encode()
        with open(os.path.join(self.dir, "events.log"), "ab") as f:
            f.write(line)
            f.flush()
            os.fsync(f.fileno())
        self._last_event_id = ev.event_id
        self._last_event_ts = ev.timestamp_ms
        if kind == "train_start":
            self._train_open = True
        elif kind == "train_end":
            self._train_open = False
        return ev

    def read_events(self, start_id: int | None = None,
                    end_id: int | None = None) -> list[AnnotationEvent]:
        path = os.path.join(self.dir, "events.log")
        events = []
        last_id = 0
        with open(path, encoding="utf-8") as f:
            for raw in f:
                if not raw.endswith("\n"):
                    break  # partial trailing write from a crash; ignore
                ev = AnnotationEvent.from_line(raw)
                if ev.event_id <= last_id:
                    raise CorruptStoreError(
                        f"event id regression at {ev.event_id}")
                last_id = ev.event_id
                if start_id is not None and ev.event_id < start_id:
                    continue
                if end_id is not None and ev.event_id > end_id:
                    continue
                events.append(ev)
        return events

    # ----------------------------------------------------------------- export

    def export_masks(self) -> dict[str, bytes]:
        """Positive class as 8-bit grayscale, 255 = positive, one PNG per
        tile. Tiles without a saved label map export as all zeros."""
        out = {}
        for rec in self.tiles:
            labels = self.load_labelmap(rec.tile_id)
            mask = np.where(labels == 2, 255, 0).astype(np.uint8)
            out[rec.tile_id] = _png_bytes(Image.fromarray(mask, mode="L"))
        return out


def create_project(root: str, name: str,
                   superpixel_config: SuperpixelConfig | None = None,
                   train_config: TrainConfig | None = None) -> Project:
    os.makedirs(root, exist_ok=True)
    return Project(root, name, _create=True,
                   superpixel_config=superpixel_config,
                   train_config=train_config)


def open_project(root: str, name: str, readonly: bool = False) -> Project:
    return Project(root, name, readonly=readonly)


def list_projects(root: str) -> list[str]:
    if not os.path.isdir(root):
        return []
    return sorted(n for n in os.listdir(root)
                  if os.path.exists(os.path.join(root, n, "project.meta")))
