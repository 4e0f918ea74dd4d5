"""Command-line front end.

Subcommands: `tile` (raster preprocessor), `create`/`add`/`set-labels`
(project plumbing), `train`/`predict` (headless loop), `eval` (mask
scoring), `report` (efficiency numbers), `export-masks`, and `serve`.
Exit codes: 0 success, 2 usage, 3 data error, 4 state error.
"""
from __future__ import annotations

import argparse
import os
import sys
from dataclasses import replace

import numpy as np
from PIL import Image

from . import metrics as mx
from . import store as st
from .errors import (
    BusyError,
    CheckpointStageError,
    CorruptStoreError,
    DataError,
    DuplicateError,
    EmptySupervisionError,
    NonFiniteGradientError,
    NotFoundError,
    ProjectLockedError,
    ShapeMismatchError,
)
from .loop import TrainConfig, finetune, make_patch_pairs, predict_tile, pretrain
from .loop.core import reconstruction_loss, segmentation_loss
from .superpixel import SuperpixelConfig
from .unet import UNetConfig

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_DATA = 3
EXIT_STATE = 4

_DATA_ERRORS = (DataError, ShapeMismatchError, EmptySupervisionError,
                NonFiniteGradientError)
_STATE_ERRORS = (NotFoundError, DuplicateError, BusyError,
                 CheckpointStageError, ProjectLockedError, CorruptStoreError)


def _tile_size(text: str) -> int:
    size = int(text)
    if size < 256:
        raise argparse.ArgumentTypeError(f"--size must be >= 256, got {size}")
    return size


def _open_raster(path: str) -> np.ndarray:
    try:
        img = Image.open(path)
        img.load()
    except FileNotFoundError:
        raise DataError(f"no such file: {path}")
    except Exception as e:
        raise DataError(f"cannot decode {path}: {e}")
    return np.asarray(img.convert("RGB"), dtype=np.uint8)


def cmd_tile(args) -> int:
    pixels = _open_raster(args.input)
    os.makedirs(args.out, exist_ok=True)
    stem = os.path.splitext(os.path.basename(args.input))[0]
    h, w = pixels.shape[:2]
    size = args.size
    written = 0
    dropped = []
    for ri, y0 in enumerate(range(0, h, size)):
        for ci, x0 in enumerate(range(0, w, size)):
            block = pixels[y0:y0 + size, x0:x0 + size]
            bh, bw = block.shape[:2]
            # remainders keep their true size when still usable as tiles
            if bh < 256 or bw < 256:
                dropped.append((ri, ci, bw, bh))
                continue
            name = f"{stem}_r{ri:02d}_c{ci:02d}.png"
            Image.fromarray(block).save(os.path.join(args.out, name))
            written += 1
    for ri, ci, bw, bh in dropped:
        print(f"dropped {bw}x{bh} remainder at row {ri}, col {ci}")
    print(f"wrote {written} tiles to {args.out} ({len(dropped)} dropped)")
    return EXIT_OK


def cmd_create(args) -> int:
    from .service import PRESETS  # service owns the preset table

    spc_kw: dict = {}
    trc_kw: dict = {}
    if args.preset:
        if args.preset not in PRESETS:
            raise DataError(f"no preset named {args.preset!r}; "
                            f"choose from {sorted(PRESETS)}")
        row = PRESETS[args.preset]
        spc_kw = {"approxcellsize": row["approxcellsize"],
                  "compactness": row["compactness"]}
        trc_kw = {"edgeweight": row["edgeweight"]}
    if args.approxcellsize is not None:
        spc_kw["approxcellsize"] = args.approxcellsize
    if args.compactness is not None:
        spc_kw["compactness"] = args.compactness
    if args.edgeweight is not None:
        trc_kw["edgeweight"] = args.edgeweight
    spc_kw.setdefault("approxcellsize", 20)
    spc_kw.setdefault("compactness", 1e-4)
    spc = SuperpixelConfig(**spc_kw).validate()
    trc = TrainConfig(**trc_kw).validate()
    proj = st.create_project(args.root, args.name, superpixel_config=spc,
                             train_config=trc)
    try:
        print(f"created project {proj.name} at {proj.dir}")
    finally:
        proj.close()
    return EXIT_OK


def cmd_add(args) -> int:
    with st.open_project(args.root, args.project) as proj:
        for path in args.images:
            try:
                data = open(path, "rb").read()
            except OSError as e:
                raise DataError(f"cannot read {path}: {e}")
            tile = proj.add_tile(data)
            rec = proj._tile_record(tile.tile_id)
            print(f"{tile.tile_id}  {rec.width}x{rec.height}  "
                  f"{rec.n_patches} patches  {path}")
    return EXIT_OK


def cmd_set_labels(args) -> int:
    with st.open_project(args.root, args.project) as proj:
        rec = proj._tile_record(args.tile)
        data = open(args.labels, "rb").read()
        new = st.decode_label_png(data, (rec.height, rec.width))
        old = proj.load_labelmap(args.tile)
        changed = int((new != old).sum())
        payload = {"pixels": changed}
        if args.kind in mx.STRUCTURE_KINDS:
            known = mx.new_structures(old == 2, set())
            fresh = mx.new_structures(new == 2, known)
            payload["structures"] = len(fresh)
        proj.save_labelmap(args.tile, new)
        proj.append_event(args.kind, args.tile, **payload)
        print(f"{args.tile}: {changed} pixels changed"
              + (f", {payload['structures']} new structures"
                 if "structures" in payload else ""))
    return EXIT_OK


def _train_config(proj, args) -> TrainConfig:
    cfg = proj.train_config
    return replace(
        cfg,
        edgeweight=args.edgeweight if args.edgeweight is not None
        else cfg.edgeweight,
        epochs=args.epochs if args.epochs is not None else cfg.epochs,
        batch_size=args.batch_size if args.batch_size is not None
        else cfg.batch_size,
        seed=args.seed if args.seed is not None else cfg.seed,
        learning_rate=args.learning_rate if args.learning_rate is not None
        else cfg.learning_rate).validate()


def cmd_train(args) -> int:
    with st.open_project(args.root, args.project) as proj:
        cfg = _train_config(proj, args)
        if args.mode == "pretrain":
            net = UNetConfig(depth=args.depth, base_channels=args.base_channels,
                             out_channels=3)
            patches = []
            for tid in proj.tile_ids:
                patches.extend(p.pixels for p in proj.patches(tid))
            if not patches:
                raise DataError("project has no tiles to pretrain on")
            proj.append_event("train_start", None, job="pretrain")
            try:
                ckpt = pretrain(patches, cfg, net=net)
            finally:
                proj.append_event("train_end", None, job="pretrain")
            final = reconstruction_loss(ckpt, patches)
        else:
            base = proj.load_checkpoint(args.from_checkpoint)
            samples = []
            for tid in proj.tile_ids:
                if not proj.has_labelmap(tid):
                    continue
                tile = proj.load_tile(tid)
                samples.extend(make_patch_pairs(tile.pixels,
                                                proj.load_labelmap(tid)))
            if not samples:
                raise EmptySupervisionError("no labeled tiles to finetune on")
            proj.append_event("train_start", None, job="finetune")
            try:
                ckpt = finetune(base, samples, cfg)
            finally:
                proj.append_event("train_end", None, job="finetune")
            final = segmentation_loss(ckpt, samples, cfg.edgeweight)
        name = proj.save_checkpoint(ckpt)
        print(f"final loss: {final:.6f}")
        print(f"checkpoint: {name}")
    return EXIT_OK


def cmd_predict(args) -> int:
    with st.open_project(args.root, args.project, readonly=True) as proj:
        ckpt = proj.load_checkpoint(args.from_checkpoint)
        tile = proj.load_tile(args.tile)
        prob, mask = predict_tile(ckpt, tile, threshold=args.threshold)
    out_dir = os.path.dirname(os.path.abspath(args.out))
    os.makedirs(out_dir, exist_ok=True)
    Image.fromarray(np.where(mask, 255, 0).astype(np.uint8),
                    mode="L").save(args.out)
    print(f"wrote {args.out}")
    if args.prob:
        Image.fromarray(np.round(prob * 255).astype(np.uint8),
                        mode="L").save(args.prob)
        print(f"wrote {args.prob}")
    return EXIT_OK


def _load_mask(path: str) -> np.ndarray:
    try:
        img = Image.open(path)
        img.load()
    except Exception as e:
        raise DataError(f"cannot decode {path}: {e}")
    return np.asarray(img.convert("L")) != 0  # any nonzero pixel is positive


def cmd_eval(args) -> int:
    pred_names = sorted(n for n in os.listdir(args.pred)
                        if n.lower().endswith(".png"))
    gt_names = sorted(n for n in os.listdir(args.gt)
                      if n.lower().endswith(".png"))
    only_pred = sorted(set(pred_names) - set(gt_names))
    only_gt = sorted(set(gt_names) - set(pred_names))
    if only_pred or only_gt:
        for n in only_pred:
            print(f"only in --pred: {n}", file=sys.stderr)
        for n in only_gt:
            print(f"only in --gt: {n}", file=sys.stderr)
        raise DataError("prediction and ground-truth directories disagree")
    if not pred_names:
        raise DataError("no PNG masks to compare")
    width = max(len(n) for n in pred_names + ["aggregate (micro)"])
    print(f"{'tile'.ljust(width)}  precision  recall  f")
    tp = fp = fn = 0
    for name in pred_names:
        p = _load_mask(os.path.join(args.pred, name))
        g = _load_mask(os.path.join(args.gt, name))
        f, prec, rec = mx.f_score(p, g)
        print(f"{name.ljust(width)}  {prec:9.4f}  {rec:6.4f}  {f:6.4f}")
        tp += int((p & g).sum())
        fp += int((p & ~g).sum())
        fn += int((~p & g).sum())
    if tp + fp + fn == 0:
        agg_f = agg_p = agg_r = 1.0
    else:
        agg_f = 2.0 * tp / (2.0 * tp + fp + fn)
        agg_p = tp / (tp + fp) if tp + fp else 0.0
        agg_r = tp / (tp + fn) if tp + fn else 0.0
    print(f"{'aggregate (micro)'.ljust(width)}  {agg_p:9.4f}  "
          f"{agg_r:6.4f}  {agg_f:6.4f}")
    return EXIT_OK


def cmd_report(args) -> int:
    with st.open_project(args.root, args.project, readonly=True) as proj:
        report = mx.efficiency_report(proj.read_events(),
                                      args.sample_structures,
                                      args.sample_minutes)
    if args.format == "csv":
        sys.stdout.write(report.as_csv())
    else:
        sys.stdout.write(report.as_text())
    return EXIT_OK


def cmd_export_masks(args) -> int:
    with st.open_project(args.root, args.project, readonly=True) as proj:
        masks = proj.export_masks()
    os.makedirs(args.out, exist_ok=True)
    for tile_id, data in masks.items():
        with open(os.path.join(args.out, f"{tile_id}.png"), "wb") as fh:
            fh.write(data)
    print(f"wrote {len(masks)} masks to {args.out}")
    return EXIT_OK


def cmd_serve(args) -> int:
    from .service import ServiceConfig, load_config, serve

    config = load_config(args.config) if args.config else ServiceConfig()
    serve(args.root, bind=args.bind, config=config)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="segloop",
        description="Annotation-loop tooling: tiling, projects, training, "
                    "prediction, evaluation, and the HTTP server.")
    sub = parser.add_subparsers(dest="command", required=True)

    def project_flags(p):
        p.add_argument("--root", required=True, help="projects directory")
        p.add_argument("--project", required=True)

    p = sub.add_parser("tile", help="cut a raster into training tiles")
    p.add_argument("input")
    p.add_argument("--size", type=_tile_size, required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_tile)

    p = sub.add_parser("create", help="create a project")
    p.add_argument("name")
    p.add_argument("--root", required=True)
    p.add_argument("--preset")
    p.add_argument("--edgeweight", type=float)
    p.add_argument("--approxcellsize", type=int)
    p.add_argument("--compactness", type=float)
    p.set_defaults(fn=cmd_create)

    p = sub.add_parser("add", help="add tile PNGs to a project")
    project_flags(p)
    p.add_argument("images", nargs="+")
    p.set_defaults(fn=cmd_add)

    p = sub.add_parser("set-labels", help="store a label PNG for a tile")
    project_flags(p)
    p.add_argument("--tile", required=True)
    p.add_argument("labels")
    p.add_argument("--kind", default="stroke",
                   choices=["stroke", "polygon", "superpixel_select",
                            "erase", "accept_tile"])
    p.set_defaults(fn=cmd_set_labels)

    p = sub.add_parser("train", help="run pretraining or fine-tuning")
    project_flags(p)
    p.add_argument("mode", choices=["pretrain", "finetune"])
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--edgeweight", type=float)
    p.add_argument("--learning-rate", type=float)
    p.add_argument("--depth", type=int, default=5)
    p.add_argument("--base-channels", type=int, default=4)
    p.add_argument("--from", dest="from_checkpoint", default="latest",
                   help="checkpoint to fine-tune from")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("predict", help="write a mask PNG for a tile")
    project_flags(p)
    p.add_argument("--tile", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--prob", help="also write the probability map")
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--from", dest="from_checkpoint", default="latest")
    p.set_defaults(fn=cmd_predict)

    p = sub.add_parser("eval", help="score prediction masks against truth")
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("report", help="print annotation-efficiency numbers")
    project_flags(p)
    p.add_argument("--sample-structures", type=int, default=84)
    p.add_argument("--sample-minutes", type=float, default=10.0)
    p.add_argument("--format", choices=["text", "csv"], default="text")
    p.set_defaults(fn=cmd_report)

    p = sub.add_parser("export-masks", help="write positive masks per tile")
    project_flags(p)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_export_masks)

    p = sub.add_parser("serve", help="start the HTTP server")
    p.add_argument("--root", required=True)
    p.add_argument("--bind", help="host:port, default 127.0.0.1:8765")
    p.add_argument("--config", help="key-value config file")
    p.set_defaults(fn=cmd_serve)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except _DATA_ERRORS as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_DATA
    except _STATE_ERRORS as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_STATE


if __name__ == "__main__":
    sys.exit(main())
