"""On-disk project store: round trips, atomicity, locking, the event log."""
import hashlib
import io
import os

import numpy as np
import pytest
from PIL import Image

from segloop.errors import (
    CorruptStoreError,
    DataError,
    DuplicateError,
    NotFoundError,
    ProjectLockedError,
)
from segloop.loop import TrainConfig
from segloop.store import (
    AnnotationEvent,
    create_project,
    list_projects,
    open_project,
)
from segloop.superpixel import SuperpixelConfig, SuperpixelMap
from segloop.unet import ModelCheckpoint, UNet, UNetConfig


def rgb_png(seed, size=256):
    rng = np.random.default_rng(seed)
    arr = rng.integers(0, 256, size=(size, size, 3), dtype=np.uint8)
    buf = io.BytesIO()
    Image.fromarray(arr).save(buf, format="PNG")
    return buf.getvalue(), arr


# ---------------------------------------------------------------- lifecycle

def test_create_then_open_round_trip(tmp_path):
    root = str(tmp_path)
    spc = SuperpixelConfig(approxcellsize=55, compactness=1e-6, iterations=7,
                           mode="dl_features")
    trc = TrainConfig(edgeweight=3.0, epochs=9, batch_size=2, seed=4,
                      learning_rate=5e-4)
    with create_project(root, "alpha", superpixel_config=spc,
                        train_config=trc) as p:
        pid, created = p.project_id, p.created_at_ms
    with open_project(root, "alpha") as p2:
        assert (p2.project_id, p2.created_at_ms) == (pid, created)
        assert p2.superpixel_config == spc
        assert p2.train_config == trc
        assert p2.tile_ids == []


def test_duplicate_name_rejected(tmp_path):
    create_project(str(tmp_path), "alpha").close()
    with pytest.raises(DuplicateError):
        create_project(str(tmp_path), "alpha")


def test_open_missing_project(tmp_path):
    with pytest.raises(NotFoundError):
        open_project(str(tmp_path), "ghost")


def test_bad_meta_magic(tmp_path):
    create_project(str(tmp_path), "alpha").close()
    meta = tmp_path / "alpha" / "project.meta"
    meta.write_text("NOTAMAGIC\n" + meta.read_text().split("\n", 1)[1])
    with pytest.raises(CorruptStoreError):
        open_project(str(tmp_path), "alpha")


def test_invalid_project_name(tmp_path):
    with pytest.raises(DataError):
        create_project(str(tmp_path), "../escape")


def test_list_projects(tmp_path):
    assert list_projects(str(tmp_path)) == []
    create_project(str(tmp_path), "b").close()
    create_project(str(tmp_path), "a").close()
    assert list_projects(str(tmp_path)) == ["a", "b"]


# ------------------------------------------------------------------ locking

def test_second_writer_locked_out(tmp_path):
    p = create_project(str(tmp_path), "alpha")
    with pytest.raises(ProjectLockedError):
        open_project(str(tmp_path), "alpha")
    reader = open_project(str(tmp_path), "alpha", readonly=True)
    assert reader.tile_ids == []
    p.close()
    open_project(str(tmp_path), "alpha").close()  # lock released


def test_readonly_cannot_write(tmp_path):
    create_project(str(tmp_path), "alpha").close()
    with open_project(str(tmp_path), "alpha", readonly=True) as p:
        with pytest.raises(ProjectLockedError):
            p.append_event("stroke", "t0000")


# -------------------------------------------------------------------- tiles

def test_tile_round_trip_bit_identical(tmp_path):
    png, arr = rgb_png(1)
    with create_project(str(tmp_path), "alpha") as p:
        tile = p.add_tile(png)
        assert tile.tile_id == "t0000"
    with open_project(str(tmp_path), "alpha") as p2:
        loaded = p2.load_tile("t0000")
        assert np.array_equal(loaded.pixels, arr)
        assert (hashlib.sha256(loaded.pixels.tobytes()).hexdigest()
                == hashlib.sha256(arr.tobytes()).hexdigest())


def test_patch_counts_recorded(tmp_path):
    with create_project(str(tmp_path), "alpha") as p:
        p.add_tile(rgb_png(1, 256)[0])
        p.add_tile(rgb_png(2, 1000)[0])
        assert p.tiles[0].n_patches == 1
        assert p.tiles[1].n_patches == 16  # 1000 pads to 1024 -> 4x4 grid
        assert len(p.patches("t0001")) == 16


def test_duplicate_tile_rejected(tmp_path):
    png, _ = rgb_png(1)
    with create_project(str(tmp_path), "alpha") as p:
        p.add_tile(png)
        with pytest.raises(DuplicateError):
            p.add_tile(png)
        assert len(p.tiles) == 1
        assert sorted(os.listdir(tmp_path / "alpha" / "tiles")) == ["t0000.png"]


def test_rgba_alpha_dropped_and_dedupes_against_rgb(tmp_path):
    _, arr = rgb_png(1)
    rgba = np.dstack([arr, np.full(arr.shape[:2], 200, np.uint8)])
    buf = io.BytesIO()
    Image.fromarray(rgba).save(buf, format="PNG")
    with create_project(str(tmp_path), "alpha") as p:
        p.add_tile(buf.getvalue())
        assert np.array_equal(p.load_tile("t0000").pixels, arr)
        with pytest.raises(DuplicateError):  # same pixels once alpha is gone
            p.add_tile(rgb_png(1)[0])


def test_tile_rejects_bad_inputs(tmp_path):
    with create_project(str(tmp_path), "alpha") as p:
        with pytest.raises(DataError):
            p.add_tile(b"not a png at all")
        buf = io.BytesIO()
        Image.fromarray(rgb_png(1)[1]).save(buf, format="JPEG")
        with pytest.raises(DataError):
            p.add_tile(buf.getvalue())
        gray = io.BytesIO()
        Image.fromarray(np.zeros((256, 256), np.uint8)).save(gray, format="PNG")
        with pytest.raises(DataError):
            p.add_tile(gray.getvalue())
        with pytest.raises(DataError):  # below the 256 px floor
            p.add_tile(rgb_png(1, 128)[0])


def test_load_missing_tile(tmp_path):
    with create_project(str(tmp_path), "alpha") as p:
        with pytest.raises(NotFoundError):
            p.load_tile("t0099")


# ------------------------------------------------------------------- labels

def test_labelmap_round_trip(tmp_path):
    rng = np.random.default_rng(7)
    labels = rng.integers(0, 3, size=(256, 256)).astype(np.uint8)
    with create_project(str(tmp_path), "alpha") as p:
        p.add_tile(rgb_png(1)[0])
        assert not p.has_labelmap("t0000")
        p.save_labelmap("t0000", labels)
        assert p.has_labelmap("t0000")
        assert np.array_equal(p.load_labelmap("t0000"), labels)
    with open_project(str(tmp_path), "alpha") as p2:
        assert np.array_equal(p2.load_labelmap("t0000"), labels)


def test_label_png_uses_documented_gray_levels(tmp_path):
    labels = np.zeros((256, 256), np.uint8)
    labels[0, 0], labels[0, 1] = 1, 2
    with create_project(str(tmp_path), "alpha") as p:
        p.add_tile(rgb_png(1)[0])
        p.save_labelmap("t0000", labels)
    img = np.asarray(Image.open(tmp_path / "alpha" / "labels" / "t0000.png"))
    assert img.dtype == np.uint8
    assert set(np.unique(img)) <= {0, 128, 255}
    assert img[0, 0] == 128 and img[0, 1] == 255


def test_labelmap_validation(tmp_path):
    with create_project(str(tmp_path), "alpha") as p:
        p.add_tile(rgb_png(1)[0])
        with pytest.raises(DataError):
            p.save_labelmap("t0000", np.full((256, 256), 7, np.uint8))
        with pytest.raises(DataError):
            p.save_labelmap("t0000", np.zeros((100, 256), np.uint8))
        with pytest.raises(NotFoundError):
            p.save_labelmap("t0042", np.zeros((256, 256), np.uint8))


def test_unsaved_labelmap_loads_as_unlabeled(tmp_path):
    with create_project(str(tmp_path), "alpha") as p:
        p.add_tile(rgb_png(1, 300)[0])
        out = p.load_labelmap("t0000")
        assert out.shape == (300, 300)
        assert not out.any()


def test_label_save_is_atomic_under_crash(tmp_path):
    """A writer that dies before the rename leaves the previous version."""
    v1 = np.ones((256, 256), np.uint8)
    v2 = np.full((256, 256), 2, np.uint8)
    with create_project(str(tmp_path), "alpha") as p:
        p.add_tile(rgb_png(1)[0])
        p.save_labelmap("t0000", v1)

        real_replace = os.replace

        def crash(src, dst):
            raise OSError("simulated crash before rename")

        os.replace = crash
        try:
            with pytest.raises(OSError):
                p.save_labelmap("t0000", v2)
        finally:
            os.replace = real_replace
        assert np.array_equal(p.load_labelmap("t0000"), v1)
        # a stray truncated temp file must also be invisible to readers
        stray = tmp_path / "alpha" / "labels" / "t0000.png.tmp999"
        stray.write_bytes(b"\x89PNG\r\n\x1a\n012345")
        assert np.array_equal(p.load_labelmap("t0000"), v1)
        p.save_labelmap("t0000", v2)  # recovery still works
        assert np.array_equal(p.load_labelmap("t0000"), v2)


# -------------------------------------------------------------- checkpoints

def small_ckpt(seed=0, iteration=3):
    net = UNet.build(UNetConfig(depth=2, base_channels=2, out_channels=3), seed)
    return ModelCheckpoint(config=net.config, params=net.params,
                           iteration=iteration)


def test_checkpoint_round_trip_and_latest(tmp_path):
    ck = small_ckpt()
    with create_project(str(tmp_path), "alpha") as p:
        name = p.save_checkpoint(ck)
        assert name == ck.checkpoint_id
        assert p.list_checkpoints() == [name]
        for key in (name, "latest"):
            back = p.load_checkpoint(key)
            assert back.content_hash() == ck.content_hash()
            assert back.iteration == 3


def test_checkpoint_latest_pointer_tracks_publishes(tmp_path):
    with create_project(str(tmp_path), "alpha") as p:
        p.save_checkpoint(small_ckpt(seed=0, iteration=1), name="first")
        p.save_checkpoint(small_ckpt(seed=9, iteration=2), name="second")
        assert p.load_checkpoint().iteration == 2
        p.save_checkpoint(small_ckpt(seed=3, iteration=5), name="side",
                          publish=False)
        assert p.load_checkpoint().iteration == 2  # unpublished stays aside
        assert p.load_checkpoint("side").iteration == 5


def test_checkpoint_integrity_verified(tmp_path):
    with create_project(str(tmp_path), "alpha") as p:
        name = p.save_checkpoint(small_ckpt())
        path = tmp_path / "alpha" / "checkpoints" / f"{name}.ckpt"
        blob = bytearray(path.read_bytes())
        blob[100] ^= 0xFF
        path.write_bytes(bytes(blob))
        with pytest.raises(CorruptStoreError):
            p.load_checkpoint()  # sha256 in the latest pointer catches it


def test_checkpoint_missing(tmp_path):
    with create_project(str(tmp_path), "alpha") as p:
        with pytest.raises(NotFoundError):
            p.load_checkpoint()
        with pytest.raises(NotFoundError):
            p.load_checkpoint("nope")


# -------------------------------------------------------------- superpixels

def test_superpixel_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    labels = rng.integers(0, 300, size=(64, 64)).astype(np.int32)
    spmap = SuperpixelMap(labels=labels, num_regions=300,
                          source_checkpoint="fine_tuned-00120")
    with create_project(str(tmp_path), "alpha") as p:
        p.add_tile(rgb_png(1)[0])
        p.save_superpixels("t0000", spmap)
        back = p.load_superpixels("t0000")
        assert np.array_equal(back.labels, labels)
        assert back.num_regions == 300
        assert back.source_checkpoint == "fine_tuned-00120"
        with pytest.raises(NotFoundError):
            p.load_superpixels("t0001")


# ------------------------------------------------------------------- events

def test_event_append_and_read_order(tmp_path):
    with create_project(str(tmp_path), "alpha") as p:
        p.add_tile(rgb_png(1)[0])
        kinds = ["tile_open", "stroke", "erase", "superpixel_select",
                 "accept_tile", "tile_close"]
        for k in kinds:
            p.append_event(k, "t0000", pixels=10)
        evs = p.read_events()
        assert [e.kind for e in evs] == kinds
        assert [e.event_id for e in evs] == [1, 2, 3, 4, 5, 6]
        ts = [e.timestamp_ms for e in evs]
        assert all(a <= b for a, b in zip(ts, ts[1:]))
        assert evs[1].payload == {"pixels": "10"}


def test_event_range_read(tmp_path):
    with create_project(str(tmp_path), "alpha") as p:
        for _ in range(10):
            p.append_event("stroke", None, n=1)
        got = p.read_events(start_id=4, end_id=7)
        assert [e.event_id for e in got] == [4, 5, 6, 7]


def test_event_survives_reopen(tmp_path):
    with create_project(str(tmp_path), "alpha") as p:
        p.append_event("stroke")
    with open_project(str(tmp_path), "alpha") as p2:
        ev = p2.append_event("erase")
        assert ev.event_id == 2  # ids continue, never restart


def test_train_markers_must_alternate(tmp_path):
    with create_project(str(tmp_path), "alpha") as p:
        with pytest.raises(DataError):
            p.append_event("train_end")
        p.append_event("train_start")
        with pytest.raises(DataError):
            p.append_event("train_start")
        p.append_event("train_end")
        p.append_event("train_start")  # fresh interval is fine again
    with open_project(str(tmp_path), "alpha") as p2:  # state survives reopen
        with pytest.raises(DataError):
            p2.append_event("train_start")


def test_unknown_event_kind_rejected(tmp_path):
    with create_project(str(tmp_path), "alpha") as p:
        with pytest.raises(DataError):
            p.append_event("scribble")


def test_partial_trailing_event_line_ignored(tmp_path):
    with create_project(str(tmp_path), "alpha") as p:
        p.append_event("stroke")
        p.append_event("erase")
        log = tmp_path / "alpha" / "events.log"
        with open(log, "ab") as f:
            f.write(b"3\t99")  # crash mid-append: no trailing newline
        assert [e.event_id for e in p.read_events()] == [1, 2]


def test_event_id_regression_detected(tmp_path):
    with create_project(str(tmp_path), "alpha") as p:
        p.append_event("stroke")
        log = tmp_path / "alpha" / "events.log"
        with open(log, "ab") as f:
            f.write(b"1\t1\tstroke\t-\t-\n")
        with pytest.raises(CorruptStoreError):
            p.read_events()


def test_event_line_format():
    ev = AnnotationEvent(7, 123456, "superpixel_select", "t0002",
                         {"pixels": 41, "region": 9})
    line = ev.to_line()
    assert line == "7\t123456\tsuperpixel_select\tt0002\tpixels=41,region=9"
    back = AnnotationEvent.from_line(line)
    assert (back.event_id, back.timestamp_ms, back.kind, back.tile_id) == \
        (7, 123456, "superpixel_select", "t0002")
    assert back.payload == {"pixels": "41", "region": "9"}


# ------------------------------------------------------------------- export

def test_export_masks_values(tmp_path):
    with create_project(str(tmp_path), "alpha") as p:
        p.add_tile(rgb_png(1)[0])
        p.add_tile(rgb_png(2)[0])
        labels = np.zeros((256, 256), np.uint8)
        labels[3, 7] = 2
        labels[100, 100] = 1  # negative is background in the export
        p.save_labelmap("t0000", labels)
        masks = p.export_masks()
        m0 = np.asarray(Image.open(io.BytesIO(masks["t0000"])))
        assert m0.shape == (256, 256) and m0.dtype == np.uint8
        assert m0[3, 7] == 255 and m0.sum() == 255
        m1 = np.asarray(Image.open(io.BytesIO(masks["t0001"])))
        assert not m1.any()  # never labeled -> all zero


def test_export_reimport_positive_sets_equal(tmp_path):
    rng = np.random.default_rng(5)
    labels = rng.integers(0, 3, size=(256, 256)).astype(np.uint8)
    with create_project(str(tmp_path), "alpha") as p:
        p.add_tile(rgb_png(1)[0])
        p.save_labelmap("t0000", labels)
        mask_png = p.export_masks()["t0000"]
        mask = np.asarray(Image.open(io.BytesIO(mask_png))) == 255
        reimported = np.where(mask, 2, 0).astype(np.uint8)
        p.save_labelmap("t0000", reimported)
        back = p.load_labelmap("t0000")
        assert np.array_equal(back == 2, labels == 2)
