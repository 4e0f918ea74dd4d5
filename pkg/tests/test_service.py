"""HTTP layer: status codes, round trips, jobs, and the event invariant."""
import io
import time

import numpy as np
import pytest
from fastapi.testclient import TestClient
from PIL import Image

from segloop.service import PRESETS, ServiceConfig, create_app, load_config
from segloop.store import LABEL_TO_GRAY
from segloop.synthetic import disk_tile, truth_labelmap


def png_of(arr, mode=None):
    buf = io.BytesIO()
    Image.fromarray(arr, mode=mode).save(buf, format="PNG")
    return buf.getvalue()


def label_png(labels):
    return png_of(LABEL_TO_GRAY[labels], mode="L")


def decode_gray(body):
    return np.asarray(Image.open(io.BytesIO(body)))


def wait_job(client, project, job_id, timeout=120.0):
    t0 = time.time()
    while time.time() - t0 < timeout:
        job = client.get(f"/projects/{project}/jobs/{job_id}").json()
        if job["state"] in ("done", "failed", "cancelled"):
            return job
        time.sleep(0.05)
    raise TimeoutError(f"job {job_id} still {job['state']}")


@pytest.fixture()
def client(tmp_path):
    app = create_app(str(tmp_path))
    with TestClient(app) as c:
        yield c


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    """One project with a tile, labels, and a fine-tuned checkpoint."""
    root = tmp_path_factory.mktemp("svc")
    app = create_app(str(root))
    with TestClient(app) as c:
        assert c.post("/projects", json={"name": "demo"}).status_code == 201
        rgb, truth = disk_tile(seed=3)
        r = c.post("/projects/demo/tiles", content=png_of(rgb))
        assert r.status_code == 201
        tile_id = r.json()["tile_id"]
        labels = truth_labelmap(truth)
        r = c.post(f"/projects/demo/tiles/{tile_id}/labels",
                   content=label_png(labels),
                   headers={"X-Edit-Kind": "stroke"})
        assert r.status_code == 200
        job = c.post("/projects/demo/jobs", json={
            "kind": "pretrain",
            "params": {"depth": 2, "base_channels": 2, "epochs": 2,
                       "seed": 1}}).json()
        assert wait_job(c, "demo", job["job_id"])["state"] == "done"
        job = c.post("/projects/demo/jobs", json={
            "kind": "finetune",
            "params": {"epochs": 20, "seed": 1, "edgeweight": 2}}).json()
        assert wait_job(c, "demo", job["job_id"])["state"] == "done"
        yield c, tile_id, labels, truth


# ------------------------------------------------------------------ basics

def test_health(client):
    r = client.get("/health")
    assert r.status_code == 200
    assert r.json()["status"] == "ok"
    assert r.json()["version"]


def test_missing_project_is_404_with_code(client):
    r = client.get("/projects/ghost")
    assert r.status_code == 404
    body = r.json()
    assert body["code"] == "project_not_found"
    assert body["status"] == 404
    assert body["message"]


def test_presets_match_structure_table(client):
    rows = client.get("/presets").json()
    assert rows["nuclei"] == {"edgeweight": 8.0, "approxcellsize": 20,
                              "compactness": 1e-4}
    assert rows["tubules"]["approxcellsize"] == 80
    assert rows["epithelium"]["compactness"] == 1e-6


def test_create_project_with_preset(client):
    r = client.post("/projects", json={"name": "nuke", "preset": "nuclei"})
    assert r.status_code == 201
    rec = r.json()
    assert rec["train"]["edgeweight"] == 8.0
    assert rec["superpixel"]["approxcellsize"] == 20
    assert client.get("/projects").json()["projects"] == ["nuke"]
    assert client.post("/projects", json={"name": "nuke"}).status_code == 409
    r = client.post("/projects", json={"name": "x", "preset": "bogus"})
    assert r.status_code == 404 and r.json()["code"] == "preset_not_found"


def test_create_project_validates_configs(client):
    r = client.post("/projects", json={"name": "bad",
                                       "train": {"edgeweight": 0.5}})
    assert r.status_code == 400


# ------------------------------------------------------------------- tiles

def test_tile_upload_and_fetch(client):
    client.post("/projects", json={"name": "p"})
    rgb, _ = disk_tile(seed=1)
    r = client.post("/projects/p/tiles", content=png_of(rgb))
    assert r.status_code == 201
    rec = r.json()
    assert rec["tile_id"] == "t0000"
    assert rec["width"] == rec["height"] == 256
    assert rec["n_patches"] == 1
    got = client.get("/projects/p/tiles/t0000.png")
    assert got.status_code == 200
    assert np.array_equal(decode_gray(got.content), rgb)
    assert client.post("/projects/p/tiles",
                       content=png_of(rgb)).status_code == 409
    assert client.post("/projects/p/tiles",
                       content=b"junk").status_code == 400
    r = client.get("/projects/p/tiles/t9999.png")
    assert r.status_code == 404 and r.json()["code"] == "tile_not_found"


def test_patch_listing_tracks_annotation(client):
    client.post("/projects", json={"name": "p"})
    rgb, truth = disk_tile(seed=2)
    client.post("/projects/p/tiles", content=png_of(rgb))
    patches = client.get("/projects/p/patches").json()["patches"]
    assert len(patches) == 1
    assert patches[0]["annotated"] is False
    client.post("/projects/p/tiles/t0000/labels",
                content=label_png(truth_labelmap(truth)),
                headers={"X-Edit-Kind": "stroke"})
    patches = client.get("/projects/p/patches").json()["patches"]
    assert patches[0]["annotated"] is True


# ------------------------------------------------------------------ labels

def test_label_round_trip_bit_exact(client):
    client.post("/projects", json={"name": "p"})
    rgb, _ = disk_tile(seed=1)
    client.post("/projects/p/tiles", content=png_of(rgb))
    rng = np.random.default_rng(0)
    labels = rng.integers(0, 3, size=(256, 256)).astype(np.uint8)
    r = client.post("/projects/p/tiles/t0000/labels",
                    content=label_png(labels),
                    headers={"X-Edit-Kind": "stroke"})
    assert r.status_code == 200
    body = r.json()
    assert body["pixels_changed"] == int((labels != 0).sum())
    got = client.get("/projects/p/tiles/t0000/labels")
    assert np.array_equal(decode_gray(got.content), LABEL_TO_GRAY[labels])


def test_label_rejections(client):
    client.post("/projects", json={"name": "p"})
    rgb, _ = disk_tile(seed=1)
    client.post("/projects/p/tiles", content=png_of(rgb))
    ok = label_png(np.zeros((256, 256), np.uint8))
    r = client.post("/projects/p/tiles/t0000/labels", content=ok,
                    headers={"X-Edit-Kind": "scribble"})
    assert r.status_code == 400 and r.json()["code"] == "bad_edit_kind"
    small = label_png(np.zeros((64, 64), np.uint8))
    r = client.post("/projects/p/tiles/t0000/labels", content=small,
                    headers={"X-Edit-Kind": "stroke"})
    assert r.status_code == 400
    wrong = png_of(np.full((256, 256), 77, np.uint8), mode="L")
    r = client.post("/projects/p/tiles/t0000/labels", content=wrong,
                    headers={"X-Edit-Kind": "stroke"})
    assert r.status_code == 400


def test_structures_counted_once_across_edits(client):
    client.post("/projects", json={"name": "p"})
    rgb, _ = disk_tile(seed=1)
    client.post("/projects/p/tiles", content=png_of(rgb))
    labels = np.zeros((256, 256), np.uint8)
    labels[10:20, 10:20] = 2
    r1 = client.post("/projects/p/tiles/t0000/labels",
                     content=label_png(labels),
                     headers={"X-Edit-Kind": "stroke"}).json()
    assert r1["structures"] == 1
    labels[10:30, 10:30] = 2  # grow the same blob
    labels[100:110, 100:110] = 2  # and add a new one
    r2 = client.post("/projects/p/tiles/t0000/labels",
                     content=label_png(labels),
                     headers={"X-Edit-Kind": "accept"}).json()
    assert r2["structures"] == 1  # only the new blob counts


# ------------------------------------------------------------------ events

def test_event_endpoints_and_invariant(client):
    client.post("/projects", json={"name": "p"})
    rgb, _ = disk_tile(seed=1)
    client.post("/projects/p/tiles", content=png_of(rgb))

    def n_events():
        return len(client.get("/projects/p/events").json()["events"])

    base = n_events()
    client.get("/projects/p/tiles/t0000.png")
    client.get("/projects/p/patches")
    assert n_events() == base  # reads never append

    r = client.post("/projects/p/events",
                    json={"kind": "tile_open", "tile_id": "t0000"})
    assert r.status_code == 201
    client.post("/projects/p/tiles/t0000/labels",
                content=label_png(np.zeros((256, 256), np.uint8)),
                headers={"X-Edit-Kind": "erase"})
    client.post("/projects/p/events",
                json={"kind": "tile_close", "tile_id": "t0000"})
    evs = client.get("/projects/p/events").json()["events"]
    assert [e["kind"] for e in evs[-3:]] == ["tile_open", "erase",
                                             "tile_close"]
    assert n_events() == base + 3  # one event per mutation, exactly

    r = client.post("/projects/p/events", json={"kind": "train_start"})
    assert r.status_code == 400 and r.json()["code"] == "bad_event_kind"
    ranged = client.get("/projects/p/events",
                        params={"start": 2, "end": 3}).json()["events"]
    assert [e["event_id"] for e in ranged] == [2, 3]


# -------------------------------------------------------------------- jobs

def test_job_lifecycle_and_busy(client):
    client.post("/projects", json={"name": "p"})
    rgb, truth = disk_tile(seed=5)
    client.post("/projects/p/tiles", content=png_of(rgb))
    client.post("/projects/p/tiles/t0000/labels",
                content=label_png(truth_labelmap(truth)),
                headers={"X-Edit-Kind": "stroke"})

    r = client.post("/projects/p/jobs", json={"kind": "sing"})
    assert r.status_code == 400 and r.json()["code"] == "bad_job_kind"
    r = client.get("/projects/p/jobs/deadbeef")
    assert r.status_code == 404 and r.json()["code"] == "job_not_found"

    # a long job holds the trainer lane so the busy rejection is observable
    slow = client.post("/projects/p/jobs", json={
        "kind": "pretrain",
        "params": {"depth": 2, "base_channels": 2, "epochs": 5000,
                   "seed": 0}})
    assert slow.status_code == 202
    r = client.post("/projects/p/jobs", json={"kind": "pretrain",
                                              "params": {"epochs": 1}})
    assert r.status_code == 409 and r.json()["code"] == "busy"
    client.delete(f"/projects/p/jobs/{slow.json()['job_id']}")
    assert wait_job(client, "p", slow.json()["job_id"])["state"] == "cancelled"

    job = client.post("/projects/p/jobs", json={
        "kind": "pretrain",
        "params": {"depth": 2, "base_channels": 2, "epochs": 30, "seed": 0}})
    assert job.status_code == 202
    done = wait_job(client, "p", job.json()["job_id"])
    assert done["state"] == "done"
    assert done["result_checkpoint"] == "base_autoencoder-00030"
    assert done["progress"] == 1.0
    # every training run wrapped in a train_start/train_end pair
    kinds = [e["kind"] for e in
             client.get("/projects/p/events").json()["events"]]
    assert kinds.count("train_start") == kinds.count("train_end") == 2


def test_finetune_requires_labels_and_checkpoint(client):
    client.post("/projects", json={"name": "p"})
    rgb, _ = disk_tile(seed=5)
    client.post("/projects/p/tiles", content=png_of(rgb))
    r = client.post("/projects/p/jobs", json={"kind": "finetune"})
    assert r.status_code == 404
    assert r.json()["code"] == "checkpoint_not_found"


def test_job_cancel(client):
    client.post("/projects", json={"name": "p"})
    rgb, _ = disk_tile(seed=5)
    client.post("/projects/p/tiles", content=png_of(rgb))
    job = client.post("/projects/p/jobs", json={
        "kind": "pretrain",
        "params": {"depth": 2, "base_channels": 2, "epochs": 500,
                   "seed": 0}}).json()
    while client.get(f"/projects/p/jobs/{job['job_id']}").json()["state"] \
            == "queued":
        time.sleep(0.01)
    r = client.delete(f"/projects/p/jobs/{job['job_id']}")
    assert r.status_code == 200
    final = wait_job(client, "p", job["job_id"])
    assert final["state"] == "cancelled"


# ------------------------------------------------- prediction and friends

def test_prediction_requires_finetuned_stage(client):
    client.post("/projects", json={"name": "p"})
    rgb, _ = disk_tile(seed=5)
    client.post("/projects/p/tiles", content=png_of(rgb))
    r = client.get("/projects/p/tiles/t0000/prediction")
    assert r.status_code == 404 and r.json()["code"] == "checkpoint_not_found"
    job = client.post("/projects/p/jobs", json={
        "kind": "pretrain",
        "params": {"depth": 2, "base_channels": 2, "epochs": 1,
                   "seed": 0}}).json()
    wait_job(client, "p", job["job_id"])
    r = client.get("/projects/p/tiles/t0000/prediction")
    assert r.status_code == 409 and r.json()["code"] == "checkpoint_stage"


def test_prediction_and_import(trained):
    client, tile_id, labels, truth = trained
    r = client.get(f"/projects/demo/tiles/{tile_id}/prediction",
                   params={"threshold": 0.5, "kind": "mask"})
    assert r.status_code == 200
    mask = decode_gray(r.content)
    assert mask.shape == (256, 256)
    assert set(np.unique(mask)) <= {0, 255}
    r = client.get(f"/projects/demo/tiles/{tile_id}/prediction",
                   params={"kind": "probability"})
    prob = decode_gray(r.content)
    assert prob.shape == (256, 256)
    r = client.get(f"/projects/demo/tiles/{tile_id}/prediction",
                   params={"kind": "bogus"})
    assert r.status_code == 400

    before = decode_gray(
        client.get(f"/projects/demo/tiles/{tile_id}/labels").content)
    r = client.post(f"/projects/demo/tiles/{tile_id}/prediction/import",
                    json={"threshold": 0.5})
    assert r.status_code == 200
    after = decode_gray(
        client.get(f"/projects/demo/tiles/{tile_id}/labels").content)
    assert np.array_equal(after[before != 0], before[before != 0])
    evs = client.get("/projects/demo/events").json()["events"]
    assert evs[-1]["kind"] == "import_prediction"


def test_superpixels_and_region(trained):
    client, tile_id, _, _ = trained
    r = client.get(f"/projects/demo/tiles/{tile_id}/superpixels",
                   params={"mode": "intensity", "approxcellsize": 32})
    assert r.status_code == 200
    n = int(r.headers["X-Num-Regions"])
    labels = np.asarray(Image.open(io.BytesIO(r.content)))
    assert labels.shape == (256, 256)
    assert labels.max() == n - 1
    r2 = client.get(f"/projects/demo/tiles/{tile_id}/superpixels",
                    params={"mode": "dl", "approxcellsize": 32})
    assert r2.status_code == 200
    assert r2.headers["X-Source-Checkpoint"].startswith("fine_tuned")
    r3 = client.get(f"/projects/demo/tiles/{tile_id}/superpixels/region",
                    params={"x": 10, "y": 20, "approxcellsize": 32})
    mask = decode_gray(r3.content)
    assert mask[20, 10] == 255
    r4 = client.get(f"/projects/demo/tiles/{tile_id}/superpixels",
                    params={"mode": "voronoi"})
    assert r4.status_code == 400 and r4.json()["code"] == "bad_mode"
    r5 = client.get(f"/projects/demo/tiles/{tile_id}/superpixels/region",
                    params={"x": 999, "y": 0, "approxcellsize": 32})
    assert r5.status_code == 400


def test_embedding_flow(trained):
    client, tile_id, _, _ = trained
    # a second, unlabeled tile so the embedding has >= 2 vectors
    rgb2, _ = disk_tile(seed=9)
    other = client.post("/projects/demo/tiles", content=png_of(rgb2)).json()
    job = client.post("/projects/demo/jobs",
                      json={"kind": "embed", "params": {"seed": 0}}).json()
    assert wait_job(client, "demo", job["job_id"])["state"] == "done"
    points = client.get("/projects/demo/embedding").json()["points"]
    assert len(points) == 2  # two 256px tiles, one patch each
    flags = {q["patch_id"]: q["annotated"] for q in points}
    assert flags[f"{tile_id}-p000"] is True
    assert flags[f"{other['tile_id']}-p000"] is False
    csv = client.get("/projects/demo/embedding",
                     params={"format": "csv"}).text
    assert csv.splitlines()[0] == "patch_id,x,y,annotated"
    r = client.post("/projects/demo/embedding/suggest", json={"n": 1})
    assert r.json()["patch_ids"] == [f"{other['tile_id']}-p000"]
    r = client.post("/projects/demo/embedding/suggest", json={"n": 2})
    assert r.status_code == 400  # only one patch is unannotated


def test_embedding_missing_is_404(client):
    client.post("/projects", json={"name": "p"})
    r = client.get("/projects/p/embedding")
    assert r.status_code == 404 and r.json()["code"] == "embedding_not_found"


def test_metrics_endpoint(trained):
    client, _, _, _ = trained
    r = client.get("/projects/demo/metrics",
                   params={"sample_structures": 10, "sample_minutes": 5})
    assert r.status_code == 200
    body = r.json()
    assert body["qa_t"] <= body["total_t"]
    assert body["structure_count"] >= 1
    assert "theta_label" in body
    text = client.get("/projects/demo/metrics",
                      params={"format": "text"}).text
    assert "speedup theta_t" in text
    csv = client.get("/projects/demo/metrics",
                     params={"format": "csv"}).text
    assert csv.startswith("m_t,qa_t,total_t,theta_t,structure_count")


def test_metrics_too_short(client):
    client.post("/projects", json={"name": "p"})
    r = client.get("/projects/p/metrics")
    assert r.status_code == 400


# -------------------------------------------------------------- config file

def test_load_config_roundtrip(tmp_path):
    path = tmp_path / "segloop.cfg"
    path.write_text(
        "# server\n"
        "bind=0.0.0.0:9000\n"
        "trainer_workers=1\n"
        "aux_workers=2\n"
        "preset.nuclei.edgeweight=9\n"
        "preset.vessels.edgeweight=4\n"
        "preset.vessels.approxcellsize=40\n"
        "preset.vessels.compactness=1e-5\n")
    cfg = load_config(str(path))
    assert cfg.bind == "0.0.0.0:9000"
    assert cfg.aux_workers == 2
    assert cfg.presets["nuclei"]["edgeweight"] == 9.0
    assert cfg.presets["nuclei"]["approxcellsize"] == 20  # default kept
    assert cfg.presets["vessels"] == {"edgeweight": 4.0,
                                      "approxcellsize": 40,
                                      "compactness": 1e-5}
    assert cfg.presets["tubules"] == PRESETS["tubules"]
    (tmp_path / "bad.cfg").write_text("nonsense=1\n")
    with pytest.raises(Exception):
        load_config(str(tmp_path / "bad.cfg"))


def test_service_config_defaults():
    cfg = ServiceConfig()
    assert cfg.bind.startswith("127.0.0.1")  # loopback by default
    assert cfg.trainer_workers == 1 and cfg.aux_workers == 1
