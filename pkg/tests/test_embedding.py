"""kNN graph, 2D layout, and farthest-point patch suggestion."""
import numpy as np
import pytest
from scipy.spatial.distance import cdist

from segloop.embedding import (
    EmbeddingPoint,
    embed_2d,
    export_csv,
    knn_graph,
    suggest_patches,
)
from segloop.errors import DataError


def brute_force_knn(vectors, k):
    """O(N^2) reference: full pairwise scan, ties broken by lower index."""
    v = np.asarray(vectors, dtype=np.float64)
    n = v.shape[0]
    idx = np.empty((n, k), dtype=np.int64)
    dist = np.empty((n, k))
    for i in range(n):
        d = np.sqrt(((v - v[i]) ** 2).sum(axis=1))
        d[i] = np.inf
        order = sorted(range(n), key=lambda j: (d[j], j))[:k]
        idx[i] = order
        dist[i] = d[order]
    return idx, dist


# ---------------------------------------------------------------- knn_graph

def test_knn_collinear_hand_case():
    # points at 0, 1, 10: nearest of 0 is 1, of 1 is 0, of 10 is 1
    idx, dist = knn_graph(np.array([[0.0], [1.0], [10.0]]), k=1)
    assert idx[:, 0].tolist() == [1, 0, 1]
    assert np.allclose(dist[:, 0], [1.0, 1.0, 9.0])


def test_knn_never_lists_self():
    rng = np.random.default_rng(3)
    v = rng.normal(size=(40, 4))
    idx, _ = knn_graph(v, k=10)
    for i in range(40):
        assert i not in idx[i]


def test_knn_matches_brute_force_n50():
    rng = np.random.default_rng(11)
    v = rng.normal(size=(50, 8))
    idx, dist = knn_graph(v, k=5)
    ref_idx, ref_dist = brute_force_knn(v, 5)
    assert np.array_equal(idx, ref_idx)
    assert np.allclose(dist, ref_dist)


@pytest.mark.parametrize("n,k", [(2, 1), (7, 3), (63, 15), (200, 9)])
def test_knn_matches_brute_force_sizes(n, k):
    rng = np.random.default_rng(n * 31 + k)
    v = rng.normal(size=(n, 6))
    if n >= 10:
        v[n // 2] = v[0]  # duplicate row: distance ties must break by index
        v[n - 1] = v[1]
    idx, dist = knn_graph(v, k)
    ref_idx, ref_dist = brute_force_knn(v, k)
    assert np.array_equal(idx, ref_idx)
    assert np.allclose(dist, ref_dist)


def test_knn_k_bounds():
    v = np.zeros((5, 2))
    with pytest.raises(DataError):
        knn_graph(v, k=5)
    with pytest.raises(DataError):
        knn_graph(v, k=0)
    with pytest.raises(DataError):
        knn_graph(np.zeros((1, 2)), k=1)


# ----------------------------------------------------------------- embed_2d

def test_embed_single_point_at_origin():
    pts = embed_2d(np.array([[1.0, 2.0, 3.0]]), seed=0)
    assert len(pts) == 1
    assert (pts[0].x, pts[0].y) == (0.0, 0.0)


def test_embed_deterministic():
    rng = np.random.default_rng(5)
    v = rng.normal(size=(30, 8))
    a = embed_2d(v, seed=9)
    b = embed_2d(v, seed=9)
    assert [(p.x, p.y) for p in a] == [(p.x, p.y) for p in b]
    c = embed_2d(v, seed=10)
    assert [(p.x, p.y) for p in a] != [(p.x, p.y) for p in c]


@pytest.mark.parametrize("seed,scale", [(0, 1.0), (1, 100.0), (2, 1e-4)])
def test_embed_coordinates_finite(seed, scale):
    rng = np.random.default_rng(seed)
    v = rng.normal(size=(25, 5)) * scale
    pts = embed_2d(v, seed=seed)
    xy = np.array([(p.x, p.y) for p in pts])
    assert np.isfinite(xy).all()


def test_embed_metadata_passthrough():
    v = np.random.default_rng(0).normal(size=(4, 3))
    pts = embed_2d(v, seed=1, patch_ids=["a", "b", "c", "d"],
                   annotated=[True, False, False, True])
    assert [p.patch_id for p in pts] == ["a", "b", "c", "d"]
    assert [p.annotated for p in pts] == [True, False, False, True]


def test_embed_separates_distant_clusters():
    # two 16D Gaussian clusters, centers 10 sigma apart, 30 points each;
    # separated in 2D when every inter-cluster distance exceeds every
    # intra-cluster one. Required for at least 4 of the 5 layout seeds.
    rng = np.random.default_rng(42)
    a = rng.normal(0.0, 1.0, size=(30, 16))
    b = rng.normal(0.0, 1.0, size=(30, 16))
    b[:, 0] += 10.0
    v = np.vstack([a, b])
    separated = 0
    for seed in range(5):
        xy = np.array([(p.x, p.y) for p in embed_2d(v, seed=seed)])
        da, db = xy[:30], xy[30:]
        worst_intra = max(cdist(da, da).max(), cdist(db, db).max())
        best_inter = cdist(da, db).min()
        separated += best_inter > worst_intra
    assert separated >= 4


# ---------------------------------------------------------- suggest_patches

def _points(coords, annotated=None):
    annotated = annotated or [False] * len(coords)
    return [EmbeddingPoint(f"p{i}", float(x), float(y), ann)
            for i, ((x, y), ann) in enumerate(zip(coords, annotated))]


def test_suggest_all_unannotated_returns_all():
    pts = _points([(0, 0), (1, 0), (0, 1), (5, 5)])
    got = suggest_patches(pts, n=4)
    assert sorted(got) == ["p0", "p1", "p2", "p3"]


def test_suggest_unit_square_picks_diagonal():
    pts = _points([(0, 0), (1, 0), (1, 1), (0, 1)])
    got = suggest_patches(pts, n=2)
    pair = {got[0], got[1]}
    assert pair in ({"p0", "p2"}, {"p1", "p3"})


def test_suggest_spreads_better_than_random():
    # farthest-point picks should beat a uniform random subset on minimum
    # pairwise spacing nearly always
    rng = np.random.default_rng(17)
    wins = 0
    for _ in range(100):
        coords = rng.uniform(0, 100, size=(40, 2))
        pts = _points(coords.tolist())
        ids = suggest_patches(pts, n=6)
        sel = coords[[int(i[1:]) for i in ids]]
        rnd = coords[rng.choice(40, size=6, replace=False)]
        d_sel = cdist(sel, sel)
        d_rnd = cdist(rnd, rnd)
        np.fill_diagonal(d_sel, np.inf)
        np.fill_diagonal(d_rnd, np.inf)
        wins += d_sel.min() >= d_rnd.min()
    assert wins >= 90


def test_suggest_deterministic_and_distinct():
    rng = np.random.default_rng(23)
    coords = rng.uniform(-50, 50, size=(30, 2))
    ann = [i % 5 == 0 for i in range(30)]
    pts = _points(coords.tolist(), ann)
    a = suggest_patches(pts, n=8)
    b = suggest_patches(pts, n=8)
    assert a == b
    assert len(set(a)) == 8
    assert not any(pid in {"p0", "p5", "p10", "p15", "p20", "p25"} for pid in a)


def test_suggest_seeds_far_from_annotated():
    # one annotated point at the origin: first pick must be the far point
    pts = _points([(0, 0), (1, 1), (10, 10)], annotated=[True, False, False])
    assert suggest_patches(pts, n=1) == ["p2"]


def test_suggest_respects_annotated_set_argument():
    pts = _points([(0, 0), (1, 0), (2, 0)])
    got = suggest_patches(pts, n=2, annotated_set=frozenset({"p1"}))
    assert sorted(got) == ["p0", "p2"]


def test_suggest_n_exceeds_available():
    pts = _points([(0, 0), (1, 0)], annotated=[True, False])
    with pytest.raises(DataError):
        suggest_patches(pts, n=2)


def test_suggest_zero_returns_empty():
    assert suggest_patches(_points([(0, 0), (1, 1)]), n=0) == []


# --------------------------------------------------------------------- CSV

def test_export_csv_layout():
    pts = [EmbeddingPoint("t0-p000", 1.25, -3.5, True),
           EmbeddingPoint("t0-p001", 0.0, 0.125, False)]
    lines = export_csv(pts).splitlines()
    assert lines[0] == "patch_id,x,y,annotated"
    assert lines[1] == "t0-p000,1.250000,-3.500000,1"
    assert lines[2] == "t0-p001,0.000000,0.125000,0"
