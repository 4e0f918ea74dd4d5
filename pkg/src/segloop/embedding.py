"""2D layout of patch feature vectors plus diversity-driven patch suggestion.

The layout is a trimmed-down neighbor-embedding: exact kNN graph, local
exponential edge weights calibrated per point, fuzzy-union symmetrization, and
a seeded attract/repulse gradient pass with negative sampling. It exists to
place similar patches near each other, not to reproduce any particular
manifold-learning package.
"""
from __future__ import annotations

import io
from dataclasses import dataclass

import numpy as np
from scipy import sparse
from scipy.spatial.distance import cdist

from .errors import DataError


@dataclass
class EmbeddingPoint:
    patch_id: str
    x: float
    y: float
    annotated: bool = False
    cluster_hint: int | None = None


def knn_graph(vectors: np.ndarray, k: int):
    """Exact Euclidean k-nearest neighbors, self excluded, ties broken by the
    lower index. Returns (indices N x k, distances N x k)."""
    v = np.asarray(vectors, dtype=np.float64)
    if v.ndim != 2 or v.shape[0] < 2:
        raise DataError(f"need at least 2 vectors, got shape {v.shape}")
    n = v.shape[0]
    if not 1 <= k < n:
        raise DataError(f"k must satisfy 1 <= k < {n}, got {k}")
    # explicit pairwise differences, not the Gram-matrix expansion: duplicate
    # rows must come out bitwise equal so index tie-breaks are exact
    d2 = cdist(v, v, "sqeuclidean")
    np.fill_diagonal(d2, np.inf)
    order = np.argsort(d2, axis=1, kind="stable")  # stable: ties keep low index
    idx = order[:, :k]
    dist = np.sqrt(np.take_along_axis(d2, idx, axis=1))
    return idx, dist


def _local_sigmas(dist: np.ndarray, k: int) -> np.ndarray:
    """Per-point scale chosen so sum_j exp(-(d_j - d_min)/sigma) ~ log2(k)
    (binary search, 20 iterations, tolerance 1e-3)."""
    target = max(np.log2(k), 1.0)
    sigmas = np.empty(dist.shape[0])
    for i, row in enumerate(dist):
        shifted = row - row.min()

        def mass(s):
            return float(np.exp(-shifted / s).sum())

        lo, hi = 1e-8, 1.0
        for _ in range(64):
            if mass(hi) >= target:
                break
            hi *= 2.0
        for _ in range(20):
            mid = (lo + hi) / 2.0
            m = mass(mid)
            if abs(m - target) < 1e-3:
                break
            if m > target:
                hi = mid
            else:
                lo = mid
        sigmas[i] = (lo + hi) / 2.0
    return sigmas


def _edge_list(vectors: np.ndarray, k: int):
    n = vectors.shape[0]
    idx, dist = knn_graph(vectors, k)
    sigmas = _local_sigmas(dist, k)
    w = np.exp(-(dist - dist.min(axis=1, keepdims=True)) / sigmas[:, None])
    rows = np.repeat(np.arange(n), k)
    mat = sparse.coo_matrix((w.reshape(-1), (rows, idx.reshape(-1))), shape=(n, n)).tocsr()
    sym = mat + mat.T - mat.multiply(mat.T)  # fuzzy union
    coo = sparse.triu(sym, k=1).tocoo()
    return coo.row, coo.col, coo.data


def embed_2d(vectors: np.ndarray, seed: int, epochs: int = 200, k: int = 15,
             patch_ids=None, annotated=None) -> list[EmbeddingPoint]:
    """Seeded 2D layout; identical inputs and seed give identical coordinates."""
    v = np.atleast_2d(np.asarray(vectors, dtype=np.float64))
    n = v.shape[0]
    if patch_ids is None:
        patch_ids = [f"p{i:05d}" for i in range(n)]
    if annotated is None:
        annotated = [False] * n
    if n == 1:
        return [EmbeddingPoint(patch_ids[0], 0.0, 0.0, bool(annotated[0]))]

    k = min(k, n - 1)
    heads, tails, weights = _edge_list(v, k)
    rng = np.random.default_rng(seed)
    y = rng.normal(0.0, 10.0, size=(n, 2))

    # Early epochs boost attraction so points that land amid the wrong
    # cluster at init get pulled through it instead of stranded behind its
    # repulsive mass.
    exagg_until = epochs // 4
    for epoch in range(epochs):
        alpha = 1.0 - epoch / max(epochs, 1)
        boost = 8.0 if epoch < exagg_until else 1.0
        diff = y[heads] - y[tails]
        r2 = (diff ** 2).sum(axis=1)
        # 1/sqrt keeps the pull strong at long range; clip caps any one move
        att = (-2.0 * boost * weights / np.sqrt(1.0 + r2))[:, None] * diff
        att = np.clip(att, -4.0, 4.0) * alpha
        np.add.at(y, heads, att)
        np.add.at(y, tails, -att)

        negs = rng.integers(0, n, size=(len(heads), 5))
        for c in range(5):
            dn = y[heads] - y[negs[:, c]]
            rn = (dn ** 2).sum(axis=1)
            rep = (2.0 / ((0.001 + rn) * (1.0 + rn)))[:, None] * dn
            rep = np.clip(rep, -4.0, 4.0) * alpha
            np.add.at(y, heads, rep)

    if not np.isfinite(y).all():
        raise DataError("layout diverged to non-finite coordinates")
    return [EmbeddingPoint(patch_ids[i], float(y[i, 0]), float(y[i, 1]),
                           bool(annotated[i])) for i in range(n)]


def suggest_patches(points: list[EmbeddingPoint], n: int, annotated_set=frozenset()):
    """Greedy farthest-point sampling over unannotated points. Seeded from the
    point farthest from the annotated set, or farthest from the centroid when
    nothing is annotated yet. Deterministic: ties go to the earlier point."""
    coords = np.array([(p.x, p.y) for p in points], dtype=np.float64)
    is_ann = np.array([p.annotated or p.patch_id in annotated_set for p in points])
    avail = np.nonzero(~is_ann)[0]
    if n > len(avail):
        raise DataError(f"asked for {n} suggestions, only {len(avail)} unannotated")
    if n == 0:
        return []

    def dists_to(pool_xy, pts_xy):
        return np.sqrt(((pts_xy[:, None, :] - pool_xy[None]) ** 2).sum(-1))

    anchor_xy = coords[is_ann]
    cand_xy = coords[avail]
    if len(anchor_xy):
        min_d = dists_to(anchor_xy, cand_xy).min(axis=1)
        seeding = False
    else:
        # centroid distance only elects the seed; it is not a real anchor
        centroid = coords.mean(axis=0, keepdims=True)
        min_d = dists_to(centroid, cand_xy)[:, 0]
        seeding = True

    chosen = []
    for _ in range(n):
        pick = int(np.argmax(min_d))  # first occurrence wins ties
        chosen.append(int(avail[pick]))
        d_new = np.sqrt(((cand_xy - cand_xy[pick]) ** 2).sum(-1))
        min_d = d_new if seeding else np.minimum(min_d, d_new)
        seeding = False
        min_d[pick] = -np.inf
    return [points[i].patch_id for i in chosen]


def export_csv(points: list[EmbeddingPoint]) -> str:
    buf = io.StringIO()
    buf.write("patch_id,x,y,annotated\n")
    for p in points:
        buf.write(f"{p.patch_id},{p.x:.6f},{p.y:.6f},{int(p.annotated)}\n")
    return buf.getvalue()
