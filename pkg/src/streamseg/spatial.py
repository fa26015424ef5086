"""Spatial indexing, exact K-NN, cross-frame matching, and geometric features.

The index is backed by scipy's cKDTree for speed; results are re-ranked with
exactly the arithmetic of the brute-force definition (Euclidean distance,
ties broken by smaller original index) so queries are reproducible and match
an O(N^2) scan bit-for-bit.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .core import Frame
from .errors import EmptyInput, KTooLarge, LengthMismatch, NonFiniteCoordinate

#: Extra candidates fetched per query before exact re-ranking.
_SLACK = 8


class SpatialIndex:
    """Immutable K-NN index over one frame's points.

    Safe for concurrent queries once built.
    """

    def __init__(self, points):
        points = np.asarray(points, dtype=np.float64)
        if points.ndim != 2 or points.shape[1] != 3 or points.shape[0] == 0:
            raise EmptyInput(f"expected non-empty N x 3 points, got shape {points.shape}")
        if not np.all(np.isfinite(points)):
            raise NonFiniteCoordinate("points contain non-finite coordinates")
        self._points = points.copy()
        self._points.setflags(write=False)
        self._tree = cKDTree(self._points)

    @property
    def points(self) -> np.ndarray:
        return self._points

    def __len__(self):
        return self._points.shape[0]


def build_index(points) -> SpatialIndex:
    """Build a K-NN index over all N points; deterministic for fixed input order."""
    return SpatialIndex(points)


def _exact_rerank(points, queries, cand_idx):
    """Sort candidate indices per row by (exact distance, original index)."""
    diff = points[cand_idx] - queries[:, None, :]
    d = np.sqrt(np.einsum("qkd,qkd->qk", diff, diff))
    # stable two-pass sort: secondary key (index) first, then distance
    o1 = np.argsort(cand_idx, axis=1, kind="stable")
    i1 = np.take_along_axis(cand_idx, o1, axis=1)
    d1 = np.take_along_axis(d, o1, axis=1)
    o2 = np.argsort(d1, axis=1, kind="stable")
    return np.take_along_axis(i1, o2, axis=1), np.take_along_axis(d1, o2, axis=1)


def knn_batch(index: SpatialIndex, queries, k: int):
    """K nearest neighbors for each query row.

    Returns (idx, dist), each of shape (Q, k); distances are non-decreasing
    per row and ties are broken by the smaller original point index.
    """
    pts = index.points
    n = len(index)
    if k < 1 or k > n:
        raise KTooLarge(f"k={k} exceeds the number of indexed points ({n})")
    queries = np.atleast_2d(np.asarray(queries, dtype=np.float64))

    kq = min(n, k + _SLACK)
    ds, cand = index._tree.query(queries, k=kq)
    if kq == 1:
        ds = ds[:, None]
        cand = cand[:, None]
    idx, dist = _exact_rerank(pts, queries, cand)

    if kq < n:
        # boundary check: the exact k-th distance must be strictly inside the
        # candidate set, otherwise ties may straddle the cutoff
        margin = 1e-9 * (1.0 + ds[:, -1])
        unsafe = dist[:, k - 1] >= ds[:, -1] - margin
        for q in np.nonzero(unsafe)[0]:
            r = dist[q, k - 1] * (1.0 + 1e-9) + 1e-12
            ball = np.asarray(index._tree.query_ball_point(queries[q], r), dtype=np.int64)
            bi, bd = _exact_rerank(pts, queries[q:q + 1], ball[None, :])
            idx[q, :k], dist[q, :k] = bi[0, :k], bd[0, :k]
    return idx[:, :k], dist[:, :k]


def knn(index: SpatialIndex, query, k: int):
    """K nearest neighbors of a single query point as (index, distance) pairs."""
    idx, dist = knn_batch(index, np.asarray(query, dtype=np.float64)[None, :], k)
    return list(zip(idx[0].tolist(), dist[0].tolist()))


@dataclass(frozen=True)
class CorrespondenceSet:
    """Point pairs matched between frame t and frame t-w.

    idx_t / idx_prev are parallel arrays of point indices; dist holds the
    residual Euclidean distance (meters) after applying the relative pose.
    """

    idx_t: np.ndarray
    idx_prev: np.ndarray
    dist: np.ndarray

    def __post_init__(self):
        if not (len(self.idx_t) == len(self.idx_prev) == len(self.dist)):
            raise LengthMismatch("correspondence arrays must have equal length")

    def __len__(self):
        return len(self.idx_t)

    @property
    def pairs(self):
        return list(zip(self.idx_t.tolist(), self.idx_prev.tolist(), self.dist.tolist()))


def relative_transform(pose_t, pose_prev) -> np.ndarray:
    """Rigid transform taking frame_prev sensor coordinates into frame t's."""
    r_t = pose_t[:3, :3]
    t_t = pose_t[:3, 3]
    inv = np.eye(4)
    inv[:3, :3] = r_t.T
    inv[:3, 3] = -r_t.T @ t_t
    return inv @ pose_prev


def match_correspondences(frame_t: Frame, frame_prev: Frame, tau: float,
                          index_t: SpatialIndex | None = None) -> CorrespondenceSet:
    """Match each point of frame_prev to its nearest neighbor in frame t.

    frame_prev points are mapped through the relative pose first; a pair is
    kept iff the residual distance is strictly below tau.
    """
    if tau <= 0:
        raise ValueError("tau must be positive")
    rel = relative_transform(frame_t.pose, frame_prev.pose)
    moved = frame_prev.points @ rel[:3, :3].T + rel[:3, 3]
    if index_t is None:
        index_t = build_index(frame_t.points)
    idx, dist = knn_batch(index_t, moved, 1)
    keep = dist[:, 0] < tau
    prev_idx = np.nonzero(keep)[0].astype(np.int64)
    return CorrespondenceSet(idx[keep, 0], prev_idx, dist[keep, 0])


def local_geometric_features(points, index: SpatialIndex, k_feat: int) -> np.ndarray:
    """Per-point 9-dim geometric descriptor.

    Columns: x, y, z, range, height, linearity, planarity, scattering, and
    local density (k_feat over the neighborhood bounding-sphere volume).
    Eigen-features come from the covariance of the k_feat nearest neighbors;
    degenerate neighborhoods (largest eigenvalue < 1e-12) emit zeros.
    """
    if k_feat < 3:
        raise ValueError("k_feat must be at least 3")
    points = np.asarray(points, dtype=np.float64)
    idx, dist = knn_batch(index, points, k_feat)

    neigh = index.points[idx]                       # (N, k, 3)
    mu = neigh.mean(axis=1, keepdims=True)
    centered = neigh - mu
    cov = np.einsum("nkd,nke->nde", centered, centered) / k_feat
    eig = np.linalg.eigvalsh(cov)                   # ascending
    eig = np.clip(eig, 0.0, None)
    l1, l2, l3 = eig[:, 2], eig[:, 1], eig[:, 0]

    ok = l1 >= 1e-12
    safe_l1 = np.where(ok, l1, 1.0)
    linearity = np.where(ok, (l1 - l2) / safe_l1, 0.0)
    planarity = np.where(ok, (l2 - l3) / safe_l1, 0.0)
    scattering = np.where(ok, l3 / safe_l1, 0.0)

    radius = dist[:, -1]
    volume = np.maximum(4.0 / 3.0 * np.pi * radius ** 3, 1e-9)
    density = k_feat / volume

    rng = np.sqrt(np.einsum("nd,nd->n", points, points))
    return np.column_stack([
        points[:, 0], points[:, 1], points[:, 2],
        rng, points[:, 2],
        linearity, planarity, scattering, density,
    ])
