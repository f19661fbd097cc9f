"""Point cloud containers and the spatial queries everything else is built on.

All queries are exact linear scans (no spatial index); clouds at the scales
this package targets (N <= 8192) do not need one. Every function is
deterministic: distance ties break toward the smaller point index.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

# Regularizer for inverse-distance weights; keeps the coincident-point limit.
IDW_EPS = 1e-8


def _as_coords(arr, name: str = "coords") -> np.ndarray:
    a = np.ascontiguousarray(arr, dtype=np.float64)
    if a.ndim != 2 or a.shape[1] != 3:
        raise ValueError(f"{name} must be (N, 3), got {a.shape}")
    if a.shape[0] < 1:
        raise ValueError(f"{name} must contain at least one point")
    if not np.all(np.isfinite(a)):
        raise ValueError(f"{name} contains non-finite values")
    return a


@dataclass
class PointCloudFrame:
    """One frame: N point coordinates plus optional features and validity mask.

    Masked-out points (valid_mask False) still participate in geometry queries;
    losses and metrics skip them.
    """

    coords: np.ndarray
    feats: Optional[np.ndarray] = None
    valid_mask: Optional[np.ndarray] = None

    def __post_init__(self):
        self.coords = _as_coords(self.coords)
        n = self.coords.shape[0]
        if self.feats is not None:
            self.feats = np.ascontiguousarray(self.feats, dtype=np.float64)
            if self.feats.ndim != 2 or self.feats.shape[0] != n:
                raise ValueError(
                    f"feats must have {n} rows, got shape {self.feats.shape}"
                )
        if self.valid_mask is None:
            self.valid_mask = np.ones(n, dtype=bool)
        else:
            self.valid_mask = np.asarray(self.valid_mask, dtype=bool).reshape(n)

    @property
    def n(self) -> int:
        return self.coords.shape[0]

    @property
    def feat_dim(self) -> int:
        return 0 if self.feats is None else self.feats.shape[1]


@dataclass
class CloudSequence:
    """An ordered sequence of frames with optional ground-truth backward flows.

    gt_flows[i] is the backward flow of frames[i + 1]: row j holds the
    displacement of that frame's point j from its own position one step
    earlier. n_input marks how many leading frames are observations; the
    remainder are future frames (None means all frames are input).
    """

    frames: list[PointCloudFrame]
    gt_flows: Optional[list[np.ndarray]] = None
    n_input: Optional[int] = None

    def __post_init__(self):
        if len(self.frames) < 2:
            raise ValueError("a sequence needs at least two frames")
        if self.gt_flows is not None:
            if len(self.gt_flows) != len(self.frames) - 1:
                raise ValueError(
                    f"expected {len(self.frames) - 1} flow matrices, "
                    f"got {len(self.gt_flows)}"
                )
            self.gt_flows = [
                np.ascontiguousarray(f, dtype=np.float64) for f in self.gt_flows
            ]
            for i, f in enumerate(self.gt_flows):
                n = self.frames[i + 1].n
                if f.shape != (n, 3):
                    raise ValueError(
                        f"gt_flows[{i}] must be ({n}, 3), got {f.shape}"
                    )
        if self.n_input is not None and not (2 <= self.n_input <= len(self.frames)):
            raise ValueError("n_input out of range")

    @property
    def t(self) -> int:
        return len(self.frames)

    def flow_of(self, frame_index: int) -> np.ndarray:
        """Ground-truth backward flow of frames[frame_index] (index >= 1)."""
        if self.gt_flows is None:
            raise ValueError("sequence carries no ground-truth flows")
        return self.gt_flows[frame_index - 1]


@dataclass
class NeighborList:
    """Per-query neighbor indices and Euclidean distances.

    Each per-query array is sorted ascending by distance, ties broken by
    ascending index. Lists may be ragged (ball query) or empty.
    """

    indices: list[np.ndarray]
    distances: list[np.ndarray]

    def __len__(self) -> int:
        return len(self.indices)

    def to_padded(self, width: Optional[int] = None):
        """Rectangularize to (n_query, width) index/distance/mask arrays.

        Padded slots carry index 0, distance 0 and mask 0.
        """
        if width is None:
            width = max((len(ix) for ix in self.indices), default=0)
        width = max(width, 1)
        nq = len(self.indices)
        idx = np.zeros((nq, width), dtype=np.int64)
        dist = np.zeros((nq, width), dtype=np.float64)
        mask = np.zeros((nq, width), dtype=np.float64)
        for q, (ix, dx) in enumerate(zip(self.indices, self.distances)):
            k = len(ix)
            idx[q, :k] = ix
            dist[q, :k] = dx
            mask[q, :k] = 1.0
        return idx, dist, mask


def pairwise_sq_distances(query: np.ndarray, target: np.ndarray) -> np.ndarray:
    """Dense (n_query, n_target) squared Euclidean distance matrix."""
    diff = query[:, None, :] - target[None, :, :]
    return np.einsum("ijk,ijk->ij", diff, diff)


def pairwise_distances(query: np.ndarray, target: np.ndarray) -> np.ndarray:
    """Dense (n_query, n_target) Euclidean distance matrix."""
    return np.sqrt(pairwise_sq_distances(query, target))


def _neighbor_order(dmat: np.ndarray, width: int) -> np.ndarray:
    """First `width` columns per row, sorted by (distance, index).

    A stable sort on distances keeps ties in ascending-index order.
    """
    return np.argsort(dmat, axis=1, kind="stable")[:, :width]


def knn_padded(query_coords: np.ndarray, target_coords: np.ndarray, k: int
               ) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized exact k-NN: (n_query, k) index and distance arrays."""
    nt = target_coords.shape[0]
    if k < 1:
        raise ValueError("k must be positive")
    if k > nt:
        raise ValueError(
            f"insufficient points: k={k} exceeds target size {nt}")
    d2 = pairwise_sq_distances(query_coords, target_coords)
    idx = _neighbor_order(d2, k)
    return idx.astype(np.int64), np.sqrt(np.take_along_axis(d2, idx, axis=1))


def ball_padded(query_coords: np.ndarray, target_coords: np.ndarray,
                radius: float, kmax: int
                ) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Vectorized ball query: (idx, dist, mask) arrays of width kmax.

    Slots beyond a query's neighbor count carry index 0, distance 0, mask 0.
    """
    if radius <= 0:
        raise ValueError("radius must be positive")
    if kmax < 1:
        raise ValueError("kmax must be positive")
    d2 = pairwise_sq_distances(query_coords, target_coords)
    gated = np.where(d2 <= radius * radius, d2, np.inf)
    width = min(kmax, target_coords.shape[0])
    idx = _neighbor_order(gated, width)
    dist = np.take_along_axis(gated, idx, axis=1)
    mask = np.isfinite(dist)
    return (np.where(mask, idx, 0).astype(np.int64),
            np.where(mask, np.sqrt(np.where(mask, dist, 0.0)), 0.0),
            mask.astype(np.float64))


def knn(query: PointCloudFrame, target: PointCloudFrame, k: int) -> NeighborList:
    """Exact k nearest target points per query point.

    Raises:
        ValueError: if k exceeds the target point count ("insufficient points").
    """
    idx, dist = knn_padded(query.coords, target.coords, k)
    return NeighborList(
        indices=[idx[i].copy() for i in range(len(idx))],
        distances=[dist[i].copy() for i in range(len(dist))],
    )


def ball_query(
    query: PointCloudFrame,
    target: PointCloudFrame,
    radius: float,
    kmax: int,
) -> NeighborList:
    """Up to kmax target points within radius per query, nearest first.

    Empty neighborhoods are a valid result; callers decide the fallback.
    """
    idx, dist, mask = ball_padded(query.coords, target.coords, radius, kmax)
    counts = mask.sum(axis=1).astype(int)
    return NeighborList(
        indices=[idx[i, :c].copy() for i, c in enumerate(counts)],
        distances=[dist[i, :c].copy() for i, c in enumerate(counts)],
    )


def farthest_point_sample(
    cloud: PointCloudFrame, m: int, seed_index: int = 0
) -> np.ndarray:
    """Greedy max-min subset of m point indices starting at seed_index.

    Each round picks the point maximizing its distance to the selected set;
    ties break toward the smallest index.
    """
    n = cloud.n
    if not 1 <= m <= n:
        raise ValueError(f"m={m} out of range for cloud of size {n}")
    if not 0 <= seed_index < n:
        raise ValueError("seed_index out of range")
    coords = cloud.coords
    chosen = np.empty(m, dtype=np.int64)
    chosen[0] = seed_index
    mindist = np.linalg.norm(coords - coords[seed_index], axis=1)
    for i in range(1, m):
        nxt = int(np.argmax(mindist))  # argmax returns the first (lowest) index on ties
        chosen[i] = nxt
        np.minimum(mindist, np.linalg.norm(coords - coords[nxt], axis=1), out=mindist)
    return chosen


def lexicographic_seed(coords: np.ndarray) -> int:
    """Index of the lexicographically smallest coordinate (x, then y, then z).

    Used as a permutation-invariant FPS seed: the same geometric point is
    selected no matter how the input rows are ordered.
    """
    c = np.asarray(coords, dtype=np.float64)
    return int(np.lexsort((c[:, 2], c[:, 1], c[:, 0]))[0])


def idw_weights(
    fine_coords: np.ndarray, coarse_coords: np.ndarray, k: int
) -> tuple[np.ndarray, np.ndarray]:
    """k-NN indices and normalized inverse-distance weights per fine point.

    Weights use 1 / (d + IDW_EPS) and sum to one per row.
    """
    fine = _as_coords(fine_coords, "fine_coords")
    coarse = _as_coords(coarse_coords, "coarse_coords")
    idx, dist = knn_padded(fine, coarse, k)
    w = 1.0 / (dist + IDW_EPS)
    w /= w.sum(axis=1, keepdims=True)
    return idx, w


def idw_interpolate(
    fine_coords: np.ndarray,
    coarse: PointCloudFrame,
    coarse_values: np.ndarray,
    k: int = 3,
) -> np.ndarray:
    """Inverse-distance weighted interpolation of per-point values.

    For each fine point, blends the values of its k nearest coarse points
    with weights 1 / (d + IDW_EPS), normalized to sum one.
    """
    values = np.asarray(coarse_values, dtype=np.float64)
    if values.ndim != 2 or values.shape[0] != coarse.n:
        raise ValueError(
            f"coarse_values must be ({coarse.n}, c), got {values.shape}"
        )
    idx, w = idw_weights(fine_coords, coarse.coords, k)
    return np.einsum("mk,mkc->mc", w, values[idx])
