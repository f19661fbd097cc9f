"""Evaluation metrics: sequence flow statistics, forecasting displacement
errors, and three annotation-free cloud distances (Chamfer, exact EMD, and
a slack-augmented Sinkhorn correspondence distance).

Flow accuracy thresholds: strict accuracy admits error < 0.05 m or < 5%
relative, relaxed accuracy 0.1 m / 10%, outliers flag error > 0.3 m or
> 10% relative. The rectified outlier fraction drops the relative rule
whenever the ground-truth flow norm is below 0.1 m, where dividing by the
norm is meaningless.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .geom import PointCloudFrame, pairwise_distances
from .objectives import chamfer  # re-exported for evaluation reports

__all__ = [
    "FlowStats", "AssignmentResult", "flow_stats", "ade_fde", "emd",
    "emd_assignment", "sinkhorn_correspondence", "sinkhorn_distance",
    "sinkhorn_normalize", "chamfer",
]

ACC_STRICT_ABS = 0.05
ACC_STRICT_REL = 0.05
ACC_RELAX_ABS = 0.1
ACC_RELAX_REL = 0.1
OUTLIER_ABS = 0.3
OUTLIER_REL = 0.1
RECT_NORM_CUTOFF = 0.1

# Sinkhorn affinity exponent clamp; keeps exp() finite for coincident points.
_EXP_CLAMP = 500.0
_DENOM_FLOOR = 1e-12


@dataclass
class FlowStats:
    epe3d: float
    acc3ds: float
    acc3dr: float
    outliers3d: float
    rect_outliers3d: float
    valid_count: int


def _as_steps(x) -> list[np.ndarray]:
    if isinstance(x, np.ndarray) and x.ndim == 2:
        return [x]
    return [np.asarray(v, dtype=np.float64) for v in x]


def flow_stats(pred_flows, gt_flows, masks) -> FlowStats:
    """Aggregate flow statistics over a sequence of per-frame flows.

    Accepts single (N, 3) arrays or per-timestep lists; masks select the
    points that count.
    """
    preds = _as_steps(pred_flows)
    gts = _as_steps(gt_flows)
    if len(preds) != len(gts) or len(masks) != len(preds):
        raise ValueError("per-timestep flow/mask lists must align")
    err_all, gt_norm_all = [], []
    for pred, gt, mask in zip(preds, gts, masks):
        mask = np.asarray(mask, dtype=bool)
        if pred.shape != gt.shape or pred.shape[0] != mask.shape[0]:
            raise ValueError(
                f"shape mismatch: pred {pred.shape}, gt {gt.shape}, "
                f"mask {mask.shape}")
        err_all.append(np.linalg.norm(pred - gt, axis=1)[mask])
        gt_norm_all.append(np.linalg.norm(gt, axis=1)[mask])
    err = np.concatenate(err_all)
    gt_norm = np.concatenate(gt_norm_all)
    if err.size == 0:
        raise ValueError("no valid points to evaluate")
    with np.errstate(divide="ignore", invalid="ignore"):
        rel = np.where(gt_norm > 0, err / gt_norm, np.inf)
        rel = np.where(err == 0.0, 0.0, rel)
    outlier = (err > OUTLIER_ABS) | (rel > OUTLIER_REL)
    small_gt = gt_norm < RECT_NORM_CUTOFF
    rect = np.where(small_gt, err > OUTLIER_ABS, outlier)
    return FlowStats(
        epe3d=float(err.mean()),
        acc3ds=float(((err < ACC_STRICT_ABS) | (rel < ACC_STRICT_REL)).mean()),
        acc3dr=float(((err < ACC_RELAX_ABS) | (rel < ACC_RELAX_REL)).mean()),
        outliers3d=float(outlier.mean()),
        rect_outliers3d=float(rect.mean()),
        valid_count=int(err.size),
    )


def ade_fde(pred_frames, gt_frames, masks) -> tuple[float, float]:
    """Average and final displacement error of a forecast.

    Frames correspond point-by-point; masks select valid points per step.
    """
    preds = _as_steps(pred_frames)
    gts = _as_steps(gt_frames)
    if len(preds) != len(gts) or len(masks) != len(preds):
        raise ValueError("per-step frame/mask lists must align")
    per_step = []
    for pred, gt, mask in zip(preds, gts, masks):
        mask = np.asarray(mask, dtype=bool)
        per_step.append(np.linalg.norm(pred - gt, axis=1)[mask])
    all_err = np.concatenate(per_step)
    if all_err.size == 0:
        raise ValueError("no valid points to evaluate")
    if per_step[-1].size == 0:
        raise ValueError("no valid points at the final step")
    return float(all_err.mean()), float(per_step[-1].mean())


# ---------------------------------------------------------------------------
# Optimal assignment (EMD)
# ---------------------------------------------------------------------------


def _solve_assignment(cost: np.ndarray) -> np.ndarray:
    """Exact minimum-cost square assignment via shortest augmenting paths.

    Returns row_to_col. O(n^3) with dual potentials (Jonker-Volgenant
    family); ties resolve toward the lowest column index.
    """
    n = cost.shape[0]
    u = np.zeros(n + 1)
    v = np.zeros(n + 1)
    match = np.zeros(n + 1, dtype=np.int64)  # match[j] = row owning column j
    for i in range(1, n + 1):
        match[0] = i
        j0 = 0
        minv = np.full(n + 1, np.inf)
        way = np.zeros(n + 1, dtype=np.int64)
        used = np.zeros(n + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = match[j0]
            cur = cost[i0 - 1, :] - u[i0] - v[1:]
            free = ~used[1:]
            improved = free & (cur < minv[1:])
            way[1:][improved] = j0
            minv[1:][improved] = cur[improved]
            vals = np.where(free, minv[1:], np.inf)
            j1 = int(np.argmin(vals)) + 1
            delta = vals[j1 - 1]
            u[match[used]] += delta
            v[used] -= delta
            minv[1:][free] -= delta
            j0 = j1
            if match[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            match[j0] = match[j1]
            j0 = j1
    row_to_col = np.zeros(n, dtype=np.int64)
    for j in range(1, n + 1):
        row_to_col[match[j] - 1] = j - 1
    return row_to_col


def _cloud(c) -> np.ndarray:
    if isinstance(c, PointCloudFrame):
        return c.coords
    arr = np.asarray(c, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[1] != 3:
        raise ValueError(f"expected an (N, 3) cloud, got {arr.shape}")
    return arr


def emd_assignment(a, b) -> np.ndarray:
    """Minimum total squared-distance bijection between equal-size clouds."""
    av, bv = _cloud(a), _cloud(b)
    if av.shape[0] != bv.shape[0]:
        raise ValueError(
            f"EMD needs equal-size clouds, got {av.shape[0]} vs {bv.shape[0]}")
    d2 = ((av[:, None, :] - bv[None, :, :]) ** 2).sum(axis=2)
    return _solve_assignment(d2)

def emd(a, b) -> float:
    """Earth mover's distance: optimal-bijection squared error per point."""
    av, bv = _cloud(a), _cloud(b)
    mapping = emd_assignment(av, bv)
    total = float(((av - bv[mapping]) ** 2).sum())
    return total / av.shape[0]


# ---------------------------------------------------------------------------
# Sinkhorn correspondence distance
# ---------------------------------------------------------------------------


@dataclass
class AssignmentResult:
    """Hard row-to-column correspondence; -1 marks a row sent to slack."""

    mapping: np.ndarray
    distances: np.ndarray  # Euclidean distance per row; nan where slack
    valid: np.ndarray


def sinkhorn_normalize(mat: np.ndarray, iters: int,
                       trace: Optional[list] = None) -> np.ndarray:
    """Alternate row/column normalization, skipping the slack row/column.

    The last row and column are slack: their entries participate in the
    sums of the rows/columns being normalized but are never normalized
    themselves. With trace given, a copy of the working matrix is appended
    after every half-pass.
    """
    a = np.array(mat, dtype=np.float64)
    n, m = a.shape[0] - 1, a.shape[1] - 1
    for _ in range(iters):
        s = a[:n, :].sum(axis=1, keepdims=True)
        s = np.where(np.abs(s) < _DENOM_FLOOR, _DENOM_FLOOR, s)
        a[:n, :] /= s
        if trace is not None:
            trace.append(a.copy())
        s = a[:, :m].sum(axis=0, keepdims=True)
        s = np.where(np.abs(s) < _DENOM_FLOOR, _DENOM_FLOOR, s)
        a[:, :m] /= s
        if trace is not None:
            trace.append(a.copy())
    return a


def sinkhorn_correspondence(a, b, gamma: float = 10.0, eps: float = 1e-8,
                            iters: int = 5) -> AssignmentResult:
    """Hard correspondence from a slack-augmented Sinkhorn assignment.

    Affinities are exp(gamma / (distance + eps)) with the exponent clamped
    for finiteness; one slack row and column of ones absorb unmatchable
    points. After the alternating normalization, each row maps to its
    argmax column (ties toward the lowest index); rows whose argmax is the
    slack column are excluded from the distance.
    """
    av, bv = _cloud(a), _cloud(b)
    dist = pairwise_distances(av, bv)
    n, m = dist.shape
    logits = np.minimum(gamma / (dist + eps), _EXP_CLAMP)
    mat = np.ones((n + 1, m + 1))
    mat[:n, :m] = np.exp(logits)
    norm = sinkhorn_normalize(mat, iters)
    best = np.argmax(norm[:n, :], axis=1)
    mapping = np.where(best == m, -1, best).astype(np.int64)
    valid = mapping >= 0
    distances = np.full(n, np.nan)
    distances[valid] = dist[np.flatnonzero(valid), mapping[valid]]
    return AssignmentResult(mapping=mapping, distances=distances, valid=valid)


def sinkhorn_distance(a, b, gamma: float = 10.0, eps: float = 1e-8,
                      iters: int = 5) -> float:
    """Mean squared distance to the Sinkhorn hard correspondence,
    averaged over rows not assigned to slack.

    Raises:
        ValueError: when every row lands on slack ("degenerate matching").
    """
    result = sinkhorn_correspondence(a, b, gamma=gamma, eps=eps, iters=iters)
    if not np.any(result.valid):
        raise ValueError("degenerate matching: every point assigned to slack")
    d = result.distances[result.valid]
    return float((d * d).mean())
