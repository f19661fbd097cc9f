"""Training objectives and the optimizer step.

Flow supervision is a multi-level squared error: ground-truth flows and
validity masks are gathered onto each pyramid level through the level's
farthest-point-sampling index chain, so coarse supervision stays exact
instead of interpolated. Masked-out points contribute neither loss nor
gradient.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence, Union

import numpy as np

from . import diff
from .diff import ParamStore, TensorLike, value_of
from .geom import PointCloudFrame, farthest_point_sample, lexicographic_seed
from .net import FlowPyramid, PyramidLevel

LOSS_MODES = ("supervised_ssfe", "supervised_spf", "selfsup_spf")


@dataclass(frozen=True)
class LossConfig:
    """Per-level weights (finest level first) and the training mode."""

    level_weights: tuple[float, ...] = (0.32, 0.08, 0.02)
    mode: str = "supervised_ssfe"

    def __post_init__(self):
        if any(w <= 0 for w in self.level_weights):
            raise ValueError("level weights must be positive")
        if self.mode not in LOSS_MODES:
            raise ValueError(f"unknown loss mode {self.mode!r}")


def _check_weights(weights: Sequence[float], num_levels: int):
    if len(weights) != num_levels:
        raise ValueError(
            f"{num_levels} pyramid levels need as many level weights, "
            f"got {len(weights)}")


def _masked_sq_sum(delta: TensorLike, mask: np.ndarray) -> TensorLike:
    sq = diff.mul(delta, delta)
    return diff.reduce_sum(diff.mul(sq, mask.astype(np.float64)[:, None]))


def ssfe_loss(pred: FlowPyramid, gt_flows: Sequence[np.ndarray],
              masks: Sequence[np.ndarray],
              level_weights: Sequence[float]) -> TensorLike:
    """Multi-level squared flow error, summed over timesteps.

    gt_flows[s] / masks[s] belong to frame s+1 (the frame whose backward
    flow is predicted); coarse-level targets are exact gathers through the
    pyramid's sampling indices.
    """
    if gt_flows is None or len(gt_flows) < pred.num_steps:
        raise ValueError("ground-truth flows missing for some timestep")
    if len(masks) < pred.num_steps:
        raise ValueError("masks missing for some timestep")
    num_levels = len(pred.flows[0])
    _check_weights(level_weights, num_levels)
    total = 0.0
    for s in range(pred.num_steps):
        pyramid = pred.pyramids[s + 1]
        gt = np.asarray(gt_flows[s], dtype=np.float64)
        mask = np.asarray(masks[s], dtype=bool)
        for l in range(num_levels):
            idx = pyramid[l].input_indices
            term = _masked_sq_sum(diff.sub(pred.flows[s][l], gt[idx]), mask[idx])
            total = diff.add(total, diff.mul(term, level_weights[l]))
    return total


def spf_supervised_loss(pred_frames: Sequence[TensorLike],
                        pred_pyramids: Sequence[Sequence[PyramidLevel]],
                        gt_frames: Sequence[np.ndarray],
                        masks: Sequence[np.ndarray],
                        level_weights: Sequence[float]) -> TensorLike:
    """Multi-level squared error between predicted and true future frames."""
    if len(pred_frames) != len(gt_frames):
        raise ValueError(
            f"{len(pred_frames)} predicted frames vs {len(gt_frames)} "
            "ground-truth frames")
    if len(masks) != len(pred_frames):
        raise ValueError("one mask per future frame required")
    num_levels = len(pred_pyramids[0])
    _check_weights(level_weights, num_levels)
    total = 0.0
    for k, gt in enumerate(gt_frames):
        gt = np.asarray(gt, dtype=np.float64)
        mask = np.asarray(masks[k], dtype=bool)
        for l in range(num_levels):
            lvl = pred_pyramids[k][l]
            idx = lvl.input_indices
            term = _masked_sq_sum(diff.sub(lvl.coords, gt[idx]), mask[idx])
            total = diff.add(total, diff.mul(term, level_weights[l]))
    return total


def _cloud_array(cloud: Union[PointCloudFrame, TensorLike]) -> TensorLike:
    if isinstance(cloud, PointCloudFrame):
        return cloud.coords
    return cloud


def chamfer_distance(a: TensorLike, b: TensorLike) -> TensorLike:
    """Symmetric mean squared nearest-neighbor distance between two clouds.

    Each directional sum is divided by its source cloud's size, keeping the
    value comparable when the clouds differ in cardinality. Differentiable
    through the coordinates; the nearest-neighbor choice itself is not.
    """
    av, bv = value_of(a), value_of(b)
    if av.ndim != 2 or bv.ndim != 2 or av.shape[1] != 3 or bv.shape[1] != 3:
        raise ValueError("chamfer expects (N, 3) clouds")
    if av.shape[0] == 0 or bv.shape[0] == 0:
        raise ValueError("chamfer is undefined for empty clouds")
    d2 = ((av[:, None, :] - bv[None, :, :]) ** 2).sum(axis=2)
    nn_ab = np.argmin(d2, axis=1)
    nn_ba = np.argmin(d2, axis=0)
    d_ab = diff.sub(a, diff.gather(b, nn_ab))
    d_ba = diff.sub(b, diff.gather(a, nn_ba))
    term_a = diff.reduce_mean(diff.reduce_sum(diff.mul(d_ab, d_ab), axis=1))
    term_b = diff.reduce_mean(diff.reduce_sum(diff.mul(d_ba, d_ba), axis=1))
    return diff.add(term_a, term_b)


def chamfer(a: Union[PointCloudFrame, np.ndarray],
            b: Union[PointCloudFrame, np.ndarray]) -> float:
    """Chamfer distance between two clouds (plain number)."""
    return float(value_of(chamfer_distance(_cloud_array(a), _cloud_array(b))))


def downsample_cloud(coords: np.ndarray, size: int) -> np.ndarray:
    """Canonical farthest-point subset used for coarse-level loss targets."""
    frame = PointCloudFrame(np.asarray(coords, dtype=np.float64))
    if size >= frame.n:
        return frame.coords
    idx = farthest_point_sample(frame, size,
                                seed_index=lexicographic_seed(frame.coords))
    return frame.coords[idx]


def spf_selfsup_loss(pred_frames: Sequence[TensorLike],
                     pred_pyramids: Sequence[Sequence[PyramidLevel]],
                     future_frames: Sequence[np.ndarray],
                     level_weights: Sequence[float]) -> TensorLike:
    """Chamfer distance between predicted and observed future frames,
    applied at every pyramid level and timestep (no correspondence needed)."""
    if len(pred_frames) != len(future_frames):
        raise ValueError(
            f"{len(pred_frames)} predicted frames vs {len(future_frames)} "
            "future frames")
    num_levels = len(pred_pyramids[0])
    _check_weights(level_weights, num_levels)
    total = 0.0
    for k, future in enumerate(future_frames):
        future = np.asarray(future, dtype=np.float64)
        for l in range(num_levels):
            lvl = pred_pyramids[k][l]
            target = downsample_cloud(future, lvl.n)
            term = chamfer_distance(lvl.coords, target)
            total = diff.add(total, diff.mul(term, level_weights[l]))
    return total


# ---------------------------------------------------------------------------
# Optimizer
# ---------------------------------------------------------------------------


@dataclass
class AdamState:
    """First/second moment accumulators, one pair per parameter slice."""

    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def clip_gradients(grads: dict[str, np.ndarray], clip_norm: Optional[float]
                   ) -> dict[str, np.ndarray]:
    """Scale all gradients so their global L2 norm is at most clip_norm."""
    if clip_norm is None:
        return grads
    total = np.sqrt(sum(float((g * g).sum()) for g in grads.values()))
    if total <= clip_norm or total == 0.0:
        return grads
    scale = clip_norm / total
    return {name: g * scale for name, g in grads.items()}


def optimizer_step(params: ParamStore, grads: dict[str, np.ndarray],
                   state: AdamState, lr: float, weight_decay: float = 0.0,
                   clip_norm: Optional[float] = None,
                   betas: tuple[float, float] = (0.9, 0.999),
                   eps: float = 1e-8) -> AdamState:
    """Adam update with decoupled weight decay and global-norm clipping.

    Mutates params in place and returns the advanced state.

    Raises:
        ValueError: on a non-finite gradient, naming the parameter slice.
    """
    for name in params.names():
        g = grads.get(name)
        if g is None:
            raise ValueError(f"missing gradient for slice {name!r}")
        if not np.all(np.isfinite(g)):
            raise ValueError(f"non-finite gradient in slice {name!r}")
    grads = clip_gradients(grads, clip_norm)
    b1, b2 = betas
    state.step += 1
    bc1 = 1.0 - b1 ** state.step
    bc2 = 1.0 - b2 ** state.step
    for name in params.names():
        g = grads[name]
        p = params.get(name)
        m = state.m.get(name)
        if m is None:
            m = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        v = state.v[name]
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * g * g
        state.m[name], state.v[name] = m, v
        update = (m / bc1) / (np.sqrt(v / bc2) + eps)
        params.set(name, p - lr * update - lr * weight_decay * p)
    return state
