"""Recurrent cost-volume cell.

An LSTM-style gated update whose affine maps are replaced by cost-volume
operators against the remembered previous frame: gates and candidate read
the hidden state, the cell pathway reads the cell state through a
coordinates-only cost volume. Because every interaction runs through
cross-frame neighborhood queries, the cell is indifferent to point order
and to the point count changing between steps.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Union

import numpy as np

from . import diff
from .costvol import (CostVolumeSpec, NeighborCache, NeighborhoodSpec,
                      cost_volume, cost_volume_group, declare_cost_volume)
from .diff import ParamView, TensorLike, value_of
from .geom import PointCloudFrame

GATE_NAMES = ("input", "forget", "output", "cell", "cand")


@dataclass
class RcvState:
    """Memory carried between timesteps.

    anchor_coords are the previous frame's point locations; hidden and cell
    are the per-anchor feature memories, zero right after initialization.
    """

    anchor_coords: TensorLike
    hidden: TensorLike
    cell: TensorLike

    def __post_init__(self):
        n = value_of(self.anchor_coords).shape[0]
        h_shape = value_of(self.hidden).shape
        c_shape = value_of(self.cell).shape
        if h_shape != c_shape:
            raise ValueError(f"hidden {h_shape} and cell {c_shape} shapes differ")
        if h_shape[0] != n:
            raise ValueError(
                f"state rows {h_shape[0]} != anchor rows {n}")

    @property
    def width(self) -> int:
        return value_of(self.hidden).shape[1]

    def reset_memory(self) -> "RcvState":
        """Zero hidden/cell while keeping the anchors (the no-memory ablation)."""
        shape = value_of(self.hidden).shape
        return RcvState(self.anchor_coords, np.zeros(shape), np.zeros(shape))


@dataclass(frozen=True)
class RcvSpec:
    """One cost-volume spec per gate plus the memory width.

    input/forget/output/cand consume (coords, features) against the hidden
    state; cell consumes coordinates only against the cell state.
    """

    cv_input: CostVolumeSpec
    cv_forget: CostVolumeSpec
    cv_output: CostVolumeSpec
    cv_cell: CostVolumeSpec
    cv_cand: CostVolumeSpec
    hidden_width: int

    def __post_init__(self):
        for name in GATE_NAMES:
            cv = self.gate(name)
            if cv.out_dim != self.hidden_width:
                raise ValueError(
                    f"{name} cost volume emits {cv.out_dim}, "
                    f"state width is {self.hidden_width}")
            if cv.prev_feat_dim != self.hidden_width:
                raise ValueError(
                    f"{name} cost volume reads width {cv.prev_feat_dim}, "
                    f"state width is {self.hidden_width}")
        if self.cv_cell.cur_feat_dim != 0:
            raise ValueError("cell cost volume must ignore current features")

    def gate(self, name: str) -> CostVolumeSpec:
        return getattr(self, f"cv_{name}")

    @property
    def input_feat_dim(self) -> int:
        return self.cv_input.cur_feat_dim

    @staticmethod
    def build(feat_dim: int, hidden_width: int, cost_hidden=(16,),
              weight_hidden=(8,),
              same_frame: NeighborhoodSpec = NeighborhoodSpec(),
              cross_frame: NeighborhoodSpec = NeighborhoodSpec(),
              activation: str = "relu") -> "RcvSpec":
        def cv(cur_dim):
            return CostVolumeSpec.build(
                prev_feat_dim=hidden_width, cur_feat_dim=cur_dim,
                out_dim=hidden_width, cost_hidden=cost_hidden,
                weight_hidden=weight_hidden, same_frame=same_frame,
                cross_frame=cross_frame, activation=activation)
        return RcvSpec(cv_input=cv(feat_dim), cv_forget=cv(feat_dim),
                       cv_output=cv(feat_dim), cv_cell=cv(0),
                       cv_cand=cv(feat_dim), hidden_width=hidden_width)


def declare_rcv(store, prefix: str, spec: RcvSpec, rng: np.random.Generator) -> None:
    for name in GATE_NAMES:
        declare_cost_volume(store, f"{prefix}.{name}", spec.gate(name), rng)


def rcv_init(first_frame_coords: TensorLike, hidden_width: int) -> RcvState:
    """Zero memory anchored at the first frame's points."""
    if hidden_width < 1:
        raise ValueError("hidden width must be positive")
    n = value_of(first_frame_coords).shape[0]
    zeros = np.zeros((n, hidden_width))
    return RcvState(first_frame_coords, zeros.copy(), zeros.copy())


FrameLike = Union[PointCloudFrame, tuple]


def rcv_step(spec: RcvSpec, view: ParamView, prefix: str, state: RcvState,
             frame: FrameLike,
             cache: Optional[NeighborCache] = None) -> tuple[RcvState, TensorLike]:
    """One gated update against the current frame.

    Returns the new state (anchored at the current frame) and its hidden
    output, one row per current point.
    """
    if isinstance(frame, PointCloudFrame):
        coords, feats = frame.coords, frame.feats
    else:
        coords, feats = frame
    if spec.input_feat_dim:
        got = 0 if feats is None else value_of(feats).shape[1]
        if got != spec.input_feat_dim:
            raise ValueError(
                f"frame feature width {got} != cell input width "
                f"{spec.input_feat_dim}")

    # The five gates usually share neighborhood specs; search once per spec.
    cur_c = value_of(coords)
    prev_c = value_of(state.anchor_coords)
    cache = cache or NeighborCache()

    def nbrs(gate):
        return (cache.padded(gate.same_frame, cur_c, cur_c),
                cache.padded(gate.cross_frame, cur_c, prev_c))

    hidden_gates = ("input", "forget", "output", "cand")
    gate_specs = [spec.gate(g) for g in hidden_gates]
    shareable = all(
        (g.same_frame, g.cross_frame, g.prev_feat_dim, g.cur_feat_dim)
        == (gate_specs[0].same_frame, gate_specs[0].cross_frame,
            gate_specs[0].prev_feat_dim, gate_specs[0].cur_feat_dim)
        for g in gate_specs[1:])
    if shareable:
        same, cross = nbrs(gate_specs[0])
        raw_i, raw_f, raw_o, raw_h = cost_volume_group(
            gate_specs, [f"{prefix}.{g}" for g in hidden_gates], view,
            coords, feats, state.anchor_coords, state.hidden, same, cross)
    else:
        raw_i, raw_f, raw_o, raw_h = (
            cost_volume(spec.gate(g), view, f"{prefix}.{g}", coords, feats,
                        state.anchor_coords, state.hidden,
                        same_nbrs=nbrs(spec.gate(g))[0],
                        cross_nbrs=nbrs(spec.gate(g))[1])
            for g in hidden_gates)

    cell_same, cell_cross = nbrs(spec.cv_cell)
    i_gate = diff.sigmoid(raw_i)
    f_gate = diff.sigmoid(raw_f)
    o_gate = diff.sigmoid(raw_o)
    m_hat = cost_volume(spec.cv_cell, view, f"{prefix}.cell", coords, None,
                        state.anchor_coords, state.cell,
                        same_nbrs=cell_same, cross_nbrs=cell_cross)
    h_hat = diff.tanh(raw_h)
    m_t = diff.add(diff.mul(f_gate, m_hat), diff.mul(i_gate, h_hat))
    h_t = diff.mul(o_gate, m_t)
    return RcvState(coords, h_t, m_t), h_t
