"""Network assembly: feature pyramid, per-level recurrent cost-volume cells,
coarse-to-fine sequential flow estimation, and the autoregressive future
predictor.

Level lists run finest first: levels[0] carries every input point, deeper
entries are successively farthest-point-sampled subsets with wider feature
vectors. Farthest point sampling seeds at the lexicographically smallest
coordinate so that reordering input points cannot change which geometric
points form the coarse levels.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass
from typing import Optional, Union

import numpy as np

from . import diff
from .costvol import NeighborCache, NeighborhoodSpec, local_aggregate
from .diff import MlpSpec, ParamStore, ParamView, TensorLike, value_of
from .geom import (CloudSequence, PointCloudFrame, farthest_point_sample,
                   idw_weights, lexicographic_seed)
from .rcv import RcvSpec, declare_rcv, rcv_init, rcv_step


@dataclass(frozen=True)
class ArchConfig:
    """Architecture hyperparameters.

    Desk-scale defaults: three pyramid levels at (N, N/4, N/16) points with
    feature widths (8, 16, 32), memory width 16, 8 neighbors. FULL_SCALE_2048
    below is a five-level 2048-point configuration for completeness; it is
    far too slow for CPU test runs.
    """

    level_divisors: tuple[int, ...] = (1, 4, 16)
    feature_dims: tuple[int, ...] = (8, 16, 32)
    hidden_width: int = 16
    neighbors: int = 8
    neighborhood_mode: str = "knn"  # "knn" | "ball"
    ball_radius: float = 0.4
    ball_radius_growth: float = 2.0  # radius multiplier per coarser level
    interp_k: int = 3
    cost_hidden: tuple[int, ...] = (16,)
    weight_hidden: tuple[int, ...] = (8,)
    conv_hidden: tuple[int, ...] = ()
    refine_width: int = 16
    refine_hidden: tuple[int, ...] = (16,)
    head_hidden: tuple[int, ...] = (16,)
    # Features for raw xyz-only frames: "xyz" copies the absolute
    # coordinates (3 dims), "constant" feeds a bias channel of ones (1 dim),
    # leaving absolute position visible only to neighborhood geometry.
    input_features: str = "xyz"
    activation: str = "relu"  # hidden activation of every MLP
    # Start the candidate/cell cost volumes as displacement passthroughs
    # with uniform direction weights, so the recurrent state carries
    # matched-displacement signal from the first step instead of waiting
    # for random features to align.
    motion_aware_init: bool = True

    def __post_init__(self):
        if len(self.level_divisors) != len(self.feature_dims):
            raise ValueError("one feature width per pyramid level required")
        if len(self.level_divisors) < 2:
            raise ValueError("at least two pyramid levels required")
        if self.level_divisors[0] != 1:
            raise ValueError("the finest level must keep every point")
        if any(b >= a for a, b in zip(self.level_divisors[1:],
                                      self.level_divisors[:-1])):
            raise ValueError("level divisors must increase (finest first)")
        if self.neighborhood_mode not in ("knn", "ball"):
            raise ValueError(f"unknown mode {self.neighborhood_mode!r}")
        if self.input_features not in ("xyz", "constant"):
            raise ValueError(f"unknown input_features {self.input_features!r}")

    @property
    def num_levels(self) -> int:
        return len(self.level_divisors)

    @property
    def input_feat_dim(self) -> int:
        return 3 if self.input_features == "xyz" else 1

    def level_sizes(self, n: int) -> list[int]:
        sizes = [n // d for d in self.level_divisors]
        if sizes[-1] < 1:
            raise ValueError(
                f"{n} points cannot fill the coarsest level "
                f"(divisor {self.level_divisors[-1]})")
        if any(b >= a for a, b in zip(sizes[:-1], sizes[1:])):
            raise ValueError(f"level sizes {sizes} must strictly decrease")
        return sizes

    def neighborhood(self, level: int) -> NeighborhoodSpec:
        if self.neighborhood_mode == "knn":
            return NeighborhoodSpec("knn", k=self.neighbors)
        radius = self.ball_radius * self.ball_radius_growth ** level
        return NeighborhoodSpec("ball", k=self.neighbors, radius=radius)

    def level_feat_in(self, level: int) -> int:
        return self.input_feat_dim if level == 0 else self.feature_dims[level - 1]

    def pyramid_feat_spec(self, level: int) -> MlpSpec:
        return MlpSpec.make([3 + self.level_feat_in(level), *self.conv_hidden,
                             self.feature_dims[level]], self.activation)

    def weight_spec(self) -> MlpSpec:
        return MlpSpec.make([3, *self.weight_hidden, 1], self.activation)

    def rcv_spec(self, level: int) -> RcvSpec:
        nbhd = self.neighborhood(level)
        return RcvSpec.build(
            feat_dim=self.feature_dims[level],
            hidden_width=self.hidden_width,
            cost_hidden=self.cost_hidden,
            weight_hidden=self.weight_hidden,
            same_frame=nbhd,
            cross_frame=nbhd,
            activation=self.activation,
        )

    def refine_feat_spec(self, level: int) -> MlpSpec:
        in_dim = 3 + (3 + self.feature_dims[level] + self.hidden_width)
        return MlpSpec.make([in_dim, *self.conv_hidden, self.refine_width],
                            self.activation)

    def refine_head_spec(self) -> MlpSpec:
        return MlpSpec.make([self.refine_width, *self.refine_hidden, 3],
                            self.activation)

    def decoder_head_spec(self) -> MlpSpec:
        return MlpSpec.make([self.hidden_width + self.feature_dims[0],
                             *self.head_hidden, 3], self.activation)


FULL_SCALE_2048 = ArchConfig(
    level_divisors=(1, 2, 4, 8, 16),
    feature_dims=(32, 64, 96, 128, 192),
    hidden_width=64,
    neighbors=16,
)


def arch_hash(config: ArchConfig) -> str:
    payload = json.dumps(asdict(config), sort_keys=True)
    return hashlib.sha256(payload.encode()).hexdigest()[:16]


def _apply_motion_init(store: ParamStore, config: ArchConfig) -> None:
    """Rewire candidate/cell cost volumes into displacement passthroughs.

    The first six hidden units of the cost MLP compute relu(+d) and
    relu(-d) of the 3-d coordinate difference; the next layer subtracts
    them, so output channels 0..2 start exactly equal to the displacement.
    Direction-weight MLPs start as the constant 1/k, turning both
    aggregation sums into plain neighborhood means.
    """
    # The paired-unit passthrough computes relu(+d) - relu(-d) = d; other
    # activations would only approximate it, so skip the rewiring for them.
    if config.activation != "relu" or len(config.cost_hidden) != 1 \
            or config.cost_hidden[0] < 6 or config.hidden_width < 3:
        return
    for l in range(config.num_levels):
        for gate in ("cand", "cell"):
            prefix = f"rcv.l{l}.{gate}"
            w0 = store.get(f"{prefix}.cost.layer0.w").copy()
            w0[:, :6] = 0.0
            w0[0:3, 0:3] = np.eye(3)
            w0[0:3, 3:6] = -np.eye(3)
            store.set(f"{prefix}.cost.layer0.w", w0)
            w1 = store.get(f"{prefix}.cost.layer1.w").copy()
            w1[:, 0:3] = 0.0
            w1[0:3, 0:3] = np.eye(3)
            w1[3:6, 0:3] = -np.eye(3)
            store.set(f"{prefix}.cost.layer1.w", w1)
            b1 = store.get(f"{prefix}.cost.layer1.b").copy()
            b1[0:3] = 0.0
            store.set(f"{prefix}.cost.layer1.b", b1)
            for wname, nbhd in ((f"{prefix}.wn", config.rcv_spec(l).gate(gate).cross_frame),
                                (f"{prefix}.wm", config.rcv_spec(l).gate(gate).same_frame)):
                last = len(config.weight_hidden)
                w = store.get(f"{wname}.layer{last}.w")
                store.set(f"{wname}.layer{last}.w", w * 0.01)
                store.set(f"{wname}.layer{last}.b", np.array([1.0 / nbhd.k]))

    # Refinement starts as a smoothed copy of the upsampled coarse flow, so
    # coarse supervision reaches the finest output through the whole chain
    # before any feature has been learned (residual-style behavior by init).
    if config.conv_hidden or config.refine_width < 6 \
            or len(config.refine_hidden) != 1 or config.refine_hidden[0] < 6:
        return
    for l in range(config.num_levels):
        prefix = f"refine.l{l}"
        w = store.get(f"{prefix}.conv.feat.layer0.w").copy()
        w[:, 0:3] = 0.0
        w[3:6, 0:3] = np.eye(3)  # rows 3:6 hold the upsampled flow
        store.set(f"{prefix}.conv.feat.layer0.w", w)
        b = store.get(f"{prefix}.conv.feat.layer0.b").copy()
        b[0:3] = 0.0
        store.set(f"{prefix}.conv.feat.layer0.b", b)
        wg = store.get(f"{prefix}.conv.wgt.layer{len(config.weight_hidden)}.w")
        store.set(f"{prefix}.conv.wgt.layer{len(config.weight_hidden)}.w",
                  wg * 0.01)
        store.set(f"{prefix}.conv.wgt.layer{len(config.weight_hidden)}.b",
                  np.array([1.0 / config.neighbors]))
        w0 = store.get(f"{prefix}.head.layer0.w").copy()
        w0[:, 0:6] = 0.0
        w0[0:3, 0:3] = np.eye(3)
        w0[0:3, 3:6] = -np.eye(3)
        store.set(f"{prefix}.head.layer0.w", w0)
        b0 = store.get(f"{prefix}.head.layer0.b").copy()
        b0[0:6] = 0.0
        store.set(f"{prefix}.head.layer0.b", b0)
        w1 = store.get(f"{prefix}.head.layer1.w").copy()
        w1[:, 0:3] = 0.0
        w1[0:3, 0:3] = np.eye(3)
        w1[3:6, 0:3] = -np.eye(3)
        store.set(f"{prefix}.head.layer1.w", w1)
        b1 = store.get(f"{prefix}.head.layer1.b").copy()
        b1[0:3] = 0.0
        store.set(f"{prefix}.head.layer1.b", b1)


def init_model_params(config: ArchConfig, seed: int = 0) -> ParamStore:
    """Declare every learnable slice of the model, deterministically."""
    rng = np.random.default_rng(seed)
    store = ParamStore()
    for l in range(config.num_levels):
        store.declare_mlp(f"pyramid.l{l}.feat", config.pyramid_feat_spec(l), rng)
        store.declare_mlp(f"pyramid.l{l}.wgt", config.weight_spec(), rng)
    for l in range(config.num_levels):
        declare_rcv(store, f"rcv.l{l}", config.rcv_spec(l), rng)
    for l in range(config.num_levels):
        store.declare_mlp(f"refine.l{l}.conv.feat", config.refine_feat_spec(l), rng)
        store.declare_mlp(f"refine.l{l}.conv.wgt", config.weight_spec(), rng)
        store.declare_mlp(f"refine.l{l}.head", config.refine_head_spec(), rng)
    # Small head init keeps early rollouts near the identity.
    store.declare_mlp("decoder.head", config.decoder_head_spec(), rng, scale=0.01)
    if config.motion_aware_init:
        _apply_motion_init(store, config)
    return store


def as_view(params: Union[ParamStore, ParamView]) -> ParamView:
    if isinstance(params, ParamView):
        return params
    return params.bind(None)


@dataclass
class PyramidLevel:
    """One pyramid level: coordinates, features, and provenance indices.

    fps_indices select this level's points from the parent (finer) level;
    input_indices compose the chain down to the original input rows.
    """

    coords: TensorLike
    feats: TensorLike
    fps_indices: Optional[np.ndarray]
    input_indices: np.ndarray

    @property
    def n(self) -> int:
        return value_of(self.coords).shape[0]


FrameLike = Union[PointCloudFrame, tuple]


def _frame_inputs(frame: FrameLike, config: ArchConfig):
    if isinstance(frame, PointCloudFrame):
        coords = frame.coords
        feats = frame.feats
    else:
        coords, feats = frame
    if feats is None:
        if config.input_features == "xyz":
            feats = coords
        else:
            feats = np.ones((value_of(coords).shape[0], 1))
    got = value_of(feats).shape[1]
    if got != config.input_feat_dim:
        raise ValueError(
            f"input feature width {got} != configured {config.input_feat_dim}")
    return coords, feats


def build_pyramid(frame: FrameLike, params, config: ArchConfig,
                  cache: Optional[NeighborCache] = None
                  ) -> list[PyramidLevel]:
    """Encode one frame into its feature pyramid, finest level first.

    Each level aggregates parent-level features over local neighborhoods and
    deeper levels keep a farthest-point-sampled subset of the parent points.
    """
    view = as_view(params)
    coords, feats = _frame_inputs(frame, config)
    n = value_of(coords).shape[0]
    sizes = config.level_sizes(n)

    levels: list[PyramidLevel] = []
    for l, size in enumerate(sizes):
        if l == 0:
            q_coords = coords
            fps_idx = None
            input_idx = np.arange(n, dtype=np.int64)
            t_coords, t_feats = coords, feats
        else:
            parent = levels[l - 1]
            parent_coords = value_of(parent.coords)
            seed = lexicographic_seed(parent_coords)
            fps_idx = farthest_point_sample(
                PointCloudFrame(parent_coords), size, seed_index=seed)
            q_coords = diff.gather(parent.coords, fps_idx)
            input_idx = parent.input_indices[fps_idx]
            t_coords, t_feats = parent.coords, parent.feats
        lvl_feats = local_aggregate(
            config.pyramid_feat_spec(l), config.weight_spec(), view,
            f"pyramid.l{l}", q_coords, t_coords, t_feats,
            config.neighborhood(l), cache=cache)
        levels.append(PyramidLevel(q_coords, lvl_feats, fps_idx, input_idx))
    return levels


@dataclass
class FlowPyramid:
    """Per-timestep, per-level predicted flows plus the frame pyramids.

    flows[s][l] is the flow of frame s+1 at level l (finest first);
    pyramids[t] is frame t's pyramid.
    """

    flows: list[list[TensorLike]]
    pyramids: list[list[PyramidLevel]]

    def finest(self, step: int) -> TensorLike:
        return self.flows[step][0]

    @property
    def num_steps(self) -> int:
        return len(self.flows)


def _apply_idw(values: TensorLike, idx: np.ndarray, w: np.ndarray) -> TensorLike:
    return diff.reduce_sum(diff.mul(diff.gather(values, idx), w[:, :, None]), axis=1)


def _refine_level(view: ParamView, config: ArchConfig, level: int,
                  lvl: PyramidLevel, up_flow: TensorLike, hidden: TensorLike,
                  cache: Optional[NeighborCache] = None) -> TensorLike:
    stacked = diff.concat([up_flow, lvl.feats, hidden], axis=-1)
    conv = local_aggregate(
        config.refine_feat_spec(level), config.weight_spec(), view,
        f"refine.l{level}.conv", lvl.coords, lvl.coords, stacked,
        config.neighborhood(level), cache=cache)
    head = config.refine_head_spec()
    return diff.mlp_forward(head, view.mlp(f"refine.l{level}.head", head), conv)


def _upsample_flow(fine: PyramidLevel, coarse: PyramidLevel,
                   coarse_flow: TensorLike, k: int) -> TensorLike:
    idx, w = idw_weights(value_of(fine.coords), value_of(coarse.coords),
                         min(k, coarse.n))
    return _apply_idw(coarse_flow, idx, w)


def estimate_flows(seq: CloudSequence, params, config: ArchConfig,
                   reset_state_each_step: bool = False) -> FlowPyramid:
    """Coarse-to-fine flow for every frame after the first.

    Per timestep, each level runs its recurrent cell against the remembered
    previous frame, the coarser level's flow is upsampled by inverse-distance
    interpolation (zero at the coarsest level), and a refinement stack over
    (upsampled flow, level features, cell output) emits the level's flow.
    States persist across timesteps unless reset_state_each_step, which
    zeroes the memories before every step and turns the model into an
    independent pairwise estimator.
    """
    view = as_view(params)
    cache = NeighborCache()
    frames = seq.frames[:seq.n_input] if seq.n_input else seq.frames
    pyramids = [build_pyramid(f, view, config, cache=cache) for f in frames]
    nl = config.num_levels
    states = [rcv_init(pyramids[0][l].coords, config.hidden_width)
              for l in range(nl)]
    flows: list[list[TensorLike]] = []
    for t in range(1, len(frames)):
        if reset_state_each_step:
            states = [s.reset_memory() for s in states]
        step_flows: list[Optional[TensorLike]] = [None] * nl
        for l in range(nl - 1, -1, -1):
            lvl = pyramids[t][l]
            states[l], hidden = rcv_step(
                config.rcv_spec(l), view, f"rcv.l{l}", states[l],
                (lvl.coords, lvl.feats), cache=cache)
            if l == nl - 1:
                up_flow = np.zeros((lvl.n, 3))
            else:
                up_flow = _upsample_flow(lvl, pyramids[t][l + 1],
                                         step_flows[l + 1], config.interp_k)
            step_flows[l] = _refine_level(view, config, l, lvl, up_flow, hidden,
                                          cache=cache)
        flows.append(step_flows)
    return FlowPyramid(flows=flows, pyramids=pyramids)


@dataclass
class ForecastResult:
    """Autoregressive rollout: K predicted frames with their pyramids.

    frames[k] holds the predicted coordinates (rows follow the last input
    frame's point order); pyramids[k] is the pyramid built on that predicted
    cloud; step_inputs[k] records the coordinates fed into step k.
    """

    frames: list[TensorLike]
    pyramids: list[list[PyramidLevel]]
    step_inputs: list[np.ndarray]


def forecast(seq: CloudSequence, params, config: ArchConfig, K: int
             ) -> ForecastResult:
    """Encode the input frames, then predict K future frames.

    The encoder runs the same recurrent stack as flow estimation; the
    resulting states drive the decoder, which predicts a per-point
    displacement of the current cloud, emits the displaced cloud, and feeds
    it back into the recurrent stack for the next step.
    """
    if K < 1:
        raise ValueError("K must be positive")
    view = as_view(params)
    cache = NeighborCache()
    n_in = seq.n_input or seq.t
    frames = seq.frames[:n_in]
    pyramids = [build_pyramid(f, view, config, cache=cache) for f in frames]
    nl = config.num_levels
    states = [rcv_init(pyramids[0][l].coords, config.hidden_width)
              for l in range(nl)]
    for t in range(1, n_in):
        for l in range(nl - 1, -1, -1):
            lvl = pyramids[t][l]
            states[l], _ = rcv_step(config.rcv_spec(l), view, f"rcv.l{l}",
                                    states[l], (lvl.coords, lvl.feats),
                                    cache=cache)

    head = config.decoder_head_spec()
    head_params = view.mlp("decoder.head", head)
    cur_coords = pyramids[-1][0].coords
    cur_feats = pyramids[-1][0].feats
    out_frames: list[TensorLike] = []
    out_pyramids: list[list[PyramidLevel]] = []
    step_inputs: list[np.ndarray] = []
    for _ in range(K):
        step_inputs.append(np.array(value_of(cur_coords)))
        dp_in = diff.concat([states[0].hidden, cur_feats], axis=-1)
        dp = diff.mlp_forward(head, head_params, dp_in)
        new_coords = diff.add(cur_coords, dp)
        pyr = build_pyramid((new_coords, None), view, config, cache=cache)
        for l in range(nl - 1, -1, -1):
            states[l], _ = rcv_step(config.rcv_spec(l), view, f"rcv.l{l}",
                                    states[l], (pyr[l].coords, pyr[l].feats),
                                    cache=cache)
        out_frames.append(new_coords)
        out_pyramids.append(pyr)
        cur_coords, cur_feats = new_coords, pyr[0].feats
    return ForecastResult(frames=out_frames, pyramids=out_pyramids,
                          step_inputs=step_inputs)
