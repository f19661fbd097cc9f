"""Set-to-set matching machinery.

A matching cost compares one current point against one previous point
through an MLP over (coordinate difference, previous features, current
features). The cost volume aggregates those costs twice: an inner sum over
each current point's cross-frame neighborhood weighted by a learned
directional scalar, then an outer sum over its same-frame neighborhood,
again directionally weighted.

Neighbor contributions are always summed in neighbor-list order (ascending
distance, ties by index). That order depends only on geometry, so permuting
the points of either cloud reproduces bit-identical sums.

Neighborhoods are purely spatial (k-NN or radius ball); grouping by feature
similarity is not implemented.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import diff
from .diff import MlpSpec, ParamView, TensorLike, value_of
from .geom import ball_padded, knn_padded


@dataclass(frozen=True)
class NeighborhoodSpec:
    """How to collect neighbors: exact k-NN or radius ball capped at k."""

    mode: str = "knn"  # "knn" | "ball"
    k: int = 8
    radius: Optional[float] = None

    def __post_init__(self):
        if self.mode not in ("knn", "ball"):
            raise ValueError(f"unknown neighborhood mode {self.mode!r}")
        if self.k < 1:
            raise ValueError("k must be positive")
        if self.mode == "ball" and (self.radius is None or self.radius <= 0):
            raise ValueError("ball mode needs a positive radius")

    def padded(self, query_coords: np.ndarray, target_coords: np.ndarray):
        """(idx, mask) arrays of shape (n_query, <=k); padded slots have mask 0."""
        if self.mode == "knn":
            idx, _ = knn_padded(query_coords, target_coords, self.k)
            return idx, np.ones(idx.shape, dtype=np.float64)
        idx, _, mask = ball_padded(query_coords, target_coords,
                                   self.radius, self.k)
        return idx, mask


class NeighborCache:
    """Memoizes neighborhood searches within one forward pass.

    Keyed by the identity of the coordinate arrays plus the neighborhood
    spec; valid as long as the keyed arrays stay alive and unmodified,
    which holds for the duration of a single forward pass.
    """

    def __init__(self):
        self._hits: dict = {}

    def padded(self, nbhd: NeighborhoodSpec, query_coords: np.ndarray,
               target_coords: np.ndarray):
        key = (id(query_coords), id(target_coords), nbhd)
        found = self._hits.get(key)
        if found is None:
            found = nbhd.padded(query_coords, target_coords)
            # hold references so ids cannot be recycled
            self._hits[key] = (found, query_coords, target_coords)
        else:
            found = found[0]
        return found


@dataclass(frozen=True)
class CostVolumeSpec:
    """MLPs and neighborhoods for one cost-volume operator.

    cur_feat_dim 0 means the operator ignores current-point features (its
    cost MLP input is just the coordinate difference plus previous features).
    """

    mlp_cost: MlpSpec
    mlp_wm: MlpSpec
    mlp_wn: MlpSpec
    same_frame: NeighborhoodSpec
    cross_frame: NeighborhoodSpec
    prev_feat_dim: int
    cur_feat_dim: int

    def __post_init__(self):
        expect = 3 + self.prev_feat_dim + self.cur_feat_dim
        if self.mlp_cost.in_dim != expect:
            raise ValueError(
                f"cost MLP input width {self.mlp_cost.in_dim} != "
                f"3 + {self.prev_feat_dim} + {self.cur_feat_dim}"
            )
        for name, spec in (("wm", self.mlp_wm), ("wn", self.mlp_wn)):
            if spec.in_dim != 3 or spec.out_dim != 1:
                raise ValueError(f"{name} MLP must map 3 -> 1")

    @property
    def out_dim(self) -> int:
        return self.mlp_cost.out_dim

    @staticmethod
    def build(prev_feat_dim: int, cur_feat_dim: int, out_dim: int,
              cost_hidden=(16,), weight_hidden=(8,),
              same_frame: NeighborhoodSpec = NeighborhoodSpec(),
              cross_frame: NeighborhoodSpec = NeighborhoodSpec(),
              activation: str = "relu") -> "CostVolumeSpec":
        in_dim = 3 + prev_feat_dim + cur_feat_dim
        return CostVolumeSpec(
            mlp_cost=MlpSpec.make([in_dim, *cost_hidden, out_dim], activation),
            mlp_wm=MlpSpec.make([3, *weight_hidden, 1], activation),
            mlp_wn=MlpSpec.make([3, *weight_hidden, 1], activation),
            same_frame=same_frame,
            cross_frame=cross_frame,
            prev_feat_dim=prev_feat_dim,
            cur_feat_dim=cur_feat_dim,
        )


def declare_cost_volume(store, prefix: str, spec: CostVolumeSpec,
                        rng: np.random.Generator) -> None:
    store.declare_mlp(f"{prefix}.cost", spec.mlp_cost, rng)
    store.declare_mlp(f"{prefix}.wm", spec.mlp_wm, rng)
    store.declare_mlp(f"{prefix}.wn", spec.mlp_wn, rng)


def _check_feat_dim(name: str, feats, expected: int):
    if expected == 0:
        return
    if feats is None:
        raise ValueError(f"{name} features required (width {expected}) but absent")
    got = value_of(feats).shape[1]
    if got != expected:
        raise ValueError(f"{name} feature width {got} != spec width {expected}")


def matching_cost(spec: CostVolumeSpec, view: ParamView, prefix: str,
                  p_prev: tuple[TensorLike, Optional[TensorLike]],
                  p_cur: tuple[TensorLike, Optional[TensorLike]]) -> TensorLike:
    """Learned cost of matching one current point to one previous point.

    Both arguments are (coordinate, feature-vector) pairs; the feature slot
    may be None when the spec declares that side featureless.
    """
    c_prev, x_prev = p_prev
    c_cur, x_cur = p_cur
    parts = [diff.reshape(diff.sub(c_prev, c_cur), (1, 3))]
    for label, feats, width in (("previous", x_prev, spec.prev_feat_dim),
                                ("current", x_cur, spec.cur_feat_dim)):
        if not width:
            continue
        if feats is None or value_of(feats).size != width:
            got = "absent" if feats is None else str(value_of(feats).size)
            raise ValueError(
                f"{label} feature width {got} != spec width {width}")
        parts.append(diff.reshape(feats, (1, width)))
    inp = diff.concat(parts, axis=-1)
    out = diff.mlp_forward(spec.mlp_cost, view.mlp(f"{prefix}.cost", spec.mlp_cost), inp)
    return diff.reshape(out, (spec.out_dim,))


def _pointwise_mlp(spec: MlpSpec, layers, x: TensorLike, rows: int, k: int):
    """Run an MLP over a (rows, k, d) stack by flattening the leading axes."""
    flat = diff.reshape(x, (rows * k, spec.in_dim))
    out = diff.mlp_forward(spec, layers, flat)
    return diff.reshape(out, (rows, k, spec.out_dim))


def cost_volume(spec: CostVolumeSpec, view: ParamView, prefix: str,
                cur_coords: TensorLike, cur_feats: Optional[TensorLike],
                prev_coords: TensorLike, prev_feats: Optional[TensorLike],
                same_nbrs=None, cross_nbrs=None) -> TensorLike:
    """Aggregated matching cost per current point, (n_cur, out_dim).

    Inner sum: each current point's cost against its cross-frame neighbors,
    weighted by the wn MLP of the coordinate difference. Outer sum: those
    per-point aggregates collected over the same-frame neighborhood,
    weighted by the wm MLP. A current point whose cross-frame ball is empty
    contributes its self matching cost (zero coordinate difference,
    previous features taken as zeros) instead of the inner sum.

    same_nbrs / cross_nbrs accept precomputed (idx, mask) pairs so callers
    running several cost volumes over one frame pair search only once.
    """
    _check_feat_dim("current", cur_feats, spec.cur_feat_dim)
    _check_feat_dim("previous", prev_feats, spec.prev_feat_dim)
    cur_c = value_of(cur_coords)
    prev_c = value_of(prev_coords)
    n = cur_c.shape[0]

    n_idx, n_mask = cross_nbrs if cross_nbrs is not None \
        else spec.cross_frame.padded(cur_c, prev_c)
    kn = n_idx.shape[1]
    cur_col = diff.reshape(cur_coords, (n, 1, 3))
    d_prev = diff.sub(diff.gather(prev_coords, n_idx), cur_col)
    parts = [d_prev]
    if spec.prev_feat_dim:
        parts.append(diff.gather(prev_feats, n_idx))
    if spec.cur_feat_dim:
        cur_f = diff.reshape(cur_feats, (n, 1, spec.cur_feat_dim))
        parts.append(diff.broadcast_to(cur_f, (n, kn, spec.cur_feat_dim)))
    cost = _pointwise_mlp(spec.mlp_cost, view.mlp(f"{prefix}.cost", spec.mlp_cost),
                          diff.concat(parts, axis=-1), n, kn)
    wn = _pointwise_mlp(spec.mlp_wn, view.mlp(f"{prefix}.wn", spec.mlp_wn),
                        d_prev, n, kn)
    if not n_mask.all():
        wn = diff.mul(wn, n_mask[:, :, None])
    inner = diff.reduce_sum(diff.mul(cost, wn), axis=1)

    empty = n_mask.sum(axis=1) == 0
    if np.any(empty):
        fb_parts = [np.zeros((n, 3 + spec.prev_feat_dim))]
        if spec.cur_feat_dim:
            fb_parts.append(cur_feats)
        fb_in = diff.concat(fb_parts, axis=-1)
        fallback = diff.mlp_forward(
            spec.mlp_cost, view.mlp(f"{prefix}.cost", spec.mlp_cost), fb_in)
        e = empty.astype(np.float64)[:, None]
        inner = diff.add(diff.mul(inner, 1.0 - e), diff.mul(fallback, e))

    m_idx, m_mask = same_nbrs if same_nbrs is not None \
        else spec.same_frame.padded(cur_c, cur_c)
    km = m_idx.shape[1]
    d_same = diff.sub(diff.gather(cur_coords, m_idx), cur_col)
    wm = _pointwise_mlp(spec.mlp_wm, view.mlp(f"{prefix}.wm", spec.mlp_wm),
                        d_same, n, km)
    if not m_mask.all():
        wm = diff.mul(wm, m_mask[:, :, None])
    gathered = diff.gather(inner, m_idx)
    return diff.reduce_sum(diff.mul(gathered, wm), axis=1)


def cost_volume_group(specs: list[CostVolumeSpec], prefixes: list[str],
                      view: ParamView,
                      cur_coords: TensorLike, cur_feats: Optional[TensorLike],
                      prev_coords: TensorLike, prev_feats: Optional[TensorLike],
                      same_nbrs, cross_nbrs) -> list[TensorLike]:
    """Several cost volumes over one frame pair, sharing the input graph.

    All specs must agree on feature dims; the gather/concat nodes are built
    once and only the per-operator MLPs differ. Semantically identical to
    calling cost_volume per spec.
    """
    base = specs[0]
    for s in specs[1:]:
        if (s.prev_feat_dim, s.cur_feat_dim) != (base.prev_feat_dim,
                                                 base.cur_feat_dim):
            raise ValueError("grouped cost volumes must share feature dims")
    _check_feat_dim("current", cur_feats, base.cur_feat_dim)
    _check_feat_dim("previous", prev_feats, base.prev_feat_dim)
    cur_c = value_of(cur_coords)
    n = cur_c.shape[0]

    n_idx, n_mask = cross_nbrs
    kn = n_idx.shape[1]
    cur_col = diff.reshape(cur_coords, (n, 1, 3))
    d_prev = diff.sub(diff.gather(prev_coords, n_idx), cur_col)
    parts = [d_prev]
    if base.prev_feat_dim:
        parts.append(diff.gather(prev_feats, n_idx))
    if base.cur_feat_dim:
        cur_f = diff.reshape(cur_feats, (n, 1, base.cur_feat_dim))
        parts.append(diff.broadcast_to(cur_f, (n, kn, base.cur_feat_dim)))
    stacked = diff.concat(parts, axis=-1)
    empty = n_mask.sum(axis=1) == 0
    fb_in = None
    if np.any(empty):
        fb_parts = [np.zeros((n, 3 + base.prev_feat_dim))]
        if base.cur_feat_dim:
            fb_parts.append(cur_feats)
        fb_in = diff.concat(fb_parts, axis=-1)

    m_idx, m_mask = same_nbrs
    km = m_idx.shape[1]
    d_same = diff.sub(diff.gather(cur_coords, m_idx), cur_col)

    outs = []
    for spec, prefix in zip(specs, prefixes):
        cost = _pointwise_mlp(spec.mlp_cost,
                              view.mlp(f"{prefix}.cost", spec.mlp_cost),
                              stacked, n, kn)
        wn = _pointwise_mlp(spec.mlp_wn, view.mlp(f"{prefix}.wn", spec.mlp_wn),
                            d_prev, n, kn)
        if not n_mask.all():
            wn = diff.mul(wn, n_mask[:, :, None])
        inner = diff.reduce_sum(diff.mul(cost, wn), axis=1)
        if fb_in is not None:
            fallback = diff.mlp_forward(
                spec.mlp_cost, view.mlp(f"{prefix}.cost", spec.mlp_cost), fb_in)
            e = empty.astype(np.float64)[:, None]
            inner = diff.add(diff.mul(inner, 1.0 - e), diff.mul(fallback, e))
        wm = _pointwise_mlp(spec.mlp_wm, view.mlp(f"{prefix}.wm", spec.mlp_wm),
                            d_same, n, km)
        if not m_mask.all():
            wm = diff.mul(wm, m_mask[:, :, None])
        gathered = diff.gather(inner, m_idx)
        outs.append(diff.reduce_sum(diff.mul(gathered, wm), axis=1))
    return outs


def local_aggregate(feat_spec: MlpSpec, wgt_spec: MlpSpec, view: ParamView,
                    prefix: str, query_coords: TensorLike,
                    target_coords: TensorLike, target_feats: TensorLike,
                    nbhd: NeighborhoodSpec,
                    cache: Optional[NeighborCache] = None) -> TensorLike:
    """Simplified point convolution, the cost volume's inner sum turned on a
    single cloud: per query point, an MLP over (relative neighbor coordinate,
    neighbor features), scaled by a learned scalar of the relative coordinate
    and summed over the neighborhood.
    """
    q = value_of(query_coords)
    t = value_of(target_coords)
    idx, mask = cache.padded(nbhd, q, t) if cache else nbhd.padded(q, t)
    if np.any(mask.sum(axis=1) == 0):
        raise ValueError(
            "empty neighborhood in local aggregation; enlarge the radius")
    nq, k = idx.shape
    rel = diff.sub(diff.gather(target_coords, idx),
                   diff.reshape(query_coords, (nq, 1, 3)))
    stacked = diff.concat([rel, diff.gather(target_feats, idx)], axis=-1)
    z = _pointwise_mlp(feat_spec, view.mlp(f"{prefix}.feat", feat_spec),
                       stacked, nq, k)
    w = _pointwise_mlp(wgt_spec, view.mlp(f"{prefix}.wgt", wgt_spec),
                       rel, nq, k)
    if not mask.all():
        w = diff.mul(w, mask[:, :, None])
    return diff.reduce_sum(diff.mul(z, w), axis=1)
