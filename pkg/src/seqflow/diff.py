"""Minimal dense-tensor compute layer with tape-based reverse-mode gradients.

Every op dispatches on its inputs: if any input is a Tensor the result is
recorded on that Tensor's Tape; plain numpy arrays and scalars are treated
as constants and the same call computes in raw numpy. Network code is
therefore written once and runs in both differentiable (training) and
plain-array (evaluation) mode.

All values are float64. The graph is data-dependent (neighbor lists differ
per frame), which is why a tape is rebuilt per forward pass instead of a
static graph. Neighbor index selection is not differentiated; gradients
flow through costs, features and coordinates only.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional, Sequence, Union

import numpy as np

Array = np.ndarray
TensorLike = Union["Tensor", np.ndarray, float, int]


class Tape:
    """Ordered record of primitive ops; backward replays it in reverse."""

    def __init__(self):
        self._backwards: list[Optional[Callable[[Array], Sequence[tuple[int, Array]]]]] = []
        self._tensors: list["Tensor"] = []

    def _record(self, data: Array, backward, op: str) -> "Tensor":
        t = Tensor(data, self, len(self._backwards), op)
        self._backwards.append(backward)
        self._tensors.append(t)
        return t

    def leaf(self, data) -> "Tensor":
        """Register an input/parameter node; backward deposits its gradient."""
        arr = np.asarray(data, dtype=np.float64)
        return self._record(arr, None, "leaf")

    def __len__(self) -> int:
        return len(self._backwards)

    def backward(self, output: "Tensor") -> None:
        """Accumulate d(output)/d(node) into every node's .grad.

        Raises:
            ValueError: if output is not a scalar (size-1) tensor.
        """
        if output.tape is not self:
            raise ValueError("output was not recorded on this tape")
        if output.data.size != 1:
            raise ValueError(
                f"backward needs a scalar output, got shape {output.data.shape}"
            )
        grads: list[Optional[Array]] = [None] * len(self._backwards)
        # owned[i]: grads[i] is private and safe to accumulate into in place
        owned = [False] * len(self._backwards)
        grads[output.node_id] = np.ones_like(output.data)
        owned[output.node_id] = True
        for nid in range(output.node_id, -1, -1):
            g = grads[nid]
            if g is None:
                continue
            fn = self._backwards[nid]
            if fn is None:  # leaf
                continue
            for in_id, contrib in fn(g):
                if grads[in_id] is None:
                    grads[in_id] = contrib
                elif owned[in_id]:
                    grads[in_id] += contrib
                else:
                    grads[in_id] = grads[in_id] + contrib
                    owned[in_id] = True
        for t, g in zip(self._tensors, grads):
            t.grad = g


class Tensor:
    """A float64 ndarray bound to a Tape node."""

    __slots__ = ("data", "tape", "node_id", "op", "grad")

    def __init__(self, data: Array, tape: Tape, node_id: int, op: str):
        self.data = data
        self.tape = tape
        self.node_id = node_id
        self.op = op
        self.grad: Optional[Array] = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, op={self.op!r})"


def is_tensor(x) -> bool:
    return isinstance(x, Tensor)


def value_of(x: TensorLike) -> Array:
    """Raw ndarray behind a TensorLike."""
    if isinstance(x, Tensor):
        return x.data
    return np.asarray(x, dtype=np.float64)


def _tape_of(*xs) -> Optional[Tape]:
    tape = None
    for x in xs:
        if isinstance(x, Tensor):
            if tape is None:
                tape = x.tape
            elif tape is not x.tape:
                raise ValueError("operands live on different tapes")
    return tape


def _unbroadcast(g: Array, shape: tuple[int, ...]) -> Array:
    """Sum a gradient down to the shape it was broadcast from."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _binary(a: TensorLike, b: TensorLike, fwd, bwd_a, bwd_b, op: str):
    tape = _tape_of(a, b)
    av, bv = value_of(a), value_of(b)
    out = fwd(av, bv)
    if tape is None:
        return out
    def backward(g: Array):
        contribs = []
        if isinstance(a, Tensor):
            contribs.append((a.node_id, _unbroadcast(bwd_a(g, av, bv), av.shape)))
        if isinstance(b, Tensor):
            contribs.append((b.node_id, _unbroadcast(bwd_b(g, av, bv), bv.shape)))
        return contribs
    return tape._record(out, backward, op)


def add(a: TensorLike, b: TensorLike):
    return _binary(a, b, lambda x, y: x + y,
                   lambda g, x, y: g, lambda g, x, y: g, "add")


def sub(a: TensorLike, b: TensorLike):
    return _binary(a, b, lambda x, y: x - y,
                   lambda g, x, y: g, lambda g, x, y: -g, "sub")


def mul(a: TensorLike, b: TensorLike):
    return _binary(a, b, lambda x, y: x * y,
                   lambda g, x, y: g * y, lambda g, x, y: g * x, "mul")


def matmul(a: TensorLike, b: TensorLike):
    tape = _tape_of(a, b)
    av, bv = value_of(a), value_of(b)
    if av.ndim != 2 or bv.ndim != 2:
        raise ValueError(f"matmul expects 2-D operands, got {av.shape} @ {bv.shape}")
    if av.shape[1] != bv.shape[0]:
        raise ValueError(f"matmul shape mismatch: {av.shape} @ {bv.shape}")
    out = av @ bv
    if tape is None:
        return out
    def backward(g: Array):
        contribs = []
        if isinstance(a, Tensor):
            contribs.append((a.node_id, g @ bv.T))
        if isinstance(b, Tensor):
            contribs.append((b.node_id, av.T @ g))
        return contribs
    return tape._record(out, backward, "matmul")


def _unary(x: TensorLike, fwd, bwd, op: str):
    tape = _tape_of(x)
    xv = value_of(x)
    out = fwd(xv)
    if tape is None:
        return out
    def backward(g: Array):
        return [(x.node_id, bwd(g, xv, out))]
    return tape._record(out, backward, op)


def relu(x: TensorLike):
    return _unary(x, lambda v: np.maximum(v, 0.0),
                  lambda g, v, o: g * (v > 0.0), "relu")


def sigmoid(x: TensorLike):
    def fwd(v):
        out = np.empty_like(v)
        pos = v >= 0
        out[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
        ev = np.exp(v[~pos])
        out[~pos] = ev / (1.0 + ev)
        return out
    return _unary(x, fwd, lambda g, v, o: g * o * (1.0 - o), "sigmoid")


def tanh(x: TensorLike):
    return _unary(x, np.tanh, lambda g, v, o: g * (1.0 - o * o), "tanh")


def reshape(x: TensorLike, shape):
    shape = tuple(shape)
    return _unary(x, lambda v: v.reshape(shape),
                  lambda g, v, o: g.reshape(v.shape), "reshape")


def broadcast_to(x: TensorLike, shape):
    shape = tuple(shape)
    return _unary(x, lambda v: np.broadcast_to(v, shape).copy(),
                  lambda g, v, o: _unbroadcast(g, v.shape), "broadcast_to")


def gather(x: TensorLike, idx) -> TensorLike:
    """Rows x[idx]; backward scatter-adds into the source rows."""
    idx = np.asarray(idx, dtype=np.int64)
    tape = _tape_of(x)
    xv = value_of(x)
    out = xv[idx]
    if tape is None:
        return out
    def backward(g: Array):
        z = np.zeros_like(xv)
        np.add.at(z, idx, g)
        return [(x.node_id, z)]
    return tape._record(out, backward, "gather")


def concat(parts: Sequence[TensorLike], axis: int = -1):
    tape = _tape_of(*parts)
    vals = [value_of(p) for p in parts]
    out = np.concatenate(vals, axis=axis)
    if tape is None:
        return out
    sizes = [v.shape[axis] for v in vals]
    offsets = np.cumsum([0] + sizes)
    def backward(g: Array):
        contribs = []
        for p, v, lo, hi in zip(parts, vals, offsets[:-1], offsets[1:]):
            if isinstance(p, Tensor):
                sl = [slice(None)] * g.ndim
                sl[axis] = slice(lo, hi)
                contribs.append((p.node_id, g[tuple(sl)]))
        return contribs
    return tape._record(out, backward, "concat")


def reduce_sum(x: TensorLike, axis: Optional[int] = None, keepdims: bool = False):
    tape = _tape_of(x)
    xv = value_of(x)
    out = xv.sum(axis=axis, keepdims=keepdims)
    if tape is None:
        return out
    def backward(g: Array):
        if axis is None:
            return [(x.node_id, np.broadcast_to(g, xv.shape).copy())]
        ge = g if keepdims else np.expand_dims(g, axis)
        return [(x.node_id, np.broadcast_to(ge, xv.shape).copy())]
    return tape._record(np.asarray(out), backward, "reduce_sum")


def reduce_mean(x: TensorLike, axis: Optional[int] = None):
    xv = value_of(x)
    n = xv.size if axis is None else xv.shape[axis]
    return mul(reduce_sum(x, axis=axis), 1.0 / n)


def weighted_neighbor_sum(
    values: Sequence[TensorLike],
    weights: Sequence[TensorLike],
    empty_value: Optional[TensorLike] = None,
):
    """Sum of weights[i] * values[i] over a neighbor list.

    An empty list returns empty_value (callers supply the documented
    fallback, e.g. the query's own matching cost); with no fallback an
    empty list is an error.
    """
    if len(values) != len(weights):
        raise ValueError(
            f"got {len(values)} values but {len(weights)} weights"
        )
    if not values:
        if empty_value is None:
            raise ValueError("empty neighbor list and no fallback value")
        return empty_value
    shape = value_of(values[0]).shape
    for v in values[1:]:
        if value_of(v).shape != shape:
            raise ValueError("neighbor values disagree in shape")
    acc = mul(values[0], weights[0])
    for v, w in zip(values[1:], weights[1:]):
        acc = add(acc, mul(v, w))
    return acc


# ---------------------------------------------------------------------------
# MLPs and the parameter store
# ---------------------------------------------------------------------------

_ACTIVATIONS = {
    None: lambda x: x,
    "relu": relu,
    "sigmoid": sigmoid,
    "tanh": tanh,
}


@dataclass(frozen=True)
class MlpSpec:
    """Layer widths plus the activation after each affine layer."""

    widths: tuple[int, ...]
    activations: tuple[Optional[str], ...]

    def __post_init__(self):
        if len(self.widths) < 2:
            raise ValueError("an MLP needs at least one layer")
        if len(self.activations) != len(self.widths) - 1:
            raise ValueError(
                f"{len(self.widths) - 1} layers need as many activations, "
                f"got {len(self.activations)}"
            )
        for a in self.activations:
            if a not in _ACTIVATIONS:
                raise ValueError(f"unknown activation {a!r}")
        if any(w < 1 for w in self.widths):
            raise ValueError("layer widths must be positive")

    @staticmethod
    def make(widths: Sequence[int], hidden_activation: str = "relu") -> "MlpSpec":
        """Hidden layers use hidden_activation; the final layer is linear."""
        widths = tuple(int(w) for w in widths)
        acts = tuple([hidden_activation] * (len(widths) - 2) + [None])
        return MlpSpec(widths, acts)

    @property
    def in_dim(self) -> int:
        return self.widths[0]

    @property
    def out_dim(self) -> int:
        return self.widths[-1]

    def param_shapes(self) -> list[tuple[tuple[int, int], tuple[int]]]:
        return [
            ((w_in, w_out), (w_out,))
            for w_in, w_out in zip(self.widths[:-1], self.widths[1:])
        ]

    def param_count(self) -> int:
        return sum(w_in * w_out + w_out
                   for w_in, w_out in zip(self.widths[:-1], self.widths[1:]))


def mlp_forward(spec: MlpSpec, layer_params: Sequence[tuple[TensorLike, TensorLike]],
                x: TensorLike):
    """Affine + activation stack over rows of a (rows, in_dim) input."""
    xv = value_of(x)
    if xv.ndim != 2 or xv.shape[1] != spec.in_dim:
        raise ValueError(
            f"input shape {xv.shape} incompatible with first layer width "
            f"{spec.in_dim}"
        )
    if len(layer_params) != len(spec.widths) - 1:
        raise ValueError("layer parameter count does not match spec")
    out = x
    for (w, b), act in zip(layer_params, spec.activations):
        out = add(matmul(out, w), b)
        out = _ACTIVATIONS[act](out)
    return out


class ParamStore:
    """Named float64 parameter slices with flat-vector import/export."""

    def __init__(self):
        self._arrays: dict[str, Array] = {}

    def register(self, name: str, array) -> None:
        if name in self._arrays:
            raise ValueError(f"duplicate parameter slice {name!r}")
        self._arrays[name] = np.array(array, dtype=np.float64)

    def declare_mlp(self, prefix: str, spec: MlpSpec, rng: np.random.Generator,
                    scale: float = 1.0) -> None:
        """Register weight/bias slices for every layer of an MLP.

        Weights draw from N(0, scale / sqrt(fan_in)); biases start at zero.
        """
        for i, (w_shape, b_shape) in enumerate(spec.param_shapes()):
            std = scale / np.sqrt(w_shape[0])
            self.register(f"{prefix}.layer{i}.w", rng.normal(0.0, std, w_shape))
            self.register(f"{prefix}.layer{i}.b", np.zeros(b_shape))

    def __contains__(self, name: str) -> bool:
        return name in self._arrays

    def get(self, name: str) -> Array:
        return self._arrays[name]

    def set(self, name: str, array) -> None:
        arr = np.asarray(array, dtype=np.float64)
        if arr.shape != self._arrays[name].shape:
            raise ValueError(
                f"shape mismatch for {name!r}: {arr.shape} vs "
                f"{self._arrays[name].shape}"
            )
        self._arrays[name] = arr.copy()

    def names(self) -> list[str]:
        return list(self._arrays)

    def slices(self) -> list[tuple[str, tuple[int, ...]]]:
        return [(name, arr.shape) for name, arr in self._arrays.items()]

    def param_count(self) -> int:
        return sum(arr.size for arr in self._arrays.values())

    def flatten(self) -> Array:
        if not self._arrays:
            return np.empty(0)
        return np.concatenate([a.ravel() for a in self._arrays.values()])

    def load_flat(self, vec: Array) -> None:
        vec = np.asarray(vec, dtype=np.float64)
        if vec.size != self.param_count():
            raise ValueError(
                f"flat vector has {vec.size} entries, store holds "
                f"{self.param_count()}"
            )
        pos = 0
        for name, arr in self._arrays.items():
            self._arrays[name] = vec[pos:pos + arr.size].reshape(arr.shape).copy()
            pos += arr.size

    def copy(self) -> "ParamStore":
        dup = ParamStore()
        for name, arr in self._arrays.items():
            dup.register(name, arr)
        return dup

    def bind(self, tape: Optional[Tape]) -> "ParamView":
        return ParamView(self, tape)


class ParamView:
    """Per-forward-pass view of a ParamStore.

    With a tape, each slice becomes a leaf Tensor (created once, so repeated
    use accumulates gradients); without one, raw arrays come back and the
    whole forward pass stays in plain numpy.
    """

    def __init__(self, store: ParamStore, tape: Optional[Tape]):
        self._store = store
        self._tape = tape
        self._leaves: dict[str, Tensor] = {}
        self._mlp_cache: dict[str, list] = {}

    @property
    def tape(self) -> Optional[Tape]:
        return self._tape

    def __getitem__(self, name: str) -> TensorLike:
        if self._tape is None:
            return self._store.get(name)
        leaf = self._leaves.get(name)
        if leaf is None:
            leaf = self._tape.leaf(self._store.get(name))
            self._leaves[name] = leaf
        return leaf

    def mlp(self, prefix: str, spec: MlpSpec) -> list[tuple[TensorLike, TensorLike]]:
        layers = self._mlp_cache.get(prefix)
        if layers is None:
            layers = [
                (self[f"{prefix}.layer{i}.w"], self[f"{prefix}.layer{i}.b"])
                for i in range(len(spec.widths) - 1)
            ]
            self._mlp_cache[prefix] = layers
        return layers

    def grads(self) -> dict[str, Array]:
        """Gradient per slice after Tape.backward; untouched slices get zeros."""
        out = {}
        for name in self._store.names():
            leaf = self._leaves.get(name)
            if leaf is not None and leaf.grad is not None:
                out[name] = leaf.grad
            else:
                out[name] = np.zeros_like(self._store.get(name))
        return out
