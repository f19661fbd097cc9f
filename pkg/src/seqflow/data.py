"""Synthetic sequence generation and the on-disk sequence format.

Scenes are unions of rigid objects (boxes, sphere shells, planar patches)
whose surfaces are sampled once and transported rigidly step by step, so
every sampled point has an exact trajectory and the backward flows are
exact by construction. Each frame independently resamples the union by
default (frames do not correspond point-by-point); future frames always
reuse the last input frame's sample so forecasting ground truth corresponds
row-wise.

Files are little-endian binary with magic "SPCMSEQ1" and a trailing CRC32,
making round-trips bit-exact across platforms.
"""

from __future__ import annotations

import hashlib
import json
import struct
import zlib
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .geom import CloudSequence, PointCloudFrame

OBJECT_SHAPES = ("box", "sphere-shell", "planar")
SAMPLING_MODES = ("independent", "corresponding")

MAGIC_PREFIX = b"SPCMSEQ"
FORMAT_VERSION = b"1"


class SequenceIOError(Exception):
    """Base class for sequence file problems."""


class SequenceFormatError(SequenceIOError):
    """Not a sequence file, or a malformed header."""


class SequenceVersionError(SequenceIOError):
    """A sequence file written by an incompatible format version."""


class SequenceTruncatedError(SequenceIOError):
    """File ends before the declared payload does."""


class SequenceChecksumError(SequenceIOError):
    """Payload does not match its checksum."""


@dataclass(frozen=True)
class ObjectSpec:
    """One rigid object: shape, sampling density, pose, per-step motion."""

    shape: str
    n_points: int
    center: tuple[float, float, float]
    extent: float
    rotation_axis: tuple[float, float, float] = (0.0, 0.0, 1.0)
    rotation_angle: float = 0.0  # radians per step
    translation: tuple[float, float, float] = (0.0, 0.0, 0.0)
    initial_rotation: float = 0.0

    def __post_init__(self):
        if self.shape not in OBJECT_SHAPES:
            raise ValueError(f"unknown shape {self.shape!r}")
        if self.n_points < 1:
            raise ValueError("n_points must be positive")
        if self.extent <= 0:
            raise ValueError("extent must be positive")


@dataclass(frozen=True)
class SceneSpec:
    """Deterministic recipe for one sequence.

    n_frames covers inputs plus futures; n_input of them are observations.
    occlusion_fraction masks floor(f * N) random points per frame.
    """

    objects: tuple[ObjectSpec, ...]
    n_frames: int = 10
    n_input: int = 5
    points_per_frame: int = 256
    occlusion_fraction: float = 0.0
    sampling: str = "independent"
    seed: int = 0

    def __post_init__(self):
        if len(self.objects) == 0:
            raise ValueError("a scene needs at least one object")
        if self.n_frames < 2:
            raise ValueError("n_frames must be at least 2")
        if not 2 <= self.n_input <= self.n_frames:
            raise ValueError("n_input out of range")
        if self.points_per_frame < 1:
            raise ValueError("points_per_frame must be positive")
        if not 0.0 <= self.occlusion_fraction < 1.0:
            raise ValueError("occlusion_fraction must lie in [0, 1)")
        if self.sampling not in SAMPLING_MODES:
            raise ValueError(f"unknown sampling mode {self.sampling!r}")


def spec_hash(spec: SceneSpec) -> str:
    payload = json.dumps(asdict(spec), sort_keys=True)
    return hashlib.sha256(payload.encode()).hexdigest()[:16]


def rotation_matrix(axis, angle: float) -> np.ndarray:
    """Rodrigues rotation about a (not necessarily unit) axis."""
    ax = np.asarray(axis, dtype=np.float64)
    norm = np.linalg.norm(ax)
    if norm == 0:
        return np.eye(3)
    x, y, z = ax / norm
    c, s = np.cos(angle), np.sin(angle)
    cross = np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])
    outer = np.outer([x, y, z], [x, y, z])
    return c * np.eye(3) + s * cross + (1.0 - c) * outer


def _sample_surface(obj: ObjectSpec, rng: np.random.Generator) -> np.ndarray:
    n, e = obj.n_points, obj.extent
    if obj.shape == "sphere-shell":
        d = rng.normal(size=(n, 3))
        d /= np.linalg.norm(d, axis=1, keepdims=True)
        return e * d
    if obj.shape == "planar":
        uv = rng.uniform(-e, e, size=(n, 2))
        return np.column_stack([uv, np.zeros(n)])
    # box: pick faces uniformly (a cube's faces have equal area)
    face = rng.integers(0, 6, size=n)
    uv = rng.uniform(-e, e, size=(n, 2))
    pts = np.empty((n, 3))
    axis = face // 2
    sign = np.where(face % 2 == 0, e, -e)
    for a in range(3):
        rows = axis == a
        others = [d for d in range(3) if d != a]
        pts[rows, a] = sign[rows]
        pts[np.ix_(rows, others)] = uv[rows]
    return pts


def generate_scene(spec: SceneSpec) -> CloudSequence:
    """Sample a scene and return frames with exact backward flows.

    A frame's flow row j is the displacement of that frame's point j from
    its own position one step earlier; applying -flow reproduces the
    previous position exactly for any persistent point.
    """
    rng = np.random.default_rng(spec.seed)
    locals_, centers, rots = [], [], []
    for obj in spec.objects:
        local = _sample_surface(obj, rng)
        if obj.initial_rotation:
            local = local @ rotation_matrix(
                obj.rotation_axis, obj.initial_rotation).T
        locals_.append(local)
        centers.append(np.asarray(obj.center, dtype=np.float64))
        rots.append(rotation_matrix(obj.rotation_axis, obj.rotation_angle))

    total = sum(obj.n_points for obj in spec.objects)
    if total < spec.points_per_frame:
        raise ValueError(
            f"objects supply {total} surface points, fewer than the "
            f"{spec.points_per_frame} requested per frame")

    # world[t]: positions of every surface point at step t
    world = []
    cur_locals = [l.copy() for l in locals_]
    cur_centers = [c.copy() for c in centers]
    for t in range(spec.n_frames):
        if t > 0:
            for i, obj in enumerate(spec.objects):
                cur_locals[i] = cur_locals[i] @ rots[i].T
                cur_centers[i] = cur_centers[i] + np.asarray(obj.translation)
        world.append(np.vstack([l + c for l, c in zip(cur_locals, cur_centers)]))

    n = spec.points_per_frame
    if spec.sampling == "corresponding":
        shared = rng.choice(total, size=n, replace=False)
        samples = [shared] * spec.n_frames
    else:
        samples = [rng.choice(total, size=n, replace=False)
                   for _ in range(spec.n_input)]
        # future frames track the last input frame's sample
        samples += [samples[spec.n_input - 1]] * (spec.n_frames - spec.n_input)

    n_occluded = int(spec.occlusion_fraction * n)
    frames, flows = [], []
    for t in range(spec.n_frames):
        idx = samples[t]
        mask = np.ones(n, dtype=bool)
        if n_occluded:
            mask[rng.choice(n, size=n_occluded, replace=False)] = False
        frames.append(PointCloudFrame(world[t][idx], valid_mask=mask))
        if t > 0:
            flows.append(world[t][idx] - world[t - 1][idx])
    return CloudSequence(frames=frames, gt_flows=flows, n_input=spec.n_input)


def random_scene_spec(seed: int, n_frames: int = 10, n_input: int = 5,
                      points_per_frame: int = 256,
                      max_objects: int = 4,
                      extent_range: tuple[float, float] = (0.1, 0.3),
                      speed_range: tuple[float, float] = (0.3, 1.0),
                      max_translation: float = 0.15,
                      max_rotation_deg: float = 15.0,
                      occlusion_fraction: float = 0.0,
                      sampling: str = "independent") -> SceneSpec:
    """Draw a random rigid-motion scene within the given motion bounds.

    Objects stay small so the per-frame samples keep the surface sampling
    spacing below the per-step motion; otherwise frame-to-frame
    correspondence is geometrically unrecoverable and flow supervision
    carries no learnable signal.
    """
    rng = np.random.default_rng(seed)
    n_obj = int(rng.integers(1, max_objects + 1))
    objects = []
    for _ in range(n_obj):
        axis = rng.normal(size=3)
        direction = rng.normal(size=3)
        direction /= np.linalg.norm(direction)
        speed = rng.uniform(*speed_range) * max_translation
        angle = np.deg2rad(rng.uniform(0.0, max_rotation_deg))
        objects.append(ObjectSpec(
            shape=str(rng.choice(OBJECT_SHAPES)),
            n_points=2 * points_per_frame,
            center=tuple(rng.uniform(-1.0, 1.0, size=3)),
            extent=float(rng.uniform(*extent_range)),
            rotation_axis=tuple(axis),
            rotation_angle=float(angle),
            translation=tuple(speed * direction),
        ))
    return SceneSpec(objects=tuple(objects), n_frames=n_frames,
                     n_input=n_input, points_per_frame=points_per_frame,
                     occlusion_fraction=occlusion_fraction,
                     sampling=sampling, seed=seed)


# ---------------------------------------------------------------------------
# Binary sequence format
# ---------------------------------------------------------------------------

_FLAG_FEATS = 1
_FLAG_FLOWS = 2
_FLAG_MASKS = 4


def _pack_sequence(seq: CloudSequence) -> bytes:
    has_feats = seq.frames[0].feats is not None
    has_flows = seq.gt_flows is not None
    flags = (_FLAG_FEATS * has_feats) | (_FLAG_FLOWS * has_flows) | _FLAG_MASKS
    d = seq.frames[0].feat_dim
    parts = [struct.pack("<IIBI", seq.t, seq.n_input or 0, flags, d)]
    for frame in seq.frames:
        if (frame.feats is not None) != has_feats or frame.feat_dim != d:
            raise ValueError("frames disagree on feature layout")
        parts.append(struct.pack("<I", frame.n))
        parts.append(frame.coords.astype("<f8").tobytes())
        if has_feats:
            parts.append(frame.feats.astype("<f8").tobytes())
        parts.append(np.asarray(frame.valid_mask, dtype=np.uint8).tobytes())
    if has_flows:
        for flow in seq.gt_flows:
            parts.append(flow.astype("<f8").tobytes())
    return b"".join(parts)


def write_sequence(seq: CloudSequence, path) -> None:
    """Serialize a sequence; the trailing CRC32 covers header and payload."""
    payload = _pack_sequence(seq)
    blob = MAGIC_PREFIX + FORMAT_VERSION + payload
    blob += struct.pack("<I", zlib.crc32(payload) & 0xFFFFFFFF)
    Path(path).write_bytes(blob)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise SequenceTruncatedError(
                f"file ends at byte {len(self.buf)}, needed {self.pos + n}")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def array(self, count: int, dtype) -> np.ndarray:
        nbytes = count * np.dtype(dtype).itemsize
        return np.frombuffer(self.take(nbytes), dtype=dtype).copy()


def read_sequence(path) -> CloudSequence:
    """Read a sequence written by write_sequence, verifying the checksum."""
    blob = Path(path).read_bytes()
    if len(blob) < len(MAGIC_PREFIX) + 1:
        raise SequenceFormatError(f"{path}: too short to be a sequence file")
    magic, version = blob[:7], blob[7:8]
    if magic != MAGIC_PREFIX:
        raise SequenceFormatError(f"{path}: bad magic {magic!r}")
    if version != FORMAT_VERSION:
        raise SequenceVersionError(
            f"{path}: format version {version.decode(errors='replace')!r}, "
            f"this reader supports {FORMAT_VERSION.decode()!r}")
    if len(blob) < 12:
        raise SequenceTruncatedError(f"{path}: missing checksum")
    payload, (crc,) = blob[8:-4], struct.unpack("<I", blob[-4:])
    if zlib.crc32(payload) & 0xFFFFFFFF != crc:
        raise SequenceChecksumError(f"{path}: checksum mismatch")

    r = _Reader(payload)
    t, n_input, flags, d = r.unpack("<IIBI")
    if t < 2:
        raise SequenceFormatError(f"{path}: header declares {t} frames")
    frames, counts = [], []
    for _ in range(t):
        (n,) = r.unpack("<I")
        counts.append(n)
        coords = r.array(n * 3, "<f8").reshape(n, 3)
        feats = None
        if flags & _FLAG_FEATS:
            feats = r.array(n * d, "<f8").reshape(n, d)
        mask = None
        if flags & _FLAG_MASKS:
            mask = r.array(n, np.uint8).astype(bool)
        frames.append(PointCloudFrame(coords, feats=feats, valid_mask=mask))
    flows = None
    if flags & _FLAG_FLOWS:
        flows = [r.array(counts[i + 1] * 3, "<f8").reshape(counts[i + 1], 3)
                 for i in range(t - 1)]
    if r.pos != len(payload):
        raise SequenceFormatError(
            f"{path}: {len(payload) - r.pos} trailing bytes")
    return CloudSequence(frames=frames, gt_flows=flows,
                         n_input=n_input or None)


# ---------------------------------------------------------------------------
# Split manifests
# ---------------------------------------------------------------------------

SPLIT_NAMES = ("train", "val", "test")


def make_split(paths: Sequence[str], hashes: Sequence[str],
               counts: tuple[int, int, int], seed: int) -> list[dict]:
    """Deterministic disjoint train/val/test assignment.

    Returns manifest rows {path, spec_hash, split}; counts must fit within
    the available sequences.
    """
    if len(paths) != len(hashes):
        raise ValueError("one hash per path required")
    if sum(counts) > len(paths):
        raise ValueError(
            f"split counts {counts} overlap: they total {sum(counts)} but "
            f"only {len(paths)} sequences exist")
    order = np.random.default_rng(seed).permutation(len(paths))
    rows = []
    bounds = np.cumsum((0,) + tuple(counts))
    for split, lo, hi in zip(SPLIT_NAMES, bounds[:-1], bounds[1:]):
        for i in order[lo:hi]:
            rows.append({"path": str(paths[i]), "spec_hash": hashes[i],
                         "split": split})
    return rows


def write_manifest(rows: Sequence[dict], path) -> None:
    with open(path, "w") as fh:
        for row in rows:
            fh.write(json.dumps(row, sort_keys=True) + "\n")


def read_manifest(path, split: Optional[str] = None) -> list[dict]:
    rows = []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if line:
                rows.append(json.loads(line))
    if split is not None:
        rows = [r for r in rows if r["split"] == split]
    return rows
