"""Run configuration, checkpoints, the training loop, and evaluation.

Training is deterministic given the run seed: sequence order, parameter
init and gradient accumulation are all seeded, and determinism mode (the
default) accumulates batch gradients in sequence order. Fast mode evaluates
batch members on a thread pool and sums gradients in completion order,
which may drift in the last float bits between runs.
"""

from __future__ import annotations

import hashlib
import json
import struct
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
from threadpoolctl import threadpool_limits

from . import __version__, diff
from .data import read_manifest, read_sequence
from .diff import ParamStore, Tape, value_of
from .geom import CloudSequence
from .metrics import ade_fde, emd, flow_stats, sinkhorn_distance
from .net import (ArchConfig, arch_hash, as_view, estimate_flows, forecast,
                  init_model_params)
from .objectives import (AdamState, LossConfig, chamfer, optimizer_step,
                         spf_selfsup_loss, spf_supervised_loss, ssfe_loss)

TASKS = ("ssfe", "spf_sup", "spf_selfsup")
_TASK_LOSS_MODE = {"ssfe": "supervised_ssfe", "spf_sup": "supervised_spf",
                   "spf_selfsup": "selfsup_spf"}

CHECKPOINT_MAGIC = b"SPCMCKP1"


class ConfigError(Exception):
    """Invalid run configuration (exit code 2)."""


class DataError(Exception):
    """Missing or malformed data (exit code 3)."""


class NumericError(Exception):
    """Non-finite numbers during training (exit code 4)."""


@dataclass(frozen=True)
class RunConfig:
    """Everything one training or evaluation run depends on."""

    task: str = "ssfe"
    seed: int = 0
    epochs: int = 10
    max_steps: Optional[int] = None
    batch_size: int = 1
    arch: ArchConfig = field(default_factory=ArchConfig)
    level_weights: tuple[float, ...] = (0.32, 0.08, 0.02)
    lr: float = 1e-3
    weight_decay: float = 1e-4
    clip_norm: float = 1.0
    lr_milestones: tuple[int, ...] = ()  # epochs at which lr decays
    lr_decay: float = 0.1
    manifest: str = ""
    out_dir: str = "."
    init_checkpoint: Optional[str] = None
    threads: int = 1
    deterministic: bool = True

    def __post_init__(self):
        if self.task not in TASKS:
            raise ConfigError(f"unknown task {self.task!r}; choose from {TASKS}")
        if len(self.level_weights) != self.arch.num_levels:
            raise ConfigError(
                f"{self.arch.num_levels} levels need as many level weights")
        if self.epochs < 0 or self.batch_size < 1 or self.threads < 1:
            raise ConfigError("epochs, batch_size and threads must be sane")

    def loss_config(self) -> LossConfig:
        return LossConfig(level_weights=tuple(self.level_weights),
                          mode=_TASK_LOSS_MODE[self.task])

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, indent=2)

    @staticmethod
    def from_dict(payload: dict) -> "RunConfig":
        payload = dict(payload)
        arch = payload.pop("arch", {})
        if not isinstance(arch, dict):
            raise ConfigError("arch must be an object")
        def tup(d, key):
            if key in d and isinstance(d[key], list):
                d[key] = tuple(d[key])
        for key in ("level_divisors", "feature_dims", "cost_hidden",
                    "weight_hidden", "conv_hidden", "refine_hidden",
                    "head_hidden"):
            tup(arch, key)
        for key in ("level_weights", "lr_milestones"):
            tup(payload, key)
        try:
            return RunConfig(arch=ArchConfig(**arch), **payload)
        except TypeError as exc:
            raise ConfigError(f"bad configuration field: {exc}") from exc
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    @staticmethod
    def from_json_file(path) -> "RunConfig":
        try:
            payload = json.loads(Path(path).read_text())
        except FileNotFoundError as exc:
            raise ConfigError(f"config file not found: {path}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config is not valid JSON: {exc}") from exc
        return RunConfig.from_dict(payload)

    def config_hash(self) -> str:
        return hashlib.sha256(self.to_json().encode()).hexdigest()[:16]


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------


def save_checkpoint(path, params: ParamStore, arch: ArchConfig,
                    meta: Optional[dict] = None) -> None:
    """Binary checkpoint: named parameter slices plus the architecture hash."""
    meta_blob = json.dumps(
        {"arch_hash": arch_hash(arch), **(meta or {})}, sort_keys=True
    ).encode()
    parts = [struct.pack("<I", len(meta_blob)), meta_blob,
             struct.pack("<I", len(params.names()))]
    for name, arr in ((n, params.get(n)) for n in params.names()):
        nb = name.encode()
        parts.append(struct.pack("<H", len(nb)))
        parts.append(nb)
        parts.append(struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.astype("<f8").tobytes())
    payload = b"".join(parts)
    blob = CHECKPOINT_MAGIC + payload
    blob += struct.pack("<I", zlib.crc32(payload) & 0xFFFFFFFF)
    Path(path).write_bytes(blob)


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    try:
        blob = Path(path).read_bytes()
    except FileNotFoundError as exc:
        raise DataError(f"checkpoint not found: {path}") from exc
    if len(blob) < len(CHECKPOINT_MAGIC) + 4 or blob[:8] != CHECKPOINT_MAGIC:
        raise DataError(f"{path}: not a checkpoint file")
    payload, (crc,) = blob[8:-4], struct.unpack("<I", blob[-4:])
    if zlib.crc32(payload) & 0xFFFFFFFF != crc:
        raise DataError(f"{path}: checkpoint checksum mismatch")
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(payload):
            raise DataError(f"{path}: truncated checkpoint")
        out = payload[pos:pos + n]
        pos += n
        return out

    (meta_len,) = struct.unpack("<I", take(4))
    meta = json.loads(take(meta_len).decode())
    (count,) = struct.unpack("<I", take(4))
    arrays: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<H", take(2))
        name = take(name_len).decode()
        (ndim,) = struct.unpack("<B", take(1))
        shape = struct.unpack(f"<{ndim}I", take(4 * ndim))
        size = int(np.prod(shape)) if ndim else 1
        arrays[name] = np.frombuffer(take(8 * size), dtype="<f8").reshape(shape).copy()
    return arrays, meta


def checkpoint_hash(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()[:16]


def load_params_into(params: ParamStore, path, arch: ArchConfig) -> dict:
    """Load a checkpoint into an existing store, enforcing the arch hash."""
    arrays, meta = load_checkpoint(path)
    expected = arch_hash(arch)
    if meta.get("arch_hash") != expected:
        raise ConfigError(
            f"checkpoint architecture hash {meta.get('arch_hash')} does not "
            f"match configured architecture {expected}")
    for name in params.names():
        if name not in arrays:
            raise ConfigError(f"checkpoint is missing slice {name!r}")
        params.set(name, arrays[name])
    return meta


# ---------------------------------------------------------------------------
# Data plumbing
# ---------------------------------------------------------------------------


def load_split(manifest_path: str, split: str) -> list[CloudSequence]:
    try:
        rows = read_manifest(manifest_path, split=split)
    except FileNotFoundError as exc:
        raise DataError(f"manifest not found: {manifest_path}") from exc
    if not rows:
        raise DataError(f"manifest {manifest_path} has no {split!r} entries")
    base = Path(manifest_path).parent
    seqs = []
    for row in rows:
        p = Path(row["path"])
        if not p.is_absolute():
            p = base / p
        seqs.append(read_sequence(p))
    return seqs


def _future_frames(seq: CloudSequence):
    if seq.n_input is None or seq.n_input >= seq.t:
        raise DataError("sequence has no future frames for forecasting")
    return seq.frames[seq.n_input:]


# ---------------------------------------------------------------------------
# Loss evaluation per task
# ---------------------------------------------------------------------------


def sequence_loss(seq: CloudSequence, params, config: RunConfig,
                  tape: Optional[Tape]):
    """Forward pass and loss for one sequence under the configured task."""
    view = params.bind(tape) if isinstance(params, ParamStore) else params
    loss_cfg = config.loss_config()
    if loss_cfg.mode == "supervised_ssfe":
        pred = estimate_flows(seq, view, config.arch)
        n_in = seq.n_input or seq.t
        masks = [seq.frames[t].valid_mask for t in range(1, n_in)]
        if seq.gt_flows is None:
            raise DataError("ssfe training needs ground-truth flows")
        return ssfe_loss(pred, seq.gt_flows[:n_in - 1], masks,
                         loss_cfg.level_weights)
    future = _future_frames(seq)
    result = forecast(seq, view, config.arch, K=len(future))
    if loss_cfg.mode == "supervised_spf":
        return spf_supervised_loss(
            result.frames, result.pyramids,
            [f.coords for f in future],
            [f.valid_mask for f in future], loss_cfg.level_weights)
    return spf_selfsup_loss(result.frames, result.pyramids,
                            [f.coords for f in future], loss_cfg.level_weights)


def _loss_and_grads(seq, params: ParamStore, config: RunConfig):
    tape = Tape()
    view = params.bind(tape)
    loss = sequence_loss(seq, view, config, tape)
    tape.backward(loss)
    return float(value_of(loss)), view.grads()


def validation_metric(seqs, params, config: RunConfig,
                      reset_state_each_step: bool = False) -> float:
    """EPE3D for flow estimation, ADE (or mean Chamfer) for forecasting."""
    view = as_view(params)
    scores = []
    for seq in seqs:
        if config.task == "ssfe":
            pred = estimate_flows(seq, view, config.arch,
                                  reset_state_each_step=reset_state_each_step)
            n_in = seq.n_input or seq.t
            stats = flow_stats(
                [value_of(f) for f in (pred.finest(s) for s in range(pred.num_steps))],
                seq.gt_flows[:n_in - 1],
                [seq.frames[t].valid_mask for t in range(1, n_in)])
            scores.append(stats.epe3d)
        else:
            future = _future_frames(seq)
            result = forecast(seq, view, config.arch, K=len(future))
            preds = [value_of(f) for f in result.frames]
            if config.task == "spf_sup":
                ade, _ = ade_fde(preds, [f.coords for f in future],
                                 [f.valid_mask for f in future])
                scores.append(ade)
            else:
                scores.append(float(np.mean(
                    [chamfer(p, f.coords) for p, f in zip(preds, future)])))
    return float(np.mean(scores))


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------


@dataclass
class TrainResult:
    params: ParamStore
    best_params: ParamStore
    history: list[dict]
    steps: int


def _accumulate_batch(batch, params, config: RunConfig):
    if config.deterministic or config.threads == 1 or len(batch) == 1:
        results = [_loss_and_grads(seq, params, config) for seq in batch]
    else:
        with ThreadPoolExecutor(max_workers=config.threads) as pool:
            results = list(pool.map(
                lambda s: _loss_and_grads(s, params, config), batch))
    total_loss = sum(r[0] for r in results)
    grads = results[0][1]
    for _, g in results[1:]:
        for name in grads:
            grads[name] = grads[name] + g[name]
    return total_loss / len(batch), grads


def train(config: RunConfig, train_seqs=None, val_seqs=None,
          on_epoch=None, init_params: Optional[ParamStore] = None
          ) -> TrainResult:
    """Train per config; returns final and best-validation parameters.

    Sequences load from the manifest unless passed explicitly; init_params
    (or config.init_checkpoint) warm-starts fine-tuning. Raises
    NumericError with epoch/step context if the loss goes non-finite.
    """
    if train_seqs is None:
        train_seqs = load_split(config.manifest, "train")
    if val_seqs is None:
        try:
            val_seqs = load_split(config.manifest, "val")
        except DataError:
            val_seqs = []
    with threadpool_limits(limits=config.threads):
        return _train_inner(config, train_seqs, val_seqs, on_epoch, init_params)


def _train_inner(config: RunConfig, train_seqs, val_seqs, on_epoch,
                 init_params: Optional[ParamStore]) -> "TrainResult":
    if init_params is not None:
        params = init_params.copy()
    else:
        params = init_model_params(config.arch, config.seed)
    if config.init_checkpoint:
        load_params_into(params, config.init_checkpoint, config.arch)
    opt_state = AdamState()
    rng = np.random.default_rng(config.seed)
    history: list[dict] = []
    best_params = params.copy()
    best_val = np.inf
    lr = config.lr
    steps = 0
    for epoch in range(config.epochs):
        if epoch in config.lr_milestones:
            lr *= config.lr_decay
        order = rng.permutation(len(train_seqs))
        epoch_losses = []
        for start in range(0, len(order), config.batch_size):
            if config.max_steps is not None and steps >= config.max_steps:
                break
            batch = [train_seqs[i] for i in order[start:start + config.batch_size]]
            loss, grads = _accumulate_batch(batch, params, config)
            if not np.isfinite(loss):
                raise NumericError(
                    f"non-finite loss at epoch {epoch}, step {steps}")
            opt_state = optimizer_step(
                params, grads, opt_state, lr=lr,
                weight_decay=config.weight_decay, clip_norm=config.clip_norm)
            epoch_losses.append(loss)
            steps += 1
        row = {"epoch": epoch, "steps": steps,
               "train_loss": float(np.mean(epoch_losses)) if epoch_losses else None,
               "lr": lr}
        if val_seqs:
            row["val_metric"] = validation_metric(val_seqs, params, config)
            if row["val_metric"] < best_val:
                best_val = row["val_metric"]
                best_params = params.copy()
        else:
            best_params = params.copy()
        history.append(row)
        if on_epoch:
            on_epoch(row)
        if config.max_steps is not None and steps >= config.max_steps:
            break
    if config.epochs == 0 or not history:
        best_params = params.copy()
    return TrainResult(params=params, best_params=best_params,
                       history=history, steps=steps)


# ---------------------------------------------------------------------------
# Evaluation reports
# ---------------------------------------------------------------------------

SSFE_COLUMNS = ("sequence", "epe3d", "acc3ds", "acc3dr", "outliers3d",
                "rect_outliers3d")
SPF_COLUMNS = ("sequence", "ade", "fde", "cd", "emd", "sd")
REPORT_SCHEMA_VERSION = 1


def _ssfe_row(seq: CloudSequence, view, config: RunConfig) -> dict:
    pred = estimate_flows(seq, view, config.arch)
    n_in = seq.n_input or seq.t
    per_step = []
    masks = [seq.frames[t].valid_mask for t in range(1, n_in)]
    for s in range(pred.num_steps):
        st = flow_stats([value_of(pred.finest(s))], [seq.gt_flows[s]],
                        [masks[s]])
        per_step.append(st.epe3d)
    agg = flow_stats([value_of(pred.finest(s)) for s in range(pred.num_steps)],
                     seq.gt_flows[:n_in - 1], masks)
    return {"epe3d": agg.epe3d, "acc3ds": agg.acc3ds, "acc3dr": agg.acc3dr,
            "outliers3d": agg.outliers3d,
            "rect_outliers3d": agg.rect_outliers3d,
            "per_step_epe3d": per_step}


def _spf_row(seq: CloudSequence, view, config: RunConfig) -> dict:
    future = _future_frames(seq)
    result = forecast(seq, view, config.arch, K=len(future))
    preds = [value_of(f) for f in result.frames]
    gts = [f.coords for f in future]
    masks = [f.valid_mask for f in future]
    ade, fde = ade_fde(preds, gts, masks)
    per_step = [float(np.linalg.norm(p - g, axis=1)[m].mean())
                for p, g, m in zip(preds, gts, masks)]
    return {"ade": ade, "fde": fde,
            "cd": float(np.mean([chamfer(p, g) for p, g in zip(preds, gts)])),
            "emd": float(np.mean([emd(p, g) for p, g in zip(preds, gts)])),
            "sd": float(np.mean([sinkhorn_distance(p, g)
                                 for p, g in zip(preds, gts)])),
            "per_step_error": per_step}


def evaluate(config: RunConfig, params, seqs=None, checkpoint_ref: str = ""
             ) -> dict:
    """Per-sequence and aggregate metric report as a JSON-ready dict."""
    if seqs is None:
        seqs = load_split(config.manifest, "test")
    view = as_view(params)
    rows = []
    with threadpool_limits(limits=config.threads):
        for i, seq in enumerate(seqs):
            fn = _ssfe_row if config.task == "ssfe" else _spf_row
            rows.append({"sequence": i, **fn(seq, view, config)})
    scalar_keys = [k for k in rows[0]
                   if k != "sequence" and not k.startswith("per_step")]
    aggregate = {k: float(np.mean([r[k] for r in rows])) for k in scalar_keys}
    curve_key = "per_step_epe3d" if config.task == "ssfe" else "per_step_error"
    curves = np.mean([r[curve_key] for r in rows], axis=0).tolist()
    return {
        "schema_version": REPORT_SCHEMA_VERSION,
        "library_version": __version__,
        "task": config.task,
        "seed": config.seed,
        "config_hash": config.config_hash(),
        "checkpoint_hash": checkpoint_ref,
        "aggregate": aggregate,
        "per_timestep": curves,
        "per_sequence": rows,
    }


def report_csv(report: dict) -> str:
    """Frozen-column CSV rendering of a report (per-sequence plus mean)."""
    cols = SSFE_COLUMNS if report["task"] == "ssfe" else SPF_COLUMNS
    lines = [",".join(cols)]
    for row in report["per_sequence"]:
        lines.append(",".join(
            str(row[c]) if c == "sequence" else repr(row[c]) for c in cols))
    agg = report["aggregate"]
    lines.append(",".join(
        "mean" if c == "sequence" else repr(agg[c]) for c in cols))
    return "\n".join(lines) + "\n"
