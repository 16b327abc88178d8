"""Losses, Adam, the multi-step schedule, checkpoints and the training loop."""

from __future__ import annotations

import csv
import json
import logging
import math
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from . import tensor as T
from .data import RawLandmarkSet, load_face_image
from .hybrid import HybridConfig, hybrid_forward, hybrid_params_from_named, init_hybrid_params
from .model import ConfigError, GadsConfig, gads_forward, init_params, params_from_named
from .preprocess import DEFAULT_GROUPS, GroupSpec, batch_groups
from .tensor import DimensionError, Tensor

log = logging.getLogger(__name__)

MODEL_KINDS = ("gads", "hybrid")


class DivergenceError(RuntimeError):
    pass


class PersistenceError(OSError):
    pass


class CheckpointError(ValueError):
    """Checkpoint bytes are corrupt, truncated or from another format version."""


# ---------------------------------------------------------------------------
# losses


def _check_pair(pred: Tensor, truth) -> Tensor:
    truth = T.as_tensor(truth)
    if pred.shape != truth.shape:
        raise DimensionError(f"prediction {pred.shape} and truth {truth.shape} differ")
    if pred.data.ndim != 2 or pred.shape[1] != 3:
        raise DimensionError(f"expected (batch, 3) angles, got {pred.shape}")
    if pred.shape[0] == 0:
        raise ValueError("loss of an empty batch")
    return truth


def mae_loss(pred: Tensor, truth) -> Tensor:
    """Mean over the batch of the per-sample mean absolute angle error (degrees)."""
    truth = _check_pair(pred, truth)
    return T.mean_all(T.absolute(T.sub(pred, truth)))


def mse_loss(pred: Tensor, truth) -> Tensor:
    truth = _check_pair(pred, truth)
    return T.mean_all(T.square(T.sub(pred, truth)))


LOSSES: dict[str, Callable[[Tensor, object], Tensor]] = {"mae": mae_loss, "mse": mse_loss}


# ---------------------------------------------------------------------------
# optimisation


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adam_step(params: Mapping[str, Tensor], grads: Mapping[str, np.ndarray], state: AdamState, lr: float) -> None:
    """One bias-corrected Adam update, in place on ``params`` and ``state``."""
    for name, g in grads.items():
        if name not in params:
            raise KeyError(f"gradient for unknown parameter {name!r}")
        if np.shape(g) != params[name].shape:
            raise DimensionError(f"gradient {name}: shape {np.shape(g)} != parameter {params[name].shape}")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.t
    c2 = 1.0 - b2**state.t
    for name, g in grads.items():
        p = params[name]
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


@dataclass(frozen=True)
class LrSchedule:
    base_lr: float = 1e-3
    milestones: tuple[int, ...] = (60, 120)
    gamma: float = 0.01


def lr_at(schedule: LrSchedule, epoch: int) -> float:
    if epoch < 0:
        raise ValueError(f"epoch must be >= 0, got {epoch}")
    passed = sum(1 for m in schedule.milestones if m <= epoch)
    return schedule.base_lr * schedule.gamma**passed


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 150
    batch_size: int = 256
    lr: float = 1e-3
    milestones: tuple[int, ...] = (60, 120)
    gamma: float = 0.01
    loss: str = "mae"
    checkpoint_path: str | None = None
    metrics_path: str | None = None
    micro_batch: int | None = None  # hybrid default 32; gradients summed in a fixed order

    def __post_init__(self):
        object.__setattr__(self, "milestones", tuple(int(m) for m in self.milestones))

    @property
    def schedule(self) -> LrSchedule:
        return LrSchedule(self.lr, self.milestones, self.gamma)

    def validate(self) -> "TrainConfig":
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.loss not in LOSSES:
            raise ConfigError(f"loss must be one of {sorted(LOSSES)}, got {self.loss!r}")
        if not self.lr > 0:
            raise ConfigError(f"lr must be positive, got {self.lr}")
        return self


# ---------------------------------------------------------------------------
# model wrapper shared by training, evaluation and the CLI


@dataclass
class Inputs:
    groups: list[np.ndarray]  # each (n, S_i, 3)
    images: np.ndarray | None  # (n, 3, 64, 64)
    targets: np.ndarray  # (n, 3)
    ids: list[str]

    def __len__(self) -> int:
        return len(self.ids)

    def take(self, idx) -> "Inputs":
        idx = np.asarray(idx)
        return Inputs(
            [g[idx] for g in self.groups],
            None if self.images is None else self.images[idx],
            self.targets[idx],
            [self.ids[i] for i in idx],
        )


def prepare_inputs(
    samples: Sequence[RawLandmarkSet], spec: GroupSpec = DEFAULT_GROUPS, with_images: bool = False
) -> Inputs:
    if with_images:
        missing = [s.sample_id for s in samples if s.image_ref is None]
        if missing:
            raise ValueError(f"hybrid model needs face images; missing for: {', '.join(missing[:20])}")
        images = np.stack([load_face_image(s.image_ref) for s in samples]) if samples else np.zeros((0, 3, 64, 64))
    else:
        images = None
    targets = np.array([s.pose.as_array() for s in samples]).reshape(-1, 3)
    groups = batch_groups(samples, spec) if samples else [np.zeros((0, k, 3)) for k in spec.sizes]
    return Inputs(groups, images, targets, [s.sample_id for s in samples])


class PoseModel:
    """A GADS or GADS-Hybrid network plus the grouping it was trained with."""

    def __init__(self, kind: str, config, params, groups: GroupSpec = DEFAULT_GROUPS):
        if kind not in MODEL_KINDS:
            raise ConfigError(f"model kind must be one of {MODEL_KINDS}, got {kind!r}")
        self.kind = kind
        self.config = config
        self.params = params
        self.groups = groups

    @classmethod
    def create(cls, kind: str, config=None, seed: int = 0, groups: GroupSpec = DEFAULT_GROUPS) -> "PoseModel":
        groups.validate()
        if kind == "gads":
            config = config or GadsConfig(group_sizes=groups.sizes)
            _check_sizes(config, groups)
            return cls(kind, config, init_params(config, seed), groups)
        if kind == "hybrid":
            config = config or HybridConfig(gads=GadsConfig(group_sizes=groups.sizes))
            _check_sizes(config.gads, groups)
            return cls(kind, config, init_hybrid_params(config, seed), groups)
        raise ConfigError(f"model kind must be one of {MODEL_KINDS}, got {kind!r}")

    @property
    def needs_images(self) -> bool:
        return self.kind == "hybrid"

    def named(self) -> dict[str, Tensor]:
        return self.params.named()

    def param_count(self) -> int:
        return int(sum(t.size for t in self.named().values()))

    def forward(self, inputs: Inputs, training: bool = False, rng: np.random.Generator | None = None) -> Tensor:
        if self.kind == "gads":
            return gads_forward(inputs.groups, self.params, training, rng)
        if inputs.images is None:
            raise ValueError("hybrid model needs face images")
        return hybrid_forward(inputs.groups, inputs.images, self.params, training, rng)

    def predict(self, inputs: Inputs, chunk: int = 256) -> np.ndarray:
        if len(inputs) == 0:
            return np.zeros((0, 3))
        if self.needs_images:
            chunk = min(chunk, 64)
        out = [self.forward(inputs.take(np.arange(i, min(i + chunk, len(inputs))))).data for i in range(0, len(inputs), chunk)]
        return np.concatenate(out, axis=0)

    def config_snapshot(self) -> dict:
        # groups as ordered pairs: region order is model input order and must survive sorted-key JSON
        pairs = [[name, list(idx)] for name, idx in self.groups.regions]
        return {"model": self.config.to_dict(), "groups": pairs, "reference_index": self.groups.reference_index}


def _check_sizes(config: GadsConfig, groups: GroupSpec) -> None:
    if tuple(config.group_sizes) != groups.sizes:
        raise ConfigError(f"model group sizes {config.group_sizes} do not match grouping {groups.sizes}")


# ---------------------------------------------------------------------------
# checkpoints

MAGIC = b"GADSCKPT"
FORMAT_VERSION = 1


@dataclass
class Checkpoint:
    kind: str
    config: dict
    tensors: dict[str, np.ndarray]
    best_val_mae: float
    epoch: int
    version: int = FORMAT_VERSION

    def __eq__(self, other):
        if not isinstance(other, Checkpoint):
            return NotImplemented
        return (
            (self.kind, self.version, self.epoch) == (other.kind, other.version, other.epoch)
            and _canonical(self.config) == _canonical(other.config)
            and np.float64(self.best_val_mae).tobytes() == np.float64(other.best_val_mae).tobytes()
            and list(self.tensors) == list(other.tensors)
            and all(
                a.shape == other.tensors[k].shape and a.tobytes() == other.tensors[k].tobytes()
                for k, a in self.tensors.items()
            )
        )

    @classmethod
    def from_model(cls, model: PoseModel, best_val_mae: float, epoch: int, extra: dict | None = None) -> "Checkpoint":
        config = model.config_snapshot()
        if extra:
            config.update(extra)
        tensors = {k: t.data.copy() for k, t in model.named().items()}
        return cls(model.kind, config, tensors, float(best_val_mae), int(epoch))

    def to_model(self) -> PoseModel:
        cfg = self.config
        groups = GroupSpec.from_mapping(dict(cfg["groups"]), cfg.get("reference_index", DEFAULT_GROUPS.reference_index))
        named = {k: T.parameter(v.copy(), name=k) for k, v in self.tensors.items()}
        if self.kind == "gads":
            config = GadsConfig.from_dict(cfg["model"])
            return PoseModel("gads", config, params_from_named(config, named), groups)
        if self.kind == "hybrid":
            config = HybridConfig.from_dict(cfg["model"])
            return PoseModel("hybrid", config, hybrid_params_from_named(config, named), groups)
        raise CheckpointError(f"unknown model kind {self.kind!r}")


def _canonical(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def checkpoint_bytes(ckpt: Checkpoint) -> bytes:
    header = {
        "kind": ckpt.kind,
        "config": ckpt.config,
        "best_val_mae": ckpt.best_val_mae,
        "epoch": ckpt.epoch,
        "tensors": len(ckpt.tensors),
    }
    hb = _canonical(header).encode("utf-8")
    parts = [MAGIC, struct.pack("<II", ckpt.version, len(hb)), hb]
    for name, arr in ckpt.tensors.items():
        nb = name.encode("utf-8")
        parts.append(struct.pack("<HB", len(nb), arr.ndim))
        parts.append(nb)
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


class _Reader:
    def __init__(self, buf: bytes):
        self.buf, self.pos = buf, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointError(f"checkpoint truncated at byte {len(self.buf)} (needed {self.pos + n})")
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def checkpoint_from_bytes(buf: bytes) -> Checkpoint:
    r = _Reader(buf)
    if r.take(len(MAGIC)) != MAGIC:
        raise CheckpointError("not a GADS checkpoint (bad magic)")
    version, hlen = r.unpack("<II")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"checkpoint format version {version} is incompatible with {FORMAT_VERSION}")
    try:
        header = json.loads(r.take(hlen).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"corrupt checkpoint header: {exc}") from exc
    tensors = {}
    for _ in range(int(header["tensors"])):
        nlen, ndim = r.unpack("<HB")
        name = r.take(nlen).decode("utf-8")
        shape = r.unpack(f"<{ndim}I")
        count = int(np.prod(shape)) if ndim else 1
        tensors[name] = np.frombuffer(r.take(8 * count), dtype="<f8").astype(np.float64).reshape(shape)
    (crc,) = r.unpack("<I")
    if crc != zlib.crc32(buf[: r.pos - 4]):
        raise CheckpointError("checkpoint checksum mismatch")
    if r.pos != len(buf):
        raise CheckpointError(f"{len(buf) - r.pos} trailing bytes after checkpoint")
    return Checkpoint(header["kind"], header["config"], tensors, float(header["best_val_mae"]), int(header["epoch"]), version)


def save_checkpoint(ckpt: Checkpoint, path: str | Path) -> None:
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp = path.with_name(path.name + ".tmp")
        tmp.write_bytes(checkpoint_bytes(ckpt))
        tmp.replace(path)
    except OSError as exc:
        raise PersistenceError(f"cannot write checkpoint {path}: {exc}") from exc


def load_checkpoint(path: str | Path) -> Checkpoint:
    return checkpoint_from_bytes(Path(path).read_bytes())


# ---------------------------------------------------------------------------
# training loop


@dataclass
class EpochRecord:
    epoch: int
    lr: float
    train_loss: float
    val_mae: float


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    history: list[EpochRecord]
    steps: int

    @property
    def model(self) -> PoseModel:
        return self.checkpoint.to_model()


def write_metrics_csv(history: Sequence[EpochRecord], path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "lr", "train_loss", "val_mae"])
        for r in history:
            w.writerow([r.epoch, repr(r.lr), repr(r.train_loss), repr(r.val_mae)])


def mean_abs_error(pred: np.ndarray, truth: np.ndarray) -> float:
    return float(np.abs(pred - truth).mean()) if len(truth) else float("nan")


def train(
    kind: str,
    train_set: Sequence[RawLandmarkSet] | Inputs,
    val_set: Sequence[RawLandmarkSet] | Inputs,
    config: TrainConfig = TrainConfig(),
    seed: int = 0,
    model_config=None,
    groups: GroupSpec = DEFAULT_GROUPS,
    on_epoch: Callable[[EpochRecord], None] | None = None,
) -> TrainResult:
    """Train with Adam under the multi-step schedule, keeping the best-validation parameters.

    Shuffling, initialisation and dropout all derive from ``seed``.
    """
    config.validate()
    model = PoseModel.create(kind, model_config, seed, groups)
    tr = train_set if isinstance(train_set, Inputs) else prepare_inputs(train_set, groups, model.needs_images)
    va = val_set if isinstance(val_set, Inputs) else prepare_inputs(val_set, groups, model.needs_images)
    if len(tr) == 0 or len(va) == 0:
        raise ValueError("training and validation sets must be non-empty")
    if model.needs_images and (tr.images is None or va.images is None):
        raise ValueError("hybrid model needs face images for training and validation")

    params = model.named()
    loss_fn = LOSSES[config.loss]
    state = AdamState()
    shuffle_rng = np.random.default_rng([seed, 1])
    dropout_rng = np.random.default_rng([seed, 2])
    micro = config.micro_batch or (32 if model.needs_images else config.batch_size)

    history: list[EpochRecord] = []
    best_mae, best_epoch, best_tensors = math.inf, -1, None
    steps = 0
    n = len(tr)
    for epoch in range(config.epochs):
        lr = lr_at(config.schedule, epoch)
        order = shuffle_rng.permutation(n)
        total = 0.0
        for start in range(0, n, config.batch_size):
            idx = order[start : start + config.batch_size]
            for p in params.values():
                p.zero_grad()
            batch_loss = 0.0
            for ms in range(0, len(idx), micro):
                sub = tr.take(idx[ms : ms + micro])
                with T.Tape():
                    loss = loss_fn(model.forward(sub, training=True, rng=dropout_rng), sub.targets)
                    weighted = T.scale(loss, len(sub) / len(idx)) if micro < len(idx) else loss
                    T.backward(weighted)
                batch_loss += float(weighted.data)
            if not math.isfinite(batch_loss):
                raise DivergenceError(f"non-finite training loss at epoch {epoch}")
            grads = {k: p.grad for k, p in params.items()}
            adam_step(params, grads, state, lr)
            steps += 1
            total += batch_loss * len(idx)
        val = mean_abs_error(model.predict(va), va.targets)
        if not math.isfinite(val):
            raise DivergenceError(f"non-finite validation MAE at epoch {epoch}")
        rec = EpochRecord(epoch, lr, total / n, val)
        history.append(rec)
        log.debug("epoch %d lr %.1e train %.4f val %.4f", epoch, lr, rec.train_loss, val)
        if on_epoch:
            on_epoch(rec)
        if val < best_mae:
            best_mae, best_epoch = val, epoch
            best_tensors = {k: p.data.copy() for k, p in params.items()}
            if config.checkpoint_path:
                save_checkpoint(_snapshot(model, best_tensors, best_mae, best_epoch, config), config.checkpoint_path)

    ckpt = _snapshot(model, best_tensors, best_mae, best_epoch, config)
    if config.metrics_path:
        write_metrics_csv(history, config.metrics_path)
    return TrainResult(ckpt, history, steps)


def _snapshot(model: PoseModel, tensors: dict[str, np.ndarray], best: float, epoch: int, config: TrainConfig) -> Checkpoint:
    snap = model.config_snapshot()
    snap["train"] = {
        "epochs": config.epochs,
        "batch_size": config.batch_size,
        "lr": config.lr,
        "milestones": list(config.milestones),
        "gamma": config.gamma,
        "loss": config.loss,
    }
    return Checkpoint(model.kind, snap, {k: v.copy() for k, v in tensors.items()}, float(best), int(epoch))
