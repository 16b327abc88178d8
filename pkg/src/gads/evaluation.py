"""Metrics, protocol runners, latency benchmarking and the one-axis ablation sweep."""

from __future__ import annotations

import csv
import json
import logging
import math
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .data import RawLandmarkSet, load_dataset, select, split_70_30
from .model import GadsConfig
from .preprocess import DEFAULT_GROUPS, GroupSpec
from .training import (
    Checkpoint,
    DivergenceError,
    Inputs,
    PoseModel,
    TrainConfig,
    prepare_inputs,
    train,
)

log = logging.getLogger(__name__)

REPORT_COLUMNS = ["dataset", "model", "param_count", "yaw_mae", "pitch_mae", "roll_mae", "mean_mae", "n"]

# Results reported for the method on the real benchmarks, (yaw, pitch, roll, mean).
# Printed next to harness output as deltas, never used as pass/fail thresholds.
REFERENCE_MAE = {
    ("p1", "gads", "biwi"): (3.61, 5.05, 3.04, 3.90),
    ("p1", "gads", "aflw2000"): (3.84, 7.06, 5.00, 5.30),
    ("p1", "hybrid", "biwi"): (4.16, 5.61, 3.11, 4.29),
    ("p1", "hybrid", "aflw2000"): (4.09, 7.05, 5.01, 5.38),
    ("p2", "gads", "biwi"): (3.31, 5.00, 2.94, 3.75),
    ("p2", "hybrid", "biwi"): (3.20, 4.02, 3.16, 3.46),
}
REFERENCE_LATENCY_MS = {"gads": 2.04, "hybrid": 3.63}


class InputError(ValueError):
    pass


@dataclass(frozen=True)
class MetricsReport:
    yaw: float
    pitch: float
    roll: float
    mae: float
    n: int
    model: str
    param_count: int
    dataset: str = ""

    def row(self) -> list:
        return [self.dataset, self.model, self.param_count, repr(self.yaw), repr(self.pitch), repr(self.roll), repr(self.mae), self.n]


def per_sample_mae(pred: np.ndarray, truth: np.ndarray) -> np.ndarray:
    return np.abs(pred - truth).mean(axis=1)


def metrics_from_predictions(pred: np.ndarray, truth: np.ndarray, model: str = "", param_count: int = 0, dataset: str = "") -> MetricsReport:
    if len(truth) == 0:
        raise InputError("cannot evaluate on an empty test set")
    per_angle = np.abs(pred - truth).mean(axis=0)
    yaw, pitch, roll = (float(v) for v in per_angle)
    return MetricsReport(yaw, pitch, roll, (yaw + pitch + roll) / 3.0, len(truth), model, param_count, dataset)


def _as_model(model: PoseModel | Checkpoint) -> PoseModel:
    return model.to_model() if isinstance(model, Checkpoint) else model


def _inputs_for(model: PoseModel, samples: Sequence[RawLandmarkSet] | Inputs) -> Inputs:
    if isinstance(samples, Inputs):
        if model.needs_images and samples.images is None:
            raise InputError("hybrid model needs face images")
        return samples
    if model.needs_images:
        missing = [s.sample_id for s in samples if s.image_ref is None]
        if missing:
            raise InputError(f"hybrid model needs face images; missing for: {', '.join(missing)}")
    return prepare_inputs(samples, model.groups, model.needs_images)


def evaluate(model: PoseModel | Checkpoint, samples: Sequence[RawLandmarkSet] | Inputs, dataset: str = "") -> MetricsReport:
    model = _as_model(model)
    inputs = _inputs_for(model, samples)
    pred = model.predict(inputs)
    return metrics_from_predictions(pred, inputs.targets, model.kind, model.param_count(), dataset)


def write_reports_csv(reports: Sequence[MetricsReport], path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(REPORT_COLUMNS)
        for r in reports:
            w.writerow(r.row())


def plot_per_sample_mae(errors: np.ndarray, path: str | Path, title: str = "", limit: int = 100) -> None:
    """Line plot of per-sample MAE over the first ``limit`` test frames, written as SVG."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    matplotlib.rcParams["svg.hashsalt"] = "gads"
    fig, ax = plt.subplots(figsize=(7, 3))
    shown = errors[:limit]
    ax.plot(np.arange(len(shown)), shown, lw=1.2)
    ax.set_xlabel("frame")
    ax.set_ylabel("MAE (deg)")
    if title:
        ax.set_title(title)
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)


def reference_deltas(protocol: str, report: MetricsReport) -> str:
    ref = REFERENCE_MAE.get((protocol, report.model, report.dataset.lower()))
    if ref is None:
        return f"{report.dataset}: no reference values"
    got = (report.yaw, report.pitch, report.roll, report.mae)
    parts = [f"{name} {g:.2f} ({g - r:+.2f} vs {r:.2f})" for name, g, r in zip(("yaw", "pitch", "roll", "mae"), got, ref)]
    return f"{report.dataset} {protocol.upper()} {report.model}: " + ", ".join(parts)


# ---------------------------------------------------------------------------
# protocols


def holdout_split(samples: Sequence[RawLandmarkSet], fraction: float, seed: int) -> tuple[list, list]:
    """Deterministic (train, holdout) split keeping ``fraction`` of samples for validation."""
    n = len(samples)
    n_hold = max(1, int(math.floor(fraction * n + 0.5)))
    if n_hold >= n:
        raise ValueError(f"cannot hold out {n_hold} of {n} samples")
    order = np.random.default_rng([seed, 5]).permutation(n)
    hold = sorted(order[:n_hold])
    keep = sorted(order[n_hold:])
    return [samples[i] for i in keep], [samples[i] for i in hold]


def _load(source, with_images: bool) -> list[RawLandmarkSet]:
    if isinstance(source, (str, Path)):
        return load_dataset(source, with_images=with_images)
    return list(source)


@dataclass
class ProtocolResult:
    reports: list[MetricsReport]
    checkpoint: Checkpoint
    manifest: dict = field(default_factory=dict)


def write_protocol_csv(reports: Sequence[MetricsReport], path: str | Path) -> None:
    """Table-shaped CSV: one row per test dataset."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["dataset", "param_count", "yaw", "pitch", "roll", "mae"])
        for r in reports:
            w.writerow([r.dataset, r.param_count, f"{r.yaw:.4f}", f"{r.pitch:.4f}", f"{r.roll:.4f}", f"{r.mae:.4f}"])


def run_protocol_p1(
    train_source,
    biwi_source,
    aflw_source,
    config: TrainConfig = TrainConfig(),
    seed: int = 0,
    kind: str = "gads",
    model_config=None,
    groups: GroupSpec = DEFAULT_GROUPS,
    out_dir: str | Path | None = None,
) -> ProtocolResult:
    """Train once on the training file (5% held out for best-model selection), test on both test files."""
    images = kind == "hybrid"
    train_all = _load(train_source, images)
    fit, val = holdout_split(train_all, 0.05, seed)
    result = train(kind, fit, val, config, seed, model_config, groups)
    model = result.checkpoint.to_model()
    reports = [
        evaluate(model, _load(biwi_source, images), "BIWI"),
        evaluate(model, _load(aflw_source, images), "AFLW2000"),
    ]
    if out_dir is not None:
        write_protocol_csv(reports, Path(out_dir) / "protocol_p1.csv")
    return ProtocolResult(reports, result.checkpoint, {"validation": [s.sample_id for s in val]})


def run_protocol_p2(
    biwi_source,
    seed: int = 0,
    config: TrainConfig = TrainConfig(),
    kind: str = "gads",
    model_config=None,
    groups: GroupSpec = DEFAULT_GROUPS,
    out_dir: str | Path | None = None,
) -> ProtocolResult:
    """70:30 split of one dataset; the held-out 30% doubles as the best-model validation set."""
    images = kind == "hybrid"
    samples = _load(biwi_source, images)
    split = split_70_30(samples, seed)
    tr, te = select(samples, split.train), select(samples, split.test)
    result = train(kind, tr, te, config, seed, model_config, groups)
    report = evaluate(result.checkpoint, te, "BIWI")
    manifest = {"seed": seed, "train": list(split.train), "test": list(split.test)}
    if out_dir is not None:
        out = Path(out_dir)
        write_protocol_csv([report], out / "protocol_p2.csv")
        (out / "split_manifest.json").write_text(json.dumps(manifest) + "\n")
    return ProtocolResult([report], result.checkpoint, manifest)


# ---------------------------------------------------------------------------
# latency


@dataclass(frozen=True)
class LatencyReport:
    times_ms: tuple[float, ...]
    warmup: int
    model: str = ""

    @property
    def median(self) -> float:
        return float(np.median(self.times_ms))

    @property
    def mean(self) -> float:
        return float(np.mean(self.times_ms))

    @property
    def p95(self) -> float:
        return float(np.percentile(self.times_ms, 95))

    @property
    def min(self) -> float:
        return float(np.min(self.times_ms))

    def summary(self) -> dict:
        return {
            "model": self.model,
            "runs": len(self.times_ms),
            "warmup": self.warmup,
            "median_ms": self.median,
            "mean_ms": self.mean,
            "p95_ms": self.p95,
            "min_ms": self.min,
            "protocol": "single sample, model forward only, preprocessing excluded",
        }


def benchmark_latency(model: PoseModel | Checkpoint, sample: Inputs, runs: int = 1000, warmup: int = 10) -> LatencyReport:
    """Time single-sample forward passes on a monotonic clock."""
    if runs < 100 or warmup < 10:
        raise ValueError(f"need runs >= 100 and warmup >= 10, got {runs}, {warmup}")
    model = _as_model(model)
    one = sample.take([0])
    for _ in range(warmup):
        model.forward(one)
    times = []
    clock = time.perf_counter_ns
    for _ in range(runs):
        t0 = clock()
        model.forward(one)
        times.append(max(clock() - t0, 1) / 1e6)
    return LatencyReport(tuple(times), warmup, model.kind)


# ---------------------------------------------------------------------------
# ablation


@dataclass(frozen=True)
class AblationGrid:
    decoder_layers: tuple[int, ...] = (1, 2, 3, 4)
    heads: tuple[int, ...] = (2, 4, 8)
    final_layers: tuple[int, ...] = (1, 2, 3)
    activation: tuple[str, ...] = ("leaky_relu", "gelu", "sigmoid", "relu")
    loss: tuple[str, ...] = ("mae", "mse")
    lr: tuple[float, ...] = (1e-2, 1e-3)
    dropout: tuple[float, ...] = (0.0, 0.1, 0.2)

    AXES = ("decoder_layers", "heads", "final_layers", "activation", "loss", "lr", "dropout")

    def cells(self, base_model: GadsConfig = GadsConfig(), base_train: TrainConfig = TrainConfig()):
        """Yield (axis, value, model config, train config), varying one axis at a time."""
        for axis in self.AXES:
            for value in getattr(self, axis):
                if axis in ("loss", "lr"):
                    yield axis, value, base_model, replace(base_train, **{axis: value})
                else:
                    yield axis, value, replace(base_model, **{axis: value}), base_train


ABLATION_COLUMNS = ["axis", "value", "param_count", "yaw", "pitch", "roll", "mae", "status"]


@dataclass
class AblationRow:
    axis: str
    value: object
    param_count: int
    report: MetricsReport | None
    status: str

    def row(self) -> list:
        r = self.report
        vals = [r.yaw, r.pitch, r.roll, r.mae] if r else [math.nan] * 4
        return [self.axis, self.value, self.param_count, *(f"{v:.4f}" for v in vals), self.status]


def run_ablation(
    grid: AblationGrid,
    train_source,
    test_source,
    seed: int = 0,
    base_train: TrainConfig = TrainConfig(),
    base_model: GadsConfig = GadsConfig(),
    out_csv: str | Path | None = None,
) -> list[AblationRow]:
    """Train and evaluate one vanilla model per grid cell, all with the same seed.

    Cells whose settings coincide (the default appears once per axis) share
    a single deterministic training run.
    """
    train_all = _load(train_source, False)
    test = prepare_inputs(_load(test_source, False), DEFAULT_GROUPS)
    fit, val = holdout_split(train_all, 0.05, seed)
    fit_in, val_in = prepare_inputs(fit), prepare_inputs(val)
    cache: dict = {}
    rows = []
    for axis, value, mcfg, tcfg in grid.cells(base_model, base_train):
        key = (mcfg, tcfg)
        if key not in cache:
            count = PoseModel.create("gads", mcfg, seed).param_count()
            try:
                res = train("gads", fit_in, val_in, tcfg, seed, mcfg)
                cache[key] = (count, evaluate(res.checkpoint, test, "test"), "ok")
            except DivergenceError as exc:
                log.warning("ablation cell %s=%s diverged: %s", axis, value, exc)
                cache[key] = (count, None, "diverged")
        count, report, status = cache[key]
        rows.append(AblationRow(axis, value, count, report, status))
        log.info("ablation %s=%s params=%d status=%s", axis, value, count, status)
    if out_csv is not None:
        path = Path(out_csv)
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(ABLATION_COLUMNS)
            for r in rows:
                w.writerow(r.row())
    return rows
