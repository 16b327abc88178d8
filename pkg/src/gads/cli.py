"""Command-line entry point: ``gads <command> [flags]``.

Exit codes: 0 success, 1 runtime error (one-line diagnostic on stderr),
2 usage error. Everything a command writes goes under ``--out``.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .config import RunConfig, load_config
from .data import (
    PoseAngles,
    RawLandmarkSet,
    attach_rendered_images,
    generate_synthetic,
    load_dataset,
    parse_record,
    save_dataset,
    select,
    split_70_30,
)
from .evaluation import (
    REFERENCE_LATENCY_MS,
    AblationGrid,
    benchmark_latency,
    evaluate,
    per_sample_mae,
    plot_per_sample_mae,
    reference_deltas,
    run_ablation,
    run_protocol_p1,
    run_protocol_p2,
    write_reports_csv,
)
from .preprocess import preprocess
from .tensor import Activation
from .training import PoseModel, load_checkpoint, prepare_inputs, save_checkpoint, train

log = logging.getLogger("gads")


def _positive_int(text: str) -> int:
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {v}")
    return v


def _positive_float(text: str) -> float:
    v = float(text)
    if not v > 0:
        raise argparse.ArgumentTypeError(f"must be > 0, got {v}")
    return v


def _nonneg_float(text: str) -> float:
    v = float(text)
    if v < 0:
        raise argparse.ArgumentTypeError(f"must be >= 0, got {v}")
    return v


def _max_angle(text: str) -> float:
    v = _positive_float(text)
    if v > 60:
        raise argparse.ArgumentTypeError(f"must be in (0, 60], got {v}")
    return v


def _existing(text: str) -> Path:
    p = Path(text)
    if not p.exists():
        raise argparse.ArgumentTypeError(f"no such file or directory: {text}")
    return p


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=_existing, help="INI config file; flags override it")
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--out", type=Path, default=Path("."), help="output directory")
    common.add_argument("-v", "--verbose", action="store_true")

    model_flags = argparse.ArgumentParser(add_help=False)
    model_flags.add_argument("--model", choices=["gads", "hybrid"], default="gads")
    model_flags.add_argument("--heads", type=_positive_int)
    model_flags.add_argument("--decoder-layers", type=_positive_int)
    model_flags.add_argument("--final-layers", type=_positive_int)
    model_flags.add_argument("--activation", choices=[a.value for a in Activation])
    model_flags.add_argument("--invariant", choices=["max", "sum", "mean", "min"])
    model_flags.add_argument("--dropout", type=_nonneg_float)

    train_flags = argparse.ArgumentParser(add_help=False)
    train_flags.add_argument("--epochs", type=_positive_int)
    train_flags.add_argument("--batch-size", type=_positive_int)
    train_flags.add_argument("--lr", type=_positive_float)
    train_flags.add_argument("--loss", choices=["mae", "mse"])

    parser = argparse.ArgumentParser(prog="gads", description="Head pose estimation from 3D facial landmarks.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("preprocess", parents=[common], help="normalize and group landmarks")
    p.add_argument("--data", type=_existing, required=True)

    p = sub.add_parser("synth", parents=[common], help="generate synthetic rigid-head samples")
    p.add_argument("--n", type=_positive_int, required=True)
    p.add_argument("--max-angle", type=_max_angle, default=45.0)
    p.add_argument("--noise", type=_nonneg_float, default=0.01)
    p.add_argument("--images", action="store_true", help="also render 64x64 face images")

    p = sub.add_parser("train", parents=[common, model_flags, train_flags], help="train a model")
    p.add_argument("--data", type=_existing, required=True)
    p.add_argument("--val", type=_existing, help="validation set (default: 5%% holdout of --data)")

    p = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint")
    p.add_argument("--ckpt", type=_existing, required=True)
    p.add_argument("--data", type=_existing, required=True)
    p.add_argument("--dataset", default="", help="dataset label for the report")
    p.add_argument("--plot", action="store_true", help="write per-sample MAE plot (first 100 frames) as SVG")

    p = sub.add_parser("infer", parents=[common], help="predict yaw,pitch,roll for one face")
    p.add_argument("--ckpt", type=_existing, required=True)
    p.add_argument("--landmarks", type=_existing, required=True)
    p.add_argument("--image", type=_existing)

    p = sub.add_parser("bench", parents=[common, model_flags], help="single-sample latency benchmark")
    p.add_argument("--ckpt", type=_existing, help="checkpoint to time (default: freshly initialised --model)")
    p.add_argument("--runs", type=int, default=1000)
    p.add_argument("--warmup", type=int, default=10)

    p = sub.add_parser("ablate", parents=[common, train_flags], help="one-axis-at-a-time ablation sweep")
    p.add_argument("--data", type=_existing, required=True)
    p.add_argument("--test", type=_existing, required=True)

    p = sub.add_parser("protocol", parents=[common, model_flags, train_flags], help="run evaluation protocol P1 or P2")
    p.add_argument("name", choices=["p1", "p2"])
    p.add_argument("--train-data", type=_existing, help="P1 training file")
    p.add_argument("--biwi", type=_existing, required=True)
    p.add_argument("--aflw", type=_existing, help="P1 AFLW2000 test file")
    return parser


# ---------------------------------------------------------------------------


def _run_config(args) -> RunConfig:
    cfg = load_config(args.config)
    overrides = {
        "heads": getattr(args, "heads", None),
        "decoder_layers": getattr(args, "decoder_layers", None),
        "final_layers": getattr(args, "final_layers", None),
        "activation": getattr(args, "activation", None),
        "invariant": getattr(args, "invariant", None),
        "dropout": getattr(args, "dropout", None),
    }
    model = replace(cfg.model, **{k: v for k, v in overrides.items() if v is not None}).validate()
    toverrides = {
        "epochs": getattr(args, "epochs", None),
        "batch_size": getattr(args, "batch_size", None),
        "lr": getattr(args, "lr", None),
        "loss": getattr(args, "loss", None),
    }
    trn = replace(cfg.train, **{k: v for k, v in toverrides.items() if v is not None}).validate()
    out = RunConfig(model, cfg.hybrid, cfg.groups, trn)
    out.hybrid_config().validate()
    return out


def _model_config(cfg: RunConfig, kind: str):
    return cfg.model if kind == "gads" else cfg.hybrid_config()


def cmd_preprocess(args, cfg: RunConfig) -> None:
    samples = load_dataset(args.data)
    args.out.mkdir(parents=True, exist_ok=True)
    with (args.out / "grouped.jsonl").open("w") as fh:
        for s in samples:
            gp = preprocess(s, cfg.groups)
            rec = {
                "id": s.sample_id,
                "groups": {name: g.tolist() for name, g in zip(cfg.groups.names, gp.groups)},
                "pose": {"yaw": s.pose.yaw, "pitch": s.pose.pitch, "roll": s.pose.roll},
            }
            fh.write(json.dumps(rec) + "\n")
    print(f"wrote {len(samples)} grouped samples to {args.out / 'grouped.jsonl'}")


def cmd_synth(args, cfg: RunConfig) -> None:
    samples = generate_synthetic(args.n, args.max_angle, args.noise, args.seed)
    args.out.mkdir(parents=True, exist_ok=True)
    if args.images:
        samples = attach_rendered_images(samples, args.out / "images")
    save_dataset(samples, args.out / "samples.jsonl")
    if args.n >= 10:
        split = split_70_30(samples, args.seed)
        save_dataset(select(samples, split.train), args.out / "train.jsonl")
        save_dataset(select(samples, split.test), args.out / "test.jsonl")
    print(f"wrote {len(samples)} samples to {args.out}")


def cmd_train(args, cfg: RunConfig) -> None:
    from .evaluation import holdout_split

    images = args.model == "hybrid"
    data = load_dataset(args.data, with_images=images)
    if args.val is not None:
        fit, val = data, load_dataset(args.val, with_images=images)
    else:
        fit, val = holdout_split(data, 0.05, args.seed)
    args.out.mkdir(parents=True, exist_ok=True)
    tcfg = replace(cfg.train, checkpoint_path=str(args.out / "best.ckpt"), metrics_path=str(args.out / "metrics.csv"))
    res = train(args.model, fit, val, tcfg, args.seed, _model_config(cfg, args.model), cfg.groups,
                on_epoch=lambda r: log.info("epoch %d lr %g train %.4f val %.4f", r.epoch, r.lr, r.train_loss, r.val_mae))
    save_checkpoint(res.checkpoint, args.out / "best.ckpt")
    print(f"best val MAE {res.checkpoint.best_val_mae:.4f} at epoch {res.checkpoint.epoch}; wrote {args.out / 'best.ckpt'}")


def cmd_eval(args, cfg: RunConfig) -> None:
    ckpt = load_checkpoint(args.ckpt)
    model = ckpt.to_model()
    samples = load_dataset(args.data, with_images=False)
    label = args.dataset or Path(args.data).stem
    report = evaluate(model, samples, label)
    args.out.mkdir(parents=True, exist_ok=True)
    write_reports_csv([report], args.out / "report.csv")
    print(f"{label}: yaw {report.yaw:.4f} pitch {report.pitch:.4f} roll {report.roll:.4f} mae {report.mae:.4f} (n={report.n})")
    if args.plot:
        inputs = prepare_inputs(samples, model.groups, model.needs_images)
        plot_per_sample_mae(per_sample_mae(model.predict(inputs), inputs.targets), args.out / "per_sample_mae.svg", label)


def _read_landmarks(path: Path) -> RawLandmarkSet:
    text = path.read_text()
    obj = json.loads(text)
    if isinstance(obj, list):
        return RawLandmarkSet("input", np.asarray(obj, dtype=np.float64), PoseAngles(0.0, 0.0, 0.0))
    obj.setdefault("id", path.stem)
    obj.setdefault("pose", {"yaw": 0.0, "pitch": 0.0, "roll": 0.0})
    return parse_record(json.dumps(obj), path.parent)


def cmd_infer(args, cfg: RunConfig) -> None:
    model = load_checkpoint(args.ckpt).to_model()
    sample = _read_landmarks(args.landmarks)
    if args.image is not None:
        sample = replace(sample, image_ref=str(args.image))
    inputs = prepare_inputs([sample], model.groups, model.needs_images)
    y, p, r = model.predict(inputs)[0]
    print(f"{y:.6f},{p:.6f},{r:.6f}")


def cmd_bench(args, cfg: RunConfig) -> None:
    if args.ckpt is not None:
        model = load_checkpoint(args.ckpt).to_model()
    else:
        model = PoseModel.create(args.model, _model_config(cfg, args.model), args.seed, cfg.groups)
    sample = generate_synthetic(1, 30.0, 0.0, args.seed)
    if model.needs_images:
        sample = attach_rendered_images(sample, args.out / "bench_images")
    inputs = prepare_inputs(sample, model.groups, model.needs_images)
    report = benchmark_latency(model, inputs, args.runs, args.warmup)
    args.out.mkdir(parents=True, exist_ok=True)
    summary = report.summary()
    summary["reference_cpu_ms"] = REFERENCE_LATENCY_MS.get(model.kind)
    (args.out / "latency.json").write_text(json.dumps(summary, indent=2) + "\n")
    print(f"{model.kind}: median {report.median:.4f} ms, mean {report.mean:.4f} ms, p95 {report.p95:.4f} ms over {args.runs} runs")


def cmd_ablate(args, cfg: RunConfig) -> None:
    rows = run_ablation(AblationGrid(), args.data, args.test, args.seed, cfg.train, cfg.model, args.out / "ablation.csv")
    for r in rows:
        mae = f"{r.report.mae:.4f}" if r.report else "nan"
        print(f"{r.axis}={r.value}: params {r.param_count}, mae {mae} [{r.status}]")


def cmd_protocol(args, cfg: RunConfig) -> None:
    mcfg = _model_config(cfg, args.model)
    if args.name == "p1":
        if args.train_data is None or args.aflw is None:
            raise ValueError("protocol p1 needs --train-data and --aflw")
        res = run_protocol_p1(args.train_data, args.biwi, args.aflw, cfg.train, args.seed, args.model, mcfg, cfg.groups, args.out)
    else:
        res = run_protocol_p2(args.biwi, args.seed, cfg.train, args.model, mcfg, cfg.groups, args.out)
    save_checkpoint(res.checkpoint, args.out / "best.ckpt")
    for r in res.reports:
        print(reference_deltas(args.name, r))


COMMANDS = {
    "preprocess": cmd_preprocess,
    "synth": cmd_synth,
    "train": cmd_train,
    "eval": cmd_eval,
    "infer": cmd_infer,
    "bench": cmd_bench,
    "ablate": cmd_ablate,
    "protocol": cmd_protocol,
}


def _limit_threads():
    n = os.environ.get("GADS_THREADS")
    if not n:
        return None
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=int(n))


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(asctime)s %(name)s %(message)s")
    try:
        cfg = _run_config(args)
        limiter = _limit_threads()
        try:
            COMMANDS[args.command](args, cfg)
        finally:
            if limiter is not None:
                limiter.unregister()
    except KeyboardInterrupt:
        print("gads: interrupted", file=sys.stderr)
        return 1
    except Exception as exc:  # one-line diagnostic, no traceback
        msg = str(exc).splitlines()[0] if str(exc) else type(exc).__name__
        print(f"gads: error: {type(exc).__name__}: {msg}", file=sys.stderr)
        log.debug("traceback", exc_info=True)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
