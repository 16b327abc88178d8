import csv
import json

import numpy as np
import pytest

from gads import evaluation
from gads.data import PoseAngles, RawLandmarkSet, attach_rendered_images, generate_synthetic, save_dataset
from gads.evaluation import (
    ABLATION_COLUMNS,
    REPORT_COLUMNS,
    AblationGrid,
    InputError,
    benchmark_latency,
    evaluate,
    holdout_split,
    metrics_from_predictions,
    per_sample_mae,
    plot_per_sample_mae,
    reference_deltas,
    run_ablation,
    run_protocol_p1,
    run_protocol_p2,
    write_reports_csv,
)
from gads.training import DivergenceError, PoseModel, TrainConfig, prepare_inputs


def _zero_model():
    m = PoseModel.create("gads")
    for t in m.named().values():
        t.data[:] = 0
    return m


class TestMetrics:
    def test_perfect(self):
        truth = np.random.default_rng(0).normal(size=(10, 3))
        r = metrics_from_predictions(truth.copy(), truth)
        assert (r.yaw, r.pitch, r.roll, r.mae) == (0, 0, 0, 0)

    def test_constant_zero_model(self):
        s = generate_synthetic(1, 10, 0.0, 0)[0]
        s = RawLandmarkSet("one", s.points, PoseAngles(3.0, 6.0, 9.0))
        r = evaluate(_zero_model(), [s])
        assert (r.yaw, r.pitch, r.roll, r.mae, r.n) == (3.0, 6.0, 9.0, 6.0, 1)

    def test_internal_consistency(self):
        rng = np.random.default_rng(1)
        r = metrics_from_predictions(rng.normal(size=(50, 3)) * 20, rng.normal(size=(50, 3)) * 20)
        assert abs(r.mae - (r.yaw + r.pitch + r.roll) / 3) < 1e-12

    def test_per_sample(self):
        np.testing.assert_allclose(per_sample_mae(np.zeros((2, 3)), np.array([[3.0, 6, 9], [1, 1, 1]])), [6.0, 1.0])

    def test_pure(self):
        data = generate_synthetic(20, 30, 0.01, 2)
        m = PoseModel.create("gads", seed=3)
        assert evaluate(m, data) == evaluate(m, data)

    def test_hybrid_missing_images(self):
        m = PoseModel.create("hybrid")
        data = generate_synthetic(2, 30, 0.0, 1)
        with pytest.raises(InputError, match=data[0].sample_id):
            evaluate(m, data)

    def test_report_csv(self, tmp_path):
        r = evaluate(_zero_model(), generate_synthetic(4, 30, 0.0, 5), "syn")
        write_reports_csv([r], tmp_path / "r.csv")
        rows = list(csv.reader(open(tmp_path / "r.csv")))
        assert rows[0] == REPORT_COLUMNS and rows[1][0] == "syn" and rows[1][-1] == "4"

    def test_plot_is_svg_and_stable(self, tmp_path):
        err = np.abs(np.random.default_rng(0).normal(size=150))
        plot_per_sample_mae(err, tmp_path / "a.svg", "t")
        plot_per_sample_mae(err, tmp_path / "b.svg", "t")
        a = (tmp_path / "a.svg").read_bytes()
        assert a.startswith(b"<?xml") and b"<svg" in a
        assert a == (tmp_path / "b.svg").read_bytes()

    def test_reference_deltas(self):
        r = metrics_from_predictions(np.zeros((1, 3)), np.array([[3.61, 5.05, 3.04]]), model="gads", dataset="BIWI")
        line = reference_deltas("p1", r)
        assert "+0.00 vs 3.61" in line and "mae" in line
        assert "no reference" in reference_deltas("p1", metrics_from_predictions(np.zeros((1, 3)), np.zeros((1, 3)), dataset="x"))


class TestLatency:
    def test_report(self):
        m = PoseModel.create("gads")
        rep = benchmark_latency(m, prepare_inputs(generate_synthetic(1, 30, 0.0, 0)), runs=100, warmup=10)
        assert len(rep.times_ms) == 100 and min(rep.times_ms) > 0
        assert rep.p95 >= rep.median >= rep.min
        assert set(rep.summary()) >= {"median_ms", "mean_ms", "p95_ms"}

    @pytest.mark.parametrize("runs,warmup", [(99, 10), (100, 9)])
    def test_minimums(self, runs, warmup):
        with pytest.raises(ValueError):
            benchmark_latency(PoseModel.create("gads"), prepare_inputs(generate_synthetic(1, 30, 0.0, 0)), runs, warmup)


class TestProtocols:
    def test_holdout(self):
        data = generate_synthetic(100, 30, 0.0, 0)
        fit, val = holdout_split(data, 0.05, 1)
        assert len(val) == 5 and len(fit) == 95
        assert not {s.sample_id for s in fit} & {s.sample_id for s in val}

    def test_p2(self, tmp_path):
        save_dataset(generate_synthetic(40, 30, 0.01, 0), tmp_path / "biwi.jsonl")
        cfg = TrainConfig(epochs=2, batch_size=16)
        a = run_protocol_p2(tmp_path / "biwi.jsonl", seed=2, config=cfg, out_dir=tmp_path / "out")
        b = run_protocol_p2(tmp_path / "biwi.jsonl", seed=2, config=cfg)
        assert a.reports == b.reports
        man = json.loads((tmp_path / "out" / "split_manifest.json").read_text())
        assert (len(man["train"]), len(man["test"])) == (28, 12)
        assert not set(man["train"]) & set(man["test"])
        assert a.reports[0].n == 12

    def test_p1_csv(self, tmp_path):
        for name, seed in (("train", 0), ("biwi", 1), ("aflw", 2)):
            save_dataset(generate_synthetic(30, 30, 0.01, seed), tmp_path / f"{name}.jsonl")
        res = run_protocol_p1(
            tmp_path / "train.jsonl", tmp_path / "biwi.jsonl", tmp_path / "aflw.jsonl",
            TrainConfig(epochs=1), out_dir=tmp_path,
        )
        rows = list(csv.reader(open(tmp_path / "protocol_p1.csv")))
        assert rows[0] == ["dataset", "param_count", "yaw", "pitch", "roll", "mae"]
        assert [r[0] for r in rows[1:]] == ["BIWI", "AFLW2000"]
        assert [r.dataset for r in res.reports] == ["BIWI", "AFLW2000"]

    def test_hybrid_protocol(self, tmp_path):
        data = attach_rendered_images(generate_synthetic(12, 30, 0.0, 0), tmp_path / "img")
        save_dataset(data, tmp_path / "b.jsonl")
        res = run_protocol_p2(tmp_path / "b.jsonl", config=TrainConfig(epochs=1, batch_size=4), kind="hybrid")
        assert res.reports[0].model == "hybrid"


class TestAblation:
    def test_grid_size(self):
        cells = list(AblationGrid().cells())
        assert len(cells) == 21
        assert [a for a, *_ in cells].count("decoder_layers") == 4

    def test_small_sweep(self, tmp_path, monkeypatch):
        grid = AblationGrid(decoder_layers=(1, 2), heads=(4,), final_layers=(2,), activation=("relu",), loss=("mae",), lr=(1e-3,), dropout=(0.0,))
        train = generate_synthetic(40, 30, 0.01, 0)
        test = generate_synthetic(10, 30, 0.01, 1)
        calls = []
        real = evaluation.train

        def counting(*a, **k):
            calls.append(1)
            return real(*a, **k)

        monkeypatch.setattr(evaluation, "train", counting)
        rows = run_ablation(grid, train, test, 0, TrainConfig(epochs=1), out_csv=tmp_path / "a.csv")
        assert len(rows) == 8 and len(calls) == 2  # default cell trained once, shared
        table = list(csv.reader(open(tmp_path / "a.csv")))
        assert table[0] == ABLATION_COLUMNS and len(table) == 9
        assert {r[-1] for r in table[1:]} == {"ok"}

    def test_diverged_cell_recorded(self, monkeypatch):
        real = evaluation.train

        def flaky(kind, fit, val, tcfg, seed, mcfg, *a, **k):
            if tcfg.lr == 1e-2:
                raise DivergenceError("non-finite training loss at epoch 0")
            return real(kind, fit, val, tcfg, seed, mcfg, *a, **k)

        monkeypatch.setattr(evaluation, "train", flaky)
        grid = AblationGrid(decoder_layers=(1,), heads=(4,), final_layers=(2,), activation=("relu",), loss=("mae",), lr=(1e-2, 1e-3), dropout=(0.0,))
        rows = run_ablation(grid, generate_synthetic(30, 30, 0.0, 0), generate_synthetic(5, 30, 0.0, 1), 0, TrainConfig(epochs=1))
        status = {(r.axis, r.value): r.status for r in rows}
        assert status[("lr", 1e-2)] == "diverged" and status[("lr", 1e-3)] == "ok"
        assert "nan" in rows[[r.value for r in rows].index(1e-2)].row()[-2]
