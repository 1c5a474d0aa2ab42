import csv
import dataclasses
import json

import numpy as np
import pytest
from PIL import Image

from cellcount.config import RunConfig
from cellcount.counter import CounterConfig
from cellcount.data import DotAnnotation, ImageSample, SynthConfig, generate_synthetic, pad_and_tile
from cellcount.errors import InputError, ProtocolError
from cellcount.evaluation import (ABLATION_ROWS, EvalReport, check_pairing, constant_baseline_mae,
                                  evaluate, export_visuals, improvement, mae, mse, run_ablation)


def test_metric_examples():
    assert mae([1, 2, 3], [1, 2, 3]) == 0.0 and mse([1, 2, 3], [1, 2, 3]) == 0.0
    assert mae([3, 5], [4, 5]) == 0.5
    assert mse([3, 5], [4, 5]) == 0.5


def test_outlier_sensitivity():
    gts = np.zeros(10)
    preds = gts.copy()
    preds[3] = 10.0
    assert mae(preds, gts) == 1.0
    assert mse(preds, gts) == 10.0


def test_metric_errors():
    with pytest.raises(InputError):
        mae([1, 2], [1])
    with pytest.raises(InputError):
        mse([], [])


def test_metric_permutation_invariance(rng):
    p, g = rng.normal(size=30), rng.normal(size=30)
    perm = rng.permutation(30)
    assert mae(p[perm], g[perm]) == pytest.approx(mae(p, g), abs=1e-12)
    assert mse(p[perm], g[perm]) == pytest.approx(mse(p, g), abs=1e-12)


def test_metrics_brute_force_and_jensen(rng):
    for _ in range(1000):
        n = int(rng.integers(1, 40))
        p, g = rng.normal(0, 50, n), rng.integers(0, 300, n).astype(float)
        a = sum(abs(x - y) for x, y in zip(p, g)) / n
        b = sum((x - y) ** 2 for x, y in zip(p, g)) / n
        assert abs(mae(p, g) - a) <= 1e-9
        assert abs(mse(p, g) - b) <= 1e-9 * max(1.0, b)
        assert mae(p, g) ** 2 <= mse(p, g) * (1 + 1e-12)


def samples_with_counts(counts):
    return [ImageSample(np.zeros((8, 8, 1), np.float32),
                        DotAnnotation(np.full((c, 2), 1.0)), f"s{i}", "test")
            for i, c in enumerate(counts)]


def test_oracle_stub_scores_zero():
    test = samples_with_counts([3, 0, 17, 5])
    rep = evaluate(lambda ss: [s.count for s in ss], test)
    assert rep.mae == 0.0 and rep.mse == 0.0


def test_constant_predictor_equals_mean_absolute_deviation():
    train_counts = [10, 20, 30, 44]
    test_counts = [5, 25, 40, 18, 33]
    c = float(np.mean(train_counts))
    rep = evaluate(lambda ss: [c] * len(ss), samples_with_counts(test_counts))
    # closed form: mean |y - c| with c = 26
    assert rep.mae == pytest.approx((21 + 1 + 14 + 8 + 7) / 5)
    assert rep.mae == pytest.approx(constant_baseline_mae(test_counts, c))


def test_tiled_image_reassembled(rng):
    big = ImageSample(np.zeros((798, 788, 1), np.float32),
                      DotAnnotation(np.stack([rng.uniform(0, 788, 60), rng.uniform(0, 798, 60)], 1)),
                      "dcc1", "test")
    tiles = pad_and_tile(big)
    other = samples_with_counts([4])
    tile_preds = rng.uniform(0, 10, len(tiles))
    rep = evaluate(lambda ss: list(tile_preds) + [4.0], tiles + other)
    assert len(rep.rows) == 2
    row = rep.rows[0]
    assert row.id == "dcc1" and row.tiles == 9 and row.y == 60
    assert row.y_hat == pytest.approx(tile_preds.sum())


def test_report_roundtrip_and_recompute(tmp_path, rng):
    test = samples_with_counts(list(rng.integers(0, 50, 12)))
    preds = rng.uniform(0, 50, 12)
    rep = evaluate(lambda ss: (list(preds), list(preds * 0.9)), test, {"k": "v"})
    rep.write(tmp_path)
    data = json.loads((tmp_path / "report.json").read_text())
    ys = [r["y"] for r in data["rows"]]
    yh = [r["y_hat"] for r in data["rows"]]
    assert abs(data["mae"] - np.mean(np.abs(np.subtract(yh, ys)))) <= 1e-9
    assert abs(data["mse"] - np.mean(np.subtract(yh, ys) ** 2)) <= 1e-9
    assert data["mae"] ** 2 <= data["mse"]
    rows = list(csv.DictReader((tmp_path / "report.csv").open()))
    assert len(rows) == 12 and rows[0]["fine_sum"] != ""


def test_evaluate_empty_split():
    with pytest.raises(InputError):
        evaluate(lambda ss: [], [])


def test_improvement_percentages():
    assert improvement(1.2, 0.8) == pytest.approx(33.3, abs=0.05)
    assert improvement(2.0, 2.5) == pytest.approx(-25.0)
    assert improvement(0.0, 1.0) == 0.0
    assert improvement(1.8, 1.3) == pytest.approx(27.8, abs=0.05)


def test_pairing_protocol():
    base = RunConfig()
    off = dataclasses.replace(base, counter=dataclasses.replace(base.counter, gmp_enabled=False))
    check_pairing(off, base)
    with pytest.raises(ProtocolError, match="lr_max"):
        check_pairing(off, dataclasses.replace(base, lr_max=1e-3))
    with pytest.raises(ProtocolError, match="gmp_heads"):
        check_pairing(off, dataclasses.replace(base, counter=CounterConfig(gmp_heads=2)))
    with pytest.raises(ProtocolError):
        check_pairing(base, base)


def test_run_ablation_layout(tmp_path):
    data = generate_synthetic(SynthConfig(num_images=20, image_size=(64, 64), count_mean=10,
                                          count_std=3, seed=4))
    cfg = RunConfig(epochs=1, counter=CounterConfig(widths=(4, 4, 8, 8), gmp_heads=2))
    res = run_ablation(cfg, data, seeds=(0, 1), out_dir=tmp_path)
    assert [r["label"] for r in res.table] == list(ABLATION_ROWS)
    assert res.data_order_hashes["w/o GMP"] == res.data_order_hashes["Full model"]
    rows = list(csv.reader((tmp_path / "ablation_summary.csv").open()))
    assert [r[0] for r in rows[1:]] == ["w/o GMP", "Full model", "improvement"]
    assert rows[3][1].endswith("%")
    assert (tmp_path / "ablation_per_seed.csv").is_file()
    for arm in ("gmp", "no_gmp"):
        assert (tmp_path / "seed1" / arm / "manifest.json").is_file()


def test_export_visuals_zero_maps(tmp_path):
    path = export_visuals(tmp_path / "v.png", np.zeros((64, 64, 3)), np.zeros((8, 8)),
                          np.zeros((64, 64)), DotAnnotation())
    im = Image.open(path)
    assert im.size == (4 * 64, 64)
    assert im.text["count"] == "0.0"


def test_export_visuals_count_text(tmp_path, rng):
    coarse = rng.random((8, 8))
    path = export_visuals(tmp_path / "v.png", rng.random((64, 64, 1)), coarse,
                          rng.random((64, 64)), DotAnnotation([(3, 4), (60, 60)]))
    assert Image.open(path).text["count"] == f"{coarse.sum():.1f}"


def test_export_visuals_geometry_check(tmp_path):
    with pytest.raises(InputError):
        export_visuals(tmp_path / "v.png", np.zeros((64, 64, 3)), np.zeros((8, 8)),
                       np.zeros((32, 32)), DotAnnotation())
