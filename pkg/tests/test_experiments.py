import csv
import json

import numpy as np
import pytest

from qrcoverage.experiments import (
    ROW_FIELDS,
    Figure,
    SimConfig,
    aggregate_rows,
    figure_config,
    generate,
    run_figure,
)


def test_generate_is_deterministic():
    cfg = SimConfig(n=20, d=3, n_test=5, seed=11)
    a, b = generate(cfg, 4), generate(cfg, 4)
    assert np.array_equal(a[0].X, b[0].X) and np.array_equal(a[0].y, b[0].y)
    assert np.array_equal(a[1].y, b[1].y) and np.array_equal(a[2], b[2])
    other = generate(cfg, 5)
    assert not np.array_equal(a[0].y, other[0].y)


def test_generate_without_features_is_pure_noise():
    train, test, beta = generate(SimConfig(n=4000, d=0, n_test=10, sigma=2.0), 0)
    assert beta.size == 0 and train.d == 0
    assert np.std(train.y) == pytest.approx(2.0, rel=0.05)


def test_sim_config_validation():
    with pytest.raises(ValueError):
        SimConfig(n=0)
    with pytest.raises(ValueError):
        SimConfig(model="Poisson")


def test_figure_defaults():
    cfg = figure_config("fig1")
    assert cfg.n == 300 and cfg.dims == (1, 15, 30, 60, 90) and cfg.methods == ("QR",)
    assert figure_config(Figure.FIG6).methods == ("QR", "LevelRidge", "AdditiveRidge", "FixedThresh")
    assert figure_config("fig2", dims=[5]).dims == (5,)


@pytest.fixture(scope="module")
def small_report():
    return run_figure("fig1", dict(dims=(1, 20), trials=3, n_test=200, n=100))


def test_rows_and_aggregates(small_report):
    assert len(small_report.rows) == 6
    assert small_report.summary == {"rows": 6, "failed_rows": 0}
    for agg in small_report.aggregates:
        rows = small_report.select(d=agg["d"], method="QR")
        vals = [r["miscoverage"] for r in rows]
        assert agg["count"] == 3
        assert agg["miscoverage"]["mean"] == pytest.approx(np.mean(vals))
        assert agg["miscoverage"]["se"] == pytest.approx(np.std(vals, ddof=1) / np.sqrt(3))
        assert agg["miscoverage"]["quantiles"][2] == pytest.approx(np.median(vals))
    assert aggregate_rows(small_report.rows) == list(small_report.aggregates)


def test_report_reproducible_across_threads(small_report):
    again = run_figure("fig1", dict(dims=(1, 20), trials=3, n_test=200, n=100, threads=2))
    assert again.rows == small_report.rows


def test_report_serialization(small_report, tmp_path):
    path = tmp_path / "r.csv"
    small_report.to_csv(str(path))
    with open(path) as fh:
        rows = list(csv.DictReader(fh))
    assert tuple(rows[0].keys()) == ROW_FIELDS
    assert len(rows) == 6
    doc = json.loads(small_report.to_json(str(tmp_path / "r.json")))
    assert doc["figure"] == "fig1" and len(doc["rows"]) == 6


def test_fig5_records_threshold_groups():
    rep = run_figure("fig5", dict(trials=6, n=60, dims=(10,)))
    assert {r["method"] for r in rep.rows} == {"GCCRand"}
    assert all(r["u"] is not None and r["group"] for r in rep.rows)


def test_fig7_on_csv(tmp_path):
    rng = np.random.default_rng(0)
    X = rng.standard_normal((300, 12))
    y = X[:, 0] + rng.standard_normal(300)
    path = tmp_path / "data.csv"
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([f"x{j}" for j in range(12)] + ["target"])
        w.writerows(np.column_stack([X, y]).tolist())
    rep = run_figure("fig7", dict(csv=str(path), response="target", trials=1, dims=(5,), n=150,
                                  n_test_dual=5, methods=("QR", "CQR"), lambda_top=0.05, lambda_step=0.025))
    assert {r["method"] for r in rep.rows} == {"QR", "CQR"}
    assert all(not r.get("error") for r in rep.rows)
