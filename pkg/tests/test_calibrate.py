import numpy as np
import pytest

from qrcoverage.calibrate import (
    CLIPPED,
    EMPTY_LAMBDA_SET,
    Method,
    bai_level,
    bai_level_clipped,
    calibrate_additive,
    calibrate_additive_ridge,
    calibrate_bai,
    calibrate_level,
    calibrate_level_ridge,
    calibrate_ridge_only,
    default_lambda_grid,
)
from qrcoverage.core import Dataset, empirical_quantile


def test_bai_level():
    # corrected closed form (tau - d/2n) / (1 - d/n)
    assert bai_level(0.9, 30, 300) == pytest.approx((0.9 - 0.05) / (1 - 0.1))
    assert bai_level(0.9, 0, 300) == 0.9
    assert bai_level(0.1, 30, 300) == pytest.approx(1 - bai_level(0.9, 30, 300))


def test_bai_level_boundary_is_flagged():
    val, clipped = bai_level_clipped(0.5, 300, 300)
    assert clipped and 0 < val < 1
    val, clipped = bai_level_clipped(0.99, 100, 300)
    assert clipped and val == pytest.approx(1 - 1 / 301)
    with pytest.raises(ValueError):
        bai_level(1.0, 1, 10)


def test_default_lambda_grid():
    grid = default_lambda_grid(200)
    assert len(grid) == 21
    assert grid[0] == 0.0 and grid[-1] == pytest.approx(20.0)


def test_level_d0_recovers_empirical_quantile():
    y = np.random.default_rng(0).standard_normal(101)
    res = calibrate_level(Dataset(np.zeros((101, 0)), y), 0.9)
    assert res.final_fit.intercept == pytest.approx(empirical_quantile(0.9, y), abs=1e-9)
    assert res.on_target


def test_additive_d0_median():
    y = np.random.default_rng(3).standard_normal(101)
    res = calibrate_additive(Dataset(np.zeros((101, 0)), y), 0.5)
    ys = np.sort(y)
    assert ys[49] <= res.c <= ys[51]
    assert res.on_target


def test_level_on_target_small_gamma(make_data):
    res = calibrate_level(make_data(200, 10, seed=1), 0.9)
    assert res.method is Method.LEVEL_ADJUST
    assert res.on_target and not res.flags
    assert res.tau_adj > 0.9
    # the best gap seen so far never grows
    gaps = [abs(c - 0.9) for _, c in res.search_trace]
    assert np.all(np.diff(np.minimum.accumulate(gaps)) <= 0)


def test_singleton_grid_equals_plain_search(make_data):
    ds = make_data(100, 10, seed=2)
    a = calibrate_level_ridge(ds, 0.9, [3.0])
    b = calibrate_level(ds, 0.9, 3.0)
    assert a.tau_adj == b.tau_adj and a.loo_coverage == b.loo_coverage and a.lam == 3.0


@pytest.mark.parametrize("calib", [calibrate_level_ridge, calibrate_additive_ridge])
def test_ridge_selection_minimizes_multiaccuracy(make_data, calib):
    ds = make_data(100, 20, seed=3)
    grid = default_lambda_grid(ds.n, 0.1, 0.025)
    res = calib(ds, 0.9, grid)
    assert res.on_target
    assert EMPTY_LAMBDA_SET not in res.flags
    lams = [lam for lam, _ in res.search_trace]
    assert lams == grid
    on = [ma for (lam, cov), (_, ma) in zip(res.search_trace, res.multiaccuracy_trace)
          if abs(cov - 0.9) <= 1 / ds.n + 1e-12]
    assert res.loo_multiaccuracy == pytest.approx(min(on))


def test_bai_calibration(make_data):
    ds = make_data(100, 5, seed=4)
    res = calibrate_bai(ds, 0.9)
    assert res.tau_adj == pytest.approx(bai_level(0.9, 5, 100))
    assert CLIPPED not in res.flags


def test_ridge_only_reaches_coverage(make_data):
    ds = make_data(100, 30, seed=5)
    res = calibrate_ridge_only(ds, 0.9)
    assert res.loo_coverage >= 0.9 - 1 / ds.n - 1e-12
    assert res.lam > 0


def test_calibration_needs_two_samples():
    from qrcoverage.core import DataError

    with pytest.raises(DataError):
        calibrate_level(Dataset(np.zeros((1, 0)), [1.0]), 0.9)
    with pytest.raises(ValueError):
        calibrate_additive(Dataset(np.zeros((3, 0)), [1.0, 2.0, 3.0]), 0.5, c_range=(1.0, -1.0))
