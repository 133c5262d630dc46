import math

import numpy as np
import pytest

from cropfed.config import parse_config
from cropfed.federation import build_world, run_season
from cropfed.metrics import (EvalReport, evaluate_season, global_objective, mae, prediction_trace,
                             r2, r2_with_flag, rmse)
from cropfed.model import Dataset, ModelSpec, ParamVector, concat_datasets, mse_loss


def test_perfect_predictions():
    y = [1.0, 2.0, 4.0]
    assert rmse(y, y) == 0 and mae(y, y) == 0 and r2(y, y) == 1


def test_unit_residuals():
    assert rmse([1, 3], [2, 4]) == 1.0
    assert mae([1, 3], [2, 4]) == 1.0


def test_mean_predictor_r2_zero():
    y = np.array([1.0, 2.0, 6.0])
    assert r2(np.full(3, y.mean()), y) == pytest.approx(0.0, abs=1e-15)


def test_r2_constant_targets():
    assert r2_with_flag([5.0, 5.0], [5.0, 5.0]) == (0.0, False)
    assert r2_with_flag([4.0, 6.0], [5.0, 5.0]) == (0.0, True)


def test_metric_errors():
    with pytest.raises(ValueError):
        rmse([1.0], [1.0, 2.0])
    with pytest.raises(ValueError):
        mae([], [])


def test_rmse_consistency():
    rng = np.random.default_rng(0)
    p, t = rng.normal(size=50), rng.normal(size=50)
    assert rmse(p, t) ** 2 == pytest.approx(np.mean((p - t) ** 2), rel=1e-12)


def test_global_objective_examples():
    spec = ModelSpec.linear(1)
    zero = ParamVector(spec, [0, 0])
    a = Dataset([[0.0], [0.0]], [math.sqrt(2), math.sqrt(2)])
    b = Dataset([[0.0], [0.0]], [2.0, 2.0])
    assert global_objective(zero, [b]) == mse_loss(zero, b)
    assert global_objective(zero, [a, b]) == pytest.approx(3.0, rel=1e-15)
    with pytest.raises(ValueError):
        global_objective(zero, [])


def test_global_objective_is_pooled_mse():
    rng = np.random.default_rng(1)
    sets = [Dataset(rng.normal(size=(n, 3)), rng.normal(size=n)) for n in (3, 8, 21)]
    pooled = concat_datasets(sets)
    spec = ModelSpec.mlp(3, [4])
    for _ in range(5):
        w = ParamVector(spec, rng.normal(size=spec.param_count))
        assert global_objective(w, sets) == pytest.approx(mse_loss(w, pooled), rel=1e-12)


def test_prediction_trace():
    spec = ModelSpec.linear(2)
    test = Dataset([[1.0, 2.0], [2.0, -1.0], [3.0, 3.0]], [5.0, 0.0, 9.0])
    zero = prediction_trace(ParamVector(spec, [0, 0, 0]), test)
    assert [p for _, p in zero] == [0.0, 0.0, 0.0]
    exact = prediction_trace(ParamVector(spec, [1, 2, 0]), test)
    assert exact == [(5.0, 5.0), (0.0, 0.0), (9.0, 9.0)]
    assert len(exact) == test.n


@pytest.fixture(scope="module")
def season():
    cfg = parse_config(overrides=["N=6", "K=3", "T_k=6"])
    world = build_world(cfg)
    return world, run_season(cfg, world.plan, world.train)


def test_evaluate_grid(season):
    world, result = season
    report = evaluate_season(result, world.test, world.plan)
    assert len(report.rows) == 4 * world.plan.N
    for row in report.rows:
        assert row.rmse >= 0 and row.mae >= 0 and row.r2 <= 1
        assert row.crop_id == world.plan.assignments[row.farm_id]
        assert row.n_test == world.test[row.farm_id].n


def test_evaluate_deterministic_read_only(season):
    world, result = season
    before = result.global_model.values.copy()
    a = evaluate_season(result, world.test, world.plan)
    b = evaluate_season(result, world.test, world.plan)
    assert a == b
    assert np.array_equal(before, result.global_model.values)


def test_evaluate_missing_test_set(season):
    world, result = season
    partial = dict(world.test)
    partial.pop(0)
    with pytest.raises(KeyError):
        evaluate_season(result, partial, world.plan)


def test_k1_crop_equals_global():
    cfg = parse_config(overrides=["N=3", "K=1", "T_k=3"])
    world = build_world(cfg)
    report = evaluate_season(run_season(cfg, world.plan, world.train), world.test, world.plan)
    for f in range(3):
        c, g = report.row("Crop", f), report.row("Global", f)
        assert (c.rmse, c.mae, c.r2) == (g.rmse, g.mae, g.r2)


def test_noiseless_local_and_crop_fit():
    cfg = parse_config(overrides=["generator.noise_std=0", "generator.nonlinearity_scale=0",
                                  "generator.farm_offset_std=0", "T_k=60"])
    world = build_world(cfg)
    report = evaluate_season(run_season(cfg, world.plan, world.train), world.test, world.plan)
    assert max(r.rmse for r in report.select("Local")) < 1e-3
    assert max(r.rmse for r in report.select("Crop")) < 1e-3


def test_default_crop_beats_global():
    cfg = parse_config()
    world = build_world(cfg)
    report = evaluate_season(run_season(cfg, world.plan, world.train), world.test, world.plan)
    assert isinstance(report, EvalReport)
    assert report.mean_rmse("Crop") < report.mean_rmse("Global")
