"""Regression metrics and the local / crop / global / baseline comparison grid."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .federation import SeasonResult, SubscriptionPlan, aggregation_weights
from .model import Dataset, ParamVector, mse_loss, predict_batch

MODEL_TAGS = ("Local", "Crop", "Global", "Baseline")


def _pair(predictions, targets) -> tuple[np.ndarray, np.ndarray]:
    p = np.asarray(predictions, dtype=np.float64).reshape(-1)
    t = np.asarray(targets, dtype=np.float64).reshape(-1)
    if p.shape != t.shape:
        raise ValueError(f"{p.shape[0]} predictions but {t.shape[0]} targets")
    if p.shape[0] == 0:
        raise ValueError("no predictions to score")
    return p, t


def rmse(predictions, targets) -> float:
    p, t = _pair(predictions, targets)
    return math.sqrt(float(np.mean((p - t) ** 2)))


def mae(predictions, targets) -> float:
    p, t = _pair(predictions, targets)
    return float(np.mean(np.abs(p - t)))


def r2_with_flag(predictions, targets) -> tuple[float, bool]:
    """R^2 plus a flag set when the targets are constant but the fit is not
    exact (reported as 0 rather than -inf)."""
    p, t = _pair(predictions, targets)
    sse = float(np.sum((p - t) ** 2))
    sst = float(np.sum((t - t.mean()) ** 2))
    if sst == 0.0:
        return 0.0, sse > 0.0
    return 1.0 - sse / sst, False


def r2(predictions, targets) -> float:
    return r2_with_flag(predictions, targets)[0]


def global_objective(model: ParamVector, datasets: Sequence[Dataset]) -> float:
    """Data-size weighted mean of per-farm MSE; equals the MSE on the pooled data."""
    if not datasets:
        raise ValueError("no datasets")
    weights = aggregation_weights([ds.n for ds in datasets])
    return math.fsum(a * mse_loss(model, ds) for a, ds in zip(weights, datasets))


def prediction_trace(model: ParamVector, test: Dataset) -> list[tuple[float, float]]:
    preds = predict_batch(model, test.features)
    return [(float(y), float(p)) for y, p in zip(test.targets, preds)]


@dataclass(frozen=True)
class EvalRow:
    model_tag: str
    farm_id: int
    crop_id: int
    rmse: float
    mae: float
    r2: float
    n_test: int
    r2_degenerate: bool = False


@dataclass
class EvalReport:
    rows: list[EvalRow]

    def select(self, model_tag: str) -> list[EvalRow]:
        return [r for r in self.rows if r.model_tag == model_tag]

    def mean_rmse(self, model_tag: str) -> float:
        rows = self.select(model_tag)
        return math.fsum(r.rmse for r in rows) / len(rows)

    def row(self, model_tag: str, farm_id: int) -> EvalRow:
        for r in self.rows:
            if r.model_tag == model_tag and r.farm_id == farm_id:
                return r
        raise KeyError((model_tag, farm_id))


def season_models(result: SeasonResult, plan: SubscriptionPlan, farm_id: int) -> dict[str, ParamVector]:
    crop_id = plan.assignments[farm_id]
    try:
        return {"Local": result.local_models[farm_id],
                "Crop": result.crop_models[crop_id],
                "Global": result.global_model,
                "Baseline": result.baseline_model}
    except KeyError as exc:
        raise KeyError(f"farm {farm_id}: missing model {exc}") from None


def score(model_tag: str, farm_id: int, crop_id: int, model: ParamVector, test: Dataset) -> EvalRow:
    preds = predict_batch(model, test.features)
    r2_value, flagged = r2_with_flag(preds, test.targets)
    return EvalRow(model_tag, farm_id, crop_id, rmse(preds, test.targets),
                   mae(preds, test.targets), r2_value, test.n, flagged)


def evaluate_season(result: SeasonResult, test_sets: Mapping[int, Dataset],
                    plan: SubscriptionPlan) -> EvalReport:
    rows = []
    for farm_id in sorted(plan.assignments):
        if farm_id not in test_sets:
            raise KeyError(f"farm {farm_id}: no test set")
        models = season_models(result, plan, farm_id)
        for tag in MODEL_TAGS:
            rows.append(score(tag, farm_id, plan.assignments[farm_id], models[tag],
                              test_sets[farm_id]))
    return EvalReport(rows)
