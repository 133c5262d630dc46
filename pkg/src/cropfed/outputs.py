"""On-disk formats for experiment outputs.

CSV files are RFC 4180 (CRLF line endings, header row) with floats written
at 17 significant digits so they read back bit-exact.
"""

from __future__ import annotations

import csv
import json
from pathlib import Path
from typing import Iterable, Sequence

from .federation import RoundLog, SeasonResult, SubscriptionPlan
from .metrics import EvalReport
from .model import ModelSpec, ParamVector
from .synth import FarmProfile, crop_name

REPORT_HEADER = ["model_tag", "farm_id", "crop_id", "rmse", "mae", "r2", "n_test"]
ROUNDS_HEADER = ["crop_id", "round", "farm_id", "loss_before", "loss_after", "cluster_loss"]
TRACE_HEADER = ["index", "y_actual", "y_pred"]
PLAN_HEADER = ["farm_id", "crop_id", "crop_name", "farm_offset", "n_train", "n_test"]


def fmt(x: float) -> str:
    return format(float(x), ".17g")


def write_csv(path: Path, header: Sequence[str], rows: Iterable[Sequence]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\r\n")
        w.writerow(header)
        for row in rows:
            w.writerow([fmt(v) if isinstance(v, float) else v for v in row])


def read_csv(path: Path) -> list[dict[str, str]]:
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


def write_report(path: Path, report: EvalReport) -> None:
    write_csv(path, REPORT_HEADER,
              ([r.model_tag, r.farm_id, r.crop_id, r.rmse, r.mae, r.r2, r.n_test]
               for r in report.rows))


def write_rounds(path: Path, logs: Sequence[RoundLog]) -> None:
    write_csv(path, ROUNDS_HEADER,
              ([log.crop_id, log.round_index, m.farm_id, m.loss_before, m.loss_after, log.cluster_loss]
               for log in logs for m in log.members))


def write_trace(path: Path, trace: Sequence[tuple[float, float]]) -> None:
    write_csv(path, TRACE_HEADER, ([i, y, p] for i, (y, p) in enumerate(trace)))


def trace_name(farm_id: int, model_tag: str) -> str:
    return f"trace_{farm_id}_{model_tag}.csv"


def write_plan(path: Path, farms: dict[int, FarmProfile]) -> None:
    write_csv(path, PLAN_HEADER,
              ([f.farm_id, f.crop_id, crop_name(f.crop_id), float(f.farm_offset), f.n_train, f.n_test]
               for f in farms.values()))


def read_plan(path: Path, K: int) -> SubscriptionPlan:
    rows = read_csv(path)
    if not rows or list(rows[0]) != PLAN_HEADER:
        raise ValueError(f"{path}: expected header {','.join(PLAN_HEADER)}")
    return SubscriptionPlan({int(r["farm_id"]): int(r["crop_id"]) for r in rows}, K)


def models_to_json(result: SeasonResult) -> str:
    payload = {
        "spec": result.spec.to_dict(),
        "local": {str(f): p.tolist() for f, p in sorted(result.local_models.items())},
        "crop": {str(k): p.tolist() for k, p in sorted(result.crop_models.items())},
        "global": result.global_model.tolist(),
        "baseline": result.baseline_model.tolist(),
        "cluster_sizes": {str(k): n for k, n in sorted(result.cluster_sizes.items())},
    }
    return json.dumps(payload, indent=2) + "\n"


def models_from_json(text: str) -> SeasonResult:
    raw = json.loads(text)
    s = raw["spec"]
    spec = ModelSpec(s["kind"], int(s["input_dim"]), tuple(s["hidden_dims"]), s["activation"])

    def vec(values) -> ParamVector:
        return ParamVector(spec, values)

    return SeasonResult(
        spec,
        {int(f): vec(v) for f, v in raw["local"].items()},
        {int(k): vec(v) for k, v in raw["crop"].items()},
        vec(raw["global"]),
        vec(raw["baseline"]),
        {int(k): int(n) for k, n in raw.get("cluster_sizes", {}).items()},
    )
