"""Command-line experiment runner.

    cropfed run  --config cfg.json [--set key=value ...] [--out DIR]
    cropfed gen  --config cfg.json [--set key=value ...] [--out DIR]
    cropfed eval --config cfg.json --models models.json [--data DIR] [--out DIR]

Exit codes: 0 success, 1 invalid configuration or input, 2 runtime failure
(including training divergence).
"""

from __future__ import annotations

import argparse
import logging
import os
import shutil
import sys
import tempfile
from pathlib import Path
from typing import Sequence

from .config import ConfigError, ExperimentConfig, dump_config, parse_config
from .federation import World, build_world, run_season
from .metrics import MODEL_TAGS, evaluate_season, prediction_trace, season_models
from .model import DivergenceError
from .outputs import (models_from_json, models_to_json, read_plan, trace_name, write_plan,
                      write_report, write_rounds, write_trace)
from .synth import read_dataset_csv, write_dataset_csv

log = logging.getLogger("cropfed")

EXIT_OK = 0
EXIT_INVALID = 1
EXIT_RUNTIME = 2


class _Staging:
    """Write into a scratch directory next to ``out_dir``; publish on success,
    discard everything on failure."""

    def __init__(self, out_dir: Path):
        self.out_dir = out_dir

    def __enter__(self) -> Path:
        self.out_dir.parent.mkdir(parents=True, exist_ok=True)
        self.tmp = Path(tempfile.mkdtemp(prefix=".cropfed-", dir=self.out_dir.parent))
        return self.tmp

    def __exit__(self, exc_type, exc, tb):
        try:
            if exc_type is None:
                self.out_dir.mkdir(parents=True, exist_ok=True)
                for item in sorted(self.tmp.iterdir()):
                    dest = self.out_dir / item.name
                    if dest.is_dir():
                        shutil.rmtree(dest)
                    os.replace(item, dest)
        finally:
            shutil.rmtree(self.tmp, ignore_errors=True)
        return False


def _write_traces(out: Path, world_test, result, plan) -> None:
    for farm_id in sorted(plan.assignments):
        models = season_models(result, plan, farm_id)
        for tag in MODEL_TAGS:
            write_trace(out / trace_name(farm_id, tag), prediction_trace(models[tag], world_test[farm_id]))


def run_experiment(cfg: ExperimentConfig, out_dir: Path | None = None) -> int:
    out_dir = Path(out_dir or cfg.out_dir)
    world = build_world(cfg)
    result = run_season(cfg, world.plan, world.train)
    report = evaluate_season(result, world.test, world.plan)
    with _Staging(out_dir) as tmp:
        (tmp / "config.resolved.json").write_text(dump_config(cfg), encoding="utf-8")
        write_report(tmp / "report.csv", report)
        write_rounds(tmp / "rounds.csv", result.logs)
        _write_traces(tmp, world.test, result, world.plan)
        (tmp / "models.json").write_text(models_to_json(result), encoding="utf-8")
    for row in report.rows:
        if row.r2_degenerate:
            log.warning("farm %d %s: constant test targets, r2 reported as 0", row.farm_id, row.model_tag)
    for tag in MODEL_TAGS:
        log.info("mean rmse %-8s %.6g", tag, report.mean_rmse(tag))
    return EXIT_OK


def generate_data(cfg: ExperimentConfig, out_dir: Path | None = None) -> int:
    out_dir = Path(out_dir or cfg.out_dir)
    world = build_world(cfg)
    with _Staging(out_dir) as tmp:
        (tmp / "config.resolved.json").write_text(dump_config(cfg), encoding="utf-8")
        write_plan(tmp / "plan.csv", world.farms)
        data = tmp / "data"
        data.mkdir()
        for farm_id in sorted(world.farms):
            write_dataset_csv(world.train[farm_id], data / f"farm_{farm_id}_train.csv")
            write_dataset_csv(world.test[farm_id], data / f"farm_{farm_id}_test.csv")
    return EXIT_OK


def _load_saved_world(cfg: ExperimentConfig, data_dir: Path) -> tuple:
    plan = read_plan(data_dir / "plan.csv", cfg.K)
    test = {f: read_dataset_csv(data_dir / "data" / f"farm_{f}_test.csv", f, cfg.d)
            for f in sorted(plan.assignments)}
    return plan, test


def evaluate_saved(cfg: ExperimentConfig, models_path: Path, data_dir: Path | None = None,
                   out_dir: Path | None = None) -> int:
    out_dir = Path(out_dir or cfg.out_dir)
    result = models_from_json(Path(models_path).read_text(encoding="utf-8"))
    if result.spec != cfg.model_spec():
        raise ConfigError(f"{models_path}: model spec does not match the configuration")
    if data_dir is None:
        world: World = build_world(cfg)
        plan, test = world.plan, world.test
    else:
        plan, test = _load_saved_world(cfg, Path(data_dir))
    report = evaluate_season(result, test, plan)
    with _Staging(out_dir) as tmp:
        write_report(tmp / "report.csv", report)
        _write_traces(tmp, test, result, plan)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cropfed", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p: argparse.ArgumentParser) -> None:
        p.add_argument("--config", type=Path, help="JSON config; defaults apply to missing keys")
        p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                       help="override a config value (dotted keys for model./generator.)")
        p.add_argument("--out", type=Path, help="output directory (overrides out_dir)")
        p.add_argument("-v", "--verbose", action="store_true", default=argparse.SUPPRESS)

    common(sub.add_parser("run", help="generate data, run a season, write report"))
    common(sub.add_parser("gen", help="export the generated farm datasets only"))
    p_eval = sub.add_parser("eval", help="re-evaluate saved models")
    common(p_eval)
    p_eval.add_argument("--models", type=Path, required=True)
    p_eval.add_argument("--data", type=Path, help="directory written by `gen`; regenerated if omitted")
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        cfg = parse_config(args.config, args.overrides)
        if args.command == "run":
            return run_experiment(cfg, args.out)
        if args.command == "gen":
            return generate_data(cfg, args.out)
        return evaluate_saved(cfg, args.models, args.data, args.out)
    except (ConfigError, FileNotFoundError, KeyError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except DivergenceError as exc:
        print(f"error: training diverged: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except Exception as exc:  # noqa: BLE001
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
