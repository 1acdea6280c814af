"""Experiment execution: repeats, (amplitude, frequency) grids, CSV and JSON outputs."""

import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from src.client import ClientError, DivergenceError
from src.config import ConfigError, ExperimentConfig, dump_config
from src.data import DataError, IdxFormatError
from src.logger import get_logger, setup_logging
from src.model import ModelError
from src.orchestrator import (
    OrchestratorError,
    RunConfig,
    RunRecord,
    accuracy_at,
    max_accuracy,
    median_rounds,
    rounds_to_target,
    run_federated,
    summarize_repeats,
)
from src.schedule import ScheduleConfig, ScheduleError, ScheduleKind
from src.server import ServerError

logger = get_logger(__name__)

ROUND_CSV_HEADER = "round,gamma,test_accuracy,mean_train_loss,wall_ms,selected_clients"
BASELINE_CELL = "baseline"

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_DIVERGENCE = 2
EXIT_IO = 3

PLOT_SCRIPT = '''"""Plot test accuracy against round for every run under this directory."""

from pathlib import Path

import matplotlib.pyplot as plt
import pandas as pd

root = Path(__file__).parent
fig, ax = plt.subplots(figsize=(8, 5))
for csv_path in sorted(root.glob("*/*/rounds.csv")):
    cell, repeat = csv_path.parent.parent.name, csv_path.parent.name
    frame = pd.read_csv(csv_path)
    ax.plot(frame["round"], frame["test_accuracy"], label=f"{cell}/{repeat}", alpha=0.7)
ax.set_xlabel("global round")
ax.set_ylabel("test accuracy")
ax.legend(fontsize="x-small", ncol=2)
fig.tight_layout()
fig.savefig(root / "accuracy.png", dpi=150)
'''


class OutputError(Exception):
    """Custom exception for output writing errors."""

    pass


@dataclass(frozen=True)
class Cell:
    """One schedule configuration of an experiment."""

    name: str
    schedule: ScheduleConfig
    is_baseline: bool = False


@dataclass(frozen=True)
class RunOutcome:
    """Result of one (cell, repeat) run; record is None when the run failed."""

    cell: str
    repeat: int
    record: Optional[RunRecord]
    exit_code: int = EXIT_OK
    error: Optional[str] = None


@dataclass(frozen=True)
class ExperimentResult:
    """Exit status and the report written to <output_dir>/report.json."""

    exit_code: int
    report: Dict[str, Any]
    output_dir: Path


def exit_code_for(error: BaseException) -> int:
    """Map an exception to the command-line exit status."""
    if isinstance(error, DivergenceError):
        return EXIT_DIVERGENCE
    if isinstance(error, (IdxFormatError, OSError, OutputError)):
        return EXIT_IO
    if isinstance(
        error,
        (ConfigError, DataError, OrchestratorError, ScheduleError, ModelError, ClientError, ServerError),
    ):
        return EXIT_CONFIG
    raise error


def cell_name(amplitude: float, frequency: float) -> str:
    return f"a{amplitude:g}_f{frequency:g}"


def build_cells(cfg: ExperimentConfig) -> List[Cell]:
    """Cells in report order: optional baseline first, then the grid or the single template."""
    template = cfg.run.server_cfg.schedule
    cells = []
    if cfg.grid is not None:
        for amplitude in cfg.grid.amplitudes:
            for frequency in cfg.grid.frequencies:
                schedule = replace(
                    template, kind=ScheduleKind.CYCLIC, amplitude=amplitude, frequency=frequency
                )
                cells.append(Cell(cell_name(amplitude, frequency), schedule))
    else:
        cells.append(Cell(template.kind.value, template))

    has_cyclic = any(c.schedule.kind is ScheduleKind.CYCLIC for c in cells)
    if cfg.baseline and has_cyclic:
        fixed = replace(template, kind=ScheduleKind.FIXED, amplitude=0.0)
        cells.insert(0, Cell(BASELINE_CELL, fixed, is_baseline=True))
    return cells


def _execute_run(cell: str, repeat: int, run_cfg: RunConfig) -> RunOutcome:
    try:
        return RunOutcome(cell, repeat, run_federated(run_cfg))
    except Exception as e:
        code = exit_code_for(e)
        logger.error(f"Run {cell}/{repeat} failed: {e}")
        return RunOutcome(cell, repeat, None, exit_code=code, error=str(e))


def emit_round_csv(run: RunRecord, path: Path) -> None:
    """
    Write the per-round metrics of a run as CSV.

    Reals use 17 significant digits, selected clients are ';'-joined, lines end
    with '\\n' and the file is UTF-8.

    Raises:
        OutputError: If the run is empty or the file cannot be written.
    """
    if not run.records:
        raise OutputError("Cannot write an empty run")
    frame = pd.DataFrame(
        {
            "round": [r.round for r in run.records],
            "gamma": [float(r.gamma) for r in run.records],
            "test_accuracy": [float(r.test_accuracy) for r in run.records],
            "mean_train_loss": [float(r.mean_train_loss) for r in run.records],
            "wall_ms": [int(r.wall_ms) for r in run.records],
            "selected_clients": [";".join(str(c) for c in r.selected) for r in run.records],
        }
    )
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        frame.to_csv(path, index=False, float_format="%.17g", lineterminator="\n", encoding="utf-8")
    except OSError as e:
        logger.error(f"Failed to write {path}: {e}", exc_info=True)
        raise OutputError(f"Cannot write round CSV to {path}: {e}") from e
    logger.debug(f"Wrote {len(run.records)} rounds to {path}")


def _write_json(path: Path, payload: Dict[str, Any]) -> None:
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    except OSError as e:
        logger.error(f"Failed to write {path}: {e}", exc_info=True)
        raise OutputError(f"Cannot write {path}: {e}") from e


def _finite(value: Optional[float]) -> Optional[float]:
    if value is None or not math.isfinite(value):
        return None
    return float(value)


def summarize_cell(
    cell: Cell,
    runs: Sequence[RunRecord],
    target: Optional[float],
    baseline_runs: Optional[Sequence[RunRecord]],
) -> Dict[str, Any]:
    """Summary document of one successful cell."""
    maxima = [max_accuracy(run) for run in runs]
    if len(runs) >= 2:
        summary = summarize_repeats(runs, target, baseline_runs)
        mean, std = summary.mean_max_accuracy, summary.std_max_accuracy
        reached = list(summary.rounds_to_target)
        median, speedup = summary.median_rounds_to_target, summary.speedup
    else:
        mean, std, speedup = float(np.mean(maxima)), None, None
        reached = [rounds_to_target(run, target) for run in runs] if target is not None else []
        median = median_rounds(reached) if target is not None else None
    if target is not None and median is None:
        logger.warning(f"Cell {cell.name}: median run never reached target {target:.4f}")

    return {
        "cell": cell.name,
        "status": "ok",
        "schedule": cell.schedule.kind.value,
        "gamma_fixed": cell.schedule.gamma_fixed,
        "amplitude": cell.schedule.amplitude,
        "frequency": cell.schedule.frequency,
        "num_runs": len(runs),
        "max_accuracies": maxima,
        "mean_max_accuracy": mean,
        "std_max_accuracy": _finite(std),
        "target_accuracy": target,
        "rounds_to_target": reached,
        "median_rounds_to_target": median,
        "speedup": _finite(speedup),
    }


def select_best_cell(summaries: Sequence[Dict[str, Any]]) -> Optional[Dict[str, Any]]:
    """
    Best successful cyclic cell.

    Order: lowest median rounds-to-target (unreached last), then highest mean max
    accuracy, then lowest amplitude, then lowest frequency.
    """
    candidates = [
        s for s in summaries if s["status"] == "ok" and s["schedule"] == ScheduleKind.CYCLIC.value
        and s["cell"] != BASELINE_CELL
    ]
    if not candidates:
        return None
    frame = pd.DataFrame(
        {
            "cell": [s["cell"] for s in candidates],
            "median": [
                math.inf if s["median_rounds_to_target"] is None else s["median_rounds_to_target"]
                for s in candidates
            ],
            "mean_max_accuracy": [s["mean_max_accuracy"] for s in candidates],
            "amplitude": [s["amplitude"] for s in candidates],
            "frequency": [s["frequency"] for s in candidates],
        }
    )
    ranked = frame.sort_values(
        by=["median", "mean_max_accuracy", "amplitude", "frequency"],
        ascending=[True, False, True, True],
        kind="mergesort",
    )
    best = ranked.iloc[0]["cell"]
    return next(s for s in candidates if s["cell"] == best)


def _init_worker(log_level: str) -> None:
    """Console-only logging in a pool worker; the parent owns the log file."""
    setup_logging(log_level, None)


def _run_all(
    tasks: Sequence[Tuple[str, int, RunConfig]], jobs: int
) -> Dict[Tuple[str, int], RunOutcome]:
    if jobs <= 1 or len(tasks) <= 1:
        return {(cell, repeat): _execute_run(cell, repeat, run_cfg) for cell, repeat, run_cfg in tasks}
    log_level = logging.getLevelName(logging.getLogger().getEffectiveLevel())
    with ProcessPoolExecutor(max_workers=jobs, initializer=_init_worker, initargs=(log_level,)) as executor:
        futures = {
            (cell, repeat): executor.submit(_execute_run, cell, repeat, run_cfg)
            for cell, repeat, run_cfg in tasks
        }
        return {key: future.result() for key, future in futures.items()}


def _derive_target(
    cfg: ExperimentConfig, baseline_runs: Optional[List[RunRecord]]
) -> Optional[float]:
    if cfg.target_accuracy is not None:
        return cfg.target_accuracy
    if cfg.target_from_baseline_round is None or not baseline_runs:
        return None
    accuracies = [accuracy_at(run, cfg.target_from_baseline_round) for run in baseline_runs]
    return float(np.mean(accuracies))


def run_experiment(cfg: ExperimentConfig) -> ExperimentResult:
    """
    Execute every (cell, repeat) run and write all outputs.

    Outputs: <out>/<cell>/<repeat>/rounds.csv, <out>/<cell>/summary.json,
    <out>/report.json and <out>/config.echo. A failed run aborts its cell; the
    failure is recorded in the report and the other cells continue.

    Returns:
        ExperimentResult; exit_code is that of the first failed cell, or 0.

    Raises:
        OutputError: If the outputs cannot be written.
    """
    out = Path(cfg.output_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.echo").write_text(dump_config(cfg), encoding="utf-8")
    except OSError as e:
        raise OutputError(f"Cannot write to output directory {out}: {e}") from e

    cells = build_cells(cfg)
    tasks = []
    for cell in cells:
        server_cfg = replace(cfg.run.server_cfg, schedule=cell.schedule)
        for repeat in range(cfg.repeats):
            tasks.append((cell.name, repeat, replace(cfg.run, server_cfg=server_cfg, repeat=repeat)))
    logger.info(f"Running {len(tasks)} runs over {len(cells)} cell(s) with {cfg.jobs} job(s)")

    outcomes = _run_all(tasks, cfg.jobs)

    cell_runs: Dict[str, List[RunRecord]] = {}
    failures: Dict[str, RunOutcome] = {}
    for cell in cells:
        runs = []
        for repeat in range(cfg.repeats):
            outcome = outcomes[(cell.name, repeat)]
            if outcome.record is None:
                failures.setdefault(cell.name, outcome)
                continue
            emit_round_csv(outcome.record, out / cell.name / str(repeat) / "rounds.csv")
            runs.append(outcome.record)
        if cell.name not in failures:
            cell_runs[cell.name] = runs

    baseline_runs = cell_runs.get(BASELINE_CELL)
    target = _derive_target(cfg, baseline_runs)

    summaries = []
    exit_code = EXIT_OK
    for cell in cells:
        if cell.name in failures:
            failure = failures[cell.name]
            summary = {
                "cell": cell.name,
                "status": "failed",
                "schedule": cell.schedule.kind.value,
                "amplitude": cell.schedule.amplitude,
                "frequency": cell.schedule.frequency,
                "repeat": failure.repeat,
                "exit_code": failure.exit_code,
                "error": failure.error,
            }
            if exit_code == EXIT_OK:
                exit_code = failure.exit_code
        else:
            paired = baseline_runs if not cell.is_baseline else None
            summary = summarize_cell(cell, cell_runs[cell.name], target, paired)
        _write_json(out / cell.name / "summary.json", summary)
        summaries.append(summary)

    report: Dict[str, Any] = {
        "target_accuracy": target,
        "repeats": cfg.repeats,
        "cells": summaries,
        "exit_code": exit_code,
    }
    if cfg.baseline:
        report["baseline"] = next((s for s in summaries if s["cell"] == BASELINE_CELL), None)
    best = select_best_cell(summaries)
    if best is not None:
        report["best_cell"] = best
        logger.info(
            f"Best cell {best['cell']}: median rounds-to-target {best['median_rounds_to_target']}, "
            f"mean max accuracy {best['mean_max_accuracy']:.4f}"
        )
    _write_json(out / "report.json", report)

    if cfg.emit_plot_script:
        try:
            (out / "plot_rounds.py").write_text(PLOT_SCRIPT, encoding="utf-8")
        except OSError as e:
            raise OutputError(f"Cannot write plot script: {e}") from e

    logger.info(f"Experiment finished with exit code {exit_code}; outputs in {out}")
    return ExperimentResult(exit_code=exit_code, report=report, output_dir=out)
