"""Experiment configuration: YAML documents to validated, frozen config objects."""

from dataclasses import dataclass, replace
from enum import Enum
from pathlib import Path
from typing import Any, Dict, Mapping, Optional, Tuple, Type, TypeVar

import yaml

from src.client import ClientConfig, ClientError
from src.logger import get_logger
from src.model import Arch, ModelError, ModelSpec
from src.orchestrator import DataKind, DataSource, OrchestratorError, RunConfig
from src.schedule import EvalMode, ScheduleConfig, ScheduleError, ScheduleKind
from src.server import RateApplication, ServerConfig, ServerError, Weighting
from src.strategies import LossStrategy, StrategyKind

logger = get_logger(__name__)

DEFAULT_GRID_AMPLITUDES = (0.1, 0.2, 0.3, 0.4, 0.5)
DEFAULT_GRID_FREQUENCIES = tuple(float(f) for f in range(1, 11))

# None marks a scalar leaf, a dict a nested section
SCHEMA: Dict[str, Any] = {
    "model": {"arch": None, "input_dim": None, "num_classes": None, "hidden_dim": None},
    "data": {
        "kind": None,
        "paths": {"train_images": None, "train_labels": None, "test_images": None, "test_labels": None},
        "num_classes": None,
        "samples_per_class": None,
        "spread": None,
        "skew": {"classes_per_client": None, "max_per_class": None, "strict_disjoint": None},
        "test_fraction": None,
    },
    "federation": {
        "num_clients": None,
        "clients_per_round": None,
        "horizon": None,
        "eval_every": None,
        "client_workers": None,
        "record_wall_time": None,
    },
    "client": {
        "batch_size": None,
        "local_lr": None,
        "strategy": None,
        "strategy_params": {"mu": None, "tau": None, "weight": None, "alpha": None},
        "epoch_range": None,
    },
    "server": {"weighting": None, "rate_application": None},
    "schedule": {
        "kind": None,
        "gamma_fixed": None,
        "amplitude": None,
        "frequency": None,
        "eval_mode": None,
        "fourier_terms": None,
    },
    "experiment": {
        "repeats": None,
        "target_accuracy": None,
        "target_from_baseline_round": None,
        "baseline": None,
        "emit_plot_script": None,
        "output_dir": None,
        "jobs": None,
        "grid": {"amplitudes": None, "frequencies": None},
    },
    "master_seed": None,
}

STRATEGY_PARAM_KEYS = {
    StrategyKind.FEDAVG: set(),
    StrategyKind.FEDPROX: {"mu"},
    StrategyKind.MOON: {"tau", "weight"},
    StrategyKind.FEDRS: {"alpha"},
}


class ConfigError(Exception):
    """Custom exception for configuration errors; names the offending field."""

    def __init__(self, message: str, field: Optional[str] = None, line: Optional[int] = None):
        self.field = field
        self.line = line
        prefix = ""
        if line is not None:
            prefix += f"line {line}: "
        if field is not None:
            prefix += f"{field}: "
        super().__init__(f"{prefix}{message}")


@dataclass(frozen=True)
class GridConfig:
    """Amplitude/frequency grid searched over cyclic schedules."""

    amplitudes: Tuple[float, ...] = DEFAULT_GRID_AMPLITUDES
    frequencies: Tuple[float, ...] = DEFAULT_GRID_FREQUENCIES


@dataclass(frozen=True)
class ExperimentConfig:
    """
    A full experiment: the run template plus repeat, grid and output settings.

    Attributes:
        run: Run template; grid cells replace its schedule.
        repeats: Independent runs per cell (repeat index folded into the seed).
        grid: Optional (amplitude, frequency) grid of cyclic schedules.
        target_accuracy: Target for rounds-to-target.
        target_from_baseline_round: Derive the target from the baseline at this round.
        baseline: Add a fixed-schedule baseline cell.
        emit_plot_script: Write a plotting script next to the outputs.
        output_dir: Root directory of all outputs.
        jobs: Runs executed in parallel.
    """

    run: RunConfig
    repeats: int = 6
    grid: Optional[GridConfig] = None
    target_accuracy: Optional[float] = None
    target_from_baseline_round: Optional[int] = None
    baseline: bool = False
    emit_plot_script: bool = False
    output_dir: str = "results"
    jobs: int = 1


E = TypeVar("E", bound=Enum)


def _check_keys(document: Mapping[str, Any], schema: Mapping[str, Any], prefix: str = "") -> None:
    for key, value in document.items():
        path = f"{prefix}{key}"
        if key not in schema:
            raise ConfigError("unknown key", field=path)
        if isinstance(schema[key], dict):
            if value is None:
                continue
            if not isinstance(value, dict):
                raise ConfigError("expected a mapping", field=path)
            _check_keys(value, schema[key], prefix=f"{path}.")


def _section(document: Mapping[str, Any], name: str) -> Mapping[str, Any]:
    value = document.get(name)
    return value if isinstance(value, dict) else {}


def _int(section: Mapping[str, Any], key: str, path: str, default: Any = None, required: bool = False) -> Any:
    value = section.get(key)
    if value is None:
        if required:
            raise ConfigError("required key is missing", field=path)
        return default
    if isinstance(value, bool) or not isinstance(value, int):
        raise ConfigError(f"expected an integer, got {value!r}", field=path)
    return value


def _float(section: Mapping[str, Any], key: str, path: str, default: Any = None) -> Any:
    value = section.get(key)
    if value is None:
        return default
    if isinstance(value, bool):
        raise ConfigError(f"expected a number, got {value!r}", field=path)
    try:
        return float(value)
    except (TypeError, ValueError):
        raise ConfigError(f"expected a number, got {value!r}", field=path)


def _bool(section: Mapping[str, Any], key: str, path: str, default: bool) -> bool:
    value = section.get(key)
    if value is None:
        return default
    if not isinstance(value, bool):
        raise ConfigError(f"expected true or false, got {value!r}", field=path)
    return value


def _enum(section: Mapping[str, Any], key: str, path: str, enum_type: Type[E], default: E) -> E:
    value = section.get(key)
    if value is None:
        return default
    try:
        return enum_type(str(value).lower())
    except ValueError:
        allowed = ", ".join(member.value for member in enum_type)
        raise ConfigError(f"expected one of {allowed}, got {value!r}", field=path)


def _float_list(section: Mapping[str, Any], key: str, path: str, default: Tuple[float, ...]) -> Tuple[float, ...]:
    value = section.get(key)
    if value is None:
        return default
    if not isinstance(value, list) or not value:
        raise ConfigError("expected a non-empty list", field=path)
    return tuple(_float({"v": v}, "v", path) for v in value)


def _build_schedule(document: Mapping[str, Any], horizon: int) -> ScheduleConfig:
    section = _section(document, "schedule")
    kind = _enum(section, "kind", "schedule.kind", ScheduleKind, ScheduleKind.FIXED)
    gamma_fixed = _float(section, "gamma_fixed", "schedule.gamma_fixed", 1.0)
    amplitude = _float(section, "amplitude", "schedule.amplitude", 0.0)
    frequency = _float(section, "frequency", "schedule.frequency", 1.0)
    eval_mode = _enum(section, "eval_mode", "schedule.eval_mode", EvalMode, EvalMode.CLOSED_FORM)
    fourier_terms = _int(section, "fourier_terms", "schedule.fourier_terms", 1000)

    if gamma_fixed <= 0:
        raise ConfigError(f"must be positive, got {gamma_fixed}", field="schedule.gamma_fixed")
    if amplitude < 0 or amplitude > gamma_fixed:
        raise ConfigError(
            f"must lie in [0, gamma_fixed={gamma_fixed}], got {amplitude}", field="schedule.amplitude"
        )
    if frequency <= 0:
        raise ConfigError(f"must be positive, got {frequency}", field="schedule.frequency")
    if fourier_terms < 1:
        raise ConfigError(f"must be at least 1, got {fourier_terms}", field="schedule.fourier_terms")
    try:
        return ScheduleConfig(
            kind=kind,
            gamma_fixed=gamma_fixed,
            amplitude=amplitude,
            frequency=frequency,
            horizon=horizon,
            eval_mode=eval_mode,
            fourier_terms=fourier_terms,
        )
    except ScheduleError as e:
        raise ConfigError(str(e), field="schedule") from e


def _build_strategy(client: Mapping[str, Any]) -> LossStrategy:
    kind = _enum(client, "strategy", "client.strategy", StrategyKind, StrategyKind.FEDAVG)
    params = client.get("strategy_params") or {}
    for key in params:
        if key not in STRATEGY_PARAM_KEYS[kind]:
            raise ConfigError(f"not a parameter of strategy {kind.value}", field=f"client.strategy_params.{key}")
    overrides = {
        key: _float(params, key, f"client.strategy_params.{key}") for key in params
    }
    try:
        return LossStrategy(kind=kind, **overrides)
    except ModelError as e:
        raise ConfigError(str(e), field="client.strategy_params") from e


def _build_run(document: Mapping[str, Any]) -> RunConfig:
    model = _section(document, "model")
    federation = _section(document, "federation")
    client = _section(document, "client")
    server = _section(document, "server")
    data = _section(document, "data")
    skew = _section(data, "skew")
    paths = _section(data, "paths")

    horizon = _int(federation, "horizon", "federation.horizon", required=True)
    if horizon < 1:
        raise ConfigError(f"must be at least 1, got {horizon}", field="federation.horizon")

    try:
        spec = ModelSpec(
            arch=_enum(model, "arch", "model.arch", Arch, Arch.SOFTMAX_LINEAR),
            input_dim=_int(model, "input_dim", "model.input_dim", required=True),
            num_classes=_int(model, "num_classes", "model.num_classes", required=True),
            hidden_dim=_int(model, "hidden_dim", "model.hidden_dim"),
        )
    except ModelError as e:
        raise ConfigError(str(e), field="model") from e

    epoch_range = client.get("epoch_range", [1, 5])
    if (
        not isinstance(epoch_range, list)
        or len(epoch_range) != 2
        or not all(isinstance(v, int) and not isinstance(v, bool) for v in epoch_range)
    ):
        raise ConfigError(f"expected [lo, hi] integers, got {epoch_range!r}", field="client.epoch_range")
    try:
        client_cfg = ClientConfig(
            batch_size=_int(client, "batch_size", "client.batch_size", 32),
            local_lr=_float(client, "local_lr", "client.local_lr", 0.05),
            strategy=_build_strategy(client),
            epoch_range=(epoch_range[0], epoch_range[1]),
        )
    except ClientError as e:
        raise ConfigError(str(e), field="client") from e

    try:
        server_cfg = ServerConfig(
            clients_per_round=_int(
                federation, "clients_per_round", "federation.clients_per_round", required=True
            ),
            aggregation_weighting=_enum(
                server, "weighting", "server.weighting", Weighting, Weighting.BY_SAMPLE_COUNT
            ),
            rate_application=_enum(
                server, "rate_application", "server.rate_application", RateApplication, RateApplication.DELTA
            ),
            schedule=_build_schedule(document, horizon),
        )
    except ServerError as e:
        raise ConfigError(str(e), field="federation.clients_per_round") from e

    num_classes = _int(data, "num_classes", "data.num_classes", spec.num_classes)
    try:
        source = DataSource(
            kind=_enum(data, "kind", "data.kind", DataKind, DataKind.BLOBS),
            num_classes=num_classes,
            samples_per_class=_int(data, "samples_per_class", "data.samples_per_class", 100),
            spread=_float(data, "spread", "data.spread", 0.5),
            train_images=paths.get("train_images"),
            train_labels=paths.get("train_labels"),
            test_images=paths.get("test_images"),
            test_labels=paths.get("test_labels"),
            classes_per_client=_int(
                skew, "classes_per_client", "data.skew.classes_per_client", min(4, num_classes)
            ),
            max_per_class=_int(skew, "max_per_class", "data.skew.max_per_class", 100),
            strict_disjoint=_bool(skew, "strict_disjoint", "data.skew.strict_disjoint", False),
            test_fraction=_float(data, "test_fraction", "data.test_fraction", 0.2),
        )
    except OrchestratorError as e:
        raise ConfigError(str(e), field="data.paths") from e
    if source.classes_per_client > num_classes:
        raise ConfigError(
            f"must not exceed data.num_classes ({num_classes})", field="data.skew.classes_per_client"
        )
    if not 0.0 < source.test_fraction < 1.0:
        raise ConfigError(f"must be in (0, 1), got {source.test_fraction}", field="data.test_fraction")

    master_seed = _int(document, "master_seed", "master_seed", 0)
    if master_seed < 0:
        raise ConfigError(f"must be non-negative, got {master_seed}", field="master_seed")

    try:
        return RunConfig(
            model_spec=spec,
            client_cfg=client_cfg,
            server_cfg=server_cfg,
            num_clients=_int(federation, "num_clients", "federation.num_clients", required=True),
            horizon=horizon,
            data=source,
            eval_every=_int(federation, "eval_every", "federation.eval_every", 1),
            master_seed=master_seed,
            client_workers=_int(federation, "client_workers", "federation.client_workers", 1),
            record_wall_time=_bool(federation, "record_wall_time", "federation.record_wall_time", False),
        )
    except OrchestratorError as e:
        raise ConfigError(str(e), field="federation") from e


def _build_experiment(document: Mapping[str, Any], run: RunConfig) -> ExperimentConfig:
    section = _section(document, "experiment")
    repeats = _int(section, "repeats", "experiment.repeats", 6)
    if repeats < 1:
        raise ConfigError(f"must be positive, got {repeats}", field="experiment.repeats")

    grid = None
    if "grid" in section:
        grid_section = _section(section, "grid")
        grid = GridConfig(
            amplitudes=_float_list(grid_section, "amplitudes", "experiment.grid.amplitudes", DEFAULT_GRID_AMPLITUDES),
            frequencies=_float_list(
                grid_section, "frequencies", "experiment.grid.frequencies", DEFAULT_GRID_FREQUENCIES
            ),
        )
        gamma_fixed = run.server_cfg.schedule.gamma_fixed
        for a in grid.amplitudes:
            if not 0.0 < a <= gamma_fixed:
                raise ConfigError(
                    f"amplitude {a} must lie in (0, gamma_fixed={gamma_fixed}]",
                    field="experiment.grid.amplitudes",
                )
        for f in grid.frequencies:
            if f <= 0:
                raise ConfigError(f"frequency {f} must be positive", field="experiment.grid.frequencies")

    target = _float(section, "target_accuracy", "experiment.target_accuracy")
    if target is not None and not 0.0 < target <= 1.0:
        raise ConfigError(f"must be in (0, 1], got {target}", field="experiment.target_accuracy")

    baseline = _bool(section, "baseline", "experiment.baseline", False)
    target_round = _int(section, "target_from_baseline_round", "experiment.target_from_baseline_round")
    if target_round is not None:
        if not baseline:
            raise ConfigError("requires experiment.baseline: true", field="experiment.target_from_baseline_round")
        if target is not None:
            raise ConfigError(
                "cannot be combined with experiment.target_accuracy", field="experiment.target_from_baseline_round"
            )
        if not 0 <= target_round < run.horizon:
            raise ConfigError(
                f"must be in [0, {run.horizon}), got {target_round}", field="experiment.target_from_baseline_round"
            )

    jobs = _int(section, "jobs", "experiment.jobs", 1)
    if jobs < 1:
        raise ConfigError(f"must be positive, got {jobs}", field="experiment.jobs")
    output_dir = section.get("output_dir", "results")
    if not isinstance(output_dir, str) or not output_dir:
        raise ConfigError(f"expected a path string, got {output_dir!r}", field="experiment.output_dir")

    return ExperimentConfig(
        run=run,
        repeats=repeats,
        grid=grid,
        target_accuracy=target,
        target_from_baseline_round=target_round,
        baseline=baseline,
        emit_plot_script=_bool(section, "emit_plot_script", "experiment.emit_plot_script", False),
        output_dir=output_dir,
        jobs=jobs,
    )


def parse_config(text: str) -> ExperimentConfig:
    """
    Parse and validate a YAML experiment document.

    Args:
        text: YAML document in the documented key schema.

    Returns:
        Validated ExperimentConfig with defaults applied.

    Raises:
        ConfigError: On a syntax error (with line), an unknown key, a missing
                     required key or a constraint violation (with field).
    """
    try:
        document = yaml.safe_load(text)
    except yaml.YAMLError as e:
        mark = getattr(e, "problem_mark", None)
        line = mark.line + 1 if mark is not None else None
        problem = getattr(e, "problem", None) or str(e)
        raise ConfigError(f"invalid YAML: {problem}", line=line) from e

    if document is None:
        document = {}
    if not isinstance(document, dict):
        raise ConfigError("top level must be a mapping")

    _check_keys(document, SCHEMA)
    run = _build_run(document)
    cfg = _build_experiment(document, run)
    logger.debug(f"Parsed config: {cfg}")
    return cfg


def load_config(path: str) -> ExperimentConfig:
    """Read and parse a config file. OSError propagates to the caller."""
    logger.info(f"Loading config: {path}")
    return parse_config(Path(path).read_text(encoding="utf-8"))


def config_to_dict(cfg: ExperimentConfig) -> Dict[str, Any]:
    """Canonical document form of a config; every key is explicit."""
    run = cfg.run
    spec = run.model_spec
    client = run.client_cfg
    server = run.server_cfg
    schedule = server.schedule
    data = run.data

    experiment: Dict[str, Any] = {
        "repeats": cfg.repeats,
        "target_accuracy": cfg.target_accuracy,
        "target_from_baseline_round": cfg.target_from_baseline_round,
        "baseline": cfg.baseline,
        "emit_plot_script": cfg.emit_plot_script,
        "output_dir": cfg.output_dir,
        "jobs": cfg.jobs,
    }
    if cfg.grid is not None:
        experiment["grid"] = {
            "amplitudes": list(cfg.grid.amplitudes),
            "frequencies": list(cfg.grid.frequencies),
        }

    return {
        "model": {
            "arch": spec.arch.value,
            "input_dim": spec.input_dim,
            "num_classes": spec.num_classes,
            "hidden_dim": spec.hidden_dim,
        },
        "data": {
            "kind": data.kind.value,
            "paths": {
                "train_images": data.train_images,
                "train_labels": data.train_labels,
                "test_images": data.test_images,
                "test_labels": data.test_labels,
            },
            "num_classes": data.num_classes,
            "samples_per_class": data.samples_per_class,
            "spread": data.spread,
            "skew": {
                "classes_per_client": data.classes_per_client,
                "max_per_class": data.max_per_class,
                "strict_disjoint": data.strict_disjoint,
            },
            "test_fraction": data.test_fraction,
        },
        "federation": {
            "num_clients": run.num_clients,
            "clients_per_round": server.clients_per_round,
            "horizon": run.horizon,
            "eval_every": run.eval_every,
            "client_workers": run.client_workers,
            "record_wall_time": run.record_wall_time,
        },
        "client": {
            "batch_size": client.batch_size,
            "local_lr": client.local_lr,
            "strategy": client.strategy.kind.value,
            "strategy_params": client.strategy.params(),
            "epoch_range": list(client.epoch_range),
        },
        "server": {
            "weighting": server.aggregation_weighting.value,
            "rate_application": server.rate_application.value,
        },
        "schedule": {
            "kind": schedule.kind.value,
            "gamma_fixed": schedule.gamma_fixed,
            "amplitude": schedule.amplitude,
            "frequency": schedule.frequency,
            "eval_mode": schedule.eval_mode.value,
            "fourier_terms": schedule.fourier_terms,
        },
        "experiment": experiment,
        "master_seed": run.master_seed,
    }


def dump_config(cfg: ExperimentConfig) -> str:
    """YAML echo of a config; parse_config(dump_config(cfg)) == cfg."""
    return yaml.safe_dump(config_to_dict(cfg), sort_keys=False, default_flow_style=False)


def apply_overrides(
    cfg: ExperimentConfig,
    seed: Optional[int] = None,
    output_dir: Optional[str] = None,
    jobs: Optional[int] = None,
) -> ExperimentConfig:
    """Apply command-line flags on top of document values."""
    if seed is not None:
        if seed < 0:
            raise ConfigError(f"must be non-negative, got {seed}", field="master_seed")
        cfg = replace(cfg, run=replace(cfg.run, master_seed=seed))
    if output_dir is not None:
        cfg = replace(cfg, output_dir=output_dir)
    if jobs is not None:
        if jobs < 1:
            raise ConfigError(f"must be positive, got {jobs}", field="experiment.jobs")
        cfg = replace(cfg, jobs=jobs)
    return cfg
