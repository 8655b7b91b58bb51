"""Experiment configuration: YAML documents parsed into frozen dataclasses.

Sections: ``global``, ``server``, ``client``, ``client_manager`` (alias
``clientmanager``), ``queue``, ``benchmark``, ``logging``. Missing sections and
keys take defaults; unknown keys are errors. Module references are either a
bare name (``aggregator: fedavg``) or ``{name: ..., params: {...}}``.
"""

from __future__ import annotations

import copy
import dataclasses
import os
from dataclasses import dataclass, field
from typing import Any

import yaml

CATEGORIES = ("scheduler", "aggregator", "trainer", "model", "dataset", "mode", "queue")
SECTIONS = ("global", "server", "client", "client_manager", "queue", "benchmark", "logging")
SECTION_ALIASES = {"clientmanager": "client_manager"}


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ModuleRef:
    category: str
    name: str
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.category not in CATEGORIES:
            raise ConfigError(f"unknown module category {self.category!r}; expected one of {list(CATEGORIES)}")
        if not self.name:
            raise ConfigError(f"{self.category} module name must be non-empty")

    def to_doc(self):
        return {"name": self.name, "params": copy.deepcopy(self.params)} if self.params else self.name


@dataclass(frozen=True)
class GlobalSection:
    seed: int = 0
    rounds: int = 20
    output_dir: str = "runs/default"


@dataclass(frozen=True)
class ServerSection:
    scheduler: ModuleRef = ModuleRef("scheduler", "random", {"fraction": 1.0})
    aggregator: ModuleRef = ModuleRef("aggregator", "fedavg")
    target_accuracy: float | None = None
    await_timeout_s: float = 120.0
    test_fraction: float = 0.1


@dataclass(frozen=True)
class ProfileGroup:
    count: int = 1
    speed_factor: float = 1.0
    base_train_cost: int = 1


@dataclass(frozen=True)
class ClientSection:
    trainer: ModuleRef = ModuleRef("trainer", "sgd")
    model: ModuleRef = ModuleRef("model", "softmax")
    profiles: tuple[ProfileGroup, ...] = ()


@dataclass(frozen=True)
class ClientManagerSection:
    mode: ModuleRef = ModuleRef("mode", "sequential")
    client_count: int = 4
    slice_seconds: float = 0.0


@dataclass(frozen=True)
class PartitionConfig:
    variant: str = "iid"
    beta: float | None = None
    seed: int | None = None
    assignments: tuple | None = None
    groups: tuple | None = None  # ((n_clients, classes_per_client), ...)
    samples_per_client: int | None = None


@dataclass(frozen=True)
class BenchmarkSection:
    dataset: ModuleRef = ModuleRef(
        "dataset", "synthetic", {"n_classes": 10, "per_class": 300, "feature_dim": 16, "seed": 1}
    )
    partition: PartitionConfig = PartitionConfig()
    preload: bool = False
    io_latency_us: int = 0


@dataclass(frozen=True)
class LoggingSection:
    level: str = "info"
    emit_distribution: bool = True
    flush_every: int = 1
    normalize_wall_time: bool = False


@dataclass(frozen=True)
class ExperimentConfig:
    global_: GlobalSection = GlobalSection()
    server: ServerSection = ServerSection()
    client: ClientSection = ClientSection()
    client_manager: ClientManagerSection = ClientManagerSection()
    queue: ModuleRef = ModuleRef("queue", "inprocess")
    benchmark: BenchmarkSection = BenchmarkSection()
    logging: LoggingSection = LoggingSection()

    def replace(self, **changes) -> "ExperimentConfig":
        return dataclasses.replace(self, **changes)

    def module_refs(self) -> list[ModuleRef]:
        return [
            self.server.scheduler,
            self.server.aggregator,
            self.client.trainer,
            self.client.model,
            self.client_manager.mode,
            self.queue,
            self.benchmark.dataset,
        ]


# -- parsing ------------------------------------------------------------------------

_TYPE_NAMES = {int: "int", float: "float", str: "string", bool: "bool", list: "list", dict: "map"}


def _expect(value, types, where: str):
    types = types if isinstance(types, tuple) else (types,)
    if isinstance(value, bool) and bool not in types:
        raise ConfigError(f"{where}: expected {'/'.join(_TYPE_NAMES[t] for t in types)}, found bool")
    if float in types and isinstance(value, int) and not isinstance(value, bool):
        return float(value)
    if not isinstance(value, types):
        raise ConfigError(
            f"{where}: expected {'/'.join(_TYPE_NAMES[t] for t in types)}, found {type(value).__name__}"
        )
    return value


def _check_keys(doc: dict, allowed, where: str):
    if not isinstance(doc, dict):
        raise ConfigError(f"{where}: expected map, found {type(doc).__name__}")
    unknown = sorted(set(doc) - set(allowed))
    if unknown:
        raise ConfigError(f"{where}: unknown key(s) {unknown}; valid keys: {sorted(allowed)}")


def _module_ref(value, category: str, where: str, default: ModuleRef) -> ModuleRef:
    if value is None:
        return default
    if isinstance(value, str):
        return ModuleRef(category, value, {})
    _check_keys(value, ("name", "params"), where)
    if "name" not in value:
        raise ConfigError(f"{where}: module reference needs a name")
    name = _expect(value["name"], str, f"{where}.name")
    params = _expect(value.get("params") or {}, dict, f"{where}.params")
    return ModuleRef(category, name, copy.deepcopy(params))


def _scalar_section(doc, cls, where: str, spec: dict[str, Any]):
    """spec: key -> type tuple, or a callable(value, where) for custom fields."""
    doc = doc or {}
    _check_keys(doc, spec, where)
    kwargs = {}
    for key, conv in spec.items():
        if key not in doc:
            continue
        value = doc[key]
        if callable(conv):
            kwargs[key] = conv(value, f"{where}.{key}")
        else:
            kwargs[key] = _expect(value, conv, f"{where}.{key}")
    return cls(**kwargs)


def _positive(kind):
    def conv(value, where):
        value = _expect(value, kind, where)
        if value < 1:
            raise ConfigError(f"{where}: must be >= 1, found {value}")
        return value

    return conv


def _non_negative(kind):
    def conv(value, where):
        value = _expect(value, kind, where)
        if value < 0:
            raise ConfigError(f"{where}: must be >= 0, found {value}")
        return value

    return conv


def _optional(kind):
    def conv(value, where):
        return None if value is None else _expect(value, kind, where)

    return conv


def _profiles(value, where):
    value = _expect(value, list, where)
    out = []
    for i, item in enumerate(value):
        out.append(
            _scalar_section(
                item,
                ProfileGroup,
                f"{where}[{i}]",
                {"count": _positive(int), "speed_factor": (float,), "base_train_cost": _positive(int)},
            )
        )
    return tuple(out)


def _pairs(value, where):
    value = _expect(value, list, where)
    out = []
    for i, row in enumerate(value):
        row = _expect(row, list, f"{where}[{i}]")
        pairs = []
        for j, pair in enumerate(row):
            pair = _expect(pair, list, f"{where}[{i}][{j}]")
            if len(pair) != 2:
                raise ConfigError(f"{where}[{i}][{j}]: expected [class, count]")
            pairs.append(tuple(_expect(v, int, f"{where}[{i}][{j}]") for v in pair))
        out.append(tuple(pairs))
    return tuple(out)


def _groups(value, where):
    value = _expect(value, list, where)
    out = []
    for i, g in enumerate(value):
        _check_keys(g, ("clients", "classes"), f"{where}[{i}]")
        out.append((_positive(int)(g.get("clients"), f"{where}[{i}].clients"), _positive(int)(g.get("classes"), f"{where}[{i}].classes")))
    return tuple(out)


def _partition(value, where):
    if isinstance(value, str):
        value = {"variant": value}
    part = _scalar_section(
        value,
        PartitionConfig,
        where,
        {
            "variant": (str,),
            "beta": _optional(float),
            "seed": _optional(int),
            "assignments": _pairs,
            "groups": _groups,
            "samples_per_client": _optional(int),
        },
    )
    if part.variant not in ("iid", "dirichlet", "explicit"):
        raise ConfigError(f"{where}.variant: expected iid/dirichlet/explicit, found {part.variant!r}")
    if part.variant == "dirichlet" and (part.beta is None or part.beta <= 0):
        raise ConfigError(f"{where}.beta: dirichlet needs beta > 0")
    if part.variant == "explicit" and part.assignments is None and part.groups is None:
        raise ConfigError(f"{where}: explicit partition needs assignments or groups")
    return part


def _ref(category: str, default: ModuleRef):
    return lambda value, where: _module_ref(value, category, where, default)


def config_from_dict(doc: dict) -> ExperimentConfig:
    if doc is None:
        doc = {}
    if not isinstance(doc, dict):
        raise ConfigError(f"top level: expected map, found {type(doc).__name__}")
    doc = {SECTION_ALIASES.get(k, k): v for k, v in doc.items()}
    unknown = sorted(set(doc) - set(SECTIONS))
    if unknown:
        raise ConfigError(f"unknown section(s) {unknown}; valid sections: {list(SECTIONS)}")
    d = ExperimentConfig()
    glob = _scalar_section(
        doc.get("global"), GlobalSection, "global", {"seed": _non_negative(int), "rounds": _positive(int), "output_dir": (str,)}
    )
    server = _scalar_section(
        doc.get("server"),
        ServerSection,
        "server",
        {
            "scheduler": _ref("scheduler", d.server.scheduler),
            "aggregator": _ref("aggregator", d.server.aggregator),
            "target_accuracy": _optional(float),
            "await_timeout_s": (float,),
            "test_fraction": (float,),
        },
    )
    if not 0 <= server.test_fraction < 1:
        raise ConfigError("server.test_fraction: must be in [0, 1)")
    client = _scalar_section(
        doc.get("client"),
        ClientSection,
        "client",
        {"trainer": _ref("trainer", d.client.trainer), "model": _ref("model", d.client.model), "profiles": _profiles},
    )
    manager = _scalar_section(
        doc.get("client_manager"),
        ClientManagerSection,
        "client_manager",
        {"mode": _ref("mode", d.client_manager.mode), "client_count": _positive(int), "slice_seconds": _non_negative(float)},
    )
    queue = _module_ref(doc.get("queue"), "queue", "queue", d.queue)
    bench = _scalar_section(
        doc.get("benchmark"),
        BenchmarkSection,
        "benchmark",
        {
            "dataset": _ref("dataset", d.benchmark.dataset),
            "partition": _partition,
            "preload": (bool,),
            "io_latency_us": _non_negative(int),
        },
    )
    logging_ = _scalar_section(
        doc.get("logging"),
        LoggingSection,
        "logging",
        {"level": (str,), "emit_distribution": (bool,), "flush_every": _positive(int), "normalize_wall_time": (bool,)},
    )
    if client.profiles and sum(p.count for p in client.profiles) != manager.client_count:
        raise ConfigError(
            f"client.profiles counts sum to {sum(p.count for p in client.profiles)}, "
            f"client_manager.client_count is {manager.client_count}"
        )
    return ExperimentConfig(glob, server, client, manager, queue, bench, logging_)


def parse_config(text: str) -> ExperimentConfig:
    try:
        doc = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        where = f" at line {mark.line + 1}, column {mark.column + 1}" if mark is not None else ""
        raise ConfigError(f"syntax error{where}: {getattr(exc, 'problem', exc)}") from exc
    return config_from_dict(doc)


def load_config(path: str | os.PathLike) -> ExperimentConfig:
    with open(path, encoding="utf-8") as fh:
        return parse_config(fh.read())


def config_to_dict(cfg: ExperimentConfig) -> dict:
    part = cfg.benchmark.partition
    part_doc: dict[str, Any] = {"variant": part.variant}
    for key in ("beta", "seed", "samples_per_client"):
        if getattr(part, key) is not None:
            part_doc[key] = getattr(part, key)
    if part.assignments is not None:
        part_doc["assignments"] = [[list(p) for p in row] for row in part.assignments]
    if part.groups is not None:
        part_doc["groups"] = [{"clients": n, "classes": k} for n, k in part.groups]
    return {
        "global": dataclasses.asdict(cfg.global_),
        "server": {
            "scheduler": cfg.server.scheduler.to_doc(),
            "aggregator": cfg.server.aggregator.to_doc(),
            "target_accuracy": cfg.server.target_accuracy,
            "await_timeout_s": cfg.server.await_timeout_s,
            "test_fraction": cfg.server.test_fraction,
        },
        "client": {
            "trainer": cfg.client.trainer.to_doc(),
            "model": cfg.client.model.to_doc(),
            "profiles": [dataclasses.asdict(p) for p in cfg.client.profiles],
        },
        "client_manager": {
            "mode": cfg.client_manager.mode.to_doc(),
            "client_count": cfg.client_manager.client_count,
            "slice_seconds": cfg.client_manager.slice_seconds,
        },
        "queue": cfg.queue.to_doc(),
        "benchmark": {
            "dataset": cfg.benchmark.dataset.to_doc(),
            "partition": part_doc,
            "preload": cfg.benchmark.preload,
            "io_latency_us": cfg.benchmark.io_latency_us,
        },
        "logging": dataclasses.asdict(cfg.logging),
    }


def serialize_config(cfg: ExperimentConfig) -> str:
    return yaml.safe_dump(config_to_dict(cfg), sort_keys=True, default_flow_style=False)


def apply_env(cfg: ExperimentConfig, environ=None) -> ExperimentConfig:
    environ = os.environ if environ is None else environ
    out = environ.get("FEDSIM_OUTPUT_DIR")
    if out:
        cfg = cfg.replace(global_=dataclasses.replace(cfg.global_, output_dir=out))
    return cfg


def with_overrides(cfg: ExperimentConfig, mode: str | None = None, seed: int | None = None) -> ExperimentConfig:
    if mode is not None:
        params = cfg.client_manager.mode.params if cfg.client_manager.mode.name == mode else {}
        cfg = cfg.replace(client_manager=dataclasses.replace(cfg.client_manager, mode=ModuleRef("mode", mode, params)))
    if seed is not None:
        cfg = cfg.replace(global_=dataclasses.replace(cfg.global_, seed=seed))
    return cfg
