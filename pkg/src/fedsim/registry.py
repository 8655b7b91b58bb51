"""Module registry: dotted names -> component factories, one namespace tree
per category. Factories take ``(params, ctx)`` where ``ctx`` is a dict of
assembly context (seed, dataset dimensions, client count, ...).
"""

from __future__ import annotations

import difflib
from dataclasses import dataclass
from typing import Any, Callable

from .config import CATEGORIES, ConfigError, ModuleRef

Factory = Callable[[dict, dict], Any]


class RegistryError(ConfigError):
    pass


class Registry:
    def __init__(self):
        self._tree: dict[str, dict] = {c: {} for c in CATEGORIES}

    def register(self, category: str, name: str, factory: Factory) -> None:
        if category not in self._tree:
            raise RegistryError(f"unknown category {category!r}; expected one of {list(CATEGORIES)}")
        *path, leaf = name.split(".")
        node = self._tree[category]
        for seg in path:
            node = node.setdefault(seg, {})
            if not isinstance(node, dict):
                raise RegistryError(f"{category}: {seg!r} in {name!r} is already a module, not a namespace")
        if leaf in node:
            raise RegistryError(f"{category} module {name!r} is already registered")
        node[leaf] = factory

    def names(self, category: str) -> list[str]:
        out = []

        def walk(node, prefix):
            for key, val in node.items():
                full = f"{prefix}{key}"
                if isinstance(val, dict):
                    walk(val, full + ".")
                else:
                    out.append(full)

        walk(self._tree[category], "")
        return sorted(out)

    def resolve(self, ref: ModuleRef) -> Factory:
        if ref.category not in self._tree:
            raise RegistryError(f"unknown category {ref.category!r}; expected one of {list(CATEGORIES)}")
        node: Any = self._tree[ref.category]
        for seg in ref.name.split("."):
            if not isinstance(node, dict) or seg not in node:
                node = None
                break
            node = node[seg]
        if node is None or isinstance(node, dict):
            available = self.names(ref.category)
            near = difflib.get_close_matches(ref.name, available, n=3)
            hint = f"; did you mean {near}?" if near else ""
            raise RegistryError(f"unknown {ref.category} module {ref.name!r}; available: {available}{hint}")
        return node

    def build(self, ref: ModuleRef, ctx: dict | None = None):
        return self.resolve(ref)(dict(ref.params), ctx or {})


# -- built-in modules ----------------------------------------------------------------


@dataclass(frozen=True)
class ModeSpec:
    name: str  # sequential | concurrent | multiprocess | distributed
    workers_per_process: int = 1
    nodes: tuple[tuple[str, int], ...] = ()

    @property
    def wall_clock(self) -> bool:
        return self.name != "sequential"


@dataclass(frozen=True)
class QueueSpec:
    latency: tuple[tuple[str, int], ...] = ()
    high_water_mark: int = 10_000


def _take(params: dict, where: str, **defaults):
    unknown = sorted(set(params) - set(defaults))
    if unknown:
        raise ConfigError(f"{where}: unknown parameter(s) {unknown}; valid: {sorted(defaults)}")
    return {k: params.get(k, v) for k, v in defaults.items()}


def _schedulers(reg: Registry):
    from .server import RandomScheduler, RoundRobinScheduler

    def random_(params, ctx):
        p = _take(params, "scheduler.random", fraction=1.0, seed=None)
        seed = ctx.get("seed", 0) if p["seed"] is None else p["seed"]
        return lambda: RandomScheduler(float(p["fraction"]), int(seed))

    def round_robin(params, ctx):
        p = _take(params, "scheduler.round_robin", fraction=1.0)
        return lambda: RoundRobinScheduler(float(p["fraction"]))

    reg.register("scheduler", "random", random_)
    reg.register("scheduler", "round_robin", round_robin)


def _aggregators(reg: Registry):
    from .server import Buffered, FedAdam, FedAsync, FedAvg, FedNova, PFedMeServer

    def simple(cls, where):
        def factory(params, ctx):
            _take(params, where)
            return cls

        return factory

    def fedadam(params, ctx):
        p = _take(params, "aggregator.fedadam", beta1=0.9, beta2=0.99, eta_server=0.01, tau_adapt=1e-3)
        return lambda: FedAdam(**{k: float(v) for k, v in p.items()})

    def fedasync(params, ctx):
        p = _take(params, "aggregator.fedasync", alpha=0.6, a=0.5)
        FedAsync(float(p["alpha"]), float(p["a"]))  # validate now
        return lambda: FedAsync(float(p["alpha"]), float(p["a"]))

    def buffered(params, ctx):
        p = _take(params, "aggregator.buffered", k=3)
        Buffered(int(p["k"]))
        return lambda: Buffered(int(p["k"]))

    def pfedme(params, ctx):
        p = _take(params, "aggregator.pfedme", beta=1.0)
        PFedMeServer(float(p["beta"]))
        return lambda: PFedMeServer(float(p["beta"]))

    reg.register("aggregator", "fedavg", simple(FedAvg, "aggregator.fedavg"))
    reg.register("aggregator", "fednova", simple(FedNova, "aggregator.fednova"))
    reg.register("aggregator", "fedadam", fedadam)
    reg.register("aggregator", "fedasync", fedasync)
    reg.register("aggregator", "buffered", buffered)
    reg.register("aggregator", "pfedme", pfedme)


def _trainers(reg: Registry):
    from .learn import TrainerConfig

    def make(variant):
        def factory(params, ctx):
            p = _take(
                params,
                f"trainer.{variant}",
                lr=0.01,
                local_epochs=2,
                batch_size=64,
                variant=variant,
                mu=0.0,
                **{"lambda": 15.0},
                inner_steps=5,
                mask_policy="full",
                mask_period=1,
            )
            lam = p.pop("lambda")
            return TrainerConfig(
                lr=float(p["lr"]),
                local_epochs=int(p["local_epochs"]),
                batch_size=int(p["batch_size"]),
                variant=p["variant"],
                mu=float(p["mu"]),
                lam=float(lam),
                inner_steps=int(p["inner_steps"]),
                mask_policy=p["mask_policy"],
                mask_period=int(p["mask_period"]),
            )

        return factory

    reg.register("trainer", "sgd", make("plain"))
    reg.register("trainer", "prox", make("prox"))
    reg.register("trainer", "pfedme", make("pfedme"))


def _models(reg: Registry):
    from .learn import ModelSpec

    def softmax(params, ctx):
        _take(params, "model.softmax")
        return ModelSpec("softmax", ctx["feature_dim"], ctx["n_classes"])

    def mlp(params, ctx):
        p = _take(params, "model.mlp", hidden_dim=32)
        return ModelSpec("mlp", ctx["feature_dim"], ctx["n_classes"], int(p["hidden_dim"]))

    reg.register("model", "softmax", softmax)
    reg.register("model", "mlp", mlp)


def _datasets(reg: Registry):
    from .data import generate_synthetic, read_dataset_file

    def synthetic(params, ctx):
        p = _take(params, "dataset.synthetic", n_classes=10, per_class=300, feature_dim=16, seed=None)
        seed = ctx.get("seed", 0) if p["seed"] is None else p["seed"]
        return generate_synthetic(int(p["n_classes"]), int(p["per_class"]), int(p["feature_dim"]), int(seed))

    def file(params, ctx):
        p = _take(params, "dataset.file", path=None)
        if not p["path"]:
            raise ConfigError("dataset.file needs a path")
        return read_dataset_file(p["path"])

    reg.register("dataset", "synthetic", synthetic)
    reg.register("dataset", "file", file)


def _modes(reg: Registry):
    def simple(name):
        def factory(params, ctx):
            _take(params, f"mode.{name}")
            return ModeSpec(name)

        return factory

    def multiprocess(params, ctx):
        p = _take(params, "mode.multiprocess", workers_per_process=1)
        if int(p["workers_per_process"]) < 1:
            raise ConfigError("mode.multiprocess: workers_per_process must be >= 1")
        return ModeSpec("multiprocess", workers_per_process=int(p["workers_per_process"]))

    def distributed(params, ctx):
        p = _take(params, "mode.distributed", nodes=[])
        nodes = []
        for i, node in enumerate(p["nodes"] or []):
            if not isinstance(node, dict) or set(node) != {"address", "client_count"}:
                raise ConfigError(f"mode.distributed.nodes[{i}]: expected {{address, client_count}}")
            nodes.append((str(node["address"]), int(node["client_count"])))
        if not nodes:
            raise ConfigError("distributed mode requires ≥1 node")
        total = sum(c for _, c in nodes)
        if "client_count" in ctx and total != ctx["client_count"]:
            raise ConfigError(f"distributed node client counts sum to {total}, client_count is {ctx['client_count']}")
        return ModeSpec("distributed", nodes=tuple(nodes))

    reg.register("mode", "sequential", simple("sequential"))
    reg.register("mode", "concurrent", simple("concurrent"))
    reg.register("mode", "multiprocess", multiprocess)
    reg.register("mode", "distributed", distributed)


def _queues(reg: Registry):
    def inprocess(params, ctx):
        p = _take(params, "queue.inprocess", latency={}, high_water_mark=10_000)
        latency = tuple(sorted((str(k), int(v)) for k, v in (p["latency"] or {}).items()))
        return QueueSpec(latency, int(p["high_water_mark"]))

    reg.register("queue", "inprocess", inprocess)


def default_registry() -> Registry:
    reg = Registry()
    for install in (_schedulers, _aggregators, _trainers, _models, _datasets, _modes, _queues):
        install(reg)
    return reg


def resolve(registry: Registry, ref: ModuleRef) -> Factory:
    return registry.resolve(ref)
