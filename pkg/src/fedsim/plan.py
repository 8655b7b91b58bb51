"""Assembly of a validated config into a wired (but not started) experiment."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .client import ClientProfileSpec
from .config import ConfigError, ExperimentConfig, ModuleRef
from .data import (
    Dataset,
    PartitionResult,
    PartitionSpec,
    PreloadStore,
    build_store,
    class_group_assignments,
    max_samples_per_client,
    partition,
    train_test_split,
)
from .learn import ModelSpec, ParamVector, TrainerConfig, init_params
from .registry import ModeSpec, QueueSpec, Registry, default_registry


class AssemblyError(ConfigError):
    def __init__(self, ref: ModuleRef | None, message: str):
        self.ref = ref
        where = f"{ref.category} module {ref.name!r}: " if ref is not None else ""
        super().__init__(f"{where}{message}")


@dataclass(frozen=True)
class Benchmark:
    dataset: Dataset
    train_indices: np.ndarray
    test_indices: np.ndarray
    partition: PartitionResult
    store: PreloadStore | None
    io_latency_us: int

    @property
    def test_data(self) -> tuple[np.ndarray, np.ndarray]:
        return self.dataset.features[self.test_indices], self.dataset.labels[self.test_indices]


@dataclass(frozen=True)
class ExperimentPlan:
    config: ExperimentConfig
    benchmark: Benchmark
    queue: QueueSpec
    make_scheduler: Callable
    make_aggregator: Callable
    model: ModelSpec
    trainer: TrainerConfig
    initial_params: ParamVector
    mode: ModeSpec
    profiles: tuple[ClientProfileSpec, ...]

    @property
    def seed(self) -> int:
        return self.config.global_.seed


def _build(registry: Registry, ref: ModuleRef, ctx: dict):
    try:
        return registry.build(ref, ctx)
    except AssemblyError:
        raise
    except (ConfigError, ValueError, TypeError, KeyError, OSError) as exc:
        raise AssemblyError(ref, str(exc)) from exc


def partition_spec(config: ExperimentConfig, dataset: Dataset, train_indices: np.ndarray) -> PartitionSpec:
    part = config.benchmark.partition
    n_clients = config.client_manager.client_count
    if part.variant != "explicit":
        return PartitionSpec(part.variant, beta=part.beta, seed=part.seed)
    assignments = part.assignments
    if assignments is None:
        if sum(n for n, _ in part.groups) != n_clients:
            raise ConfigError("benchmark.partition.groups must cover client_manager.client_count clients")
        per_client = part.samples_per_client
        if per_client is None:
            available = np.bincount(dataset.labels[train_indices], minlength=dataset.n_classes).tolist()
            per_client = max_samples_per_client(part.groups, dataset.n_classes, available)
        assignments = class_group_assignments(part.groups, dataset.n_classes, per_client)
    return PartitionSpec("explicit", seed=part.seed, assignments=tuple(tuple(tuple(p) for p in row) for row in assignments))


def assemble(config: ExperimentConfig, registry: Registry | None = None) -> ExperimentPlan:
    """Benchmark, then queue, then server, then client manager."""
    registry = registry or default_registry()
    seed = config.global_.seed
    n_clients = config.client_manager.client_count
    ctx = {"seed": seed, "client_count": n_clients}

    bench_cfg = config.benchmark
    dataset = _build(registry, bench_cfg.dataset, ctx)
    train_idx, test_idx = train_test_split(dataset.n_samples, config.server.test_fraction, seed)
    if len(test_idx) == 0:
        test_idx = train_idx
    try:
        spec = partition_spec(config, dataset, train_idx)
        parts = partition(dataset, spec, n_clients, indices=train_idx, seed=seed)
    except ValueError as exc:
        raise AssemblyError(bench_cfg.dataset, f"partition failed: {exc}") from exc
    store = build_store(dataset) if bench_cfg.preload else None
    benchmark = Benchmark(dataset, train_idx, test_idx, parts, store, bench_cfg.io_latency_us)

    queue = _build(registry, config.queue, ctx)

    make_scheduler = _build(registry, config.server.scheduler, ctx)
    make_aggregator = _build(registry, config.server.aggregator, ctx)
    make_aggregator()  # surface parameter errors during assembly

    model_ctx = {**ctx, "feature_dim": dataset.feature_dim, "n_classes": dataset.n_classes}
    model = _build(registry, config.client.model, model_ctx)
    trainer = _build(registry, config.client.trainer, ctx)
    mode = _build(registry, config.client_manager.mode, ctx)

    groups = config.client.profiles or ()
    flat = [g for g in groups for _ in range(g.count)] if groups else [None] * n_clients
    profiles = []
    for i, group in enumerate(flat):
        try:
            profiles.append(
                ClientProfileSpec(
                    id=i + 1,
                    speed_factor=group.speed_factor if group else 1.0,
                    base_train_cost=group.base_train_cost if group else 1,
                    trainer=trainer,
                    sample_indices=tuple(int(v) for v in parts.clients[i]),
                )
            )
        except ValueError as exc:
            raise AssemblyError(None, f"client profile {i + 1}: {exc}") from exc

    return ExperimentPlan(
        config=config,
        benchmark=benchmark,
        queue=queue,
        make_scheduler=make_scheduler,
        make_aggregator=make_aggregator,
        model=model,
        trainer=trainer,
        initial_params=init_params(model, seed),
        mode=mode,
        profiles=tuple(profiles),
    )
