"""Running an assembled plan end to end in any execution mode."""

from __future__ import annotations

import logging
import tempfile
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

from .client import ClientWiring, build_resumable, client_task
from .config import serialize_config
from .data import DiskSource, SimulatedDisk, StoreSource, distribution_csv, distribution_matrix, write_dataset_file
from .engine import ClientManager, TimesliceEngine, WorkerGroup
from .learn import ParamVector
from .mq import SERVER_ID, Broker, wall_clock_us
from .obs import EventLog, peak_rss_kb, summarize
from .plan import ExperimentPlan
from .server import GlobalModel, Server
from .tasks import ResumableTask, run_blocking

log = logging.getLogger(__name__)

DATASET_FILE = "dataset.fmds"


class RunAborted(RuntimeError):
    pass


@dataclass
class RunResult:
    model: GlobalModel
    round_log: list
    run_dir: Path
    events: EventLog
    manager: ClientManager
    engine: TimesliceEngine | None = None
    wall_seconds: float = 0.0
    server: Server | None = None
    client_states: dict = field(default_factory=dict)


@dataclass
class RunHooks:
    """Test/scenario hooks: ``on_server`` sees the server before it starts,
    ``on_engine`` the timeslice engine and manager (sequential mode only),
    ``on_remote`` the per-node queue adapters once every handshake is done."""

    on_server: Callable[[Server, ClientManager], None] | None = None
    on_engine: Callable[[TimesliceEngine, ClientManager], None] | None = None
    on_manager: Callable[[ClientManager], None] | None = None
    on_remote: Callable[[list], None] | None = None  # remote queue adapters (multiprocess/distributed)


def make_server(plan: ExperimentPlan, broker: Broker, manager: ClientManager, events, virtual: bool) -> Server:
    broker.register(SERVER_ID)
    endpoint = broker.subscribe("updates", SERVER_ID)
    broker.subscribe("control", SERVER_ID)
    return Server(
        endpoint=endpoint,
        publish=broker.publish,
        spec=plan.model,
        initial=plan.initial_params,
        aggregator=plan.make_aggregator(),
        scheduler=plan.make_scheduler(),
        rounds=plan.config.global_.rounds,
        test_data=plan.benchmark.test_data,
        live_pool=manager.live_ids,
        clock=broker.clock,
        events=events,
        target_accuracy=plan.config.server.target_accuracy,
        await_timeout=None if virtual else plan.config.server.await_timeout_s,
        virtual=virtual,
    )


def client_wiring(broker: Broker, profile, source, spec, seed: int, events) -> ClientWiring:
    broker.register(profile.id)
    endpoint = broker.subscribe("global", profile.id)
    broker.subscribe("control", profile.id)
    return ClientWiring(endpoint=endpoint, publish=broker.publish, spec=spec, data=source, seed=seed, events=events)


class DataAccess:
    """Hands out per-client sample sources: the preload store when enabled,
    otherwise the simulated disk path over the dataset file."""

    def __init__(self, store=None, dataset_path: Path | None = None, io_latency_us: int = 0):
        self.store = store
        self.disk = None if store is not None else SimulatedDisk(dataset_path, io_latency_us)

    def source(self, indices):
        if self.store is not None:
            return StoreSource(self.store.attach(), indices)
        return DiskSource(self.disk, indices)

    def close(self):
        if self.disk is not None:
            self.disk.close()


def prepare_run_dir(plan: ExperimentPlan, run_dir: Path | None) -> Path:
    if run_dir is None:
        run_dir = Path(tempfile.mkdtemp(prefix="fedsim-"))
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "config.echo").write_text(serialize_config(plan.config), encoding="utf-8")
    write_dataset_file(plan.benchmark.dataset, run_dir / DATASET_FILE)
    if plan.config.logging.emit_distribution:
        matrix = distribution_matrix(plan.benchmark.partition, plan.benchmark.dataset)
        (run_dir / "distribution.csv").write_text(distribution_csv(matrix), encoding="utf-8")
    return run_dir


def run_plan(plan: ExperimentPlan, run_dir: str | Path | None = None, hooks: RunHooks | None = None, summary: bool = True) -> RunResult:
    hooks = hooks or RunHooks()
    run_dir = prepare_run_dir(plan, Path(run_dir) if run_dir is not None else None)
    mode = plan.mode.name
    engine = TimesliceEngine() if mode == "sequential" else None
    events = EventLog(
        run_dir / "events.jsonl",
        virtual_clock=engine.now if engine is not None else None,
        flush_every=plan.config.logging.flush_every,
        normalize_wall_time=plan.config.logging.normalize_wall_time,
    )
    if engine is not None:
        engine.events = events
    events.emit("run_start", message=mode)
    started = time.perf_counter()
    try:
        if mode == "sequential":
            result = _run_sequential(plan, run_dir, events, engine, hooks)
        elif mode == "concurrent":
            result = _run_concurrent(plan, run_dir, events, hooks)
        else:
            from .netcomm import run_remote

            result = run_remote(plan, run_dir, events, hooks)
        result.wall_seconds = time.perf_counter() - started
        events.emit(
            "run_end",
            version=result.model.version,
            metrics={"wall_seconds": result.wall_seconds, "peak_rss_kb": peak_rss_kb()},
        )
    finally:
        events.close()
    (run_dir / "checkpoint_final.params").write_bytes(result.model.params.to_bytes())
    if summary:
        summarize(run_dir)
    return result


def _data_access(plan: ExperimentPlan, run_dir: Path) -> DataAccess:
    return DataAccess(plan.benchmark.store, run_dir / DATASET_FILE, plan.benchmark.io_latency_us)


def _start_event(events, profile):
    events.emit(
        "client_start",
        client_id=profile.id,
        metrics={"n_samples": len(profile.sample_indices), "speed_factor": profile.speed_factor},
    )


def _run_sequential(plan, run_dir, events, engine: TimesliceEngine, hooks: RunHooks) -> RunResult:
    broker = Broker(
        clock=engine.now,
        events=events,
        high_water_mark=plan.queue.high_water_mark,
        latency=dict(plan.queue.latency),
        scheduler=engine,
    )
    manager = ClientManager(broker, events)
    access = _data_access(plan, run_dir)
    server = make_server(plan, broker, manager, events, virtual=True)
    states = {}
    for profile in plan.profiles:
        wiring = client_wiring(broker, profile, access.source(profile.sample_indices), plan.model, plan.seed, events)
        task = build_resumable(profile, wiring)
        engine.add_task(profile.id, task)
        manager.add(profile.id)
        manager.mark_running(profile.id)
        _start_event(events, profile)
        states[profile.id] = task
    if hooks.on_server:
        hooks.on_server(server, manager)
    if hooks.on_engine:
        hooks.on_engine(engine, manager)
    engine.add_task(SERVER_ID, ResumableTask(server.run(), name="server"))
    try:
        engine.run()
    finally:
        access.close()
    for pid, task in states.items():
        if task.finished:
            manager.finished(pid)
    return RunResult(
        server.model, server.round_log, run_dir, events, manager, engine, server=server,
        client_states={pid: t.result for pid, t in states.items()},
    )


def _run_concurrent(plan, run_dir, events, hooks: RunHooks) -> RunResult:
    broker = Broker(clock=wall_clock_us, events=events, high_water_mark=plan.queue.high_water_mark)
    manager = ClientManager(broker, events)
    access = _data_access(plan, run_dir)
    server = make_server(plan, broker, manager, events, virtual=False)
    workers = WorkerGroup(plan.config.client_manager.slice_seconds)
    wirings = {}
    for profile in plan.profiles:
        wirings[profile.id] = client_wiring(
            broker, profile, access.source(profile.sample_indices), plan.model, plan.seed, events
        )
        manager.add(profile.id)
    if hooks.on_server:
        hooks.on_server(server, manager)
    for profile in plan.profiles:
        manager.mark_running(profile.id)
        _start_event(events, profile)
        workers.spawn(profile.id, client_task(profile, wirings[profile.id]), on_exit=manager.finished)
    if hooks.on_manager:
        hooks.on_manager(manager)
    try:
        model = run_blocking(server.run())
    except BaseException:
        broker.shutdown()
        for w in wirings.values():
            w.endpoint.close()
        workers.join(5.0)
        access.close()
        raise
    stuck = workers.join(plan.config.server.await_timeout_s)
    access.close()
    if workers.errors:
        pid, exc = sorted(workers.errors.items())[0]
        raise RunAborted(f"participant {pid} crashed: {exc!r}") from exc
    if stuck:
        raise RunAborted(f"workers did not stop after shutdown: {stuck}")
    return RunResult(model, server.round_log, run_dir, events, manager, server=server, client_states=workers.results)


def load_checkpoint(path: str | Path) -> ParamVector:
    return ParamVector.from_bytes(Path(path).read_bytes())
