"""Desk-scale experiment scenarios shared by scripts/ and the acceptance tests."""

from __future__ import annotations

import copy
import logging
import math
import socket
import tempfile
import threading
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .config import config_from_dict
from .experiment import RunHooks, RunResult, run_plan
from .plan import assemble

DESK_DATASET = {"name": "synthetic", "params": {"n_classes": 10, "per_class": 300, "feature_dim": 16, "seed": 1}}


def desk_doc(mode="sequential", seed: int = 42, rounds: int = 20, clients: int = 10, **sections) -> dict:
    """The desk-scale baseline as a config document; ``sections`` are merged in
    one level deep (e.g. ``benchmark={"preload": True}``)."""
    doc = {
        "global": {"seed": seed, "rounds": rounds},
        "server": {"scheduler": {"name": "random", "params": {"fraction": 1.0}}, "aggregator": "fedavg"},
        "client": {
            "trainer": {"name": "sgd", "params": {"lr": 0.1, "local_epochs": 2, "batch_size": 64}},
            "model": "softmax",
        },
        "client_manager": {"mode": mode, "client_count": clients},
        "benchmark": {"dataset": copy.deepcopy(DESK_DATASET), "partition": "iid"},
        "logging": {"normalize_wall_time": True},
    }
    for section, values in sections.items():
        doc.setdefault(section, {}).update(copy.deepcopy(values))
    return doc


def run_doc(doc: dict, run_dir=None, hooks: RunHooks | None = None) -> RunResult:
    if run_dir is None:
        run_dir = tempfile.mkdtemp(prefix="fedsim-scenario-")
    return run_plan(assemble(config_from_dict(doc)), run_dir, hooks)


# -- loopback sub managers -------------------------------------------------------------


def start_loopback_nodes(count: int, capacity: int = 1024) -> list[int]:
    """Start ``count`` single-session sub managers on ephemeral loopback ports
    (in-process threads) and return their ports."""
    from .netcomm import ProtocolError, serve_node

    def serve(*args):
        try:
            serve_node(*args)
        except (ProtocolError, ConnectionError) as exc:
            logging.getLogger(__name__).warning("loopback node session ended: %s", exc)

    ports = []
    for _ in range(count):
        ready = threading.Event()
        box: list[int] = []

        def on_ready(port, box=box, ready=ready):
            box.append(port)
            ready.set()

        threading.Thread(
            target=serve, args=("127.0.0.1", 0, True, capacity, on_ready), daemon=True, name="loopback-node"
        ).start()
        if not ready.wait(10):
            raise RuntimeError("loopback node did not start")
        ports.append(box[0])
    return ports


def distributed_mode(ports: list[int], counts: list[int]) -> dict:
    return {
        "name": "distributed",
        "params": {"nodes": [{"address": f"127.0.0.1:{p}", "client_count": c} for p, c in zip(ports, counts)]},
    }


# -- criteria --------------------------------------------------------------------------


@dataclass
class ModeResult:
    mode: str
    params: np.ndarray
    accuracy: float
    seconds: float


def mode_equivalence(seed: int = 42, rounds: int = 20, clients: int = 10) -> dict[str, ModeResult]:
    out = {}
    half = clients // 2
    modes = [
        ("sequential", "sequential"),
        ("concurrent", "concurrent"),
        ("multiprocess", {"name": "multiprocess", "params": {"workers_per_process": math.ceil(clients / 3)}}),
        ("distributed", None),
    ]
    for label, mode in modes:
        if mode is None:
            mode = distributed_mode(start_loopback_nodes(2), [half, clients - half])
        started = time.perf_counter()
        result = run_doc(desk_doc(mode, seed=seed, rounds=rounds, clients=clients))
        out[label] = ModeResult(label, result.model.params.values.copy(), result.round_log[-1].accuracy, time.perf_counter() - started)
    return out


def preload_speedup(io_latency_us: int = 1000, rounds: int = 20, clients: int = 10) -> dict[bool, float]:
    times = {}
    for preload in (False, True):
        doc = desk_doc("concurrent", rounds=rounds, clients=clients, benchmark={"preload": preload, "io_latency_us": io_latency_us})
        started = time.perf_counter()
        run_doc(doc)
        times[preload] = time.perf_counter() - started
    return times


HETEROGENEITY_PARTITIONS = {
    "iid": "iid",
    "dirichlet": {"variant": "dirichlet", "beta": 0.5},
    "explicit": {"variant": "explicit", "groups": [{"clients": 10, "classes": 3}]},
}


# the 3/5/7 classes-per-client groups over 30 clients, smaller local batches
GROUPS_3_5_7 = {
    "iid": "iid",
    "dirichlet": {"variant": "dirichlet", "beta": 0.5},
    "explicit": {
        "variant": "explicit",
        "groups": [{"clients": 10, "classes": 3}, {"clients": 10, "classes": 5}, {"clients": 10, "classes": 7}],
    },
}


def heterogeneity(seeds=(1, 2, 3), rounds: int = 30, partitions: dict | None = None, clients: int = 10) -> dict[str, list[float]]:
    """Final accuracy per partition variant and seed (full participation)."""
    partitions = partitions or HETEROGENEITY_PARTITIONS
    extra = {} if clients == 10 else {"server": {"scheduler": {"name": "random", "params": {"fraction": 0.5}}}}
    out: dict[str, list[float]] = {k: [] for k in partitions}
    for seed in seeds:
        for label, part in partitions.items():
            part = copy.deepcopy(part)
            if isinstance(part, dict):
                part["seed"] = seed
            doc = desk_doc(seed=seed, rounds=rounds, clients=clients, benchmark={"partition": part}, **extra)
            if clients != 10:
                doc["client"]["trainer"]["params"]["batch_size"] = 32
            out[label].append(run_doc(doc).round_log[-1].accuracy)
    return out


SPEED_PROFILES = [
    {"count": 10, "speed_factor": 1.0, "base_train_cost": 10},
    {"count": 10, "speed_factor": 0.2, "base_train_cost": 10},
    {"count": 10, "speed_factor": 0.1, "base_train_cost": 10},
]


def slices_to_target(result: RunResult, target: float) -> int | None:
    for entry in result.round_log:
        if entry.accuracy >= target:
            return entry.virtual_time
    return None


def speed_async(target: float = 0.5, seed: int = 42) -> dict[str, int | None]:
    """Virtual slices for sync FedAvg and FedAsync to first reach ``target``."""
    runs = {
        "fedavg": ("fedavg", 60),
        "fedasync": ({"name": "fedasync", "params": {"alpha": 0.6, "a": 0.5}}, 1500),
    }
    out = {}
    for label, (aggregator, budget) in runs.items():
        doc = desk_doc(
            seed=seed,
            rounds=budget,
            clients=30,
            server={"aggregator": aggregator, "target_accuracy": target},
            client={
                "trainer": {"name": "sgd", "params": {"lr": 0.1, "local_epochs": 2, "batch_size": 32}},
                "profiles": SPEED_PROFILES,
            },
        )
        out[label] = slices_to_target(run_doc(doc), target)
    return out


def free_port() -> int:
    with socket.socket() as s:
        s.bind(("127.0.0.1", 0))
        return s.getsockname()[1]


def run_dir_files(run_dir: Path) -> list[str]:
    return sorted(p.name for p in Path(run_dir).iterdir())
