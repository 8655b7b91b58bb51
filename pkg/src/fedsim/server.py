"""Server role: client scheduling, global-model maintenance and aggregation."""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from . import codec
from .codec import FrameKind
from .learn import ModelSpec, ParamVector, UpdateMask, apply_mask, evaluate
from .mq import SERVER_ID, Envelope, Kind
from .rng import PortableRNG
from .tasks import Receive

log = logging.getLogger(__name__)


class AggregationError(RuntimeError):
    pass


class StaleUpdate(AggregationError):
    pass


class AwaitTimeout(RuntimeError):
    """The server gave up waiting for updates; ``missing`` names the clients."""

    def __init__(self, message: str, missing: Iterable[int] = ()):
        self.missing = sorted(missing)
        super().__init__(f"{message}; missing clients: {self.missing}")


class TransportLost(AwaitTimeout):
    """A node connection dropped while its clients' updates were awaited."""


class ClientFailed(RuntimeError):
    pass


@dataclass(frozen=True)
class GlobalModel:
    version: int
    params: ParamVector


@dataclass(frozen=True)
class UpdateRecord:
    client_id: int
    base_version: int
    params: ParamVector
    n_samples: int
    tau: int = 1
    recv_time: int = 0
    metrics: dict = field(default_factory=dict, compare=False)

    def sort_key(self):
        return (self.client_id, self.base_version, self.n_samples, self.tau, self.params.values.tobytes())


def _sorted(updates: Sequence[UpdateRecord]) -> list[UpdateRecord]:
    return sorted(updates, key=UpdateRecord.sort_key)


def _weights(updates: Sequence[UpdateRecord]) -> list[float]:
    total = sum(u.n_samples for u in updates)
    return [u.n_samples / total for u in updates]


def weighted_mean(updates: Sequence[UpdateRecord]) -> np.ndarray:
    """Sample-weighted mean of (already sorted) update params.

    Written as ``first + sum(w_i * (p_i - first))`` so a single update, or k
    copies of one update, reproduce its params bit for bit.
    """
    anchor = updates[0].params.values
    out = anchor.copy()
    for w, u in zip(_weights(updates), updates):
        if u is updates[0]:
            continue
        out = out + w * (u.params.values - anchor)
    return out


# -- schedulers ----------------------------------------------------------------


def _pick_count(fraction: float, pool_size: int) -> int:
    return max(1, min(pool_size, math.ceil(fraction * pool_size - 1e-12)))


class RandomScheduler:
    def __init__(self, fraction: float = 1.0, seed: int = 0):
        if not 0 < fraction <= 1:
            raise ValueError("fraction must be in (0, 1]")
        self.fraction = fraction
        self.seed = seed

    def select(self, round_: int, pool: Sequence[int]) -> list[int]:
        pool = sorted(pool)
        if not pool:
            raise ValueError("client pool is empty")
        m = _pick_count(self.fraction, len(pool))
        if m == len(pool):
            return pool
        perm = PortableRNG(self.seed, round_).permutation(len(pool))
        return sorted(pool[i] for i in perm[:m])


class RoundRobinScheduler:
    def __init__(self, fraction: float = 1.0):
        if not 0 < fraction <= 1:
            raise ValueError("fraction must be in (0, 1]")
        self.fraction = fraction
        self.cursor: int | None = None  # last id handed out

    def select(self, round_: int, pool: Sequence[int]) -> list[int]:
        pool = sorted(pool)
        if not pool:
            raise ValueError("client pool is empty")
        m = _pick_count(self.fraction, len(pool))
        start = 0 if self.cursor is None else next((i for i, c in enumerate(pool) if c > self.cursor), 0)
        chosen = [pool[(start + j) % len(pool)] for j in range(m)]
        self.cursor = chosen[-1]
        return sorted(chosen)


def select_clients(scheduler, round_: int, pool: Sequence[int]) -> list[int]:
    return scheduler.select(round_, pool)


# -- aggregators -----------------------------------------------------------------


class SyncAggregator:
    mode = "sync"

    def aggregate(self, global_model: GlobalModel, updates: Sequence[UpdateRecord]) -> GlobalModel:
        if not updates:
            raise AggregationError("no updates to aggregate")
        for u in updates:
            if u.base_version != global_model.version:
                raise StaleUpdate(
                    f"client {u.client_id} trained on version {u.base_version}, global is {global_model.version}"
                )
        values = self._combine(global_model, _sorted(updates))
        return GlobalModel(global_model.version + 1, global_model.params.with_values(values))

    def _combine(self, global_model: GlobalModel, updates: list[UpdateRecord]) -> np.ndarray:
        raise NotImplementedError


class FedAvg(SyncAggregator):
    def _combine(self, global_model, updates):
        return weighted_mean(updates)


class FedNova(SyncAggregator):
    def _combine(self, global_model, updates):
        g = global_model.params.values
        weights = _weights(updates)
        tau_eff = math.fsum(w * u.tau for w, u in zip(weights, updates))
        direction = np.zeros_like(g)
        for w, u in zip(weights, updates):
            direction = direction + w * ((g - u.params.values) / max(u.tau, 1))
        return g - tau_eff * direction


class FedAdam(SyncAggregator):
    def __init__(self, beta1: float = 0.9, beta2: float = 0.99, eta_server: float = 0.01, tau_adapt: float = 1e-3):
        self.beta1, self.beta2 = beta1, beta2
        self.eta_server, self.tau_adapt = eta_server, tau_adapt
        self.m: np.ndarray | None = None
        self.v: np.ndarray | None = None

    def _combine(self, global_model, updates):
        g = global_model.params.values
        delta = np.zeros_like(g)
        for w, u in zip(_weights(updates), updates):
            delta = delta + w * (u.params.values - g)
        if self.m is None:
            self.m = np.zeros_like(g)
            self.v = np.zeros_like(g)
        self.m = self.beta1 * self.m + (1 - self.beta1) * delta
        self.v = self.beta2 * self.v + (1 - self.beta2) * delta * delta
        return g + self.eta_server * self.m / (np.sqrt(self.v) + self.tau_adapt)


class PFedMeServer(SyncAggregator):
    def __init__(self, beta: float = 1.0):
        if not 0 < beta <= 1:
            raise ValueError("beta must be in (0, 1]")
        self.beta = beta

    def _combine(self, global_model, updates):
        g = global_model.params.values
        return (1 - self.beta) * g + self.beta * weighted_mean(updates)


class FedAsync:
    mode = "async"

    def __init__(self, alpha: float = 0.6, a: float = 0.5):
        if not 0 < alpha <= 1:
            raise ValueError("alpha must be in (0, 1]")
        if a < 0:
            raise ValueError("staleness exponent must be non-negative")
        self.alpha, self.a = alpha, a

    def mixing(self, staleness: int) -> float:
        return self.alpha * (staleness + 1) ** (-self.a)

    def merge(self, global_model: GlobalModel, update: UpdateRecord) -> GlobalModel:
        staleness = global_model.version - update.base_version
        if staleness < 0:
            raise AggregationError(f"update from the future (base {update.base_version} > {global_model.version})")
        mix = self.mixing(staleness)
        values = (1 - mix) * global_model.params.values + mix * update.params.values
        return GlobalModel(global_model.version + 1, global_model.params.with_values(values))


class Buffered:
    """Semi-asynchronous: aggregate every ``k`` arrivals (FedVC-style)."""

    mode = "buffered"

    def __init__(self, k: int = 3):
        if k < 1:
            raise ValueError("k must be positive")
        self.k = k
        self.buffer: list[UpdateRecord] = []

    def admit(self, update: UpdateRecord) -> list[UpdateRecord] | None:
        flushed, self.buffer = buffered_admit(self.k, self.buffer, update)
        return flushed

    def aggregate(self, global_model: GlobalModel, flushed: Sequence[UpdateRecord]) -> GlobalModel:
        # stale deltas are mixed by sample weight with the current global as base
        values = weighted_mean(_sorted(flushed))
        return GlobalModel(global_model.version + 1, global_model.params.with_values(values))


def buffered_admit(k: int, buffer: Sequence[UpdateRecord], update: UpdateRecord):
    """Returns (flushed records or None, new buffer)."""
    if len(buffer) >= k:
        raise AggregationError("buffer already holds k updates")
    buffer = [*buffer, update]
    if len(buffer) == k:
        return _sorted(buffer), []
    return None, buffer


def aggregate_sync(aggregator: SyncAggregator, global_model: GlobalModel, updates) -> GlobalModel:
    return aggregator.aggregate(global_model, updates)


def merge_async(aggregator: FedAsync, global_model: GlobalModel, update: UpdateRecord) -> GlobalModel:
    return aggregator.merge(global_model, update)


# -- server task -------------------------------------------------------------------


def global_payload(model: GlobalModel, round_: int, targets: Sequence[int]) -> bytes:
    return codec.encode_payload(
        FrameKind.GLOBAL_MODEL,
        {
            "sender": SERVER_ID,
            "version": model.version,
            "round": round_,
            "targets": sorted(targets),
            "params_b64": codec.params_to_b64(model.params),
        },
    )


@dataclass
class RoundLogEntry:
    version: int
    virtual_time: int | None
    wall_time: float
    participants: list[int]
    accuracy: float
    mean_loss: float


class Server:
    """The server participant (id 0), written as a resumable task.

    ``live_pool`` returns the ids of running clients; the server waits for a
    Register from each before the first round.
    """

    def __init__(
        self,
        *,
        endpoint,
        publish: Callable[[str, Envelope], object],
        spec: ModelSpec,
        initial: ParamVector,
        aggregator,
        scheduler,
        rounds: int,
        test_data: tuple[np.ndarray, np.ndarray],
        live_pool: Callable[[], list[int]],
        clock: Callable[[], int],
        events=None,
        target_accuracy: float | None = None,
        await_timeout: float | None = None,
        virtual: bool = True,
    ):
        self.endpoint = endpoint
        self.publish = publish
        self.spec = spec
        self.model = GlobalModel(0, initial)
        self.aggregator = aggregator
        self.scheduler = scheduler
        self.rounds = rounds
        self.test_x, self.test_y = test_data
        self.live_pool = live_pool
        self.clock = clock
        self.events = events
        self.target_accuracy = target_accuracy
        self.await_timeout = await_timeout
        self.virtual = virtual
        self.round_log: list[RoundLogEntry] = []
        self.round_hooks: list[Callable[[int, "Server"], None]] = []
        self.registered: set[int] = set()
        self.started = False
        self.last_evaluation = None
        self._node_clients: dict[int, list[int]] = {}

    # -- messaging helpers
    def _emit(self, event, **kw):
        if self.events is not None:
            self.events.emit(event, **kw)

    def _send_global(self, round_: int, targets: Sequence[int]) -> None:
        self.publish("global", Envelope("global", SERVER_ID, Kind.GLOBAL_MODEL, global_payload(self.model, round_, targets)))

    def _shutdown_clients(self) -> None:
        self.publish("control", Envelope("control", SERVER_ID, Kind.SHUTDOWN, b""))

    def _record_from(self, env: Envelope) -> UpdateRecord:
        fields = codec.decode_payload(FrameKind.UPDATE, env.payload)
        params = codec.b64_to_params(fields["params_b64"])
        if "mask" in fields:
            start, stop = fields["mask"]
            # the partial payload carries only [start, stop); embed it in the current global
            base = self.model.params
            if len(params) != stop - start:
                raise AggregationError("partial upload length does not match its mask")
            full = base.values.copy()
            full[start:stop] = params.values
            params = apply_mask(base.with_values(full), base, UpdateMask(start, stop))
        return UpdateRecord(
            client_id=fields["client_id"],
            base_version=fields["base_version"],
            params=params,
            n_samples=fields["n_samples"],
            tau=fields["tau"],
            recv_time=self.clock(),
            metrics=fields.get("metrics", {}),
        )

    def _handle_side_message(self, env: Envelope, awaited: set[int], round_: int) -> None:
        """Registrations and control traffic arriving while updates are awaited."""
        if env.kind == Kind.REGISTER:
            cid = codec.decode_payload(FrameKind.REGISTER, env.payload)["client_id"]
            self.registered.add(cid)
            if self.started:
                self._send_global(round_, [])
            return
        if env.kind != Kind.CONTROL:
            return
        fields = codec.decode_payload(FrameKind.CONTROL, env.payload)
        action = fields["action"]
        if action == "client_failed":
            raise ClientFailed(f"client {fields.get('client_id')} failed: {fields.get('error', 'unknown error')}")
        if action == "client_stopped" and fields.get("client_id") in awaited:
            raise AwaitTimeout(f"client {fields['client_id']} stopped while its update was awaited", awaited)
        if action == "transport_down":
            lost = set(fields.get("clients", [])) & awaited
            if lost:
                raise TransportLost(f"transport to node {fields.get('node_id')} went down", lost)

    def _receive(self, awaited: set[int], what: str):
        env = yield Receive(self.endpoint, self.await_timeout)
        if env is None:
            raise AwaitTimeout(f"timed out awaiting {what}", awaited)
        return env

    def _await_registrations(self):
        while True:
            pending = set(self.live_pool()) - self.registered
            if not pending:
                return
            env = yield from self._receive(pending, "client registrations")
            self._handle_side_message(env, set(), 0)

    # -- evaluation/logging
    def _evaluate(self, participants: Sequence[int], extra: dict | None = None) -> float:
        result = evaluate(self.spec, self.model.params, self.test_x, self.test_y)
        self.last_evaluation = result
        vt = self.clock() if self.virtual else None
        self._emit("aggregate", version=self.model.version, participants=sorted(participants), virtual_time=vt)
        metrics = {"accuracy": result.accuracy, "mean_loss": result.mean_loss}
        for c, acc in enumerate(result.per_class_accuracy):
            metrics[f"class_{c}_accuracy"] = acc
        metrics.update(extra or {})
        self._emit("evaluate", version=self.model.version, virtual_time=vt, metrics=metrics)
        self.round_log.append(
            RoundLogEntry(self.model.version, vt, time.time(), sorted(participants), result.accuracy, result.mean_loss)
        )
        return result.accuracy

    def _target_reached(self, accuracy: float) -> bool:
        return self.target_accuracy is not None and accuracy >= self.target_accuracy

    # -- main loops
    def run(self):
        yield from self._await_registrations()
        self.started = True
        try:
            if self.aggregator.mode == "sync":
                yield from self._run_sync()
            else:
                yield from self._run_async()
        finally:
            self._shutdown_clients()
        return self.model

    def _run_sync(self):
        for round_ in range(self.rounds):
            pool = sorted(self.live_pool())
            if not pool:
                raise AwaitTimeout("no live clients left to select", [])
            selected = self.scheduler.select(round_, pool)
            self._send_global(round_, selected)
            awaited = set(selected)
            updates: list[UpdateRecord] = []
            while awaited:
                env = yield from self._receive(awaited, f"round {round_} updates")
                if env.kind == Kind.UPDATE:
                    rec = self._record_from(env)
                    if rec.client_id not in awaited:
                        log.warning("ignoring unexpected update from client %s", rec.client_id)
                        continue
                    awaited.discard(rec.client_id)
                    updates.append(rec)
                else:
                    self._handle_side_message(env, awaited, round_)
            self.model = self.aggregator.aggregate(self.model, updates)
            extra = {}
            personal = [u.metrics["personal_accuracy"] for u in updates if "personal_accuracy" in u.metrics]
            if personal:
                extra["avg_client_accuracy"] = math.fsum(personal) / len(personal)
            accuracy = self._evaluate([u.client_id for u in updates], extra)
            for hook in self.round_hooks:
                hook(round_, self)
            if self._target_reached(accuracy):
                break

    def _run_async(self):
        in_flight = set(self.live_pool())
        self._send_global(0, sorted(in_flight))
        while self.model.version < self.rounds:
            if not in_flight:
                raise AwaitTimeout("no client is training", [])
            env = yield from self._receive(in_flight, "asynchronous updates")
            if env.kind != Kind.UPDATE:
                if env.kind == Kind.REGISTER:
                    cid = codec.decode_payload(FrameKind.REGISTER, env.payload)["client_id"]
                    self.registered.add(cid)
                    in_flight.add(cid)
                    self._send_global(self.model.version, [cid])
                    continue
                fields = codec.decode_payload(FrameKind.CONTROL, env.payload) if env.kind == Kind.CONTROL else {}
                if fields.get("action") == "client_stopped":
                    in_flight.discard(fields.get("client_id"))
                    continue
                self._handle_side_message(env, in_flight, self.model.version)
                continue
            rec = self._record_from(env)
            in_flight.discard(rec.client_id)
            if self.aggregator.mode == "async":
                self.model = self.aggregator.merge(self.model, rec)
                accuracy = self._evaluate([rec.client_id], {"staleness": self.model.version - 1 - rec.base_version})
            else:
                flushed = self.aggregator.admit(rec)
                accuracy = None
                if flushed is not None:
                    self.model = self.aggregator.aggregate(self.model, flushed)
                    accuracy = self._evaluate([u.client_id for u in flushed])
            if accuracy is not None:
                for hook in self.round_hooks:
                    hook(self.model.version - 1, self)
                if self._target_reached(accuracy):
                    break
            if rec.client_id in self.live_pool() and self.model.version < self.rounds:
                in_flight.add(rec.client_id)
                self._send_global(self.model.version, [rec.client_id])
