"""Client manager and execution engines.

The timeslice engine runs every participant on one thread against a virtual
clock measured in integer slices. Ready entries are ordered by
(activation time, participant id): the server (id 0) goes before clients at
equal times, clients in ascending id.
"""

from __future__ import annotations

import heapq
import itertools
import logging
import threading
from typing import Callable

from . import codec
from .codec import FrameKind
from .mq import SERVER_ID, Broker, EndpointClosed, Envelope, Kind
from .tasks import BLOCKED, Done, ResumableTask, Yield, run_blocking

log = logging.getLogger(__name__)

_CALLBACK = -1


class EngineError(RuntimeError):
    pass


class TimesliceEngine:
    def __init__(self, events=None, max_activations: int = 2_000_000, quiescence_pid: int = SERVER_ID):
        self.clock = 0
        self.events = events
        self.max_activations = max_activations
        self.quiescence_pid = quiescence_pid
        self.tasks: dict[int, ResumableTask] = {}
        self.trace: list[tuple[int, int, Yield | Done]] = []
        self.activations = 0
        self.stranded: list[int] = []
        self._heap: list[tuple] = []
        self._seq = itertools.count()
        self._tokens = itertools.count(1)
        self._parked: dict[int, int] = {}
        self._callbacks: dict[int, Callable[[], None]] = {}

    def now(self) -> int:
        return self.clock

    def add_task(self, pid: int, task: ResumableTask, at: int = 0) -> None:
        if pid in self.tasks:
            raise EngineError(f"participant {pid} already has a task")
        self.tasks[pid] = task
        heapq.heappush(self._heap, (max(at, self.clock), pid, next(self._seq), 0))

    def call_at(self, time: int, fn: Callable[[], None]) -> None:
        """Run ``fn`` at virtual ``time``, before any activation at that time."""
        seq = next(self._seq)
        self._callbacks[seq] = fn
        heapq.heappush(self._heap, (max(time, self.clock), _CALLBACK, seq, 0))

    def _wake(self, pid: int) -> None:
        if self._parked.pop(pid, None) is not None:
            heapq.heappush(self._heap, (self.clock, pid, next(self._seq), 0))

    def _park(self, pid: int, task: ResumableTask) -> None:
        token = next(self._tokens)
        self._parked[pid] = token
        endpoint = task.waiting_on
        endpoint.on_message = lambda _ep, pid=pid: self._wake(pid)
        timeout = task.pending.timeout
        if timeout is not None:
            heapq.heappush(self._heap, (self.clock + int(timeout), pid, next(self._seq), token))

    def run(self) -> None:
        while True:
            if not self._heap:
                if not self._parked:
                    return
                if self.quiescence_pid not in self._parked:
                    # nothing can ever wake these tasks again
                    self.stranded = sorted(self._parked)
                    log.warning("engine stopped with blocked participants %s", self.stranded)
                    return
                token = self._parked[self.quiescence_pid]
                heapq.heappush(self._heap, (self.clock, self.quiescence_pid, next(self._seq), token))
            t = self._heap[0][0]
            batch = []
            while self._heap and self._heap[0][0] == t:
                batch.append(heapq.heappop(self._heap))
            self.clock = t
            for _, pid, seq, token in batch:
                if pid == _CALLBACK:
                    self._callbacks.pop(seq)()
                    continue
                timed_out = False
                if token:
                    if self._parked.get(pid) != token:
                        continue  # woken by a message before its deadline
                    del self._parked[pid]
                    timed_out = True
                self._activate(pid, timed_out)

    def _activate(self, pid: int, timed_out: bool) -> None:
        task = self.tasks[pid]
        if task.finished:
            return
        self.activations += 1
        if self.activations > self.max_activations:
            raise EngineError(f"exceeded {self.max_activations} activations; participant {pid} never settles")
        result = task.activate(timed_out=timed_out)
        self.trace.append((self.clock, pid, result))
        if self.events is not None:
            if isinstance(result, Done):
                metrics = {"done": 1}
            elif result.duration == BLOCKED:
                metrics = {"blocked": 1}
            else:
                metrics = {"duration": result.duration}
            self.events.emit("activation", virtual_time=self.clock, client_id=pid, metrics=metrics)
        if isinstance(result, Done):
            return
        if result.duration == BLOCKED:
            self._park(pid, task)
        else:
            heapq.heappush(self._heap, (self.clock + result.duration, pid, next(self._seq), 0))


def run_sequential(tasks: dict[int, ResumableTask], engine: TimesliceEngine | None = None) -> TimesliceEngine:
    engine = engine or TimesliceEngine()
    for pid in sorted(tasks):
        engine.add_task(pid, tasks[pid])
    engine.run()
    return engine


class UnknownClient(KeyError):
    pass


class ClientManager:
    """Roster of clients with lifecycle state created -> running -> stopped."""

    def __init__(self, broker: Broker | None = None, events=None, role: str = "main"):
        self.broker = broker
        self.events = events
        self.role = role
        self.roster: dict[int, str] = {}
        self.node_of: dict[int, int] = {}
        self._lock = threading.Lock()

    def add(self, cid: int, node: int | None = None) -> None:
        with self._lock:
            self.roster[cid] = "created"
            if node is not None:
                self.node_of[cid] = node

    def mark_running(self, cid: int) -> None:
        with self._lock:
            self.roster[cid] = "running"

    def live_ids(self) -> list[int]:
        with self._lock:
            return sorted(c for c, s in self.roster.items() if s == "running")

    def clients_on(self, node: int) -> list[int]:
        return sorted(c for c, n in self.node_of.items() if n == node)

    def stop_client(self, cid: int) -> bool:
        """Send the client a Shutdown; returns False if it was already stopped."""
        with self._lock:
            if cid not in self.roster:
                raise UnknownClient(cid)
            if self.roster[cid] == "stopped":
                log.warning("client %s is already stopped", cid)
                if self.events is not None:
                    self.events.emit("warning", client_id=cid, message="stop requested for a stopped client")
                return False
            self.roster[cid] = "stopped"
        if self.broker is not None and not self.broker.is_shutdown:
            shutdown = codec.encode_payload(FrameKind.SHUTDOWN, {"sender": SERVER_ID, "targets": [cid]})
            self.broker.publish("control", Envelope("control", SERVER_ID, Kind.SHUTDOWN, shutdown))
            notice = codec.encode_payload(
                FrameKind.CONTROL, {"sender": SERVER_ID, "action": "client_stopped", "client_id": cid}
            )
            self.broker.publish("control", Envelope("control", SERVER_ID, Kind.CONTROL, notice))
        if self.events is not None:
            self.events.emit("client_stop", client_id=cid)
        return True

    def finished(self, cid: int) -> None:
        with self._lock:
            if cid in self.roster:
                self.roster[cid] = "stopped"


class WorkerGroup:
    """Free-running wall-clock workers, one thread per participant."""

    def __init__(self, slice_seconds: float = 0.0):
        self.slice_seconds = slice_seconds
        self.threads: list[threading.Thread] = []
        self.errors: dict[int, BaseException] = {}
        self.results: dict[int, object] = {}

    def spawn(self, pid: int, gen, on_exit: Callable[[int], None] | None = None) -> None:
        def body():
            try:
                self.results[pid] = run_blocking(gen, self.slice_seconds)
            except EndpointClosed:
                pass
            except BaseException as exc:  # reported by join()
                self.errors[pid] = exc
            finally:
                if on_exit is not None:
                    on_exit(pid)

        th = threading.Thread(target=body, name=f"participant-{pid}", daemon=True)
        self.threads.append(th)
        th.start()

    def join(self, timeout: float | None = None) -> list[int]:
        """Join all workers; returns names of those still alive after timeout."""
        alive = []
        for th in self.threads:
            th.join(timeout)
            if th.is_alive():
                alive.append(th.name)
        return alive
