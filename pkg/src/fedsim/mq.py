"""Topic-based in-process message queue connecting the server and clients.

Fixed topics: ``global`` (server to clients), ``updates`` (clients to
server, including registrations) and ``control`` (lifecycle traffic).
Subscribers get every message published after they subscribe; there is no
replay. Envelope payloads are the codec bytes defined in :mod:`fedsim.netcomm`.
"""

from __future__ import annotations

import enum
import logging
import threading
import time
from collections import Counter, deque
from dataclasses import dataclass, field, replace
from typing import Callable

log = logging.getLogger(__name__)

TOPICS = ("global", "updates", "control")
SERVER_ID = 0


class Kind(enum.IntEnum):
    REGISTER = 1
    GLOBAL_MODEL = 2
    UPDATE = 3
    CONTROL = 4
    SHUTDOWN = 5


class QueueError(RuntimeError):
    pass


class DeliveryRefused(QueueError):
    pass


class EndpointClosed(QueueError):
    pass


@dataclass(frozen=True)
class Envelope:
    topic: str
    sender: int
    kind: Kind
    payload: bytes = b""
    enqueue_time: int | None = None
    # set on envelopes republished by a remote adapter so they are not forwarded back
    remote: bool = field(default=False, compare=False)


def wall_clock_us() -> int:
    return time.monotonic_ns() // 1000


class Endpoint:
    """A participant's receive side: one FIFO buffer per subscribed topic."""

    def __init__(self, broker: "Broker", participant: int):
        self.broker = broker
        self.participant = participant
        self.buffers: dict[str, deque[Envelope]] = {}
        self.delivered: Counter = Counter()
        self.closed = False
        self.on_message: Callable[["Endpoint"], None] | None = None
        self._cond = threading.Condition()

    @property
    def topics(self) -> list[str]:
        return sorted(self.buffers)

    def pending(self) -> int:
        with self._cond:
            return sum(len(b) for b in self.buffers.values())

    def _push(self, env: Envelope) -> None:
        with self._cond:
            if self.closed:
                return
            buf = self.buffers[env.topic]
            buf.append(env)
            if len(buf) == self.broker.high_water_mark:
                log.warning("participant %s buffer for %r reached %d messages", self.participant, env.topic, len(buf))
            self._cond.notify_all()
        if self.on_message is not None:
            self.on_message(self)

    def _pop_oldest(self) -> Envelope | None:
        best = None
        for topic in sorted(self.buffers):
            buf = self.buffers[topic]
            if buf and (best is None or buf[0].enqueue_time < best[0].enqueue_time):
                best = (buf[0], topic)
        if best is None:
            return None
        env = self.buffers[best[1]].popleft()
        self.delivered[env.topic] += 1
        return env

    def receive(self, timeout: float | None = None) -> Envelope | None:
        """Oldest pending message across topics (ties: topic name ascending).

        Returns None on timeout; raises EndpointClosed once the endpoint is
        closed and drained of nothing more to give.
        """
        deadline = None if timeout is None else time.monotonic() + timeout
        with self._cond:
            while True:
                if self.closed:
                    raise EndpointClosed(f"endpoint of participant {self.participant} is closed")
                env = self._pop_oldest()
                if env is not None:
                    break
                if deadline is None:
                    self._cond.wait()
                    continue
                remaining = deadline - time.monotonic()
                if remaining <= 0:
                    return None
                self._cond.wait(remaining)
        self.broker._note_delivery(self, env)
        return env

    def close(self) -> int:
        """Unsubscribe everywhere; returns the number of discarded messages."""
        with self._cond:
            if self.closed:
                return 0
            discarded = sum(len(b) for b in self.buffers.values())
            self.closed = True
            self._cond.notify_all()
        self.broker._detach(self, discarded)
        return discarded


class Broker:
    def __init__(
        self,
        clock: Callable[[], int] = wall_clock_us,
        events=None,
        high_water_mark: int = 10_000,
        latency: dict[str, int] | None = None,
        scheduler=None,
    ):
        self.clock = clock
        self.events = events
        self.high_water_mark = high_water_mark
        self.latency = dict(latency or {})
        self.scheduler = scheduler
        self.participants: set[int] = set()
        self.endpoints: dict[int, Endpoint] = {}
        self.subscribers: dict[str, list[Endpoint]] = {}
        self.published: Counter = Counter()
        self.dropped_no_subscriber: Counter = Counter()
        self.discarded: Counter = Counter()
        self._is_shutdown = False
        self._lock = threading.RLock()

    def register(self, participant: int) -> None:
        with self._lock:
            self.participants.add(participant)

    def subscribe(self, topic: str, participant: int) -> Endpoint:
        if not topic:
            raise QueueError("topic must be non-empty")
        with self._lock:
            if participant not in self.participants:
                raise QueueError(f"participant {participant} is not registered")
            ep = self.endpoints.get(participant)
            if ep is None or ep.closed:
                ep = self.endpoints[participant] = Endpoint(self, participant)
            if topic in ep.buffers:
                raise QueueError(f"participant {participant} already subscribed to {topic!r}")
            ep.buffers[topic] = deque()
            self.subscribers.setdefault(topic, []).append(ep)
            return ep

    def publish(self, topic: str, env: Envelope) -> bool:
        if not topic:
            raise QueueError("topic must be non-empty")
        with self._lock:
            if self._is_shutdown:
                raise DeliveryRefused("queue has been shut down")
            if env.topic != topic or env.enqueue_time is None:
                env = replace(
                    env,
                    topic=topic,
                    enqueue_time=self.clock() if env.enqueue_time is None else env.enqueue_time,
                )
            self.published[topic] += 1
            targets = [ep for ep in self.subscribers.get(topic, []) if not ep.closed]
            if not targets:
                self.dropped_no_subscriber[topic] += 1
            if self.events is not None:
                self.events.emit("publish", client_id=env.sender, topic=topic, kind=env.kind.name)
        delay = self.latency.get(topic, 0)
        if delay and self.scheduler is not None:
            self.scheduler.call_at(env.enqueue_time + delay, lambda: self._fan_out(targets, env))
        else:
            self._fan_out(targets, env)
        return True

    @staticmethod
    def _fan_out(targets, env) -> None:
        for ep in targets:
            ep._push(env)

    def _note_delivery(self, ep: Endpoint, env: Envelope) -> None:
        if self.events is not None:
            self.events.emit(
                "deliver", client_id=ep.participant, topic=env.topic, kind=env.kind.name, sender=env.sender
            )

    def _detach(self, ep: Endpoint, discarded: int) -> None:
        with self._lock:
            for subs in self.subscribers.values():
                if ep in subs:
                    subs.remove(ep)
            self.discarded[ep.participant] += discarded
        if discarded:
            log.info("discarded %d pending messages of participant %s", discarded, ep.participant)

    def delivered(self, participant: int, topic: str) -> int:
        ep = self.endpoints.get(participant)
        return 0 if ep is None else ep.delivered[topic]

    def shutdown(self) -> None:
        with self._lock:
            self._is_shutdown = True

    @property
    def is_shutdown(self) -> bool:
        return self._is_shutdown
