"""Resumable-task contract.

Participants (clients and the server) are written once as generator
functions that yield two kinds of commands:

* ``Delay(slices)`` where virtual time elapses (the delay_simulate cut point);
* ``Receive(endpoint, timeout)`` to take the next message, which evaluates to
  an :class:`~fedsim.mq.Envelope` or ``None`` on timeout.

The timeslice engine drives them through :class:`ResumableTask`; the
wall-clock modes drive the very same generators with :func:`run_blocking`.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Any, Generator

from .mq import Endpoint


@dataclass(frozen=True)
class Delay:
    slices: int


@dataclass(frozen=True)
class Receive:
    endpoint: Endpoint
    # virtual slices under the timeslice engine, seconds under wall-clock drivers
    timeout: float | None = None


BLOCKED = "receive-block"


@dataclass(frozen=True)
class Yield:
    duration: int | str  # slice count, or BLOCKED


@dataclass(frozen=True)
class Done:
    result: Any = None


class TaskContractError(RuntimeError):
    pass


TaskGen = Generator[Any, Any, Any]


class ResumableTask:
    """One activation runs a compute segment up to the next yield point.

    A Receive that can be satisfied immediately does not end the segment.
    """

    def __init__(self, gen: TaskGen, name: str = "task"):
        self._gen = gen
        self.name = name
        self.pending: Delay | Receive | None = None
        self.finished = False
        self.result = None
        self._started = False

    @property
    def waiting_on(self) -> Endpoint | None:
        return self.pending.endpoint if isinstance(self.pending, Receive) else None

    def activate(self, timed_out: bool = False) -> Yield | Done:
        if self.finished:
            raise TaskContractError(f"{self.name} activated after Done")
        send = None
        if isinstance(self.pending, Receive):
            send = self.pending.endpoint.receive(0)
            if send is None and not timed_out:
                return Yield(BLOCKED)
        self.pending = None
        while True:
            try:
                cmd = self._gen.send(send) if self._started else next(self._gen)
            except StopIteration as stop:
                self.finished = True
                self.result = stop.value
                return Done(stop.value)
            self._started = True
            if isinstance(cmd, Delay):
                if cmd.slices < 0:
                    raise TaskContractError(f"{self.name} yielded a negative delay")
                self.pending = cmd
                return Yield(int(cmd.slices))
            if isinstance(cmd, Receive):
                send = cmd.endpoint.receive(0)
                if send is None:
                    self.pending = cmd
                    return Yield(BLOCKED)
                continue
            raise TaskContractError(f"{self.name} yielded unsupported command {cmd!r}")

    def close(self) -> None:
        self._gen.close()


def run_blocking(gen: TaskGen, slice_seconds: float = 0.0):
    """Drive a task generator on the current thread against wall-clock time."""
    send = None
    try:
        cmd = next(gen)
        while True:
            if isinstance(cmd, Delay):
                if cmd.slices and slice_seconds:
                    time.sleep(cmd.slices * slice_seconds)
                send = None
            elif isinstance(cmd, Receive):
                send = cmd.endpoint.receive(cmd.timeout)
            else:
                raise TaskContractError(f"unsupported command {cmd!r}")
            cmd = gen.send(send)
    except StopIteration as stop:
        return stop.value
