"""Client role: register, then receive -> train -> upload until shut down.

The pipeline is a task generator (see :mod:`fedsim.tasks`); its yield points
are the ``delay_simulate`` cut and blocked receives, so the same code runs
under the timeslice engine and under wall-clock workers.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Callable

import numpy as np

from . import codec
from .codec import FrameKind
from .learn import (
    ModelSpec,
    ParamVector,
    SampleSource,
    TrainerConfig,
    evaluate,
    local_train,
    mask_for_round,
)
from .mq import Endpoint, Envelope, Kind
from .server import UpdateRecord
from .tasks import Delay, Receive

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class ClientProfileSpec:
    id: int
    speed_factor: float = 1.0
    base_train_cost: int = 1
    trainer: TrainerConfig = field(default_factory=TrainerConfig)
    sample_indices: tuple[int, ...] = ()

    def __post_init__(self):
        if self.id < 1:
            raise ValueError("client ids start at 1")
        if not 0 < self.speed_factor <= 1:
            raise ValueError(f"speed_factor must be in (0, 1], got {self.speed_factor}")
        if self.base_train_cost < 1:
            raise ValueError("base_train_cost must be positive")


def delay_simulate(cost: int, profile: ClientProfileSpec) -> int:
    """Virtual slices a computation of ``cost`` takes on this client."""
    if cost < 0:
        raise ValueError("cost must be non-negative")
    # exact decimal arithmetic: 3 / 0.1 must be 30, not 31
    return math.ceil(Fraction(cost) / Fraction(repr(float(profile.speed_factor))))


@dataclass
class ClientState:
    params: ParamVector | None = None
    personal: ParamVector | None = None
    last_version: int = -1
    participation: int = 0
    slices_yielded: int = 0


@dataclass
class ClientWiring:
    endpoint: Endpoint
    publish: Callable[[str, Envelope], object]
    spec: ModelSpec
    data: SampleSource
    seed: int = 0
    events: object = None


def _update_payload(profile, record: UpdateRecord, mask, metrics) -> bytes:
    fields = {
        "sender": profile.id,
        "client_id": profile.id,
        "base_version": record.base_version,
        "n_samples": record.n_samples,
        "tau": record.tau,
    }
    if mask.is_full:
        fields["params_b64"] = codec.params_to_b64(record.params)
    else:
        sliced = ParamVector(record.params.values[mask.start : mask.stop], [(1, mask.stop - mask.start)])
        fields["params_b64"] = codec.params_to_b64(sliced)
        fields["mask"] = [mask.start, mask.stop]
    if metrics:
        fields["metrics"] = metrics
    return codec.encode_payload(FrameKind.UPDATE, fields)


def client_round(state: ClientState, version: int, global_params: ParamVector, profile: ClientProfileSpec, wiring: ClientWiring):
    """One participation: adopt, simulate compute time, train, upload.

    Generator; returns the published UpdateRecord (params before masking).
    """
    cfg = profile.trainer
    state.params = global_params
    state.last_version = version
    cost = profile.base_train_cost * cfg.expected_steps(len(wiring.data))
    slices = delay_simulate(cost, profile)
    state.slices_yielded += slices
    yield Delay(slices)
    result = local_train(
        wiring.spec,
        global_params,
        wiring.data,
        cfg,
        rng_seed=(wiring.seed, profile.id, version, state.participation),
        personal=state.personal,
    )
    metrics = {}
    if result.personal is not None:
        state.personal = result.personal
        x, y = wiring.data.read(np.arange(len(wiring.data)))
        metrics["personal_accuracy"] = evaluate(wiring.spec, result.personal, x, y).accuracy
    mask = mask_for_round(wiring.spec, cfg, state.participation)
    record = UpdateRecord(profile.id, version, result.params, result.n_samples, max(result.tau, 1))
    wiring.publish("updates", Envelope("updates", profile.id, Kind.UPDATE, _update_payload(profile, record, mask, metrics)))
    state.participation += 1
    return record


def _targets_me(fields: dict, cid: int) -> bool:
    return "targets" not in fields or cid in fields["targets"]


def client_task(profile: ClientProfileSpec, wiring: ClientWiring, state: ClientState | None = None):
    """The client's whole lifetime as a task generator."""
    state = state or ClientState()
    cid = profile.id
    wiring.publish(
        "updates",
        Envelope("updates", cid, Kind.REGISTER, codec.encode_payload(FrameKind.REGISTER, {"sender": cid, "client_id": cid})),
    )
    while True:
        env = yield Receive(wiring.endpoint)
        if env is None:
            continue
        if env.kind == Kind.SHUTDOWN:
            if _targets_me(codec.decode_payload(FrameKind.SHUTDOWN, env.payload), cid):
                break
            continue
        if env.kind != Kind.GLOBAL_MODEL:
            continue
        fields = codec.decode_payload(FrameKind.GLOBAL_MODEL, env.payload)
        if cid not in fields["targets"]:
            continue
        try:
            yield from client_round(state, fields["version"], codec.b64_to_params(fields["params_b64"]), profile, wiring)
        except Exception as exc:  # surfaced to the server, which aborts the run
            log.exception("client %s failed", cid)
            payload = codec.encode_payload(
                FrameKind.CONTROL,
                {"sender": cid, "action": "client_failed", "client_id": cid, "error": f"{type(exc).__name__}: {exc}"},
            )
            wiring.publish("control", Envelope("control", cid, Kind.CONTROL, payload))
            break
    discarded = wiring.endpoint.close()
    if discarded:
        log.info("client %s stopped with %d pending messages discarded", cid, discarded)
        if wiring.events is not None:
            wiring.events.emit("warning", client_id=cid, message=f"discarded {discarded} pending messages")
    return state


def build_resumable(profile: ClientProfileSpec, wiring: ClientWiring):
    from .tasks import ResumableTask

    return ResumableTask(client_task(profile, wiring), name=f"client-{profile.id}")
