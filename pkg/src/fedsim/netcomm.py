"""Inter-device communication: framed TCP transport, the node handshake, the
remote queue adapter and the main/sub client-manager split.

Roles: the main manager (with the server) dials each sub manager's listen
address. The sub sends NodeHello{capacity}; main replies NodeAssign; the sub
builds its clients and answers Ack{ok, node_id, running}. Afterwards both ends
run a :class:`RemoteQueueAdapter` that forwards ``updates`` (and
client-originated ``control``) from sub to main, and ``global``/``control``
from main to sub.
"""

from __future__ import annotations

import dataclasses
import logging
import math
import multiprocessing
import os
import socket
import tempfile
import threading
import time
from pathlib import Path

from . import codec
from .client import ClientProfileSpec, client_task
from .codec import FrameError, FrameKind, ShortRead
from .engine import ClientManager, WorkerGroup
from .learn import ModelSpec, TrainerConfig
from .mq import SERVER_ID, Broker, EndpointClosed, Envelope, Kind, wall_clock_us

log = logging.getLogger(__name__)

DEFAULT_PORT = 7607
TOKEN_ENV = "FEDSIM_NODE_TOKEN"

KIND_TOPIC = {
    FrameKind.REGISTER: "updates",
    FrameKind.UPDATE: "updates",
    FrameKind.GLOBAL_MODEL: "global",
    FrameKind.CONTROL: "control",
    FrameKind.SHUTDOWN: "control",
}


class ProtocolError(RuntimeError):
    pass


class TransportClosed(ConnectionError):
    pass


def parse_address(text: str, default_port: int = DEFAULT_PORT) -> tuple[str, int]:
    host, sep, port = text.rpartition(":")
    if not sep:
        return text, default_port
    return host or "127.0.0.1", int(port)


class Connection:
    """Frame-level wrapper over a stream socket. Frames are written atomically."""

    def __init__(self, sock: socket.socket, record: list | None = None):
        self.sock = sock
        self.record = record  # optional transcript of raw frames, in wire order
        self._wlock = threading.Lock()
        self._closed = False

    def send(self, kind: FrameKind, payload: bytes) -> None:
        frame = codec.frame_from_payload(kind, payload)
        with self._wlock:
            if self._closed:
                raise TransportClosed("connection is closed")
            try:
                self.sock.sendall(frame)
            except OSError as exc:
                raise TransportClosed(str(exc)) from exc
            if self.record is not None:
                self.record.append(frame)

    def send_fields(self, kind: FrameKind, fields: dict | None) -> None:
        self.send(kind, codec.encode_payload(kind, fields))

    def _read_exact(self, n: int, started: bool) -> bytes:
        chunks, got = [], 0
        while got < n:
            try:
                chunk = self.sock.recv(n - got)
            except OSError as exc:
                raise TransportClosed(str(exc)) from exc
            if not chunk:
                if started or got:
                    raise ShortRead(f"connection closed mid-frame ({got}/{n} bytes)")
                raise TransportClosed("peer closed the connection")
            chunks.append(chunk)
            got += len(chunk)
        return b"".join(chunks)

    def recv(self) -> tuple[FrameKind, bytes]:
        header = self._read_exact(codec.HEADER.size, started=False)
        kind, length = codec.parse_header(header)
        payload = self._read_exact(length, started=True) if length else b""
        if self.record is not None:
            self.record.append(header + payload)
        return kind, payload

    def recv_fields(self) -> tuple[FrameKind, dict]:
        kind, payload = self.recv()
        return kind, codec.decode_payload(kind, payload)

    def close(self) -> None:
        with self._wlock:
            if self._closed:
                return
            self._closed = True
        try:
            self.sock.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        self.sock.close()


def _sender_of(kind: FrameKind, payload: bytes) -> int:
    if not payload:
        return SERVER_ID
    return codec.decode_payload(kind, payload)["sender"]


class RemoteQueueAdapter:
    """Bridges a local broker to a peer over one connection.

    ``outbound`` maps topic -> predicate(envelope) deciding what to forward.
    Inbound frames are republished locally with the original sender id and
    marked ``remote`` so they are never forwarded back.
    """

    def __init__(self, broker: Broker, conn: Connection, participant: int, outbound: dict, node_id: int, clients=(), events=None):
        self.broker = broker
        self.conn = conn
        self.participant = participant
        self.outbound = outbound
        self.node_id = node_id
        self.clients = sorted(clients)
        self.events = events
        self.forwarded = 0
        self.received = 0
        self.down = threading.Event()
        broker.register(participant)
        self.endpoint = None
        for topic in sorted(outbound):
            self.endpoint = broker.subscribe(topic, participant)
        self._threads = [
            threading.Thread(target=self._writer, name=f"adapter-{node_id}-out", daemon=True),
            threading.Thread(target=self._reader, name=f"adapter-{node_id}-in", daemon=True),
        ]

    def start(self) -> "RemoteQueueAdapter":
        for th in self._threads:
            th.start()
        return self

    def _writer(self) -> None:
        while not self.down.is_set():
            try:
                env = self.endpoint.receive(0.2)
            except EndpointClosed:
                return
            if env is None or env.remote or not self.outbound[env.topic](env):
                continue
            try:
                self.conn.send(FrameKind(int(env.kind)), env.payload)
                self.forwarded += 1
            except TransportClosed:
                self._transport_down("send failed")
                return

    def _reader(self) -> None:
        while True:
            try:
                kind, payload = self.conn.recv()
            except (TransportClosed, ShortRead) as exc:
                self._transport_down(str(exc))
                return
            except FrameError as exc:
                log.error("node %s sent a bad frame: %s", self.node_id, exc)
                self._transport_down(f"protocol error: {exc}")
                self.conn.close()
                return
            topic = KIND_TOPIC.get(kind)
            if topic is None:
                log.warning("ignoring %s frame after handshake", kind.name)
                continue
            self.received += 1
            try:
                env = Envelope(topic, _sender_of(kind, payload), Kind(int(kind)), payload, remote=True)
                self.broker.publish(topic, env)
            except FrameError as exc:
                log.error("undecodable %s payload from node %s: %s", kind.name, self.node_id, exc)
            except Exception:  # local queue already shut down
                return

    def _transport_down(self, reason: str) -> None:
        if self.down.is_set():
            return
        self.down.set()
        if self.events is not None:
            self.events.emit("node_down", message=f"node {self.node_id}: {reason}", metrics={"node_id": self.node_id})
        payload = codec.encode_payload(
            FrameKind.CONTROL,
            {"sender": SERVER_ID, "action": "transport_down", "node_id": self.node_id, "clients": self.clients, "reason": reason},
        )
        try:
            self.broker.publish("control", Envelope("control", SERVER_ID, Kind.CONTROL, payload, remote=True))
        except Exception:
            pass

    def stop(self, timeout: float = 5.0) -> None:
        self.down.set()
        self.conn.close()
        if self.endpoint is not None:
            self.endpoint.close()
        for th in self._threads:
            if th is not threading.current_thread():
                th.join(timeout)

    def wait_closed(self, timeout: float) -> bool:
        return self.down.wait(timeout)


def main_side_rules() -> dict:
    return {"global": lambda env: True, "control": lambda env: True}


def sub_side_rules() -> dict:
    return {"updates": lambda env: True, "control": lambda env: env.sender != SERVER_ID}


# -- handshake --------------------------------------------------------------------------


def profile_to_doc(profile: ClientProfileSpec) -> dict:
    return {
        "id": profile.id,
        "speed_factor": profile.speed_factor,
        "base_train_cost": profile.base_train_cost,
        "sample_indices": list(profile.sample_indices),
    }


def build_assignment(
    node_id: int, profiles, store: dict, model: ModelSpec, trainer: TrainerConfig, seed: int, slice_seconds: float
) -> dict:
    return {
        "node_id": node_id,
        "profiles": [profile_to_doc(p) for p in profiles],
        "store": store,
        "experiment": {
            "seed": seed,
            "slice_seconds": slice_seconds,
            "model": dataclasses.asdict(model),
            "trainer": dataclasses.asdict(trainer),
        },
    }


def main_handshake(conn: Connection, node_id: int, assignment: dict, expected_token: str | None = None) -> dict:
    """Main side. Returns the sub's Ack fields."""
    kind, hello = conn.recv_fields()
    if kind != FrameKind.NODE_HELLO:
        raise ProtocolError(f"expected NodeHello, got {kind.name}")
    if expected_token and hello.get("token") != expected_token:
        conn.send_fields(FrameKind.CONTROL, {"sender": SERVER_ID, "action": "reject", "reason": "bad token"})
        conn.close()
        raise ProtocolError(f"node {node_id} presented a wrong admission token")
    wanted = len(assignment["profiles"])
    if hello["capacity"] < wanted:
        reason = f"capacity {hello['capacity']} < {wanted} assigned clients"
        conn.send_fields(FrameKind.CONTROL, {"sender": SERVER_ID, "action": "reject", "reason": reason})
        conn.close()
        raise ProtocolError(f"node {node_id} rejected: {reason}")
    conn.send_fields(FrameKind.NODE_ASSIGN, assignment)
    kind, ack = conn.recv_fields()
    if kind == FrameKind.NODE_HELLO:
        conn.close()
        raise ProtocolError(f"duplicate NodeHello from node {node_id}")
    if kind != FrameKind.ACK:
        conn.close()
        raise ProtocolError(f"expected Ack, got {kind.name}")
    if not ack["ok"]:
        conn.close()
        raise ProtocolError(f"node {node_id} failed to start clients: {ack.get('reason')}")
    log.info("node %s accepted %d clients", node_id, ack.get("running", 0))
    return ack


def sub_handshake(conn: Connection, capacity: int, token: str | None = None) -> dict:
    """Sub side, up to (and excluding) the Ack. Returns the NodeAssign fields."""
    hello = {"capacity": capacity}
    if token:
        hello["token"] = token
    conn.send_fields(FrameKind.NODE_HELLO, hello)
    kind, fields = conn.recv_fields()
    if kind == FrameKind.CONTROL and fields.get("action") == "reject":
        raise ProtocolError(f"main rejected this node: {fields.get('reason')}")
    if kind != FrameKind.NODE_ASSIGN:
        raise ProtocolError(f"expected NodeAssign, got {kind.name}")
    log.info("assigned node id %s with clients %s", fields["node_id"], [p["id"] for p in fields["profiles"]])
    return fields


def node_handshake(conn: Connection, capacity: int, token: str | None = None) -> tuple[int, dict]:
    fields = sub_handshake(conn, capacity, token)
    return fields["node_id"], fields


# -- sub manager ------------------------------------------------------------------------


def _open_store(desc: dict):
    from .data import PreloadStore, SimulatedDisk, write_dataset_file

    path = Path(desc["path"])
    if not path.exists():
        # no shared filesystem: rebuild the (deterministic) dataset locally
        from .config import ModuleRef
        from .registry import default_registry

        ref = desc["dataset"]
        dataset = default_registry().build(ModuleRef("dataset", ref["name"], ref.get("params", {})), {"seed": desc.get("seed", 0)})
        path = write_dataset_file(dataset, Path(tempfile.mkdtemp(prefix="fedsim-node-")) / path.name)
    if desc.get("preload"):
        return PreloadStore.from_file(path), None
    return None, SimulatedDisk(path, int(desc.get("io_latency_us", 0)))


def run_sub_manager(conn: Connection, assign: dict, send_ack: bool = True) -> dict:
    """Start the assigned clients, bridge them to main, run until they stop."""
    from .data import DiskSource, StoreSource

    node_id = assign["node_id"]
    exp = assign["experiment"]
    spec = ModelSpec(**exp["model"])
    trainer = TrainerConfig(**exp["trainer"])
    broker = Broker(clock=wall_clock_us)
    manager = ClientManager(broker, role="sub")
    store, disk = _open_store(assign["store"])
    workers = WorkerGroup(float(exp.get("slice_seconds", 0.0)))
    try:
        profiles, wirings = [], {}
        from .client import ClientWiring

        for doc in assign["profiles"]:
            profile = ClientProfileSpec(
                id=doc["id"],
                speed_factor=doc["speed_factor"],
                base_train_cost=doc["base_train_cost"],
                trainer=trainer,
                sample_indices=tuple(doc["sample_indices"]),
            )
            source = StoreSource(store.attach(), profile.sample_indices) if store else DiskSource(disk, profile.sample_indices)
            broker.register(profile.id)
            endpoint = broker.subscribe("global", profile.id)
            broker.subscribe("control", profile.id)
            wirings[profile.id] = ClientWiring(endpoint, broker.publish, spec, source, int(exp["seed"]))
            manager.add(profile.id)
            profiles.append(profile)
    except Exception as exc:
        if send_ack:
            conn.send_fields(FrameKind.ACK, {"ok": False, "node_id": node_id, "reason": f"{type(exc).__name__}: {exc}"})
        raise
    adapter = RemoteQueueAdapter(broker, conn, -node_id - 1, sub_side_rules(), node_id, [p.id for p in profiles])
    adapter.start()
    for p in profiles:
        manager.mark_running(p.id)
    # the Ack must precede any client frame (each client opens with Register)
    if send_ack:
        conn.send_fields(FrameKind.ACK, {"ok": True, "node_id": node_id, "running": len(manager.live_ids())})
    for p in profiles:
        workers.spawn(p.id, client_task(p, wirings[p.id]), on_exit=manager.finished)

    def watch_transport():
        adapter.down.wait()
        # main is gone: stop local clients so the node can exit
        broker.shutdown()
        for w in wirings.values():
            w.endpoint.close()

    threading.Thread(target=watch_transport, daemon=True).start()
    workers.join()
    # let the last updates drain before closing the connection
    deadline = time.monotonic() + 5.0
    while adapter.endpoint.pending() and time.monotonic() < deadline:
        time.sleep(0.01)
    adapter.stop()
    if disk is not None:
        disk.close()
    if workers.errors:
        pid, exc = sorted(workers.errors.items())[0]
        log.error("client %s crashed on node %s: %r", pid, node_id, exc)
    return {"node_id": node_id, "clients": [p.id for p in profiles], "errors": len(workers.errors)}


def serve_node(host: str = "127.0.0.1", port: int = DEFAULT_PORT, once: bool = False, capacity: int = 1024, ready=None) -> None:
    """Sub-manager role: accept one main connection at a time and run its clients."""
    token = os.environ.get(TOKEN_ENV) or None
    with socket.create_server((host, port)) as srv:
        actual = srv.getsockname()[1]
        log.info("node listening on %s:%s", host, actual)
        if ready is not None:
            ready(actual)
        while True:
            sock, peer = srv.accept()
            sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
            conn = Connection(sock)
            try:
                assign = sub_handshake(conn, capacity, token)
                run_sub_manager(conn, assign)
            except (ProtocolError, FrameError, TransportClosed) as exc:
                log.error("session with %s failed: %s", peer, exc)
                conn.close()
                if once:
                    raise
            if once:
                return


def _node_process(port_queue, capacity: int) -> None:
    logging.basicConfig(level=logging.WARNING)
    serve_node("127.0.0.1", 0, once=True, capacity=capacity, ready=port_queue.put)


# -- main manager -----------------------------------------------------------------------


def connect(address: tuple[str, int], timeout: float = 15.0) -> Connection:
    deadline = time.monotonic() + timeout
    while True:
        try:
            sock = socket.create_connection(address, timeout=timeout)
            sock.settimeout(None)
            sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
            return Connection(sock)
        except OSError:
            if time.monotonic() > deadline:
                raise
            time.sleep(0.05)


def store_descriptor(plan, run_dir: Path) -> dict:
    from .experiment import DATASET_FILE

    ds = plan.benchmark.dataset
    ref = plan.config.benchmark.dataset
    return {
        "path": str((run_dir / DATASET_FILE).resolve()),
        "preload": plan.config.benchmark.preload,
        "io_latency_us": plan.benchmark.io_latency_us,
        "n_samples": ds.n_samples,
        "feature_dim": ds.feature_dim,
        "n_classes": ds.n_classes,
        "dataset": {"name": ref.name, "params": dict(ref.params)},
        "seed": plan.seed,
    }


def split_profiles(profiles, counts) -> list[list]:
    """Partition profiles over nodes in config order."""
    out, offset = [], 0
    for c in counts:
        out.append(list(profiles[offset : offset + c]))
        offset += c
    if offset != len(profiles):
        raise ProtocolError(f"node client counts sum to {offset}, plan has {len(profiles)} clients")
    return out


def run_remote(plan, run_dir: Path, events, hooks):
    """Main-manager side of the multiprocess and distributed modes."""
    from .experiment import RunResult, make_server
    from .tasks import run_blocking

    mode = plan.mode
    procs = []
    if mode.name == "multiprocess":
        w = mode.workers_per_process
        n_proc = math.ceil(len(plan.profiles) / w)
        counts = [min(w, len(plan.profiles) - i * w) for i in range(n_proc)]
        ctx = multiprocessing.get_context("spawn")
        port_queue = ctx.Queue()
        for _ in counts:
            p = ctx.Process(target=_node_process, args=(port_queue, w), daemon=True)
            p.start()
            procs.append(p)
        ports = [port_queue.get(timeout=60) for _ in counts]
        addresses = [("127.0.0.1", port) for port in ports]
    else:
        addresses = [parse_address(a) for a, _ in mode.nodes]
        counts = [c for _, c in mode.nodes]

    broker = Broker(clock=wall_clock_us, events=events, high_water_mark=plan.queue.high_water_mark)
    manager = ClientManager(broker, events)
    server = make_server(plan, broker, manager, events, virtual=False)
    token = os.environ.get(TOKEN_ENV) or None
    store = store_descriptor(plan, run_dir)
    adapters: list[RemoteQueueAdapter] = []
    try:
        for node_id, (addr, node_profiles) in enumerate(zip(addresses, split_profiles(plan.profiles, counts))):
            conn = connect(addr)
            assignment = build_assignment(
                node_id, node_profiles, store, plan.model, plan.trainer, plan.seed, plan.config.client_manager.slice_seconds
            )
            ids = [p.id for p in node_profiles]
            for cid in ids:
                manager.add(cid, node=node_id)
            # subscribe before the Ack so no registration can be missed
            adapter = RemoteQueueAdapter(broker, conn, -node_id - 1, main_side_rules(), node_id, ids, events)
            adapter._threads[0].start()
            ack = main_handshake(conn, node_id, assignment, token)
            adapter._threads[1].start()
            adapters.append(adapter)
            if ack.get("running") != len(ids):
                raise ProtocolError(f"node {node_id} reports {ack.get('running')} running clients, expected {len(ids)}")
            for cid in ids:
                manager.mark_running(cid)
            for p in node_profiles:
                events.emit(
                    "client_start",
                    client_id=p.id,
                    metrics={"n_samples": len(p.sample_indices), "speed_factor": p.speed_factor, "node_id": node_id},
                )
            events.emit("node_up", message=f"{addr[0]}:{addr[1]}", metrics={"node_id": node_id, "clients": len(ids)})
        if hooks.on_server:
            hooks.on_server(server, manager)
        if hooks.on_remote:
            hooks.on_remote(adapters)
        if hooks.on_manager:
            hooks.on_manager(manager)
        model = run_blocking(server.run())
        for adapter in adapters:
            if not adapter.wait_closed(plan.config.server.await_timeout_s):
                log.warning("node %s did not close its connection after shutdown", adapter.node_id)
    finally:
        for adapter in adapters:
            adapter.stop()
        broker.shutdown()
        for p in procs:
            p.join(10)
            if p.is_alive():
                p.terminate()
    for cid in manager.live_ids():
        manager.finished(cid)
    return RunResult(model, server.round_log, run_dir, events, manager, server=server)
