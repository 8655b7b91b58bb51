"""Event stream (JSONL), run summaries and the distribution report."""

from __future__ import annotations

import json
import math
import os
import resource
import threading
import time
from collections import Counter
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import yaml

SCHEMA_VERSION = 1
EVENTS = (
    "activation",
    "publish",
    "deliver",
    "aggregate",
    "evaluate",
    "client_start",
    "client_stop",
    "node_up",
    "node_down",
    "warning",
    "run_start",
    "run_end",
)
# metrics that depend on the host rather than the experiment
WALL_METRICS = ("wall_seconds", "peak_rss_kb")


class EventSchemaError(ValueError):
    pass


class SummaryError(RuntimeError):
    pass


@dataclass
class EventRecord:
    event: str
    wall_time_us: int = 0
    virtual_time: int | None = None
    round: int | None = None
    version: int | None = None
    client_id: int | None = None
    participants: list[int] | None = None
    topic: str | None = None
    kind: str | None = None
    sender: int | None = None
    message: str | None = None
    metrics: dict[str, float] = field(default_factory=dict)
    schema_version: int = SCHEMA_VERSION

    def __post_init__(self):
        if self.event not in EVENTS:
            raise EventSchemaError(f"unknown event {self.event!r}")
        if self.event == "aggregate" and (self.version is None or self.participants is None):
            raise EventSchemaError("aggregate events need version and participants")
        if self.event == "evaluate" and not {"accuracy", "mean_loss"} <= set(self.metrics):
            raise EventSchemaError("evaluate events need accuracy and mean_loss metrics")

    def to_json(self) -> str:
        doc = {k: v for k, v in asdict(self).items() if v is not None}
        doc["metrics"] = {k: (None if isinstance(v, float) and math.isnan(v) else v) for k, v in self.metrics.items()}
        return json.dumps(doc, sort_keys=True, separators=(",", ":"))

    @classmethod
    def from_json(cls, line: str) -> "EventRecord":
        doc = json.loads(line)
        if not isinstance(doc, dict):
            raise EventSchemaError("event line is not an object")
        if doc.get("schema_version") != SCHEMA_VERSION:
            raise EventSchemaError(f"unsupported schema_version {doc.get('schema_version')!r}")
        doc["metrics"] = {k: (math.nan if v is None else v) for k, v in doc.get("metrics", {}).items()}
        try:
            return cls(**doc)
        except TypeError as exc:
            raise EventSchemaError(str(exc)) from exc


class EventLog:
    """Thread-safe JSONL sink. Write failures propagate to the caller."""

    def __init__(
        self,
        path: str | os.PathLike | None,
        virtual_clock: Callable[[], int] | None = None,
        flush_every: int = 1,
        normalize_wall_time: bool = False,
    ):
        self.path = Path(path) if path is not None else None
        self.virtual_clock = virtual_clock
        self.flush_every = max(1, flush_every)
        self.normalize_wall_time = normalize_wall_time
        self.records: list[EventRecord] = []
        self.counts: Counter = Counter()
        self._lock = threading.Lock()
        self._pending = 0
        self._fh = None
        if self.path is not None:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            self._fh = open(self.path, "w", encoding="utf-8")

    def emit(self, event: str, **fields) -> EventRecord:
        if "virtual_time" not in fields and self.virtual_clock is not None:
            fields["virtual_time"] = self.virtual_clock()
        metrics = dict(fields.pop("metrics", None) or {})
        if self.normalize_wall_time:
            for key in WALL_METRICS:
                if key in metrics:
                    metrics[key] = 0
        wall = 0 if self.normalize_wall_time else time.time_ns() // 1000
        record = EventRecord(event, wall_time_us=wall, metrics=metrics, **fields)
        self.log_event(record)
        return record

    def log_event(self, record: EventRecord) -> None:
        line = record.to_json() + "\n"
        with self._lock:
            self.records.append(record)
            self.counts[record.event] += 1
            if self._fh is not None:
                self._fh.write(line)
                self._pending += 1
                if self._pending >= self.flush_every:
                    self._fh.flush()
                    self._pending = 0

    def close(self) -> None:
        with self._lock:
            if self._fh is not None:
                self._fh.close()
                self._fh = None


def peak_rss_kb() -> int:
    return int(resource.getrusage(resource.RUSAGE_SELF).ru_maxrss)


# -- summaries ------------------------------------------------------------------------


def read_events(path: str | os.PathLike) -> list[EventRecord]:
    path = Path(path)
    if not path.exists():
        raise SummaryError(f"{path} does not exist")
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            try:
                out.append(EventRecord.from_json(line))
            except (ValueError, TypeError) as exc:
                raise SummaryError(f"{path}:{lineno}: bad event line: {exc}") from exc
    return out


def summarize(run_dir: str | os.PathLike) -> tuple[dict, str]:
    """Recompute summary.json / summary.txt purely from files in ``run_dir``."""
    run_dir = Path(run_dir)
    events = read_events(run_dir / "events.jsonl")
    echo_path = run_dir / "config.echo"
    if not echo_path.exists():
        raise SummaryError(f"{echo_path} does not exist")
    config = yaml.safe_load(echo_path.read_text(encoding="utf-8"))

    counts = Counter(e.event for e in events)
    evaluations = [e for e in events if e.event == "evaluate"]
    last = evaluations[-1] if evaluations else None
    per_class = []
    if last is not None:
        keys = sorted((k for k in last.metrics if k.startswith("class_")), key=lambda k: int(k.split("_")[1]))
        per_class = [last.metrics[k] for k in keys]
    personal = [e.metrics["avg_client_accuracy"] for e in evaluations if "avg_client_accuracy" in e.metrics]
    end = next((e for e in reversed(events) if e.event == "run_end"), None)
    virtual_times = [e.virtual_time for e in events if e.virtual_time is not None]
    mode = _mode_name(config)
    summary = {
        "config": config,
        "mode": mode,
        "aggregator": _ref_name(config, "server", "aggregator"),
        "final_version": max((e.version for e in events if e.event == "aggregate"), default=0),
        "final_accuracy": None if last is None else last.metrics["accuracy"],
        "final_mean_loss": None if last is None else last.metrics["mean_loss"],
        "per_class_accuracy": [None if math.isnan(v) else v for v in per_class],
        "average_client_accuracy": personal[-1] if personal else None,
        "peak_memory_kb": {mode: end.metrics.get("peak_rss_kb") if end else None},
        "total_wall_seconds": end.metrics.get("wall_seconds") if end else None,
        "total_virtual_time": max(virtual_times) if virtual_times else None,
        "event_counts": dict(sorted(counts.items())),
        "accuracy_curve": [[e.version, e.virtual_time, e.metrics["accuracy"]] for e in evaluations],
    }
    text = _outline(summary)
    (run_dir / "summary.json").write_text(json.dumps(summary, sort_keys=True, indent=2) + "\n", encoding="utf-8")
    (run_dir / "summary.txt").write_text(text, encoding="utf-8")
    return summary, text


def _ref_name(config: dict, section: str, key: str) -> str | None:
    ref = (config.get(section) or {}).get(key)
    return ref.get("name") if isinstance(ref, dict) else ref


def _mode_name(config: dict) -> str:
    return _ref_name(config, "client_manager", "mode") or "sequential"


def _outline(s: dict) -> str:
    cfg = s["config"]
    glob = cfg.get("global", {})
    lines = [
        "fedsim run summary",
        f"  aggregator:        {s['aggregator']}",
        f"  scheduler:         {_ref_name(cfg, 'server', 'scheduler')}",
        f"  trainer/model:     {_ref_name(cfg, 'client', 'trainer')} / {_ref_name(cfg, 'client', 'model')}",
        f"  dataset:           {_ref_name(cfg, 'benchmark', 'dataset')}",
        f"  mode:              {s['mode']}",
        f"  clients:           {cfg.get('client_manager', {}).get('client_count')}",
        f"  seed / rounds:     {glob.get('seed')} / {glob.get('rounds')}",
        f"  aggregations:      {s['event_counts'].get('aggregate', 0)}",
        f"  final accuracy:    {_fmt(s['final_accuracy'])}",
        f"  final mean loss:   {_fmt(s['final_mean_loss'])}",
    ]
    if s["average_client_accuracy"] is not None:
        lines.append(f"  avg client acc:    {_fmt(s['average_client_accuracy'])}")
    if s["per_class_accuracy"]:
        lines.append("  per-class accuracy: " + " ".join(_fmt(v) for v in s["per_class_accuracy"]))
    lines += [
        f"  virtual time:      {s['total_virtual_time']}",
        f"  wall seconds:      {_fmt(s['total_wall_seconds'])}",
        f"  peak memory (kB):  {s['peak_memory_kb'][s['mode']]}",
    ]
    return "\n".join(lines) + "\n"


def _fmt(v) -> str:
    if v is None:
        return "n/a"
    return f"{v:.4f}" if isinstance(v, float) else str(v)
