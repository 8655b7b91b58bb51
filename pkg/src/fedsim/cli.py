"""Command-line entry points.

Exit codes: 0 success, 1 config error, 2 runtime abort, 3 protocol/transport error.
"""

from __future__ import annotations

import argparse
import logging
import math
import sys
from pathlib import Path

import numpy as np

from .codec import FrameError
from .config import ConfigError, apply_env, load_config, with_overrides
from .data import distribution_csv, distribution_matrix
from .learn import ParamVector
from .obs import SummaryError, read_events, summarize

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_RUNTIME = 2
EXIT_PROTOCOL = 3

log = logging.getLogger("fedsim")


def _load(args) -> "object":
    cfg = apply_env(load_config(args.config))
    return with_overrides(cfg, mode=getattr(args, "mode", None), seed=getattr(args, "seed", None))


def cmd_run(args) -> int:
    from .experiment import run_plan
    from .plan import assemble

    cfg = _load(args)
    plan = assemble(cfg)
    result = run_plan(plan, cfg.global_.output_dir)
    print((result.run_dir / "summary.txt").read_text(encoding="utf-8"), end="")
    print(f"run directory: {result.run_dir}")
    return EXIT_OK


def cmd_validate(args) -> int:
    from .plan import assemble

    assemble(_load(args))
    print("ok")
    return EXIT_OK


def cmd_partition_report(args) -> int:
    from .plan import assemble

    plan = assemble(_load(args))
    text = distribution_csv(distribution_matrix(plan.benchmark.partition, plan.benchmark.dataset))
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
        print(f"wrote {args.out}")
    else:
        sys.stdout.write(text)
    return EXIT_OK


def cmd_report(args) -> int:
    _, text = summarize(args.run_dir)
    print(text, end="")
    return EXIT_OK


def _accuracy_by_version(run_dir: Path) -> dict[int, float]:
    return {e.version: e.metrics["accuracy"] for e in read_events(run_dir / "events.jsonl") if e.event == "evaluate"}


def compare_runs(run_a: str | Path, run_b: str | Path) -> tuple[list[tuple[int, float | None]], float | None]:
    """Per-version accuracy deltas (b - a; None where one run lacks the version)
    and the max absolute parameter difference of the final checkpoints."""
    run_a, run_b = Path(run_a), Path(run_b)
    acc_a, acc_b = _accuracy_by_version(run_a), _accuracy_by_version(run_b)
    deltas = []
    for version in sorted(set(acc_a) | set(acc_b)):
        if version in acc_a and version in acc_b:
            deltas.append((version, acc_b[version] - acc_a[version]))
        else:
            deltas.append((version, None))
    ckpt_a, ckpt_b = run_a / "checkpoint_final.params", run_b / "checkpoint_final.params"
    divergence = None
    if ckpt_a.exists() and ckpt_b.exists():
        pa = ParamVector.from_bytes(ckpt_a.read_bytes())
        pb = ParamVector.from_bytes(ckpt_b.read_bytes())
        if pa.shapes != pb.shapes:
            divergence = math.inf
        else:
            divergence = float(np.max(np.abs(pa.values - pb.values))) if pa.values.size else 0.0
    return deltas, divergence


def cmd_compare(args) -> int:
    deltas, divergence = compare_runs(args.run_a, args.run_b)
    print("version,accuracy_delta")
    for version, delta in deltas:
        print(f"{version},{'missing' if delta is None else repr(delta)}")
    print(f"max param divergence: {'n/a (no checkpoints)' if divergence is None else repr(divergence)}")
    return EXIT_OK


def cmd_node(args) -> int:
    from .netcomm import DEFAULT_PORT, parse_address, serve_node

    host, port = parse_address(args.listen, DEFAULT_PORT)
    serve_node(host, port, once=args.once, capacity=args.capacity)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fedsim", description="Modular federated-learning simulator.")
    parser.add_argument("-v", "--verbose", action="count", default=0, help="more logging (repeatable)")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run an experiment")
    p.add_argument("--config", required=True)
    p.add_argument("--mode", help="override client_manager.mode")
    p.add_argument("--seed", type=int, help="override global.seed")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("validate", help="parse and resolve a config without running it")
    p.add_argument("--config", required=True)
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser("partition-report", help="print the client x class distribution as CSV")
    p.add_argument("--config", required=True)
    p.add_argument("--out", help="write the CSV here instead of stdout")
    p.set_defaults(func=cmd_partition_report)

    p = sub.add_parser("report", help="recompute summary.json and summary.txt for a run")
    p.add_argument("run_dir")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("compare", help="compare two runs")
    p.add_argument("run_a")
    p.add_argument("run_b")
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("node", help="serve as a sub client manager")
    p.add_argument("--listen", default="0.0.0.0:7607", help="host:port to listen on")
    p.add_argument("--once", action="store_true", help="exit after one experiment")
    p.add_argument("--capacity", type=int, default=1024, help="max clients this node accepts")
    p.set_defaults(func=cmd_node)
    return parser


def main(argv: list[str] | None = None) -> int:
    from .netcomm import ProtocolError, TransportClosed
    from .server import TransportLost

    args = build_parser().parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (ProtocolError, TransportClosed, TransportLost, FrameError, ConnectionError) as exc:
        print(f"protocol error: {exc}", file=sys.stderr)
        return EXIT_PROTOCOL
    except (SummaryError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except KeyboardInterrupt:
        return EXIT_RUNTIME
    except Exception as exc:  # any other failure aborts the run
        log.debug("run aborted", exc_info=True)
        print(f"run aborted: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
