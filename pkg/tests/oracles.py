"""Independent reference implementations used as test oracles.

Nothing here imports fedsim. Each oracle is written from the algorithm
description alone (plain Python, exact rationals where rounding matters) so
that agreement with the package is evidence, not tautology.
"""

from __future__ import annotations

import json
import math
import struct
from fractions import Fraction

import numpy as np

# -- pinned random stream --------------------------------------------------------------


class RefStream:
    """Philox4x64 seeded through SeedSequence([parts...]); one raw u64 per call."""

    def __init__(self, *parts: int):
        self.bits = np.random.Philox(np.random.SeedSequence(list(parts)))

    def u64(self) -> int:
        return int(self.bits.random_raw())

    def uniform(self) -> float:
        # 52 high-quality bits, centred in their bucket: never 0, never 1
        return ((self.u64() >> 12) + 0.5) / 2**52

    def normal(self) -> float:
        a = self.uniform()
        b = self.uniform()
        return math.sqrt(-2.0 * math.log(a)) * math.cos(2.0 * math.pi * b)

    def gamma(self, shape: float) -> float:
        if shape < 1.0:
            # boost: G(shape) = G(shape + 1) * U^(1/shape)
            boosted = self.gamma(shape + 1.0)
            return boosted * self.uniform() ** (1.0 / shape)
        d = shape - 1.0 / 3.0
        c = 1.0 / math.sqrt(9.0 * d)
        while True:
            x = self.normal()
            t = 1.0 + c * x
            if t <= 0.0:
                continue
            v = t * t * t
            u = self.uniform()
            if u < 1.0 - 0.0331 * (x * x) * (x * x):
                return d * v
            if math.log(u) < 0.5 * x * x + d * (1.0 - v + math.log(v)):
                return d * v

    def index_below(self, n: int) -> int:
        return (self.u64() * n) >> 64

    def fisher_yates(self, items: list) -> list:
        out = list(items)
        for i in range(len(out) - 1, 0, -1):
            j = self.index_below(i + 1)
            out[i], out[j] = out[j], out[i]
        return out


def ref_largest_remainder(gammas: list[float], total: int) -> list[int]:
    """Apportion with exact rationals; leftover units to the largest remainders,
    ties to the lower index."""
    exact = [Fraction(g) for g in gammas]
    s = sum(exact)
    quotas = [q / s * total for q in exact]
    floors = [q.numerator // q.denominator for q in quotas]
    left = total - sum(floors)
    order = sorted(range(len(quotas)), key=lambda i: (-(quotas[i] - floors[i]), i))
    for i in order[:left]:
        floors[i] += 1
    return floors


def ref_dirichlet_partition(class_members: list[list[int]], beta: float, n_clients: int, seed: int) -> list[list[int]]:
    """Per class: shuffle members, draw n_clients Gamma(beta) variates, apportion
    the class by largest remainder, hand out consecutive slices. Redraw the
    whole assignment while any client is empty."""
    stream = RefStream(seed)
    while True:
        buckets: list[list[int]] = [[] for _ in range(n_clients)]
        for members in class_members:
            order = stream.fisher_yates(members)
            gammas = [stream.gamma(beta) for _ in range(n_clients)]
            counts = ref_largest_remainder(gammas, len(order))
            pos = 0
            for k, cnt in enumerate(counts):
                buckets[k].extend(order[pos : pos + cnt])
                pos += cnt
        if all(buckets):
            return [sorted(b) for b in buckets]


# -- wire frames -----------------------------------------------------------------------

FRAME_KINDS = {"Register": 1, "GlobalModel": 2, "Update": 3, "Control": 4, "Shutdown": 5, "NodeHello": 6, "NodeAssign": 7, "Ack": 8}


def ref_frame(kind: str, fields: dict | None) -> bytes:
    """u32 big-endian payload length, u8 kind, then compact sorted-key JSON."""
    body = b"" if not fields else json.dumps(fields, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return struct.pack(">I", len(body)) + bytes([FRAME_KINDS[kind]]) + body


def ref_param_bytes(shapes: list[tuple[int, int]], values: list[float]) -> bytes:
    """u32 layer count, (u32 rows, u32 cols) per layer, then f64 values, little-endian."""
    out = struct.pack("<I", len(shapes))
    for r, c in shapes:
        out += struct.pack("<II", r, c)
    return out + struct.pack(f"<{len(values)}d", *values)


# -- learning ------------------------------------------------------------------------------


def ref_softmax_loss(W: np.ndarray, b: np.ndarray, x: np.ndarray, y: np.ndarray) -> float:
    """Mean cross-entropy of softmax(xW + b), computed row by row with fsum."""
    total = []
    for row, label in zip(x, y):
        z = [math.fsum(row[i] * W[i, j] for i in range(W.shape[0])) + b[j] for j in range(W.shape[1])]
        m = max(z)
        lse = m + math.log(math.fsum(math.exp(v - m) for v in z))
        total.append(lse - z[int(label)])
    return math.fsum(total) / len(total)


def central_differences(f, theta: np.ndarray, step: float = 1e-5) -> np.ndarray:
    grad = np.empty_like(theta)
    for i in range(theta.size):
        up = theta.copy()
        dn = theta.copy()
        up[i] += step
        dn[i] -= step
        grad[i] = (f(up) - f(dn)) / (2 * step)
    return grad


def ref_softmax_sgd(x: np.ndarray, y: np.ndarray, n_classes: int, lr: float, epochs: int, w0: np.ndarray | None = None) -> np.ndarray:
    """Full-batch gradient descent on a softmax model; used as the pooled-data
    reference trainer (accuracy upper bound for federated runs)."""
    d = x.shape[1]
    theta = np.zeros(d * n_classes + n_classes) if w0 is None else w0.copy()
    onehot = np.eye(n_classes)[y]
    for _ in range(epochs):
        W = theta[: d * n_classes].reshape(d, n_classes)
        b = theta[d * n_classes :]
        z = x @ W + b
        z -= z.max(axis=1, keepdims=True)
        p = np.exp(z)
        p /= p.sum(axis=1, keepdims=True)
        g = (p - onehot) / len(x)
        theta = theta - lr * np.concatenate([(x.T @ g).ravel(), g.sum(axis=0)])
    return theta


def ref_softmax_accuracy(theta: np.ndarray, x: np.ndarray, y: np.ndarray, n_classes: int) -> float:
    d = x.shape[1]
    W = theta[: d * n_classes].reshape(d, n_classes)
    b = theta[d * n_classes :]
    return float(np.mean(np.argmax(x @ W + b, axis=1) == y))


# -- engine ------------------------------------------------------------------------------------


def ref_timeslice_trace(yields: dict[int, list[int]]) -> list[tuple[int, int]]:
    """Hand-rule event queue: take every entry at the smallest time, activate
    them in ascending id order, then re-queue (a zero delay lands in the next
    batch at the same time)."""
    queue = [(0, pid, 0) for pid in yields]
    trace = []
    while queue:
        t = min(e[0] for e in queue)
        batch = sorted(e for e in queue if e[0] == t)
        queue = [e for e in queue if e[0] != t]
        for _, pid, k in batch:
            trace.append((t, pid))
            if k < len(yields[pid]):
                queue.append((t + yields[pid][k], pid, k + 1))
    return trace
