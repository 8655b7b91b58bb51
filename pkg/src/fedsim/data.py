"""Datasets, non-IID partitioning and the shared preload store.

Binary layout (little-endian), shared by dataset files and preload stores::

    magic "FMDS" | version u32 = 1 | n_samples u64 | feature_dim u64
    n_classes u32 | reserved u32 = 0 | features f32[n_samples * feature_dim]
    labels u16[n_samples]
"""

from __future__ import annotations

import logging
import mmap
import os
import struct
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .rng import PortableRNG, largest_remainder

log = logging.getLogger(__name__)

MAGIC = b"FMDS"
VERSION = 1
HEADER = struct.Struct("<4sIQQII")


class PartitionError(ValueError):
    pass


class StoreError(RuntimeError):
    pass


@dataclass(frozen=True, eq=False)
class Dataset:
    features: np.ndarray  # (n, d) float32
    labels: np.ndarray  # (n,) uint16
    n_classes: int
    name: str = "dataset"

    def __post_init__(self):
        if self.features.ndim != 2 or self.features.shape[0] < 1 or self.features.shape[1] < 1:
            raise ValueError(f"features must be a non-empty 2-D matrix, got shape {self.features.shape}")
        if self.features.dtype != np.float32 or self.labels.dtype != np.uint16:
            raise TypeError("features must be float32 and labels uint16")
        if len(self.labels) != len(self.features):
            raise ValueError("one label per sample required")
        if self.n_classes < 1 or (len(self.labels) and int(self.labels.max()) >= self.n_classes):
            raise ValueError("labels must lie in [0, n_classes)")

    @property
    def n_samples(self) -> int:
        return len(self.labels)

    @property
    def feature_dim(self) -> int:
        return self.features.shape[1]

    def __eq__(self, other):
        if not isinstance(other, Dataset):
            return NotImplemented
        return (
            self.n_classes == other.n_classes
            and self.features.shape == other.features.shape
            and self.features.tobytes() == other.features.tobytes()
            and self.labels.tobytes() == other.labels.tobytes()
        )

    __hash__ = None

    def subset(self, indices) -> "Dataset":
        idx = np.asarray(indices, dtype=np.int64)
        return Dataset(self.features[idx], self.labels[idx], self.n_classes, self.name)


def generate_synthetic(n_classes: int, per_class: int, feature_dim: int, seed: int = 0) -> Dataset:
    """Gaussian blobs: class centers uniform in [-1, 1]^d, unit isotropic noise.

    Samples are laid out class by class (class 0 first).
    """
    if min(n_classes, per_class, feature_dim) < 1:
        raise ValueError("n_classes, per_class and feature_dim must be positive")
    rng = PortableRNG(seed)
    centers = (2.0 * rng.uniforms(n_classes * feature_dim) - 1.0).reshape(n_classes, feature_dim)
    noise = rng.normals(n_classes * per_class * feature_dim).reshape(n_classes, per_class, feature_dim)
    features = (centers[:, None, :] + noise).reshape(-1, feature_dim).astype(np.float32)
    labels = np.repeat(np.arange(n_classes, dtype=np.uint16), per_class)
    return Dataset(features, labels, n_classes, name=f"synthetic-{n_classes}x{per_class}x{feature_dim}")


def train_test_split(n_samples: int, test_fraction: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Seeded split; returns sorted (train, test) index arrays."""
    perm = PortableRNG(seed, 0x7E57).permutation(n_samples)
    n_test = int(round(test_fraction * n_samples))
    return np.sort(perm[n_test:]), np.sort(perm[:n_test])


# -- partitioning ------------------------------------------------------------


@dataclass(frozen=True)
class PartitionSpec:
    variant: str = "iid"  # iid | dirichlet | explicit
    beta: float | None = None
    seed: int | None = None
    assignments: tuple[tuple[tuple[int, int], ...], ...] | None = None

    def __post_init__(self):
        if self.variant not in ("iid", "dirichlet", "explicit"):
            raise PartitionError(f"unknown partition variant {self.variant!r}")
        if self.variant == "dirichlet" and (self.beta is None or not self.beta > 0):
            raise PartitionError("dirichlet partition needs beta > 0")
        if self.variant == "explicit" and self.assignments is None:
            raise PartitionError("explicit partition needs per-client assignments")


@dataclass
class PartitionResult:
    clients: list[np.ndarray] = field(default_factory=list)

    def sizes(self) -> list[int]:
        return [len(c) for c in self.clients]


MAX_DIRICHLET_ATTEMPTS = 1000


def partition(
    dataset: Dataset,
    spec: PartitionSpec,
    n_clients: int,
    indices: Sequence[int] | None = None,
    seed: int = 0,
) -> PartitionResult:
    """Assign sample indices (default: all of them) to ``n_clients`` clients.

    ``seed`` is used when the spec carries none.
    """
    if n_clients < 1:
        raise PartitionError("n_clients must be >= 1")
    pool = np.arange(dataset.n_samples) if indices is None else np.sort(np.asarray(indices, dtype=np.int64))
    seed = spec.seed if spec.seed is not None else seed
    if spec.variant == "iid":
        return _partition_iid(pool, n_clients, seed)
    by_class = [pool[dataset.labels[pool] == c] for c in range(dataset.n_classes)]
    if spec.variant == "dirichlet":
        return _partition_dirichlet(by_class, spec.beta, n_clients, seed)
    return _partition_explicit(by_class, spec.assignments, n_clients, seed)


def _partition_iid(pool: np.ndarray, n_clients: int, seed: int) -> PartitionResult:
    if len(pool) < n_clients:
        raise PartitionError(f"{len(pool)} samples cannot cover {n_clients} clients")
    shuffled = pool[PortableRNG(seed).permutation(len(pool))]
    return PartitionResult([np.sort(shuffled[k::n_clients]) for k in range(n_clients)])


def _partition_dirichlet(by_class, beta: float, n_clients: int, seed: int) -> PartitionResult:
    if sum(len(c) for c in by_class) < n_clients:
        raise PartitionError(f"too few samples for {n_clients} clients")
    rng = PortableRNG(seed)
    for _ in range(MAX_DIRICHLET_ATTEMPTS):
        buckets: list[list[int]] = [[] for _ in range(n_clients)]
        for members in by_class:
            members = members[rng.permutation(len(members))]
            proportions = rng.dirichlet(beta, n_clients)
            counts = largest_remainder(proportions, len(members))
            offset = 0
            for k, cnt in enumerate(counts):
                buckets[k].extend(members[offset : offset + cnt].tolist())
                offset += cnt
        if all(buckets):
            return PartitionResult([np.array(sorted(b), dtype=np.int64) for b in buckets])
    raise PartitionError(f"no dirichlet draw left every client non-empty in {MAX_DIRICHLET_ATTEMPTS} attempts")


def _partition_explicit(by_class, assignments, n_clients: int, seed: int) -> PartitionResult:
    if len(assignments) != n_clients:
        raise PartitionError(f"explicit assignment lists {len(assignments)} clients, expected {n_clients}")
    n_classes = len(by_class)
    demand = [0] * n_classes
    for per_client in assignments:
        for cls, cnt in per_client:
            if not 0 <= cls < n_classes:
                raise PartitionError(f"class {cls} not present in dataset")
            if cnt < 0:
                raise PartitionError("sample counts must be non-negative")
            demand[cls] += cnt
    for cls, need in enumerate(demand):
        if need > len(by_class[cls]):
            raise PartitionError(
                f"class {cls} over-allocated: {need} requested, {len(by_class[cls])} available "
                f"(deficit {need - len(by_class[cls])})"
            )
    rng = PortableRNG(seed)
    queues = [members[rng.permutation(len(members))] for members in by_class]
    cursor = [0] * n_classes
    clients = []
    for per_client in assignments:
        taken = []
        for cls, cnt in per_client:
            taken.extend(queues[cls][cursor[cls] : cursor[cls] + cnt].tolist())
            cursor[cls] += cnt
        clients.append(np.array(sorted(taken), dtype=np.int64))
    return PartitionResult(clients)


def class_group_assignments(
    groups: Sequence[tuple[int, int]],
    n_classes: int,
    samples_per_client: int,
) -> list[list[tuple[int, int]]]:
    """Explicit assignment for groups of (n_clients, classes_per_client).

    Within a group, local client i holds classes ``(i*k + j) mod n_classes``
    for j < k, so each group covers the classes evenly; every client holds
    ``samples_per_client`` samples split as evenly as possible over its classes.
    """
    out = []
    for n_group, k in groups:
        if not 1 <= k <= n_classes:
            raise PartitionError(f"classes per client must be in [1, {n_classes}], got {k}")
        split = largest_remainder([1.0] * k, samples_per_client)
        for i in range(n_group):
            out.append([((i * k + j) % n_classes, split[j]) for j in range(k)])
    return out


def max_samples_per_client(groups, n_classes: int, available: Sequence[int]) -> int:
    """Largest per-client total for which ``class_group_assignments`` fits."""
    total = min(available) * n_classes  # loose upper bound
    lo, hi = 0, max(1, total)
    while lo < hi:
        mid = (lo + hi + 1) // 2
        demand = [0] * n_classes
        for per_client in class_group_assignments(groups, n_classes, mid):
            for cls, cnt in per_client:
                demand[cls] += cnt
        if all(d <= a for d, a in zip(demand, available)):
            lo = mid
        else:
            hi = mid - 1
    return lo


def distribution_matrix(result: PartitionResult, dataset: Dataset) -> np.ndarray:
    out = np.zeros((len(result.clients), dataset.n_classes), dtype=np.int64)
    for i, idx in enumerate(result.clients):
        out[i] = np.bincount(dataset.labels[idx], minlength=dataset.n_classes)
    return out


def distribution_csv(matrix: np.ndarray) -> str:
    header = "client," + ",".join(f"class_{c}" for c in range(matrix.shape[1]))
    rows = [f"{i}," + ",".join(str(int(v)) for v in row) for i, row in enumerate(matrix)]
    return "\n".join([header, *rows]) + "\n"


# -- binary layout, store, disk path ----------------------------------------


def encode_dataset(dataset: Dataset) -> bytes:
    header = HEADER.pack(MAGIC, VERSION, dataset.n_samples, dataset.feature_dim, dataset.n_classes, 0)
    return header + dataset.features.astype("<f4").tobytes() + dataset.labels.astype("<u2").tobytes()


def _decode_header(buf) -> tuple[int, int, int]:
    if len(buf) < HEADER.size:
        raise StoreError("buffer shorter than dataset header")
    magic, version, n, d, k, _ = HEADER.unpack_from(buf, 0)
    if magic != MAGIC:
        raise StoreError(f"bad magic {magic!r}")
    if version != VERSION:
        raise StoreError(f"unsupported dataset layout version {version}")
    expected = HEADER.size + n * d * 4 + n * 2
    if len(buf) != expected:
        raise StoreError(f"dataset buffer is {len(buf)} bytes, header implies {expected}")
    return n, d, k


def decode_dataset(buf, name: str = "dataset") -> Dataset:
    """Zero-copy view of an encoded dataset (bytes, mmap or memoryview)."""
    n, d, k = _decode_header(buf)
    features = np.frombuffer(buf, dtype="<f4", count=n * d, offset=HEADER.size).reshape(n, d)
    labels = np.frombuffer(buf, dtype="<u2", count=n, offset=HEADER.size + n * d * 4)
    return Dataset(features, labels, k, name)


def write_dataset_file(dataset: Dataset, path: str | os.PathLike) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(encode_dataset(dataset))
    os.replace(tmp, path)
    return path


def read_dataset_file(path: str | os.PathLike) -> Dataset:
    return decode_dataset(Path(path).read_bytes(), Path(path).stem)


class PreloadStore:
    """Read-only in-memory dataset image shared by every attached client.

    The image is either an immutable ``bytes`` object (single-process modes)
    or a read-only memory map of a dataset file (multi-process modes).
    """

    def __init__(self, image, name: str = "dataset", path: Path | None = None):
        _decode_header(image)
        self._image = image
        self._view = decode_dataset(image, name)
        self.name = name
        self.path = path
        self.refcount = 0
        self.feature_copies = 1
        self._released = False
        self._lock = threading.Lock()

    @classmethod
    def from_file(cls, path: str | os.PathLike) -> "PreloadStore":
        path = Path(path)
        with open(path, "rb") as fh:
            image = mmap.mmap(fh.fileno(), 0, access=mmap.ACCESS_READ)
        return cls(image, path.stem, path)

    @property
    def nbytes(self) -> int:
        return len(self._image)

    def attach(self) -> Dataset:
        with self._lock:
            if self._released:
                raise StoreError("store has been released")
            self.refcount += 1
        return self._view

    def detach(self) -> None:
        with self._lock:
            self.refcount = max(0, self.refcount - 1)

    def release(self) -> None:
        with self._lock:
            self._released = True
        self._view = None
        # the mmap stays mapped while numpy views reference it; closing it here would fault them


def build_store(dataset: Dataset) -> PreloadStore:
    return PreloadStore(encode_dataset(dataset), dataset.name)


def attach_store(store: PreloadStore) -> Dataset:
    return store.attach()


class StoreSource:
    """A client's samples served from a preload store (no I/O)."""

    def __init__(self, view: Dataset, indices: np.ndarray):
        self.view = view
        self.indices = np.asarray(indices, dtype=np.int64)

    def __len__(self) -> int:
        return len(self.indices)

    def read(self, positions):
        rows = self.indices[positions]
        return self.view.features[rows].astype(np.float64), self.view.labels[rows].astype(np.int64)


class SimulatedDisk:
    """One storage device shared by every reader in the process.

    Each batch read holds the device for ``latency_us`` (reads from concurrent
    clients queue behind each other, as they would on one disk) and then reads
    the requested rows from the dataset file.
    """

    def __init__(self, path: str | os.PathLike, latency_us: int = 0):
        self.path = Path(path)
        self.latency_us = int(latency_us)
        self._lock = threading.Lock()
        self._fd = os.open(self.path, os.O_RDONLY)
        header = os.pread(self._fd, HEADER.size, 0)
        magic, version, n, d, k, _ = HEADER.unpack(header)
        if magic != MAGIC or version != VERSION:
            raise StoreError(f"{self.path} is not a dataset file")
        self.n_samples, self.feature_dim, self.n_classes = n, d, k
        self.reads = 0

    def read_rows(self, rows: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        d = self.feature_dim
        feat_off = HEADER.size
        label_off = HEADER.size + self.n_samples * d * 4
        x = np.empty((len(rows), d), dtype=np.float32)
        y = np.empty(len(rows), dtype=np.uint16)
        with self._lock:
            if self.latency_us:
                time.sleep(self.latency_us / 1e6)
            for i, r in enumerate(rows):
                x[i] = np.frombuffer(os.pread(self._fd, 4 * d, feat_off + int(r) * 4 * d), dtype="<f4")
                y[i] = np.frombuffer(os.pread(self._fd, 2, label_off + int(r) * 2), dtype="<u2")[0]
            self.reads += 1
        return x, y

    def close(self) -> None:
        if self._fd is not None:
            os.close(self._fd)
            self._fd = None


class DiskSource:
    """A client's samples read through the simulated disk path."""

    def __init__(self, disk: SimulatedDisk, indices: np.ndarray):
        self.disk = disk
        self.indices = np.asarray(indices, dtype=np.int64)

    def __len__(self) -> int:
        return len(self.indices)

    def read(self, positions):
        x, y = self.disk.read_rows(self.indices[positions])
        return x.astype(np.float64), y.astype(np.int64)
