"""Synthetic datasets, label-skew partitioning and shared-data extraction.

Partitioning follows the piece-splitting construction: each class's training
samples are cut into ``P`` equal pieces, and every client receives
``classes_per_client`` pieces of distinct classes. With ``N`` clients and
``C`` classes, ``P = N * classes_per_client / C`` must be an integer.
"""

from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from .models import Batch
from .seeding import derive_seed

SCHEMES = ("non-iid-1", "non-iid-2", "non-iid-3", "iid")

# classes per client for a 10-class task; scaled for other class counts
_BASE_CLASSES = {"non-iid-1": 1, "non-iid-2": 2, "non-iid-3": 5, "iid": 10}


class InfeasiblePartition(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class Dataset:
    train: Batch
    test: Batch
    num_classes: int
    provenance: str = "synthetic-blobs"


@dataclass(frozen=True)
class PartitionSpec:
    scheme: str
    num_clients: int
    seed: int = 0

    def __post_init__(self):
        if self.scheme not in SCHEMES:
            raise ValueError(f"unknown scheme {self.scheme!r}; expected one of {SCHEMES}")
        if self.num_clients < 1:
            raise ValueError("num_clients must be positive")

    def classes_per_client(self, num_classes: int) -> int:
        base = _BASE_CLASSES[self.scheme]
        if self.scheme == "iid":
            return num_classes
        return int(min(num_classes, max(1, round(base * num_classes / 10))))


@dataclass(frozen=True, eq=False)
class ClientData:
    client_id: int
    private: Batch
    shared: Optional[Batch] = None

    @property
    def classes(self) -> np.ndarray:
        labels = [self.private.labels]
        if self.shared is not None:
            labels.append(self.shared.labels)
        return np.unique(np.concatenate(labels))

    @property
    def num_samples(self) -> int:
        return len(self.private) + (0 if self.shared is None else len(self.shared))


def _class_means(rng: np.random.Generator, num_classes: int, dim: int) -> np.ndarray:
    means = rng.standard_normal((num_classes, dim))
    return means / np.linalg.norm(means, axis=1, keepdims=True)


def make_blobs(num_classes: int, dim: int, per_class: int, spread: float, seed) -> Dataset:
    """Isotropic Gaussian clusters around unit-norm random means.

    Each class contributes ``per_class`` samples, 80% to train and 20% to
    test. Rows are grouped by class.
    """
    if min(num_classes, dim, per_class) < 1:
        raise ValueError("num_classes, dim and per_class must be positive")
    if spread < 0:
        raise ValueError("spread must be non-negative")
    rng = np.random.default_rng(seed)
    means = _class_means(rng, num_classes, dim)
    n_train = (per_class * 4) // 5
    xs_train, ys_train, xs_test, ys_test = [], [], [], []
    for c in range(num_classes):
        x = means[c] + spread * rng.standard_normal((per_class, dim))
        xs_train.append(x[:n_train])
        xs_test.append(x[n_train:])
        ys_train.append(np.full(n_train, c))
        ys_test.append(np.full(per_class - n_train, c))
    train = Batch(np.concatenate(xs_train), np.concatenate(ys_train))
    test = Batch(np.concatenate(xs_test), np.concatenate(ys_test))
    return Dataset(train, test, num_classes, "synthetic-blobs")


def make_source_domain(num_classes: int, dim: int, per_class: int, spread: float, seed) -> Dataset:
    """A related task with the same shape but independently drawn class means."""
    return make_blobs(num_classes, dim, per_class, spread, derive_seed(seed, "source-domain"))


def _class_indices(labels: np.ndarray, num_classes: int):
    return [np.flatnonzero(labels == c) for c in range(num_classes)]


def partition(dataset: Dataset, spec: PartitionSpec) -> list[ClientData]:
    """Split the training set across clients by label pieces.

    Client slot ``(j, m)`` (the j-th client in a seeded client order, its
    m-th piece) takes class ``perm[(j + m) % C]`` when ``C`` divides the
    client count (sliding class windows), and ``perm[(j * cpc + m) % C]``
    otherwise. Either way a client's classes are distinct and every class is
    used exactly ``P`` times. Samples left over after cutting a class into
    equal pieces are dropped.
    """
    num_classes = dataset.num_classes
    cpc = spec.classes_per_client(num_classes)
    n = spec.num_clients
    if (n * cpc) % num_classes:
        raise InfeasiblePartition(
            f"{n} clients x {cpc} classes is not a multiple of {num_classes} classes"
        )
    pieces = n * cpc // num_classes
    rng = np.random.default_rng(spec.seed)
    class_perm = rng.permutation(num_classes)
    client_order = rng.permutation(n)

    by_class = _class_indices(dataset.train.labels, num_classes)
    piece_idx = []
    for c in range(num_classes):
        idx = rng.permutation(by_class[c])
        size = len(idx) // pieces
        if size == 0:
            raise InfeasiblePartition(f"class {c} has fewer samples than {pieces} pieces")
        piece_idx.append([np.sort(idx[p * size : (p + 1) * size]) for p in range(pieces)])

    used = np.zeros(num_classes, dtype=int)
    assigned: dict[int, list[np.ndarray]] = {}
    for j in range(n):
        cid = int(client_order[j])
        parts = []
        for m in range(cpc):
            slot = j + m if n % num_classes == 0 else j * cpc + m
            c = int(class_perm[slot % num_classes])
            parts.append(piece_idx[c][used[c]])
            used[c] += 1
        assigned[cid] = parts

    clients = []
    for cid in range(n):
        idx = np.concatenate(assigned[cid])
        clients.append(ClientData(cid, dataset.train.subset(idx)))
    return clients


def _round_half_up(x: float) -> int:
    return int(np.floor(x + 0.5))


def extract_shared(client: ClientData, gamma: float, seed) -> ClientData:
    """Move a class-stratified ``gamma`` fraction of private samples to a shared shard."""
    if not 0.0 < gamma < 1.0:
        raise ValueError("gamma must lie strictly between 0 and 1")
    rng = np.random.default_rng(seed)
    labels = client.private.labels
    shared_idx = []
    for c in np.unique(labels):
        idx = np.flatnonzero(labels == c)
        take = _round_half_up(gamma * len(idx))
        if take:
            shared_idx.append(rng.choice(idx, size=take, replace=False))
    if not shared_idx:
        raise ValueError(
            f"gamma={gamma} leaves client {client.client_id} with no shared samples"
        )
    shared_idx = np.sort(np.concatenate(shared_idx))
    keep = np.setdiff1d(np.arange(len(labels)), shared_idx)
    return ClientData(client.client_id, client.private.subset(keep), client.private.subset(shared_idx))


# --- optional loader for idx-format image/label files (e.g. MNIST) ---

def _open(path: Path):
    return gzip.open(path, "rb") if path.suffix == ".gz" else open(path, "rb")


def read_idx(path) -> np.ndarray:
    """Read one big-endian idx file (ubyte images or labels)."""
    path = Path(path)
    with _open(path) as fh:
        zero, dtype_code, ndim = struct.unpack(">HBB", fh.read(4))
        if zero != 0 or dtype_code != 0x08:
            raise ValueError(f"{path} is not an unsigned-byte idx file")
        shape = struct.unpack(">" + "I" * ndim, fh.read(4 * ndim))
        data = np.frombuffer(fh.read(), dtype=np.uint8)
    if data.size != int(np.prod(shape)):
        raise ValueError(f"{path}: header says {shape} but found {data.size} bytes")
    return data.reshape(shape)


def load_idx_pair(images_path, labels_path) -> Batch:
    images = read_idx(images_path)
    labels = read_idx(labels_path)
    if images.shape[0] != labels.shape[0]:
        raise ValueError("image and label counts differ")
    return Batch(images.reshape(images.shape[0], -1) / 255.0, labels.astype(np.int64))


IDX_FILES = (
    "train-images-idx3-ubyte",
    "train-labels-idx1-ubyte",
    "t10k-images-idx3-ubyte",
    "t10k-labels-idx1-ubyte",
)


def load_idx_dataset(directory, num_classes: int = 10) -> Dataset:
    """Load the standard four-file idx layout from ``directory`` (optionally gzipped)."""
    directory = Path(directory)
    paths = []
    for name in IDX_FILES:
        plain, gz = directory / name, directory / (name + ".gz")
        if plain.exists():
            paths.append(plain)
        elif gz.exists():
            paths.append(gz)
        else:
            raise FileNotFoundError(f"missing {plain} (or .gz)")
    train = load_idx_pair(paths[0], paths[1])
    test = load_idx_pair(paths[2], paths[3])
    return Dataset(train, test, num_classes, "file")
