"""Datasets, class-distribution algebra, EMD and client partitioning."""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import DataError, DomainError, FormatError, PartitionError, ShapeError, ConfigError

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


@dataclass(frozen=True)
class LabeledDataset:
    features: np.ndarray
    labels: np.ndarray
    num_classes: int

    def __post_init__(self):
        x = np.ascontiguousarray(self.features, dtype=np.float64)
        y = np.ascontiguousarray(self.labels, dtype=np.int64)
        if x.ndim != 2:
            raise ShapeError(f"features must be 2-D, got shape {x.shape}")
        if y.ndim != 1 or y.shape[0] != x.shape[0]:
            raise ShapeError(f"labels shape {y.shape} does not match {x.shape[0]} rows")
        if self.num_classes < 1:
            raise DataError("num_classes must be positive")
        if y.size and (y.min() < 0 or y.max() >= self.num_classes):
            raise DataError(f"labels must lie in [0, {self.num_classes})")
        if not np.all(np.isfinite(x)):
            raise DataError("features contain NaN or Inf")
        x.flags.writeable = False
        y.flags.writeable = False
        object.__setattr__(self, "features", x)
        object.__setattr__(self, "labels", y)

    def __len__(self) -> int:
        return int(self.labels.shape[0])

    @property
    def dim(self) -> int:
        return int(self.features.shape[1])

    def subset(self, indices) -> "LabeledDataset":
        idx = np.asarray(indices, dtype=np.int64)
        return LabeledDataset(self.features[idx], self.labels[idx], self.num_classes)

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.num_classes)

    def distribution(self) -> "ClassDistribution":
        return ClassDistribution.from_labels(self.labels, self.num_classes)

    @staticmethod
    def concat(parts: Sequence["LabeledDataset"]) -> "LabeledDataset":
        if not parts:
            raise DataError("cannot concatenate zero datasets")
        c = parts[0].num_classes
        if any(p.num_classes != c for p in parts):
            raise ShapeError("datasets disagree on num_classes")
        return LabeledDataset(
            np.concatenate([p.features for p in parts]),
            np.concatenate([p.labels for p in parts]),
            c,
        )


@dataclass(frozen=True)
class ClassDistribution:
    probs: np.ndarray

    def __post_init__(self):
        p = np.array(self.probs, dtype=np.float64)
        if p.ndim != 1 or p.size == 0:
            raise ShapeError("a class distribution is a non-empty vector")
        if np.any(p < 0) or abs(p.sum() - 1.0) > 1e-9:
            raise DomainError(f"not a probability vector: {p}")
        p.flags.writeable = False
        object.__setattr__(self, "probs", p)

    def __len__(self) -> int:
        return int(self.probs.size)

    @classmethod
    def uniform(cls, num_classes: int) -> "ClassDistribution":
        return cls(np.full(num_classes, 1.0 / num_classes))

    @classmethod
    def from_counts(cls, counts) -> "ClassDistribution":
        counts = np.asarray(counts, dtype=np.float64)
        return cls(counts / counts.sum())

    @classmethod
    def from_labels(cls, labels, num_classes: int) -> "ClassDistribution":
        if len(labels) == 0:
            raise DataError("empirical distribution of an empty label set")
        return cls.from_counts(np.bincount(np.asarray(labels), minlength=num_classes))


def _probs(d) -> np.ndarray:
    if isinstance(d, ClassDistribution):
        return d.probs
    return np.asarray(d, dtype=np.float64)


# ---------------------------------------------------------------- ingestion


def _read_idx(path, magic: int) -> tuple[tuple[int, ...], np.ndarray]:
    raw = Path(path).read_bytes()
    if len(raw) < 8:
        raise FormatError(f"{path}: truncated header")
    (found,) = struct.unpack(">I", raw[:4])
    if found != magic:
        raise FormatError(f"{path}: bad magic 0x{found:08x}, expected 0x{magic:08x}")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise FormatError(f"{path}: truncated header")
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    expected = int(np.prod(dims))
    body = np.frombuffer(raw, dtype=np.uint8, offset=header)
    if body.size != expected:
        raise FormatError(f"{path}: expected {expected} data bytes, found {body.size}")
    return dims, body.reshape(dims)


def load_idx(images_path, labels_path) -> LabeledDataset:
    """Read an MNIST-style IDX image/label pair, scaling pixels to [0, 1]."""
    idims, images = _read_idx(images_path, IDX_IMAGES_MAGIC)
    (n_labels,), labels = _read_idx(labels_path, IDX_LABELS_MAGIC)
    if idims[0] != n_labels:
        raise FormatError(f"{idims[0]} images but {n_labels} labels")
    if labels.size and labels.max() > 9:
        raise FormatError(f"label byte {int(labels.max())} outside 0-9")
    features = images.reshape(idims[0], -1).astype(np.float64) / 255.0
    return LabeledDataset(features, labels.astype(np.int64), 10)


def write_idx(images: np.ndarray, labels: np.ndarray, images_path, labels_path) -> None:
    """Write uint8 images [N, rows, cols] and labels [N] as IDX files."""
    images = np.asarray(images, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    with open(images_path, "wb") as f:
        f.write(struct.pack(">4I", IDX_IMAGES_MAGIC, *images.shape))
        f.write(images.tobytes())
    with open(labels_path, "wb") as f:
        f.write(struct.pack(">2I", IDX_LABELS_MAGIC, labels.shape[0]))
        f.write(labels.tobytes())


def gen_synthetic(
    num_classes: int, dim: int, per_class: int, separation: float, seed: int
) -> LabeledDataset:
    """Gaussian blobs: unit-variance clusters centred at ``separation`` times a
    random unit direction per class, ``per_class`` points each, shuffled."""
    if num_classes < 1 or dim < 1 or per_class < 1:
        raise ConfigError("num_classes, dim and per_class must be positive")
    rng = np.random.default_rng(seed)
    directions = rng.standard_normal((num_classes, dim))
    directions /= np.linalg.norm(directions, axis=1, keepdims=True)
    means = separation * directions
    labels = np.repeat(np.arange(num_classes), per_class)
    features = means[labels] + rng.standard_normal((labels.size, dim))
    order = rng.permutation(labels.size)
    return LabeledDataset(features[order], labels[order], num_classes)


def split_balanced(data: LabeledDataset, sizes: Sequence[int]) -> list[LabeledDataset]:
    """Cut ``data`` into disjoint class-balanced parts of the given sizes.

    Each part takes the next ``size / C`` examples of every class, keeping the
    original row order within the part.
    """
    C = data.num_classes
    if any(s < 0 or s % C for s in sizes):
        raise ConfigError(f"split sizes {list(sizes)} must be non-negative multiples of C={C}")
    by_class = [np.flatnonzero(data.labels == i) for i in range(C)]
    need = sum(sizes) // C
    short = [i for i, idx in enumerate(by_class) if idx.size < need]
    if short:
        raise DataError(f"class {short[0]} has {by_class[short[0]].size} examples, need {need}")
    cuts = np.cumsum([0] + [s // C for s in sizes])
    return [
        data.subset(np.sort(np.concatenate([idx[lo:hi] for idx in by_class])))
        for lo, hi in zip(cuts[:-1], cuts[1:])
    ]


# ------------------------------------------------------ distribution algebra


def emd(p, q) -> float:
    """Sum of absolute per-class probability differences."""
    a, b = _probs(p), _probs(q)
    if a.shape != b.shape:
        raise ShapeError(f"distributions over {a.size} and {b.size} classes")
    return float(np.abs(a - b).sum())


def max_emd(num_classes: int) -> float:
    return 2.0 * (1.0 - 1.0 / num_classes)


def _perturb_preserving_emd(d: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    # Zero-sum jitter inside each same-sign group of (d - u), capped at half the
    # smallest margin so no entry crosses u or leaves [0, 1].
    u = 1.0 / d.size
    out = d.copy()
    dev = d - u
    for mask in (dev > 0, dev < 0):
        idx = np.flatnonzero(mask)
        if idx.size < 2:
            continue
        vals = d[idx]
        margin = np.minimum(np.abs(vals - u), np.minimum(vals, 1.0 - vals)).min()
        eps = 0.5 * margin
        if eps <= 0:
            continue
        jitter = rng.uniform(-1.0, 1.0, idx.size)
        jitter -= jitter.mean()
        peak = np.abs(jitter).max()
        if peak == 0:
            continue
        out[idx] = vals + jitter * (eps / peak)
    return out


def gen_target_emd_distribution(
    target: float, num_classes: int, seed: int, perturb: bool = True
) -> ClassDistribution:
    """Distribution whose EMD to uniform equals ``target``.

    Interpolates between uniform and a seeded one-hot, then (optionally)
    jitters the mass so different seeds give different shapes at equal EMD.
    """
    top = max_emd(num_classes)
    if not (0.0 <= target <= top + 1e-12):
        raise DomainError(f"target EMD {target} outside [0, {top}]")
    rng = np.random.default_rng(seed)
    t = min(target / top, 1.0) if top > 0 else 0.0
    hot = int(rng.integers(num_classes))
    d = np.full(num_classes, (1.0 - t) / num_classes)
    d[hot] += t
    if perturb:
        d = _perturb_preserving_emd(d, rng)
    d = np.clip(d, 0.0, None)
    return ClassDistribution(d / d.sum())


def shift_distribution(d, by: int) -> ClassDistribution:
    return ClassDistribution(np.roll(_probs(d), by))


def largest_remainder(probs: np.ndarray, total: int) -> np.ndarray:
    """Integer counts summing to ``total``, closest to ``probs * total``.
    Ties in the remainder go to the lower index."""
    raw = np.asarray(probs, dtype=np.float64) * total
    counts = np.floor(raw).astype(np.int64)
    short = total - int(counts.sum())
    if short > 0:
        order = np.argsort(-(raw - counts), kind="stable")
        counts[order[:short]] += 1
    return counts


# ------------------------------------------------------------- partitioning


@dataclass(frozen=True)
class PartitionSpec:
    kind: str  # "iid" | "k_class" | "target_emd"
    K: int
    seed: int = 0
    classes_per_client: int = 1
    emd: float = 0.0

    def __post_init__(self):
        if self.kind not in ("iid", "k_class", "target_emd"):
            raise ConfigError(f"unknown partition kind {self.kind!r}", "partition.kind")
        if self.K < 1:
            raise ConfigError("K must be >= 1", "partition.K")
        if self.kind == "k_class" and self.classes_per_client < 1:
            raise ConfigError("classes_per_client must be >= 1", "partition.classes_per_client")
        if self.kind == "target_emd" and not (0.0 <= self.emd < 2.0):
            raise ConfigError("emd must lie in [0, 2)", "partition.emd")

    @classmethod
    def iid(cls, K: int, seed: int = 0) -> "PartitionSpec":
        return cls("iid", K, seed)

    @classmethod
    def k_class(cls, K: int, classes_per_client: int, seed: int = 0) -> "PartitionSpec":
        return cls("k_class", K, seed, classes_per_client=classes_per_client)

    @classmethod
    def target_emd(cls, K: int, emd: float, seed: int = 0) -> "PartitionSpec":
        return cls("target_emd", K, seed, emd=emd)


@dataclass(frozen=True)
class ClientShard:
    client_id: int
    data: LabeledDataset
    indices: np.ndarray = field(repr=False)
    dist: ClassDistribution = field(init=False, repr=False)

    def __post_init__(self):
        object.__setattr__(self, "dist", self.data.distribution())

    @property
    def n(self) -> int:
        return len(self.data)


def _iid_split(data: LabeledDataset, spec: PartitionSpec) -> list[np.ndarray]:
    n = len(data)
    if n % spec.K:
        raise PartitionError(f"N={n} not divisible by K={spec.K}")
    order = np.random.default_rng(spec.seed).permutation(n)
    return np.split(order, spec.K)


def _k_class_split(data: LabeledDataset, spec: PartitionSpec) -> list[np.ndarray]:
    c, K, n = spec.classes_per_client, spec.K, len(data)
    if c > data.num_classes:
        raise ConfigError("classes_per_client exceeds num_classes", "partition.classes_per_client")
    if n % (K * c):
        raise PartitionError(f"N={n} not divisible by K*classes_per_client={K * c}")
    sorted_idx = np.argsort(data.labels, kind="stable")
    pieces = np.split(sorted_idx, K * c)
    # majority label of each piece, used to prefer assignments with distinct classes
    piece_label = [int(np.bincount(data.labels[p]).argmax()) for p in pieces]
    rng = np.random.default_rng(spec.seed)
    for _ in range(100):
        perm = rng.permutation(K * c)
        groups = perm.reshape(K, c)
        if all(len({piece_label[j] for j in g}) == c for g in groups):
            break
    return [np.sort(np.concatenate([pieces[j] for j in g])) for g in groups]


def _target_emd_split(data: LabeledDataset, spec: PartitionSpec) -> list[np.ndarray]:
    C, K = data.num_classes, spec.K
    rng = np.random.default_rng(spec.seed)
    pools = [np.flatnonzero(data.labels == i) for i in range(C)]
    floor = min(len(p) for p in pools)
    pools = [rng.permutation(p)[:floor] for p in pools]
    total = floor * C
    if total % K:
        raise PartitionError(f"balanced pool of {total} not divisible by K={K}")
    per_client = total // K
    base = gen_target_emd_distribution(spec.emd, C, spec.seed)
    base_counts = largest_remainder(base.probs, per_client)
    cursor = np.zeros(C, dtype=np.int64)
    out = []
    for k in range(K):
        counts = np.roll(base_counts, k)
        chunks = []
        for i in range(C):
            if cursor[i] + counts[i] > len(pools[i]):
                raise PartitionError(f"class {i} pool exhausted at client {k}")
            chunks.append(pools[i][cursor[i]:cursor[i] + counts[i]])
            cursor[i] += counts[i]
        out.append(np.sort(np.concatenate(chunks)))
    return out


def partition(data: LabeledDataset, spec: PartitionSpec) -> list[ClientShard]:
    if spec.kind == "iid":
        groups = _iid_split(data, spec)
    elif spec.kind == "k_class":
        groups = _k_class_split(data, spec)
    else:
        groups = _target_emd_split(data, spec)
    return [ClientShard(k, data.subset(g), np.asarray(g, dtype=np.int64)) for k, g in enumerate(groups)]


def population_distribution(shards: Sequence[ClientShard]) -> ClassDistribution:
    counts = sum(s.data.class_counts() for s in shards)
    return ClassDistribution.from_counts(counts)


def mixture(shards: Sequence[ClientShard]) -> np.ndarray:
    """Sample-size weighted mix of client distributions."""
    n = np.array([s.n for s in shards], dtype=np.float64)
    w = n / n.sum()
    return sum(wk * s.dist.probs for wk, s in zip(w, shards))


def shards_to_json(shards: Sequence[ClientShard]) -> str:
    return json.dumps(
        [{"client_id": s.client_id, "indices": s.indices.tolist()} for s in shards]
    )


def shards_from_json(text: str, data: LabeledDataset) -> list[ClientShard]:
    out = []
    for entry in json.loads(text):
        idx = np.asarray(entry["indices"], dtype=np.int64)
        out.append(ClientShard(int(entry["client_id"]), data.subset(idx), idx))
    return out
