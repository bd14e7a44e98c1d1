"""Datasets, deterministic splits, and memorization-ordered forget partitions."""

from __future__ import annotations

import hashlib
import json
import pickle
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
import torch

SPLIT_FORMAT_VERSION = 1

CIFAR10_MEAN = (0.4914, 0.4822, 0.4465)
CIFAR10_STD = (0.2470, 0.2435, 0.2616)
CIFAR100_MEAN = (0.5071, 0.4865, 0.4409)
CIFAR100_STD = (0.2673, 0.2564, 0.2762)
SVHN_MEAN = (0.4377, 0.4438, 0.4728)
SVHN_STD = (0.1980, 0.2010, 0.1970)

DEFAULT_NORMALIZATION = {
    "cifar10": (CIFAR10_MEAN, CIFAR10_STD),
    "cifar10-subset": (CIFAR10_MEAN, CIFAR10_STD),
    "cifar100": (CIFAR100_MEAN, CIFAR100_STD),
    "svhn": (SVHN_MEAN, SVHN_STD),
    "synthetic-gauss": None,
}


class DataError(Exception):
    pass


class UnknownDatasetError(DataError):
    pass


class DatasetFilesError(DataError):
    """Dataset files are missing or unreadable under the given root."""


class SplitError(DataError):
    pass


class PartitionError(DataError):
    pass


@dataclass(frozen=True, eq=False)
class DatasetHandle:
    """An in-memory labelled image dataset.

    ``images`` is an ``N x C x H x W`` float32 tensor (channels first, the
    layout torch convolutions consume); ``example_ids`` are stable integers.
    """

    name: str
    images: torch.Tensor
    labels: torch.Tensor
    num_classes: int
    example_ids: np.ndarray
    _index: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        if len(self.images) != len(self.labels) or len(self.labels) != len(self.example_ids):
            raise DataError("images, labels and example_ids differ in length")
        if len(np.unique(self.example_ids)) != len(self.example_ids):
            raise DataError("example ids are not unique")
        if len(self.labels) and (int(self.labels.min()) < 0 or int(self.labels.max()) >= self.num_classes):
            raise DataError("label out of range")
        self._index.update({int(i): k for k, i in enumerate(self.example_ids)})

    def __len__(self):
        return len(self.example_ids)

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return tuple(self.images.shape[1:])

    def positions(self, ids: Iterable[int]) -> torch.Tensor:
        try:
            return torch.tensor([self._index[int(i)] for i in ids], dtype=torch.long)
        except KeyError as exc:
            raise DataError(f"unknown example id {exc.args[0]}") from None

    def subset(self, ids: Iterable[int]) -> tuple[torch.Tensor, torch.Tensor]:
        pos = self.positions(ids)
        return self.images[pos], self.labels[pos]

    def label_of(self, ids: Iterable[int]) -> np.ndarray:
        return self.labels[self.positions(ids)].numpy()

    @classmethod
    def from_arrays(cls, name, images, labels, num_classes, example_ids=None):
        images = torch.as_tensor(np.asarray(images, dtype=np.float32))
        if images.ndim == 2:
            images = images[:, None, None, :]
        labels = torch.as_tensor(np.asarray(labels, dtype=np.int64))
        if example_ids is None:
            example_ids = np.arange(len(labels), dtype=np.int64)
        return cls(name, images, labels, int(num_classes), np.asarray(example_ids, dtype=np.int64))


def _normalize(images_hwc_uint8: np.ndarray, normalization) -> torch.Tensor:
    x = images_hwc_uint8.astype(np.float32) / 255.0
    if normalization is not None:
        mean, std = normalization
        x = (x - np.asarray(mean, np.float32)) / np.asarray(std, np.float32)
    return torch.from_numpy(np.ascontiguousarray(x.transpose(0, 3, 1, 2)))


def _unpickle(path: Path) -> dict:
    try:
        with open(path, "rb") as fh:
            return pickle.load(fh, encoding="latin1")
    except FileNotFoundError:
        raise DatasetFilesError(f"missing file {path}") from None
    except (pickle.UnpicklingError, EOFError, ValueError) as exc:
        raise DatasetFilesError(f"corrupt file {path}: {exc}") from None


def _cifar_batch(path: Path, label_key: str) -> tuple[np.ndarray, np.ndarray]:
    batch = _unpickle(path)
    try:
        data = np.asarray(batch["data"], dtype=np.uint8).reshape(-1, 3, 32, 32).transpose(0, 2, 3, 1)
        labels = np.asarray(batch[label_key], dtype=np.int64)
    except (KeyError, ValueError) as exc:
        raise DatasetFilesError(f"corrupt file {path}: {exc}") from None
    return data, labels


def _load_cifar10(root: Path):
    base = root / "cifar-10-batches-py"
    parts = [_cifar_batch(base / f"data_batch_{k}", "labels") for k in range(1, 6)]
    parts.append(_cifar_batch(base / "test_batch", "labels"))
    n_train = sum(len(p[1]) for p in parts[:-1])
    return np.concatenate([p[0] for p in parts]), np.concatenate([p[1] for p in parts]), 10, n_train


def _load_cifar100(root: Path):
    base = root / "cifar-100-python"
    parts = [_cifar_batch(base / "train", "fine_labels"), _cifar_batch(base / "test", "fine_labels")]
    return np.concatenate([p[0] for p in parts]), np.concatenate([p[1] for p in parts]), 100, len(parts[0][1])


def _load_svhn(root: Path):
    from scipy.io import loadmat

    images, labels = [], []
    for split in ("train", "test"):
        path = root / f"{split}_32x32.mat"
        if not path.exists():
            raise DatasetFilesError(f"missing file {path}")
        try:
            mat = loadmat(path)
        except Exception as exc:  # scipy raises several unrelated types for bad files
            raise DatasetFilesError(f"corrupt file {path}: {exc}") from None
        images.append(mat["X"].transpose(3, 0, 1, 2))
        y = mat["y"].reshape(-1).astype(np.int64)
        y[y == 10] = 0
        labels.append(y)
    return np.concatenate(images), np.concatenate(labels), 10, len(labels[0])


def synthetic_gauss(
    n: int = 300,
    num_classes: int = 3,
    image_size: int = 8,
    channels: int = 3,
    cluster_std: float = 1.0,
    label_noise: float = 0.0,
    seed: int = 0,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Seeded Gaussian blobs in image space.

    Class means are drawn from N(0, 1) per pixel; each example is its class
    mean plus ``cluster_std`` noise. A ``label_noise`` fraction of examples
    (chosen uniformly) get a uniformly drawn wrong label. Returns images in
    ``N x C x H x W`` layout, labels, and the boolean mislabel mask.
    """
    rng = np.random.default_rng(seed)
    means = rng.normal(size=(num_classes, channels, image_size, image_size))
    labels = np.arange(n) % num_classes
    rng.shuffle(labels)
    images = means[labels] + cluster_std * rng.normal(size=(n, channels, image_size, image_size))
    flipped = np.zeros(n, dtype=bool)
    n_noisy = int(round(label_noise * n))
    if n_noisy:
        idx = rng.choice(n, size=n_noisy, replace=False)
        labels[idx] = (labels[idx] + rng.integers(1, num_classes, size=n_noisy)) % num_classes
        flipped[idx] = True
    return images.astype(np.float32), labels.astype(np.int64), flipped


def load_dataset(name: str, root: str | Path = "data", normalization="default", **options) -> DatasetHandle:
    """Load a registered dataset.

    CIFAR/SVHN read the standard public archive layouts under ``root``
    (``cifar-10-batches-py/``, ``cifar-100-python/``, ``{train,test}_32x32.mat``);
    the official train and test parts are concatenated and ids are their
    positions in that order. ``cifar10-subset`` keeps ``subset_size`` (default
    5000) examples drawn with ``seed`` from the official training part.
    ``synthetic-gauss`` accepts the keyword arguments of :func:`synthetic_gauss`.
    """
    root = Path(root)
    if name not in DEFAULT_NORMALIZATION:
        raise UnknownDatasetError(f"unknown dataset {name!r}; known: {sorted(DEFAULT_NORMALIZATION)}")
    if isinstance(normalization, str):
        if normalization != "default":
            raise DataError(f"normalization must be 'default', None or (mean, std), got {normalization!r}")
        normalization = DEFAULT_NORMALIZATION[name]

    if name == "synthetic-gauss":
        images, labels, _ = synthetic_gauss(**options)
        x = torch.from_numpy(images)
        if normalization is not None:
            mean, std = normalization
            x = (x - torch.tensor(mean).view(1, -1, 1, 1)) / torch.tensor(std).view(1, -1, 1, 1)
        return DatasetHandle(name, x, torch.from_numpy(labels), int(options.get("num_classes", 3)), np.arange(len(labels)))

    if name in ("cifar10", "cifar10-subset"):
        images, labels, k, n_train = _load_cifar10(root)
    elif name == "cifar100":
        images, labels, k, n_train = _load_cifar100(root)
    else:
        images, labels, k, n_train = _load_svhn(root)
    ids = np.arange(len(labels), dtype=np.int64)

    if name == "cifar10-subset":
        size = int(options.get("subset_size", 5000))
        if size > n_train:
            raise DataError(f"subset_size {size} exceeds the {n_train} training examples")
        rng = np.random.default_rng(int(options.get("seed", 0)))
        ids = np.sort(rng.choice(n_train, size=size, replace=False))
        images, labels = images[ids], labels[ids]

    return DatasetHandle(name, _normalize(images, normalization), torch.from_numpy(labels), k, ids)


@dataclass(frozen=True)
class SplitSpec:
    train_ids: tuple[int, ...]
    retain_ids: tuple[int, ...]
    forget_ids: tuple[int, ...]
    test_ids: tuple[int, ...]
    seed: int

    def __post_init__(self):
        for name in ("train_ids", "retain_ids", "forget_ids", "test_ids"):
            object.__setattr__(self, name, tuple(sorted(int(i) for i in getattr(self, name))))
        self.check()

    def check(self):
        train, retain, forget = set(self.train_ids), set(self.retain_ids), set(self.forget_ids)
        if retain | forget != train or retain & forget:
            raise SplitError("retain and forget must partition the training ids")
        if train & set(self.test_ids):
            raise SplitError("test ids overlap training ids")

    def to_text(self) -> str:
        record = {
            "format": "splitspec",
            "version": SPLIT_FORMAT_VERSION,
            "seed": self.seed,
            "train_ids": list(self.train_ids),
            "retain_ids": list(self.retain_ids),
            "forget_ids": list(self.forget_ids),
            "test_ids": list(self.test_ids),
        }
        return json.dumps(record, sort_keys=True, separators=(",", ":")) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "SplitSpec":
        record = json.loads(text)
        if record.get("format") != "splitspec" or record.get("version") != SPLIT_FORMAT_VERSION:
            raise SplitError("not a version-1 splitspec record")
        return cls(record["train_ids"], record["retain_ids"], record["forget_ids"], record["test_ids"], record["seed"])

    def digest(self) -> str:
        return hashlib.sha256(self.to_text().encode()).hexdigest()[:16]


def make_splits(dataset: DatasetHandle, train_fraction: float, seed: int) -> SplitSpec:
    if not 0 < train_fraction < 1:
        raise SplitError(f"train_fraction must lie in (0, 1), got {train_fraction}")
    ids = np.sort(np.asarray(dataset.example_ids))
    n_train = int(round(train_fraction * len(ids)))
    if n_train == 0:
        raise SplitError("empty train split")
    if n_train == len(ids):
        raise SplitError("empty test split")
    perm = np.random.default_rng(seed).permutation(len(ids))
    train = ids[perm[:n_train]]
    return SplitSpec(train, train, (), ids[perm[n_train:]], seed)


def carve(split: SplitSpec, fraction: float, seed: int) -> tuple[SplitSpec, tuple[int, ...]]:
    """Move a seeded ``fraction`` of the training ids out of the split.

    Returns the reduced split and the carved ids (used for holdout models and
    auxiliary pretraining sets, which must never be seen by the original model).
    """
    if split.forget_ids:
        raise SplitError("carve before any forget set is built")
    if fraction <= 0:
        return split, ()
    ids = np.asarray(split.train_ids)
    k = int(round(fraction * len(ids)))
    if k <= 0 or k >= len(ids):
        raise SplitError(f"carve fraction {fraction} leaves an empty side")
    perm = np.random.default_rng(seed).permutation(len(ids))
    rest = ids[np.sort(perm[k:])]
    return SplitSpec(rest, rest, (), split.test_ids, split.seed), tuple(sorted(ids[perm[:k]].tolist()))


ORDER_LABELS = ("low", "medium", "high")


@dataclass(frozen=True)
class ForgetPartitioning:
    """M disjoint forget subsets in ascending proxy order."""

    partitions: tuple[tuple[int, ...], ...]
    proxy_kind: str
    proxy_snapshot: Mapping[int, float]
    strategy: str = "extremes"

    @property
    def order(self) -> tuple[str, ...]:
        if len(self.partitions) == 3:
            return ORDER_LABELS
        return tuple(f"p{k}" for k in range(len(self.partitions)))

    @property
    def forget_ids(self) -> tuple[int, ...]:
        return tuple(sorted(i for part in self.partitions for i in part))

    def check(self):
        seen: set[int] = set()
        for part in self.partitions:
            if seen & set(part):
                raise PartitionError("partitions overlap")
            seen |= set(part)
        key = lambda i: (self.proxy_snapshot[i], i)
        for a, b in zip(self.partitions, self.partitions[1:]):
            if a and b and max(map(key, a)) > min(map(key, b)):
                raise PartitionError("partitions are not in ascending proxy order")


def _rank_order(ids: Sequence[int], scores: Mapping[int, float]) -> list[int]:
    return sorted((int(i) for i in ids), key=lambda i: (float(scores[i]), i))


def build_forget_partitioning(
    split: SplitSpec,
    scores: Mapping[int, float],
    M: int = 3,
    N: int = 1000,
    strategy: str = "extremes",
    seed: int = 0,
    proxy_kind: str = "custom",
) -> tuple[SplitSpec, ForgetPartitioning]:
    """Select ``M`` partitions of ``N`` ids from the split's current retain pool.

    ``extremes`` ranks the whole pool by (score, id) and takes evenly spaced
    windows: the lowest N, the highest N, and for M=3 the N ranks centred on
    the median. ``random-then-sort`` samples M*N ids uniformly first and cuts
    the ranked sample into M contiguous blocks. New forget ids are added to any
    already in the split, so repeated calls implement continual removal.
    """
    pool = split.retain_ids
    if M < 1 or N < 1:
        raise PartitionError("M and N must be positive")
    if M * N > len(pool):
        raise PartitionError(f"need {M * N} examples but the pool holds {len(pool)}")
    missing = [i for i in pool if i not in scores]
    if missing:
        raise PartitionError(f"{len(missing)} pool ids lack scores, e.g. {missing[0]}")

    if strategy == "extremes":
        ranked = _rank_order(pool, scores)
        n = len(ranked)
        if M == 1:
            starts = [(n - N) // 2]
        else:
            starts = [k * (n - N) // (M - 1) for k in range(M)]
        parts = tuple(tuple(ranked[s : s + N]) for s in starts)
    elif strategy == "random-then-sort":
        rng = np.random.default_rng(seed)
        sample = rng.choice(np.asarray(pool), size=M * N, replace=False)
        ranked = _rank_order(sample.tolist(), scores)
        parts = tuple(tuple(ranked[k * N : (k + 1) * N]) for k in range(M))
    else:
        raise PartitionError(f"unknown strategy {strategy!r}")

    snapshot = {int(i): float(scores[i]) for i in pool}
    partitioning = ForgetPartitioning(parts, proxy_kind, snapshot, strategy)
    partitioning.check()

    forget = set(split.forget_ids) | set(partitioning.forget_ids)
    retain = [i for i in split.train_ids if i not in forget]
    return SplitSpec(split.train_ids, retain, sorted(forget), split.test_ids, split.seed), partitioning
