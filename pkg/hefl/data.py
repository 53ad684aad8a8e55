"""
Image datasets, the authentic/synthetic split and client partitions.

Datasets are array-backed ``ImageSet`` objects (images ``N×C×H×W`` in
``[0, 1]``, integer labels, integer sample ids). Sample identity is the
sample id, which stays unique across every set derived from one pool.
"""

import os
from typing import Iterator, List, Optional, Sequence, Tuple

import numpy as np
import pydantic
from loguru import logger

from hefl.errors import DataFormatError, PartitionError

CIFAR10_RECORD = 1 + 3 * 32 * 32
CIFAR10_TRAIN_FILES = tuple(f"data_batch_{i}.bin" for i in range(1, 6))
CIFAR10_TEST_FILE = "test_batch.bin"


class LabeledImage(pydantic.BaseModel):
    pixels: np.ndarray = pydantic.Field(..., description="C×H×W float64 pixels in [0, 1].")
    label: int = pydantic.Field(..., ge=0)
    sample_id: int

    class Config:
        arbitrary_types_allowed = True
        allow_mutation = False


class ImageSet(pydantic.BaseModel):
    images: np.ndarray
    labels: np.ndarray
    ids: np.ndarray

    class Config:
        arbitrary_types_allowed = True

    @pydantic.validator("images", pre=True)
    def _check_images(cls, value):
        value = np.asarray(value, dtype=np.float64)
        if value.ndim != 4:
            raise ValueError(f"images must be N×C×H×W, got shape {value.shape}")
        if value.size and (value.min() < 0.0 or value.max() > 1.0):
            raise ValueError("pixels must lie in [0, 1]")
        return value

    @pydantic.validator("labels", "ids", pre=True)
    def _as_int(cls, value):
        return np.asarray(value, dtype=np.int64).reshape(-1)

    @pydantic.root_validator(skip_on_failure=True)
    def _check_lengths(cls, values):
        n = len(values["images"])
        if len(values["labels"]) != n or len(values["ids"]) != n:
            raise ValueError("images, labels and ids must have the same length")
        if len(np.unique(values["ids"])) != n:
            raise ValueError("sample ids must be unique")
        return values

    def __len__(self) -> int:
        return len(self.labels)

    def __iter__(self) -> Iterator[LabeledImage]:
        for pixels, label, sample_id in zip(self.images, self.labels, self.ids):
            yield LabeledImage(pixels=pixels, label=int(label), sample_id=int(sample_id))

    @property
    def image_shape(self) -> Tuple[int, ...]:
        return tuple(self.images.shape[1:])

    def subset(self, indices: Sequence[int]) -> "ImageSet":
        indices = np.asarray(indices, dtype=np.int64)
        return ImageSet(images=self.images[indices], labels=self.labels[indices], ids=self.ids[indices])

    def select_ids(self, ids: Sequence[int]) -> "ImageSet":
        position = {int(sample_id): i for i, sample_id in enumerate(self.ids)}
        return self.subset([position[int(sample_id)] for sample_id in ids])

    def class_counts(self, num_classes: int) -> np.ndarray:
        return np.bincount(self.labels, minlength=num_classes)

    @classmethod
    def empty(cls, image_shape: Sequence[int]) -> "ImageSet":
        return cls(images=np.zeros((0, *image_shape)), labels=np.zeros(0), ids=np.zeros(0))


class ClientDataset(pydantic.BaseModel):
    client_id: int = pydantic.Field(..., ge=0)
    authentic: ImageSet
    synthetic: ImageSet

    class Config:
        allow_mutation = False

    @pydantic.root_validator(skip_on_failure=True)
    def _disjoint(cls, values):
        if np.intersect1d(values["authentic"].ids, values["synthetic"].ids).size:
            raise ValueError("authentic and synthetic samples must be disjoint")
        return values


class PartitionPlan(pydantic.BaseModel):
    """Assignment of pool positions to clients."""

    num_clients: int = pydantic.Field(..., ge=1)
    alpha: Optional[float] = pydantic.Field(None, description="Dirichlet concentration; None for IID.")
    seed: int
    indices: List[List[int]]

    class Config:
        allow_mutation = False

    @pydantic.root_validator(skip_on_failure=True)
    def _check_plan(cls, values):
        if len(values["indices"]) != values["num_clients"]:
            raise ValueError("one index list per client is required")
        flat = [i for client in values["indices"] for i in client]
        if len(flat) != len(set(flat)):
            raise ValueError("client partitions must be disjoint")
        return values

    @property
    def sizes(self) -> List[int]:
        return [len(client) for client in self.indices]

    def apply(self, pool: ImageSet) -> List[ImageSet]:
        return [pool.subset(client) for client in self.indices]


# --- Loaders.


def load_cifar10_binary(path: str, id_offset: int = 0) -> ImageSet:
    """
    Reads one CIFAR-10 binary batch: records of one label byte followed by
    3072 pixel bytes (1024 red, 1024 green, 1024 blue, row-major 32×32).

    Raises:
        DataFormatError: When the file is truncated or a label exceeds 9.
    """
    raw = np.fromfile(path, dtype=np.uint8)
    if raw.size % CIFAR10_RECORD:
        raise DataFormatError(f"{path}: {raw.size} bytes is not a whole number of {CIFAR10_RECORD}-byte records")
    records = raw.reshape(-1, CIFAR10_RECORD)
    labels = records[:, 0].astype(np.int64)
    if labels.size and labels.max() > 9:
        raise DataFormatError(f"{path}: label {labels.max()} out of range")
    images = records[:, 1:].reshape(-1, 3, 32, 32).astype(np.float64) / 255.0
    logger.debug(f"Loaded {len(labels)} CIFAR-10 records from {path}")
    return ImageSet(images=images, labels=labels, ids=id_offset + np.arange(len(labels)))


def load_cifar10_dir(directory: str) -> Tuple[ImageSet, ImageSet]:
    """Loads the five training batches and the test batch with globally unique ids."""
    parts, offset = [], 0
    for name in CIFAR10_TRAIN_FILES:
        part = load_cifar10_binary(os.path.join(directory, name), id_offset=offset)
        offset += len(part)
        parts.append(part)
    train = concat(parts)
    test = load_cifar10_binary(os.path.join(directory, CIFAR10_TEST_FILE), id_offset=offset)
    return train, test


def concat(parts: Sequence[ImageSet]) -> ImageSet:
    return ImageSet(
        images=np.concatenate([p.images for p in parts]),
        labels=np.concatenate([p.labels for p in parts]),
        ids=np.concatenate([p.ids for p in parts]),
    )


def _prototypes(num_classes: int, size: int, channels: int) -> np.ndarray:
    # One Gaussian blob per class, centres spread on a circle, tinted per channel.
    grid = np.arange(size, dtype=np.float64)
    yy, xx = np.meshgrid(grid, grid, indexing="ij")
    centre = (size - 1) / 2.0
    radius = size / 4.0
    width = max(size / 6.0, 1.0)
    protos = np.zeros((num_classes, channels, size, size))
    for k in range(num_classes):
        angle = 2.0 * np.pi * k / num_classes
        cy, cx = centre + radius * np.sin(angle), centre + radius * np.cos(angle)
        blob = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2.0 * width**2))
        for c in range(channels):
            protos[k, c] = blob * (1.0 - 0.5 * ((k + c) % channels) / max(channels, 1))
    return protos


def make_toy_dataset(
    num_classes: int,
    per_class: int,
    size: int,
    seed: int,
    channels: int = 1,
    noise: float = 0.1,
    id_offset: int = 0,
) -> ImageSet:
    """
    Deterministic synthetic image classification task: each class is a bright
    blob at its own position, perturbed by amplitude jitter and Gaussian pixel
    noise. Samples are ordered class-major.
    """
    if size < 8:
        raise ValueError(f"toy images must be at least 8 pixels wide, got {size}")
    if num_classes < 2 or per_class < 1:
        raise ValueError("need at least two classes and one sample per class")
    rng = np.random.default_rng(seed)
    protos = _prototypes(num_classes, size, channels)
    labels = np.repeat(np.arange(num_classes), per_class)
    amplitude = rng.uniform(0.7, 1.0, size=(len(labels), 1, 1, 1))
    images = amplitude * protos[labels] + rng.normal(0.0, noise, size=(len(labels), channels, size, size))
    return ImageSet(images=np.clip(images, 0.0, 1.0), labels=labels, ids=id_offset + np.arange(len(labels)))


# --- Splits and partitions.


def split_authentic_synthetic(pool: ImageSet, seed: int) -> Tuple[ImageSet, ImageSet]:
    """
    Stratified half split of ``pool``. Per class the two halves differ by at
    most one sample; the odd sample alternates between the halves so the
    totals differ by at most one as well.
    """
    if len(pool) < 2:
        raise PartitionError(f"need at least two samples to split, got {len(pool)}")
    rng = np.random.default_rng(seed)
    authentic, synthetic = [], []
    odd_to_authentic = True
    for label in np.unique(pool.labels):
        index = rng.permutation(np.flatnonzero(pool.labels == label))
        half = len(index) // 2
        if len(index) % 2:
            cut = half + 1 if odd_to_authentic else half
            odd_to_authentic = not odd_to_authentic
        else:
            cut = half
        authentic.extend(index[:cut])
        synthetic.extend(index[cut:])
    return pool.subset(np.sort(authentic)), pool.subset(np.sort(synthetic))


def _largest_remainder(proportions: np.ndarray, total: int) -> np.ndarray:
    raw = proportions * total
    counts = np.floor(raw).astype(np.int64)
    remainder = total - int(counts.sum())
    order = np.argsort(-(raw - counts), kind="stable")
    counts[order[:remainder]] += 1
    return counts


def partition_dirichlet(pool: ImageSet, num_clients: int, alpha: float, seed: int, max_retries: int = 100) -> PartitionPlan:
    """
    Per class, draws client proportions from ``Dirichlet(alpha)`` and turns
    them into integer counts by largest remainder (ties to the lowest client
    index). Draws are repeated until every client holds at least one sample.

    Raises:
        PartitionError: After ``max_retries`` draws that leave a client empty.
    """
    if num_clients < 1 or alpha <= 0:
        raise ValueError(f"need num_clients >= 1 and alpha > 0, got {num_clients}, {alpha}")
    if len(pool) < num_clients:
        raise PartitionError(f"{len(pool)} samples cannot cover {num_clients} clients")
    rng = np.random.default_rng(seed)
    for attempt in range(max_retries):
        clients: List[List[int]] = [[] for _ in range(num_clients)]
        for label in np.unique(pool.labels):
            index = rng.permutation(np.flatnonzero(pool.labels == label))
            counts = _largest_remainder(rng.dirichlet(np.full(num_clients, alpha)), len(index))
            for client, chunk in enumerate(np.split(index, np.cumsum(counts)[:-1])):
                clients[client].extend(int(i) for i in chunk)
        if all(clients):
            logger.debug(f"Dirichlet partition (alpha={alpha}) sizes {[len(c) for c in clients]} after {attempt + 1} draw(s)")
            return PartitionPlan(num_clients=num_clients, alpha=alpha, seed=seed, indices=[sorted(c) for c in clients])
        logger.trace(f"Dirichlet draw {attempt + 1} left a client empty, retrying")
    raise PartitionError(f"no non-empty partition for {num_clients} clients after {max_retries} draws (alpha={alpha})")


def partition_iid(pool: ImageSet, num_clients: int, seed: int) -> PartitionPlan:
    """Seeded shuffle, stable sort by class, then round-robin dealing."""
    if num_clients < 1:
        raise ValueError(f"need num_clients >= 1, got {num_clients}")
    if len(pool) < num_clients:
        raise PartitionError(f"{len(pool)} samples cannot cover {num_clients} clients")
    order = np.random.default_rng(seed).permutation(len(pool))
    order = order[np.argsort(pool.labels[order], kind="stable")]
    clients = [sorted(int(i) for i in order[c::num_clients]) for c in range(num_clients)]
    return PartitionPlan(num_clients=num_clients, alpha=None, seed=seed, indices=clients)


def build_client_datasets(
    authentic_pool: ImageSet,
    synthetic_pool: ImageSet,
    num_clients: int,
    alpha: float,
    dirichlet_seed: int,
    iid_seed: int,
) -> List[ClientDataset]:
    authentic = partition_dirichlet(authentic_pool, num_clients, alpha, dirichlet_seed).apply(authentic_pool)
    synthetic = partition_iid(synthetic_pool, num_clients, iid_seed).apply(synthetic_pool)
    return [ClientDataset(client_id=i, authentic=a, synthetic=s) for i, (a, s) in enumerate(zip(authentic, synthetic))]
