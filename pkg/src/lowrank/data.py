"""MNIST ingestion: IDX parsing, a pooled resample into train/val/test, and
seeded per-epoch batching.

All shuffling runs off splitmix64 so partitions and batch orders are
reproducible from a single 64-bit seed, independent of numpy's generator
choices. Images are stored as float32 rows scaled into [0, 1]; the math
promotes to float64 as soon as they hit the weights.
"""

import gzip
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .network import Batch

IMAGES_MAGIC = 0x00000803
LABELS_MAGIC = 0x00000801

GOLDEN = 0x9E3779B97F4A7C15
MIX_A = 0xBF58476D1CE4E5B9
MIX_B = 0x94D049BB133111EB
MASK64 = (1 << 64) - 1

DATA_DIR_ENV = "LOWRANK_DATA_DIR"
MNIST_FILES = {
    "train_images": "train-images-idx3-ubyte",
    "train_labels": "train-labels-idx1-ubyte",
    "test_images": "t10k-images-idx3-ubyte",
    "test_labels": "t10k-labels-idx1-ubyte",
}


class SplitMix64:
    """splitmix64 stream: the state walks by the golden-ratio increment and
    each output is finalized by two xorshift-multiply rounds."""

    def __init__(self, seed: int):
        self.state = seed & MASK64

    def next(self) -> int:
        self.state = (self.state + GOLDEN) & MASK64
        z = self.state
        z = ((z ^ (z >> 30)) * MIX_A) & MASK64
        z = ((z ^ (z >> 27)) * MIX_B) & MASK64
        return z ^ (z >> 31)

    def stream(self, n: int) -> np.ndarray:
        """The next n outputs at once, as uint64."""
        if n == 0:
            return np.zeros(0, dtype=np.uint64)
        steps = np.arange(1, n + 1, dtype=np.uint64)
        z = np.uint64(self.state) + steps * np.uint64(GOLDEN)
        self.state = (self.state + n * GOLDEN) & MASK64
        z = (z ^ (z >> np.uint64(30))) * np.uint64(MIX_A)
        z = (z ^ (z >> np.uint64(27))) * np.uint64(MIX_B)
        return z ^ (z >> np.uint64(31))


def shuffled_indices(n: int, seed: int) -> np.ndarray:
    """Seed-deterministic permutation of range(n): each index gets a 64-bit
    key from the splitmix64 stream and a stable sort orders them."""
    keys = SplitMix64(seed).stream(n)
    return np.argsort(keys, kind="stable")


def epoch_seed(seed: int, epoch: int) -> int:
    """Derived shuffle seed for one epoch; one extra mixing round keeps
    neighboring epochs uncorrelated."""
    return SplitMix64(seed ^ ((epoch * GOLDEN) & MASK64)).next()


@dataclass
class Dataset:
    images: np.ndarray  # (N, D) rows in [0, 1]
    labels: np.ndarray  # (N,) integers in [0, 10)

    def __post_init__(self):
        if self.images.ndim != 2:
            raise ValueError(f"images must be (N, D), got shape {self.images.shape}")
        if self.labels.shape != (self.images.shape[0],):
            raise ValueError(
                f"{self.images.shape[0]} images but {self.labels.shape} labels"
            )

    def __len__(self):
        return self.images.shape[0]

    @property
    def n_features(self):
        return self.images.shape[1]

    def take(self, indices) -> "Dataset":
        return Dataset(self.images[indices], self.labels[indices])

    def as_batch(self) -> Batch:
        return Batch(np.ascontiguousarray(self.images.T), self.labels)


@dataclass
class SplitSpec:
    seed: int
    train: int = 50_000
    val: int = 10_000
    test: int = 10_000


class IdxFormatError(ValueError):
    pass


def _read_bytes(path) -> bytes:
    raw = Path(path).read_bytes()
    if raw[:2] == b"\x1f\x8b":
        return gzip.decompress(raw)
    return raw


def _be32(buf: bytes, offset: int, path) -> int:
    if len(buf) < offset + 4:
        raise IdxFormatError(f"{path}: truncated header at offset {offset}")
    return int.from_bytes(buf[offset : offset + 4], "big")


def load_idx(images_path, labels_path) -> Dataset:
    """Parse an IDX image/label file pair into a normalized dataset.

    Big-endian headers; magic 0x00000803 for images, 0x00000801 for labels.
    Pixel bytes are scaled by 1/255.
    """
    img = _read_bytes(images_path)
    magic = _be32(img, 0, images_path)
    if magic != IMAGES_MAGIC:
        raise IdxFormatError(
            f"{images_path}: bad magic {magic:#010x} at offset 0, "
            f"expected {IMAGES_MAGIC:#010x}"
        )
    count = _be32(img, 4, images_path)
    rows = _be32(img, 8, images_path)
    cols = _be32(img, 12, images_path)
    need = 16 + count * rows * cols
    if len(img) != need:
        raise IdxFormatError(
            f"{images_path}: expected {need} bytes for {count} images of "
            f"{rows}x{cols}, file has {len(img)} (truncated at offset {len(img)})"
        )

    lab = _read_bytes(labels_path)
    magic = _be32(lab, 0, labels_path)
    if magic != LABELS_MAGIC:
        raise IdxFormatError(
            f"{labels_path}: bad magic {magic:#010x} at offset 0, "
            f"expected {LABELS_MAGIC:#010x}"
        )
    lcount = _be32(lab, 4, labels_path)
    if lcount != count:
        raise IdxFormatError(
            f"count mismatch: {images_path} holds {count} images, "
            f"{labels_path} holds {lcount} labels"
        )
    if len(lab) != 8 + lcount:
        raise IdxFormatError(
            f"{labels_path}: expected {8 + lcount} bytes, file has {len(lab)} "
            f"(truncated at offset {len(lab)})"
        )

    pixels = np.frombuffer(img, dtype=np.uint8, offset=16)
    images = pixels.reshape(count, rows * cols).astype(np.float32) / np.float32(255.0)
    labels = np.frombuffer(lab, dtype=np.uint8, offset=8).astype(np.int64)
    bad = (labels < 0) | (labels > 9)
    if bad.any():
        where = int(np.argmax(bad))
        raise IdxFormatError(
            f"{labels_path}: label {labels[where]} out of range at index {where}"
        )
    return Dataset(images, labels)


def find_mnist_dir(explicit=None):
    """First directory that holds the four canonical files, or None.

    Search order: explicit argument, $LOWRANK_DATA_DIR, ./data/mnist,
    /root/data/mnist.
    """
    candidates = []
    if explicit:
        candidates.append(Path(explicit))
    env = os.environ.get(DATA_DIR_ENV)
    if env:
        candidates.append(Path(env))
    candidates.append(Path("data/mnist"))
    candidates.append(Path("/root/data/mnist"))
    for cand in candidates:
        if all(
            (cand / name).exists() or (cand / (name + ".gz")).exists()
            for name in MNIST_FILES.values()
        ):
            return cand
    return None


def _resolve(directory: Path, name: str) -> Path:
    plain = directory / name
    return plain if plain.exists() else directory / (name + ".gz")


def load_mnist_pool(directory) -> Dataset:
    """All 70,000 MNIST samples as one pool (train and test files merged)."""
    directory = Path(directory)
    train = load_idx(
        _resolve(directory, MNIST_FILES["train_images"]),
        _resolve(directory, MNIST_FILES["train_labels"]),
    )
    test = load_idx(
        _resolve(directory, MNIST_FILES["test_images"]),
        _resolve(directory, MNIST_FILES["test_labels"]),
    )
    return Dataset(
        np.concatenate([train.images, test.images], axis=0),
        np.concatenate([train.labels, test.labels], axis=0),
    )


def split(pool: Dataset, spec: SplitSpec):
    """Disjoint seeded partition of the pool into (train, val, test)."""
    total = spec.train + spec.val + spec.test
    if len(pool) < total:
        raise ValueError(f"pool of {len(pool)} cannot supply {total} samples")
    perm = shuffled_indices(len(pool), spec.seed)
    a, b = spec.train, spec.train + spec.val
    return (
        pool.take(perm[:a]),
        pool.take(perm[a:b]),
        pool.take(perm[b:total]),
    )


def mnist_splits(directory, seed: int, spec: SplitSpec = None):
    """Pool the canonical files and partition; the usual entry point."""
    if spec is None:
        spec = SplitSpec(seed=seed)
    return split(load_mnist_pool(directory), spec)


def batches(ds: Dataset, batch_size: int, seed: int, epoch: int):
    """One epoch of minibatches, reshuffled per (seed, epoch); the final
    short batch is kept."""
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    perm = shuffled_indices(len(ds), epoch_seed(seed, epoch))
    for start in range(0, len(ds), batch_size):
        idx = perm[start : start + batch_size]
        yield Batch(np.ascontiguousarray(ds.images[idx].T), ds.labels[idx])


def synthetic_dataset(n: int, n_features: int, n_classes: int, seed: int) -> Dataset:
    """Uniform noise images with random labels; benchmark fodder."""
    rng = np.random.default_rng(seed)
    images = rng.random((n, n_features), dtype=np.float32)
    labels = rng.integers(0, n_classes, size=n)
    return Dataset(images, labels)
