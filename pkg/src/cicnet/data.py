"""CIFAR-10/100 binary ingestion, normalization, augmentation and batching.

Binary record layouts (one file is a plain concatenation of records):

* CIFAR-10: 1 label byte + 3072 pixel bytes (1024 R, 1024 G, 1024 B, each
  a row-major 32x32 plane) = 3073 bytes.
* CIFAR-100: 1 coarse label byte + 1 fine label byte + 3072 pixel bytes =
  3074 bytes.
"""
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterator, Optional, Tuple

import numpy as np

from .errors import FormatError, NumericError, ParameterError

IMAGE_BYTES = 3 * 32 * 32
CIFAR10_TRAIN_FILES = tuple(f"data_batch_{i}.bin" for i in range(1, 6))
CIFAR10_TEST_FILES = ("test_batch.bin",)
CIFAR100_TRAIN_FILES = ("train.bin",)
CIFAR100_TEST_FILES = ("test.bin",)
EXPECTED_COUNTS = {"cifar10": (50000, 10000), "cifar100": (50000, 10000)}


@dataclass
class Dataset:
    """Images kept as raw bytes; :attr:`images` yields float64 tensors."""

    pixels: np.ndarray  # uint8 (N, 3, 32, 32)
    labels: np.ndarray  # int64 (N,)
    class_count: int
    split: str = "train"
    coarse_labels: Optional[np.ndarray] = None
    mean: Optional[np.ndarray] = None
    std: Optional[np.ndarray] = None

    def __len__(self) -> int:
        return len(self.labels)

    def images_at(self, idx) -> np.ndarray:
        x = self.pixels[idx].astype(np.float64) / 255.0
        if self.mean is not None:
            x = (x - self.mean[None, :, None, None]) / self.std[None, :, None, None]
        return x

    @property
    def images(self) -> np.ndarray:
        return self.images_at(slice(None))

    def subset(self, idx) -> "Dataset":
        coarse = None if self.coarse_labels is None else self.coarse_labels[idx]
        return replace(self, pixels=self.pixels[idx], labels=self.labels[idx], coarse_labels=coarse)


def _locate(root: Path, names, subdirs) -> Path:
    for base in [root] + [root / s for s in subdirs]:
        if all((base / n).is_file() for n in names):
            return base
    raise FileNotFoundError(f"{root}: missing {', '.join(names)}")


def parse_records(raw: bytes, label_bytes: int, label_limits: Tuple[int, ...], source: str = "<bytes>"):
    """Split raw bytes into ``(labels, pixels)``; ``labels`` has one column
    per label byte."""
    stride = label_bytes + IMAGE_BYTES
    if len(raw) == 0 or len(raw) % stride:
        raise FormatError(f"{source}: length {len(raw)} is not a positive multiple of {stride}")
    rec = np.frombuffer(raw, dtype=np.uint8).reshape(-1, stride)
    labels = rec[:, :label_bytes].astype(np.int64)
    for k, limit in enumerate(label_limits):
        bad = np.flatnonzero(labels[:, k] >= limit)
        if bad.size:
            raise FormatError(f"{source}: record {bad[0]} has label {labels[bad[0], k]} >= {limit}")
    pixels = rec[:, label_bytes:].reshape(-1, 3, 32, 32).copy()
    return labels, pixels


def _read_files(base: Path, names, label_bytes, limits):
    labels, pixels = [], []
    for n in names:
        lab, pix = parse_records((base / n).read_bytes(), label_bytes, limits, str(base / n))
        labels.append(lab)
        pixels.append(pix)
    return np.concatenate(labels), np.concatenate(pixels)


def load_cifar10(directory) -> Tuple[Dataset, Dataset]:
    root = Path(directory)
    base = _locate(root, CIFAR10_TRAIN_FILES + CIFAR10_TEST_FILES, ["cifar-10-batches-bin"])
    out = []
    for split, names in (("train", CIFAR10_TRAIN_FILES), ("test", CIFAR10_TEST_FILES)):
        labels, pixels = _read_files(base, names, 1, (10,))
        out.append(Dataset(pixels, labels[:, 0], 10, split))
    return out[0], out[1]


def load_cifar100(directory) -> Tuple[Dataset, Dataset]:
    root = Path(directory)
    base = _locate(root, CIFAR100_TRAIN_FILES + CIFAR100_TEST_FILES, ["cifar-100-binary"])
    out = []
    for split, names in (("train", CIFAR100_TRAIN_FILES), ("test", CIFAR100_TEST_FILES)):
        labels, pixels = _read_files(base, names, 2, (20, 100))
        out.append(Dataset(pixels, labels[:, 1], 100, split, coarse_labels=labels[:, 0]))
    return out[0], out[1]


def load_dataset(name: str, directory) -> Tuple[Dataset, Dataset]:
    if name == "cifar10":
        return load_cifar10(directory)
    if name == "cifar100":
        return load_cifar100(directory)
    raise ParameterError(f"unknown dataset {name!r}")


def to_bytes(ds: Dataset) -> bytes:
    """Serialize back into the binary record layout."""
    flat = ds.pixels.reshape(len(ds), IMAGE_BYTES)
    if ds.coarse_labels is None:
        head = ds.labels[:, None]
    else:
        head = np.stack([ds.coarse_labels, ds.labels], axis=1)
    return np.concatenate([head.astype(np.uint8), flat], axis=1).tobytes()


def write_cifar10(directory, train: Dataset, test: Dataset) -> Path:
    """Write ``train``/``test`` in the CIFAR-10 file layout (the training
    set is split across five batch files)."""
    root = Path(directory)
    root.mkdir(parents=True, exist_ok=True)
    for name, part in zip(CIFAR10_TRAIN_FILES, np.array_split(np.arange(len(train)), 5)):
        (root / name).write_bytes(to_bytes(train.subset(part)))
    (root / CIFAR10_TEST_FILES[0]).write_bytes(to_bytes(test))
    return root


def write_cifar100(directory, train: Dataset, test: Dataset) -> Path:
    root = Path(directory)
    root.mkdir(parents=True, exist_ok=True)
    (root / CIFAR100_TRAIN_FILES[0]).write_bytes(to_bytes(train))
    (root / CIFAR100_TEST_FILES[0]).write_bytes(to_bytes(test))
    return root


def synthetic(n: int, class_count: int = 10, seed: int = 0, split: str = "train") -> Dataset:
    """Random images with class-dependent color bias; stands in for real
    CIFAR data in tests."""
    rng = np.random.default_rng(seed)
    labels = np.arange(n) % class_count
    rng.shuffle(labels)
    tint = rng.integers(40, 216, size=(class_count, 3))
    noise = rng.integers(-40, 41, size=(n, 3, 32, 32), dtype=np.int16)
    pixels = np.clip(tint[labels][:, :, None, None].astype(np.int16) + noise, 0, 255).astype(np.uint8)
    coarse = labels // 5 if class_count == 100 else None
    return Dataset(pixels, labels.astype(np.int64), class_count, split, coarse_labels=coarse)


def noise_images(n: int, class_count: int = 10, seed: int = 0, split: str = "train") -> Dataset:
    """Uniform random pixels with balanced labels: learnable only by memorization."""
    rng = np.random.default_rng(seed)
    pixels = rng.integers(0, 256, size=(n, 3, 32, 32), dtype=np.uint8)
    labels = np.arange(n, dtype=np.int64) % class_count
    coarse = labels // 5 if class_count == 100 else None
    return Dataset(pixels, labels, class_count, split, coarse_labels=coarse)


# ---------------------------------------------------------------------------
# verification


@dataclass
class FileCheck:
    name: str
    records: int
    ok: bool
    message: str = ""


def verify_directory(directory, dataset: Optional[str] = None):
    """Check every expected file of a CIFAR directory.

    Returns ``(dataset_name, [FileCheck], {"train": n, "test": n})``.  The
    dataset kind is detected from the file names unless given.
    """
    root = Path(directory)
    layouts = {
        "cifar10": (CIFAR10_TRAIN_FILES, CIFAR10_TEST_FILES, 1, (10,), ["cifar-10-batches-bin"]),
        "cifar100": (CIFAR100_TRAIN_FILES, CIFAR100_TEST_FILES, 2, (20, 100), ["cifar-100-binary"]),
    }
    if dataset is None:
        for name, (tr, te, _, _, subs) in layouts.items():
            if any((b / tr[0]).exists() for b in [root] + [root / s for s in subs]):
                dataset = name
                break
        else:
            raise FileNotFoundError(f"{root}: no CIFAR-10 or CIFAR-100 binary files found")
    train_files, test_files, label_bytes, limits, subs = layouts[dataset]
    base = root
    for cand in [root] + [root / s for s in subs]:
        if (cand / train_files[0]).exists():
            base = cand
            break
    checks = []
    counts = {"train": 0, "test": 0}
    for split, names in (("train", train_files), ("test", test_files)):
        for n in names:
            path = base / n
            if not path.is_file():
                checks.append(FileCheck(n, 0, False, "missing"))
                continue
            try:
                labels, _ = parse_records(path.read_bytes(), label_bytes, limits, n)
            except FormatError as exc:
                checks.append(FileCheck(n, 0, False, str(exc)))
                continue
            checks.append(FileCheck(n, len(labels), True))
            counts[split] += len(labels)
    return dataset, checks, counts


# ---------------------------------------------------------------------------
# preprocessing


def compute_stats(ds: Dataset) -> Tuple[np.ndarray, np.ndarray]:
    """Per-channel mean and standard deviation of ``ds.images``."""
    mean = np.zeros(3)
    sq = np.zeros(3)
    n = 0
    for start in range(0, len(ds), 5000):
        x = ds.images_at(slice(start, start + 5000))
        mean += x.sum(axis=(0, 2, 3))
        sq += (x * x).sum(axis=(0, 2, 3))
        n += x.shape[0] * x.shape[2] * x.shape[3]
    mean /= n
    var = np.maximum(sq / n - mean * mean, 0.0)
    return mean, np.sqrt(var)


def normalize(ds: Dataset, stats: Tuple[np.ndarray, np.ndarray]) -> Dataset:
    """Per-channel ``(x - mean) / std``; ``stats`` must come from the train
    split (raw [0, 1] scale)."""
    mean, std = (np.asarray(s, dtype=np.float64) for s in stats)
    if np.any(std <= 0):
        raise NumericError("cannot normalize a channel with zero standard deviation")
    return replace(ds, mean=mean, std=std)


@dataclass(frozen=True)
class AugmentPolicy:
    mode: str = "none"  # none | flip | padcropflip
    pad: int = 4
    seed: int = 0

    def __post_init__(self):
        if self.mode not in ("none", "flip", "padcropflip"):
            raise ParameterError(f"unknown augmentation mode {self.mode!r}")


def augment(batch: np.ndarray, policy: AugmentPolicy, rng: Optional[np.random.Generator] = None,
            flips: Optional[np.ndarray] = None, offsets: Optional[np.ndarray] = None) -> np.ndarray:
    """Random horizontal flips (``flip``) or zero-pad, random crop and flip
    (``padcropflip``).  ``flips``/``offsets`` override the random draws."""
    if policy.mode == "none":
        return batch
    rng = rng if rng is not None else np.random.default_rng(policy.seed)
    n, _, h, w = batch.shape
    out = batch
    if policy.mode == "padcropflip":
        p = policy.pad
        if offsets is None:
            offsets = rng.integers(0, 2 * p + 1, size=(n, 2))
        padded = np.pad(batch, ((0, 0), (0, 0), (p, p), (p, p)))
        out = np.empty_like(batch)
        for i, (dy, dx) in enumerate(offsets):
            out[i] = padded[i, :, dy:dy + h, dx:dx + w]
    if flips is None:
        flips = rng.random(n) < 0.5
    if flips.any():
        out = out.copy() if out is batch else out
        out[flips] = out[flips][:, :, :, ::-1]
    return out


def batches(ds: Dataset, batch_size: int, shuffle: bool = False,
            seed: Optional[int] = 0) -> Iterator[Tuple[np.ndarray, np.ndarray]]:
    """One epoch of ``(images, labels)`` batches; the last batch may be short."""
    if batch_size < 1:
        raise ParameterError("batch_size must be >= 1")
    order = np.arange(len(ds))
    if shuffle:
        np.random.default_rng(seed).shuffle(order)
    for start in range(0, len(ds), batch_size):
        idx = order[start:start + batch_size]
        yield ds.images_at(idx), ds.labels[idx]
