"""Datasets: IDX and CIFAR-10 binary loaders, synthetic blobs, augmentation and batching."""
from __future__ import annotations

import gzip
import hashlib
import json
import os
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

IDX_LABELS = 0x00000801
IDX_IMAGES = 0x00000803
CIFAR_RECORD = 1 + 3 * 32 * 32

DATASET_FILES = {
    "fashion-mnist": {
        "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
        "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
    },
    "mnist": {
        "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
        "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
    },
    "cifar10": {
        "train": tuple(f"data_batch_{i}.bin" for i in range(1, 6)),
        "test": ("test_batch.bin",),
    },
}


class DataFormatError(ValueError):
    pass


@dataclass(frozen=True)
class AugmentSpec:
    random_crop_padding: int = 4
    horizontal_flip_p: float = 0.5
    normalize: bool = True

    def __post_init__(self):
        if self.random_crop_padding < 0 or not 0.0 <= self.horizontal_flip_p <= 1.0:
            raise ValueError("crop padding must be >= 0 and flip probability in [0, 1]")

    @classmethod
    def none(cls, normalize=True):
        return cls(0, 0.0, normalize)


@dataclass
class Dataset:
    """Images ``[N, C, H, W]`` in [0, 1] with integer labels."""

    images: np.ndarray
    labels: np.ndarray
    split: str = "train"
    class_count: int = 10
    mean: np.ndarray | None = None
    std: np.ndarray | None = None
    augment: AugmentSpec = field(default_factory=AugmentSpec.none)

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4:
            raise DataFormatError(f"images must be [N, C, H, W], got shape {self.images.shape}")
        if len(self.images) != len(self.labels):
            raise DataFormatError("image and label counts differ")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.class_count):
            raise DataFormatError(f"labels outside [0, {self.class_count})")

    def __len__(self):
        return len(self.labels)

    @property
    def shape(self):
        return tuple(self.images.shape[1:])

    def with_stats(self, mean, std) -> "Dataset":
        return replace(self, mean=np.asarray(mean, np.float32), std=np.asarray(std, np.float32))

    def compute_stats(self):
        m = self.images.mean(axis=(0, 2, 3), dtype=np.float64)
        s = self.images.std(axis=(0, 2, 3), dtype=np.float64)
        return m.astype(np.float32), np.maximum(s, 1e-8).astype(np.float32)

    def normalize(self, x):
        if not self.augment.normalize or self.mean is None:
            return x.astype(np.float32, copy=False)
        return ((x - self.mean[None, :, None, None]) / self.std[None, :, None, None]).astype(np.float32)

    def normalized_images(self):
        return self.normalize(self.images)

    def subset(self, k: int | None, rng: np.random.Generator) -> "Dataset":
        """First ``k`` samples after a seeded shuffle (all of them if ``k`` is None)."""
        if k is None or k >= len(self):
            return self
        idx = rng.permutation(len(self))[:k]
        return replace(self, images=self.images[idx], labels=self.labels[idx])


# ---------------------------------------------------------------------------
# file formats


def _read_bytes(path) -> bytes:
    path = Path(path)
    with open(path, "rb") as f:
        head = f.read(2)
    opener = gzip.open if head == b"\x1f\x8b" else open
    with opener(path, "rb") as f:
        return f.read()


def parse_idx(buf: bytes) -> np.ndarray:
    if len(buf) < 4:
        raise DataFormatError("truncated IDX header")
    magic = struct.unpack(">I", buf[:4])[0]
    if magic not in (IDX_LABELS, IDX_IMAGES):
        raise DataFormatError(f"bad IDX magic 0x{magic:08x}")
    ndim = magic & 0xFF
    hdr = 4 + 4 * ndim
    if len(buf) < hdr:
        raise DataFormatError("truncated IDX header")
    dims = struct.unpack(f">{ndim}I", buf[4:hdr])
    count = int(np.prod(dims))
    if len(buf) - hdr < count:
        raise DataFormatError(f"truncated IDX payload: need {count} bytes, have {len(buf) - hdr}")
    return np.frombuffer(buf, dtype=np.uint8, count=count, offset=hdr).reshape(dims)


def load_idx(path) -> np.ndarray:
    """Images as float32 ``[N, 1, H, W]`` scaled to [0, 1], or labels as int64 ``[N]``."""
    arr = parse_idx(_read_bytes(path))
    if arr.ndim == 1:
        return arr.astype(np.int64)
    return (arr.astype(np.float32) / 255.0)[:, None]


def encode_idx(arr: np.ndarray) -> bytes:
    arr = np.asarray(arr, dtype=np.uint8)
    magic = IDX_LABELS if arr.ndim == 1 else IDX_IMAGES
    return struct.pack(">I", magic) + struct.pack(f">{arr.ndim}I", *arr.shape) + arr.tobytes()


def load_cifar_binary(path, split="train") -> Dataset:
    buf = _read_bytes(path)
    if len(buf) % CIFAR_RECORD:
        raise DataFormatError(f"file size {len(buf)} is not a multiple of {CIFAR_RECORD}")
    rec = np.frombuffer(buf, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
    images = (rec[:, 1:].reshape(-1, 3, 32, 32).astype(np.float32) / 255.0)
    return Dataset(images, rec[:, 0].astype(np.int64), split, 10)


def synth_blobs(classes: int, shape=(1, 8, 8), count: int = 512, seed: int = 0, separation: float = 5.0,
                sigma: float = 0.05, split="train") -> Dataset:
    """Gaussian class-conditional images with pixel noise ``sigma``.

    Class means are random directions of length ``separation * sigma / sqrt(2)``,
    so two means are about ``separation`` noise units apart. The means depend
    on ``seed`` only; the train and test splits draw their own samples.
    """
    if classes < 2:
        raise ValueError("synth_blobs needs at least 2 classes")
    if count < classes:
        raise ValueError("count must be >= classes")
    d = int(np.prod(shape))
    centers = np.random.default_rng(seed).standard_normal((classes, d))
    rng = np.random.default_rng([seed, 0 if split == "train" else 1])
    centers *= separation * sigma / np.sqrt(2) / np.linalg.norm(centers, axis=1, keepdims=True)
    labels = np.arange(count) % classes
    rng.shuffle(labels)
    x = 0.5 + centers[labels] + sigma * rng.standard_normal((count, d))
    return Dataset(np.clip(x, 0.0, 1.0).astype(np.float32).reshape((count,) + tuple(shape)), labels, split, classes)


# ---------------------------------------------------------------------------
# augmentation and batching


def augment(batch: np.ndarray, spec: AugmentSpec, rng: np.random.Generator, dataset: Dataset | None = None):
    """Zero-pad random crop, random horizontal flip, then normalization with ``dataset`` stats."""
    n, c, h, w = batch.shape
    out = batch
    p = spec.random_crop_padding
    if p > 0:
        padded = np.zeros((n, c, h + 2 * p, w + 2 * p), batch.dtype)
        padded[:, :, p:p + h, p:p + w] = batch
        oy = rng.integers(0, 2 * p + 1, size=n)
        ox = rng.integers(0, 2 * p + 1, size=n)
        out = np.empty_like(batch)
        for i in range(n):
            out[i] = padded[i, :, oy[i]:oy[i] + h, ox[i]:ox[i] + w]
    if spec.horizontal_flip_p > 0:
        flip = rng.random(n) < spec.horizontal_flip_p
        if flip.any():
            out = out.copy() if out is batch else out
            out[flip] = out[flip][..., ::-1]
    if dataset is not None:
        out = dataset.normalize(out)
    return out.astype(np.float32, copy=False)


def iterate_minibatches(ds: Dataset, batch_size: int, rng: np.random.Generator, aug_rng=None, drop_last=False):
    """Shuffled minibatches, augmented per the dataset's AugmentSpec and normalized."""
    order = rng.permutation(len(ds))
    for i in range(0, len(order), batch_size):
        idx = order[i:i + batch_size]
        if drop_last and len(idx) < batch_size:
            break
        xb = ds.images[idx]
        if aug_rng is not None:
            xb = augment(xb, replace(ds.augment, normalize=False), aug_rng)
        yield ds.normalize(xb), ds.labels[idx]


# ---------------------------------------------------------------------------
# dataset root


def data_root(root=None) -> Path:
    root = root or os.environ.get("FGRAD_DATA_ROOT")
    if not root:
        raise FileNotFoundError("no data root: set FGRAD_DATA_ROOT or pass data.root")
    return Path(root)


def _find(directory: Path, name: str) -> Path:
    for cand in (directory / name, directory / (name + ".gz")):
        if cand.exists():
            return cand
    raise FileNotFoundError(f"missing {directory / name}[.gz]")


def load_split(name: str, split: str, root=None) -> Dataset:
    if name not in DATASET_FILES:
        raise ValueError(f"unknown dataset {name!r}; choose from {sorted(DATASET_FILES)}")
    directory = data_root(root) / name
    files = DATASET_FILES[name][split]
    if name == "cifar10":
        parts = [load_cifar_binary(_find(directory, f), split) for f in files]
        return Dataset(np.concatenate([p.images for p in parts]), np.concatenate([p.labels for p in parts]), split, 10)
    images = load_idx(_find(directory, files[0]))
    labels = load_idx(_find(directory, files[1]))
    return Dataset(images, labels, split, 10)


def dataset_stats(name: str, train: Dataset, root=None):
    """Per-channel train statistics, cached as ``stats.json`` beside the data."""
    path = data_root(root) / name / "stats.json"
    if path.exists():
        d = json.loads(path.read_text())
        return np.array(d["mean"], np.float32), np.array(d["std"], np.float32)
    mean, std = train.compute_stats()
    try:
        path.write_text(json.dumps({"mean": mean.tolist(), "std": std.tolist()}))
    except OSError:
        pass
    return mean, std


def checksums(name: str, root=None) -> dict:
    """sha256 of every expected file that is present (None when missing)."""
    directory = data_root(root) / name
    out = {}
    for split in ("train", "test"):
        for f in DATASET_FILES[name][split]:
            try:
                p = _find(directory, f)
            except FileNotFoundError:
                out[f] = None
                continue
            out[p.name] = hashlib.sha256(p.read_bytes()).hexdigest()
    return out


def load_datasets(name: str, subset_size=None, test_subset=None, augment_spec: AugmentSpec | None = None, seed=0,
                  root=None, synth: dict | None = None):
    """Train and test datasets with normalization stats from the (full) train split.

    ``name == "synth"`` builds :func:`synth_blobs` data from ``synth`` kwargs.
    """
    rng = np.random.default_rng([seed, 7])
    if name == "synth":
        kw = dict(classes=10, shape=(1, 8, 8), count=1024, separation=5.0)
        kw.update(synth or {})
        train = synth_blobs(seed=seed, split="train", **kw)
        test = synth_blobs(seed=seed, split="test", **kw)
        mean, std = train.compute_stats()
    else:
        train = load_split(name, "train", root)
        test = load_split(name, "test", root)
        mean, std = dataset_stats(name, train, root)
    if augment_spec is None:
        augment_spec = AugmentSpec.none() if name in ("fashion-mnist", "mnist", "synth") else AugmentSpec()
    train = replace(train.subset(subset_size, rng), augment=augment_spec).with_stats(mean, std)
    test = replace(test.subset(test_subset, rng), augment=replace(augment_spec, random_crop_padding=0,
                                                                   horizontal_flip_p=0.0)).with_stats(mean, std)
    return train, test
