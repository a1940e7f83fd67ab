"""Synthetic image datasets, non-IID client partitioning and the FDS1 format.

The synthetic generators stand in for the real medical datasets: `bars`
places a bright class-indexed horizontal band, `blobs` a class-indexed
Gaussian bump. Both give images in [0, 1] with balanced labels.

FDS1 file layout (little-endian):
    magic 'FDS1' | u32 n_samples | u32 channels | u32 height | u32 width
    | u32 n_classes | u8 labels[n_samples] | f32 pixels (NCHW, C order)
"""

import struct
from dataclasses import dataclass, replace

import numpy as np

__all__ = [
    "Dataset",
    "Partition",
    "gen_synthetic",
    "partition_noniid",
    "split_train_test",
    "hflip",
    "preprocess",
    "save_fds1",
    "load_fds1",
]

_MAGIC = b"FDS1"

# Bar contrast is deliberately mild: wide bright bars with a large pixel gap
# make trained models so robust that small-budget attacks never flip them,
# while this gap keeps a nearest-mean classifier near-perfect at low noise
# and leaves trained models accurate but attackable at eps ~ 0.05.
_BAR_HI = 0.59
_BAR_LO = 0.41
_BLOB_AMP = 0.7
_BLOB_BG = 0.15


@dataclass
class Dataset:
    """Image batch (N, C, H, W) in [0, 1] with integer labels."""

    images: np.ndarray
    labels: np.ndarray
    class_count: int
    name: str = "dataset"
    normalized: bool = False  # True once preprocess() rescaled out of [0, 1]

    def __post_init__(self):
        self.images = np.ascontiguousarray(self.images, dtype=np.float64)
        self.labels = np.ascontiguousarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4:
            raise ValueError(f"images must be NCHW, got shape {self.images.shape}")
        if self.labels.shape != (self.images.shape[0],):
            raise ValueError("labels length must match sample count")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.class_count):
            raise ValueError(f"labels must lie in [0, {self.class_count})")
        if not self.normalized and len(self.labels):
            lo, hi = self.images.min(), self.images.max()
            if lo < 0.0 or hi > 1.0:
                raise ValueError(f"pixels must lie in [0, 1], got [{lo:g}, {hi:g}]")

    def __len__(self) -> int:
        return self.images.shape[0]

    @property
    def sample_shape(self) -> tuple[int, int, int]:
        return self.images.shape[1:]

    def subset(self, indices, name=None) -> "Dataset":
        indices = np.asarray(indices, dtype=np.int64)
        return replace(self, images=self.images[indices], labels=self.labels[indices],
                       name=name or self.name)


@dataclass
class Partition:
    """Disjoint per-client index lists plus aggregation weights p_i = |D_i| / |D|."""

    client_indices: list[np.ndarray]
    weights: np.ndarray

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        if abs(self.weights.sum() - 1.0) > 1e-12:
            raise ValueError(f"client weights sum to {self.weights.sum()!r}, expected 1")

    @property
    def clients(self) -> int:
        return len(self.client_indices)


def _balanced_labels(n: int, classes: int) -> np.ndarray:
    return np.arange(n, dtype=np.int64) % classes


def gen_synthetic(kind: str, classes: int, n: int, shape, noise_sd: float,
                  rng: np.random.Generator) -> Dataset:
    """Generate a labeled synthetic image dataset (`bars` or `blobs`)."""
    c, h, w = (int(v) for v in shape)
    if classes < 2:
        raise ValueError("need at least 2 classes")
    if n < classes:
        raise ValueError(f"n={n} must be >= classes={classes}")
    if noise_sd < 0:
        raise ValueError("noise_sd must be >= 0")
    labels = _balanced_labels(n, classes)
    if kind == "bars":
        if h < classes:
            raise ValueError(f"height {h} too small for {classes} bar bands")
        band = h // classes
        images = np.full((n, c, h, w), _BAR_LO)
        for k in range(classes):
            rows = slice(k * band, (k + 1) * band)
            images[labels == k, :, rows, :] = _BAR_HI
    elif kind == "blobs":
        if min(h, w) < 4:
            raise ValueError(f"shape {h}x{w} too small for blob placement")
        ys, xs = np.mgrid[0:h, 0:w]
        radius = min(h, w) / 3.5
        sigma = min(h, w) / 6.0
        images = np.empty((n, c, h, w))
        for k in range(classes):
            angle = 2.0 * np.pi * k / classes
            cy = (h - 1) / 2.0 + radius * np.sin(angle)
            cx = (w - 1) / 2.0 + radius * np.cos(angle)
            bump = _BLOB_BG + _BLOB_AMP * np.exp(
                -((ys - cy) ** 2 + (xs - cx) ** 2) / (2.0 * sigma**2))
            images[labels == k] = bump[None, None]
    else:
        raise ValueError(f"unknown synthetic kind {kind!r}")
    if noise_sd > 0:
        images = images + rng.normal(0.0, noise_sd, size=images.shape)
    images = np.clip(images, 0.0, 1.0)
    return Dataset(images, labels, classes, name=f"{kind}{h}x{w}")


def partition_noniid(d: Dataset, clients: int, skew: float,
                     rng: np.random.Generator) -> Partition:
    """Split sample indices across clients with label skew in [0, 1].

    skew=0 deals every class evenly across clients (IID); skew=1 sends each
    class entirely to its shard owner (client = class mod clients). In
    between, a `skew` fraction of each class is sharded and the rest dealt.
    """
    if clients < 1:
        raise ValueError("clients must be >= 1")
    if clients > len(d):
        raise ValueError(f"cannot split {len(d)} samples across {clients} clients")
    if not 0.0 <= skew <= 1.0:
        raise ValueError("skew must be in [0, 1]")
    buckets: list[list[np.ndarray]] = [[] for _ in range(clients)]
    deal_offset = 0
    for k in range(d.class_count):
        idx = np.flatnonzero(d.labels == k)
        idx = idx[rng.permutation(len(idx))]
        n_shard = int(round(skew * len(idx)))
        buckets[k % clients].append(idx[:n_shard])
        # Deal the remainder round-robin, rotating the starting client per class
        # so rounding leftovers don't always favor client 0.
        rest = idx[n_shard:]
        for j, sample in enumerate(rest):
            buckets[(deal_offset + j) % clients].append(np.array([sample]))
        deal_offset += len(rest)
    client_indices = []
    for parts in buckets:
        merged = np.concatenate(parts) if parts else np.zeros(0, dtype=np.int64)
        client_indices.append(np.sort(merged).astype(np.int64))
    sizes = np.array([len(ci) for ci in client_indices], dtype=np.float64)
    if sizes.min() == 0:
        # skew can starve a client of samples when classes < clients; reassign
        # one sample from the largest client to each empty one.
        for i, ci in enumerate(client_indices):
            if len(ci) == 0:
                donor = int(np.argmax([len(c) for c in client_indices]))
                client_indices[i] = client_indices[donor][:1]
                client_indices[donor] = client_indices[donor][1:]
        sizes = np.array([len(ci) for ci in client_indices], dtype=np.float64)
    return Partition(client_indices, sizes / sizes.sum())


def _largest_remainder_counts(class_sizes: np.ndarray, total_train: int) -> np.ndarray:
    """Per-class train counts summing exactly to total_train, each in [1, size-1]."""
    frac = class_sizes * total_train / class_sizes.sum()
    counts = np.floor(frac).astype(np.int64)
    counts = np.clip(counts, 1, class_sizes - 1)
    order = np.argsort(-(frac - np.floor(frac)))
    i = 0
    while counts.sum() < total_train and i < 10 * len(counts):
        k = order[i % len(order)]
        if counts[k] < class_sizes[k] - 1:
            counts[k] += 1
        i += 1
    while counts.sum() > total_train:
        k = int(np.argmax(counts - 1))
        counts[k] -= 1
    return counts


def split_train_test(d: Dataset, train_frac: float,
                     rng: np.random.Generator) -> tuple[Dataset, Dataset]:
    """Stratified disjoint split; train size is round(train_frac * N) exactly."""
    if not 0.0 < train_frac < 1.0:
        raise ValueError("train_frac must be in (0, 1)")
    class_sizes = np.array([(d.labels == k).sum() for k in range(d.class_count)])
    if class_sizes.min() < 2:
        raise ValueError("every class needs >= 2 samples for a stratified split")
    total_train = int(round(train_frac * len(d)))
    total_train = min(max(total_train, d.class_count), len(d) - d.class_count)
    counts = _largest_remainder_counts(class_sizes, total_train)
    train_idx, test_idx = [], []
    for k in range(d.class_count):
        idx = np.flatnonzero(d.labels == k)
        idx = idx[rng.permutation(len(idx))]
        train_idx.append(idx[:counts[k]])
        test_idx.append(idx[counts[k]:])
    train_idx = np.sort(np.concatenate(train_idx))
    test_idx = np.sort(np.concatenate(test_idx))
    return (d.subset(train_idx, name=f"{d.name}-train"),
            d.subset(test_idx, name=f"{d.name}-test"))


def hflip(images: np.ndarray) -> np.ndarray:
    """Mirror images along the width axis (an involution)."""
    return images[..., ::-1].copy()


def preprocess(d: Dataset, normalize: tuple[float, float] | None = None,
               hflip_p: float = 0.0,
               rng: np.random.Generator | None = None) -> Dataset:
    """Apply horizontal-flip augmentation and/or mean/sd normalization.

    Flip augmentation is meant for training splits only and replaces each
    image with its mirror with probability hflip_p. normalize=(mean, sd)
    rescales pixels to (x - mean) / sd; anything but the identity (0, 1)
    leaves [0, 1] and marks the dataset as normalized.
    """
    if not 0.0 <= hflip_p <= 1.0:
        raise ValueError("hflip_p must be in [0, 1]")
    images = d.images
    if hflip_p > 0.0:
        if rng is None:
            raise ValueError("hflip augmentation requires an rng")
        flip = rng.random(len(d)) < hflip_p
        images = images.copy()
        images[flip] = hflip(images[flip])
    normalized = d.normalized
    if normalize is not None:
        mean, sd = (float(v) for v in normalize)
        if sd <= 0:
            raise ValueError("normalize sd must be > 0")
        if (mean, sd) != (0.0, 1.0):
            images = (images - mean) / sd
            normalized = True
    return replace(d, images=images, normalized=normalized)


def save_fds1(path, d: Dataset) -> None:
    if d.normalized:
        raise ValueError("FDS1 stores pixels in [0, 1]; cannot save normalized data")
    if d.class_count > 255:
        raise ValueError("FDS1 labels are u8; class_count must be <= 255")
    n, c, h, w = d.images.shape
    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(struct.pack("<5I", n, c, h, w, d.class_count))
        f.write(d.labels.astype(np.uint8).tobytes())
        f.write(d.images.astype("<f4").tobytes())


def load_fds1(path, name: str | None = None) -> Dataset:
    with open(path, "rb") as f:
        data = f.read()
    if data[:4] != _MAGIC:
        raise ValueError(f"{path}: not an FDS1 file (bad magic)")
    n, c, h, w, classes = struct.unpack_from("<5I", data, 4)
    pos = 24
    expected = pos + n + 4 * n * c * h * w
    if len(data) != expected:
        raise ValueError(f"{path}: file length {len(data)} != expected {expected}")
    labels = np.frombuffer(data, dtype=np.uint8, count=n, offset=pos).astype(np.int64)
    pos += n
    pixels = np.frombuffer(data, dtype="<f4", count=n * c * h * w, offset=pos)
    images = pixels.astype(np.float64).reshape(n, c, h, w)
    if len(labels) and labels.max() >= classes:
        raise ValueError(f"{path}: label {labels.max()} out of range for {classes} classes")
    if len(labels) and (images.min() < 0.0 or images.max() > 1.0):
        raise ValueError(f"{path}: pixels outside [0, 1]")
    return Dataset(images, labels, classes, name=name or str(path))
