"""Datasets, non-IID client partitions, augmentation and batch sampling."""

from __future__ import annotations

import csv
import json
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

log = logging.getLogger(__name__)

FXDS_MAGIC = b"FXDS"
FXDS_VERSION = 1
_FXDS_HEADER = struct.Struct("<4s6I")


class DatasetError(ValueError):
    """A dataset file is unreadable or fails validation."""


@dataclass
class Dataset:
    samples: np.ndarray  # (count, channels, height, width), float32 in [0, 1]
    labels: np.ndarray  # (count,), integer class ids
    class_count: int

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.samples.ndim != 4:
            raise DatasetError(f"samples must be (count, C, H, W), got {self.samples.shape}")
        if len(self.labels) != len(self.samples):
            raise DatasetError(f"{len(self.labels)} labels for {len(self.samples)} samples")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.class_count):
            raise DatasetError(f"labels must lie in [0, {self.class_count})")
        if self.samples.size and (self.samples.min() < 0 or self.samples.max() > 1):
            raise DatasetError("pixel values must lie in [0, 1]")
        if not np.isfinite(self.samples).all():
            raise DatasetError("samples contain non-finite values")

    def __len__(self) -> int:
        return len(self.samples)

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return tuple(self.samples.shape[1:])

    @property
    def feature_dim(self) -> int:
        return int(np.prod(self.image_shape))

    def subset(self, indices) -> Dataset:
        idx = np.asarray(indices, dtype=np.int64)
        return Dataset(self.samples[idx], self.labels[idx], self.class_count)

    def flat(self) -> np.ndarray:
        return self.samples.reshape(len(self), -1)


# -- file formats ----------------------------------------------------------------


def write_fxds(dataset: Dataset, path) -> None:
    count, c, h, w = dataset.samples.shape
    header = _FXDS_HEADER.pack(FXDS_MAGIC, FXDS_VERSION, count, c, h, w, dataset.class_count)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(np.ascontiguousarray(dataset.samples, dtype="<f4").tobytes())
        fh.write(dataset.labels.astype(np.uint8).tobytes())


def read_fxds(path) -> Dataset:
    blob = Path(path).read_bytes()
    if len(blob) < _FXDS_HEADER.size:
        raise DatasetError(f"{path}: file too short for an FXDS header ({len(blob)} bytes)")
    magic, version, count, c, h, w, k = _FXDS_HEADER.unpack_from(blob)
    if magic != FXDS_MAGIC:
        raise DatasetError(f"{path}: bad magic {magic!r}")
    if version != FXDS_VERSION:
        raise DatasetError(f"{path}: unsupported FXDS version {version}")
    pixels = count * c * h * w
    expected = _FXDS_HEADER.size + 4 * pixels + count
    if len(blob) != expected:
        raise DatasetError(f"{path}: payload is {len(blob)} bytes, header implies {expected} "
                           f"({count} x {c}x{h}x{w} floats + {count} labels)")
    samples = np.frombuffer(blob, dtype="<f4", count=pixels, offset=_FXDS_HEADER.size)
    labels = np.frombuffer(blob, dtype=np.uint8, count=count, offset=_FXDS_HEADER.size + 4 * pixels)
    return Dataset(samples.reshape(count, c, h, w).astype(np.float32), labels.copy(), k)


def write_csv(dataset: Dataset, path) -> None:
    flat = dataset.flat()
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["label"] + [f"p{i}" for i in range(flat.shape[1])])
        for label, row in zip(dataset.labels, flat):
            writer.writerow([int(label)] + [repr(float(v)) for v in row])


def read_csv(path, shape: tuple[int, int, int] | None = None,
             class_count: int | None = None) -> Dataset:
    """Read ``label,p0,p1,...`` rows; ``shape`` restores (C, H, W), default (1, 1, P)."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DatasetError(f"{path}: empty CSV") from None
        if not header or header[0] != "label":
            raise DatasetError(f"{path}: header must start with 'label'")
        width = len(header) - 1
        labels, rows = [], []
        for lineno, row in enumerate(reader, start=2):
            if len(row) != len(header):
                raise DatasetError(f"{path}:{lineno}: {len(row)} columns, header has {len(header)}")
            try:
                labels.append(int(row[0]))
                rows.append([float(v) for v in row[1:]])
            except ValueError as exc:
                raise DatasetError(f"{path}:{lineno}: {exc}") from exc
    samples = np.asarray(rows, dtype=np.float32).reshape(len(rows), width)
    if shape is None:
        shape = (1, 1, width)
    if int(np.prod(shape)) != width:
        raise DatasetError(f"{path}: shape {shape} does not hold {width} pixels")
    labels = np.asarray(labels, dtype=np.int64)
    if class_count is None:
        class_count = int(labels.max()) + 1 if len(labels) else 0
    return Dataset(samples.reshape(len(rows), *shape), labels, class_count)


def load_dataset(path, fmt: str | None = None, shape=None, class_count=None) -> Dataset:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"dataset not found: {path}")
    fmt = (fmt or path.suffix.lstrip(".")).lower()
    if fmt == "fxds":
        return read_fxds(path)
    if fmt == "csv":
        return read_csv(path, shape=shape, class_count=class_count)
    raise DatasetError(f"unknown dataset format {fmt!r} (expected fxds or csv)")


# -- synthetic desk-scale data ---------------------------------------------------


def make_synthetic_images(count: int, class_count: int = 10, channels: int = 3, size: int = 8,
                          seed: int = 0, template_seed: int = 1234, noise: float = 0.08) -> Dataset:
    """A small 10-class image set standing in for a downsampled benchmark.

    Each class is a fixed arrangement of coloured blobs (drawn from
    ``template_seed`` so train and test sets share classes).  Samples add a
    random shift, a random mirror, per-channel brightness/contrast changes,
    a distractor blob and pixel noise.
    """
    trng = np.random.default_rng(template_seed)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)

    def blob(cy, cx, sigma):
        return np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * sigma ** 2))

    templates = np.zeros((class_count, channels, size, size))
    for k in range(class_count):
        for _ in range(3):
            cy, cx = trng.uniform(0, size - 1, size=2)
            colour = trng.uniform(0.2, 1.0, size=channels)
            templates[k] += colour[:, None, None] * blob(cy, cx, trng.uniform(0.8, 2.0))
        templates[k] = 0.15 + 0.7 * templates[k] / templates[k].max()

    rng = np.random.default_rng(seed)
    labels = rng.integers(0, class_count, size=count)
    labels[:class_count] = np.arange(class_count)[: min(class_count, count)]
    rng.shuffle(labels)
    out = templates[labels].copy()
    shifts = rng.integers(-1, 2, size=(count, 2))
    for i, (dy, dx) in enumerate(shifts):
        out[i] = np.roll(out[i], (dy, dx), axis=(1, 2))
    flip = rng.random(count) < 0.5
    out[flip] = out[flip][..., ::-1]
    contrast = rng.uniform(0.75, 1.25, size=(count, channels, 1, 1))
    brightness = rng.uniform(-0.12, 0.12, size=(count, channels, 1, 1))
    out = (out - 0.5) * contrast + 0.5 + brightness
    cy, cx = rng.uniform(0, size - 1, size=(2, count))
    distract = np.exp(-((yy[None] - cy[:, None, None]) ** 2 + (xx[None] - cx[:, None, None]) ** 2) / 2.0)
    out += rng.uniform(-0.3, 0.3, size=(count, channels, 1, 1)) * distract[:, None]
    out += rng.normal(0, noise, size=out.shape)
    return Dataset(np.clip(out, 0, 1).astype(np.float32), labels, class_count)


# -- partitioning ----------------------------------------------------------------


@dataclass
class PartitionSpec:
    client_indices: list[np.ndarray]
    beta: float
    seed: int
    proportions: np.ndarray  # (class_count, clients); row k is class k's split

    @property
    def clients(self) -> int:
        return len(self.client_indices)

    def sizes(self) -> list[int]:
        return [len(ix) for ix in self.client_indices]

    def weights(self) -> list[float]:
        total = sum(self.sizes())
        return [s / total for s in self.sizes()]

    def class_histograms(self, labels: np.ndarray, class_count: int) -> np.ndarray:
        """(clients, class_count) sample counts."""
        return np.stack([np.bincount(labels[ix], minlength=class_count)
                         for ix in self.client_indices])

    def to_dict(self) -> dict:
        return {
            "beta": self.beta,
            "seed": self.seed,
            "proportions": self.proportions.tolist(),
            "client_indices": [ix.tolist() for ix in self.client_indices],
        }

    @classmethod
    def from_dict(cls, d: dict) -> PartitionSpec:
        return cls([np.asarray(ix, dtype=np.int64) for ix in d["client_indices"]],
                   float(d["beta"]), int(d["seed"]), np.asarray(d["proportions"], dtype=np.float64))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()))

    @classmethod
    def load(cls, path) -> PartitionSpec:
        return cls.from_dict(json.loads(Path(path).read_text()))


def _largest_remainder(total: int, shares: np.ndarray) -> np.ndarray:
    exact = total * shares
    counts = np.floor(exact).astype(np.int64)
    short = total - counts.sum()
    if short > 0:
        order = np.argsort(-(exact - counts), kind="stable")
        counts[order[:short]] += 1
    return counts


def dirichlet_partition(dataset: Dataset, clients: int, beta: float, seed: int,
                        min_size: int = 1, max_retries: int = 1000) -> PartitionSpec:
    """Split every class over ``clients`` by proportions drawn from Dir(beta).

    Draws are repeated (same seeded stream) until every client holds at
    least ``min_size`` samples.
    """
    if clients < 1:
        raise ValueError(f"need at least one client, got {clients}")
    if not beta > 0:
        raise ValueError(f"Dirichlet concentration must be positive, got {beta}")
    if len(dataset) < clients * max(min_size, 1):
        raise ValueError(f"dataset of {len(dataset)} samples is too small for {clients} clients "
                         f"with at least {max(min_size, 1)} samples each")
    rng = np.random.default_rng(seed)
    by_class = [np.flatnonzero(dataset.labels == k) for k in range(dataset.class_count)]
    for attempt in range(max_retries):
        proportions = np.empty((dataset.class_count, clients))
        parts: list[list[np.ndarray]] = [[] for _ in range(clients)]
        for k, members in enumerate(by_class):
            p = rng.dirichlet(np.full(clients, beta)) if clients > 1 else np.ones(1)
            proportions[k] = p
            shuffled = rng.permutation(members)
            counts = _largest_remainder(len(members), p)
            for j, chunk in enumerate(np.split(shuffled, np.cumsum(counts)[:-1])):
                parts[j].append(chunk)
        indices = [np.sort(np.concatenate(chunks)) for chunks in parts]
        if min(len(ix) for ix in indices) >= min_size:
            if attempt:
                log.info("Dirichlet partition accepted after %d redraws", attempt)
            return PartitionSpec(indices, float(beta), int(seed), proportions)
    raise ValueError(f"no Dirichlet draw gave every client >= {min_size} samples "
                     f"in {max_retries} attempts; raise beta or lower the client count")


# -- augmentation ----------------------------------------------------------------


@dataclass(frozen=True)
class AugmentPolicy:
    padding: int = 2
    flip_prob: float = 0.5
    scale_range: tuple[float, float] = (0.8, 1.2)
    shift_range: tuple[float, float] = (-0.1, 0.1)

    @classmethod
    def identity(cls) -> AugmentPolicy:
        return cls(padding=0, flip_prob=0.0, scale_range=(1.0, 1.0), shift_range=(0.0, 0.0))


def augment_batch(images: np.ndarray, policy: AugmentPolicy, rng: np.random.Generator) -> np.ndarray:
    """Random crop from a reflect-padded image, horizontal flip, per-channel affine jitter."""
    b, c, h, w = images.shape
    pad = policy.padding
    offsets = rng.integers(0, 2 * pad + 1, size=(b, 2))
    flips = rng.random(b) < policy.flip_prob
    scale = rng.uniform(*policy.scale_range, size=(b, c, 1, 1))
    shift = rng.uniform(*policy.shift_range, size=(b, c, 1, 1))
    out = images
    if pad:
        mode = "reflect" if pad < min(h, w) else "edge"
        padded = np.pad(images, ((0, 0), (0, 0), (pad, pad), (pad, pad)), mode=mode)
        rows = offsets[:, 0, None] + np.arange(h)
        cols = offsets[:, 1, None] + np.arange(w)
        out = padded[np.arange(b)[:, None, None, None], np.arange(c)[None, :, None, None],
                     rows[:, None, :, None], cols[:, None, None, :]]
    if flips.any():
        out = out.copy() if out is images else out
        out[flips] = out[flips][..., ::-1]
    out = out * scale + shift
    return np.clip(out, 0.0, 1.0).astype(images.dtype)


def augment_view(sample: np.ndarray, policy: AugmentPolicy, rng: np.random.Generator) -> np.ndarray:
    return augment_batch(sample[None], policy, rng)[0]


# -- batch sampling --------------------------------------------------------------


@dataclass
class BatchPair:
    """One training step's inputs: a batch, its augmented view and a reference batch."""

    x: np.ndarray
    x_aug: np.ndarray
    x_ref: np.ndarray
    index: np.ndarray = field(repr=False)
    ref_index: np.ndarray = field(repr=False)

    def __len__(self) -> int:
        return len(self.x)


def epoch_batches(images: np.ndarray, batch_size: int, rng: np.random.Generator,
                  policy: AugmentPolicy | None = None,
                  augment_both: bool = True) -> Iterator[BatchPair]:
    """Yield one epoch of batches over ``images`` (incomplete tail batch dropped).

    ``policy=None`` disables augmentation.  With ``augment_both`` the first
    view is augmented too; otherwise it is the raw batch.
    """
    count = len(images)
    if batch_size < 1 or count < batch_size:
        raise ValueError(f"client holds {count} samples, fewer than one batch of {batch_size}")
    order = rng.permutation(count)
    for start in range(0, count - batch_size + 1, batch_size):
        idx = order[start:start + batch_size]
        ref = rng.choice(count, size=batch_size, replace=False)
        raw = images[idx]
        if policy is None:
            x, x_aug = raw, raw.copy()
        else:
            x = augment_batch(raw, policy, rng) if augment_both else raw
            x_aug = augment_batch(raw, policy, rng)
        yield BatchPair(x, x_aug, images[ref], idx, ref)


def sample_batches(images: np.ndarray, batch_size: int, rng: np.random.Generator,
                   policy: AugmentPolicy | None = None, epochs: int = 1,
                   augment_both: bool = True) -> Iterator[BatchPair]:
    for _ in range(epochs):
        yield from epoch_batches(images, batch_size, rng, policy, augment_both)
