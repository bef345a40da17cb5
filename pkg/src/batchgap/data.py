"""Datasets, mini-batch sampling, micro-batch partitioning, accumulation.

Micro-batches are contiguous slices of an already-shuffled mini-batch, which
makes disjointness and coverage trivial and matches how gradient accumulation
walks a batch in practice.  Equal micro-batch sizes are enforced: a size that
does not divide the batch is a configuration error, never a silent truncation.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .models import ModelParams, batch_loss_and_gradient

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801

# shipped defaults for the synthetic benchmark; sized so a small-vs-large
# batch run finishes in minutes on a laptop CPU
DEFAULT_SYNTHETIC = dict(clusters=20, dim=64, size=8192, classes=10,
                         label_noise=0.1, separation=1.0)


class IdxFormatError(ValueError):
    """Raised for malformed IDX files, with the offending byte offset."""


@dataclass
class Dataset:
    """Immutable-by-convention array dataset with provenance for manifests."""

    inputs: np.ndarray
    labels: np.ndarray
    num_classes: int
    split: str = "train"
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        self.inputs = np.ascontiguousarray(self.inputs, dtype=np.float64)
        self.labels = np.ascontiguousarray(self.labels, dtype=np.int64)
        if self.inputs.ndim != 2:
            raise ValueError("inputs must be (n, d)")
        if self.labels.shape != (self.inputs.shape[0],):
            raise ValueError("labels must be (n,)")
        if self.inputs.shape[0] == 0:
            raise ValueError("dataset is empty")
        if self.labels.min() < 0 or self.labels.max() >= self.num_classes:
            raise ValueError(f"labels out of range [0, {self.num_classes})")

    @property
    def n(self) -> int:
        return self.inputs.shape[0]

    @property
    def dim(self) -> int:
        return self.inputs.shape[1]


def make_synthetic(clusters: int, dim: int, size: int, classes: int,
                   label_noise: float, seed: int, separation: float = 1.0,
                   input_scale: float = 1.0, split: str = "train",
                   centers: np.ndarray | None = None) -> Dataset:
    """Gaussian cluster mixture with class = cluster index mod classes.

    A fraction ``label_noise`` of the labels is resampled uniformly over all
    classes, which is what opens a generalization gap between batch regimes
    at this scale.  ``input_scale`` multiplies the whole input space; small
    scales keep the initial logits near zero so the early gradient-norm rise
    is observable.  Passing ``centers`` reuses cluster geometry across splits.
    """
    if clusters < classes:
        raise ValueError("need at least one cluster per class")
    if not 0.0 <= label_noise < 1.0:
        raise ValueError("label_noise must lie in [0, 1)")
    if input_scale <= 0:
        raise ValueError("input_scale must be positive")
    rng = np.random.default_rng(seed)
    if centers is None:
        centers = separation * rng.standard_normal((clusters, dim))
    elif centers.shape != (clusters, dim):
        raise ValueError("centers shape does not match (clusters, dim)")
    which = rng.integers(0, clusters, size=size)
    inputs = input_scale * (centers[which] + rng.standard_normal((size, dim)))
    labels = which % classes
    flip = rng.random(size) < label_noise
    labels = np.where(flip, rng.integers(0, classes, size=size), labels)
    prov = dict(kind="synthetic", clusters=clusters, dim=dim, size=size,
                classes=classes, label_noise=label_noise, seed=seed,
                separation=separation, input_scale=input_scale, split=split)
    return Dataset(inputs, labels, num_classes=classes, split=split, provenance=prov)


def make_synthetic_splits(clusters: int, dim: int, size: int, classes: int,
                          label_noise: float, seed: int, separation: float = 1.0,
                          input_scale: float = 1.0, val_size: int = 1024,
                          test_size: int = 2048) -> tuple[Dataset, Dataset, Dataset]:
    """Train/val/test splits over shared cluster centers.

    Label noise is applied to the training split only; evaluation splits stay
    clean so accuracy measures fit to the underlying structure.
    """
    root = np.random.SeedSequence(seed)
    center_kid, train_kid, val_kid, test_kid = root.spawn(4)
    centers = separation * np.random.default_rng(center_kid).standard_normal((clusters, dim))

    def child_seed(kid: np.random.SeedSequence) -> int:
        return int(kid.generate_state(1, np.uint64)[0])

    train = make_synthetic(clusters, dim, size, classes, label_noise,
                           seed=child_seed(train_kid), separation=separation,
                           input_scale=input_scale, split="train", centers=centers)
    val = make_synthetic(clusters, dim, val_size, classes, 0.0,
                         seed=child_seed(val_kid), separation=separation,
                         input_scale=input_scale, split="val", centers=centers)
    test = make_synthetic(clusters, dim, test_size, classes, 0.0,
                          seed=child_seed(test_kid), separation=separation,
                          input_scale=input_scale, split="test", centers=centers)
    for ds in (train, val, test):
        ds.provenance.update(root_seed=seed, val_size=val_size, test_size=test_size)
    return train, val, test


# ---------------------------------------------------------------------------
# IDX file format (big-endian, magic-checked)
# ---------------------------------------------------------------------------

def _read_exact(fh, count: int, offset: int, what: str) -> bytes:
    buf = fh.read(count)
    if len(buf) != count:
        raise IdxFormatError(
            f"truncated file while reading {what}: wanted {count} bytes at offset {offset}, "
            f"got {len(buf)}"
        )
    return buf


def load_idx(images_path, labels_path, whiten: bool = False) -> Dataset:
    """Load an image/label IDX pair; pixels are scaled to [0, 1]."""
    with open(images_path, "rb") as fh:
        head = _read_exact(fh, 16, 0, "image header")
        magic, count, rows, cols = struct.unpack(">IIII", head)
        if magic != IDX_IMAGES_MAGIC:
            raise IdxFormatError(
                f"bad image magic 0x{magic:08x} at offset 0 (expected 0x{IDX_IMAGES_MAGIC:08x})"
            )
        payload = _read_exact(fh, count * rows * cols, 16, "image payload")
        images = np.frombuffer(payload, dtype=np.uint8).reshape(count, rows * cols)
    with open(labels_path, "rb") as fh:
        head = _read_exact(fh, 8, 0, "label header")
        magic, lcount = struct.unpack(">II", head)
        if magic != IDX_LABELS_MAGIC:
            raise IdxFormatError(
                f"bad label magic 0x{magic:08x} at offset 0 (expected 0x{IDX_LABELS_MAGIC:08x})"
            )
        labels = np.frombuffer(_read_exact(fh, lcount, 8, "label payload"), dtype=np.uint8)
    if count != lcount:
        raise IdxFormatError(f"image count {count} does not match label count {lcount}")
    inputs = images.astype(np.float64) / 255.0
    if whiten:
        mu = inputs.mean(axis=0, keepdims=True)
        sd = inputs.std(axis=0, keepdims=True)
        inputs = (inputs - mu) / np.maximum(sd, 1e-8)
    classes = int(labels.max()) + 1 if labels.size else 1
    prov = dict(kind="idx", images=str(images_path), labels=str(labels_path), whiten=whiten)
    return Dataset(inputs, labels.astype(np.int64), num_classes=classes, provenance=prov)


def write_idx(dataset: Dataset, images_path, labels_path) -> None:
    """Write a dataset whose inputs lie in [0, 1] as a ubyte IDX pair.

    Values are quantized to the 1/255 grid; a load after a write is the
    identity exactly when the inputs already sit on that grid.
    """
    x = dataset.inputs
    if x.min() < 0.0 or x.max() > 1.0:
        raise ValueError("write_idx requires inputs in [0, 1]")
    if dataset.labels.max() > 255:
        raise ValueError("write_idx requires labels below 256")
    pixels = np.rint(x * 255.0).astype(np.uint8)
    with open(images_path, "wb") as fh:
        fh.write(struct.pack(">IIII", IDX_IMAGES_MAGIC, dataset.n, dataset.dim, 1))
        fh.write(pixels.tobytes())
    with open(labels_path, "wb") as fh:
        fh.write(struct.pack(">II", IDX_LABELS_MAGIC, dataset.n))
        fh.write(dataset.labels.astype(np.uint8).tobytes())


# ---------------------------------------------------------------------------
# micro-batch partitioning and gradient accumulation
# ---------------------------------------------------------------------------

@dataclass
class MicroBatchPartition:
    """A mini-batch index list split into equal contiguous slices."""

    indices: np.ndarray
    micro_size: int
    slices: list[np.ndarray]

    @property
    def k(self) -> int:
        return len(self.slices)


def partition_microbatches(batch_indices: np.ndarray, micro_size: int) -> MicroBatchPartition:
    idx = np.asarray(batch_indices)
    if micro_size < 1:
        raise ValueError("micro-batch size must be at least 1")
    if idx.size % micro_size != 0:
        raise ValueError(
            f"micro-batch size {micro_size} does not divide the batch size {idx.size}"
        )
    k = idx.size // micro_size
    slices = [idx[i * micro_size:(i + 1) * micro_size] for i in range(k)]
    return MicroBatchPartition(idx, micro_size, slices)


class BatchSampler:
    """Without-replacement epoch sampler; batches may straddle epoch ends.

    Each epoch is a fresh permutation of all indices, so over any window of
    exactly n draws every index appears exactly once per epoch touched.
    """

    def __init__(self, n: int, seed: int):
        if n < 1:
            raise ValueError("empty dataset")
        self.n = n
        self._rng = np.random.default_rng(seed)
        self._perm = self._rng.permutation(n)
        self._cursor = 0
        self.epochs_completed = 0

    def next_batch(self, batch_size: int) -> np.ndarray:
        if batch_size < 1:
            raise ValueError("batch size must be positive")
        out = np.empty(batch_size, dtype=np.int64)
        filled = 0
        while filled < batch_size:
            take = min(batch_size - filled, self.n - self._cursor)
            out[filled:filled + take] = self._perm[self._cursor:self._cursor + take]
            filled += take
            self._cursor += take
            if self._cursor == self.n:
                self._perm = self._rng.permutation(self.n)
                self._cursor = 0
                self.epochs_completed += 1
        return out


def microbatch_gradients(params: ModelParams, x: np.ndarray, y: np.ndarray,
                         partition: MicroBatchPartition, check_finite: bool = True
                         ) -> tuple[list[float], list[np.ndarray]]:
    """Loss and flat gradient of every micro-batch, in slice order."""
    losses, grads = [], []
    for sl in partition.slices:
        loss, g = batch_loss_and_gradient(params, x[sl], y[sl], check_finite=check_finite)
        losses.append(loss)
        grads.append(g)
    return losses, grads


def accumulate_full_gradient(params: ModelParams, x: np.ndarray, y: np.ndarray,
                             partition: MicroBatchPartition) -> np.ndarray:
    """Mean of the micro-batch gradients, summed in ascending slice order.

    With equal slice sizes this equals the single-pass full-batch gradient up
    to floating-point accumulation order.
    """
    _, grads = microbatch_gradients(params, x, y, partition)
    total = np.zeros_like(params.flat)
    for g in grads:
        total += g
    return total / partition.k
