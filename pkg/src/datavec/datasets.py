"""Datasets: synthetic blob generation, CSV/IDX ingestion, and stratified splitting.

The synthetic generator stands in for real clinical data at desk scale: class
means are drawn once from the seed, samples are Gaussian around them, and a
domain-shift offset moves the means to emulate the pretrain-then-finetune
distribution gap.  Splitting simulates the N private shards.
"""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .errors import (
    BadMagic,
    EmptyDataset,
    LengthMismatch,
    ParseError,
    PartsExceedSamples,
)

# Sub-stream tags for seed derivation (np.random.SeedSequence entropy lists).
_MEANS_STREAM = 11
_SAMPLES_STREAM = 13


@dataclass(frozen=True)
class Dataset:
    """Feature matrix (n x d float32), integer labels, and the class count."""

    features: np.ndarray
    labels: np.ndarray
    num_classes: int
    id: str = ""

    def __post_init__(self):
        feats = np.ascontiguousarray(self.features, dtype=np.float32)
        labels = np.ascontiguousarray(self.labels, dtype=np.int64)
        if feats.ndim != 2:
            raise ValueError("features must be a 2-D matrix")
        if labels.ndim != 1 or len(labels) != len(feats):
            raise ValueError("labels must be one int per sample")
        if not np.all(np.isfinite(feats)):
            raise ValueError("features contain non-finite values")
        if self.num_classes < 1:
            raise ValueError("num_classes must be >= 1")
        if len(labels) and (labels.min() < 0 or labels.max() >= self.num_classes):
            raise ValueError("labels outside [0, num_classes)")
        feats.setflags(write=False)
        labels.setflags(write=False)
        object.__setattr__(self, "features", feats)
        object.__setattr__(self, "labels", labels)

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def subset(self, indices, id: str = "") -> "Dataset":
        idx = np.asarray(indices, dtype=np.int64)
        return Dataset(self.features[idx], self.labels[idx], self.num_classes, id or self.id)


@dataclass(frozen=True)
class SyntheticSpec:
    """Parameters of the Gaussian-blob generator.

    noise_sigma defaults to the frozen benchmark value (calibrated so a
    single-shard model lands around 0.6-0.8 test accuracy).
    """

    num_classes: int = 4
    dim: int = 16
    samples_per_class: int = 250
    mean_scale: float = 1.0
    noise_sigma: float = 1.25
    domain_shift: float = 0.0
    seed: int = 3315

    def __post_init__(self):
        if self.noise_sigma <= 0:
            raise ValueError("noise_sigma must be > 0")
        if self.num_classes < 1 or self.dim < 1 or self.samples_per_class < 1:
            raise ValueError("num_classes, dim, samples_per_class must be >= 1")


def _shift_salt(domain_shift: float) -> int:
    # Salt the sample stream with the shift's bit pattern so the shifted
    # (pretraining) draw is independent of the unshifted target draw.
    return int(np.float64(domain_shift).view(np.uint64))


def generate_blobs(spec: SyntheticSpec, id: str = "") -> Dataset:
    """Balanced Gaussian blobs; deterministic in the spec.

    Class means depend only on (seed, num_classes, dim, mean_scale), so specs
    differing only in domain_shift share means up to the constant offset.
    """
    means_rng = np.random.default_rng([spec.seed, _MEANS_STREAM])
    means = spec.mean_scale * means_rng.standard_normal((spec.num_classes, spec.dim))
    means = means + spec.domain_shift
    samples_rng = np.random.default_rng(
        [spec.seed, _SAMPLES_STREAM, _shift_salt(spec.domain_shift)]
    )
    blocks = []
    labels = []
    for c in range(spec.num_classes):
        noise = samples_rng.standard_normal((spec.samples_per_class, spec.dim))
        blocks.append(means[c] + spec.noise_sigma * noise)
        labels.append(np.full(spec.samples_per_class, c, dtype=np.int64))
    return Dataset(
        np.concatenate(blocks).astype(np.float32),
        np.concatenate(labels),
        spec.num_classes,
        id or f"blobs-c{spec.num_classes}-seed{spec.seed}",
    )


def stratified_split(data: Dataset, parts: int, seed: int) -> list[Dataset]:
    """Per-class seeded shuffle + round-robin assignment into `parts` disjoint datasets.

    Per-class counts across parts differ by at most one, and the multiset
    union of the parts equals the input exactly.
    """
    if parts < 1:
        raise ValueError("parts must be >= 1")
    if parts > len(data):
        raise PartsExceedSamples(f"{parts} parts for {len(data)} samples")
    rng = np.random.default_rng(seed)
    assigned: list[list[int]] = [[] for _ in range(parts)]
    for c in range(data.num_classes):
        idx = np.flatnonzero(data.labels == c)
        perm = rng.permutation(idx)
        for i, sample in enumerate(perm):
            assigned[i % parts].append(int(sample))
    return [
        data.subset(indices, id=f"{data.id}/part{p}")
        for p, indices in enumerate(assigned)
    ]


def holdout_split(data: Dataset, test_fraction: float, seed: int) -> tuple[Dataset, Dataset]:
    """Stratified (test, train) split; per class, floor(count * fraction) test samples."""
    if not 0.0 < test_fraction < 1.0:
        raise ValueError("test_fraction must be in (0, 1)")
    rng = np.random.default_rng(seed)
    test_idx: list[int] = []
    train_idx: list[int] = []
    for c in range(data.num_classes):
        idx = np.flatnonzero(data.labels == c)
        perm = rng.permutation(idx)
        k = int(len(perm) * test_fraction)
        test_idx.extend(int(i) for i in perm[:k])
        train_idx.extend(int(i) for i in perm[k:])
    if not test_idx or not train_idx:
        raise PartsExceedSamples("holdout split produced an empty side")
    return (
        data.subset(test_idx, id=f"{data.id}/test"),
        data.subset(train_idx, id=f"{data.id}/train"),
    )


def concat(parts: list[Dataset], id: str = "") -> Dataset:
    """Concatenate shards (same dim and class count) into one dataset."""
    if not parts:
        raise EmptyDataset("nothing to concatenate")
    dims = {p.dim for p in parts}
    classes = {p.num_classes for p in parts}
    if len(dims) != 1 or len(classes) != 1:
        raise ValueError("parts disagree on feature dim or class count")
    return Dataset(
        np.concatenate([p.features for p in parts]),
        np.concatenate([p.labels for p in parts]),
        parts[0].num_classes,
        id or parts[0].id,
    )


def class_weights(data: Dataset) -> np.ndarray:
    """Inverse-frequency weights w_c = n / (C * count_c); absent classes get 0."""
    counts = np.bincount(data.labels, minlength=data.num_classes).astype(np.float64)
    weights = np.zeros(data.num_classes, dtype=np.float64)
    present = counts > 0
    weights[present] = len(data) / (data.num_classes * counts[present])
    return weights


def write_csv(data: Dataset, path) -> None:
    """Header "f0,...,f{d-1},label"; floats as shortest round-trip decimals."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow([f"f{i}" for i in range(data.dim)] + ["label"])
        for row, label in zip(data.features, data.labels):
            writer.writerow([str(v) for v in row] + [int(label)])


def load_csv(path) -> Dataset:
    """Inverse of write_csv; ParseError messages name the offending row/column."""
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ParseError(f"{path}: empty file")
    header = rows[0]
    if len(header) < 2 or header[-1] != "label" or header[:-1] != [
        f"f{i}" for i in range(len(header) - 1)
    ]:
        raise ParseError(f"{path}: bad header {header!r}")
    dim = len(header) - 1
    features = np.empty((len(rows) - 1, dim), dtype=np.float32)
    labels = np.empty(len(rows) - 1, dtype=np.int64)
    for r, row in enumerate(rows[1:], start=2):
        if len(row) != dim + 1:
            raise ParseError(f"{path}: row {r} has {len(row)} cells, expected {dim + 1}")
        for c, cell in enumerate(row[:-1]):
            try:
                features[r - 2, c] = np.float32(float(cell))
            except ValueError:
                raise ParseError(f"{path}: row {r}, column f{c}: {cell!r}") from None
        try:
            label = int(row[-1])
        except ValueError:
            raise ParseError(f"{path}: row {r}, column label: {row[-1]!r}") from None
        if label < 0:
            raise ParseError(f"{path}: row {r}, column label: negative label {label}")
        labels[r - 2] = label
    if len(labels) == 0:
        raise ParseError(f"{path}: no data rows")
    return Dataset(features, labels, int(labels.max()) + 1, id=Path(path).stem)


_IDX_IMAGES_MAGIC = 0x00000803
_IDX_LABELS_MAGIC = 0x00000801


def _read_idx(path, magic: int, ndim: int) -> tuple[tuple[int, ...], bytes]:
    blob = Path(path).read_bytes()
    header = 4 + 4 * ndim
    if len(blob) < header:
        raise LengthMismatch(f"{path}: truncated header")
    (got,) = struct.unpack(">I", blob[:4])
    if got != magic:
        raise BadMagic(f"{path}: magic 0x{got:08x}, expected 0x{magic:08x}")
    dims = struct.unpack(f">{ndim}I", blob[4:header])
    count = 1
    for d in dims:
        count *= d
    payload = blob[header:]
    if len(payload) != count:
        raise LengthMismatch(f"{path}: payload {len(payload)} bytes, header implies {count}")
    return dims, payload


def load_idx(images_path, labels_path, downscale: int = 1) -> Dataset:
    """Load IDX images+labels (big-endian magic 0x803 / 0x801); pixels scaled to [0,1].

    downscale > 1 average-pools over downscale x downscale blocks (trailing
    rows/columns that do not fill a block are dropped).
    """
    if downscale < 1:
        raise ValueError("downscale must be >= 1")
    (n, h, w), pixels = _read_idx(images_path, _IDX_IMAGES_MAGIC, ndim=3)
    (n_labels,), raw_labels = _read_idx(labels_path, _IDX_LABELS_MAGIC, ndim=1)
    if n != n_labels:
        raise LengthMismatch(f"{n} images vs {n_labels} labels")
    images = np.frombuffer(pixels, dtype=np.uint8).reshape(n, h, w).astype(np.float32)
    images /= 255.0
    if downscale > 1:
        hh, ww = h // downscale, w // downscale
        if hh < 1 or ww < 1:
            raise ValueError("downscale larger than image")
        images = images[:, : hh * downscale, : ww * downscale]
        images = images.reshape(n, hh, downscale, ww, downscale).mean(axis=(2, 4))
    labels = np.frombuffer(raw_labels, dtype=np.uint8).astype(np.int64)
    num_classes = int(labels.max()) + 1 if n else 1
    return Dataset(
        images.reshape(n, -1), labels, num_classes, id=Path(images_path).stem
    )


def pretrain_spec(spec: SyntheticSpec, shift: float, samples_per_class: int) -> SyntheticSpec:
    """Spec for the shifted pretraining distribution sharing the target's class layout."""
    return replace(spec, domain_shift=shift, samples_per_class=samples_per_class)
