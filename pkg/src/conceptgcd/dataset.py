"""Synthetic GCD benchmarks, the GCDF feature file, and feature-space views."""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DataError, FormatError, ParameterError
from .numerics import RngState

GCDF_MAGIC = b"GCDF"
GCDF_VERSION = 1
_HEADER = struct.Struct("<4sIII")


@dataclass(frozen=True, eq=False)
class GcdDataset:
    """Features with ground truth and a labeled/unlabeled visibility mask.

    ``gt_labels`` holds the truth for every sample, including unlabeled
    ones; it is only read by evaluation. Training code receives
    ``train_view()``, which redacts invisible labels to -1.
    """

    features: np.ndarray
    gt_labels: np.ndarray
    visible: np.ndarray
    n_known: int
    n_novel: int

    def __post_init__(self):
        feats = np.ascontiguousarray(self.features, dtype=np.float64)
        labels = np.ascontiguousarray(self.gt_labels, dtype=np.int64)
        visible = np.ascontiguousarray(self.visible, dtype=bool)
        object.__setattr__(self, "features", feats)
        object.__setattr__(self, "gt_labels", labels)
        object.__setattr__(self, "visible", visible)
        for arr in (feats, labels, visible):
            arr.setflags(write=False)
        if feats.ndim != 2:
            raise DataError(f"features must be 2-D, got shape {feats.shape}")
        n = feats.shape[0]
        if labels.shape != (n,) or visible.shape != (n,):
            raise DataError(
                f"length mismatch: {n} feature rows, {labels.shape} labels, {visible.shape} flags"
            )
        if self.n_known < 1 or self.n_novel < 0:
            raise DataError(f"bad class counts: n_known={self.n_known}, n_novel={self.n_novel}")
        if n and (labels.min() < 0 or labels.max() >= self.n_classes):
            raise DataError(f"labels must lie in [0, {self.n_classes})")
        if np.any(labels[visible] >= self.n_known):
            raise DataError("a visible sample carries a novel-class label")
        if not np.all(np.isfinite(feats)):
            raise DataError("features contain non-finite values")

    @property
    def n_samples(self) -> int:
        return self.features.shape[0]

    @property
    def input_dim(self) -> int:
        return self.features.shape[1]

    @property
    def n_classes(self) -> int:
        return self.n_known + self.n_novel

    @property
    def labeled_indices(self) -> np.ndarray:
        return np.flatnonzero(self.visible)

    @property
    def unlabeled_indices(self) -> np.ndarray:
        return np.flatnonzero(~self.visible)

    def train_view(self) -> "TrainView":
        labels = np.where(self.visible, self.gt_labels, -1)
        return TrainView(self.features, labels, self.n_known, self.n_novel)

    def __eq__(self, other) -> bool:
        if not isinstance(other, GcdDataset):
            return NotImplemented
        return (
            self.n_known == other.n_known
            and self.n_novel == other.n_novel
            and np.array_equal(self.features, other.features)
            and np.array_equal(self.gt_labels, other.gt_labels)
            and np.array_equal(self.visible, other.visible)
        )


@dataclass(frozen=True)
class TrainView:
    """What the trainer is allowed to see: labels are -1 for unlabeled samples."""

    features: np.ndarray
    labels: np.ndarray
    n_known: int
    n_novel: int

    @property
    def n_classes(self) -> int:
        return self.n_known + self.n_novel

    @property
    def labeled(self) -> np.ndarray:
        return self.labels >= 0


@dataclass(frozen=True)
class SyntheticSpec:
    n_known: int = 20
    n_novel: int = 20
    input_dim: int = 64
    samples_per_class: int = 50
    center_scale: float = 1.0
    noise_sigma: float = 0.6
    label_ratio: float = 0.5


def generate_synthetic(spec: SyntheticSpec, rng: RngState) -> GcdDataset:
    """Gaussian blobs around uniformly drawn class centers.

    Samples are stored class-major. Within each known class a random
    ``floor(label_ratio * samples_per_class)`` subset is marked visible.
    Features are rounded to float32 so that a GCDF round trip is exact.
    """
    if min(spec.n_known, spec.n_novel, spec.input_dim, spec.samples_per_class) < 1:
        raise ParameterError(f"all counts must be >= 1: {spec}")
    if spec.noise_sigma < 0:
        raise ParameterError(f"noise_sigma must be >= 0, got {spec.noise_sigma}")
    if not 0 < spec.label_ratio <= 1:
        raise ParameterError(f"label_ratio must lie in (0, 1], got {spec.label_ratio}")
    n_classes = spec.n_known + spec.n_novel
    per = spec.samples_per_class
    centers = rng.uniform(-spec.center_scale, spec.center_scale, (n_classes, spec.input_dim))
    noise = rng.normal((n_classes * per, spec.input_dim), spec.noise_sigma)
    labels = np.repeat(np.arange(n_classes), per)
    features = centers[labels] + noise
    features = features.astype(np.float32).astype(np.float64)
    n_visible = int(np.floor(spec.label_ratio * per))
    visible = np.zeros(n_classes * per, dtype=bool)
    for c in range(spec.n_known):
        picked = rng.permutation(per)[:n_visible]
        visible[c * per + picked] = True
    return GcdDataset(features, labels, visible, spec.n_known, spec.n_novel)


def augment_views(x: np.ndarray, sigma_aug: float, rng: RngState) -> tuple[np.ndarray, np.ndarray]:
    """Two independent noisy copies of ``x`` (stand-in for image augmentation)."""
    if sigma_aug < 0:
        raise ParameterError(f"sigma_aug must be >= 0, got {sigma_aug}")
    if sigma_aug == 0:
        return x.copy(), x.copy()
    return x + rng.normal(x.shape, sigma_aug), x + rng.normal(x.shape, sigma_aug)


def gcdf_size(n: int, d: int) -> int:
    return _HEADER.size + n * d * 4 + n * 4 + n


def save_gcdf(ds: GcdDataset, path) -> None:
    """Write ``ds`` as GCDF (little-endian).

    Layout: ``b"GCDF"``, u32 version, u32 N, u32 d, N*d float32 features
    (row-major), N int32 labels, N uint8 visibility flags. Class counts are
    not stored.
    """
    feats32 = ds.features.astype("<f4")
    if not np.array_equal(feats32.astype(np.float64), ds.features):
        raise DataError("features are not exactly representable in float32; GCDF would be lossy")
    payload = b"".join(
        [
            _HEADER.pack(GCDF_MAGIC, GCDF_VERSION, ds.n_samples, ds.input_dim),
            feats32.tobytes(),
            ds.gt_labels.astype("<i4").tobytes(),
            ds.visible.astype(np.uint8).tobytes(),
        ]
    )
    _atomic_write(Path(path), payload)


def load_gcdf(path, n_known: int | None = None, n_novel: int | None = None) -> GcdDataset:
    """Read a GCDF file.

    When class counts are not supplied they are inferred: ``n_known`` is one
    past the largest visible label and ``n_novel`` covers the remaining
    label range.
    """
    buf = Path(path).read_bytes()
    if len(buf) < _HEADER.size:
        raise FormatError(f"file holds {len(buf)} bytes, header needs {_HEADER.size}", len(buf))
    magic, version, n, d = _HEADER.unpack_from(buf, 0)
    if magic != GCDF_MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {GCDF_MAGIC!r}", 0)
    if version != GCDF_VERSION:
        raise FormatError(f"unsupported version {version}", 4)
    expected = gcdf_size(n, d)
    if len(buf) < expected:
        raise FormatError(f"truncated file: expected {expected} bytes for N={n}, d={d}", len(buf))
    if len(buf) > expected:
        raise FormatError(f"count mismatch: {len(buf) - expected} trailing bytes", expected)
    off = _HEADER.size
    feats = np.frombuffer(buf, "<f4", n * d, off).reshape(n, d).astype(np.float64)
    off += n * d * 4
    labels = np.frombuffer(buf, "<i4", n, off).astype(np.int64)
    off += n * 4
    flags = np.frombuffer(buf, np.uint8, n, off)
    bad = np.flatnonzero(flags > 1)
    if bad.size:
        raise FormatError(f"visibility flag {flags[bad[0]]} is not 0/1", off + int(bad[0]))
    visible = flags.astype(bool)
    if n_known is None:
        n_known = int(labels[visible].max()) + 1 if visible.any() else 1
    if n_novel is None:
        n_novel = max(int(labels.max()) + 1 - n_known, 0) if n else 0
    return GcdDataset(feats, labels, visible, n_known, n_novel)


def _atomic_write(path: Path, payload: bytes) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(payload)
    os.replace(tmp, path)
