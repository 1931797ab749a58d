"""Datasets: IDX ingestion, seeded synthetic generators and CSV round-trip."""
from __future__ import annotations

import csv
import gzip
import struct
from dataclasses import dataclass

import numpy as np

from ._io import atomic_write_bytes, atomic_write_text, csv_text
from .errors import FormatError

# IDX type code -> (big-endian numpy dtype, bytes per element)
_IDX_TYPES = {
    0x08: (">u1", 1),
    0x09: (">i1", 1),
    0x0B: (">i2", 2),
    0x0C: (">i4", 4),
    0x0D: (">f4", 4),
    0x0E: (">f8", 8),
}
_IDX_CODES = {np.dtype(v[0]).newbyteorder("="): k for k, v in _IDX_TYPES.items()}


@dataclass(frozen=True, eq=False)
class Dataset:
    features: np.ndarray
    labels: np.ndarray
    num_classes: int

    def __post_init__(self):
        if len(self.features) != len(self.labels):
            raise ValueError(f"{len(self.features)} feature rows but {len(self.labels)} labels")
        if self.num_classes < 1:
            raise ValueError("num_classes must be positive")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ValueError(f"labels must lie in [0, {self.num_classes})")
        self.features.setflags(write=False)
        self.labels.setflags(write=False)

    def __len__(self):
        return len(self.labels)

    @property
    def input_shape(self):
        return self.features.shape[1:]

    def subset(self, index):
        index = np.asarray(index)
        return Dataset(self.features[index].copy(), self.labels[index].copy(), self.num_classes)

    def head(self, n):
        return self.subset(np.arange(min(n, len(self))))

    def reshape(self, shape):
        return Dataset(self.features.reshape((len(self),) + tuple(shape)).copy(),
                       self.labels.copy(), self.num_classes)

    def batches(self, batch_size, rng=None):
        """Yield (features, labels) minibatches; shuffled when ``rng`` is given."""
        n = len(self)
        order = rng.permutation(n) if rng is not None else np.arange(n)
        for start in range(0, n, batch_size):
            idx = order[start:start + batch_size]
            yield self.features[idx], self.labels[idx]


def _minmax(x):
    lo, hi = float(x.min()), float(x.max())
    if hi == lo:
        return np.zeros_like(x, dtype=np.float64)
    return (x - lo) / (hi - lo)


# -- IDX ----------------------------------------------------------------------

def _open(path):
    with open(path, "rb") as fh:
        raw = fh.read()
    if str(path).endswith(".gz"):
        raw = gzip.decompress(raw)
    return raw


def read_idx(path) -> np.ndarray:
    """Parse an IDX file into an array of its native dtype."""
    raw = _open(path)
    if len(raw) < 4:
        raise FormatError(f"{path}: file too short for an IDX header")
    zero, code, ndim = struct.unpack(">HBB", raw[:4])
    if zero != 0 or code not in _IDX_TYPES or ndim == 0:
        raise FormatError(f"{path}: bad IDX magic 0x{raw[:4].hex()}")
    if len(raw) < 4 + 4 * ndim:
        raise FormatError(f"{path}: truncated IDX dimension header")
    dims = struct.unpack(f">{ndim}I", raw[4:4 + 4 * ndim])
    dtype, width = _IDX_TYPES[code]
    count = int(np.prod(dims))
    body = raw[4 + 4 * ndim:]
    if len(body) < count * width:
        raise FormatError(f"{path}: truncated IDX payload ({len(body)} of {count * width} bytes)")
    return np.frombuffer(body, dtype=dtype, count=count).reshape(dims).astype(
        np.dtype(dtype).newbyteorder("="))


def write_idx(path, array):
    array = np.asarray(array)
    code = _IDX_CODES.get(array.dtype.newbyteorder("="))
    if code is None:
        raise ValueError(f"dtype {array.dtype} has no IDX type code")
    header = struct.pack(">HBB", 0, code, array.ndim) + struct.pack(f">{array.ndim}I", *array.shape)
    payload = array.astype(_IDX_TYPES[code][0]).tobytes()
    data = header + payload
    if str(path).endswith(".gz"):
        data = gzip.compress(data, mtime=0)
    atomic_write_bytes(path, data)


def load_idx(images_path, labels_path=None, num_classes=None) -> Dataset:
    """Load an IDX image file (and optional label file) as a Dataset.

    Unsigned-byte images are scaled by 1/255; other dtypes are min-max
    normalized to [0, 1]. Without a label file every label is 0.
    """
    images = read_idx(images_path)
    feats = images / 255.0 if images.dtype == np.uint8 else _minmax(images.astype(np.float64))
    if labels_path is None:
        labels = np.zeros(len(feats), dtype=np.int64)
    else:
        labels = read_idx(labels_path)
        if labels.ndim != 1:
            raise FormatError(f"{labels_path}: label file must be 1-D, got {labels.ndim}-D")
        labels = labels.astype(np.int64)
        if len(labels) != len(feats):
            raise FormatError(f"{len(labels)} labels for {len(feats)} images")
    c = num_classes if num_classes is not None else int(labels.max()) + 1 if len(labels) else 1
    return Dataset(np.ascontiguousarray(feats, dtype=np.float64), labels, c)


# -- synthetic data -----------------------------------------------------------

def synth_blobs(n, num_classes, dim, seed, sigma=1.0, separation=6.0) -> Dataset:
    """Isotropic Gaussian blobs whose closest pair of class means is
    ``separation * sigma`` apart, min-max scaled to [0, 1]."""
    if n <= 0 or num_classes <= 0 or dim <= 0:
        raise ValueError("n, num_classes and dim must be positive")
    rng = np.random.default_rng(seed)
    means = rng.standard_normal((num_classes, dim))
    if num_classes > 1:
        d = np.linalg.norm(means[:, None] - means[None], axis=-1)
        closest = d[np.triu_indices(num_classes, 1)].min()
        means *= separation * sigma / closest
    labels = rng.integers(0, num_classes, size=n)
    feats = means[labels] + sigma * rng.standard_normal((n, dim))
    return Dataset(_minmax(feats), labels.astype(np.int64), num_classes)


def synth_images(n, num_classes, shape=(1, 8, 8), seed=0, noise=0.35, shift=1) -> Dataset:
    """Noisy, randomly shifted copies of smooth per-class prototype images.

    Prototypes are sums of random low-frequency cosines, so neighbouring
    pixels are correlated the way convolutions expect.
    """
    if n <= 0 or num_classes <= 0:
        raise ValueError("n and num_classes must be positive")
    c, h, w = shape
    rng = np.random.default_rng(seed)
    yy, xx = np.meshgrid(np.arange(h) / h, np.arange(w) / w, indexing="ij")
    protos = np.zeros((num_classes, c, h, w))
    for k in range(num_classes):
        for ch in range(c):
            for _ in range(3):
                fy, fx = rng.uniform(0.5, 2.0, size=2)
                phase = rng.uniform(0, 2 * np.pi)
                protos[k, ch] += np.cos(2 * np.pi * (fy * yy + fx * xx) + phase)
    protos /= np.abs(protos).max(axis=(1, 2, 3), keepdims=True)
    labels = rng.integers(0, num_classes, size=n)
    feats = protos[labels].copy()
    if shift:
        dy = rng.integers(-shift, shift + 1, size=n)
        dx = rng.integers(-shift, shift + 1, size=n)
        for i in range(n):
            feats[i] = np.roll(feats[i], (dy[i], dx[i]), axis=(1, 2))
    feats *= rng.uniform(0.7, 1.3, size=(n, 1, 1, 1))
    feats += noise * rng.standard_normal(feats.shape)
    return Dataset(_minmax(feats), labels.astype(np.int64), num_classes)


# -- CSV ----------------------------------------------------------------------

def to_csv(dataset: Dataset, path=None):
    """Header ``f0..f{d-1},label`` then one row per example. Returns the text
    when ``path`` is None."""
    flat = dataset.features.reshape(len(dataset), -1)
    header = [f"f{j}" for j in range(flat.shape[1])] + ["label"]
    text = csv_text(header, ([repr(float(v)) for v in row] + [int(y)]
                             for row, y in zip(flat, dataset.labels)))
    if path is None:
        return text
    atomic_write_text(path, text)
    return None


def from_csv(path, shape=None, num_classes=None) -> Dataset:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0][-1] != "label":
        raise FormatError("CSV header must end with a 'label' column", line=1)
    width = len(rows[0])
    feats, labels = [], []
    for lineno, row in enumerate(rows[1:], start=2):
        if len(row) != width:
            raise FormatError(f"expected {width} fields, got {len(row)}", line=lineno)
        try:
            feats.append([float(v) for v in row[:-1]])
            labels.append(int(row[-1]))
        except ValueError as exc:
            raise FormatError(str(exc), line=lineno) from None
    x = np.asarray(feats, dtype=np.float64).reshape(len(feats), width - 1)
    if shape is not None:
        x = x.reshape((len(x),) + tuple(shape))
    y = np.asarray(labels, dtype=np.int64)
    c = num_classes if num_classes is not None else int(y.max()) + 1 if len(y) else 1
    return Dataset(x, y, c)

