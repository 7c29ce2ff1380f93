"""Synthetic latent datasets and the PROTOEMB1 embedding file format.

File layout (little-endian)::

    magic    9 bytes   b"PROTOEMB1"
    N, C, zeta_w, zeta_h, D_in          5 x u32
    N records of
        label    u32
        values   zeta_w * zeta_h * D_in x float32 (row-major: w, h, channel)
"""

import csv
import struct
from dataclasses import dataclass
from typing import Tuple

import numpy as np

from .errors import ConfigurationError, EmptyDatasetError, FormatError

EMB_MAGIC = b"PROTOEMB1"
_HEADER = struct.Struct("<5I")


@dataclass(eq=False)
class EmbeddingDataset:
    features: np.ndarray        # (N, zeta_w, zeta_h, D_in) float32
    labels: np.ndarray          # (N,) int64
    n_classes: int
    split: str = "all"

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.features.ndim != 4:
            raise ConfigurationError(f"features must be (N, W, H, D_in), got {self.features.shape}")
        if self.labels.shape != (len(self.features),):
            raise ConfigurationError("one label per record")
        if self.n_classes < 1 or np.any((self.labels < 0) | (self.labels >= self.n_classes)):
            raise ConfigurationError(f"labels must lie in [0, {self.n_classes})")
        if not np.all(np.isfinite(self.features)):
            raise ConfigurationError("features must be finite")

    def __len__(self):
        return len(self.labels)

    @property
    def zeta(self):
        return self.features.shape[1:3]

    @property
    def d_in(self):
        return self.features.shape[3]

    def subset(self, idx, split=None):
        return EmbeddingDataset(self.features[idx], self.labels[idx], self.n_classes,
                                split or self.split)

    def equals(self, other):
        return (self.n_classes == other.n_classes
                and self.features.shape == other.features.shape
                and np.array_equal(self.labels, other.labels)
                and self.features.tobytes() == other.features.tobytes())


@dataclass
class SyntheticSpec:
    kind: str = "hyperspherical_vmf"   # or "euclidean_blobs"
    n_classes: int = 10
    per_class: int = 100
    d_in: int = 32
    zeta: Tuple[int, int] = (1, 1)
    # euclidean_blobs: std of the class centres and of the within-class noise
    spread: float = 3.0
    noise: float = 1.0
    # hyperspherical_vmf: concentration of the directional noise
    kappa_gen: float = 200.0
    norm_range: Tuple[float, float] = (0.5, 2.0)
    orthogonal_anchors: bool = True
    test_fraction: float = 0.2
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("euclidean_blobs", "hyperspherical_vmf"):
            raise ConfigurationError(f"unknown synthetic kind {self.kind!r}")
        if self.n_classes < 2 or self.per_class < 1 or self.d_in < 1:
            raise ConfigurationError("need n_classes >= 2, per_class >= 1, d_in >= 1")
        if min(self.zeta) < 1 or self.spread <= 0 or self.noise < 0 or self.kappa_gen <= 0:
            raise ConfigurationError("sizes and scales must be positive")
        lo, hi = self.norm_range
        if not 0 < lo <= hi:
            raise ConfigurationError("norm_range must satisfy 0 < lo <= hi")
        if not 0 < self.test_fraction < 1:
            raise ConfigurationError("test_fraction must lie in (0, 1)")


def class_anchors(rng, n_classes, dim, orthogonal=True):
    """Unit class directions; mutually orthogonal when n_classes <= dim."""
    if orthogonal and n_classes <= dim:
        q, _ = np.linalg.qr(rng.standard_normal((dim, n_classes)))
        return q.T
    x = rng.standard_normal((n_classes, dim))
    return x / np.linalg.norm(x, axis=1, keepdims=True)


def _directions(rng, anchors, kappa, n):
    # anchor + isotropic tangent noise, renormalised
    dim = anchors.shape[-1]
    noise = rng.standard_normal((n, dim)) / np.sqrt(kappa)
    noise -= np.einsum("nd,nd->n", noise, anchors)[:, None] * anchors
    v = anchors + noise
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def generate(spec):
    """Build (train, test) splits from a SyntheticSpec, deterministic in the seed."""
    rng = np.random.default_rng(spec.seed)
    C, n, d = spec.n_classes, spec.per_class, spec.d_in
    cells = spec.zeta[0] * spec.zeta[1]
    labels = np.repeat(np.arange(C), n)
    if spec.kind == "euclidean_blobs":
        centres = rng.standard_normal((C, d)) * spec.spread
        x = centres[labels][:, None, :] + rng.standard_normal((C * n, cells, d)) * spec.noise
    else:
        anchors = class_anchors(rng, C, d, spec.orthogonal_anchors)
        per_cell = np.repeat(anchors[labels], cells, axis=0)
        v = _directions(rng, per_cell, spec.kappa_gen, C * n * cells)
        norms = rng.uniform(*spec.norm_range, size=(C * n * cells, 1))
        x = (v * norms).reshape(C * n, cells, d)
    features = x.reshape(C * n, *spec.zeta, d)
    full = EmbeddingDataset(features, labels, C)
    return stratified_split(full, spec.test_fraction, rng)


def stratified_split(dataset, test_fraction=0.2, rng=None):
    """Per-class shuffled split; each class contributes round(n_c * fraction) test records."""
    rng = np.random.default_rng(0) if rng is None else rng
    train_idx, test_idx = [], []
    for c in range(dataset.n_classes):
        idx = np.flatnonzero(dataset.labels == c)
        idx = idx[rng.permutation(len(idx))]
        k = int(round(len(idx) * test_fraction))
        if len(idx) > 1:
            k = min(max(k, 1), len(idx) - 1)
        test_idx.append(idx[:k])
        train_idx.append(idx[k:])
    train_idx = np.sort(np.concatenate(train_idx))
    test_idx = np.sort(np.concatenate(test_idx))
    return dataset.subset(train_idx, "train"), dataset.subset(test_idx, "test")


def save_embeddings(dataset, path):
    """Write ``dataset`` as PROTOEMB1, truncating any existing file."""
    n = len(dataset)
    zw, zh = dataset.zeta
    header = EMB_MAGIC + _HEADER.pack(n, dataset.n_classes, zw, zh, dataset.d_in)
    rec = np.dtype([("label", "<u4"), ("values", "<f4", (zw * zh * dataset.d_in,))])
    records = np.empty(n, dtype=rec)
    records["label"] = dataset.labels
    records["values"] = dataset.features.reshape(n, -1)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(records.tobytes())


def read_header(path):
    """(N, C, zeta_w, zeta_h, D_in) from a PROTOEMB1 file."""
    with open(path, "rb") as fh:
        head = fh.read(len(EMB_MAGIC) + _HEADER.size)
    return _parse_header(head)


def _parse_header(data):
    if len(data) < len(EMB_MAGIC) or data[:len(EMB_MAGIC)] != EMB_MAGIC:
        raise FormatError("bad magic, not a PROTOEMB1 file", 0)
    if len(data) < len(EMB_MAGIC) + _HEADER.size:
        raise FormatError("truncated header", len(data))
    return _HEADER.unpack_from(data, len(EMB_MAGIC))


def load_embeddings(path, split="all"):
    with open(path, "rb") as fh:
        data = fh.read()
    n, C, zw, zh, d_in = _parse_header(data)
    if n == 0:
        raise EmptyDatasetError("dataset file holds no records", len(EMB_MAGIC))
    width = zw * zh * d_in
    rec = np.dtype([("label", "<u4"), ("values", "<f4", (width,))])
    start = len(EMB_MAGIC) + _HEADER.size
    expected = start + n * rec.itemsize
    if len(data) < expected:
        whole = (len(data) - start) // rec.itemsize
        raise FormatError(f"truncated file: {whole} of {n} records present",
                          start + whole * rec.itemsize)
    if len(data) > expected:
        raise FormatError("trailing bytes after last record", expected)
    records = np.frombuffer(data, dtype=rec, count=n, offset=start)
    labels = records["label"].astype(np.int64)
    bad = np.flatnonzero(labels >= C)
    if bad.size:
        raise FormatError(f"label {labels[bad[0]]} >= C={C}", start + bad[0] * rec.itemsize)
    values = records["values"]
    nonfinite = np.flatnonzero(~np.isfinite(values).all(axis=1))
    if nonfinite.size:
        raise FormatError("non-finite feature values", start + nonfinite[0] * rec.itemsize + 4)
    return EmbeddingDataset(values.reshape(n, zw, zh, d_in).copy(), labels, C, split)


def write_stats_csv(dataset, path):
    """Per-class record count, mean feature norm and norm std."""
    norms = np.linalg.norm(dataset.features.reshape(len(dataset), -1, dataset.d_in), axis=-1).mean(axis=1)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["class", "count", "mean_norm", "std_norm"])
        for c in range(dataset.n_classes):
            m = norms[dataset.labels == c]
            w.writerow([c, len(m), f"{m.mean():.6g}" if len(m) else "nan",
                        f"{m.std():.6g}" if len(m) else "nan"])
