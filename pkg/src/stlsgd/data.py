"""libsvm ingestion and IID / Non-IID client partitioning."""
from __future__ import annotations

import gzip
import io
import os
from dataclasses import dataclass
from typing import Iterator, Optional

import numpy as np
import scipy.sparse as sp

from .rng import control_stream


class ParseError(ValueError):
    def __init__(self, lineno: int, msg: str):
        super().__init__(f"line {lineno}: {msg}")
        self.lineno = lineno


@dataclass(frozen=True)
class Dataset:
    """Sparse feature rows (0-based columns internally) with real labels."""

    features: sp.csr_matrix
    labels: np.ndarray
    num_features: int

    @property
    def num_examples(self) -> int:
        return self.features.shape[0]

    def __len__(self) -> int:
        return self.num_examples

    @property
    def examples(self) -> Iterator[tuple[dict[int, float], float]]:
        """Rows as ``({1-based index: value}, label)`` pairs, as written in libsvm."""
        F = self.features
        for r in range(F.shape[0]):
            lo, hi = F.indptr[r], F.indptr[r + 1]
            feats = {int(c) + 1: float(v) for c, v in zip(F.indices[lo:hi], F.data[lo:hi])}
            yield feats, float(self.labels[r])

    def dense(self) -> np.ndarray:
        return self.features.toarray()

    def padded(self, num_features: int) -> "Dataset":
        if num_features < self.num_features:
            raise ValueError(f"cannot shrink {self.num_features} features to {num_features}")
        F = sp.csr_matrix((self.features.data, self.features.indices, self.features.indptr),
                          shape=(self.num_examples, num_features))
        return Dataset(F, self.labels, num_features)


def _map_labels(raw: np.ndarray, positive_label: Optional[float]) -> np.ndarray:
    if positive_label is not None:
        return np.where(raw == positive_label, 1.0, -1.0)
    values = set(np.unique(raw).tolist())
    if values <= {-1.0, 1.0}:
        return raw.astype(float)
    if values <= {0.0, 1.0}:
        return np.where(raw == 1.0, 1.0, -1.0)
    raise ValueError(f"labels {sorted(values)[:6]} are not binary +/-1 or 0/1; "
                     "set positive_label (and classes to select a pair)")


def parse_libsvm(data, num_features: Optional[int] = None, positive_label: Optional[float] = None,
                 classes: Optional[tuple] = None) -> Dataset:
    """Parse libsvm text (``label idx:val ...`` with 1-based ascending indices).

    ``data`` may be bytes, str or a binary/text stream; gzip input is detected
    by its magic bytes.  ``classes`` keeps only examples whose raw label is
    listed; ``positive_label`` maps that raw label to +1 and all others to -1,
    defaulting to the first entry of ``classes`` (so ``(4, 9)`` gives 4 -> +1).
    """
    if positive_label is None and classes:
        positive_label = classes[0]
    if hasattr(data, "read"):
        data = data.read()
    if isinstance(data, bytes):
        if data[:2] == b"\x1f\x8b":
            data = gzip.decompress(data)
        data = data.decode("utf-8")
    labels, indptr, indices, values = [], [0], [], []
    max_index = 0
    for lineno, line in enumerate(io.StringIO(data), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        tokens = line.split()
        try:
            label = float(tokens[0])
        except ValueError:
            raise ParseError(lineno, f"non-numeric label {tokens[0]!r}") from None
        if classes is not None and label not in classes:
            continue
        prev = 0
        for tok in tokens[1:]:
            idx_s, sep, val_s = tok.partition(":")
            if not sep:
                raise ParseError(lineno, f"expected idx:val, got {tok!r}")
            try:
                idx = int(idx_s)
                val = float(val_s)
            except ValueError:
                raise ParseError(lineno, f"non-numeric token {tok!r}") from None
            if idx <= prev:
                raise ParseError(lineno, f"index {idx} not ascending (previous {prev})")
            prev = idx
            indices.append(idx - 1)
            values.append(val)
        max_index = max(max_index, prev)
        labels.append(label)
        indptr.append(len(indices))
    if not labels:
        raise ValueError("empty libsvm input")
    if num_features is None:
        num_features = max(max_index, 1)
    elif num_features < max_index:
        raise ValueError(f"num_features={num_features} but index {max_index} present")
    F = sp.csr_matrix((np.asarray(values, dtype=float), np.asarray(indices, dtype=np.int64),
                       np.asarray(indptr, dtype=np.int64)), shape=(len(labels), num_features))
    return Dataset(F, _map_labels(np.asarray(labels, dtype=float), positive_label), num_features)


def load_libsvm(path, **kwargs) -> Dataset:
    with open(path, "rb") as fh:
        return parse_libsvm(fh.read(), **kwargs)


def write_libsvm(dataset: Dataset, path) -> None:
    with open(path, "w") as fh:
        for feats, label in dataset.examples:
            items = " ".join(f"{k}:{v!r}" for k, v in feats.items())
            fh.write(f"{int(label):+d} {items}".rstrip() + "\n")


def align_features(*datasets: Dataset) -> list[Dataset]:
    """Zero-pad every dataset to the widest feature count."""
    width = max(d.num_features for d in datasets)
    return [d.padded(width) for d in datasets]


def synthetic_two_class(n: int = 4000, d: int = 30, seed: int = 20200515,
                        density: float = 0.25) -> Dataset:
    """Bundled stand-in for a9a: sparse binary features, two overlapping classes.

    Each class switches features on with its own Bernoulli rates, so a
    sorted-by-label partition gives clients genuinely different data.
    """
    rng = control_stream(seed, "synthetic")
    base = rng.uniform(0.2 * density, 1.8 * density, size=d)
    shift = rng.normal(0.0, 0.6 * density, size=d)
    y = np.where(rng.random(n) < 0.5, 1.0, -1.0)
    rates = np.clip(base[None, :] + y[:, None] * shift[None, :], 0.01, 0.95)
    X = (rng.random((n, d)) < rates).astype(float)
    # Flip a fraction of labels so the problem is not separable.
    flip = rng.random(n) < 0.1
    y = np.where(flip, -y, y)
    return Dataset(sp.csr_matrix(X), y, d)


@dataclass(frozen=True)
class PartitionSpec:
    num_clients: int
    iid_fraction: float = 100.0
    seed: int = 0

    def __post_init__(self):
        if self.num_clients < 1:
            raise ValueError(f"num_clients must be >= 1, got {self.num_clients}")
        if not 0.0 <= self.iid_fraction <= 100.0:
            raise ValueError(f"iid_fraction must be in [0, 100], got {self.iid_fraction}")


def partition(dataset, spec: PartitionSpec) -> list[np.ndarray]:
    """Split example indices across clients.

    A seeded uniform ``iid_fraction`` percent of the examples is dealt evenly
    to all clients; the rest is sorted by (label, index) and handed out in
    contiguous blocks, client 0 first.  Remainders go to the lowest-numbered
    clients.  ``dataset`` may also be a plain label array.
    """
    labels = np.asarray(dataset.labels if isinstance(dataset, Dataset) else dataset)
    n = len(labels)
    N = spec.num_clients
    if N > n:
        raise ValueError(f"{N} clients but only {n} examples")
    rng = control_stream(spec.seed, "partition")
    perm = rng.permutation(n)
    n_iid = int(spec.iid_fraction * n // 100)
    iid_part = perm[:n_iid]
    rest = np.sort(perm[n_iid:])
    rest = rest[np.argsort(labels[rest], kind="stable")]
    iid_chunks = np.array_split(iid_part, N)
    sorted_chunks = np.array_split(rest, N)
    return [np.concatenate([a, b]).astype(np.int64) for a, b in zip(iid_chunks, sorted_chunks)]


def dataset_fingerprint(dataset: Dataset) -> str:
    import hashlib
    h = hashlib.sha256()
    F = dataset.features
    for arr in (F.indptr, F.indices, F.data, dataset.labels):
        h.update(np.ascontiguousarray(arr).tobytes())
    h.update(str(dataset.num_features).encode())
    return h.hexdigest()


def bundled_or_file(path: Optional[str], **kwargs) -> Dataset:
    """Load ``path``; the literal ``synthetic`` yields the bundled fallback set."""
    if path in (None, "", "synthetic"):
        return synthetic_two_class()
    if not os.path.exists(path):
        raise FileNotFoundError(f"dataset not found: {path} (use path = synthetic for the bundled set)")
    return load_libsvm(path, **kwargs)
