"""Embedding datasets: file I/O, synthetic generation, views, batch sampling.

A dataset is a fixed matrix of sample embeddings plus optional ground-truth
labels, an optional pair of precomputed augmented views, and the index set of
the few labeled samples. Two on-disk formats are supported:

* a binary container (``.ioccds`` by convention, any extension other than
  ``.jsonl`` is treated as binary): 16-byte magic ``IOCCDS01`` padded with
  NULs, little-endian u64 header ``n, d, K, flags`` (flags bit0 = views
  present, bit1 = labels present), row-major float64 sections ``X``
  [, ``view1``, ``view2``], labels as u32 * n (only when bit1 is set), then
  the labeled index set as u64 count + u64 entries;
* JSON lines (``.jsonl``): one object per sample with keys ``id``, ``vector``,
  optional ``label``, optional ``labeled`` (membership in the labeled subset),
  optional ``view1``/``view2``. Labels must be present on all records or none.
  The cluster count is taken from an optional ``k`` key (written on the first
  record by ``save_dataset``) or inferred as ``max(label) + 1``.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

MAGIC = b"IOCCDS01"
MAGIC_FIELD_LEN = 16

FLAG_VIEWS = 1
FLAG_LABELS = 2


class DatasetFormatError(ValueError):
    """A dataset file violates the container format or its invariants."""


class ConfigurationError(ValueError):
    """A requested operation is impossible for the given configuration."""


@dataclass
class EmbeddingDataset:
    """Immutable embedding dataset with an optional labeled subset.

    ``X`` is (n, d) float64. ``views``, when present, is a pair of matrices of
    the same shape (the two augmentations per sample). ``y_true`` holds
    cluster ids in [0, K) for every sample and is required whenever
    ``labeled_idx`` is nonempty.
    """

    X: np.ndarray
    K: int
    y_true: np.ndarray | None = None
    labeled_idx: np.ndarray = field(default_factory=lambda: np.empty(0, dtype=np.int64))
    views: tuple[np.ndarray, np.ndarray] | None = None

    def __post_init__(self):
        self.X = np.ascontiguousarray(self.X, dtype=np.float64)
        if self.X.ndim != 2:
            raise DatasetFormatError("X must be a 2-d matrix")
        n = self.X.shape[0]
        if self.K < 1:
            raise DatasetFormatError("cluster count K must be >= 1")
        if self.y_true is not None:
            self.y_true = np.ascontiguousarray(self.y_true, dtype=np.int64)
            if self.y_true.shape != (n,):
                raise DatasetFormatError(
                    f"labels have {self.y_true.shape[0]} rows, embeddings have {n}"
                )
            if self.y_true.size and (self.y_true.min() < 0 or self.y_true.max() >= self.K):
                raise DatasetFormatError(f"label id outside [0, {self.K})")
        self.labeled_idx = np.ascontiguousarray(self.labeled_idx, dtype=np.int64)
        if self.labeled_idx.size:
            if self.y_true is None:
                raise DatasetFormatError("labeled_idx requires ground-truth labels")
            if len(np.unique(self.labeled_idx)) != len(self.labeled_idx):
                raise DatasetFormatError("labeled_idx contains duplicates")
            if self.labeled_idx.min() < 0 or self.labeled_idx.max() >= n:
                raise DatasetFormatError(f"labeled_idx entry outside [0, {n})")
        if self.views is not None:
            v1 = np.ascontiguousarray(self.views[0], dtype=np.float64)
            v2 = np.ascontiguousarray(self.views[1], dtype=np.float64)
            if v1.shape != self.X.shape or v2.shape != self.X.shape:
                raise DatasetFormatError("views must have the same shape as X")
            self.views = (v1, v2)
        for arr in self._arrays():
            arr.flags.writeable = False

    def _arrays(self):
        out = [self.X, self.labeled_idx]
        if self.y_true is not None:
            out.append(self.y_true)
        if self.views is not None:
            out.extend(self.views)
        return out

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def d(self) -> int:
        return self.X.shape[1]

    @property
    def unlabeled_idx(self) -> np.ndarray:
        mask = np.ones(self.n, dtype=bool)
        mask[self.labeled_idx] = False
        return np.nonzero(mask)[0]

    def __eq__(self, other):
        if not isinstance(other, EmbeddingDataset):
            return NotImplemented
        if self.K != other.K:
            return False
        if not np.array_equal(self.X, other.X):
            return False
        if (self.y_true is None) != (other.y_true is None):
            return False
        if self.y_true is not None and not np.array_equal(self.y_true, other.y_true):
            return False
        if not np.array_equal(self.labeled_idx, other.labeled_idx):
            return False
        if (self.views is None) != (other.views is None):
            return False
        if self.views is not None:
            return np.array_equal(self.views[0], other.views[0]) and np.array_equal(
                self.views[1], other.views[1]
            )
        return True


@dataclass
class SyntheticSpec:
    """Gaussian-mixture generator settings.

    ``imbalance_ratio`` is the size ratio of the largest to the smallest
    cluster; intermediate sizes follow a geometric progression.
    """

    K: int
    n: int
    d: int
    center_separation: float = 6.0
    noise_sigma: float = 1.0
    imbalance_ratio: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.K < 1:
            raise ConfigurationError("K must be >= 1")
        if self.n < self.K:
            raise ConfigurationError("n must be >= K")
        if self.imbalance_ratio < 1:
            raise ConfigurationError("imbalance_ratio must be >= 1")
        if self.noise_sigma < 0 or self.center_separation < 0:
            raise ConfigurationError("noise_sigma and center_separation must be >= 0")


@dataclass
class Batch:
    """One training mini-batch: labeled block of B rows, unlabeled of mu_b rows."""

    xl: np.ndarray      # (B, d) original labeled embeddings
    vl1: np.ndarray     # (B, d) first view
    vl2: np.ndarray     # (B, d) second view
    yl: np.ndarray      # (B,) true labels
    xu: np.ndarray      # (mu_b, d) original unlabeled embeddings
    vu1: np.ndarray     # (mu_b, d)
    vu2: np.ndarray     # (mu_b, d)
    u_idx: np.ndarray   # (mu_b,) global dataset indices of the unlabeled rows


def cluster_sizes(n: int, K: int, ratio: float) -> np.ndarray:
    """Split ``n`` into ``K`` sizes with largest/smallest ~= ``ratio``.

    Sizes follow a geometric progression (cluster 0 largest), rounded by the
    largest-remainder rule so they sum to ``n`` exactly. ``ratio == 1`` gives
    sizes differing by at most 1.
    """
    if K == 1:
        return np.array([n], dtype=np.int64)
    weights = ratio ** (1.0 - np.arange(K) / (K - 1))
    target = n * weights / weights.sum()
    sizes = np.floor(target).astype(np.int64)
    remainder = n - sizes.sum()
    order = np.argsort(-(target - sizes), kind="stable")
    sizes[order[:remainder]] += 1
    if sizes.min() < 1:
        raise ConfigurationError(
            f"n={n} too small for K={K} clusters at imbalance ratio {ratio}"
        )
    return sizes


def _spread_directions(K: int, d: int, rng: np.random.Generator) -> np.ndarray:
    """Random unit directions with pairwise dot products < 0.5, by rejection."""
    for _ in range(1000):
        dirs = rng.standard_normal((K, d))
        dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
        dots = dirs @ dirs.T
        np.fill_diagonal(dots, 0.0)
        if dots.max(initial=0.0) < 0.5:
            return dirs
    raise ConfigurationError(
        f"could not place {K} cluster directions in {d} dimensions "
        "(pairwise dot < 0.5 unreachable after 1000 tries)"
    )


def labeled_subset(y: np.ndarray, K: int, rng: np.random.Generator) -> np.ndarray:
    """Pick the few-shot labeled indices, stratified per cluster.

    When the average cluster holds more than 100 samples, 1% of each cluster
    is labeled (at least one sample); otherwise exactly one sample per
    cluster.
    """
    n = len(y)
    chosen = []
    one_percent = n / K > 100
    for k in range(K):
        members = np.nonzero(y == k)[0]
        if members.size == 0:
            continue
        m_k = max(1, round(0.01 * members.size)) if one_percent else 1
        chosen.append(rng.choice(members, size=min(m_k, members.size), replace=False))
    return np.sort(np.concatenate(chosen)) if chosen else np.empty(0, dtype=np.int64)


def generate_synthetic(spec: SyntheticSpec) -> EmbeddingDataset:
    """Sample a seeded Gaussian-mixture embedding dataset.

    Cluster means sit at ``center_separation`` times well-spread unit
    directions; within-cluster noise is isotropic ``noise_sigma``. Rows are
    shuffled, and the labeled subset is chosen by :func:`labeled_subset`.
    """
    rng = np.random.default_rng(spec.seed)
    sizes = cluster_sizes(spec.n, spec.K, spec.imbalance_ratio)
    if spec.K == 1:
        dirs = rng.standard_normal((1, spec.d))
        dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    else:
        dirs = _spread_directions(spec.K, spec.d, rng)
    means = spec.center_separation * dirs

    X = np.empty((spec.n, spec.d))
    y = np.empty(spec.n, dtype=np.int64)
    row = 0
    for k, size in enumerate(sizes):
        X[row : row + size] = means[k] + spec.noise_sigma * rng.standard_normal((size, spec.d))
        y[row : row + size] = k
        row += size

    perm = rng.permutation(spec.n)
    X, y = X[perm], y[perm]
    idx = labeled_subset(y, spec.K, rng)
    return EmbeddingDataset(X=X, K=spec.K, y_true=y, labeled_idx=idx)


def make_views(X: np.ndarray, sigma_aug: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Two Gaussian-perturbed copies of ``X`` with i.i.d. noise of std ``sigma_aug``."""
    if sigma_aug < 0:
        raise ConfigurationError("sigma_aug must be >= 0")
    if sigma_aug == 0:
        return X.copy(), X.copy()
    rng = np.random.default_rng(seed)
    v1 = X + sigma_aug * rng.standard_normal(X.shape)
    v2 = X + sigma_aug * rng.standard_normal(X.shape)
    return v1, v2


def default_sigma_aug(X: np.ndarray) -> float:
    """Default augmentation noise: 5% of the mean embedding norm."""
    return 0.05 * float(np.linalg.norm(X, axis=1).mean())


def sample_batch(
    dataset: EmbeddingDataset,
    b: int,
    mu_b: int,
    rng: np.random.Generator,
    sigma_aug: float | None = None,
) -> Batch:
    """Draw ``b`` labeled and ``mu_b`` unlabeled rows uniformly with replacement.

    Views come from the dataset when stored there; otherwise fresh Gaussian
    views are generated per batch with a seed derived from ``rng`` (so the
    batch stream is a pure function of the generator state).
    """
    labeled = dataset.labeled_idx
    if labeled.size == 0:
        raise ConfigurationError("dataset has no labeled samples")
    unlabeled = dataset.unlabeled_idx
    if unlabeled.size == 0:
        raise ConfigurationError("dataset has no unlabeled samples")

    li = labeled[rng.integers(0, labeled.size, size=b)]
    ui = unlabeled[rng.integers(0, unlabeled.size, size=mu_b)]

    if dataset.views is not None:
        v1, v2 = dataset.views
        vl1, vl2 = v1[li], v2[li]
        vu1, vu2 = v1[ui], v2[ui]
    else:
        if sigma_aug is None:
            sigma_aug = default_sigma_aug(dataset.X)
        seed = int(rng.integers(0, 2**63 - 1))
        rows = np.concatenate([li, ui])
        w1, w2 = make_views(dataset.X[rows], sigma_aug, seed)
        vl1, vu1 = w1[:b], w1[b:]
        vl2, vu2 = w2[:b], w2[b:]

    return Batch(
        xl=dataset.X[li],
        vl1=vl1,
        vl2=vl2,
        yl=dataset.y_true[li],
        xu=dataset.X[ui],
        vu1=vu1,
        vu2=vu2,
        u_idx=ui,
    )


# --- file I/O ---------------------------------------------------------------


class _Cursor:
    """Sequential binary reader that reports byte offsets on failure."""

    def __init__(self, buf: bytes, path: str):
        self.buf = buf
        self.off = 0
        self.path = path

    def take(self, count: int, section: str) -> bytes:
        if self.off + count > len(self.buf):
            raise DatasetFormatError(
                f"{self.path}: truncated {section} section at byte {self.off} "
                f"(need {count} bytes, {len(self.buf) - self.off} left)"
            )
        out = self.buf[self.off : self.off + count]
        self.off += count
        return out

    def u64(self, count: int, section: str) -> np.ndarray:
        raw = self.take(8 * count, section)
        return np.frombuffer(raw, dtype="<u8", count=count)

    def f64(self, count: int, section: str) -> np.ndarray:
        raw = self.take(8 * count, section)
        return np.frombuffer(raw, dtype="<f8", count=count)

    def u32(self, count: int, section: str) -> np.ndarray:
        raw = self.take(4 * count, section)
        return np.frombuffer(raw, dtype="<u4", count=count)


def save_dataset(dataset: EmbeddingDataset, path) -> None:
    path = str(path)
    if path.endswith(".jsonl"):
        _save_jsonl(dataset, path)
    else:
        _save_binary(dataset, path)


def load_dataset(path) -> EmbeddingDataset:
    path = str(path)
    if path.endswith(".jsonl"):
        return _load_jsonl(path)
    return _load_binary(path)


def _save_binary(ds: EmbeddingDataset, path: str) -> None:
    flags = 0
    if ds.views is not None:
        flags |= FLAG_VIEWS
    if ds.y_true is not None:
        flags |= FLAG_LABELS
    with open(path, "wb") as fh:
        fh.write(MAGIC.ljust(MAGIC_FIELD_LEN, b"\x00"))
        fh.write(struct.pack("<QQQQ", ds.n, ds.d, ds.K, flags))
        fh.write(np.ascontiguousarray(ds.X, dtype="<f8").tobytes())
        if ds.views is not None:
            fh.write(np.ascontiguousarray(ds.views[0], dtype="<f8").tobytes())
            fh.write(np.ascontiguousarray(ds.views[1], dtype="<f8").tobytes())
        if ds.y_true is not None:
            fh.write(np.ascontiguousarray(ds.y_true, dtype="<u4").tobytes())
        fh.write(struct.pack("<Q", ds.labeled_idx.size))
        fh.write(np.ascontiguousarray(ds.labeled_idx, dtype="<u8").tobytes())


def _load_binary(path: str) -> EmbeddingDataset:
    with open(path, "rb") as fh:
        cur = _Cursor(fh.read(), path)
    magic = cur.take(MAGIC_FIELD_LEN, "magic")
    if magic != MAGIC.ljust(MAGIC_FIELD_LEN, b"\x00"):
        raise DatasetFormatError(f"{path}: bad magic at byte 0 (not an IOCCDS01 container)")
    n, d, K, flags = (int(v) for v in cur.u64(4, "header"))
    if flags & ~(FLAG_VIEWS | FLAG_LABELS):
        raise DatasetFormatError(f"{path}: unknown flag bits {flags:#x} at byte 40")
    X = cur.f64(n * d, "X").reshape(n, d)
    views = None
    if flags & FLAG_VIEWS:
        v1 = cur.f64(n * d, "view1").reshape(n, d)
        v2 = cur.f64(n * d, "view2").reshape(n, d)
        views = (v1, v2)
    y = None
    if flags & FLAG_LABELS:
        y_raw = cur.u32(n, "labels")
        if y_raw.size and int(y_raw.max()) >= K:
            raise DatasetFormatError(
                f"{path}: labels section contains id {int(y_raw.max())} >= K={K}"
            )
        y = y_raw.astype(np.int64)
    count = int(cur.u64(1, "labeled_idx count")[0])
    idx = cur.u64(count, "labeled_idx").astype(np.int64)
    if cur.off != len(cur.buf):
        raise DatasetFormatError(
            f"{path}: {len(cur.buf) - cur.off} trailing bytes at byte {cur.off}"
        )
    try:
        return EmbeddingDataset(X=X, K=K, y_true=y, labeled_idx=idx, views=views)
    except DatasetFormatError as exc:
        raise DatasetFormatError(f"{path}: {exc}") from exc


def _save_jsonl(ds: EmbeddingDataset, path: str) -> None:
    labeled = set(int(i) for i in ds.labeled_idx)
    with open(path, "w") as fh:
        for i in range(ds.n):
            rec = {"id": i, "vector": ds.X[i].tolist()}
            if i == 0:
                rec["k"] = ds.K
            if ds.y_true is not None:
                rec["label"] = int(ds.y_true[i])
            if i in labeled:
                rec["labeled"] = True
            if ds.views is not None:
                rec["view1"] = ds.views[0][i].tolist()
                rec["view2"] = ds.views[1][i].tolist()
            fh.write(json.dumps(rec) + "\n")


def _load_jsonl(path: str) -> EmbeddingDataset:
    records = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DatasetFormatError(f"{path}:{lineno}: invalid JSON: {exc}") from exc
            if "id" not in rec or "vector" not in rec:
                raise DatasetFormatError(f"{path}:{lineno}: record needs 'id' and 'vector'")
            records.append((lineno, rec))
    if not records:
        raise DatasetFormatError(f"{path}: empty dataset")

    records.sort(key=lambda t: t[1]["id"])
    ids = [rec["id"] for _, rec in records]
    if ids != list(range(len(records))):
        raise DatasetFormatError(f"{path}: ids must be exactly 0..{len(records) - 1}")

    n = len(records)
    X = np.array([rec["vector"] for _, rec in records], dtype=np.float64)
    have_label = ["label" in rec for _, rec in records]
    if any(have_label) and not all(have_label):
        missing = records[have_label.index(False)][0]
        raise DatasetFormatError(
            f"{path}: labels must appear on all records or none (line {missing} has none)"
        )
    y = np.array([rec["label"] for _, rec in records], dtype=np.int64) if all(have_label) else None

    k_vals = {rec["k"] for _, rec in records if "k" in rec}
    if len(k_vals) > 1:
        raise DatasetFormatError(f"{path}: conflicting 'k' values {sorted(k_vals)}")
    if k_vals:
        K = int(k_vals.pop())
    elif y is not None:
        K = int(y.max()) + 1
    else:
        raise DatasetFormatError(f"{path}: cluster count unknown (no 'k' key and no labels)")

    idx = np.array(
        [rec["id"] for _, rec in records if rec.get("labeled", False)], dtype=np.int64
    )
    have_views = ["view1" in rec for _, rec in records]
    views = None
    if any(have_views):
        if not all(have_views) or not all("view2" in rec for _, rec in records):
            raise DatasetFormatError(f"{path}: views must appear on all records or none")
        views = (
            np.array([rec["view1"] for _, rec in records], dtype=np.float64),
            np.array([rec["view2"] for _, rec in records], dtype=np.float64),
        )
    try:
        return EmbeddingDataset(X=X, K=K, y_true=y, labeled_idx=idx, views=views)
    except DatasetFormatError as exc:
        raise DatasetFormatError(f"{path}: {exc}") from exc
