"""Dot-product top-k retrieval over album embeddings.

Two modes: an exact full scan, and an inverted-file index that clusters
the vectors with k-means and only scans the lists of the ``nprobe``
centroids with the highest inner product against the query.
"""
from __future__ import annotations

import bisect
import math
import threading
from dataclasses import dataclass
from typing import Generic, Iterable, Mapping, Optional, TypeVar, Union

import numpy as np

KMEANS_MAX_ITER = 50
KMEANS_TOL = 1e-6


@dataclass(frozen=True)
class Exact:
    pass


@dataclass(frozen=True)
class CoarseIVF:
    num_clusters: int
    nprobe: int = 1

    @classmethod
    def for_size(cls, n: int) -> "CoarseIVF":
        """``sqrt(N)`` lists, probing a quarter of them."""
        nc = max(1, int(round(math.sqrt(n))))
        return cls(nc, max(1, math.ceil(nc / 4)))


IndexMode = Union[Exact, CoarseIVF]


@dataclass
class IndexSnapshot:
    version: int
    ids: list[str]
    vectors: np.ndarray
    mode: IndexMode
    centroids: Optional[np.ndarray] = None
    assignments: Optional[np.ndarray] = None
    lists: Optional[list[np.ndarray]] = None

    def __len__(self) -> int:
        return len(self.ids)

    @property
    def dim(self) -> int:
        return self.vectors.shape[1] if self.vectors.ndim == 2 else 0

    def position(self) -> dict[str, int]:
        return {a: i for i, a in enumerate(self.ids)}


def kmeans(X: np.ndarray, k: int, seed: int = 0, max_iter: int = KMEANS_MAX_ITER,
           tol: float = KMEANS_TOL) -> tuple[np.ndarray, np.ndarray]:
    """Lloyd's algorithm with k-means++ seeding. Returns ``(centroids, labels)``."""
    n = X.shape[0]
    if not 1 <= k <= n:
        raise ValueError(f"num_clusters={k} must be in [1, {n}]")
    rng = np.random.default_rng(seed)
    sq = np.einsum("ij,ij->i", X, X)
    centroids = np.empty((k, X.shape[1]))
    centroids[0] = X[rng.integers(n)]
    closest = np.maximum(sq - 2 * X @ centroids[0] + centroids[0] @ centroids[0], 0.0)
    for j in range(1, k):
        total = closest.sum()
        if total <= 0:
            # Fewer distinct points than clusters: reuse points in order.
            pick = j % n
        else:
            pick = int(np.searchsorted(np.cumsum(closest), rng.random() * total, side="right"))
            pick = min(pick, n - 1)
        centroids[j] = X[pick]
        d = np.maximum(sq - 2 * X @ centroids[j] + centroids[j] @ centroids[j], 0.0)
        closest = np.minimum(closest, d)

    labels = np.zeros(n, dtype=np.int64)
    for _ in range(max_iter):
        dist = sq[:, None] - 2 * X @ centroids.T + np.einsum("ij,ij->i", centroids, centroids)[None, :]
        labels = np.argmin(dist, axis=1)
        counts = np.bincount(labels, minlength=k)
        sums = np.zeros_like(centroids)
        np.add.at(sums, labels, X)
        new = centroids.copy()
        nonempty = counts > 0
        new[nonempty] = sums[nonempty] / counts[nonempty, None]
        shift = np.max(np.linalg.norm(new - centroids, axis=1))
        centroids = new
        if shift < tol:
            break
    dist = sq[:, None] - 2 * X @ centroids.T + np.einsum("ij,ij->i", centroids, centroids)[None, :]
    return centroids, np.argmin(dist, axis=1)


def build(items: Mapping[str, np.ndarray], mode: IndexMode = Exact(), seed: int = 0,
          version: int = 1) -> IndexSnapshot:
    """Snapshot over ``items`` (album id -> vector), stored in id order."""
    ids = sorted(items)
    if ids:
        vectors = np.asarray([np.asarray(items[a], dtype=float) for a in ids])
        if vectors.ndim != 2:
            raise ValueError("all vectors must share one length")
    else:
        vectors = np.zeros((0, 0))
    return build_from_arrays(ids, vectors, mode, seed, version)


def build_from_arrays(ids: list[str], vectors: np.ndarray, mode: IndexMode = Exact(),
                      seed: int = 0, version: int = 1) -> IndexSnapshot:
    """Like :func:`build`, from ids and a row-aligned matrix in any order."""
    if len(set(ids)) != len(ids):
        raise ValueError("duplicate ids")
    if any(a > b for a, b in zip(ids, ids[1:])):
        # Row order doubles as the id tie-break, so store rows sorted by id.
        order = sorted(range(len(ids)), key=ids.__getitem__)
        ids = [ids[i] for i in order]
        vectors = np.asarray(vectors)[order]
    if isinstance(mode, Exact):
        return IndexSnapshot(version, list(ids), vectors, mode)
    if not ids:
        raise ValueError("CoarseIVF needs at least one item")
    if not 1 <= mode.nprobe:
        raise ValueError("nprobe must be >= 1")
    centroids, labels = kmeans(vectors, mode.num_clusters, seed)
    lists = [np.nonzero(labels == c)[0] for c in range(mode.num_clusters)]
    return IndexSnapshot(version, list(ids), vectors, mode, centroids, labels, lists)


def _top_k(scores: np.ndarray, rows: np.ndarray, k: int) -> tuple[np.ndarray, np.ndarray]:
    """Rows of the ``k`` best scores, ties broken by smaller row (= smaller id)."""
    if rows.size > k:
        kth = np.partition(scores, rows.size - k)[rows.size - k]
        keep = scores >= kth
        scores, rows = scores[keep], rows[keep]
    order = np.lexsort((rows, -scores))[:k]
    return rows[order], scores[order]


def query(snapshot: IndexSnapshot, user_vec: np.ndarray, k: int,
          exclude: Iterable[str] = ()) -> list[tuple[str, float]]:
    """Top-``k`` albums by dot product with ``user_vec``, best first."""
    if k < 1:
        raise ValueError("k must be >= 1")
    if not snapshot.ids:
        return []
    q = np.asarray(user_vec, dtype=float)
    if isinstance(snapshot.mode, CoarseIVF) and snapshot.mode.nprobe < snapshot.mode.num_clusters:
        cscore = snapshot.centroids @ q
        probe = np.lexsort((np.arange(cscore.size), -cscore))[: snapshot.mode.nprobe]
        rows = np.sort(np.concatenate([snapshot.lists[c] for c in probe]))
    else:
        rows = np.arange(len(snapshot.ids))
    exclude = set(exclude)
    if exclude:
        pos = snapshot.position() if len(exclude) > 64 else None
        if pos is not None:
            drop = {pos[a] for a in exclude if a in pos}
        else:
            drop = {i for i in (_bisect(snapshot.ids, a) for a in exclude) if i is not None}
        if drop:
            rows = rows[~np.isin(rows, np.fromiter(drop, dtype=np.int64))]
    if rows.size == 0:
        return []
    scores = snapshot.vectors[rows] @ q
    top, top_scores = _top_k(scores, rows, k)
    return [(snapshot.ids[i], float(s)) for i, s in zip(top, top_scores)]


def _bisect(ids: list[str], key: str) -> Optional[int]:
    i = bisect.bisect_left(ids, key)
    return i if i < len(ids) and ids[i] == key else None


T = TypeVar("T")


class StaleSnapshotError(ValueError):
    pass


class SnapshotSlot(Generic[T]):
    """Holds the live snapshot; readers grab a reference, one writer swaps.

    Readers never take the lock: rebinding ``_current`` is a single
    reference assignment, so a reader sees either the old or the new
    snapshot in full.
    """

    def __init__(self, initial: Optional[T] = None):
        self._current = initial
        self._lock = threading.Lock()

    def get(self) -> Optional[T]:
        return self._current

    @property
    def version(self) -> int:
        cur = self._current
        return 0 if cur is None else cur.version

    def swap(self, nxt: T) -> None:
        with self._lock:
            cur = self._current
            if cur is not None and nxt.version <= cur.version:
                raise StaleSnapshotError(
                    f"stale snapshot: version {nxt.version} <= live {cur.version}")
            self._current = nxt


def swap(current: SnapshotSlot, nxt) -> None:
    current.swap(nxt)
