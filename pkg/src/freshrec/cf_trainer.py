"""Weekly collaborative-filtering embeddings.

A confidence-weighted user x album matrix is built from one week of
streams and likes, then factorized by randomized subspace iteration. The
resulting item vectors are the regression targets for the cold-start
network, and the user vectors are what carousels are scored against.
"""
from __future__ import annotations

import io
import struct
from dataclasses import dataclass, field
from typing import BinaryIO, Iterable, Optional, Sequence, Union

import numpy as np
import scipy.sparse as sp

from . import WEEK
from .catalog import EventTable, EventType, UsageEvent
from .codec import PathLike

DEFAULT_DIM = 32
DEFAULT_MIN_INTERACTIONS = 10
OVERSAMPLE = 8

STORE_MAGIC = b"FRES"
STORE_FORMAT = 1


@dataclass
class InteractionMatrix:
    """Sparse user x album weights in COO layout.

    Row and column id lists are sorted, so two matrices built from the same
    events are identical regardless of event order.
    """

    user_ids: list[str]
    album_ids: list[str]
    rows: np.ndarray
    cols: np.ndarray
    weights: np.ndarray

    @property
    def shape(self) -> tuple[int, int]:
        return len(self.user_ids), len(self.album_ids)

    @property
    def nnz(self) -> int:
        return int(self.weights.shape[0])

    def to_csr(self) -> sp.csr_matrix:
        return sp.csr_matrix((self.weights, (self.rows, self.cols)), shape=self.shape)

    def to_dense(self) -> np.ndarray:
        out = np.zeros(self.shape)
        out[self.rows, self.cols] = self.weights
        return out

    def support(self) -> dict[str, int]:
        """Distinct interacting users per album."""
        counts = np.bincount(self.cols, minlength=len(self.album_ids))
        return {a: int(c) for a, c in zip(self.album_ids, counts)}

    @classmethod
    def from_dense(cls, dense: np.ndarray, user_ids=None, album_ids=None) -> "InteractionMatrix":
        dense = np.asarray(dense, dtype=float)
        m, n = dense.shape
        user_ids = list(user_ids) if user_ids is not None else [f"u{i:05d}" for i in range(m)]
        album_ids = list(album_ids) if album_ids is not None else [f"a{j:05d}" for j in range(n)]
        r, c = np.nonzero(dense)
        return cls(user_ids, album_ids, r.astype(np.int64), c.astype(np.int64), dense[r, c])


def build_matrix(
    events: Union[EventTable, Iterable[UsageEvent]],
    window_end: int,
    window_len: int = WEEK,
    like_weight: float = 1.0,
) -> InteractionMatrix:
    """Aggregate Stream/Like events with ts in ``[window_end - window_len, window_end)``.

    Entry weight is ``log(1 + streams) + like_weight * likes``.
    """
    table = events if isinstance(events, EventTable) else EventTable(events)
    rows = table.select(window_end - window_len, window_end, (EventType.STREAM, EventType.LIKE))
    if rows.size == 0:
        empty = np.zeros(0, dtype=np.int64)
        return InteractionMatrix([], [], empty, empty, np.zeros(0))
    u = table.user[rows]
    s = table.subject[rows]
    is_like = table.kind[rows] == list(EventType).index(EventType.LIKE)

    uniq_u = np.unique(u)
    uniq_s = np.unique(s)
    # Column/row order is by id string, not by first appearance.
    u_names = [table.user_ids[i] for i in uniq_u]
    s_names = [table.subject_ids[i] for i in uniq_s]
    u_perm = np.argsort(np.asarray(u_names, dtype=object), kind="stable")
    s_perm = np.argsort(np.asarray(s_names, dtype=object), kind="stable")
    u_rank = np.empty_like(u_perm)
    u_rank[u_perm] = np.arange(len(u_perm))
    s_rank = np.empty_like(s_perm)
    s_rank[s_perm] = np.arange(len(s_perm))
    ri = u_rank[np.searchsorted(uniq_u, u)]
    ci = s_rank[np.searchsorted(uniq_s, s)]

    n_cols = len(uniq_s)
    keys, inv = np.unique(ri * n_cols + ci, return_inverse=True)
    streams = np.bincount(inv, weights=~is_like, minlength=keys.size)
    likes = np.bincount(inv, weights=is_like, minlength=keys.size)
    weights = np.log1p(streams) + like_weight * likes
    return InteractionMatrix(
        [u_names[i] for i in u_perm],
        [s_names[i] for i in s_perm],
        (keys // n_cols).astype(np.int64),
        (keys % n_cols).astype(np.int64),
        weights,
    )


@dataclass
class EmbeddingStore:
    dim: int
    user_ids: list[str]
    user_matrix: np.ndarray
    item_ids: list[str]
    item_matrix: np.ndarray
    singular_values: np.ndarray
    item_support: np.ndarray
    version: int = 1
    _user_pos: dict[str, int] = field(default_factory=dict, repr=False)
    _item_pos: dict[str, int] = field(default_factory=dict, repr=False)

    def __post_init__(self):
        self._user_pos = {u: i for i, u in enumerate(self.user_ids)}
        self._item_pos = {a: i for i, a in enumerate(self.item_ids)}

    def user_vec(self, user_id: str) -> Optional[np.ndarray]:
        i = self._user_pos.get(user_id)
        return None if i is None else self.user_matrix[i]

    def item_vec(self, album_id: str) -> Optional[np.ndarray]:
        i = self._item_pos.get(album_id)
        return None if i is None else self.item_matrix[i]

    def support_of(self, album_id: str) -> int:
        i = self._item_pos.get(album_id)
        return 0 if i is None else int(self.item_support[i])

    @property
    def user_vecs(self) -> dict[str, np.ndarray]:
        return dict(zip(self.user_ids, self.user_matrix))

    @property
    def item_vecs(self) -> dict[str, np.ndarray]:
        return dict(zip(self.item_ids, self.item_matrix))

    def mean_user_vec(self) -> np.ndarray:
        if not self.user_ids:
            return np.zeros(self.dim)
        return self.user_matrix.mean(axis=0)

    # ---- binary persistence --------------------------------------------
    # Little-endian layout:
    #   magic "FRES" | u16 format | u16 reserved | u64 version
    #   u32 dim | u32 n_users | u32 n_items | u32 n_sv
    #   f64[n_sv] singular values
    #   n_users x (u16 id_len | utf-8 id | f32[dim])
    #   n_items x (u16 id_len | utf-8 id | u32 support | f32[dim])

    def write(self, fh: BinaryIO) -> None:
        sv = np.asarray(self.singular_values, dtype="<f8")
        fh.write(STORE_MAGIC)
        fh.write(struct.pack("<HHQIIII", STORE_FORMAT, 0, self.version, self.dim,
                             len(self.user_ids), len(self.item_ids), sv.size))
        fh.write(sv.tobytes())
        for uid, vec in zip(self.user_ids, self.user_matrix):
            _write_id(fh, uid)
            fh.write(np.asarray(vec, dtype="<f4").tobytes())
        for aid, sup, vec in zip(self.item_ids, self.item_support, self.item_matrix):
            _write_id(fh, aid)
            fh.write(struct.pack("<I", int(sup)))
            fh.write(np.asarray(vec, dtype="<f4").tobytes())

    def save(self, path: PathLike) -> None:
        with open(path, "wb") as fh:
            self.write(fh)

    def to_bytes(self) -> bytes:
        buf = io.BytesIO()
        self.write(buf)
        return buf.getvalue()

    @classmethod
    def read(cls, fh: BinaryIO) -> "EmbeddingStore":
        if fh.read(4) != STORE_MAGIC:
            raise ValueError("not an embedding store file")
        fmt, _, version, dim, n_users, n_items, n_sv = struct.unpack("<HHQIIII", _read_exact(fh, 28))
        if fmt != STORE_FORMAT:
            raise ValueError(f"unsupported store format {fmt}")
        sv = np.frombuffer(_read_exact(fh, 8 * n_sv), dtype="<f8").astype(float)
        user_ids, users = [], np.zeros((n_users, dim))
        for i in range(n_users):
            user_ids.append(_read_id(fh))
            users[i] = np.frombuffer(_read_exact(fh, 4 * dim), dtype="<f4")
        item_ids, items = [], np.zeros((n_items, dim))
        support = np.zeros(n_items, dtype=np.int64)
        for i in range(n_items):
            item_ids.append(_read_id(fh))
            (support[i],) = struct.unpack("<I", _read_exact(fh, 4))
            items[i] = np.frombuffer(_read_exact(fh, 4 * dim), dtype="<f4")
        return cls(dim, user_ids, users, item_ids, items, sv, support, version)

    @classmethod
    def load(cls, path: PathLike) -> "EmbeddingStore":
        with open(path, "rb") as fh:
            return cls.read(fh)

    @classmethod
    def from_bytes(cls, data: bytes) -> "EmbeddingStore":
        return cls.read(io.BytesIO(data))


def _write_id(fh: BinaryIO, ident: str) -> None:
    raw = ident.encode("utf-8")
    fh.write(struct.pack("<H", len(raw)))
    fh.write(raw)


def _read_id(fh: BinaryIO) -> str:
    (n,) = struct.unpack("<H", _read_exact(fh, 2))
    return _read_exact(fh, n).decode("utf-8")


def _read_exact(fh: BinaryIO, n: int) -> bytes:
    data = fh.read(n)
    if len(data) != n:
        raise ValueError("truncated file")
    return data


@dataclass
class SvdResult:
    U: np.ndarray
    s: np.ndarray
    V: np.ndarray
    iterations: int


def _orth(x: np.ndarray) -> np.ndarray:
    q, _ = np.linalg.qr(x)
    return q


def randomized_svd(
    A,
    d: int,
    n_iter: int = 7,
    seed: int = 0,
    oversample: int = OVERSAMPLE,
    tol: Optional[float] = None,
    max_iter: int = 1000,
) -> SvdResult:
    """Top-``d`` singular triplets of ``A`` by randomized subspace iteration.

    Runs ``n_iter`` power iterations on a Gaussian sketch of width
    ``d + oversample``. With ``tol`` set, keeps iterating (up to
    ``max_iter``) until every residual ``||A v_i - s_i u_i||`` is below
    ``tol * s_1``. Each singular pair is sign-normalized so the largest
    magnitude entry of ``v_i`` is positive.
    """
    m, n = A.shape
    if d < 1 or d > min(m, n):
        raise ValueError(f"d={d} must be in [1, min(rows, cols)={min(m, n)}]")
    if n_iter < 1:
        raise ValueError("n_iter must be >= 1")
    norm = sp.linalg.norm(A) if sp.issparse(A) else np.linalg.norm(A)
    if norm == 0:
        raise ValueError("degenerate matrix")
    k = min(d + oversample, min(m, n))
    rng = np.random.default_rng(seed)
    Q = _orth(A @ rng.standard_normal((n, k)))

    def ritz(Q):
        B = np.asarray((A.T @ Q).T)
        ub, s, vt = np.linalg.svd(B, full_matrices=False)
        return Q @ ub[:, :d], s[:d], vt[:d].T

    it = 0
    while True:
        for _ in range(n_iter if it == 0 else 1):
            Q = _orth(A @ _orth(A.T @ Q))
            it += 1
        U, s, V = ritz(Q)
        if tol is None or it >= max_iter:
            break
        resid = np.linalg.norm(np.asarray(A @ V) - U * s, axis=0)
        if resid.max() <= tol * s[0]:
            break

    idx = np.argmax(np.abs(V), axis=0)
    signs = np.sign(V[idx, np.arange(d)])
    signs[signs == 0] = 1.0
    return SvdResult(U * signs, s, V * signs, it)


def truncated_svd(
    m: InteractionMatrix,
    d: int = DEFAULT_DIM,
    n_iter: int = 7,
    seed: int = 0,
    version: int = 1,
    tol: Optional[float] = None,
) -> EmbeddingStore:
    """Factorize ``m`` into user/item vectors whose dot products approximate entries.

    Singular values are split evenly: ``user = U * sqrt(s)``, ``item = V * sqrt(s)``.
    """
    if m.nnz == 0 or not np.any(m.weights):
        raise ValueError("degenerate matrix")
    res = randomized_svd(m.to_csr(), d, n_iter=n_iter, seed=seed, tol=tol)
    root = np.sqrt(res.s)
    support = np.bincount(m.cols, minlength=len(m.album_ids))
    return EmbeddingStore(
        dim=d,
        user_ids=list(m.user_ids),
        user_matrix=res.U * root,
        item_ids=list(m.album_ids),
        item_matrix=res.V * root,
        singular_values=res.s.copy(),
        item_support=support,
        version=version,
    )


def ground_truth_for(
    album_id: str, store: EmbeddingStore, min_interactions: int = DEFAULT_MIN_INTERACTIONS
) -> Optional[np.ndarray]:
    """The album's CF vector, or ``None`` if fewer than ``min_interactions`` users touched it."""
    if store.support_of(album_id) < min_interactions:
        return None
    return store.item_vec(album_id)


def train_cf(
    events: Union[EventTable, Sequence[UsageEvent]],
    window_end: int,
    d: int = DEFAULT_DIM,
    n_iter: int = 7,
    seed: int = 0,
    window_len: int = WEEK,
    like_weight: float = 1.0,
    version: int = 1,
) -> EmbeddingStore:
    m = build_matrix(events, window_end, window_len, like_weight)
    d_eff = min(d, *m.shape) if m.nnz else d
    store = truncated_svd(m, d_eff, n_iter=n_iter, seed=seed, version=version)
    if d_eff < d:
        # Tiny windows: pad with zero columns so downstream shapes stay fixed.
        pad = d - d_eff
        store = EmbeddingStore(
            d, store.user_ids, np.pad(store.user_matrix, ((0, 0), (0, pad))),
            store.item_ids, np.pad(store.item_matrix, ((0, 0), (0, pad))),
            np.pad(store.singular_values, (0, pad)), store.item_support, version,
        )
    return store
