"""Cold-start embedding prediction for fresh albums.

A small feed-forward network maps album metadata plus whatever usage the
album has gathered since release to the CF vector the weekly factorization
would eventually assign it. Predictions are refreshed on a fixed cadence
as usage accumulates.
"""
from __future__ import annotations

import io
import json
import logging
import struct
import zlib
from dataclasses import dataclass, field
from typing import BinaryIO, Iterable, Optional, Sequence

import numpy as np

from . import HOUR, WEEK
from .catalog import AlbumMeta, Catalog, EventType
from .cf_trainer import DEFAULT_MIN_INTERACTIONS, EmbeddingStore, ground_truth_for
from .codec import PathLike

_logger = logging.getLogger(__name__)

MODEL_MAGIC = b"FRMM"
MODEL_FORMAT = 1


@dataclass(frozen=True)
class FeatureSpec:
    dim: int
    genres: tuple[str, ...] = ()
    label_buckets: int = 64
    min_interactions: int = DEFAULT_MIN_INTERACTIONS

    @property
    def length(self) -> int:
        return self.dim + len(self.genres) + self.label_buckets + 3

    def label_bucket(self, label_id: str) -> int:
        return zlib.crc32(label_id.encode("utf-8")) % self.label_buckets

    def to_dict(self) -> dict:
        return {"dim": self.dim, "genres": list(self.genres),
                "label_buckets": self.label_buckets, "min_interactions": self.min_interactions}

    @classmethod
    def from_dict(cls, d: dict) -> "FeatureSpec":
        return cls(int(d["dim"]), tuple(d["genres"]), int(d["label_buckets"]),
                   int(d.get("min_interactions", DEFAULT_MIN_INTERACTIONS)))


def artist_prior(album: AlbumMeta, store: EmbeddingStore, catalog: Catalog,
                 min_interactions: int = DEFAULT_MIN_INTERACTIONS) -> np.ndarray:
    """Mean ground-truth vector over the artists' strictly earlier albums."""
    vecs = []
    seen = set()
    for artist in album.artist_ids:
        for other in catalog.albums_by_artist(artist):
            if other in seen or other == album.album_id:
                continue
            seen.add(other)
            if catalog.albums[other].release_ts >= album.release_ts:
                continue
            v = ground_truth_for(other, store, min_interactions)
            if v is not None:
                vecs.append(v)
    if not vecs:
        return np.zeros(store.dim)
    return np.mean(vecs, axis=0)


def build_features(
    album: AlbumMeta,
    store: EmbeddingStore,
    usage_cutoff: int,
    catalog: Catalog,
    spec: FeatureSpec,
    prior: Optional[np.ndarray] = None,
) -> np.ndarray:
    """Feature vector ``[artist_prior | genre multi-hot | label bucket | usage]``.

    Usage counters only see events in ``[release_ts, usage_cutoff)``.
    """
    if usage_cutoff < album.release_ts:
        raise ValueError("usage_cutoff precedes the release")
    if store.dim != spec.dim:
        raise ValueError(f"store dim {store.dim} != feature dim {spec.dim}")
    x = np.zeros(spec.length)
    x[: spec.dim] = artist_prior(album, store, catalog, spec.min_interactions) if prior is None else prior
    off = spec.dim
    for g in album.genre_ids:
        if g in spec.genres:
            x[off + spec.genres.index(g)] = 1.0
    off += len(spec.genres)
    x[off + spec.label_bucket(album.label_id)] = 1.0
    off += spec.label_buckets
    table = catalog.event_table()
    streams = table.count(EventType.STREAM, album.album_id, album.release_ts, usage_cutoff)
    likes = table.count(EventType.LIKE, album.album_id, album.release_ts, usage_cutoff)
    x[off] = np.log1p(streams)
    x[off + 1] = np.log1p(likes)
    x[off + 2] = (usage_cutoff - album.release_ts) / HOUR / 24.0
    return x


@dataclass
class MlpModel:
    """Three weight layers: ReLU, ReLU, linear."""

    W1: np.ndarray
    b1: np.ndarray
    W2: np.ndarray
    b2: np.ndarray
    W3: np.ndarray
    b3: np.ndarray

    PARAM_NAMES = ("W1", "b1", "W2", "b2", "W3", "b3")

    def __post_init__(self):
        F, h1 = self.W1.shape
        h1b, h2 = self.W2.shape
        h2b, d = self.W3.shape
        if h1 != h1b or h2 != h2b or self.b1.shape != (h1,) or self.b2.shape != (h2,) or self.b3.shape != (d,):
            raise ValueError("layer shapes do not chain")

    @property
    def in_dim(self) -> int:
        return self.W1.shape[0]

    @property
    def out_dim(self) -> int:
        return self.W3.shape[1]

    @classmethod
    def init(cls, in_dim: int, hidden: tuple[int, int], out_dim: int,
             rng: np.random.Generator) -> "MlpModel":
        sizes = (in_dim, hidden[0], hidden[1], out_dim)
        params = []
        for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
            lim = np.sqrt(6.0 / (fan_in + fan_out))
            params.append(rng.uniform(-lim, lim, size=(fan_in, fan_out)))
            params.append(np.zeros(fan_out))
        return cls(*params)

    def params(self) -> list[np.ndarray]:
        return [getattr(self, n) for n in self.PARAM_NAMES]

    def copy(self) -> "MlpModel":
        return MlpModel(*(p.copy() for p in self.params()))

    def forward(self, X: np.ndarray):
        z1 = X @ self.W1 + self.b1
        a1 = np.maximum(z1, 0.0)
        z2 = a1 @ self.W2 + self.b2
        a2 = np.maximum(z2, 0.0)
        return a2 @ self.W3 + self.b3, (z1, a1, z2, a2)

    # Binary layout (little-endian):
    #   magic "FRMM" | u16 format | u16 n_layers(=3) | u32 meta_len | meta JSON
    #   per layer: u32 rows | u32 cols | f32[rows*cols] W (row-major) | f32[cols] b
    def write(self, fh: BinaryIO, meta: Optional[dict] = None) -> None:
        blob = json.dumps(meta or {}, sort_keys=True).encode("utf-8")
        fh.write(MODEL_MAGIC)
        fh.write(struct.pack("<HHI", MODEL_FORMAT, 3, len(blob)))
        fh.write(blob)
        for W, b in ((self.W1, self.b1), (self.W2, self.b2), (self.W3, self.b3)):
            fh.write(struct.pack("<II", *W.shape))
            fh.write(np.ascontiguousarray(W, dtype="<f4").tobytes())
            fh.write(np.asarray(b, dtype="<f4").tobytes())

    @classmethod
    def read(cls, fh: BinaryIO) -> tuple["MlpModel", dict]:
        if fh.read(4) != MODEL_MAGIC:
            raise ValueError("not a model file")
        fmt, n_layers, meta_len = struct.unpack("<HHI", fh.read(8))
        if fmt != MODEL_FORMAT or n_layers != 3:
            raise ValueError("unsupported model format")
        meta = json.loads(fh.read(meta_len).decode("utf-8"))
        params = []
        for _ in range(3):
            r, c = struct.unpack("<II", fh.read(8))
            W = np.frombuffer(fh.read(4 * r * c), dtype="<f4").reshape(r, c).astype(float)
            b = np.frombuffer(fh.read(4 * c), dtype="<f4").astype(float)
            params += [W, b]
        return cls(*params), meta

    def save(self, path: PathLike, meta: Optional[dict] = None) -> None:
        with open(path, "wb") as fh:
            self.write(fh, meta)

    @classmethod
    def load(cls, path: PathLike) -> tuple["MlpModel", dict]:
        with open(path, "rb") as fh:
            return cls.read(fh)

    def to_bytes(self, meta: Optional[dict] = None) -> bytes:
        buf = io.BytesIO()
        self.write(buf, meta)
        return buf.getvalue()


def predict(model: MlpModel, features: np.ndarray) -> np.ndarray:
    features = np.asarray(features, dtype=float)
    if features.shape[-1] != model.in_dim:
        raise ValueError(f"expected {model.in_dim} features, got {features.shape[-1]}")
    out, _ = model.forward(features)
    return out


def loss_and_grads(model: MlpModel, X: np.ndarray, Y: np.ndarray):
    """Batch loss ``mean_i ||f(x_i) - y_i||^2`` and its parameter gradients."""
    X = np.atleast_2d(X)
    Y = np.atleast_2d(Y)
    n = X.shape[0]
    out, (z1, a1, z2, a2) = model.forward(X)
    diff = out - Y
    loss = float(np.sum(diff * diff) / n)
    g_out = 2.0 * diff / n
    gW3 = a2.T @ g_out
    gb3 = g_out.sum(axis=0)
    g_z2 = (g_out @ model.W3.T) * (z2 > 0)
    gW2 = a1.T @ g_z2
    gb2 = g_z2.sum(axis=0)
    g_z1 = (g_z2 @ model.W2.T) * (z1 > 0)
    gW1 = X.T @ g_z1
    gb1 = g_z1.sum(axis=0)
    return loss, [gW1, gb1, gW2, gb2, gW3, gb3]


def mse(model: MlpModel, X: np.ndarray, Y: np.ndarray) -> float:
    out, _ = model.forward(np.atleast_2d(X))
    diff = out - np.atleast_2d(Y)
    return float(np.sum(diff * diff) / diff.shape[0])


@dataclass
class TrainParams:
    lr: float = 1e-2
    epochs: int = 200
    batch_size: int = 32
    seed: int = 0
    hidden: tuple[int, int] = (64, 64)


@dataclass
class TrainReport:
    epoch_losses: list[float]
    final_loss: float
    params: dict
    seed: int
    n_examples: int = 0


def train(dataset: Sequence[tuple[np.ndarray, np.ndarray]], hp: TrainParams = TrainParams(),
          model: Optional[MlpModel] = None) -> tuple[MlpModel, TrainReport]:
    """Mini-batch gradient descent with a constant step on the squared error.

    Deterministic given ``hp.seed``: it drives both the weight init and the
    per-epoch shuffles. Passing ``model`` skips the init and trains a copy.
    """
    if not dataset:
        raise ValueError("empty dataset")
    X = np.asarray([np.asarray(x, dtype=float) for x, _ in dataset])
    try:
        Y = np.asarray([np.asarray(y, dtype=float) for _, y in dataset])
    except ValueError:
        raise ValueError("target dimension mismatch") from None
    if X.ndim != 2 or Y.ndim != 2:
        raise ValueError("inconsistent feature or target dimensions")
    rng = np.random.default_rng(hp.seed)
    if model is None:
        model = MlpModel.init(X.shape[1], hp.hidden, Y.shape[1], rng)
    else:
        model = model.copy()
    if model.in_dim != X.shape[1] or model.out_dim != Y.shape[1]:
        raise ValueError("dataset dimensions do not match the model")

    n = X.shape[0]
    params = model.params()
    losses = []
    for _ in range(hp.epochs):
        order = rng.permutation(n)
        for start in range(0, n, hp.batch_size):
            idx = order[start:start + hp.batch_size]
            _, grads = loss_and_grads(model, X[idx], Y[idx])
            if hp.lr:
                for p, g in zip(params, grads):
                    p -= hp.lr * g
        losses.append(mse(model, X, Y))
    if not np.all(np.isfinite(losses)):
        raise FloatingPointError("training diverged")
    report = TrainReport(
        epoch_losses=losses,
        final_loss=losses[-1] if losses else mse(model, X, Y),
        params={"lr": hp.lr, "epochs": hp.epochs, "batch_size": hp.batch_size,
                "hidden": list(hp.hidden)},
        seed=hp.seed,
        n_examples=n,
    )
    return model, report


def _stacked_forward(params: list[np.ndarray], x: np.ndarray):
    """Forward pass where any parameter may carry a leading batch axis."""

    def layer(a, W, b):
        z = (a[:, None, :] @ W)[:, 0, :] if W.ndim == 3 else a @ W
        return z + b

    W1, b1, W2, b2, W3, b3 = params
    z1 = layer(x, W1, b1)
    z2 = layer(np.maximum(z1, 0.0), W2, b2)
    return layer(np.maximum(z2, 0.0), W3, b3), z1 > 0, z2 > 0


def gradient_check(model: MlpModel, example: tuple[np.ndarray, np.ndarray], eps: float = 1e-5,
                   floor: float = 1e-6, chunk: int = 256) -> float:
    """Largest relative gap between backprop and central differences.

    Relative error is ``|a - n| / max(|a|, |n|, floor)``. Each parameter
    entry is nudged by +/-eps and the full forward pass rerun (batched over
    entries). Coordinates whose nudge flips a ReLU on or off are skipped,
    since the loss is not differentiable across that kink.
    """
    if not 0 < eps <= 1e-2:
        raise ValueError("eps must be in (0, 1e-2]")
    x, y = (np.atleast_2d(np.asarray(v, dtype=float)) for v in example)
    _, analytic = loss_and_grads(model, x, y)
    base = model.params()
    _, m1, m2 = _stacked_forward(base, x)
    worst = 0.0
    skipped = 0
    for k, (p, g) in enumerate(zip(base, analytic)):
        size = p.size
        for lo in range(0, size, chunk):
            idx = np.arange(lo, min(size, lo + chunk))
            bump = np.zeros((idx.size, size))
            bump[np.arange(idx.size), idx] = eps
            outs = []
            ok = np.ones(idx.size, dtype=bool)
            for sign in (1.0, -1.0):
                stack = (p.reshape(1, -1) + sign * bump).reshape((idx.size,) + p.shape)
                params = list(base)
                params[k] = stack
                out, p1, p2 = _stacked_forward(params, x)
                ok &= (p1 == m1).all(axis=1) & (p2 == m2).all(axis=1)
                outs.append(out)
            # (a-y)^2 - (b-y)^2 == (a-b)(a+b-2y): avoids cancelling two large losses.
            numeric = np.sum((outs[0] - outs[1]) * (outs[0] + outs[1] - 2 * y), axis=1) / (2 * eps)
            a = g.reshape(-1)[idx]
            err = np.abs(a - numeric) / np.maximum(np.maximum(np.abs(a), np.abs(numeric)), floor)
            skipped += int((~ok).sum())
            if ok.any():
                worst = max(worst, float(err[ok].max()))
    if skipped:
        _logger.debug("gradient_check skipped %d kink-crossing coordinates", skipped)
    return worst


def make_training_set(
    catalog: Catalog,
    store: EmbeddingStore,
    spec: FeatureSpec,
    as_of: int,
    rng: np.random.Generator,
) -> list[tuple[np.ndarray, np.ndarray, str]]:
    """Examples for every album with a ground-truth vector in ``store``.

    Each album gets one usage cutoff drawn uniformly from its first week
    (capped at ``as_of``), so the network sees albums at every age it will
    be asked to score them at.
    """
    out = []
    for album_id in store.item_ids:
        target = ground_truth_for(album_id, store, spec.min_interactions)
        meta = catalog.albums.get(album_id)
        if target is None or meta is None or meta.release_ts >= as_of:
            continue
        span = min(WEEK, as_of - meta.release_ts)
        cutoff = meta.release_ts + int(rng.integers(0, span))
        out.append((build_features(meta, store, cutoff, catalog, spec), target, album_id))
    return out


@dataclass
class PredictionSnapshot:
    version: int
    created_at: int
    ids: list[str] = field(default_factory=list)
    vectors: np.ndarray = field(default_factory=lambda: np.zeros((0, 0)))

    def as_dict(self) -> dict[str, np.ndarray]:
        return dict(zip(self.ids, self.vectors))

    def __len__(self) -> int:
        return len(self.ids)


def refresh_predictions(
    model: MlpModel,
    window: Iterable[str],
    now: int,
    catalog: Catalog,
    store: EmbeddingStore,
    spec: FeatureSpec,
    previous_version: int = 0,
    prior_cache: Optional[dict[str, np.ndarray]] = None,
) -> PredictionSnapshot:
    """Forward pass over every windowed album using usage up to ``now``.

    Albums that left the window are simply absent from the new snapshot.
    ``prior_cache`` (album id -> artist prior) may be shared across calls
    that use the same ``store``.
    """
    ids = sorted(window)
    if not ids:
        return PredictionSnapshot(previous_version + 1, now, [], np.zeros((0, model.out_dim)))
    feats = np.zeros((len(ids), spec.length))
    for i, album_id in enumerate(ids):
        meta = catalog.albums[album_id]
        prior = None
        if prior_cache is not None:
            prior = prior_cache.get(album_id)
            if prior is None:
                prior = artist_prior(meta, store, catalog, spec.min_interactions)
                prior_cache[album_id] = prior
        feats[i] = build_features(meta, store, max(now, meta.release_ts), catalog, spec, prior)
    return PredictionSnapshot(previous_version + 1, now, ids, predict(model, feats))
