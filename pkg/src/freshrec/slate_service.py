"""Carousel assembly, feedback intake and the 4-hourly refresh tick.

All serving state (predictions, index, arm posteriors) lives in one
immutable :class:`ServingState` behind a :class:`SnapshotSlot`. A request
grabs the state once and uses it throughout; ``scheduler_tick`` builds the
next state off to the side and swaps it in only when every stage
succeeded.
"""
from __future__ import annotations

import itertools
import logging
import threading
from collections import OrderedDict
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Callable, Optional, Protocol, Union

import numpy as np

from . import HOUR, WEEK
from .bandit import Bandit, BanditConfig, ArmSnapshot, attribute_rewards, sample_and_rank_snapshot
from .catalog import Catalog, EventType, UsageEvent, NEW_RELEASE_SPAN
from .cf_trainer import EmbeddingStore
from .coldstart import FeatureSpec, MlpModel, PredictionSnapshot, refresh_predictions
from .vector_index import Exact, IndexMode, IndexSnapshot, SnapshotSlot, build_from_arrays, query

_logger = logging.getLogger(__name__)

CAROUSEL_LEN = 12
VIEW_ALL_LEN = 100


class Policy(str, Enum):
    EDITORIAL = "Editorial"
    COLD_START = "ColdStart"
    TS_COLD_START = "TsColdStart"


class Section(str, Enum):
    UNMISSABLE = "Unmissable"
    PERSONALIZED = "Personalized"


class UnknownSlateError(KeyError):
    pass


@dataclass(frozen=True)
class SlateEntry:
    album_id: str
    section: Section
    position: int


@dataclass(frozen=True)
class Slate:
    slate_id: str
    user_id: str
    entries: tuple[SlateEntry, ...]
    policy: Policy
    snapshot_version: int
    created_at: int
    fallback_user_vector: bool = False

    @property
    def album_ids(self) -> list[str]:
        return [e.album_id for e in self.entries]

    @property
    def prefix_len(self) -> int:
        return sum(1 for e in self.entries if e.section is Section.UNMISSABLE)

    def to_dict(self) -> dict[str, Any]:
        return {
            "slate_id": self.slate_id,
            "user_id": self.user_id,
            "policy": self.policy.value,
            "snapshot_version": self.snapshot_version,
            "created_at": self.created_at,
            "fallback_user_vector": self.fallback_user_vector,
            "entries": [
                {"album_id": e.album_id, "section": e.section.value, "position": e.position}
                for e in self.entries
            ],
        }

    def check(self, max_len: int = CAROUSEL_LEN) -> None:
        """Raise ``AssertionError`` if a structural invariant is broken."""
        ids = self.album_ids
        assert len(ids) == len(set(ids)), "duplicate album in slate"
        assert len(ids) <= max_len, "slate too long"
        assert [e.position for e in self.entries] == list(range(1, len(ids) + 1)), "positions not 1..N"
        sections = [e.section for e in self.entries]
        n_pre = self.prefix_len
        assert all(s is Section.UNMISSABLE for s in sections[:n_pre]), "unmissable after personalized"
        assert all(s is Section.PERSONALIZED for s in sections[n_pre:]), "unmissable after personalized"


@dataclass
class ModelBundle:
    """One week's CF store plus the cold-start model trained against it."""

    store: EmbeddingStore
    model: MlpModel
    spec: FeatureSpec
    version: int = 1
    _mean_user: Optional[np.ndarray] = field(default=None, repr=False)

    def user_vector(self, user_id: str) -> tuple[np.ndarray, bool]:
        v = self.store.user_vec(user_id)
        if v is not None:
            return v, False
        if self._mean_user is None:
            self._mean_user = self.store.mean_user_vec()
        return self._mean_user, True


@dataclass
class ServingState:
    version: int
    created_at: int
    bundle: ModelBundle
    predictions: PredictionSnapshot
    index: IndexSnapshot
    arms: ArmSnapshot
    arm_rows: dict[str, int]
    index_expiry: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    arm_expiry: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    def expired_index_ids(self, now: int) -> list[str]:
        """Indexed albums whose window closed since this state was built."""
        return [self.index.ids[i] for i in np.nonzero(self.index_expiry <= now)[0]]

    def expired_arm_rows(self, now: int) -> np.ndarray:
        return np.nonzero(self.arm_expiry <= now)[0]


@dataclass
class TickReport:
    now: int
    ok: bool
    version: int
    n_predictions: int = 0
    expired: list[str] = field(default_factory=list)
    registered: list[str] = field(default_factory=list)
    absorbed: int = 0
    error: Optional[str] = None


class ServingPipeline:
    """The policy-independent part of a tick: predictions and the index."""

    def __init__(self, catalog: Catalog, index_mode: IndexMode = Exact(), seed: int = 0):
        self.catalog = catalog
        self.index_mode = index_mode
        self.seed = seed
        self._priors: dict[int, dict[str, np.ndarray]] = {}

    def compute(self, now: int, bundle: ModelBundle) -> tuple[PredictionSnapshot, IndexSnapshot]:
        window = self.catalog.new_release_window(now)
        priors = self._priors.setdefault(id(bundle.store), {})
        preds = refresh_predictions(bundle.model, window, now, self.catalog, bundle.store,
                                    bundle.spec, prior_cache=priors)
        mode = self.index_mode
        if not isinstance(mode, Exact) and len(preds) < getattr(mode, "num_clusters", 0):
            mode = Exact()
        index = build_from_arrays(preds.ids, preds.vectors, mode, seed=self.seed)
        return preds, index


class CachedPipeline(ServingPipeline):
    """Memoizes :meth:`compute` by ``(now, bundle)``; lets A/B arms share one world."""

    def __init__(self, catalog: Catalog, index_mode: IndexMode = Exact(), seed: int = 0):
        super().__init__(catalog, index_mode, seed)
        self._memo: dict[tuple[int, int], tuple[PredictionSnapshot, IndexSnapshot]] = {}

    def compute(self, now, bundle):
        key = (now, id(bundle))
        hit = self._memo.get(key)
        if hit is None:
            hit = super().compute(now, bundle)
            self._memo[key] = hit
        return hit


@dataclass
class EditorialWeek:
    week_start: int
    lists: dict[str, list[str]]
    user_genre: dict[str, str]
    default_genre: Optional[str]

    def list_for(self, user_id: str) -> list[str]:
        g = self.user_genre.get(user_id, self.default_genre)
        return self.lists.get(g, []) if g is not None else []


class EditorialBoard:
    """Weekly per-genre album lists, identical for every fan of a genre.

    At each week boundary the albums released during the previous seven
    days are ranked per genre by their stream count over that week; the top
    ``list_len`` make the list, frozen until the next boundary. A user's
    genre is the one they streamed most over the prior ``history_days``.
    """

    def __init__(self, catalog: Catalog, anchor_ts: int, list_len: int = 20, history_days: int = 28):
        self.catalog = catalog
        self.anchor_ts = anchor_ts
        self.list_len = list_len
        self.history = history_days * 86_400
        self._weeks: dict[int, EditorialWeek] = {}
        self._lock = threading.Lock()

    def week_start(self, now: int) -> int:
        return self.anchor_ts + ((now - self.anchor_ts) // WEEK) * WEEK

    def week_for(self, now: int) -> EditorialWeek:
        ws = self.week_start(now)
        wk = self._weeks.get(ws)
        if wk is None:
            with self._lock:
                wk = self._weeks.get(ws)
                if wk is None:
                    wk = self._compile(ws)
                    self._weeks[ws] = wk
        return wk

    def _compile(self, ws: int) -> EditorialWeek:
        cat = self.catalog
        table = cat.event_table()
        candidates = cat.new_release_window(ws - 1)
        counts = {a: table.count(EventType.STREAM, a, ws - WEEK, ws) for a in candidates}
        by_genre: dict[str, list[str]] = {}
        for a in candidates:
            for g in cat.albums[a].genre_ids:
                by_genre.setdefault(g, []).append(a)
        lists = {
            g: sorted(albums, key=lambda a: (-counts[a], a))[: self.list_len]
            for g, albums in sorted(by_genre.items())
        }

        rows = table.select(ws - self.history, ws, (EventType.STREAM,))
        genre_names = sorted({g for m in cat.albums.values() for g in m.genre_ids})
        gpos = {g: i for i, g in enumerate(genre_names)}
        subj_genre = np.full(len(table.subject_ids), -1, dtype=np.int64)
        for i, s in enumerate(table.subject_ids):
            meta = cat.albums.get(s)
            if meta is not None and meta.genre_ids:
                subj_genre[i] = gpos[meta.genre_ids[0]]
        user_genre: dict[str, str] = {}
        default = None
        if rows.size and genre_names:
            g = subj_genre[table.subject[rows]]
            ok = g >= 0
            u = table.user[rows][ok]
            g = g[ok]
            G = len(genre_names)
            tally = np.bincount(u * G + g, minlength=len(table.user_ids) * G).reshape(-1, G)
            active = np.nonzero(tally.sum(axis=1))[0]
            # argmax returns the first maximum, i.e. the smallest genre id on ties.
            top = np.argmax(tally[active], axis=1)
            user_genre = {table.user_ids[i]: genre_names[t] for i, t in zip(active, top)}
            default = genre_names[int(np.argmax(tally.sum(axis=0)))]
        elif genre_names:
            default = genre_names[0]
        return EditorialWeek(ws, lists, user_genre, default)


class DisplaySink(Protocol):
    def record(self, slate: Slate, click_pos: Optional[int], ts: int) -> None: ...


class EventLogSink:
    """Expands each display into Display/Click usage events, in memory."""

    def __init__(self):
        self.events: list[UsageEvent] = []
        self._lock = threading.Lock()

    def record(self, slate: Slate, click_pos: Optional[int], ts: int) -> None:
        evs = [UsageEvent(EventType.DISPLAY, slate.user_id, e.album_id, ts, e.position, slate.slate_id)
               for e in slate.entries]
        if click_pos is not None:
            clicked = slate.entries[click_pos - 1]
            evs.append(UsageEvent(EventType.CLICK, slate.user_id, clicked.album_id, ts,
                                  click_pos, slate.slate_id))
        with self._lock:
            self.events.extend(evs)


@dataclass
class ServiceConfig:
    carousel_len: int = CAROUSEL_LEN
    view_all_len: int = VIEW_ALL_LEN
    editorial_list_len: int = 20
    index_mode: IndexMode = field(default_factory=Exact)
    bandit: BanditConfig = field(default_factory=BanditConfig)
    seed: int = 0
    max_pending_slates: int = 200_000


ModelSource = Union[ModelBundle, Callable[[int], ModelBundle]]


class ReleaseWindowView:
    """Membership test for the release window at ``now`` without materializing it."""

    __slots__ = ("albums", "now")

    def __init__(self, catalog: Catalog, now: int):
        self.albums = catalog.albums
        self.now = now

    def __contains__(self, album_id: str) -> bool:
        meta = self.albums.get(album_id)
        return meta is not None and 0 <= self.now - meta.release_ts < NEW_RELEASE_SPAN


class SlateService:
    def __init__(
        self,
        catalog: Catalog,
        models: ModelSource,
        config: ServiceConfig = ServiceConfig(),
        editorial: Optional[EditorialBoard] = None,
        sink: Optional[DisplaySink] = None,
        pipeline: Optional[ServingPipeline] = None,
        editorial_anchor: int = 0,
    ):
        self.catalog = catalog
        self.config = config
        self._models = models if callable(models) else (lambda now, _b=models: _b)
        self.editorial = editorial or EditorialBoard(catalog, editorial_anchor, config.editorial_list_len)
        self.sink = sink if sink is not None else EventLogSink()
        self.pipeline = pipeline or ServingPipeline(catalog, config.index_mode, config.seed)
        self.bandit = Bandit(config.bandit)
        self.state: SnapshotSlot[ServingState] = SnapshotSlot()
        self._issued: "OrderedDict[str, Slate]" = OrderedDict()
        self._issued_lock = threading.Lock()
        self._ids = itertools.count(1)
        self._rng = np.random.default_rng(config.seed)
        self._tick_lock = threading.Lock()
        self.last_tick: Optional[int] = None

    # ---- refresh ------------------------------------------------------

    def scheduler_tick(self, now: int) -> TickReport:
        """Refresh predictions, rebuild the index, roll the arm set and absorb rewards.

        Any failure leaves the previously published state serving.
        """
        with self._tick_lock:
            live = self.state.get()
            next_version = (live.version if live else 0) + 1
            try:
                bundle = self._models(now)
                preds, index = self.pipeline.compute(now, bundle)
            except Exception as exc:  # noqa: BLE001 - any stage failure aborts the tick
                _logger.exception("tick at %s aborted", now)
                return TickReport(now, False, live.version if live else 0, error=str(exc))

            bandit = self.bandit
            expired = bandit.expire_arms(now)
            registered = []
            for album_id in preds.ids:
                if album_id not in bandit.arms:
                    bandit.register_arm(album_id, self.catalog.albums[album_id].release_ts, now)
                    registered.append(album_id)
            absorbed = bandit.batch_update()
            vectors = dict(zip(preds.ids, preds.vectors))
            arms = bandit.snapshot(vectors)
            albums = self.catalog.albums
            expiry = lambda ids: np.array([albums[a].release_ts + WEEK for a in ids], dtype=np.int64)
            state = ServingState(next_version, now, bundle, preds, index, arms,
                                 {a: i for i, a in enumerate(arms.ids)}, expiry(index.ids), expiry(arms.ids))
            self.state.swap(state)
            self.last_tick = now
            return TickReport(now, True, next_version, len(preds), expired, registered, absorbed)

    # ---- requests -----------------------------------------------------

    def build_carousel(self, user_id: str, now: int, policy: Union[Policy, str],
                       k: Optional[int] = None, rng: Optional[np.random.Generator] = None) -> Slate:
        return self._compose(user_id, now, policy, k or self.config.carousel_len, rng)

    def view_all(self, user_id: str, now: int, policy: Union[Policy, str],
                 rng: Optional[np.random.Generator] = None) -> Slate:
        return self._compose(user_id, now, policy, self.config.view_all_len, rng)

    def _compose(self, user_id, now, policy, k, rng) -> Slate:
        try:
            policy = Policy(policy)
        except ValueError:
            raise ValueError(f"unknown policy {policy!r}") from None
        state = self.state.get()
        prefix = self.catalog.unmissable_for(user_id, ReleaseWindowView(self.catalog, now))[:k]
        room = k - len(prefix)
        fallback = False
        tail: list[str] = []
        if room > 0:
            if policy is Policy.EDITORIAL:
                chosen = set(prefix)
                for a in self.editorial.week_for(now).list_for(user_id):
                    if a not in chosen:
                        tail.append(a)
                        if len(tail) == room:
                            break
            else:
                if state is None:
                    raise RuntimeError("no serving snapshot yet; run scheduler_tick first")
                user_vec, fallback = state.bundle.user_vector(user_id)
                # Albums can age out between ticks; never serve them past their window.
                if policy is Policy.COLD_START:
                    exclude = prefix + state.expired_index_ids(now)
                    tail = [a for a, _ in query(state.index, user_vec, room, exclude=exclude)]
                else:
                    rows = np.array([state.arm_rows[a] for a in prefix if a in state.arm_rows],
                                    dtype=np.int64)
                    rows = np.concatenate([rows, state.expired_arm_rows(now)])
                    picks = sample_and_rank_snapshot(state.arms, user_vec, room, rng or self._rng,
                                                     self.config.bandit.affinity_weight, rows)
                    tail = [a for a, _ in picks]
        entries = tuple(
            [SlateEntry(a, Section.UNMISSABLE, i + 1) for i, a in enumerate(prefix)]
            + [SlateEntry(a, Section.PERSONALIZED, len(prefix) + i + 1) for i, a in enumerate(tail)]
        )
        slate = Slate(f"s{next(self._ids):09d}", user_id, entries, policy,
                      state.version if state else 0, now, fallback)
        with self._issued_lock:
            self._issued[slate.slate_id] = slate
            while len(self._issued) > self.config.max_pending_slates:
                self._issued.popitem(last=False)
        return slate

    def record_display(self, slate: Union[Slate, str], click: Optional[int], ts: int) -> None:
        """Log a served slate and its click, and queue bandit rewards for the tail.

        A slate accepts one feedback call; a second one is an unknown slate.
        """
        slate_id = slate if isinstance(slate, str) else slate.slate_id
        with self._issued_lock:
            issued = self._issued.pop(slate_id, None)
        if issued is None:
            raise UnknownSlateError(slate_id)
        if click is not None and not 1 <= click <= len(issued.entries):
            with self._issued_lock:
                self._issued[slate_id] = issued
            raise ValueError(f"click position {click} outside slate of length {len(issued.entries)}")
        self.sink.record(issued, click, ts)
        if issued.policy is Policy.TS_COLD_START:
            n_pre = issued.prefix_len
            tail = [e.album_id for e in issued.entries[n_pre:]]
            if not tail or (click is not None and click <= n_pre):
                return
            tail_click = None if click is None else click - n_pre
            self.bandit.add_rewards(attribute_rewards(tail, tail_click, self.config.bandit.seen_depth))

    def health(self) -> dict[str, Any]:
        from . import __version__

        state = self.state.get()
        return {
            "status": "ok" if state is not None else "warming",
            "package_version": __version__,
            "serving_version": state.version if state else 0,
            "store_version": state.bundle.store.version if state else None,
            "model_version": state.bundle.version if state else None,
            "snapshot_time": state.created_at if state else None,
            "indexed": len(state.index) if state else 0,
            "arms": len(state.arms) if state else 0,
        }
