"""Albums, usage events and the rolling new-release window."""
from __future__ import annotations

import logging
import threading
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Container, Iterable, NamedTuple, Optional, Union

import numpy as np

from . import WEEK
from .codec import PathLike, decode_record, encode_record, iter_lines, write_records

_logger = logging.getLogger(__name__)

NEW_RELEASE_SPAN = WEEK


class EventType(str, Enum):
    STREAM = "Stream"
    LIKE = "Like"
    FAVORITE_ARTIST_ADD = "FavoriteArtistAdd"
    DISPLAY = "Display"
    CLICK = "Click"


_SLATE_EVENTS = (EventType.DISPLAY, EventType.CLICK)
_KIND_CODES = {t: i for i, t in enumerate(EventType)}


def _as_ts(value: Any, name: str = "ts") -> int:
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ValueError(f"{name} must be a number")
    if isinstance(value, float):
        if not value.is_integer():
            raise ValueError(f"{name} must be whole epoch seconds")
        value = int(value)
    return value


def _as_id(value: Any, name: str) -> str:
    if not isinstance(value, str) or not value:
        raise ValueError(f"{name} must be a nonempty string")
    return value


@dataclass(frozen=True)
class AlbumMeta:
    album_id: str
    artist_ids: tuple[str, ...]
    label_id: str
    genre_ids: tuple[str, ...]
    release_ts: int
    title: str = ""

    def __post_init__(self):
        _as_id(self.album_id, "album_id")
        object.__setattr__(self, "artist_ids", tuple(self.artist_ids))
        object.__setattr__(self, "genre_ids", tuple(self.genre_ids))
        if not self.artist_ids:
            raise ValueError("artist_ids must be nonempty")
        for a in self.artist_ids:
            _as_id(a, "artist_id")
        for g in self.genre_ids:
            _as_id(g, "genre_id")
        _as_id(self.label_id, "label_id")
        if _as_ts(self.release_ts, "release_ts") <= 0:
            raise ValueError("release_ts must be > 0")

    def to_record(self) -> dict[str, Any]:
        return {
            "album_id": self.album_id,
            "artist_ids": list(self.artist_ids),
            "label_id": self.label_id,
            "genre_ids": list(self.genre_ids),
            "release_ts": self.release_ts,
            "title": self.title,
        }

    @classmethod
    def from_record(cls, rec: dict[str, Any]) -> "AlbumMeta":
        artists = rec.get("artist_ids")
        genres = rec.get("genre_ids", [])
        if not isinstance(artists, list) or not isinstance(genres, list):
            raise ValueError("artist_ids and genre_ids must be lists")
        title = rec.get("title", "")
        if not isinstance(title, str):
            raise ValueError("title must be a string")
        return cls(
            album_id=rec.get("album_id"),
            artist_ids=tuple(artists),
            label_id=rec.get("label_id"),
            genre_ids=tuple(genres),
            release_ts=_as_ts(rec.get("release_ts"), "release_ts"),
            title=title,
        )


@dataclass(frozen=True)
class UsageEvent:
    event_type: EventType
    user_id: str
    subject: str
    ts: int
    position: Optional[int] = None
    slate_id: Optional[str] = None

    def __post_init__(self):
        object.__setattr__(self, "event_type", EventType(self.event_type))
        _as_id(self.user_id, "user")
        _as_id(self.subject, "subject")
        object.__setattr__(self, "ts", _as_ts(self.ts))
        if self.ts < 0:
            raise ValueError("ts must be >= 0")
        if self.event_type in _SLATE_EVENTS:
            pos = self.position
            if isinstance(pos, bool) or not isinstance(pos, int):
                raise ValueError("position is required on Display/Click")
            if pos < 1:
                raise ValueError("position must be ≥1")
            _as_id(self.slate_id, "slate_id")
        elif self.position is not None or self.slate_id is not None:
            raise ValueError("position/slate_id only allowed on Display/Click")

    @property
    def dedup_key(self) -> tuple:
        return (self.user_id, self.event_type.value, self.subject, self.ts, self.slate_id, self.position)

    def to_record(self) -> dict[str, Any]:
        rec: dict[str, Any] = {
            "type": self.event_type.value,
            "user": self.user_id,
            "subject": self.subject,
            "ts": self.ts,
        }
        if self.position is not None:
            rec["position"] = self.position
        if self.slate_id is not None:
            rec["slate_id"] = self.slate_id
        return rec

    @classmethod
    def from_record(cls, rec: dict[str, Any]) -> "UsageEvent":
        unknown = set(rec) - {"type", "user", "subject", "ts", "position", "slate_id"}
        if unknown:
            raise ValueError(f"unknown fields: {sorted(unknown)}")
        try:
            kind = EventType(rec.get("type"))
        except ValueError:
            raise ValueError(f"unknown event type {rec.get('type')!r}") from None
        return cls(kind, rec.get("user"), rec.get("subject"), rec.get("ts"),
                   rec.get("position"), rec.get("slate_id"))

    def encode(self) -> str:
        return encode_record(self.to_record())


class IngestResult(NamedTuple):
    accepted: int
    rejected: list[tuple[int, str]]


class EventTable:
    """Columnar, timestamp-sorted view of a batch of usage events.

    Built once per catalog snapshot; supports fast windowed aggregation
    (interaction matrices, per-album usage counters) without touching the
    per-event objects again.
    """

    def __init__(self, events: Iterable[UsageEvent]):
        users: dict[str, int] = {}
        subjects: dict[str, int] = {}
        ts, kind, uidx, sidx = [], [], [], []
        for ev in events:
            ts.append(ev.ts)
            kind.append(_KIND_CODES[ev.event_type])
            uidx.append(users.setdefault(ev.user_id, len(users)))
            sidx.append(subjects.setdefault(ev.subject, len(subjects)))
        order = np.argsort(np.asarray(ts, dtype=np.int64), kind="stable")
        self.ts = np.asarray(ts, dtype=np.int64)[order]
        self.kind = np.asarray(kind, dtype=np.int8)[order]
        self.user = np.asarray(uidx, dtype=np.int64)[order]
        self.subject = np.asarray(sidx, dtype=np.int64)[order]
        self.user_ids = list(users)
        self.subject_ids = list(subjects)
        self.user_index = users
        self.subject_index = subjects
        self._groups: Optional[tuple[np.ndarray, np.ndarray, np.ndarray]] = None

    def __len__(self) -> int:
        return int(self.ts.shape[0])

    def select(self, start: int, end: int, kinds: Iterable[EventType]) -> np.ndarray:
        """Row indices with ``start <= ts < end`` and kind in ``kinds``."""
        lo = np.searchsorted(self.ts, start, side="left")
        hi = np.searchsorted(self.ts, end, side="left")
        codes = [_KIND_CODES[EventType(k)] for k in kinds]
        rows = np.arange(lo, hi)
        return rows[np.isin(self.kind[lo:hi], codes)]

    def _grouped(self):
        if self._groups is None:
            key = self.kind.astype(np.int64) * (len(self.subject_ids) + 1) + self.subject
            order = np.lexsort((self.ts, key))
            skey = key[order]
            self._groups = (skey, self.ts[order], order)
        return self._groups

    def count(self, kind: EventType, subject: str, start: int, end: int) -> int:
        """Number of ``kind`` events on ``subject`` with ``start <= ts < end``."""
        s = self.subject_index.get(subject)
        if s is None or end <= start:
            return 0
        skey, sts, _ = self._grouped()
        key = _KIND_CODES[EventType(kind)] * (len(self.subject_ids) + 1) + s
        a = np.searchsorted(skey, key, side="left")
        b = np.searchsorted(skey, key, side="right")
        seg = sts[a:b]
        return int(np.searchsorted(seg, end, side="left") - np.searchsorted(seg, start, side="left"))


@dataclass
class _ReleaseIndex:
    ts: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    ids: list[str] = field(default_factory=list)


class Catalog:
    """In-memory entity store and event log.

    A single writer ingests batches; the derived structures readers use
    (release index, event table, favorite sets) are rebuilt and swapped in
    whole at the end of each batch, so reads between batches see a
    consistent state.
    """

    def __init__(self):
        self.albums: dict[str, AlbumMeta] = {}
        self._artist_albums: dict[str, list[str]] = {}
        self._events_by_user: dict[str, list[UsageEvent]] = {}
        self._events: list[UsageEvent] = []
        self._seen: set[tuple] = set()
        self._favorites: dict[str, frozenset[str]] = {}
        self._releases = _ReleaseIndex()
        self._table: Optional[EventTable] = None
        self._write_lock = threading.Lock()

    # ---- albums -------------------------------------------------------

    def add_albums(self, albums: Iterable[AlbumMeta]) -> int:
        with self._write_lock:
            n = 0
            for meta in albums:
                if meta.album_id in self.albums:
                    raise ValueError(f"duplicate album_id {meta.album_id!r}")
                self.albums[meta.album_id] = meta
                for a in meta.artist_ids:
                    self._artist_albums.setdefault(a, []).append(meta.album_id)
                n += 1
            self._rebuild_releases()
            return n

    def load_albums(self, source: Union[PathLike, Iterable[str]]) -> IngestResult:
        """Read one album per line; duplicates and bad records are rejected."""
        good: list[AlbumMeta] = []
        rejected: list[tuple[int, str]] = []
        seen = set(self.albums)
        for line_no, line in iter_lines(source):
            try:
                meta = AlbumMeta.from_record(decode_record(line))
            except (ValueError, TypeError) as exc:
                rejected.append((line_no, str(exc)))
                continue
            if meta.album_id in seen:
                rejected.append((line_no, f"duplicate album_id {meta.album_id!r}"))
                continue
            seen.add(meta.album_id)
            good.append(meta)
        self.add_albums(good)
        return IngestResult(len(good), rejected)

    def _rebuild_releases(self):
        pairs = sorted((m.release_ts, m.album_id) for m in self.albums.values())
        self._releases = _ReleaseIndex(
            np.asarray([p[0] for p in pairs], dtype=np.int64), [p[1] for p in pairs]
        )

    def albums_by_artist(self, artist_id: str) -> list[str]:
        return list(self._artist_albums.get(artist_id, ()))

    def artist_ids(self) -> list[str]:
        return sorted(self._artist_albums)

    # ---- events -------------------------------------------------------

    def ingest_events(self, source: Union[PathLike, Iterable[str]]) -> IngestResult:
        """Parse and append line-delimited event records.

        Malformed records are reported as ``(line_no, reason)`` and skipped.
        Records whose dedup key was already ingested are skipped silently,
        so re-ingesting a file is a no-op.
        """
        parsed: list[UsageEvent] = []
        rejected: list[tuple[int, str]] = []
        for line_no, line in iter_lines(source):
            try:
                ev = UsageEvent.from_record(decode_record(line))
                self._check_subject(ev)
            except (ValueError, TypeError) as exc:
                rejected.append((line_no, str(exc)))
                continue
            parsed.append(ev)
        accepted = self.add_events(parsed)
        if rejected:
            _logger.info("rejected %d malformed event records", len(rejected))
        return IngestResult(accepted, rejected)

    def _check_subject(self, ev: UsageEvent):
        if ev.event_type is EventType.FAVORITE_ARTIST_ADD:
            if ev.subject in self.albums:
                raise ValueError("FavoriteArtistAdd subject must be an artist id")
        elif ev.subject in self._artist_albums and ev.subject not in self.albums:
            raise ValueError(f"{ev.event_type.value} subject must be an album id")

    def add_events(self, events: Iterable[UsageEvent]) -> int:
        """Append already-validated events; returns the number newly stored."""
        with self._write_lock:
            touched: set[str] = set()
            fav_touched: set[str] = set()
            n = 0
            for ev in events:
                key = ev.dedup_key
                if key in self._seen:
                    continue
                self._seen.add(key)
                self._events.append(ev)
                self._events_by_user.setdefault(ev.user_id, []).append(ev)
                touched.add(ev.user_id)
                if ev.event_type is EventType.FAVORITE_ARTIST_ADD:
                    fav_touched.add(ev.user_id)
                n += 1
            for u in touched:
                self._events_by_user[u].sort(key=lambda e: e.ts)
            if fav_touched:
                favs = dict(self._favorites)
                for u in fav_touched:
                    favs[u] = frozenset(
                        e.subject for e in self._events_by_user[u]
                        if e.event_type is EventType.FAVORITE_ARTIST_ADD
                    )
                self._favorites = favs
            if n:
                self._table = None
            return n

    def events_for(self, user_id: str) -> tuple[UsageEvent, ...]:
        return tuple(self._events_by_user.get(user_id, ()))

    def all_events(self) -> list[UsageEvent]:
        return list(self._events)

    def event_table(self) -> EventTable:
        table = self._table
        if table is None:
            table = EventTable(self._events)
            self._table = table
        return table

    def favorites(self, user_id: str) -> frozenset[str]:
        return self._favorites.get(user_id, frozenset())

    def user_ids(self) -> list[str]:
        return sorted(self._events_by_user)

    # ---- release window -----------------------------------------------

    def new_release_window(self, now: int) -> set[str]:
        """Albums with ``0 <= now - release_ts < 7 days``."""
        rel = self._releases
        lo = np.searchsorted(rel.ts, now - NEW_RELEASE_SPAN, side="right")
        hi = np.searchsorted(rel.ts, now, side="right")
        return set(rel.ids[lo:hi])

    def window_sorted(self, now: int) -> list[str]:
        """The release window as a list sorted by album id."""
        return sorted(self.new_release_window(now))

    def unmissable_for(self, user_id: str, window: Container[str]) -> list[str]:
        """Window albums by the user's favorite artists, newest first.

        ``window`` only needs membership tests; plain iterables are copied into a set.
        """
        favs = self._favorites.get(user_id)
        if not favs:
            return []
        if isinstance(window, (list, tuple)) or not hasattr(window, "__contains__"):
            window = set(window)
        hits = set()
        for artist in favs:
            for album_id in self._artist_albums.get(artist, ()):
                if album_id in window:
                    hits.add(album_id)
        return sorted(hits, key=lambda a: (-self.albums[a].release_ts, a))


def write_albums(path: PathLike, albums: Iterable[AlbumMeta]) -> int:
    return write_records(path, (a.to_record() for a in albums))


def write_events(path: PathLike, events: Iterable[UsageEvent]) -> int:
    return write_records(path, (e.to_record() for e in events))

