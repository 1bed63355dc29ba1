"""Synthetic users, artists and weekly releases, plus an A/B replay harness.

The world has ground-truth latent vectors: genres are centroids, artists
scatter around their genre, albums jitter around their artist and users
scatter around a favorite genre. Organic streaming (softmax over
affinity, artist popularity and recency) produces the usage log every
model trains on; carousel clicks come from a cascade click model on the
same latent affinities.

Every read of the usage log is time-bounded, so the full log can be
ingested up front without leaking future usage into a tick.
"""
from __future__ import annotations

import dataclasses
import logging
import math
import statistics
from dataclasses import dataclass, field
from typing import Any, Iterable, Optional, Sequence

import numpy as np

from . import DAY, HOUR, WEEK
from .catalog import AlbumMeta, Catalog, EventType, UsageEvent
from .cf_trainer import train_cf
from .codec import PathLike, write_records
from .coldstart import FeatureSpec, TrainParams, make_training_set, train
from .config import FreshrecConfig, WorldConfig
from .slate_service import (
    CachedPipeline,
    EditorialBoard,
    ModelBundle,
    Policy,
    Section,
    ServiceConfig,
    Slate,
    SlateService,
)

_logger = logging.getLogger(__name__)

TICKS_PER_DAY = 6
TICK = 4 * HOUR


@dataclass
class SimWorld:
    config: WorldConfig
    seed: int
    genre_ids: list[str]
    genre_centroids: np.ndarray
    artist_ids: list[str]
    artist_genre: np.ndarray
    artist_latent: np.ndarray
    artist_popularity: np.ndarray
    artist_label: np.ndarray
    album_ids: list[str]
    album_artist: np.ndarray
    album_latent: np.ndarray
    album_release_ts: np.ndarray
    user_ids: list[str]
    user_genre: np.ndarray
    user_latent: np.ndarray
    favorites: dict[str, list[str]]
    events: list[UsageEvent]
    _runtime: Any = field(default=None, repr=False, compare=False)

    def albums(self) -> list[AlbumMeta]:
        out = []
        for i, album_id in enumerate(self.album_ids):
            a = int(self.album_artist[i])
            g = int(self.artist_genre[a])
            out.append(AlbumMeta(
                album_id=album_id,
                artist_ids=(self.artist_ids[a],),
                label_id=f"lb{int(self.artist_label[a]):03d}",
                genre_ids=(self.genre_ids[g],),
                release_ts=int(self.album_release_ts[i]),
                title=f"Album {i}",
            ))
        return out

    def build_catalog(self) -> Catalog:
        cat = Catalog()
        cat.add_albums(self.albums())
        cat.add_events(self.events)
        return cat

    def affinity(self, user_rows: np.ndarray, album_rows: np.ndarray) -> np.ndarray:
        return self.user_latent[user_rows] @ self.album_latent[album_rows].T


def _softmax_rows(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    np.exp(z, out=z)
    z /= z.sum(axis=1, keepdims=True)
    return z


def generate_world(config: WorldConfig, seed: int) -> SimWorld:
    """Draw a world and its organic usage log. Same ``(config, seed)`` -> identical world."""
    config.validate()
    c = config
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x5EED]))
    d = c.d_true
    genre_ids = [f"g{i:02d}" for i in range(c.n_genres)]
    centroids = rng.standard_normal((c.n_genres, d)) * (c.genre_scale / math.sqrt(d))

    artist_ids = [f"ar{i:04d}" for i in range(c.n_artists)]
    artist_genre = rng.integers(c.n_genres, size=c.n_artists)
    artist_latent = centroids[artist_genre] + rng.standard_normal((c.n_artists, d)) * (c.artist_spread / math.sqrt(d))
    artist_pop = rng.normal(0.0, c.popularity_sigma, c.n_artists)
    artist_label = artist_genre * c.labels_per_genre + rng.integers(c.labels_per_genre, size=c.n_artists)

    user_ids = [f"u{i:05d}" for i in range(c.n_users)]
    user_genre = rng.integers(c.n_genres, size=c.n_users)
    user_latent = centroids[user_genre] + rng.standard_normal((c.n_users, d)) * (c.user_spread / math.sqrt(d))

    first_day = c.start_ts - c.warmup_days * DAY
    n_days = c.warmup_days + c.release_days
    rel_ts, rel_artist = [], []
    for day in range(n_days):
        n = int(rng.poisson(c.albums_per_day))
        offs = np.sort(rng.integers(1, DAY, size=n))
        rel_ts.append(first_day + day * DAY + offs)
        rel_artist.append(rng.integers(c.n_artists, size=n))
    album_release = np.concatenate(rel_ts).astype(np.int64)
    album_artist = np.concatenate(rel_artist).astype(np.int64)
    n_albums = album_release.size
    album_ids = [f"al{i:06d}" for i in range(n_albums)]
    album_latent = artist_latent[album_artist] + rng.standard_normal((n_albums, d)) * (c.tau / math.sqrt(d))

    favorites: dict[str, list[str]] = {}
    pool = np.argsort(-artist_pop, kind="stable")[: max(1, min(c.fav_pool, c.n_artists))]
    fav_draw = rng.random(c.n_users)
    n_fav = rng.integers(1, max(1, c.max_favorites) + 1, size=c.n_users)
    for u in range(c.n_users):
        if fav_draw[u] >= c.fav_user_fraction:
            continue
        w = _softmax_rows((2.0 * (user_latent[u] @ artist_latent[pool].T))[None, :])[0]
        k = min(int(n_fav[u]), pool.size)
        picked = rng.choice(pool, size=k, replace=False, p=w)
        favorites[user_ids[u]] = sorted(artist_ids[a] for a in picked)

    events: list[UsageEvent] = []
    fav_ts = first_day - 1
    for u, arts in favorites.items():
        for a in arts:
            events.append(UsageEvent(EventType.FAVORITE_ARTIST_ADD, u, a, fav_ts))

    for day in range(n_days):
        day_start = first_day + day * DAY
        day_end = day_start + DAY
        cand = np.nonzero((album_release < day_end) & (album_release >= day_start - c.recency_days * DAY))[0]
        if cand.size == 0:
            continue
        age_days = np.maximum(day_start - album_release[cand], 0) / DAY
        logits = c.stream_temperature * (user_latent @ album_latent[cand].T)
        logits += artist_pop[album_artist[cand]] - age_days / c.recency_scale_days
        cdf = np.cumsum(_softmax_rows(logits), axis=1)
        counts = rng.poisson(c.streams_per_user_day, size=c.n_users)
        who = np.repeat(np.arange(c.n_users), counts)
        u01 = rng.random(who.size)
        pick = np.minimum((cdf[who] < u01[:, None]).sum(axis=1), cand.size - 1)
        albums = cand[pick]
        lo = np.maximum(day_start, album_release[albums])
        ts = lo + np.floor((day_end - lo) * rng.random(who.size)).astype(np.int64)
        liked = rng.random(who.size) < c.like_rate
        for uu, aa, tt, lk in zip(who.tolist(), albums.tolist(), ts.tolist(), liked.tolist()):
            events.append(UsageEvent(EventType.STREAM, user_ids[uu], album_ids[aa], tt))
            if lk:
                events.append(UsageEvent(EventType.LIKE, user_ids[uu], album_ids[aa], tt))

    return SimWorld(c, seed, genre_ids, centroids, artist_ids, artist_genre, artist_latent, artist_pop,
                    artist_label, album_ids, album_artist, album_latent, album_release, user_ids,
                    user_genre, user_latent, favorites, events)


@dataclass
class ClickModel:
    """Cascade examination with logistic click probability on latent affinity."""

    sharpness: float
    bias: float
    gamma: float

    def click_probs(self, affinity: np.ndarray) -> np.ndarray:
        return 1.0 / (1.0 + np.exp(-(self.sharpness * affinity + self.bias)))

    def expected_ctr(self, affinity: np.ndarray, lengths: np.ndarray) -> np.ndarray:
        """Per-row probability of a click; ``affinity`` is padded to a common width."""
        p = self.click_probs(affinity)
        width = affinity.shape[1]
        valid = np.arange(width)[None, :] < lengths[:, None]
        p = np.where(valid, p, 0.0)
        exam = self.gamma ** np.arange(width)
        survive = np.cumprod(np.hstack([np.ones((p.shape[0], 1)), 1.0 - p[:, :-1]]), axis=1)
        return (exam[None, :] * survive * p).sum(axis=1)

    def simulate(self, affinity: np.ndarray, uniforms: np.ndarray) -> tuple[Optional[int], int]:
        """Return ``(click position or None, number of examined positions)``.

        ``uniforms`` holds two draws per slot (continue, click) so a user's
        random stream advances identically whatever slate they were shown.
        """
        n = affinity.shape[0]
        probs = self.click_probs(affinity)
        for p in range(n):
            if p > 0 and uniforms[2 * p] >= self.gamma:
                return None, p
            if uniforms[2 * p + 1] < probs[p]:
                return p + 1, p + 1
        return None, n


@dataclass
class WeekMetrics:
    week: int
    slates: int = 0
    clicks: int = 0
    displayed: set = field(default_factory=set)
    displayed_personalized: set = field(default_factory=set)
    clicked: set = field(default_factory=set)
    examined: set = field(default_factory=set)

    def summary(self) -> dict[str, Any]:
        return {
            "week": self.week,
            "slates": self.slates,
            "clicks": self.clicks,
            "display_to_click_rate": self.clicks / self.slates if self.slates else 0.0,
            "distinct_albums_displayed": len(self.displayed),
            "distinct_albums_displayed_personalized": len(self.displayed_personalized),
            "distinct_albums_clicked": len(self.clicked),
            "distinct_albums_examined": len(self.examined),
        }


@dataclass
class MetricsReport:
    policy: str
    seed: int
    n_users: int
    horizon_days: int
    slates: int
    clicks: int
    display_to_click_rate: float
    weekly_distinct_albums_displayed: float
    weekly_distinct_albums_clicked: float
    weekly_distinct_albums_examined: float
    weeks: list[dict[str, Any]]
    displays_by_position: list[int]
    examined_by_position: list[int]
    clicks_by_position: list[int]
    displays_by_section: dict[str, int]
    config: dict[str, Any] = field(default_factory=dict)

    def to_record(self) -> dict[str, Any]:
        return dataclasses.asdict(self)


class MetricsSink:
    """Service display sink that aggregates metrics instead of storing events."""

    def __init__(self, start_ts: int, width: int = 12):
        self.start_ts = start_ts
        self.weeks: dict[int, WeekMetrics] = {}
        self.by_pos = np.zeros(width, dtype=np.int64)
        self.exam_by_pos = np.zeros(width, dtype=np.int64)
        self.click_by_pos = np.zeros(width, dtype=np.int64)
        self.by_section = {s.value: 0 for s in Section}
        self.slates = 0
        self.clicks = 0

    def _week(self, ts: int) -> WeekMetrics:
        w = (ts - self.start_ts) // WEEK
        wk = self.weeks.get(w)
        if wk is None:
            wk = self.weeks[w] = WeekMetrics(w)
        return wk

    def record(self, slate: Slate, click_pos: Optional[int], ts: int) -> None:
        wk = self._week(ts)
        wk.slates += 1
        self.slates += 1
        ids = slate.album_ids
        wk.displayed.update(ids)
        self.by_pos[: len(ids)] += 1
        for e in slate.entries:
            self.by_section[e.section.value] += 1
            if e.section is Section.PERSONALIZED:
                wk.displayed_personalized.add(e.album_id)
        if click_pos is not None:
            wk.clicks += 1
            self.clicks += 1
            wk.clicked.add(ids[click_pos - 1])
            self.click_by_pos[click_pos - 1] += 1

    def record_examined(self, slate: Slate, examined: int, ts: int) -> None:
        self._week(ts).examined.update(slate.album_ids[:examined])
        self.exam_by_pos[:examined] += 1

    def report(self, policy: str, seed: int, n_users: int, horizon_days: int,
               config: dict[str, Any]) -> MetricsReport:
        weeks = [self.weeks[w].summary() for w in sorted(self.weeks)]
        def mean_of(key):
            return float(np.mean([w[key] for w in weeks])) if weeks else 0.0
        return MetricsReport(
            policy=policy, seed=seed, n_users=n_users, horizon_days=horizon_days,
            slates=self.slates, clicks=self.clicks,
            display_to_click_rate=self.clicks / self.slates if self.slates else 0.0,
            weekly_distinct_albums_displayed=mean_of("distinct_albums_displayed"),
            weekly_distinct_albums_clicked=mean_of("distinct_albums_clicked"),
            weekly_distinct_albums_examined=mean_of("distinct_albums_examined"),
            weeks=weeks,
            displays_by_position=self.by_pos.tolist(),
            examined_by_position=self.exam_by_pos.tolist(),
            clicks_by_position=self.click_by_pos.tolist(),
            displays_by_section=dict(self.by_section),
            config=config,
        )


class WorldRuntime:
    """Everything about a world that does not depend on the policy under test.

    Weekly CF stores and cold-start models, tick predictions/indexes, the
    editorial board and the calibrated click model are computed once and
    shared by every run on the world.
    """

    def __init__(self, world: SimWorld, cfg: FreshrecConfig):
        self.world = world
        self.cfg = cfg
        self.start = world.config.start_ts
        self.catalog = world.build_catalog()
        self.spec = FeatureSpec(cfg.cf.dim, tuple(world.genre_ids), cfg.coldstart.label_buckets,
                                cfg.cf.min_interactions)
        self.service_config = ServiceConfig(index_mode=cfg.index.to_mode(), bandit=cfg.bandit, seed=world.seed)
        self.pipeline = CachedPipeline(self.catalog, self.service_config.index_mode, seed=world.seed)
        self.editorial = EditorialBoard(self.catalog, self.start, self.service_config.editorial_list_len)
        self.bundles: dict[int, ModelBundle] = {}
        self.train_reports: dict[int, Any] = {}
        self.album_row = {a: i for i, a in enumerate(world.album_ids)}
        self.user_row = {u: i for i, u in enumerate(world.user_ids)}
        self.click_model = self._calibrate()

    def models_for(self, now: int) -> ModelBundle:
        week = (now - self.start) // WEEK
        bundle = self.bundles.get(week)
        if bundle is None:
            bundle = self._train_week(week)
            self.bundles[week] = bundle
        return bundle

    def _train_week(self, week: int) -> ModelBundle:
        as_of = self.start + week * WEEK
        seed = self.world.seed * 1000 + week
        store = train_cf(self.catalog.event_table(), as_of, d=self.cfg.cf.dim, n_iter=self.cfg.cf.n_iter,
                         seed=seed, like_weight=self.cfg.cf.like_weight, version=week + 1)
        rng = np.random.default_rng(np.random.SeedSequence([self.world.seed, week, 0xC0FFEE]))
        data = make_training_set(self.catalog, store, self.spec, as_of, rng)
        cs = self.cfg.coldstart
        hp = TrainParams(cs.lr, cs.epochs, cs.batch_size, seed, tuple(cs.hidden))
        model, report = train([(x, y) for x, y, _ in data], hp)
        self.train_reports[week] = report
        _logger.info("week %d: store %dx%d, %d training albums, final loss %.4f",
                     week, len(store.user_ids), len(store.item_ids), len(data), report.final_loss)
        return ModelBundle(store, model, self.spec, version=week + 1)

    def editorial_slates(self, now: int, k: int = 12) -> tuple[np.ndarray, list[list[str]]]:
        from .slate_service import ReleaseWindowView

        week = self.editorial.week_for(now)
        view = ReleaseWindowView(self.catalog, now)
        slates = []
        for u in self.world.user_ids:
            prefix = self.catalog.unmissable_for(u, view)[:k]
            tail = [a for a in week.list_for(u) if a not in set(prefix)][: k - len(prefix)]
            slates.append(prefix + tail)
        return np.arange(len(self.world.user_ids)), slates

    def _calibrate(self) -> ClickModel:
        """Pick the click bias so Editorial's expected CTR in week 0 hits the target."""
        w = self.world
        c = w.config
        rng = np.random.default_rng(np.random.SeedSequence([w.seed, 0xCA11B]))
        us = rng.integers(len(w.user_ids), size=4000)
        al = rng.integers(len(w.album_ids), size=4000)
        aff_sd = float(np.std(np.einsum("ij,ij->i", w.user_latent[us], w.album_latent[al])))
        sharp = c.click_sharpness / max(aff_sd, 1e-12)
        rows, slates = self.editorial_slates(self.start + 12 * HOUR)
        width = max((len(s) for s in slates), default=1) or 1
        aff = np.zeros((len(slates), width))
        lengths = np.array([len(s) for s in slates])
        for i, s in enumerate(slates):
            if s:
                aff[i, : len(s)] = w.affinity(np.array([i]), np.array([self.album_row[a] for a in s]))[0]
        lo, hi = -30.0, 10.0
        for _ in range(80):
            mid = 0.5 * (lo + hi)
            ctr = ClickModel(sharp, mid, c.gamma).expected_ctr(aff, lengths).mean()
            if ctr < c.target_editorial_ctr:
                lo = mid
            else:
                hi = mid
        return ClickModel(sharp, 0.5 * (lo + hi), c.gamma)


def runtime_for(world: SimWorld, cfg: Optional[FreshrecConfig] = None) -> WorldRuntime:
    if world._runtime is None:
        world._runtime = WorldRuntime(world, cfg or FreshrecConfig(world=world.config))
    return world._runtime


def _user_stream(seed: int, user_row: int, purpose: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, user_row, purpose])))


def run_policy(world: SimWorld, policy, horizon_days: int = 28, seed: int = 0,
               users: Optional[Sequence[str]] = None, cfg: Optional[FreshrecConfig] = None) -> MetricsReport:
    """Replay ``horizon_days`` of daily carousel requests for ``users`` under ``policy``.

    Each user requests once a day at a time drawn from their own random
    stream; the scheduler ticks every four simulated hours.
    """
    if horizon_days < 14:
        raise ValueError("horizon must cover at least two editorial weeks (14 days)")
    if horizon_days > world.config.release_days:
        raise ValueError(f"horizon {horizon_days} exceeds the release schedule ({world.config.release_days} days)")
    policy = Policy(policy)
    rt = runtime_for(world, cfg)
    start = rt.start
    users = list(world.user_ids if users is None else users)
    sink = MetricsSink(start)
    svc = SlateService(rt.catalog, rt.models_for, rt.service_config, editorial=rt.editorial,
                       sink=sink, pipeline=rt.pipeline)
    rows = np.array([rt.user_row[u] for u in users], dtype=np.int64)
    click_rng = [_user_stream(seed, int(r), 1) for r in rows]
    ts_rng = [_user_stream(seed, int(r), 2) for r in rows]
    latent = world.user_latent
    album_latent = world.album_latent
    album_row = rt.album_row
    model = rt.click_model
    width = svc.config.carousel_len

    for day in range(horizon_days):
        day_start = start + day * DAY
        offsets = np.array([int(g.integers(0, DAY)) for g in click_rng], dtype=np.int64)
        order = np.lexsort((rows, offsets))
        cursor = 0
        for tick in range(TICKS_PER_DAY):
            t0 = day_start + tick * TICK
            report = svc.scheduler_tick(t0)
            if not report.ok:
                _logger.warning("tick at %d failed: %s", t0, report.error)
            t1 = t0 + TICK
            while cursor < order.size and day_start + offsets[order[cursor]] < t1:
                i = int(order[cursor])
                cursor += 1
                now = int(day_start + offsets[i])
                slate = svc.build_carousel(users[i], now, policy, rng=ts_rng[i])
                uniforms = click_rng[i].random(2 * width)
                ids = slate.album_ids
                if ids:
                    aff = album_latent[[album_row[a] for a in ids]] @ latent[rows[i]]
                    click, examined = model.simulate(aff, uniforms)
                else:
                    click, examined = None, 0
                svc.record_display(slate, click, now)
                sink.record_examined(slate, examined, now)

    echo = {"world_seed": world.seed, "click_bias": model.bias, "click_sharpness": model.sharpness,
            "gamma": model.gamma}
    return sink.report(policy.value, seed, len(users), horizon_days, echo)


def split_users(world: SimWorld, seed: int) -> tuple[list[str], list[str]]:
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x5B11]))
    perm = rng.permutation(len(world.user_ids))
    half = len(perm) // 2
    a = sorted(world.user_ids[i] for i in perm[:half])
    b = sorted(world.user_ids[i] for i in perm[half:])
    return a, b


@dataclass
class LiftSummary:
    mean: float
    stdev: float
    per_seed: list[float]


@dataclass
class ABReport:
    policy_a: str
    policy_b: str
    seeds: list[int]
    ctr_lift: LiftSummary
    displayed_ratio: LiftSummary
    clicked_ratio: LiftSummary
    ctr_a: list[float]
    ctr_b: list[float]

    def to_record(self) -> dict[str, Any]:
        return dataclasses.asdict(self)


def _summ(values: list[float]) -> LiftSummary:
    return LiftSummary(float(np.mean(values)), float(statistics.stdev(values)) if len(values) > 1 else 0.0,
                       [float(v) for v in values])


def ab_compare(world: SimWorld, policy_a, policy_b, horizon: int = 28, seeds: Sequence[int] = (0, 1, 2),
               crossover: bool = True, splits=None, run_cache: Optional[dict] = None,
               cfg: Optional[FreshrecConfig] = None) -> ABReport:
    """Relative lifts of ``policy_b`` over ``policy_a`` on disjoint user halves.

    With ``crossover`` each seed also runs the swapped assignment (A on the
    second half, B on the first) and pools both, which cancels the
    difference in user composition between the halves.
    """
    if len(seeds) < 3:
        raise ValueError("need at least 3 seeds")
    policy_a, policy_b = Policy(policy_a), Policy(policy_b)
    cache = run_cache if run_cache is not None else {}

    def run(policy, seed, users, half):
        key = (policy, seed, half, horizon)
        if key not in cache:
            cache[key] = run_policy(world, policy, horizon, seed, users, cfg)
        return cache[key]

    ctr_lift, disp, clk, ctr_a, ctr_b = [], [], [], [], []
    for seed in seeds:
        s1, s2 = splits(seed) if splits else split_users(world, seed)
        if set(s1) & set(s2):
            raise ValueError("overlapping user splits")
        arms_a = [run(policy_a, seed, s1, 0)]
        arms_b = [run(policy_b, seed, s2, 1)]
        if crossover:
            arms_a.append(run(policy_a, seed, s2, 1))
            arms_b.append(run(policy_b, seed, s1, 0))
        ca = sum(r.clicks for r in arms_a) / sum(r.slates for r in arms_a)
        cb = sum(r.clicks for r in arms_b) / sum(r.slates for r in arms_b)
        da = np.mean([r.weekly_distinct_albums_displayed for r in arms_a])
        db = np.mean([r.weekly_distinct_albums_displayed for r in arms_b])
        ka = np.mean([r.weekly_distinct_albums_clicked for r in arms_a])
        kb = np.mean([r.weekly_distinct_albums_clicked for r in arms_b])
        ctr_a.append(ca)
        ctr_b.append(cb)
        ctr_lift.append((cb - ca) / ca if ca else float("nan"))
        disp.append(db / da if da else float("nan"))
        clk.append(kb / ka if ka else float("nan"))
    return ABReport(policy_a.value, policy_b.value, list(seeds), _summ(ctr_lift), _summ(disp), _summ(clk),
                    ctr_a, ctr_b)


def write_report(path: PathLike, reports: Iterable[MetricsReport], comparisons: Iterable[ABReport]) -> None:
    records = [{"kind": "policy_run", **r.to_record()} for r in reports]
    records += [{"kind": "ab_compare", **c.to_record()} for c in comparisons]
    write_records(path, records)
