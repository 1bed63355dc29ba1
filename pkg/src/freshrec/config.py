"""INI-style configuration shared by the CLI, server and simulator.

Example::

    [cf]
    dim = 32

    [coldstart]
    hidden = 64, 64
    epochs = 200

    [bandit]
    prior_sigma2_0 = 0.01

    [index]
    mode = ivf
    num_clusters = 32
    nprobe = 8

Unknown sections or keys are rejected so typos do not silently fall back
to defaults.
"""
from __future__ import annotations

import configparser
import dataclasses
from dataclasses import dataclass, field
from typing import Any, Optional

from .bandit import BanditConfig
from .codec import PathLike
from .vector_index import CoarseIVF, Exact, IndexMode


@dataclass
class WorldConfig:
    n_users: int = 2000
    n_artists: int = 200
    n_genres: int = 8
    labels_per_genre: int = 5
    d_true: int = 16
    tau: float = 0.3
    albums_per_day: float = 70.0
    warmup_days: int = 21
    release_days: int = 35  # days of releases scheduled after start_ts
    genre_scale: float = 0.5
    artist_spread: float = 1.0
    user_spread: float = 1.0
    popularity_sigma: float = 0.4
    streams_per_user_day: float = 10.0
    stream_temperature: float = 4.0
    recency_days: int = 28
    recency_scale_days: float = 7.0
    like_rate: float = 0.15
    fav_user_fraction: float = 0.15
    fav_pool: int = 30
    max_favorites: int = 2
    start_ts: int = 1677801600  # a Friday, 00:00 UTC
    gamma: float = 0.85
    click_sharpness: float = 2.0
    target_editorial_ctr: float = 0.05

    def validate(self) -> None:
        if self.n_users < 1 or self.n_artists < 1 or self.n_genres < 1:
            raise ValueError("degenerate world: need at least one user, artist and genre")
        if not 0.0 <= self.gamma < 1.0:
            raise ValueError("gamma must lie in [0, 1)")
        if self.tau < 0 or self.albums_per_day <= 0:
            raise ValueError("tau must be >= 0 and albums_per_day > 0")
        if not 0.0 < self.target_editorial_ctr < 1.0:
            raise ValueError("target_editorial_ctr must lie in (0, 1)")


@dataclass
class CfConfig:
    dim: int = 32
    n_iter: int = 7
    like_weight: float = 1.0
    min_interactions: int = 10


@dataclass
class ColdStartConfig:
    hidden: tuple[int, int] = (64, 64)
    lr: float = 1e-2
    epochs: int = 200
    batch_size: int = 32
    label_buckets: int = 64


@dataclass
class IndexConfig:
    mode: str = "exact"
    num_clusters: int = 0
    nprobe: int = 0

    def to_mode(self) -> IndexMode:
        if self.mode == "exact":
            return Exact()
        if self.mode == "ivf":
            return CoarseIVF(self.num_clusters, self.nprobe)
        raise ValueError(f"unknown index mode {self.mode!r}")


@dataclass
class SimulationConfig:
    horizon_days: int = 28
    n_seeds: int = 5
    crossover: bool = True


@dataclass
class ServeConfig:
    host: str = "127.0.0.1"
    port: int = 8080
    state_dir: str = "freshrec-state"
    seed: int = 0


def _sim_bandit() -> BanditConfig:
    # Rewards are Bernoulli at carousel click rates (~5%), so the observation
    # variance is p(1-p) ~ 0.05 and per-album offsets spread by a few points.
    return BanditConfig(prior_sigma2_0=0.001, obs_var=0.05)


@dataclass
class FreshrecConfig:
    world: WorldConfig = field(default_factory=WorldConfig)
    cf: CfConfig = field(default_factory=CfConfig)
    coldstart: ColdStartConfig = field(default_factory=ColdStartConfig)
    bandit: BanditConfig = field(default_factory=_sim_bandit)
    index: IndexConfig = field(default_factory=IndexConfig)
    simulation: SimulationConfig = field(default_factory=SimulationConfig)
    serve: ServeConfig = field(default_factory=ServeConfig)

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)


def _coerce(value: str, like: Any):
    if isinstance(like, bool):
        low = value.strip().lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {value!r}")
    if isinstance(like, int):
        return int(value)
    if isinstance(like, float):
        return float(value)
    if isinstance(like, tuple):
        return tuple(int(p) for p in value.replace(",", " ").split())
    return value.strip()


def load_config(path: Optional[PathLike] = None, text: Optional[str] = None) -> FreshrecConfig:
    cfg = FreshrecConfig()
    parser = configparser.ConfigParser()
    if path is not None:
        with open(path, "r", encoding="utf-8") as fh:
            parser.read_file(fh)
    elif text is not None:
        parser.read_string(text)
    sections = {f.name for f in dataclasses.fields(cfg)}
    for name in parser.sections():
        if name not in sections:
            raise ValueError(f"unknown config section [{name}]")
        current = getattr(cfg, name)
        known = {f.name for f in dataclasses.fields(current)}
        updates = {}
        for key, raw in parser.items(name):
            if key not in known:
                raise ValueError(f"unknown key {key!r} in [{name}]")
            updates[key] = _coerce(raw, getattr(current, key))
        setattr(cfg, name, dataclasses.replace(current, **updates))
    cfg.world.validate()
    return cfg


def dump_config(cfg: FreshrecConfig) -> str:
    lines = []
    for f in dataclasses.fields(cfg):
        lines.append(f"[{f.name}]")
        for k, v in dataclasses.asdict(getattr(cfg, f.name)).items():
            if isinstance(v, (tuple, list)):
                v = ", ".join(str(x) for x in v)
            lines.append(f"{k} = {v}")
        lines.append("")
    return "\n".join(lines)
