"""Gaussian Thompson sampling over the rolling set of new-album arms.

Each arm carries a scalar click-affinity offset with a Gaussian posterior.
An arm's sampled score is ``alpha * <user, predicted album vector>`` plus
a fresh draw of that offset, so two requests between posterior updates can
still rank the tail differently. Feedback follows the cascade convention:
items above a click were seen and skipped, items below it were never seen.
"""
from __future__ import annotations

import logging
import threading
from dataclasses import dataclass, field, replace
from typing import Iterable, Mapping, Optional, Sequence

import numpy as np

from . import HOUR, WEEK
from .codec import PathLike, decode_record, iter_lines, write_records

_logger = logging.getLogger(__name__)


class ExpiredArmError(ValueError):
    pass


@dataclass(frozen=True)
class BanditConfig:
    prior_mu0: float = 0.0
    prior_sigma2_0: float = 1.0
    obs_var: float = 0.25
    affinity_weight: float = 1.0
    seen_depth: int = 3
    update_period: int = 4 * HOUR

    def __post_init__(self):
        if self.prior_sigma2_0 <= 0 or self.obs_var <= 0:
            raise ValueError("variances must be > 0")
        if self.seen_depth < 1:
            raise ValueError("seen_depth must be >= 1")


@dataclass
class ArmState:
    album_id: str
    mu: float
    sigma2: float
    n_obs: int
    created_at: int
    expires_at: int
    pending: list[int] = field(default_factory=list)

    def to_record(self) -> dict:
        return {"album_id": self.album_id, "mu": self.mu, "sigma2": self.sigma2,
                "n_obs": self.n_obs, "created_at": self.created_at, "expires_at": self.expires_at}


def attribute_rewards(slate_positions: Sequence[str], click_pos: Optional[int],
                      seen_depth: int = 3) -> dict[str, int]:
    """Cascade rewards for one display.

    With a click at ``p`` (1-based): positions above ``p`` get 0, ``p`` gets
    1, anything below is unobserved. Without a click the first
    ``seen_depth`` positions get 0.
    """
    n = len(slate_positions)
    if click_pos is None:
        return {a: 0 for a in slate_positions[:min(seen_depth, n)]}
    if isinstance(click_pos, bool) or not 1 <= click_pos <= n:
        raise ValueError(f"click position {click_pos} outside slate of length {n}")
    out = {a: 0 for a in slate_positions[:click_pos - 1]}
    out[slate_positions[click_pos - 1]] = 1
    return out


def conjugate_update(mu: float, sigma2: float, rewards: Sequence[float], obs_var: float):
    """Normal prior, normal likelihood with known variance -> normal posterior."""
    n = len(rewards)
    if n == 0:
        return mu, sigma2
    precision = 1.0 / sigma2 + n / obs_var
    post_mu = (mu / sigma2 + float(sum(rewards)) / obs_var) / precision
    return post_mu, 1.0 / precision


def batch_update(arms: Mapping[str, ArmState], obs_var: float) -> dict[str, ArmState]:
    """Absorb every arm's pending rewards; returns new arm objects."""
    out = {}
    for album_id, arm in arms.items():
        if not arm.pending:
            out[album_id] = replace(arm, pending=[])
            continue
        mu, s2 = conjugate_update(arm.mu, arm.sigma2, arm.pending, obs_var)
        out[album_id] = replace(arm, mu=mu, sigma2=s2, n_obs=arm.n_obs + len(arm.pending), pending=[])
    return out


@dataclass
class ArmSnapshot:
    """Immutable, array-backed view of the arm table used at serving time."""

    version: int
    ids: list[str]
    mu: np.ndarray
    sigma: np.ndarray
    vectors: Optional[np.ndarray] = None

    def __len__(self) -> int:
        return len(self.ids)


def _ranked(ids: Sequence[str], scores: np.ndarray, k: int, ranks: np.ndarray) -> list[tuple[str, float]]:
    # ranks: position of each id in sorted-id order, used as the tie-breaker.
    if scores.size > k:
        kth = np.partition(scores, scores.size - k)[scores.size - k]
        cand = np.nonzero(scores >= kth)[0]
    else:
        cand = np.arange(scores.size)
    order = cand[np.lexsort((ranks[cand], -scores[cand]))][:k]
    return [(ids[i], float(scores[i])) for i in order]


def sample_and_rank(
    user_vec: np.ndarray,
    predicted: Mapping[str, np.ndarray],
    arms: Mapping[str, ArmState],
    k: int,
    rng: np.random.Generator,
    alpha: float = 1.0,
    exclude: Iterable[str] = (),
) -> list[tuple[str, float]]:
    """Top-``k`` arms by ``alpha * <user, predicted[a]> + theta_a``, ``theta_a ~ N(mu_a, sigma2_a)``.

    Arms without a predicted vector are skipped (and counted in the log).
    """
    exclude = set(exclude)
    ids = sorted(a for a in arms if a not in exclude)
    usable = [a for a in ids if a in predicted]
    if len(usable) < len(ids):
        _logger.warning("skipped %d arms without a predicted vector", len(ids) - len(usable))
    if not usable or k < 1:
        return []
    mu = np.array([arms[a].mu for a in usable])
    sd = np.sqrt([arms[a].sigma2 for a in usable])
    theta = mu + sd * rng.standard_normal(len(usable))
    if alpha:
        vecs = np.asarray([predicted[a] for a in usable], dtype=float)
        theta = theta + alpha * (vecs @ np.asarray(user_vec, dtype=float))
    return _ranked(usable, theta, k, np.arange(len(usable)))


def sample_and_rank_snapshot(
    snap: ArmSnapshot,
    user_vec: np.ndarray,
    k: int,
    rng: np.random.Generator,
    alpha: float = 1.0,
    exclude_rows: Optional[np.ndarray] = None,
) -> list[tuple[str, float]]:
    """Array fast path of :func:`sample_and_rank` over a serving snapshot."""
    n = len(snap.ids)
    if n == 0 or k < 1:
        return []
    theta = snap.mu + snap.sigma * rng.standard_normal(n)
    if alpha:
        theta = theta + alpha * (snap.vectors @ user_vec)
    rows = np.arange(n)
    if exclude_rows is not None and exclude_rows.size:
        keep = np.ones(n, dtype=bool)
        keep[exclude_rows] = False
        rows = rows[keep]
        theta = theta[keep]
    if rows.size == 0:
        return []
    picked = _ranked(rows, theta, k, rows)
    return [(snap.ids[int(r)], s) for r, s in picked]


class Bandit:
    """Arm table with per-arm pending buffers and batched posterior updates.

    Rewards may be appended from several threads; ``batch_update`` and
    arm registration/expiry are the single-writer phase.
    """

    def __init__(self, config: BanditConfig = BanditConfig()):
        self.config = config
        self.arms: dict[str, ArmState] = {}
        self.version = 0
        self._lock = threading.Lock()

    def register_arm(self, album_id: str, release_ts: int, now: int) -> ArmState:
        existing = self.arms.get(album_id)
        if existing is not None:
            return existing
        if not 0 <= now - release_ts < WEEK:
            raise ExpiredArmError(f"expired arm {album_id!r}")
        arm = ArmState(album_id, self.config.prior_mu0, self.config.prior_sigma2_0, 0,
                       created_at=now, expires_at=release_ts + WEEK)
        with self._lock:
            self.arms[album_id] = arm
        return arm

    def expire_arms(self, now: int) -> list[str]:
        """Drop arms with ``expires_at <= now`` together with their pending rewards."""
        gone = sorted(a for a, s in self.arms.items() if s.expires_at <= now)
        if gone:
            with self._lock:
                for a in gone:
                    del self.arms[a]
        return gone

    def add_rewards(self, rewards: Mapping[str, int]) -> int:
        """Queue rewards; rewards for unknown (expired) arms are dropped."""
        n = 0
        with self._lock:
            for album_id, r in rewards.items():
                arm = self.arms.get(album_id)
                if arm is None:
                    continue
                arm.pending.append(int(r))
                n += 1
        return n

    def batch_update(self) -> int:
        """Absorb all pending rewards. Returns how many were absorbed."""
        with self._lock:
            n = sum(len(a.pending) for a in self.arms.values())
            self.arms = batch_update(self.arms, self.config.obs_var)
            self.version += 1
        return n

    def snapshot(self, vectors: Optional[Mapping[str, np.ndarray]] = None) -> ArmSnapshot:
        """Array view of current posteriors; arms lacking a vector are left out when ``vectors`` is given."""
        ids = sorted(self.arms)
        if vectors is not None:
            ids = [a for a in ids if a in vectors]
        mu = np.array([self.arms[a].mu for a in ids], dtype=float)
        sigma = np.sqrt(np.array([self.arms[a].sigma2 for a in ids], dtype=float))
        vecs = None
        if vectors is not None:
            vecs = np.asarray([vectors[a] for a in ids], dtype=float) if ids else np.zeros((0, 0))
        return ArmSnapshot(self.version, ids, mu, sigma, vecs)

    def save(self, path: PathLike) -> None:
        """One JSON record per arm, preceded by a header line carrying the version."""
        header = {"kind": "arm_table", "version": self.version, "config": self.config.__dict__}
        rows = [self.arms[a].to_record() for a in sorted(self.arms)]
        write_records(path, [header, *rows])

    @classmethod
    def load(cls, path: PathLike) -> "Bandit":
        lines = iter_lines(path)
        _, head = next(lines)
        header = decode_record(head)
        if header.get("kind") != "arm_table":
            raise ValueError("not an arm table")
        bandit = cls(BanditConfig(**header["config"]))
        bandit.version = int(header["version"])
        for _, line in lines:
            rec = decode_record(line)
            bandit.arms[rec["album_id"]] = ArmState(
                rec["album_id"], float(rec["mu"]), float(rec["sigma2"]), int(rec["n_obs"]),
                int(rec["created_at"]), int(rec["expires_at"]))
        return bandit
