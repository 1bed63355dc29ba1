import threading

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from freshrec import DAY, WEEK
from freshrec.bandit import (
    ArmState,
    Bandit,
    BanditConfig,
    ExpiredArmError,
    attribute_rewards,
    batch_update,
    conjugate_update,
    sample_and_rank,
)

from oracles import cascade_rule, gaussian_posterior

NOW = 100 * DAY


def arm(a, mu=0.0, sigma2=1.0, pending=()):
    return ArmState(a, mu, sigma2, 0, NOW, NOW + WEEK, list(pending))


def test_register_prior_idempotent_and_expired():
    b = Bandit()
    s = b.register_arm("x", NOW - DAY, NOW)
    assert (s.mu, s.sigma2, s.n_obs, s.pending) == (0.0, 1.0, 0, [])
    assert s.expires_at == NOW - DAY + WEEK
    b.add_rewards({"x": 1})
    assert b.register_arm("x", NOW - DAY, NOW) is s and s.pending == [1]
    with pytest.raises(ExpiredArmError, match="expired arm"):
        b.register_arm("old", NOW - WEEK, NOW)
    with pytest.raises(ExpiredArmError):
        b.register_arm("future", NOW + 1, NOW)


def test_expire_arms():
    b = Bandit()
    b.register_arm("z", NOW - 2 * DAY, NOW)
    b.register_arm("y", NOW - 2 * DAY, NOW)
    b.register_arm("keep", NOW, NOW)
    assert b.expire_arms(NOW) == []
    b.add_rewards({"z": 1})
    assert b.expire_arms(NOW - 2 * DAY + WEEK) == ["y", "z"]  # inclusive boundary, sorted
    assert set(b.arms) == {"keep"}
    assert b.add_rewards({"z": 1}) == 0  # late rewards for expired arms are dropped


def test_conjugate_examples():
    assert conjugate_update(0.0, 1.0, [1], 1.0) == pytest.approx((0.5, 0.5), abs=1e-12)
    mu, s2 = conjugate_update(0.0, 1.0, [1, 0], 1.0)
    assert mu == pytest.approx(1 / 3, abs=1e-12) and s2 == pytest.approx(1 / 3, abs=1e-12)
    assert conjugate_update(0.3, 0.2, [], 1.0) == (0.3, 0.2)


def test_batch_update_matches_sequential_oracle():
    rng = np.random.default_rng(0)
    for _ in range(200):
        mu0, s0, obs = rng.normal(), rng.uniform(0.01, 3), rng.uniform(0.05, 2)
        rewards = rng.integers(0, 2, size=rng.integers(1, 30)).tolist()
        out = batch_update({"a": arm("a", mu0, s0, rewards)}, obs)["a"]
        mu, s2 = gaussian_posterior(mu0, s0, rewards, obs)
        assert abs(out.mu - mu) <= 1e-12 and abs(out.sigma2 - s2) <= 1e-12
        assert out.n_obs == len(rewards) and out.pending == []


def test_empty_pending_unchanged():
    a = arm("a", 0.2, 0.4)
    out = batch_update({"a": a}, 0.25)["a"]
    assert (out.mu, out.sigma2, out.n_obs) == (0.2, 0.4, 0)


@settings(max_examples=200, deadline=None)
@given(st.floats(-2, 2), st.floats(1e-3, 5), st.lists(st.integers(0, 1), min_size=1, max_size=40),
       st.floats(0.01, 4))
def test_update_properties(mu, s2, rewards, obs):
    new_mu, new_s2 = conjugate_update(mu, s2, rewards, obs)
    assert new_s2 < s2
    rbar = sum(rewards) / len(rewards)
    assert min(mu, rbar) - 1e-12 <= new_mu <= max(mu, rbar) + 1e-12


def test_attribution_examples():
    assert attribute_rewards(list("abcd"), 3) == {"a": 0, "b": 0, "c": 1}
    assert attribute_rewards(list("abcd"), None) == {"a": 0, "b": 0, "c": 0}
    assert attribute_rewards(list("ab"), 1) == {"a": 1}
    for bad in (0, 5, True):
        with pytest.raises(ValueError):
            attribute_rewards(list("abcd"), bad)


def test_attribution_against_rule_exhaustively():
    for n in range(0, 13):
        slate = [f"x{i}" for i in range(n)]
        for click in [None, *range(1, n + 1)]:
            assert attribute_rewards(slate, click, 3) == cascade_rule(slate, click)


def test_degenerate_noise_ranks_by_mean_score():
    rng = np.random.default_rng(0)
    user = np.array([1.0, -0.5])
    pred = {f"a{i}": rng.normal(size=2) for i in range(8)}
    arms = {a: arm(a, rng.normal(), 1e-12) for a in pred}
    got = [a for a, _ in sample_and_rank(user, pred, arms, 8, rng)]
    want = sorted(pred, key=lambda a: -(pred[a] @ user + arms[a].mu))
    assert got == want


def test_single_arm():
    assert sample_and_rank(np.ones(2), {"a": np.ones(2)}, {"a": arm("a")}, 3,
                           np.random.default_rng(5))[0][0] == "a"


def test_missing_prediction_is_skipped():
    out = sample_and_rank(np.ones(2), {"a": np.ones(2)}, {"a": arm("a"), "b": arm("b")}, 3,
                          np.random.default_rng(0))
    assert [a for a, _ in out] == ["a"]


def test_symmetric_arms_split_evenly():
    rng = np.random.default_rng(1234)
    pred = {"a": np.ones(3), "b": np.ones(3)}
    arms = {"a": arm("a"), "b": arm("b")}
    wins = sum(sample_and_rank(np.ones(3), pred, arms, 1, rng)[0][0] == "a" for _ in range(10_000))
    assert abs(wins / 10_000 - 0.5) <= 0.02


def test_exploration_is_live():
    pred = {f"a{i}": np.zeros(2) for i in range(5)}
    arms = {a: arm(a, 0.0, 0.1) for a in pred}
    firsts = {sample_and_rank(np.zeros(2), pred, arms, 1, np.random.default_rng(s))[0][0] for s in range(20)}
    assert len(firsts) >= 2


def test_no_expired_arm_sampled():
    b = Bandit()
    for i in range(6):
        b.register_arm(f"a{i}", NOW - i * DAY, NOW)
    b.expire_arms(NOW + 3 * DAY)
    pred = {f"a{i}": np.ones(2) for i in range(6)}
    out = sample_and_rank(np.ones(2), pred, b.arms, 6, np.random.default_rng(0))
    assert {a for a, _ in out} == {"a0", "a1", "a2", "a3"}


def _static_environment(seed):
    p = np.append(np.linspace(0.05, 0.4, 19), 0.5)
    ids = [f"a{i:02d}" for i in range(20)]
    b = Bandit(BanditConfig(affinity_weight=0.0))
    for a in ids:
        b.register_arm(a, NOW, NOW)
    pred = {a: np.zeros(2) for a in ids}
    rng = np.random.default_rng(seed)
    env = np.random.default_rng(seed + 1)
    hits = 0
    for t in range(10_000):
        a = sample_and_rank(np.zeros(2), pred, b.arms, 1, rng, alpha=0.0)[0][0]
        hits += t >= 9_000 and a == "a19"
        b.add_rewards(attribute_rewards([a], 1 if env.random() < p[ids.index(a)] else None))
        if t % 10 == 9:
            b.batch_update()
    return hits / 1000


def test_static_environment_finds_best_arm():
    assert _static_environment(0) > 0.8


def test_concurrent_reward_appends():
    b = Bandit()
    b.register_arm("a", NOW, NOW)

    def worker():
        for _ in range(1000):
            b.add_rewards({"a": 1})

    threads = [threading.Thread(target=worker) for _ in range(4)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert b.batch_update() == 4000 and b.arms["a"].n_obs == 4000


def test_arm_table_round_trip(tmp_path):
    b = Bandit(BanditConfig(prior_sigma2_0=0.5))
    b.register_arm("a", NOW, NOW)
    b.register_arm("b", NOW - DAY, NOW)
    b.add_rewards({"a": 1, "b": 0})
    b.batch_update()
    path = tmp_path / "arms.jsonl"
    b.save(path)
    back = Bandit.load(path)
    assert back.version == b.version and back.config == b.config
    assert {a: s.to_record() for a, s in back.arms.items()} == {a: s.to_record() for a, s in b.arms.items()}


@pytest.mark.parametrize("kw", [dict(prior_sigma2_0=0), dict(obs_var=-1), dict(seen_depth=0)])
def test_config_validation(kw):
    with pytest.raises(ValueError):
        BanditConfig(**kw)
