import numpy as np
import pytest

from freshrec import DAY, HOUR
from freshrec.catalog import AlbumMeta, Catalog, EventType, UsageEvent
from freshrec.cf_trainer import train_cf
from freshrec.coldstart import (
    FeatureSpec,
    MlpModel,
    TrainParams,
    build_features,
    gradient_check,
    loss_and_grads,
    make_training_set,
    mse,
    predict,
    refresh_predictions,
    train,
)
from freshrec.config import WorldConfig
from freshrec.simulator import generate_world

from oracles import forward_by_hand

T0 = 1_000 * DAY


def hand_model():
    return MlpModel(np.array([[1.0, -1.0], [0.5, 2.0]]), np.array([0.0, 0.5]),
                    np.array([[1.0, 0.0], [-1.0, 0.5]]), np.array([1.0, -1.0]),
                    np.array([[2.0, 3.0], [4.0, -2.0]]), np.array([0.1, 0.2]))


def test_forward_matches_hand_computation():
    # z1 = [2, 3.5]; z2 = [-0.5, 0.75] -> a2 = [0, 0.75]; out = [3.1, -1.3]
    m = hand_model()
    np.testing.assert_allclose(predict(m, [1.0, 2.0]), [3.1, -1.3], atol=1e-12)
    np.testing.assert_allclose(predict(m, [1.0, 2.0]), forward_by_hand(m.params(), [1.0, 2.0]), atol=1e-12)


def test_forward_matches_scalar_oracle_on_random_models():
    rng = np.random.default_rng(0)
    for _ in range(5):
        m = MlpModel.init(5, (4, 6), 3, rng)
        m.b1 += rng.normal(size=4)
        x = rng.normal(size=5)
        np.testing.assert_allclose(predict(m, x), forward_by_hand(m.params(), x), atol=1e-12)


def zero_model(F, h, d, b3):
    return MlpModel(np.zeros((F, h)), np.zeros(h), np.zeros((h, h)), np.zeros(h), np.zeros((h, d)), np.asarray(b3, float))


def test_zero_weights_output_bias():
    m = zero_model(4, 3, 2, [0.5, -2.0])
    np.testing.assert_array_equal(predict(m, np.arange(4.0)), [0.5, -2.0])


def test_dead_relu_gives_b3():
    rng = np.random.default_rng(1)
    m = MlpModel.init(4, (3, 3), 2, rng)
    m.b1[:] = -1e3  # every hidden pre-activation negative
    m.W3[:] = 0.0
    m.b3[:] = [1.0, 2.0]
    np.testing.assert_array_equal(predict(m, rng.normal(size=4)), [1.0, 2.0])


def test_predict_shape_errors_and_purity():
    m = hand_model()
    with pytest.raises(ValueError):
        predict(m, [1.0, 2.0, 3.0])
    x = np.array([0.3, -0.2])
    a = predict(m, x)
    b = predict(m, x)
    assert a.tobytes() == b.tobytes()


def test_loss_definition():
    m = zero_model(2, 2, 2, [1.0, 1.0])
    X = np.zeros((2, 2))
    Y = np.array([[0.0, 1.0], [3.0, 1.0]])
    # squared errors per example: 1 and 4 -> mean 2.5
    loss, _ = loss_and_grads(m, X, Y)
    assert loss == pytest.approx(2.5)
    assert mse(m, X, Y) == pytest.approx(2.5)


def test_gradient_check_small_model():
    rng = np.random.default_rng(3)
    m = MlpModel.init(5, (4, 4), 3, rng)
    assert gradient_check(m, (rng.normal(size=5), rng.normal(size=3)), eps=1e-5) < 1e-4


def test_gradient_check_linear_regime():
    rng = np.random.default_rng(4)
    m = MlpModel.init(5, (4, 4), 3, rng)
    x = np.abs(rng.normal(size=5))
    m.W1[:] = np.abs(m.W1)
    m.W2[:] = np.abs(m.W2)
    m.b1[:] = 1.0
    m.b2[:] = 1.0
    assert gradient_check(m, (x, rng.normal(size=3)), eps=1e-5) < 1e-7


def test_zero_loss_has_zero_gradient():
    m = zero_model(3, 4, 2, [0.25, -1.0])
    _, grads = loss_and_grads(m, np.ones((1, 3)), np.array([[0.25, -1.0]]))
    assert np.sqrt(sum(float((g * g).sum()) for g in grads)) < 1e-10


def test_gradient_check_rejects_bad_eps():
    with pytest.raises(ValueError):
        gradient_check(hand_model(), (np.ones(2), np.ones(2)), eps=0.1)


@pytest.mark.parametrize("kind, n", [("onehot", 120), ("uniform", 500)])
def test_constant_target_is_learned(kind, n):
    # Inputs shaped like the real features: one-hot blocks or values in [0, 1).
    rng = np.random.default_rng(5)
    X = np.eye(6)[rng.integers(6, size=n)] if kind == "onehot" else rng.random((n, 6))
    c = np.array([0.3, -0.7, 1.1])
    model, report = train([(x, c) for x in X], TrainParams(epochs=200, seed=1))
    assert report.final_loss < 1e-3
    assert len(report.epoch_losses) == 200
    np.testing.assert_allclose(predict(model, X[:5]), np.tile(c, (5, 1)), atol=0.05)


def test_optimal_start_stays_optimal():
    c = np.array([1.0, 2.0])
    data = [(np.arange(3.0) + i, c) for i in range(10)]
    start = zero_model(3, 4, 2, c)
    _, report = train(data, TrainParams(epochs=5), model=start)
    assert report.epoch_losses == [0.0] * 5


def test_zero_learning_rate_leaves_weights():
    rng = np.random.default_rng(6)
    start = MlpModel.init(3, (4, 4), 2, rng)
    model, _ = train([(np.ones(3), np.ones(2))], TrainParams(lr=0.0, epochs=3), model=start)
    for a, b in zip(model.params(), start.params()):
        np.testing.assert_array_equal(a, b)


def test_training_decreases_loss_and_is_deterministic():
    rng = np.random.default_rng(7)
    W = rng.normal(size=(8, 3))
    X = rng.normal(size=(150, 8))
    data = list(zip(X, np.tanh(X @ W)))
    _, r1 = train(data, TrainParams(epochs=20, seed=3))
    _, r2 = train(data, TrainParams(epochs=20, seed=3))
    assert r1.final_loss < r1.epoch_losses[0]
    np.testing.assert_allclose(r1.epoch_losses, r2.epoch_losses, rtol=0, atol=1e-12)


def test_train_errors():
    with pytest.raises(ValueError):
        train([])
    with pytest.raises(ValueError):
        train([(np.ones(3), np.ones(2)), (np.ones(3), np.ones(4))])


def test_model_binary_round_trip(tmp_path):
    rng = np.random.default_rng(8)
    m = MlpModel.init(7, (5, 4), 3, rng)
    path = tmp_path / "model.bin"
    m.save(path, {"spec": {"dim": 3}})
    back, meta = MlpModel.load(path)
    assert meta == {"spec": {"dim": 3}}
    for a, b in zip(back.params(), m.params()):
        np.testing.assert_array_equal(a, b.astype(np.float32))
    assert path.read_bytes()[:4] == b"FRMM"


# ---- features -----------------------------------------------------------

def feature_catalog():
    cat = Catalog()
    cat.add_albums([
        AlbumMeta("p1", ("A",), "lab", ("rock",), T0 - 20 * DAY),
        AlbumMeta("p2", ("A",), "lab", ("rock",), T0 - 10 * DAY),
        AlbumMeta("new", ("A",), "lab", ("rock",), T0),
        AlbumMeta("solo", ("B",), "lab2", ("jazz",), T0),
    ])
    ev = [UsageEvent(EventType.STREAM, f"u{i}", a, T0 - DAY) for i in range(12) for a in ("p1", "p2")]
    ev += [UsageEvent(EventType.STREAM, "x", "new", T0 + h * HOUR) for h in range(5)]
    ev += [UsageEvent(EventType.LIKE, "x", "new", T0 + 1)]
    cat.add_events(ev)
    return cat


def test_features_artist_prior_and_usage():
    cat = feature_catalog()
    store = train_cf(cat.event_table(), T0, d=2)
    spec = FeatureSpec(2, ("jazz", "rock"), label_buckets=8)
    x = build_features(cat.albums["new"], store, T0 + 3 * HOUR, cat, spec)
    assert x.shape == (spec.length,) == (2 + 2 + 8 + 3,)
    np.testing.assert_allclose(x[:2], (store.item_vec("p1") + store.item_vec("p2")) / 2)
    assert x[2:4].tolist() == [0.0, 1.0]
    assert x[4:12].sum() == 1.0 and x[4 + spec.label_bucket("lab")] == 1.0
    np.testing.assert_allclose(x[-3:], [np.log(4), np.log(2), 3 / 24])
    debut = build_features(cat.albums["solo"], store, T0, cat, spec)
    assert not debut[:2].any()
    np.testing.assert_array_equal(debut[-3:], [0, 0, 0])
    with pytest.raises(ValueError):
        build_features(cat.albums["new"], store, T0 - 1, cat, spec)


def test_usage_stats_grow_between_refreshes():
    cat = feature_catalog()
    store = train_cf(cat.event_table(), T0, d=2)
    spec = FeatureSpec(2, ("jazz", "rock"), label_buckets=8)
    model = MlpModel.init(spec.length, (4, 4), 2, np.random.default_rng(0))
    early = build_features(cat.albums["new"], store, T0 + HOUR, cat, spec)
    late = build_features(cat.albums["new"], store, T0 + 5 * HOUR, cat, spec)
    assert late[-3] > early[-3] and late[-1] > early[-1]
    snap = refresh_predictions(model, cat.new_release_window(T0 + HOUR), T0 + HOUR, cat, store, spec,
                               previous_version=4)
    assert snap.version == 5 and snap.ids == ["new", "solo"] and snap.vectors.shape == (2, 2)
    empty = refresh_predictions(model, set(), T0 + 30 * DAY, cat, store, spec, previous_version=5)
    assert empty.version == 6 and len(empty) == 0


def _cos(a, b):
    return np.sum(a * b, axis=1) / (np.linalg.norm(a, axis=1) * np.linalg.norm(b, axis=1) + 1e-12)


@pytest.mark.slow
def test_predictions_beat_shuffled_pairing():
    cfg = WorldConfig(n_users=800, n_artists=80, albums_per_day=25, release_days=7, warmup_days=21)
    world = generate_world(cfg, seed=11)
    cat = world.build_catalog()
    as_of = cfg.start_ts
    store = train_cf(cat.event_table(), as_of, d=16, seed=0)
    spec = FeatureSpec(16, tuple(world.genre_ids))
    data = make_training_set(cat, store, spec, as_of, np.random.default_rng(0))
    rng = np.random.default_rng(1)
    order = rng.permutation(len(data))
    cut = int(0.8 * len(data))
    train_set = [data[i][:2] for i in order[:cut]]
    held = [data[i] for i in order[cut:]]
    model, _ = train(train_set, TrainParams(seed=2))
    P = predict(model, np.array([x for x, _, _ in held]))
    Y = np.array([y for _, y, _ in held])
    matched = _cos(P, Y).mean()
    shuffled = _cos(P, Y[rng.permutation(len(Y))]).mean()
    assert len(held) >= 50
    assert matched - shuffled >= 0.2, (matched, shuffled)
