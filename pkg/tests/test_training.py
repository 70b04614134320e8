import numpy as np
import pytest

from attnvpr import aggregation as ag
from attnvpr import training as tr
from attnvpr.encoder import MultiLevelTokens
from attnvpr.errors import TrainingError, ValidationError
from attnvpr.numeric import make_rng
from attnvpr.retrieval import PlaceTag

from oracles import (central_difference, head_global, hinge_loss, mine_exhaustive,
                     relative_errors)


def tokens(rng, n=6, d=8):
    return MultiLevelTokens(*(rng.standard_normal((n, d)) for _ in range(3)))


def random_triplet(rng, n=6, d=8):
    return tr.Triplet(tokens(rng, n, d), tokens(rng, n, d), tokens(rng, n, d))


def unit(v):
    v = np.asarray(v, float)
    return v / np.linalg.norm(v)


def test_triplet_loss_examples():
    q, p, n = unit([1, 0]), unit([1, 0]), unit([0, 1])
    assert tr.triplet_loss(q, p, n, 0.1) == 0.0
    assert tr.triplet_loss(q, n, p, 0.1) == pytest.approx(np.sqrt(2) + 0.1)
    assert tr.triplet_loss(q, n, n, 0.1) == pytest.approx(0.1)
    q3, p3, n3 = unit([1, 0, 0]), unit([0.6, 0.8, 0]), unit([1, 0, 0.0])
    assert tr.triplet_loss(q3, p3, n3, 0.0) == pytest.approx(np.sqrt(0.8))


def test_triplet_loss_rotation_invariant():
    rng = np.random.default_rng(0)
    for _ in range(20):
        q, p, n = (unit(rng.standard_normal(16)) for _ in range(3))
        rot, _ = np.linalg.qr(rng.standard_normal((16, 16)))
        assert tr.triplet_loss(rot @ q, rot @ p, rot @ n, 0.3) == pytest.approx(
            tr.triplet_loss(q, p, n, 0.3), abs=1e-12)


def test_inactive_hinge_gives_zero_gradients():
    rng = np.random.default_rng(1)
    params = ag.init_head(make_rng(0), "standard", dim=8, attn_std=0.3, dtype=np.float64)
    trip = random_triplet(rng)
    trip = tr.Triplet(trip.query, trip.query, trip.negative)
    loss, grads = tr.head_grad(trip, params, margin=0.0)
    assert loss == 0.0
    assert all(not g.any() for g in grads)


def _fd_check(variant, seed, margin=1.0, n=6, d=8):
    rng = np.random.default_rng(seed)
    params = ag.init_head(make_rng(seed), variant, dim=d, attn_std=0.5, dtype=np.float64)
    trip = random_triplet(rng, n, d)
    arrays = [a.copy() for a in params.arrays()]
    attn, reduce = arrays[:-1], arrays[-1]

    def loss():
        gs = [head_global(variant, t.low, t.mid, t.high, attn, reduce)
              for t in (trip.query, trip.positive, trip.negative)]
        return hinge_loss(*gs, margin)

    pre = loss()
    if pre == 0.0 or pre < 1e-3:
        return None
    got_loss, grads = tr.head_grad(trip, params, margin)
    assert got_loss == pytest.approx(pre, abs=1e-12)
    numeric = central_difference(loss, arrays, h=1e-5)
    return max(float(relative_errors(a, f).max()) for a, f in zip(grads, numeric))


@pytest.mark.parametrize("variant", ag.VARIANTS)
def test_gradients_match_finite_differences(variant):
    checked = 0
    for seed in range(8):
        err = _fd_check(variant, seed)
        if err is None:
            continue
        checked += 1
        assert err <= 1e-4
    assert checked >= 4


def test_full_width_gradient_sample():
    rng = np.random.default_rng(3)
    params = ag.init_head(make_rng(3), "standard", dim=256, attn_std=0.05, dtype=np.float64)
    trip = random_triplet(rng, n=10, d=256)
    arrays = [a.copy() for a in params.arrays()]
    _, grads = tr.head_grad(trip, params, margin=1.0)

    def loss():
        gs = [head_global("standard", t.low, t.mid, t.high, arrays[:3], arrays[3])
              for t in (trip.query, trip.positive, trip.negative)]
        return hinge_loss(*gs, 1.0)

    assert loss() > 0
    for which in range(4):
        flat = arrays[which].reshape(-1)
        for k in rng.choice(flat.size, 15, replace=False):
            old = flat[k]
            flat[k] = old + 1e-5
            up = loss()
            flat[k] = old - 1e-5
            down = loss()
            flat[k] = old
            fd = (up - down) / 2e-5
            assert relative_errors(grads[which].reshape(-1)[k], fd) <= 1e-4


def test_reduction_perturbation_is_column_local():
    rng = np.random.default_rng(4)
    params = ag.init_head(make_rng(4), "standard", dim=8, attn_std=0.3, dtype=np.float64)
    t = tokens(rng)
    fwd = ag.head_forward(params, t)
    r, j = 5, 3
    w = params.reduce.copy()
    w[r, j] += 1e-3
    moved = ag.head_forward(params.with_arrays(list(params.attn) + [w]), t)
    delta = moved.reduced - fwd.reduced
    assert delta[j] == pytest.approx(1e-3 * fwd.unit_star[r], rel=1e-9)
    assert not np.delete(delta, j).any()
    d_global = rng.standard_normal(8)
    grad_w = tr.head_backward(params, fwd, d_global)[-1]
    for col in range(8):
        coef = grad_w[:, col] @ fwd.unit_star
        np.testing.assert_allclose(grad_w[:, col], coef * fwd.unit_star, atol=1e-12)


def test_batch_grad_is_mean_of_triplet_grads():
    rng = np.random.default_rng(5)
    params = ag.init_head(make_rng(5), "plain", dim=8, attn_std=0.3, dtype=np.float64)
    data = [tokens(rng) for _ in range(5)]
    idx = [(0, 1, 2), (3, 1, 4), (0, 4, 2)]
    loss, grads = tr.batch_grad(idx, data, params, margin=1.0)
    per = [tr.head_grad(tr.Triplet(data[q], data[p], data[n]), params, 1.0) for q, p, n in idx]
    assert loss == pytest.approx(np.mean([x[0] for x in per]), abs=1e-12)
    for k, g in enumerate(grads):
        np.testing.assert_allclose(g, np.mean([x[1][k] for x in per], axis=0), atol=1e-12)


def _tags(points, headings=None):
    headings = headings or [0.0] * len(points)
    return [PlaceTag(f"i{k}", float(x), float(y), h) for k, ((x, y), h)
            in enumerate(zip(points, headings))]


def test_mining_single_candidate():
    g = np.eye(4)
    tags = _tags([(0, 0), (5, 0), (100, 0), (200, 0)])
    trips, skipped = tr.mine_triplets(g, tags, 10, 25, n_neg=5, query_indices=[0])
    assert skipped == 0
    assert trips == [(0, 1, 2), (0, 1, 3)]


def test_mining_heading_mode():
    g = np.array([[1.0, 0], [0.0, 1], [1.0, 0], [0.5, 0.5]])
    tags = _tags([(0, 0), (3, 0), (4, 0), (500, 0)], [0.0, 5.0, 90.0, 0.0])
    trips, _ = tr.mine_triplets(g, tags, 10, 25, 1, mode="heading", query_indices=[0])
    assert trips == [(0, 1, 3)]
    trips, _ = tr.mine_triplets(g, tags, 10, 25, 1, mode="weak", query_indices=[0])
    assert trips == [(0, 2, 3)]


def test_mining_skips_without_positive():
    tags = _tags([(0, 0), (100, 0)])
    trips, skipped = tr.mine_triplets(np.eye(2), tags, 10, 25)
    assert trips == [] and skipped == 2
    with pytest.raises(ValidationError):
        tr.mine_triplets(np.eye(2), tags, 10, 25, mode="strong")


@pytest.mark.parametrize("mode", ["weak", "heading"])
@pytest.mark.parametrize("seed", range(3))
def test_mining_matches_exhaustive_oracle(mode, seed):
    rng = np.random.default_rng(seed)
    n = 40
    pts = rng.uniform(0, 120, (n, 2))
    heads = rng.uniform(0, 360, n).tolist()
    g = rng.standard_normal((n, 6))
    got = tr.mine_triplets(g, _tags(pts, heads), 15, 30, 3, mode)
    assert got == mine_exhaustive(g, [tuple(p) for p in pts], heads, 15, 30, 3, mode)


def _clustered_dataset(seed, places=6, per_place=3, n=8, d=8):
    rng = np.random.default_rng(seed)
    data, tags = [], []
    for s in range(places):
        base = [rng.standard_normal((n, d)) for _ in range(3)]
        for v in range(per_place):
            lv = [b + 0.8 * rng.standard_normal((n, d)) for b in base]
            data.append(MultiLevelTokens(*lv))
            tags.append(PlaceTag(f"p{s}v{v}", 100.0 * s + v, 0.0, 0.0))
    return data, tags


def test_training_reduces_loss_and_is_deterministic():
    data, tags = _clustered_dataset(0)
    params = ag.init_head(make_rng(1), "standard", dim=8, attn_std=0.1, dtype=np.float64)
    cfg = tr.TrainConfig(epochs=8, lr=1e-2, margin=0.5, batch_size=8)
    a = tr.train_head(data, tags, params, cfg)
    b = tr.train_head(data, tags, params, cfg)
    assert a.loss_trace[-1] < a.loss_trace[0]
    assert a.loss_trace == b.loss_trace
    for x, y in zip(a.params.arrays(), b.params.arrays()):
        np.testing.assert_array_equal(x, y)


def test_training_zero_lr_and_zero_epochs():
    data, tags = _clustered_dataset(1)
    params = ag.init_head(make_rng(2), "plain", dim=8, dtype=np.float32)
    res = tr.train_head(data, tags, params, tr.TrainConfig(epochs=3, lr=0.0))
    for x, y in zip(res.params.arrays(), params.arrays()):
        np.testing.assert_array_equal(x, y)
        assert x.dtype == np.float32
    assert len(set(res.loss_trace)) == 1
    res = tr.train_head(data, tags, params, tr.TrainConfig(epochs=0))
    assert res.params is params and res.loss_trace == []


def test_nan_tokens_rejected():
    data, tags = _clustered_dataset(2)
    data[0] = MultiLevelTokens(*(np.full((8, 8), np.nan) for _ in range(3)))
    params = ag.init_head(make_rng(3), "plain", dim=8, dtype=np.float64)
    with pytest.raises(ValidationError):
        tr.train_head(data, tags, params, tr.TrainConfig(epochs=1))


def test_training_divergence_raises(monkeypatch):
    data, tags = _clustered_dataset(2)
    params = ag.init_head(make_rng(3), "plain", dim=8, dtype=np.float64)
    real = tr.batch_grad

    def poisoned(*args, **kwargs):
        loss, grads = real(*args, **kwargs)
        return float("nan"), grads

    monkeypatch.setattr(tr, "batch_grad", poisoned)
    with pytest.raises(TrainingError, match="diverged"):
        tr.train_head(data, tags, params, tr.TrainConfig(epochs=1))


def test_training_needs_triplets():
    data, tags = _clustered_dataset(3, places=1)
    params = ag.init_head(make_rng(4), "plain", dim=8, dtype=np.float64)
    with pytest.raises(TrainingError):
        tr.train_head(data, tags, params, tr.TrainConfig(epochs=1))
