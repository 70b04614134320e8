import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from attnvpr import aggregation as ag
from attnvpr.encoder import MultiLevelTokens
from attnvpr.errors import ConfigError, NormalizationError, ShapeError
from attnvpr.numeric import make_rng


def random_tokens(rng, n=12, d=256, dtype=np.float64):
    t = [rng.standard_normal((n, d)).astype(dtype) for _ in range(3)]
    centers = np.stack([np.arange(n) * 16 + 8, np.full(n, 8)], 1).astype(np.int32)
    return MultiLevelTokens(*t, centers, (1, n))


def test_concat_tokens():
    a, b, c = (np.full((2, 3), v) for v in (1.0, 2.0, 3.0))
    p = ag.concat_tokens(a, b, c)
    assert p.shape == (2, 9)
    assert p[0].tolist() == [1, 1, 1, 2, 2, 2, 3, 3, 3]
    np.testing.assert_array_equal(p[:, 3:6], b)
    with pytest.raises(ShapeError):
        ag.concat_tokens(a, b, np.zeros((3, 3)))


def test_attention_map_cases():
    p = np.random.default_rng(0).standard_normal((5, 6))
    np.testing.assert_allclose(ag.attention_map(p, np.zeros((6, 1))), np.full(5, 0.2))
    got = ag.attention_map(np.array([[2.0], [0.0]]), np.array([[1.0]]))
    e2 = math.exp(2)
    np.testing.assert_allclose(got, [e2 / (e2 + 1), 1 / (e2 + 1)], rtol=1e-12)
    np.testing.assert_allclose(got, [0.8808, 0.1192], atol=1e-4)
    assert ag.attention_map(np.ones((1, 3)), np.ones((3, 1))).tolist() == [1.0]


def test_minmax_norm_cases():
    np.testing.assert_allclose(ag.minmax_norm(np.array([0.2, 0.5, 0.3])), [0, 1, 1 / 3],
                               atol=1e-9)
    np.testing.assert_array_equal(ag.minmax_norm(np.full(4, 0.25)), np.zeros(4))


@given(arrays(np.float64, st.integers(2, 40), elements=st.floats(-10, 10), unique=True))
def test_minmax_properties(x):
    y = ag.minmax_norm(x)
    assert y.min() >= 0 and y.max() <= 1
    order = np.argsort(x)
    assert np.all(np.diff(y[order]) >= 0)
    np.testing.assert_allclose(ag.minmax_norm(y), y, atol=1e-9)


def test_fuse_attention_hand_evaluation():
    a1 = np.array([0.2, 0.5, 0.3])
    a2 = np.array([0.1, 0.1, 0.8])
    a3 = np.full(3, 1 / 3)
    np.testing.assert_allclose(ag.fuse_attention(a1, a2, a3), [0, 0.75, 1], atol=1e-9)


def test_fuse_identical_maps():
    a = np.random.default_rng(1).dirichlet(np.ones(20))
    np.testing.assert_allclose(ag.fuse_attention(a, a, a), ag.minmax_norm(a), atol=1e-9)


def test_level_global_cases():
    p = np.array([[1.0, 3.0], [3.0, 5.0]])
    np.testing.assert_allclose(ag.level_global([0.5, 0.5], p), [2, 4])
    np.testing.assert_array_equal(ag.level_global([0.0, 1.0], p), p[1])
    rng = np.random.default_rng(2)
    a, p = rng.dirichlet(np.ones(7)), rng.standard_normal((7, 5))
    expected = [sum(a[k] * p[k, j] for k in range(7)) for j in range(5)]
    np.testing.assert_allclose(ag.level_global(a, p), expected, atol=1e-6)


def test_reduce_global_identity_block():
    w_g = np.vstack([np.eye(256), np.zeros((512, 256))])
    gl = np.zeros(256)
    gl[:2] = [3, 4]
    g = ag.reduce_global([gl, np.zeros(256), np.zeros(256)], w_g)
    assert g[:2].tolist() == pytest.approx([0.6, 0.8])
    assert np.all(g[2:] == 0)


def test_reduce_global_unit_and_scale_invariant():
    rng = np.random.default_rng(3)
    for _ in range(100):
        gs = [rng.standard_normal(16) for _ in range(3)]
        w = rng.standard_normal((48, 16))
        g = ag.reduce_global(gs, w)
        assert abs(np.linalg.norm(g) - 1) <= 1e-6
        c = rng.uniform(0.1, 10)
        np.testing.assert_allclose(ag.reduce_global([c * x for x in gs], w), g, atol=1e-12)


def test_reduce_global_zero_norm():
    with pytest.raises(NormalizationError):
        ag.reduce_global([np.zeros(4)] * 3, np.ones((12, 4)))
    with pytest.raises(NormalizationError):
        ag.reduce_global([np.ones(4)] * 3, np.zeros((12, 4)))


def test_select_key_patches():
    A = np.array([0.5, 0.01, 0.03])
    descs = np.arange(6.0).reshape(3, 2)
    centers = np.array([[8, 8], [24, 8], [40, 8]])
    coords, keys = ag.select_key_patches(A, 0.02, descs, centers)
    assert coords.tolist() == [[8, 8], [40, 8]]
    np.testing.assert_array_equal(keys, descs[[0, 2]])
    assert len(ag.select_key_patches(np.array([0.1, 0.5]), 0.0, descs[:2], centers[:2])[0]) == 2
    assert len(ag.select_key_patches(np.array([0.0, 1.0, 0.4]), 1.0, descs, centers)[0]) == 0


def test_threshold_is_strict():
    assert ag.key_patch_indices(np.array([0.02, 0.0200001]), 0.02).tolist() == [1]


@given(st.lists(st.floats(0, 1), min_size=1, max_size=30), st.floats(0, 1), st.floats(0, 1))
def test_key_count_monotone_in_tau(values, t1, t2):
    A = np.array(values)
    lo, hi = sorted((t1, t2))
    assert len(ag.key_patch_indices(A, hi)) <= len(ag.key_patch_indices(A, lo))


def test_standard_variant_matches_manual_composition():
    rng = np.random.default_rng(4)
    tokens = random_tokens(rng)
    head = ag.init_head(make_rng(1), "standard", attn_std=0.05, dtype=np.float64)
    desc, bundle = ag.aggregate("standard", tokens, head, tau=0.3)
    p = ag.concat_tokens(tokens.low, tokens.mid, tokens.high)
    maps = [ag.attention_map(p, w) for w in head.attn]
    gls = [ag.level_global(a, x) for a, x in zip(maps, (tokens.low, tokens.mid, tokens.high))]
    g = ag.reduce_global(gls, head.reduce)
    A = ag.fuse_attention(*maps)
    coords, keys = ag.select_key_patches(A, 0.3, tokens.mid, tokens.centers)
    np.testing.assert_allclose(desc.global_desc, g, atol=1e-6)
    np.testing.assert_allclose(bundle.fused, A, atol=1e-12)
    np.testing.assert_array_equal(desc.key_coords, coords)
    np.testing.assert_allclose(desc.key_descs, keys, rtol=1e-6)


def test_sl_satt_uniform_attention():
    rng = np.random.default_rng(5)
    tokens = random_tokens(rng)
    head = ag.HeadParams((np.zeros((256, 1)),), rng.standard_normal((256, 256)), "sL-sATT")
    desc, _ = ag.aggregate("sL-sATT", tokens, head)
    mean = tokens.high.mean(0)
    expected = mean / np.linalg.norm(mean) @ head.reduce
    expected /= np.linalg.norm(expected)
    np.testing.assert_allclose(desc.global_desc, expected, atol=1e-6)


@pytest.mark.parametrize("variant", ag.VARIANTS)
def test_variant_invariants(variant):
    rng = np.random.default_rng(6)
    tokens = random_tokens(rng, n=30)
    head = ag.init_head(make_rng(2), variant, attn_std=0.05, dtype=np.float64)
    desc, bundle = ag.aggregate(variant, tokens, head)
    assert desc.global_desc.shape == (256,)
    assert abs(np.linalg.norm(desc.global_desc) - 1) <= 1e-6
    for a in bundle.maps:
        assert abs(a.sum() - 1) <= 1e-6
    assert bundle.fused.min() >= 0 and bundle.fused.max() <= 1
    assert bundle.fused.min() == 0 and bundle.fused.max() == pytest.approx(1, abs=1e-9)
    perm = rng.permutation(30)
    desc_p, bundle_p = ag.aggregate(variant, tokens.permuted(perm), head)
    np.testing.assert_allclose(desc_p.global_desc, desc.global_desc, atol=1e-5)
    for a, ap in zip(bundle.maps, bundle_p.maps):
        np.testing.assert_allclose(ap, a[perm], atol=1e-12)
    np.testing.assert_allclose(bundle_p.fused, bundle.fused[perm], atol=1e-9)
    key_set = {tuple(c) for c in desc.key_coords}
    assert {tuple(c) for c in desc_p.key_coords} == key_set


def test_variant_shape_mismatch():
    tokens = random_tokens(np.random.default_rng(7))
    head = ag.init_head(make_rng(3), "standard")
    with pytest.raises(ConfigError):
        ag.aggregate("standard", tokens, ag.HeadParams(head.attn[:1] * 3, head.reduce[:256],
                                                       "standard"))
    with pytest.raises(ConfigError):
        ag.aggregate("plain", tokens, head)
    with pytest.raises(ConfigError):
        ag.HeadParams(head.attn, head.reduce, "bogus")


def test_keep_all_bypasses_tau():
    tokens = random_tokens(np.random.default_rng(8), n=10)
    head = ag.init_head(make_rng(4))
    desc, _ = ag.aggregate("standard", tokens, head, tau=1.0, keep_all=True)
    assert desc.num_keys == 10
    desc, _ = ag.aggregate("standard", tokens, head, tau=1.0)
    assert desc.num_keys == 0
