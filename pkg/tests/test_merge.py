import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from magicmerge.checkpoint import LayerSpec, ModelManifest, ModelWeights, mlp_manifest
from magicmerge.errors import BaseMismatch, EmptyInput, ShapeMismatch
from magicmerge.merge import (
    MergeConfig,
    TaskVector,
    disjoint_mean,
    effective_lambda,
    elect_sign,
    fingerprint,
    keep_count,
    merge,
    merge_average,
    merge_dare,
    merge_task_arithmetic,
    merge_ties,
    recompose,
    task_vector,
    trim,
)
from magicmerge.network import init_mlp

M1 = ModelManifest((LayerSpec(0, "w"),), 1, 1)


def tv(*layers, fp="base"):
    return TaskVector({l: np.asarray(v, dtype=np.float64) for l, v in enumerate(layers)}, fp, M1)


def ties_oracle(vectors, keep_fraction):
    # straight loops over coordinates, independent of the vectorised code
    n = len(vectors[0])
    k = math.ceil(keep_fraction * n - 1e-9)
    trimmed = []
    for v in vectors:
        order = sorted(range(n), key=lambda i: (-abs(v[i]), i))[:k]
        trimmed.append([v[i] if i in order else 0.0 for i in range(n)])
    out = []
    for i in range(n):
        total = float(sum(t[i] for t in trimmed))
        sign = int(total > 0) - int(total < 0)
        agree = [t[i] for t in trimmed if t[i] != 0 and int(t[i] > 0) - int(t[i] < 0) == sign]
        out.append(sum(agree) / len(agree) if agree else 0.0)
    return out


@pytest.fixture
def small_model():
    m = mlp_manifest([3, 4, 2])
    pre = init_mlp(m, 0)
    pre.tensors["fc0.bias"] = np.full(4, 0.1, np.float32)
    tuned = {k: v + np.float32(0.01) * np.arange(v.size, dtype=np.float32).reshape(v.shape) for k, v in pre.tensors.items()}
    return m, pre, ModelWeights(tuned)


def test_task_vector_basics(small_model):
    m, pre, tuned = small_model
    assert all(not np.any(v) for v in task_vector(pre, pre.copy(), m).per_layer.values())
    t = task_vector(pre, tuned, m)
    assert t.layers == [0, 1]
    assert t[0].size == 3 * 4 + 4
    assert recompose(pre, t, 1.0).equals(tuned)
    assert recompose(pre, t.scale(0.0), 1.0).equals(pre)


def test_task_vector_two_element_case():
    m = ModelManifest((LayerSpec(0, "w", None, "none"),), 2, 1)
    pre = ModelWeights({"w": np.array([[1.0, 2.0]], np.float32)})
    tuned = ModelWeights({"w": np.array([[2.0, 4.0]], np.float32)})
    np.testing.assert_array_equal(task_vector(pre, tuned, m)[0], [1.0, 2.0])


def test_task_vector_errors(small_model):
    m, pre, tuned = small_model
    bad = tuned.copy()
    bad.tensors["fc0.bias"] = np.zeros(5, np.float32)
    with pytest.raises(ShapeMismatch):
        task_vector(pre, bad, m)
    tagged = tuned.copy()
    tagged.metadata["base_fingerprint"] = "not-this-base"
    with pytest.raises(BaseMismatch):
        task_vector(pre, tagged, m)
    t = task_vector(pre, tuned, m)
    with pytest.raises(BaseMismatch):
        recompose(tuned, t)


def test_recompose_applies_lambda_to_the_sum(small_model):
    m, pre, tuned = small_model
    t = task_vector(pre, tuned, m)
    out = recompose(pre, merge_task_arithmetic([t, t, t]), 0.3)
    expect = pre["fc0.weight"].astype(np.float64) + 0.3 * 3 * (tuned["fc0.weight"].astype(np.float64) - pre["fc0.weight"])
    np.testing.assert_allclose(out["fc0.weight"], expect.astype(np.float32), rtol=0, atol=0)


def test_average_examples():
    np.testing.assert_array_equal(merge_average([tv([0, 2]), tv([2, 0])])[0], [1, 1])
    np.testing.assert_array_equal(merge_average([tv([1, 2]), tv([1, 2])])[0], [1, 2])
    assert np.linalg.norm(merge_average([tv([1, 0]), tv([0, 1])])[0]) == pytest.approx(np.sqrt(2) / 2)
    with pytest.raises(EmptyInput):
        merge_average([])
    with pytest.raises(BaseMismatch):
        merge_average([tv([1.0]), tv([1.0], fp="other")])


def test_task_arithmetic_examples():
    np.testing.assert_array_equal(merge_task_arithmetic([tv([1, -2])])[0], [1, -2])
    np.testing.assert_array_equal(merge_task_arithmetic([tv([1, -2]), tv([-1, 2])])[0], [0, 0])


def test_trim_examples():
    np.testing.assert_array_equal(trim(np.array([0.5, -3, 1, 0.2, -0.1]), 0.2), [0, -3, 0, 0, 0])
    # ties keep the lower index
    np.testing.assert_array_equal(trim(np.array([1.0, -1.0, 1.0]), 0.5), [1.0, -1.0, 0.0])
    assert keep_count(10, 0.7) == 7
    assert keep_count(7, 0.2) == 2
    with pytest.raises(ValueError):
        trim(np.ones(3), 0.0)


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 300), st.sampled_from([0.05, 0.1, 0.2, 0.5, 1.0]))
def test_trim_keeps_exact_count(n, kf):
    v = np.random.default_rng(n).standard_normal(n)
    assert np.count_nonzero(trim(v, kf)) == math.ceil(kf * n - 1e-9)


def test_ties_hand_example():
    out = merge_ties([tv([2, -1]), tv([-1, -2])], keep_fraction=1.0)[0]
    np.testing.assert_array_equal(np.sign(np.array([2, -1]) + np.array([-1, -2])), [1, -1])
    np.testing.assert_array_equal(out, [2, -1.5])
    np.testing.assert_array_equal(merge_ties([tv([0.3, -0.7])], 1.0)[0], [0.3, -0.7])


def test_ties_matches_loop_oracle():
    rng = np.random.default_rng(0)
    for trial in range(30):
        K = int(rng.integers(1, 5))
        vs = [rng.standard_normal(13) for _ in range(K)]
        got = merge_ties([tv(v) for v in vs], 0.2)[0]
        np.testing.assert_allclose(got, ties_oracle(vs, 0.2), rtol=0, atol=1e-15)


def test_ties_same_sign_full_keep_equals_average():
    rng = np.random.default_rng(1)
    vs = [np.abs(rng.standard_normal(9)) + 0.01 for _ in range(4)]
    np.testing.assert_allclose(merge_ties([tv(v) for v in vs], 1.0)[0], merge_average([tv(v) for v in vs])[0], rtol=1e-15)


def test_elect_and_disjoint_edge_cases():
    stacked = np.array([[1.0, 0.0], [-1.0, 0.0]])
    signs = elect_sign(stacked)
    np.testing.assert_array_equal(signs, [0, 0])
    np.testing.assert_array_equal(disjoint_mean(stacked, signs), [0, 0])


def test_dare_examples():
    vs = [tv(np.arange(5.0), [1.0, -1.0]), tv(-np.ones(5), [2.0, 0.5])]
    np.testing.assert_array_equal(merge_dare(vs, 0.0)[0], merge_task_arithmetic(vs)[0])
    a, b = merge_dare(vs, 0.5, seed=3), merge_dare(vs, 0.5, seed=3)
    assert all(np.array_equal(a[l], b[l]) for l in a.layers)
    kept = merge_dare([tv(np.ones(1000))], 0.9, seed=0)[0]
    survivors = kept[kept != 0]
    np.testing.assert_allclose(survivors, 10.0, rtol=1e-12)
    assert 0.05 < survivors.size / kept.size < 0.15
    with pytest.raises(ValueError):
        merge_dare(vs, 1.0)


def test_dare_is_unbiased_over_10k_seeds():
    # With p = 0.2 and same-sign entries the Monte-Carlo standard error of the
    # mean is about 0.4% of each coordinate, so a 2% band is a real check.
    # Cancelling coordinates or p = 0.9 push the noise floor past 2%.
    rng = np.random.default_rng(7)
    vs = [tv(rng.uniform(0.5, 1.0, 8)) for _ in range(2)]
    target = merge_task_arithmetic(vs)[0]
    acc = np.zeros_like(target)
    n = 10_000
    for seed in range(n):
        acc += merge_dare(vs, 0.2, seed=seed)[0]
    mean = acc / n
    big = np.abs(target) > 0.1
    assert np.all(np.abs(mean[big] - target[big]) <= 0.02 * np.abs(target[big]))


def test_operators_keep_shapes_and_fingerprint():
    rng = np.random.default_rng(2)
    vs = [tv(rng.standard_normal(6), rng.standard_normal(3)) for _ in range(3)]
    for method in ("average", "task_arithmetic", "ties", "dare"):
        out = merge(vs, MergeConfig(method=method))
        assert out.base_fingerprint == "base"
        assert [out[l].shape for l in out.layers] == [(6,), (3,)]


def test_norm_shrinks_under_averaging():
    rng = np.random.default_rng(3)
    for K in (2, 4, 8):
        for _ in range(20):
            vs = [rng.standard_normal(12) for _ in range(K)]
            merged = merge_average([tv(v) for v in vs])[0]
            for p in (1, 2):
                assert np.linalg.norm(merged, ord=p) < np.mean([np.linalg.norm(v, ord=p) for v in vs])


def test_merge_config_validation():
    assert MergeConfig().lam == 0.3 and MergeConfig().ties_keep_fraction == 0.2
    for bad in (dict(method="slerp"), dict(lam=0.0), dict(ties_keep_fraction=0.0), dict(dare_drop_prob=1.0)):
        with pytest.raises(ValueError):
            MergeConfig(**bad)
    assert effective_lambda(MergeConfig(method="average")) == 1.0
    assert effective_lambda(MergeConfig()) == 0.3


def test_fingerprint_sensitivity():
    w = ModelWeights({"a": np.zeros(3, np.float32)})
    w2 = ModelWeights({"a": np.array([0, 0, 1e-30], np.float32)})
    assert fingerprint(w) == fingerprint(w.copy())
    assert fingerprint(w) != fingerprint(w2)
