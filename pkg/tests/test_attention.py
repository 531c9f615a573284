import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from longctx.attention import (
    AttentionProblem,
    PartialAttn,
    block_stats,
    finalize,
    merge_stats,
    reference_attention,
    visibility_mask,
)
from longctx.errors import DegenerateRowError, ShapeError
from longctx.rote import TokenTimeline
from oracles import brute_attention


def rand_qkv(rng, H, S, d):
    return rng.standard_normal((H, S, d)), rng.standard_normal((H, S, d)), rng.standard_normal((H, S, d))


def test_single_key_returns_v():
    rng = np.random.default_rng(0)
    q, k, v = rand_qkv(rng, 2, 1, 4)
    assert np.allclose(reference_attention(AttentionProblem(q, k, v)), v, atol=1e-15)


def test_zero_queries_average_values():
    rng = np.random.default_rng(1)
    _, k, v = rand_qkv(rng, 2, 5, 4)
    out = reference_attention(AttentionProblem(np.zeros((2, 5, 4)), k, v))
    assert np.allclose(out, np.broadcast_to(v.mean(axis=1, keepdims=True), v.shape), atol=1e-14)


def test_causal_first_row_is_first_value():
    rng = np.random.default_rng(2)
    q, k, v = rand_qkv(rng, 3, 6, 4)
    out = reference_attention(AttentionProblem(q, k, v, causal=True))
    assert np.allclose(out[:, 0], v[:, 0], atol=1e-15)


@pytest.mark.parametrize("causal", [False, True])
@pytest.mark.parametrize("with_time", [False, True])
def test_reference_matches_brute_force(causal, with_time):
    rng = np.random.default_rng(3)
    q, k, v = rand_qkv(rng, 2, 12, 4)
    pad = np.ones(12, dtype=bool)
    pad[[3, 10, 11]] = False
    taus = np.sort(rng.uniform(0, 30, 12)) if with_time else None
    out = reference_attention(AttentionProblem(q, k, v, timeline=taus, causal=causal, pad_mask=pad))
    assert np.max(np.abs(out - brute_attention(q, k, v, taus, causal, pad))) < 1e-12
    assert np.all(out[:, ~pad] == 0)


def test_problem_validation():
    with pytest.raises(ShapeError):
        AttentionProblem(np.ones((1, 2, 4)), np.ones((1, 3, 4)), np.ones((1, 2, 4)))
    with pytest.raises(ValueError):
        AttentionProblem(np.ones((1, 2, 4)), np.ones((1, 2, 4)), np.ones((1, 2, 4)), pad_mask=[False, False])


def test_padded_prefix_under_causal_mask():
    rng = np.random.default_rng(10)
    q, k, v = rand_qkv(rng, 1, 3, 4)
    out = reference_attention(AttentionProblem(q, k, v, causal=True, pad_mask=[False, True, True]))
    assert np.all(out[0, 0] == 0)
    assert np.allclose(out[0, 1], v[0, 1], atol=1e-15)


def test_block_stats_examples():
    rng = np.random.default_rng(4)
    q, k, v = rng.standard_normal((3, 4)), rng.standard_normal((2, 4)), rng.standard_normal((2, 4))
    empty = block_stats(q, k, v, np.zeros((3, 2), dtype=bool))
    assert np.all(empty.m == -np.inf) and np.all(empty.l == 0) and np.all(empty.o == 0)
    one = block_stats(np.zeros((1, 4)), k[:1], v[:1])
    assert one.m[0] == 0 and one.l[0] == 1 and np.array_equal(one.o[0], v[0])


def test_block_stats_matches_direct_sum():
    rng = np.random.default_rng(5)
    q, k, v = rng.standard_normal((3, 4)), rng.standard_normal((5, 4)), rng.standard_normal((5, 4))
    mask = rng.random((3, 5)) < 0.7
    mask[:, 0] = True
    st_ = block_stats(q, k, v, mask)
    for i in range(3):
        logits = [float(q[i] @ k[j]) / 2.0 for j in range(5) if mask[i, j]]
        m = max(logits)
        assert abs(st_.m[i] - m) < 1e-12
        assert abs(st_.l[i] - sum(np.exp(x - m) for x in logits)) < 1e-12
        o = sum(np.exp(float(q[i] @ k[j]) / 2.0 - m) * v[j] for j in range(5) if mask[i, j])
        assert np.max(np.abs(st_.o[i] - o)) < 1e-12


def test_merge_identity_and_uniform_example():
    rng = np.random.default_rng(6)
    x = block_stats(rng.standard_normal((2, 4)), rng.standard_normal((3, 4)), rng.standard_normal((3, 4)))
    merged = merge_stats(x, PartialAttn.empty((2,), 4))
    assert np.array_equal(merged.m, x.m) and np.array_equal(merged.l, x.l) and np.array_equal(merged.o, x.o)
    q = np.zeros((1, 4))
    k, v = np.ones((4, 4)), rng.standard_normal((4, 4))
    a, b = block_stats(q, k[:2], v[:2]), block_stats(q, k[2:], v[2:])
    assert a.l[0] == 2 and b.l[0] == 2
    assert merge_stats(a, b).l[0] == 4


def test_merge_shape_mismatch():
    with pytest.raises(ShapeError):
        merge_stats(PartialAttn.empty((2,), 4), PartialAttn.empty((3,), 4))


def test_finalize_examples():
    p = PartialAttn(np.zeros(2), np.ones(2), np.arange(8.0).reshape(2, 4))
    assert np.array_equal(finalize(p), p.o)
    with pytest.raises(DegenerateRowError):
        finalize(PartialAttn.empty((2,), 4))
    assert np.array_equal(finalize(PartialAttn.empty((2,), 4), row_valid=np.zeros(2, dtype=bool)), np.zeros((2, 4)))


def test_single_block_finalize_is_reference():
    rng = np.random.default_rng(7)
    q, k, v = rand_qkv(rng, 1, 6, 4)
    out = finalize(block_stats(q[0], k[0], v[0]))
    assert np.max(np.abs(out - reference_attention(AttentionProblem(q, k, v))[0])) < 1e-12


def _split(rng, S):
    cuts = sorted(rng.choice(np.arange(1, S), size=rng.integers(0, S - 1), replace=False)) if S > 1 else []
    return list(zip([0] + list(cuts), list(cuts) + [S]))


@given(st.integers(0, 2**32 - 1), st.booleans())
@settings(max_examples=100, deadline=None)
def test_blockwise_equals_exact_any_merge_order(seed, causal):
    rng = np.random.default_rng(seed)
    H, S, d = 2, int(rng.integers(2, 16)), 4
    q, k, v = rand_qkv(rng, H, S, d)
    ref = reference_attention(AttentionProblem(q, k, v, causal=causal))
    pos = np.arange(S)
    parts = [block_stats(q, k[:, a:b], v[:, a:b], visibility_mask(pos, pos[a:b], causal)) for a, b in _split(rng, S)]
    while len(parts) > 1:
        i = int(rng.integers(len(parts)))
        j = int(rng.integers(len(parts) - 1))
        a = parts.pop(i)
        b = parts.pop(j)
        parts.append(merge_stats(a, b) if rng.random() < 0.5 else merge_stats(b, a))
    assert np.max(np.abs(finalize(parts[0]) - ref)) < 1e-12


@given(st.integers(0, 2**32 - 1))
@settings(max_examples=50, deadline=None)
def test_outputs_are_convex_combinations(seed):
    rng = np.random.default_rng(seed)
    q, k, v = rand_qkv(rng, 1, 7, 4)
    out = reference_attention(AttentionProblem(q, k, v))
    assert np.all(out[0] <= v[0].max(axis=0) + 1e-12)
    assert np.all(out[0] >= v[0].min(axis=0) - 1e-12)


def test_causal_rows_ignore_future():
    rng = np.random.default_rng(8)
    q, k, v = rand_qkv(rng, 2, 8, 4)
    base = reference_attention(AttentionProblem(q, k, v, causal=True))
    k2, v2 = k.copy(), v.copy()
    k2[:, 5:] = rng.standard_normal((2, 3, 4)) * 50
    v2[:, 5:] = rng.standard_normal((2, 3, 4)) * 50
    again = reference_attention(AttentionProblem(q, k2, v2, causal=True))
    assert np.array_equal(again[:, :5], base[:, :5])


def test_attention_shift_invariant():
    rng = np.random.default_rng(9)
    q, k, v = rand_qkv(rng, 2, 10, 8)
    tl = TokenTimeline(np.sort(rng.uniform(0, 50, 10)))
    base = reference_attention(AttentionProblem(q, k, v, timeline=tl))
    moved = reference_attention(AttentionProblem(q, k, v, timeline=tl.shifted(100.0)))
    assert np.max(np.abs(moved - base)) / np.max(np.abs(base)) < 1e-9
