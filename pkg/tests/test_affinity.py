import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from contextagg import oracle
from contextagg.affinity import (
    AffinityMatrix,
    ConvAffinityParams,
    MixCoeffs,
    MlpAffinityParams,
    aggregate,
    conv_affinity,
    conv_gather_index,
    lowrank_width,
    merge_heads,
    mix_affinity,
    mlp_affinity,
    sa_affinity,
    split_heads,
)
from contextagg.errors import ConfigError, ShapeError
from contextagg.tensor import Param, Tensor
from contextagg.verify import attention_via_affinity, conv_via_affinity


def test_sa_single_token_is_one():
    q = Tensor(np.random.default_rng(0).normal(size=(2, 1, 3)))
    a = sa_affinity(q, q)
    assert np.array_equal(a.weights.data, np.ones((2, 1, 1)))
    assert a.provenance == "dynamic"


def test_sa_zero_queries_give_uniform_rows():
    q = Tensor(np.zeros((1, 5, 4)))
    k = Tensor(np.random.default_rng(1).normal(size=(1, 5, 4)))
    assert np.allclose(sa_affinity(q, k).weights.data, 0.2, rtol=0, atol=1e-15)


def test_sa_shape_mismatch():
    with pytest.raises(ShapeError):
        sa_affinity(Tensor(np.zeros((1, 3, 2))), Tensor(np.zeros((1, 4, 2))))


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 3), st.integers(1, 4), st.integers(2, 7), st.integers(0, 2**31 - 1))
def test_sa_rows_are_distributions(heads, d, n, seed):
    rng = np.random.default_rng(seed)
    q, k = (Tensor(rng.normal(size=(heads, n, d)) * 3) for _ in range(2))
    w = sa_affinity(q, k).weights.data
    assert np.all(w >= 0)
    assert np.all(np.abs(w.sum(-1) - 1) <= 1e-12)


@settings(max_examples=30, deadline=None)
@given(st.integers(2, 6), st.integers(0, 2**31 - 1))
def test_attention_aggregation_is_permutation_covariant(n, seed):
    rng = np.random.default_rng(seed)
    c, heads = 4, 2
    x = rng.normal(size=(n, c))
    ws = [rng.normal(size=(c, c)) / 2 for _ in range(3)]
    bs = [np.zeros(c)] * 3
    perm = rng.permutation(n)
    _, out = attention_via_affinity(x, *ws, heads, *bs)
    _, out_p = attention_via_affinity(x[perm], *ws, heads, *bs)
    assert np.allclose(out_p, out[perm], rtol=0, atol=1e-12)


def test_attention_matches_naive_oracle():
    rng = np.random.default_rng(5)
    for _ in range(5):
        heads = int(rng.integers(1, 4))
        c, n = heads * 3, int(rng.integers(1, 9))
        x = rng.normal(size=(n, c))
        ws = [rng.normal(size=(c, c)) / math.sqrt(c) for _ in range(3)]
        bs = [0.1 * rng.normal(size=c) for _ in range(3)]
        aff, out = attention_via_affinity(x, *ws, heads, *bs)
        ref_aff, ref_out = oracle.naive_attention(x, *ws, heads, *bs)
        assert np.max(np.abs(aff - ref_aff)) <= 1e-12
        assert np.max(np.abs(out - ref_out)) <= 1e-12


def _conv_params(kernel, grid):
    return ConvAffinityParams(Param(kernel), grid)


def test_conv_delta_kernel_gives_identity():
    k = np.zeros((1, 3, 3))
    k[0, 1, 1] = 1.0
    a = conv_affinity(_conv_params(k, (4, 5))).weights.data
    assert np.array_equal(a[0], np.eye(20))


def test_conv_interior_row_has_k_squared_taps():
    k = np.random.default_rng(0).uniform(1, 2, size=(2, 3, 3))
    a = conv_affinity(_conv_params(k, (5, 5))).weights.data
    centre = 2 * 5 + 2
    assert np.count_nonzero(a[0, centre]) == 9
    corner = 0
    assert np.count_nonzero(a[0, corner]) == 4


@settings(max_examples=30, deadline=None)
@given(st.sampled_from([1, 3, 5]), st.integers(1, 6), st.integers(1, 6), st.integers(0, 2**31 - 1))
def test_conv_rows_have_at_most_k_squared_nonzeros(k, h, w, seed):
    kern = np.random.default_rng(seed).normal(size=(1, k, k))
    a = conv_affinity(_conv_params(kern, (h, w))).weights.data
    assert np.all(np.count_nonzero(a[0], axis=1) <= k * k)


def test_conv_signed_offsets():
    idx = conv_gather_index(3, 3, 3)
    # token 4 is the centre; its left neighbour (token 3) sits at offset (0, +1) from centre-minus-neighbour
    assert idx[4, 3] == (0 + 1) * 3 + (1 + 1)
    assert idx[4, 4] == 4
    assert idx[0, 8] == 9  # outside the window -> zero slot


@pytest.mark.parametrize("k", [3, 5])
@pytest.mark.parametrize("grid", [(4, 4), (5, 7), (8, 8)])
@pytest.mark.parametrize("channels", [1, 4])
def test_conv_matches_direct_convolution(k, grid, channels):
    rng = np.random.default_rng(k * 100 + channels)
    x = rng.normal(size=(*grid, channels))
    kern = rng.normal(size=(channels, k, k))
    assert np.max(np.abs(conv_via_affinity(x, kern) - oracle.direct_depthwise_conv(x, kern))) <= 1e-12


def test_conv_params_validation():
    with pytest.raises(ConfigError):
        _conv_params(np.zeros((1, 2, 2)), (3, 3))
    with pytest.raises(ConfigError):
        _conv_params(np.zeros((1, 3, 3)), (0, 3))


def test_mlp_affinity_is_transpose():
    w = np.random.default_rng(0).normal(size=(2, 4, 4))
    a = mlp_affinity(MlpAffinityParams("dense", dense=Param(w))).weights.data
    assert np.array_equal(a, np.swapaxes(w, -1, -2))


def test_lowrank_affinity_is_transposed_product():
    rng = np.random.default_rng(1)
    w1, w2 = rng.normal(size=(1, 8, 2)), rng.normal(size=(1, 2, 8))
    a = mlp_affinity(MlpAffinityParams("lowrank", factors=(Param(w1), Param(w2)))).weights.data
    assert np.allclose(a, np.swapaxes(w1 @ w2, -1, -2), rtol=0, atol=1e-14)
    assert np.linalg.matrix_rank(a[0]) <= 2


def test_lowrank_width_requires_divisibility():
    assert lowrank_width(16, 4) == 4
    with pytest.raises(ConfigError):
        lowrank_width(49, 4)


def test_mix_degenerate_coefficients():
    rng = np.random.default_rng(2)
    dyn = AffinityMatrix(Tensor(rng.normal(size=(2, 3, 3))), "dynamic")
    stat = AffinityMatrix(Tensor(rng.normal(size=(2, 3, 3))), "static")
    only_dyn = mix_affinity(MixCoeffs(Param(1.0), Param(0.0)), dyn, stat)
    only_stat = mix_affinity(MixCoeffs(Param(0.0), Param(1.0)), dyn, stat)
    assert np.array_equal(only_dyn.weights.data, dyn.weights.data)
    assert np.array_equal(only_stat.weights.data, stat.weights.data)


def test_mix_is_linear_without_renormalisation():
    dyn = AffinityMatrix(Tensor(np.full((1, 2, 2), 0.5)), "dynamic")
    stat = AffinityMatrix(Tensor(np.eye(2)[None]), "static")
    mixed = mix_affinity(MixCoeffs(Param(1.0), Param(1.0)), dyn, stat).weights.data
    assert np.allclose(mixed.sum(-1), 2.0)


def test_mix_shape_mismatch():
    a = AffinityMatrix(Tensor(np.zeros((2, 3, 3))), "dynamic")
    b = AffinityMatrix(Tensor(np.zeros((1, 3, 3))), "static")
    with pytest.raises(ShapeError):
        mix_affinity(MixCoeffs(Param(1.0), Param(1.0)), a, b)


def test_split_merge_roundtrip():
    x = Tensor(np.arange(2 * 5 * 6, dtype=float).reshape(2, 5, 6))
    heads = split_heads(x, 3)
    assert heads.shape == (2, 3, 5, 2)
    assert np.array_equal(heads.data[0, 1, :, 0], x.data[0, :, 2])
    assert np.array_equal(merge_heads(heads).data, x.data)


def test_aggregate_heads_use_contiguous_channel_slices():
    rng = np.random.default_rng(3)
    w = rng.normal(size=(2, 4, 4))
    v = rng.normal(size=(4, 6))
    got = aggregate(AffinityMatrix(Tensor(w), "static"), Tensor(v)).data
    assert np.allclose(got, oracle.aggregate_loops(w, v), rtol=0, atol=1e-12)


def test_shared_affinity_over_batch_matches_per_sample():
    rng = np.random.default_rng(4)
    w = rng.normal(size=(2, 5, 5))
    v = rng.normal(size=(3, 5, 4))
    got = aggregate(AffinityMatrix(Tensor(w), "static"), Tensor(v)).data
    for b in range(3):
        assert np.allclose(got[b], oracle.aggregate_loops(w, v[b]), rtol=0, atol=1e-12)


def test_aggregate_errors():
    a = AffinityMatrix(Tensor(np.zeros((2, 3, 3))), "static")
    with pytest.raises(ConfigError):
        aggregate(a, Tensor(np.zeros((3, 5))))
    with pytest.raises(ShapeError):
        aggregate(a, Tensor(np.zeros((4, 4))))
