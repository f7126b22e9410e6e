"""Tests for :mod:`smart_bird.sparse_attn`"""
import numpy as np
import pytest

from smart_bird.exceptions import ConfigError
from smart_bird.sampler import IndexMatrix, build_head_indices, topk_rows
from smart_bird.sketch import AttentionMatrix
from smart_bird.sparse_attn import (
    SparseLayer,
    dense_attention_head,
    dense_layer_forward,
    full_indices,
    gather_kv,
    sparse_attention_head,
    sparse_layer_forward,
)
from smart_bird.tensor import Tape, Tensor, default_dtype, gradcheck, matmul, multiply, sum_all


def _draw(seed: int):
    """A random layer, input and valid length with N <= 32"""
    rng = np.random.default_rng(seed)
    heads = int(rng.choice([1, 2, 4]))
    dim = heads * int(rng.integers(1, 5))
    length = int(rng.integers(1, 33))
    valid_len = int(rng.integers(1, length + 1))
    layer = SparseLayer(dim, heads, rng)
    x = rng.standard_normal((length, dim))
    x[valid_len:] = 0.0
    return layer, x, valid_len


def test_rejects_indivisible_width():
    with pytest.raises(ConfigError):
        SparseLayer(6, 4, np.random.default_rng(0))


def test_head_count_mismatch():
    layer = SparseLayer(4, 2, np.random.default_rng(0))
    with pytest.raises(ValueError):
        sparse_layer_forward(Tensor(np.ones((3, 4))), full_indices(3, 3, 1), layer)


def test_gather_shapes_and_rows():
    rng = np.random.default_rng(0)
    layer = SparseLayer(4, 2, rng)
    x = Tensor(rng.standard_normal((5, 4)))
    index = topk_rows(rng.random((5, 5)), 3, 5)
    gathered = gather_kv(x, [index, index], layer)
    assert gathered.keys[0].shape == (5, 3, 2)
    keys = matmul(x, layer.wk[1]).values
    np.testing.assert_allclose(gathered.keys[1].values[2, 1], keys[index.idx[2, 1]])


def test_sparse_head_equals_dense_head_with_all_keys():
    rng = np.random.default_rng(3)
    query, keys, values = (Tensor(rng.standard_normal((6, 3))) for _ in range(3))
    index = full_indices(6, 6, 1)[0]
    sparse = sparse_attention_head(
        query, Tensor(keys.values[index.idx]), Tensor(values.values[index.idx]), index
    )
    dense, _ = dense_attention_head(query, keys, values, 6)
    np.testing.assert_allclose(sparse.values, dense.values, atol=1e-5)


def test_pad_query_rows_attend_nothing():
    rng = np.random.default_rng(1)
    query, keys, values = (Tensor(rng.standard_normal((5, 2))) for _ in range(3))
    index = topk_rows(rng.random((5, 5)), 2, 3)
    out = sparse_attention_head(
        query, Tensor(keys.values[index.idx]), Tensor(values.values[index.idx]), index
    )
    assert not out.values[3:].any()


@pytest.mark.parametrize("seed", range(50))
def test_full_index_sparse_layer_equals_dense(seed):
    """With K = N and every position selected, the sparse layer reproduces the dense layer"""
    layer, x, valid_len = _draw(seed)
    indices = full_indices(x.shape[0], valid_len, layer.heads)
    sparse = sparse_layer_forward(Tensor(x), indices, layer)
    dense, _ = dense_layer_forward(Tensor(x), layer, valid_len)
    np.testing.assert_allclose(sparse.values, dense.values, atol=1e-5)


@pytest.mark.parametrize("seed", range(50))
def test_full_index_gradients_equal_dense(seed):
    with default_dtype(np.float64):
        layer, x, valid_len = _draw(seed)
        target = np.random.default_rng(seed + 100).standard_normal(x.shape)
        grads = []
        for run in ("sparse", "dense"):
            layer.zero_grad()
            inputs = Tensor(x, requires_grad=True)
            with Tape():
                if run == "sparse":
                    indices = full_indices(x.shape[0], valid_len, layer.heads)
                    out = sparse_layer_forward(inputs, indices, layer)
                else:
                    out, _ = dense_layer_forward(inputs, layer, valid_len)
                sum_all(multiply(out, Tensor(target))).backward()
            grads.append([inputs.grad] + [p.grad for p in layer.parameters()])
    for sparse_grad, dense_grad in zip(*grads):
        if sparse_grad is None or dense_grad is None:
            assert sparse_grad is None and dense_grad is None
            continue
        scale = max(np.linalg.norm(dense_grad), 1e-12)
        assert np.linalg.norm(sparse_grad - dense_grad) / scale < 1e-3


@pytest.mark.parametrize("seed", range(100))
def test_sparse_layer_gradcheck_frozen_indices(seed):
    """A one-layer model with N=8, D=8, h=2, K=3 and fixed sampled indices

    Central differences use eps=1e-6 rather than the usual 1e-3: the feed-forward relu has
    kinks, and a 1e-3 step can straddle one and spoil the difference quotient"""
    rng = np.random.default_rng(seed)
    with default_dtype(np.float64):
        layer = SparseLayer(8, 2, rng)
    weights = rng.random((8, 8))
    alpha = AttentionMatrix(weights / weights.sum(axis=1, keepdims=True), 8)
    indices = build_head_indices([alpha], "sqinvlog", 3, 2, rng)[0]
    target = rng.standard_normal((8, 8))

    def loss(x):
        return sum_all(multiply(sparse_layer_forward(x, indices, layer), Tensor(target)))

    assert gradcheck(loss, [rng.standard_normal((8, 8))], eps=1e-6) < 1e-3


def test_dense_layer_attention_map_rows():
    layer, x, valid_len = _draw(4)
    _, attention = dense_layer_forward(Tensor(x), layer, valid_len)
    np.testing.assert_allclose(attention[:valid_len].sum(axis=1), 1.0, atol=1e-5)
    assert not attention[valid_len:].any()


def test_full_indices_shape():
    indices = full_indices(5, 3, 2)
    assert len(indices) == 2
    assert indices[0].idx.shape == (5, 3)
    assert indices[0].mask[:3].all() and not indices[0].mask[3:].any()


def _random_indices(rng: np.random.Generator, length: int, valid_len: int, k: int, heads: int):
    matrices = []
    for _ in range(heads):
        idx = np.zeros((length, k), dtype=np.int64)
        mask = np.zeros((length, k), dtype=bool)
        for row in range(valid_len):
            idx[row] = rng.choice(valid_len, size=k, replace=False)
            mask[row] = True
        matrices.append(IndexMatrix(idx, mask, valid_len))
    return matrices


@pytest.mark.parametrize("seed", range(10))
def test_slot_order_within_row_is_irrelevant(seed):
    rng = np.random.default_rng(seed)
    layer = SparseLayer(8, 2, rng)
    x = rng.standard_normal((7, 8))
    x[6:] = 0.0
    indices = _random_indices(rng, 7, 6, 3, 2)
    shuffled = []
    for index in indices:
        order = np.array([rng.permutation(index.k) for _ in range(index.size)])
        shuffled.append(
            IndexMatrix(
                np.take_along_axis(index.idx, order, axis=1),
                np.take_along_axis(index.mask, order, axis=1),
                index.valid_len,
            )
        )
    expected = sparse_layer_forward(Tensor(x), indices, layer).values
    actual = sparse_layer_forward(Tensor(x), shuffled, layer).values
    np.testing.assert_allclose(actual, expected, atol=1e-6)


def test_zero_weight_layer_normalizes_residual_twice():
    """With every projection zeroed, attention and feed-forward add nothing and the output is
    LN(LN(x))"""
    rng = np.random.default_rng(3)
    layer = SparseLayer(8, 2, rng)
    for parameter in layer.wq + layer.wk + layer.wv + [layer.wo, layer.ffn.w1, layer.ffn.w2]:
        parameter.values[...] = 0.0
    x = rng.standard_normal((5, 8))
    indices = _random_indices(rng, 5, 5, 2, 2)

    def _normalize(a):
        centered = a - a.mean(axis=1, keepdims=True)
        return centered / np.sqrt((centered**2).mean(axis=1, keepdims=True) + 1e-5)

    out = sparse_layer_forward(Tensor(x), indices, layer)
    np.testing.assert_allclose(out.values, _normalize(_normalize(x)), atol=1e-5)
