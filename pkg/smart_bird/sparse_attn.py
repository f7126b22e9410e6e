"""Multi-head sparse attention over gathered keys/values, and the dense layer it is checked
against. Both share :class:`SparseLayer` weights so either forward can run on one layer"""
import math
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np

from smart_bird.exceptions import ConfigError
from smart_bird.sampler import IndexMatrix
from smart_bird.tensor import (
    FeedForward,
    LayerNorm,
    Module,
    Parameter,
    Tensor,
    add,
    concat,
    dropout,
    einsum,
    gather_rows,
    matmul,
    scale,
    softmax_rows,
    xavier_uniform,
)


class SparseLayer(Module):
    """Post-norm multi-head Transformer layer of width `dim` with `heads` heads of width
    `dim / heads`, an output projection and a 2·dim feed-forward

    Parameters
    ----------
    dim: Integer
        Model width; must be divisible by `heads`
    heads: Integer
    rng: numpy.random.Generator
        Initialization stream
    dropout_rate: Float, default=0.0
        Inverted dropout on both sublayer outputs while training"""

    def __init__(self, dim: int, heads: int, rng: np.random.Generator, dropout_rate: float = 0.0):
        if heads < 1 or dim % heads:
            raise ConfigError("model width {} is not divisible by {} heads".format(dim, heads))
        self.dim = dim
        self.heads = heads
        self.head_dim = dim // heads
        self.dropout_rate = dropout_rate
        self.wq = [Parameter(xavier_uniform((dim, self.head_dim), rng)) for _ in range(heads)]
        self.wk = [Parameter(xavier_uniform((dim, self.head_dim), rng)) for _ in range(heads)]
        self.wv = [Parameter(xavier_uniform((dim, self.head_dim), rng)) for _ in range(heads)]
        self.wo = Parameter(xavier_uniform((dim, dim), rng))
        self.bo = Parameter(np.zeros(dim))
        self.ffn = FeedForward(dim, 2 * dim, rng)
        self.norm1 = LayerNorm(dim)
        self.norm2 = LayerNorm(dim)


@dataclass
class GatheredKV:
    """Per-head N×K×(D/h) keys and values, with the index matrices they were gathered by"""

    keys: List[Tensor]
    values: List[Tensor]
    indices: Sequence[IndexMatrix]


def gather_kv(x: Tensor, indices: Sequence[IndexMatrix], layer: SparseLayer) -> GatheredKV:
    """Project `x` to per-head keys and values and gather, for every query, the rows named by
    that head's index matrix. Row (i, k) of head `h` is the projection of token `idx[i][k]`

    Raises
    ------
    IndexError
        If an index is not below N"""
    keys, values = [], []
    for head, index in enumerate(indices):
        keys.append(gather_rows(matmul(x, layer.wk[head]), index.idx))
        values.append(gather_rows(matmul(x, layer.wv[head]), index.idx))
    return GatheredKV(keys, values, indices)


def sparse_attention_head(
    query: Tensor, keys: Tensor, values: Tensor, index: IndexMatrix
) -> Tensor:
    """Each query attends only its K gathered slots; inert slots are masked out, so PAD query
    rows come out zero

    Returns
    -------
    Tensor
        N×(D/h) head output"""
    logits = scale(einsum("nd,nkd->nk", query, keys), 1.0 / math.sqrt(query.shape[1]))
    weights = softmax_rows(logits, mask=index.mask)
    return einsum("nk,nkd->nd", weights, values)


def _finish_layer(
    x: Tensor,
    head_outputs: List[Tensor],
    layer: SparseLayer,
    rng: Optional[np.random.Generator],
    training: bool,
) -> Tensor:
    active = training and rng is not None
    attended = add(matmul(concat(head_outputs, axis=1), layer.wo), layer.bo)
    hidden = layer.norm1(add(x, dropout(attended, layer.dropout_rate, rng, active)))
    return layer.norm2(add(hidden, dropout(layer.ffn(hidden), layer.dropout_rate, rng, active)))


def sparse_layer_forward(
    x: Tensor,
    indices: Sequence[IndexMatrix],
    layer: SparseLayer,
    rng: Optional[np.random.Generator] = None,
    training: bool = False,
) -> Tensor:
    """One sparse layer: per-head gathered attention, concatenation, output projection,
    residual and layer norm, then feed-forward, residual and layer norm

    Raises
    ------
    ValueError
        If the number of index matrices differs from `layer.heads`"""
    if len(indices) != layer.heads:
        raise ValueError("{} index matrices for {} heads".format(len(indices), layer.heads))
    gathered = gather_kv(x, indices, layer)
    outputs = []
    for h in range(layer.heads):
        query = matmul(x, layer.wq[h])
        keys, values = gathered.keys[h], gathered.values[h]
        outputs.append(sparse_attention_head(query, keys, values, indices[h]))
    return _finish_layer(x, outputs, layer, rng, training)


def dense_attention_head(
    query: Tensor, keys: Tensor, values: Tensor, valid_len: int
) -> Tuple[Tensor, Tensor]:
    """Full attention of every valid query over every valid key

    Returns
    -------
    Tuple[Tensor, Tensor]
        N×(D/h) output and the N×N weights (zero outside the valid block)"""
    length = query.shape[0]
    mask = np.zeros((length, length), dtype=bool)
    mask[:valid_len, :valid_len] = True
    logits = scale(matmul(query, keys.T), 1.0 / math.sqrt(query.shape[1]))
    weights = softmax_rows(logits, mask=mask)
    return matmul(weights, values), weights


def dense_layer_forward(
    x: Tensor,
    layer: SparseLayer,
    valid_len: int,
    rng: Optional[np.random.Generator] = None,
    training: bool = False,
) -> Tuple[Tensor, np.ndarray]:
    """Dense counterpart of :func:`sparse_layer_forward` on the same weights

    Returns
    -------
    Tuple[Tensor, numpy.ndarray]
        N×D output and the head-averaged N×N attention weights"""
    outputs, maps = [], []
    for h in range(layer.heads):
        out, weights = dense_attention_head(
            matmul(x, layer.wq[h]), matmul(x, layer.wk[h]), matmul(x, layer.wv[h]), valid_len
        )
        outputs.append(out)
        maps.append(weights.values.astype(np.float64))
    return _finish_layer(x, outputs, layer, rng, training), np.mean(maps, axis=0)


def full_indices(length: int, valid_len: int, heads: int) -> List[IndexMatrix]:
    """Index matrices selecting every valid key for every valid query (K = valid_len)"""
    idx = np.zeros((length, valid_len), dtype=np.int64)
    mask = np.zeros((length, valid_len), dtype=bool)
    idx[:valid_len] = np.arange(valid_len)
    mask[:valid_len] = True
    return [IndexMatrix(idx.copy(), mask.copy(), valid_len) for _ in range(heads)]
