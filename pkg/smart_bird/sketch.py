"""The tiny single-head Transformer whose attention matrices guide token sampling, with its
attention-pooling classification head"""
import logging
import math
from dataclasses import dataclass
from typing import List, Optional, Tuple

import numpy as np

from smart_bird.exceptions import ShapeError
from smart_bird.tensor import (
    FeedForward,
    LayerNorm,
    Module,
    Parameter,
    Tensor,
    add,
    concat,
    gather_rows,
    matmul,
    reshape,
    scale,
    softmax_rows,
    tanh,
    xavier_uniform,
)
from smart_bird.textpipe import Example

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class AttentionMatrix:
    """N×N post-softmax weights of one sketch layer. Rows and columns at or beyond
    `valid_len` are zero"""

    weights: np.ndarray
    valid_len: int

    @property
    def size(self) -> int:
        return int(self.weights.shape[0])

    @property
    def valid(self) -> np.ndarray:
        return self.weights[: self.valid_len, : self.valid_len]


def positional_encoding(length: int, dim: int) -> np.ndarray:
    """Sinusoidal position table of shape `length`×`dim`"""
    positions = np.arange(length, dtype=np.float64)[:, None]
    rates = np.exp(-math.log(10000.0) * np.arange(0, dim, 2, dtype=np.float64) / dim)
    table = np.zeros((length, dim), dtype=np.float64)
    table[:, 0::2] = np.sin(positions * rates)
    table[:, 1::2] = np.cos(positions * rates)[:, : dim // 2]
    return table


def attention_pool(
    hidden: Tensor,
    valid_len: int,
    projection: Tensor,
    vector: Tensor,
    return_weights: bool = False,
):
    """Additive attention pooling over the first `valid_len` rows of `hidden`

    Weights are `softmax_i(v . tanh(P h_i))` and the pooled embedding is their convex
    combination of rows.

    Parameters
    ----------
    hidden: Tensor
        N×dim token representations
    valid_len: Integer
        Number of leading rows to pool; must be >= 1
    projection: Tensor
        dim×dim matrix `P`
    vector: Tensor
        dim×1 scoring vector `v`
    return_weights: Boolean, default=False
        Also return the 1×valid_len weight tensor

    Returns
    -------
    Tensor
        1×dim pooled embedding (and the weights, if requested)"""
    if valid_len < 1:
        raise ValueError("attention_pool needs valid_len >= 1")
    rows = gather_rows(hidden, np.arange(valid_len)) if valid_len < hidden.shape[0] else hidden
    scores = matmul(tanh(matmul(rows, projection)), vector)
    weights = softmax_rows(reshape(scores, (1, valid_len)))
    pooled = matmul(weights, rows)
    return (pooled, weights) if return_weights else pooled


def sketch_predict(pooled: Tensor, classifier: Tensor, bias: Tensor) -> Tensor:
    """Class logits `h W + b` (softmax is left to the loss)"""
    if pooled.ndim == 1:
        pooled = reshape(pooled, (1, pooled.shape[0]))
    if classifier.shape[0] != pooled.shape[1]:
        raise ShapeError(
            "classifier {} does not match pooled embedding {}".format(
                classifier.shape, pooled.shape
            )
        )
    return add(matmul(pooled, classifier), bias)


class SketchLayer(Module):
    """Single-head post-norm Transformer layer of width `dim` with a 2·dim feed-forward"""

    def __init__(self, dim: int, rng: np.random.Generator):
        self.dim = dim
        self.wq = Parameter(xavier_uniform((dim, dim), rng))
        self.wk = Parameter(xavier_uniform((dim, dim), rng))
        self.wv = Parameter(xavier_uniform((dim, dim), rng))
        self.ffn = FeedForward(dim, 2 * dim, rng)
        self.norm1 = LayerNorm(dim)
        self.norm2 = LayerNorm(dim)

    def __call__(self, x: Tensor) -> Tuple[Tensor, Tensor]:
        queries, keys, values = matmul(x, self.wq), matmul(x, self.wk), matmul(x, self.wv)
        weights = softmax_rows(scale(matmul(queries, keys.T), 1.0 / math.sqrt(self.dim)))
        hidden = self.norm1(add(x, matmul(weights, values)))
        return self.norm2(add(hidden, self.ffn(hidden))), weights


class SketchModel(Module):
    """Tiny Transformer classifier over PCA-projected embeddings

    Parameters
    ----------
    tiny_table: numpy.ndarray
        V×d initial embeddings; fine-tuned while the sketch trains
    n_layers: Integer
        Depth; layer `l` drives sampling for sparse layer `l`
    n_classes: Integer
    max_len: Integer
        Longest sequence accepted by :func:`sketch_forward`
    rng: numpy.random.Generator
        Initialization stream
    positional: Boolean, default=True
        Add sinusoidal position encodings to the embeddings"""

    def __init__(
        self,
        tiny_table: np.ndarray,
        n_layers: int,
        n_classes: int,
        max_len: int,
        rng: np.random.Generator,
        positional: bool = True,
    ):
        self.dim = int(tiny_table.shape[1])
        self.vocab_size = int(tiny_table.shape[0])
        self.n_classes = n_classes
        self.max_len = max_len
        self.positional = positional
        self.embedding = Parameter(tiny_table)
        self.layers = [SketchLayer(self.dim, rng) for _ in range(n_layers)]
        self.pool_projection = Parameter(xavier_uniform((self.dim, self.dim), rng))
        self.pool_vector = Parameter(xavier_uniform((self.dim, 1), rng))
        self.classifier = Parameter(xavier_uniform((self.dim, n_classes), rng))
        self.bias = Parameter(np.zeros(n_classes))

    def logits(self, example: Example, rng: Optional[np.random.Generator] = None) -> Tensor:
        hidden, _ = sketch_forward(example, self)
        pooled = attention_pool(hidden, example.attn_len, self.pool_projection, self.pool_vector)
        return sketch_predict(pooled, self.classifier, self.bias)

    def attention(self, example: Example) -> List[AttentionMatrix]:
        return sketch_forward(example, self)[1]


def sketch_forward(example: Example, model: SketchModel) -> Tuple[Tensor, List[AttentionMatrix]]:
    """Run the tiny Transformer on one example

    Only the `attn_len` real tokens are processed, which is equivalent to masking PAD keys to
    -inf: PAD rows of the outputs are zero.

    Returns
    -------
    Tuple[Tensor, List[AttentionMatrix]]
        N×d final hidden states and one attention matrix per layer

    Raises
    ------
    ShapeError
        If the example is longer than `model.max_len`"""
    length, valid = example.length, example.attn_len
    if length > model.max_len:
        raise ShapeError("sequence length {} exceeds maximum {}".format(length, model.max_len))
    hidden = gather_rows(model.embedding, example.token_ids[:valid])
    if model.positional:
        hidden = add(hidden, positional_encoding(valid, model.dim))

    attentions = []
    for layer in model.layers:
        hidden, weights = layer(hidden)
        alpha = np.zeros((length, length), dtype=np.float64)
        alpha[:valid, :valid] = weights.values
        attentions.append(AttentionMatrix(alpha, valid))

    if valid < length:
        hidden = concat([hidden, Tensor(np.zeros((length - valid, model.dim)))], axis=0)
    return hidden, attentions
