"""Attentive token sampling: sketch attention weights become sampling ceilings, uniform scores
are drawn under those ceilings, and each query keeps its top-K keys, independently per head"""
import enum
import logging
from dataclasses import dataclass
from typing import List, Sequence

import numpy as np
import pandas as pd

from smart_bird.exceptions import ConfigError
from smart_bird.sketch import AttentionMatrix

logger = logging.getLogger(__name__)

ALPHA_MIN = 1e-12
ALPHA_MAX = 1.0 - 1e-6


class SamplingStrategy(str, enum.Enum):
    """How sampling ceilings are derived from attention weights"""

    RANDOM = "random"
    TOP_K = "topk"
    RAW_WEIGHT = "raw"
    INV_LOG = "invlog"
    SQUARED_INV_LOG = "sqinvlog"

    @classmethod
    def parse(cls, value) -> "SamplingStrategy":
        try:
            return cls(value)
        except ValueError:
            raise ConfigError(
                "unknown sampling strategy {!r}; expected one of {}".format(
                    value, [s.value for s in cls]
                )
            )


@dataclass(frozen=True)
class ScoreMatrix:
    """Sampling ceilings `p` and the scores `s` drawn under them, both N×N"""

    p: np.ndarray
    s: np.ndarray


@dataclass(frozen=True)
class IndexMatrix:
    """Key positions attended by each query of one head

    `idx` is N×K_eff with K_eff = min(K, valid_len). Rows of valid queries hold distinct
    positions below `valid_len`; PAD query rows hold index 0 with `mask` False"""

    idx: np.ndarray
    mask: np.ndarray
    valid_len: int

    @property
    def k(self) -> int:
        return int(self.idx.shape[1])

    @property
    def size(self) -> int:
        return int(self.idx.shape[0])

    def selected(self, query: int) -> np.ndarray:
        return self.idx[query][self.mask[query]]

    def to_binary(self) -> np.ndarray:
        """The equivalent N×N 0/1 sparse-attention matrix"""
        binary = np.zeros((self.size, self.size), dtype=np.int8)
        rows = np.repeat(np.arange(self.size), self.k)
        active = self.mask.reshape(-1)
        binary[rows[active], self.idx.reshape(-1)[active]] = 1
        return binary


def sampling_scores(alpha: AttentionMatrix, strategy) -> np.ndarray:
    """Sampling ceilings `p` for one attention matrix

    Weights are clamped to `[1e-12, 1 - 1e-6]` first. Squared inverse log gives
    `p = (1 / ln a)^2`, inverse log `p = -1 / ln a`, raw weight and top-K give `p = a`, and
    random gives `p = 1`. PAD rows and columns get `p = 0`

    Returns
    -------
    numpy.ndarray
        N×N float64 ceilings"""
    strategy = SamplingStrategy.parse(strategy)
    valid = alpha.valid_len
    clamped = np.clip(alpha.valid.astype(np.float64), ALPHA_MIN, ALPHA_MAX)
    if strategy is SamplingStrategy.SQUARED_INV_LOG:
        ceilings = (1.0 / np.log(clamped)) ** 2
    elif strategy is SamplingStrategy.INV_LOG:
        ceilings = -1.0 / np.log(clamped)
    elif strategy is SamplingStrategy.RANDOM:
        ceilings = np.ones_like(clamped)
    else:
        ceilings = clamped
    p = np.zeros(alpha.weights.shape, dtype=np.float64)
    p[:valid, :valid] = ceilings
    return p


def draw_scores(p: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Scores `s = p * u` with `u ~ Uniform[0, 1)` drawn elementwise from `rng`"""
    return p * rng.random(p.shape)


def topk_rows(s: np.ndarray, k: int, valid_len: int, include_self: bool = False) -> IndexMatrix:
    """Per valid query row, the K_eff = min(`k`, `valid_len`) valid columns with the largest
    scores, ties going to the smaller column

    Parameters
    ----------
    s: numpy.ndarray
        N×N scores
    k: Integer
        Keys per query, >= 1
    valid_len: Integer
        Number of real tokens
    include_self: Boolean, default=False
        Put each query's own position in slot 0 and fill the rest by score

    Returns
    -------
    IndexMatrix"""
    if k < 1:
        raise ValueError("k must be >= 1, got {}".format(k))
    length = s.shape[0]
    k_eff = min(k, valid_len)
    scores = -np.asarray(s[:valid_len, :valid_len], dtype=np.float64)
    if include_self:
        np.fill_diagonal(scores, -np.inf)
    idx = np.zeros((length, k_eff), dtype=np.int64)
    mask = np.zeros((length, k_eff), dtype=bool)
    idx[:valid_len] = np.argsort(scores, axis=1, kind="stable")[:, :k_eff]
    mask[:valid_len] = True
    return IndexMatrix(idx, mask, valid_len)


def build_head_indices(
    alphas: Sequence[AttentionMatrix],
    strategy,
    k: int,
    heads: int,
    rng: np.random.Generator,
    include_self: bool = False,
) -> List[List[IndexMatrix]]:
    """Sample one index matrix per (layer, head)

    Each (layer, head) pair draws from its own child stream spawned from `rng`, so heads
    sample independently. Top-K selects on the raw weights and is identical across heads

    Returns
    -------
    List[List[IndexMatrix]]
        `heads` matrices for each layer of `alphas`"""
    strategy = SamplingStrategy.parse(strategy)
    if heads < 1:
        raise ValueError("heads must be >= 1, got {}".format(heads))
    streams = rng.spawn(len(alphas) * heads)
    indices = []
    for layer, alpha in enumerate(alphas):
        p = sampling_scores(alpha, strategy)
        per_head = []
        for head in range(heads):
            if strategy is SamplingStrategy.TOP_K:
                s = alpha.weights
            else:
                s = draw_scores(p, streams[layer * heads + head])
            per_head.append(topk_rows(s, k, alpha.valid_len, include_self=include_self))
        indices.append(per_head)
    return indices


def window_random_indices(
    length: int,
    valid_len: int,
    k: int,
    window: int,
    rng: np.random.Generator,
) -> IndexMatrix:
    """Sliding-window plus random pattern for one head: each query keeps the `window`
    neighbours on each side (nearest first, itself included) and tops up with random
    positions until K_eff keys are chosen"""
    k_eff = min(k, valid_len)
    idx = np.zeros((length, k_eff), dtype=np.int64)
    mask = np.zeros((length, k_eff), dtype=bool)
    positions = np.arange(valid_len)
    for query in range(valid_len):
        near = positions[np.abs(positions - query) <= window]
        near = near[np.lexsort((near, np.abs(near - query)))][:k_eff]
        rest = np.setdiff1d(positions, near, assume_unique=True)
        extra = rng.choice(rest, size=k_eff - near.size, replace=False)
        idx[query] = np.concatenate([near, extra])
        mask[query] = True
    return IndexMatrix(idx, mask, valid_len)


def window_random_heads(
    length: int,
    valid_len: int,
    k: int,
    window: int,
    n_layers: int,
    heads: int,
    rng: np.random.Generator,
) -> List[List[IndexMatrix]]:
    streams = rng.spawn(n_layers * heads)
    return [
        [
            window_random_indices(length, valid_len, k, window, streams[layer * heads + head])
            for head in range(heads)
        ]
        for layer in range(n_layers)
    ]


def indices_frame(indices: Sequence[Sequence[IndexMatrix]], example_uid: int = 0) -> pd.DataFrame:
    """Tabulate sampled indices as `example,layer,head,query,selected` rows, one per valid
    query, with the selected key positions space-separated"""
    rows = []
    for layer, per_head in enumerate(indices):
        for head, matrix in enumerate(per_head):
            for query in range(matrix.valid_len):
                rows.append(
                    {
                        "example": example_uid,
                        "layer": layer,
                        "head": head,
                        "query": query,
                        "selected": " ".join(str(i) for i in matrix.selected(query)),
                    }
                )
    return pd.DataFrame(rows, columns=["example", "layer", "head", "query", "selected"])
