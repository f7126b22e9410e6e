"""Corpus ingestion, vocabularies, padding, embedding tables, PCA projection to the sketch
dimension, and the synthetic long-range classification task"""
import hashlib
import logging
import os
import re
from collections import Counter
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from smart_bird.exceptions import ConfigError, EmptyVocabError
from smart_bird.tensor import xavier_uniform

logger = logging.getLogger(__name__)

PAD, UNK = 0, 1
PAD_TOKEN, UNK_TOKEN = "<pad>", "<unk>"

_PUNCTUATION = re.compile(r"[^\w\s]")


def tokenize(text: str) -> List[str]:
    """Lowercase `text`, strip punctuation and split on whitespace"""
    return _PUNCTUATION.sub(" ", text.lower()).split()


##################################################
# Vocabulary
##################################################
class Vocab:
    """Bidirectional token/id map. Ids are contiguous from 0; id 0 is PAD and id 1 is UNK

    Parameters
    ----------
    tokens: Sequence[str]
        Regular tokens in id order; they receive ids 2, 3, ...
    min_freq: Integer, default=1
        Frequency threshold the tokens were selected with"""

    def __init__(self, tokens: Sequence[str], min_freq: int = 1):
        self.itos: List[str] = [PAD_TOKEN, UNK_TOKEN] + list(tokens)
        self.stoi: Dict[str, int] = {token: i for i, token in enumerate(self.itos)}
        if len(self.stoi) != len(self.itos):
            raise ConfigError("vocabulary contains duplicate tokens")
        self.min_freq = min_freq

    def __len__(self) -> int:
        return len(self.itos)

    def __contains__(self, token: str) -> bool:
        return token in self.stoi

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocab) and self.itos == other.itos

    def id_of(self, token: str) -> int:
        return self.stoi.get(token, UNK)

    def decode(self, ids: Iterable[int]) -> List[str]:
        """Map ids back to tokens, dropping PAD"""
        return [self.itos[i] for i in ids if i != PAD]

    def fingerprint(self) -> str:
        """Stable digest of the id→token list, stored in checkpoints"""
        return hashlib.sha256("\n".join(self.itos).encode("utf-8")).hexdigest()[:16]

    def save(self, path: str) -> None:
        """Write one token per line; line number `n` (from 0) holds id `n + 2`"""
        with open(path, "w", encoding="utf-8", newline="\n") as f:
            for token in self.itos[2:]:
                f.write(token + "\n")

    @classmethod
    def load(cls, path: str) -> "Vocab":
        if not os.path.isfile(path):
            raise ConfigError("vocabulary file not found: {}".format(path))
        with open(path, encoding="utf-8") as f:
            tokens = [line.rstrip("\n") for line in f if line.strip()]
        return cls(tokens)


def build_vocab(corpus: Iterable[str], min_freq: int = 3) -> Vocab:
    """Keep every token seen at least `min_freq` times, ordered by descending frequency and
    then lexicographically

    Parameters
    ----------
    corpus: Iterable[str]
        Token stream
    min_freq: Integer, default=3

    Returns
    -------
    Vocab

    Raises
    ------
    EmptyVocabError
        If `corpus` yields no tokens"""
    if min_freq < 1:
        raise ConfigError("min_freq must be >= 1, got {}".format(min_freq))
    counts = Counter(corpus)
    if not counts:
        raise EmptyVocabError("cannot build a vocabulary from an empty corpus")
    kept = sorted((t for t, c in counts.items() if c >= min_freq), key=lambda t: (-counts[t], t))
    logger.debug("vocabulary keeps %d of %d distinct tokens", len(kept), len(counts))
    return Vocab(kept, min_freq=min_freq)


##################################################
# Examples
##################################################
@dataclass(frozen=True)
class Example:
    """One encoded, right-padded sequence. `token_ids[attn_len:]` is all PAD"""

    token_ids: np.ndarray
    attn_len: int
    label: int
    uid: int = 0

    @property
    def length(self) -> int:
        return int(self.token_ids.shape[0])


def encode(tokens: Sequence[str], vocab: Vocab, max_len: int, label: int = 0, uid: int = 0):
    """Map `tokens` to ids (unknown tokens become UNK), truncate to `max_len` and right-pad
    with PAD

    Returns
    -------
    Example

    Raises
    ------
    ValueError
        If `tokens` is empty, since every example needs at least one real token"""
    if max_len < 1:
        raise ValueError("max_len must be >= 1, got {}".format(max_len))
    if not tokens:
        raise ValueError("cannot encode an empty text: attn_len must be >= 1")
    kept = list(tokens)[:max_len]
    ids = np.full(max_len, PAD, dtype=np.int64)
    ids[: len(kept)] = [vocab.id_of(t) for t in kept]
    return Example(ids, len(kept), int(label), int(uid))


@dataclass
class Dataset:
    """Encoded examples together with the vocabulary and number of classes they refer to"""

    examples: List[Example]
    vocab: Vocab
    n_classes: int
    max_len: int = field(default=0)

    def __post_init__(self):
        if not self.max_len and self.examples:
            self.max_len = max(e.length for e in self.examples)

    def __len__(self) -> int:
        return len(self.examples)

    def __iter__(self):
        return iter(self.examples)

    @property
    def labels(self) -> np.ndarray:
        return np.array([e.label for e in self.examples], dtype=np.int64)

    def subset(self, examples: Sequence[Example]) -> "Dataset":
        return Dataset(list(examples), self.vocab, self.n_classes, self.max_len)

    def split(self, fraction: float, seed: int) -> Tuple["Dataset", "Dataset"]:
        """Shuffle with `seed` and hold out `fraction` of the examples

        Returns
        -------
        Tuple[Dataset, Dataset]
            (remaining, held out). The held-out part is empty only when `fraction` is 0"""
        if not 0.0 <= fraction < 1.0:
            raise ConfigError("split fraction must lie in [0, 1), got {}".format(fraction))
        order = np.random.default_rng(seed).permutation(len(self.examples))
        n_held = int(round(fraction * len(order)))
        if fraction > 0 and len(order) > 1:
            n_held = min(max(n_held, 1), len(order) - 1)
        held = [self.examples[i] for i in sorted(order[:n_held])]
        kept = [self.examples[i] for i in sorted(order[n_held:])]
        return self.subset(kept), self.subset(held)

    def truncated(self, max_len: int) -> "Dataset":
        """Re-truncate every example to `max_len`"""
        if max_len >= self.max_len:
            return self
        examples = [
            Example(e.token_ids[:max_len].copy(), min(e.attn_len, max_len), e.label, e.uid)
            for e in self.examples
        ]
        return Dataset(examples, self.vocab, self.n_classes, max_len)


def read_corpus(path: str) -> List[Tuple[int, List[str]]]:
    """Parse a UTF-8 corpus with one `<label><TAB><text>` example per line

    Returns
    -------
    List[Tuple[int, List[str]]]
        Label and tokenized text per non-empty line"""
    if not os.path.isfile(path):
        raise ConfigError("corpus file not found: {}".format(path))
    rows = []
    with open(path, encoding="utf-8") as f:
        for line_no, line in enumerate(f, start=1):
            if not line.strip():
                continue
            label, sep, text = line.rstrip("\n").partition("\t")
            try:
                label_id = int(label)
            except ValueError:
                label_id = -1
            if not sep or label_id < 0:
                raise ConfigError(
                    "{}:{}: expected `<label><TAB><text>` with a non-negative integer label".format(
                        path, line_no
                    )
                )
            tokens = tokenize(text)
            if not tokens:
                logger.warning("%s:%d: skipping example without tokens", path, line_no)
                continue
            rows.append((label_id, tokens))
    return rows


def load_dataset(
    path: str,
    max_len: int,
    vocab: Optional[Vocab] = None,
    min_freq: int = 3,
    n_classes: Optional[int] = None,
) -> Dataset:
    """Read and encode a corpus file, building the vocabulary from it when none is given.
    With `n_classes` given, every label must be below it"""
    rows = read_corpus(path)
    if vocab is None:
        vocab = build_vocab((t for _, tokens in rows for t in tokens), min_freq=min_freq)
    examples = [
        encode(tokens, vocab, max_len, label, uid) for uid, (label, tokens) in enumerate(rows)
    ]
    if n_classes is None:
        n_classes = max((e.label for e in examples), default=0) + 1
    elif any(e.label >= n_classes for e in examples):
        raise ConfigError("{}: labels must lie in [0, {})".format(path, n_classes))
    return Dataset(examples, vocab, n_classes, max_len)


##################################################
# Embeddings
##################################################
def load_embeddings(
    path: str, vocab: Vocab, dim: int, rng: np.random.Generator
) -> np.ndarray:
    """Import `<token> <f1> ... <fD>` vectors for the tokens of `vocab`

    Rows of tokens missing from the file are drawn from a multivariate normal with the mean and
    covariance of the imported rows. With fewer than two imported rows they fall back to
    Xavier-uniform. The PAD row is zero

    Returns
    -------
    numpy.ndarray
        V×`dim` float32 matrix"""
    if not os.path.isfile(path):
        raise ConfigError("embedding file not found: {}".format(path))
    table = np.zeros((len(vocab), dim), dtype=np.float64)
    found = np.zeros(len(vocab), dtype=bool)
    with open(path, encoding="utf-8") as f:
        for line_no, line in enumerate(f, start=1):
            parts = line.rstrip().split(" ")
            if len(parts) < 2 or parts[0] not in vocab:
                continue
            if len(parts) - 1 != dim:
                raise ConfigError(
                    "{}:{}: vector has {} values, expected {}".format(
                        path, line_no, len(parts) - 1, dim
                    )
                )
            row = vocab.stoi[parts[0]]
            table[row] = [float(x) for x in parts[1:]]
            found[row] = True

    missing = ~found
    missing[PAD] = False
    n_found = int(found.sum())
    if missing.any():
        if n_found >= 2:
            imported = table[found]
            table[missing] = rng.multivariate_normal(
                imported.mean(axis=0), np.cov(imported, rowvar=False), size=int(missing.sum())
            )
        else:
            table[missing] = xavier_uniform((int(missing.sum()), dim), rng)
    logger.info("imported %d of %d embedding rows from %s", n_found, len(vocab), path)
    table[PAD] = 0.0
    return table.astype(np.float32)


def pca_project(
    table: np.ndarray,
    d: int,
    pad_id: Optional[int] = PAD,
    max_iter: int = 200,
    tol: float = 1e-8,
) -> np.ndarray:
    """Project the rows of `table` onto its top-`d` principal components

    Columns are centered, and the leading eigenvectors of the D×D covariance are found by
    orthogonal (block power) iteration with a Rayleigh-Ritz rotation, stopping after `max_iter`
    rounds or when the eigen-residual falls below `tol`. Each component's sign is fixed so its
    largest-magnitude entry is positive.

    Parameters
    ----------
    table: numpy.ndarray
        V×D matrix, V >= 2
    d: Integer
        Output dimension, 1 <= d <= D
    pad_id: Integer (optional), default=0
        Row re-zeroed after projection. None leaves every row as projected

    Returns
    -------
    numpy.ndarray
        V×d float64 matrix, columns ordered by decreasing variance"""
    table = np.asarray(table, dtype=np.float64)
    rows, width = table.shape
    if not 1 <= d <= width:
        raise ValueError("PCA dimension must lie in [1, {}], got {}".format(width, d))
    if rows < 2:
        raise ValueError("PCA needs at least 2 rows, got {}".format(rows))

    centered = table - table.mean(axis=0)
    cov = centered.T @ centered / rows
    scale = max(np.linalg.norm(cov), 1e-300)

    basis, _ = np.linalg.qr(np.random.default_rng(0).standard_normal((width, d)))
    for iteration in range(max_iter):
        basis, _ = np.linalg.qr(cov @ basis)
        ritz_values, ritz_vectors = np.linalg.eigh(basis.T @ cov @ basis)
        order = np.argsort(ritz_values)[::-1]
        ritz_values, basis = ritz_values[order], basis @ ritz_vectors[:, order]
        residual = np.linalg.norm(cov @ basis - basis * ritz_values) / scale
        if residual < tol:
            break
    logger.debug("PCA stopped after %d iterations (residual %.3g)", iteration + 1, residual)

    pivots = np.argmax(np.abs(basis), axis=0)
    basis = basis * np.sign(basis[pivots, np.arange(d)])
    projected = centered @ basis
    if pad_id is not None:
        projected[pad_id] = 0.0
    return projected


@dataclass(frozen=True)
class EmbeddingTable:
    """Row-aligned V×D table and its V×d PCA projection. The PAD row is zero in both"""

    full: np.ndarray
    tiny: np.ndarray

    @classmethod
    def build(
        cls,
        vocab: Vocab,
        dim: int,
        tiny_dim: int,
        rng: np.random.Generator,
        vectors_path: Optional[str] = None,
    ) -> "EmbeddingTable":
        if vectors_path:
            full = load_embeddings(vectors_path, vocab, dim, rng)
        else:
            full = xavier_uniform((len(vocab), dim), rng).astype(np.float32)
            full[PAD] = 0.0
        tiny = pca_project(full, tiny_dim, pad_id=PAD).astype(np.float32)
        return cls(full, tiny)


##################################################
# Synthetic Task
##################################################
def synth_vocab(vocab_size: int, n_classes: int) -> Vocab:
    """Token names of the synthetic task: first-signal alphabet `a*`, second-signal alphabet
    `b*` (one token per class each), then noise tokens `w*` up to `vocab_size` ids"""
    n_noise = vocab_size - 2 - 2 * n_classes
    tokens = (
        ["a{}".format(i) for i in range(n_classes)]
        + ["b{}".format(i) for i in range(n_classes)]
        + ["w{}".format(i) for i in range(n_noise)]
    )
    return Vocab(tokens)


def synth_task(
    seed: int,
    n_examples: int,
    seq_len: int,
    vocab_size: int,
    pair_gap: int,
    n_classes: int = 4,
) -> Dataset:
    """Generate a classification task that can only be solved by relating two distant tokens

    Each sequence is uniform noise with one first-alphabet token `a_i` planted before one
    second-alphabet token `b_j`, at least `pair_gap` positions apart. The label is
    `(i + j) mod n_classes`, which is independent of either token alone, so a bag-of-words
    model stays at chance. Sequence lengths are uniform in
    `[max(pair_gap + 1, seq_len // 2), seq_len]`.

    Returns
    -------
    Dataset
        Examples padded to `seq_len`, uids 0..n_examples-1

    Raises
    ------
    ValueError
        If `vocab_size` < 4, `n_classes` < 2, the vocabulary has no room for noise tokens
        or `pair_gap` lies outside [1, `seq_len`)"""
    if vocab_size < 4:
        raise ValueError("vocab_size must be >= 4, got {}".format(vocab_size))
    if n_classes < 2:
        raise ValueError("n_classes must be >= 2, got {}".format(n_classes))
    if vocab_size < 3 + 2 * n_classes:
        raise ValueError(
            "vocab_size {} leaves no noise tokens for {} classes (need >= {})".format(
                vocab_size, n_classes, 3 + 2 * n_classes
            )
        )
    if not 1 <= pair_gap < seq_len:
        raise ValueError(
            "pair_gap must lie in [1, seq_len), got {} for {}".format(pair_gap, seq_len)
        )

    vocab = synth_vocab(vocab_size, n_classes)
    first, second, noise = 2, 2 + n_classes, 2 + 2 * n_classes
    rng = np.random.default_rng(seed)
    shortest = max(pair_gap + 1, seq_len // 2)
    examples = []
    for uid in range(n_examples):
        length = int(rng.integers(shortest, seq_len + 1))
        ids = np.full(seq_len, PAD, dtype=np.int64)
        ids[:length] = rng.integers(noise, vocab_size, size=length)
        a, b = (int(v) for v in rng.integers(0, n_classes, size=2))
        left = int(rng.integers(0, length - pair_gap))
        right = int(rng.integers(left + pair_gap, length))
        ids[left], ids[right] = first + a, second + b
        examples.append(Example(ids, length, (a + b) % n_classes, uid))
    return Dataset(examples, vocab, n_classes, seq_len)
