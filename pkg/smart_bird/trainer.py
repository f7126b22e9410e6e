"""Model assembly and the two-phase training procedure: the sketch model is trained first and
frozen, then the sparse classifier trains while sampling its attention pattern from the
sketch. A dense baseline with the same width, depth, pooling and head is trained the same way"""
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from tqdm import tqdm

from smart_bird.exceptions import ArtifactMismatchError, ConfigError, DivergenceError
from smart_bird.model_config import ModelConfig
from smart_bird.result_collection import Phase, RunMetrics, classification_scores
from smart_bird.sampler import IndexMatrix, build_head_indices, window_random_heads
from smart_bird.sketch import (
    AttentionMatrix,
    SketchModel,
    attention_pool,
    positional_encoding,
    sketch_predict,
)
from smart_bird.sparse_attn import SparseLayer, dense_layer_forward, sparse_layer_forward
from smart_bird.tensor import (
    Adam,
    Module,
    Parameter,
    Tape,
    Tensor,
    add,
    clip_grad_norm,
    concat,
    cross_entropy,
    gather_rows,
    xavier_uniform,
)
from smart_bird.textpipe import Dataset, EmbeddingTable, Example

logger = logging.getLogger(__name__)

# Stream tags mixed into seeds so every consumer of a seed draws independently
_EMBEDDINGS, _SKETCH_INIT, _NETWORK_INIT, _ORDER, _SAMPLING = range(5)
_PHASE_TAGS = {Phase.SKETCH.value: 0, Phase.SMART.value: 1, Phase.DENSE.value: 2}


class TransformerClassifier(Module):
    """Full-width Transformer classifier: embedding, `layers` multi-head layers, attention
    pooling and a linear head. Layers run sparse or dense depending on the caller

    Parameters
    ----------
    table: numpy.ndarray
        V×D initial embeddings
    cfg: ModelConfig
    n_classes: Integer
    rng: numpy.random.Generator
        Initialization stream"""

    def __init__(
        self, table: np.ndarray, cfg: ModelConfig, n_classes: int, rng: np.random.Generator
    ):
        self.dim = int(table.shape[1])
        if self.dim != cfg.model_dim:
            raise ConfigError("embedding width {} != model_dim {}".format(self.dim, cfg.model_dim))
        self.vocab_size = int(table.shape[0])
        self.n_classes = n_classes
        self.positional = cfg.positional_encoding
        self.embedding = Parameter(table)
        self.layers = [
            SparseLayer(self.dim, cfg.heads, rng, cfg.dropout) for _ in range(cfg.layers)
        ]
        self.pool_projection = Parameter(xavier_uniform((self.dim, self.dim), rng))
        self.pool_vector = Parameter(xavier_uniform((self.dim, 1), rng))
        self.classifier = Parameter(xavier_uniform((self.dim, n_classes), rng))
        self.bias = Parameter(np.zeros(n_classes))

    def embed(self, example: Example) -> Tensor:
        hidden = gather_rows(self.embedding, example.token_ids)
        if self.positional:
            hidden = add(hidden, positional_encoding(example.length, self.dim))
        return hidden

    def head(self, hidden: Tensor, valid_len: int) -> Tensor:
        pooled = attention_pool(hidden, valid_len, self.pool_projection, self.pool_vector)
        return sketch_predict(pooled, self.classifier, self.bias)

    def forward_sparse(
        self,
        example: Example,
        indices: Sequence[Sequence[IndexMatrix]],
        rng: Optional[np.random.Generator] = None,
    ) -> Tensor:
        hidden = self.embed(example)
        for layer, per_head in zip(self.layers, indices):
            hidden = sparse_layer_forward(hidden, per_head, layer, rng, self.training)
        return hidden

    def forward_dense(
        self, example: Example, rng: Optional[np.random.Generator] = None
    ) -> Tuple[Tensor, List[np.ndarray]]:
        hidden, maps = self.embed(example), []
        for layer in self.layers:
            hidden, attention = dense_layer_forward(
                hidden, layer, example.attn_len, rng, self.training
            )
            maps.append(attention)
        return hidden, maps


def _example_rng(seed: int, tag: int, epoch: int, uid: int) -> np.random.Generator:
    return np.random.default_rng([seed, _SAMPLING, tag, epoch, uid])


def _split_rng(rng: Optional[np.random.Generator]):
    return (None, None) if rng is None else tuple(rng.spawn(2))


class SmartBird:
    """Frozen sketch model plus the sparse classifier whose per-layer, per-head key sets are
    sampled from the sketch's attention"""

    kind = "smart"

    def __init__(self, sketch: SketchModel, network: TransformerClassifier, cfg: ModelConfig):
        if len(sketch.layers) != len(network.layers):
            raise ConfigError(
                "sketch depth {} != sparse depth {}".format(len(sketch.layers), len(network.layers))
            )
        self.sketch = sketch
        self.network = network
        self.cfg = cfg
        self._cache: Dict[Tuple[int, bytes], List[AttentionMatrix]] = {}

    def parameters(self) -> List[Parameter]:
        return self.network.parameters()

    def train(self, mode: bool = True) -> "SmartBird":
        self.network.train(mode)
        return self

    def eval(self) -> "SmartBird":
        return self.train(False)

    def sketch_attention(self, example: Example) -> List[AttentionMatrix]:
        if not self.cfg.cache_sketch:
            return self.sketch.attention(example)
        key = (example.uid, example.token_ids.tobytes())
        if key not in self._cache:
            self._cache[key] = self.sketch.attention(example)
        return self._cache[key]

    def indices(self, example: Example, rng: np.random.Generator) -> List[List[IndexMatrix]]:
        """Per-layer, per-head index matrices for `example`, drawn from `rng`"""
        cfg = self.cfg
        if cfg.pattern == "window_random":
            return window_random_heads(
                example.length, example.attn_len, cfg.k, cfg.window, cfg.layers, cfg.heads, rng
            )
        return build_head_indices(
            self.sketch_attention(example),
            cfg.sampling_strategy,
            cfg.k,
            cfg.heads,
            rng,
            include_self=cfg.include_self,
        )

    def logits(self, example: Example, rng: np.random.Generator, training: bool = False) -> Tensor:
        sample_rng, dropout_rng = _split_rng(rng)
        indices = self.indices(example, sample_rng)
        hidden = self.network.forward_sparse(example, indices, dropout_rng if training else None)
        return self.network.head(hidden, example.attn_len)


class DenseBaseline:
    """Dense multi-head Transformer on the same architecture as the sparse classifier. Inputs
    longer than `max_len` are truncated"""

    kind = "dense"

    def __init__(self, network: TransformerClassifier, cfg: ModelConfig):
        self.network = network
        self.cfg = cfg
        self.max_len = cfg.dense_max_len or cfg.max_len

    def parameters(self) -> List[Parameter]:
        return self.network.parameters()

    def train(self, mode: bool = True) -> "DenseBaseline":
        self.network.train(mode)
        return self

    def eval(self) -> "DenseBaseline":
        return self.train(False)

    def _fit_length(self, example: Example) -> Example:
        if example.length <= self.max_len:
            return example
        return Example(
            example.token_ids[: self.max_len].copy(),
            min(example.attn_len, self.max_len),
            example.label,
            example.uid,
        )

    def logits(self, example: Example, rng: Optional[np.random.Generator] = None, training=False):
        example = self._fit_length(example)
        _, dropout_rng = _split_rng(rng)
        hidden, _ = self.network.forward_dense(example, dropout_rng if training else None)
        return self.network.head(hidden, example.attn_len)

    def attention_maps(self, example: Example) -> List[np.ndarray]:
        """Head-averaged N×N attention per layer, computed in evaluation mode"""
        return self.network.forward_dense(self._fit_length(example))[1]


class _SketchTrainable:
    """Adapter giving a :class:`SketchModel` the classifier interface used by the fit loop"""

    kind = "sketch"

    def __init__(self, model: SketchModel):
        self.model = model

    def parameters(self) -> List[Parameter]:
        return self.model.parameters()

    def train(self, mode: bool = True):
        self.model.train(mode)
        return self

    def eval(self):
        return self.train(False)

    def logits(self, example: Example, rng=None, training: bool = False) -> Tensor:
        return self.model.logits(example)


Classifier = Union[SmartBird, DenseBaseline, _SketchTrainable]


def _as_classifier(model) -> Classifier:
    return _SketchTrainable(model) if isinstance(model, SketchModel) else model


##################################################
# Evaluation
##################################################
def predict_logits(
    model, examples: Sequence[Example], eval_seed: int = 0, threads: int = 1
) -> np.ndarray:
    """Logits for every example, drawing sampled indices from `(eval_seed, uid)` streams.
    With `threads` > 1 examples are scored concurrently; results keep dataset order"""
    classifier = _as_classifier(model)
    classifier.eval()

    def _score(example: Example) -> np.ndarray:
        rng = np.random.default_rng([eval_seed, example.uid])
        return classifier.logits(example, rng, training=False).values.reshape(-1)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            rows = list(pool.map(_score, examples))
    else:
        rows = [_score(example) for example in examples]
    return np.stack(rows).astype(np.float64)


def evaluate(
    model,
    dataset: Dataset,
    eval_seed: int = 0,
    threads: int = 1,
    phase=Phase.EVAL,
    epoch: int = 0,
    step: int = 0,
) -> RunMetrics:
    """Accuracy, macro-F and mean cross-entropy of `model` on `dataset`

    Returns
    -------
    RunMetrics
        A single row labelled `phase`

    Raises
    ------
    ValueError
        If `dataset` is empty"""
    if len(dataset) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    logits = predict_logits(model, dataset.examples, eval_seed, threads)
    labels = dataset.labels
    loss = float(cross_entropy(Tensor(logits), labels).item())
    accuracy, macro_f = classification_scores(labels, np.argmax(logits, axis=1), dataset.n_classes)
    metrics = RunMetrics()
    metrics.record(phase, epoch, step, loss, accuracy, macro_f)
    return metrics


def sampled_indices(
    model: SmartBird, example: Example, eval_seed: int = 0
) -> List[List[IndexMatrix]]:
    """The index matrices :func:`predict_logits` draws for `example` under `eval_seed`"""
    sample_rng, _ = _split_rng(np.random.default_rng([eval_seed, example.uid]))
    return model.indices(example, sample_rng)


##################################################
# Training
##################################################
def _fit(
    classifier: Classifier,
    dataset: Dataset,
    cfg: ModelConfig,
    phase: Phase,
    val_set: Optional[Dataset] = None,
    show_progress: bool = False,
) -> RunMetrics:
    if len(dataset) == 0:
        raise ValueError("cannot train on an empty dataset")
    params = classifier.parameters()
    optimizer = Adam(params, lr=cfg.lr)
    tag = _PHASE_TAGS[phase.value]
    order_rng = np.random.default_rng([cfg.data_seed, _ORDER, tag])
    metrics = RunMetrics()
    step = 0

    for epoch in range(1, cfg.epochs + 1):
        classifier.train()
        order = order_rng.permutation(len(dataset))
        batches = [order[i : i + cfg.batch_size] for i in range(0, len(order), cfg.batch_size)]
        total_loss, predictions, truth, elapsed = 0.0, [], [], 0.0
        desc = "{} epoch {}".format(phase.value, epoch)
        for batch in tqdm(batches, desc=desc, disable=not show_progress):
            examples = [dataset.examples[i] for i in batch]
            labels = [e.label for e in examples]
            started = time.perf_counter()
            optimizer.zero_grad()
            with Tape():
                logits = concat(
                    [
                        classifier.logits(
                            e,
                            _example_rng(cfg.sampling_seed, tag, epoch, e.uid),
                            training=True,
                        )
                        for e in examples
                    ],
                    axis=0,
                )
                loss = cross_entropy(logits, labels)
                if not np.isfinite(loss.item()):
                    raise DivergenceError(
                        "{} training diverged at epoch {} step {}: loss is {}".format(
                            phase.value, epoch, step + 1, loss.item()
                        )
                    )
                loss.backward()
            if cfg.clip_norm > 0:
                clip_grad_norm(params, cfg.clip_norm)
            optimizer.step()
            elapsed += time.perf_counter() - started
            step += 1
            total_loss += loss.item() * len(examples)
            predictions.extend(np.argmax(logits.values, axis=1).tolist())
            truth.extend(labels)

        accuracy, macro_f = classification_scores(truth, predictions, dataset.n_classes)
        ms_per_iter = 1000.0 * elapsed / len(batches) if cfg.record_timing else None
        row = metrics.record(
            phase, epoch, step, total_loss / len(dataset), accuracy, macro_f, ms_per_iter
        )
        logger.debug("%s epoch %d: loss %.4f accuracy %.4f", phase.value, epoch, row.loss, accuracy)
        if val_set is not None and len(val_set):
            metrics += evaluate(
                classifier, val_set, cfg.sampling_seed, cfg.threads, Phase.VAL, epoch, step
            )

    classifier.eval()
    return metrics


def default_embeddings(
    dataset: Dataset, cfg: ModelConfig, vectors_path: Optional[str] = None
) -> EmbeddingTable:
    """Embedding table for `dataset.vocab`, seeded by `cfg.init_seed`. Rows come from
    `vectors_path` when given, otherwise they are Xavier-initialized"""
    rng = np.random.default_rng([cfg.init_seed, _EMBEDDINGS])
    return EmbeddingTable.build(dataset.vocab, cfg.model_dim, cfg.sketch_dim, rng, vectors_path)


def build_sketch(vocab_size: int, n_classes: int, cfg: ModelConfig, tiny_table=None) -> SketchModel:
    if tiny_table is None:
        tiny_table = np.zeros((vocab_size, cfg.sketch_dim))
    rng = np.random.default_rng([cfg.init_seed, _SKETCH_INIT])
    return SketchModel(tiny_table, cfg.layers, n_classes, cfg.max_len, rng, cfg.positional_encoding)


def build_network(
    vocab_size: int, n_classes: int, cfg: ModelConfig, table=None
) -> TransformerClassifier:
    if table is None:
        table = np.zeros((vocab_size, cfg.model_dim))
    rng = np.random.default_rng([cfg.init_seed, _NETWORK_INIT])
    return TransformerClassifier(table, cfg, n_classes, rng)


def train_sketch(
    dataset: Dataset,
    cfg: ModelConfig,
    embeddings: Optional[EmbeddingTable] = None,
    val_set: Optional[Dataset] = None,
    show_progress: bool = False,
) -> Tuple[SketchModel, RunMetrics]:
    """Phase 1: train the tiny Transformer on the task, then freeze it

    Raises
    ------
    ValueError
        If `dataset` is empty
    DivergenceError
        If the loss becomes non-finite"""
    if len(dataset) == 0:
        raise ValueError("cannot train on an empty dataset")
    embeddings = embeddings or default_embeddings(dataset, cfg)
    model = build_sketch(len(dataset.vocab), dataset.n_classes, cfg, embeddings.tiny)
    metrics = _fit(_SketchTrainable(model), dataset, cfg, Phase.SKETCH, val_set, show_progress)
    model.freeze()
    logger.info("sketch model trained for %d epochs", cfg.epochs)
    return model, metrics


def train_smartbird(
    dataset: Dataset,
    sketch: SketchModel,
    cfg: ModelConfig,
    embeddings: Optional[EmbeddingTable] = None,
    val_set: Optional[Dataset] = None,
    show_progress: bool = False,
) -> Tuple[SmartBird, RunMetrics]:
    """Phase 2: train the sparse classifier with indices sampled from the frozen `sketch`

    Raises
    ------
    ArtifactMismatchError
        If the sketch was built for a different vocabulary size"""
    if sketch.vocab_size != len(dataset.vocab):
        raise ArtifactMismatchError(
            "sketch vocabulary has {} entries, dataset has {}".format(
                sketch.vocab_size, len(dataset.vocab)
            )
        )
    if not sketch.frozen:
        sketch.freeze()
    embeddings = embeddings or default_embeddings(dataset, cfg)
    network = build_network(len(dataset.vocab), dataset.n_classes, cfg, embeddings.full)
    model = SmartBird(sketch, network, cfg)
    metrics = _fit(model, dataset, cfg, Phase.SMART, val_set, show_progress)
    logger.info("smart bird model trained for %d epochs", cfg.epochs)
    return model, metrics


def train_dense_baseline(
    dataset: Dataset,
    cfg: ModelConfig,
    embeddings: Optional[EmbeddingTable] = None,
    val_set: Optional[Dataset] = None,
    show_progress: bool = False,
) -> Tuple[DenseBaseline, RunMetrics]:
    """Train the dense Transformer baseline"""
    embeddings = embeddings or default_embeddings(dataset, cfg)
    network = build_network(len(dataset.vocab), dataset.n_classes, cfg, embeddings.full)
    model = DenseBaseline(network, cfg)
    metrics = _fit(model, dataset, cfg, Phase.DENSE, val_set, show_progress)
    logger.info("dense baseline trained for %d epochs", cfg.epochs)
    return model, metrics


def train_pipeline(
    dataset: Dataset,
    cfg: ModelConfig,
    which: str = "smart",
    embeddings: Optional[EmbeddingTable] = None,
    show_progress: bool = False,
) -> Tuple[Union[SmartBird, DenseBaseline], RunMetrics]:
    """Hold out a validation split, then run both phases (`which="smart"`) or the dense
    baseline (`which="dense"`). Metrics of all phases are returned in order"""
    train_set, val_set = dataset.split(cfg.val_fraction, cfg.data_seed)
    embeddings = embeddings or default_embeddings(dataset, cfg)
    if which == "dense":
        return train_dense_baseline(train_set, cfg, embeddings, val_set, show_progress)
    if which != "smart":
        raise ConfigError("unknown model kind {!r}; expected 'smart' or 'dense'".format(which))
    sketch, sketch_metrics = train_sketch(train_set, cfg, embeddings, None, show_progress)
    model, metrics = train_smartbird(train_set, sketch, cfg, embeddings, val_set, show_progress)
    return model, sketch_metrics + metrics
