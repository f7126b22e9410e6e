"""Cost model, timing benchmark, attention-correlation study, score histograms and the
training-based studies (strategy ablation, K sweep, length sweep)"""
import logging
import math
import time
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from scipy.stats import pearsonr
from tqdm import tqdm

from smart_bird.exceptions import ConfigError, UndefinedCorrelationError
from smart_bird.model_config import ModelConfig
from smart_bird.result_collection import Phase
from smart_bird.sampler import (
    ALPHA_MIN,
    SamplingStrategy,
    build_head_indices,
    sampling_scores,
    window_random_heads,
)
from smart_bird.sketch import AttentionMatrix, SketchLayer
from smart_bird.sparse_attn import SparseLayer, dense_layer_forward, sparse_layer_forward
from smart_bird.tensor import Tape, Tensor, sum_all
from smart_bird.textpipe import Dataset
from smart_bird.trainer import (
    default_embeddings,
    evaluate,
    train_dense_baseline,
    train_sketch,
    train_smartbird,
)

logger = logging.getLogger(__name__)

# Multiply-accumulate constants of the full cost model: QK^T and AV are one N×N×width
# product each, Q/K/V/O projections are four N×width×width products, sampling is one
# comparison per score
MAC_CONSTANTS = {"attention": 2, "projections": 4, "sampling": 1}


##################################################
# Cost Model
##################################################
@dataclass(frozen=True)
class FlopReport:
    """Multiply-accumulate counts of one model at one length

    `sketch_term`, `sampling_term`, `sparse_term` and `dense_term` are the per-layer
    dominant terms N²d, N², NKD and N²D. `components` holds the full-constant counts over all
    layers and `total` is their sum"""

    which: str
    length: int
    sketch_dim: int
    model_dim: int
    k: int
    heads: int
    layers: int
    sketch_term: int
    sampling_term: int
    sparse_term: int
    dense_term: int
    components: Dict[str, int] = field(default_factory=dict)

    @property
    def total(self) -> int:
        return sum(self.components.values())

    @property
    def dominant_total(self) -> int:
        """Per-layer big-O terms without constants"""
        if self.which == "dense":
            return self.dense_term
        return self.sketch_term + self.sparse_term

    @property
    def attention_total(self) -> int:
        """Full-constant count restricted to attention scores and attention application"""
        keys = ("sketch_attention", "sparse_attention", "dense_attention")
        return sum(v for k, v in self.components.items() if k in keys)

    def to_row(self) -> Dict[str, int]:
        row = {
            "model": self.which,
            "length": self.length,
            "sketch_dim": self.sketch_dim,
            "model_dim": self.model_dim,
            "k": self.k,
            "heads": self.heads,
            "layers": self.layers,
            "sketch_term": self.sketch_term,
            "sampling_term": self.sampling_term,
            "sparse_term": self.sparse_term,
            "dense_term": self.dense_term,
        }
        row.update(self.components)
        row.update(
            {
                "dominant_total": self.dominant_total,
                "attention_total": self.attention_total,
                "total": self.total,
            }
        )
        return row


def flops_model(cfg: ModelConfig, which: str = "smart", length: Optional[int] = None) -> FlopReport:
    """Closed-form MAC counts at sequence length `length` (default `cfg.max_len`)

    Per layer, dense costs 2N²D + 4ND² and Smart Bird costs 2N²d + 4Nd² + N² + 2NKD + 4ND²,
    with K capped at N"""
    if which not in ("smart", "dense"):
        raise ConfigError("flops_model: which must be 'smart' or 'dense', got {!r}".format(which))
    n = int(length if length is not None else cfg.max_len)
    d, width, layers = cfg.sketch_dim, cfg.model_dim, cfg.layers
    k = min(cfg.k, n)
    attention = MAC_CONSTANTS["attention"]
    projections = MAC_CONSTANTS["projections"]
    sampling = MAC_CONSTANTS["sampling"]
    if which == "dense":
        components = {
            "dense_attention": layers * attention * n * n * width,
            "projections": layers * projections * n * width * width,
        }
    else:
        components = {
            "sketch_attention": layers * attention * n * n * d,
            "sketch_projections": layers * projections * n * d * d,
            "sampling": layers * sampling * n * n,
            "sparse_attention": layers * attention * n * k * width,
            "projections": layers * projections * n * width * width,
        }
    return FlopReport(
        which=which,
        length=n,
        sketch_dim=d,
        model_dim=width,
        k=k,
        heads=cfg.heads,
        layers=layers,
        sketch_term=n * n * d,
        sampling_term=n * n,
        sparse_term=n * k * width,
        dense_term=n * n * width,
        components=components,
    )


def flops_frame(cfg: ModelConfig, lengths: Iterable[int]) -> pd.DataFrame:
    rows = [flops_model(cfg, which, n).to_row() for n in lengths for which in ("dense", "smart")]
    return pd.DataFrame(rows)


##################################################
# Timing Benchmark
##################################################
@dataclass
class CrossoverReport:
    """Median per-layer timings over a length grid, the fitted log-log slopes, and the
    shortest length at which the smart pipeline beats the dense layer (None if never)"""

    frame: pd.DataFrame
    dense_slope: float
    sparse_slope: float
    crossover_length: Optional[int]


def _median_ms(fn: Callable[[], None], reps: int) -> float:
    timings = []
    for _ in range(reps):
        started = time.perf_counter()
        fn()
        timings.append(1000.0 * (time.perf_counter() - started))
    return float(np.median(timings))


def _forward_backward(forward: Callable[[Tensor], Tensor], x: np.ndarray) -> Callable[[], None]:
    def _run():
        inputs = Tensor(x, requires_grad=True)
        with Tape():
            sum_all(forward(inputs)).backward()

    return _run


def loglog_slope(lengths: Sequence[int], times: Sequence[float]) -> float:
    """Slope of log(time) against log(length) by least squares"""
    return float(np.polyfit(np.log(lengths), np.log(times), 1)[0])


def measured_crossover(
    cfg: ModelConfig,
    lengths: Sequence[int],
    reps: int = 3,
    sketch_dims: Optional[Sequence[int]] = None,
    seed: int = 0,
    show_progress: bool = False,
) -> CrossoverReport:
    """Time one dense layer (forward + backward) against the smart stack (sketch layer forward,
    sampling, sparse layer forward + backward) for each length, once per sketch dimension.
    A window+random sparse layer is timed alongside for reference

    Raises
    ------
    ConfigError
        If `lengths` is not ascending"""
    lengths = [int(n) for n in lengths]
    if lengths != sorted(lengths):
        raise ConfigError("benchmark lengths must be ascending")
    sketch_dims = list(sketch_dims or [cfg.sketch_dim])
    rng = np.random.default_rng(seed)
    layer = SparseLayer(cfg.model_dim, cfg.heads, rng)
    rows = []
    for n in tqdm(lengths, desc="benchmark", disable=not show_progress):
        x = rng.standard_normal((n, cfg.model_dim))
        dense_ms = _median_ms(
            _forward_backward(lambda t: dense_layer_forward(t, layer, n)[0], x), reps
        )
        pattern = window_random_heads(n, n, cfg.k, cfg.window, 1, cfg.heads, rng)[0]
        window_ms = _median_ms(
            _forward_backward(lambda t: sparse_layer_forward(t, pattern, layer), x), reps
        )
        for d in sketch_dims:
            sketch_layer = SketchLayer(d, rng)
            tiny = Tensor(rng.standard_normal((n, d)))
            alpha = [AttentionMatrix(sketch_layer(tiny)[1].values.astype(np.float64), n)]
            sketch_ms = _median_ms(lambda: sketch_layer(tiny), reps)
            sampling_ms = _median_ms(
                lambda: build_head_indices(alpha, cfg.strategy, cfg.k, cfg.heads, rng), reps
            )
            indices = build_head_indices(alpha, cfg.strategy, cfg.k, cfg.heads, rng)[0]
            sparse_ms = _median_ms(
                _forward_backward(lambda t: sparse_layer_forward(t, indices, layer), x), reps
            )
            rows.append(
                {
                    "length": n,
                    "sketch_dim": d,
                    "dense_ms": dense_ms,
                    "sketch_ms": sketch_ms,
                    "sampling_ms": sampling_ms,
                    "sparse_ms": sparse_ms,
                    "smart_ms": sketch_ms + sampling_ms + sparse_ms,
                    "window_random_ms": window_ms,
                }
            )
    frame = pd.DataFrame(rows)
    first = frame[frame["sketch_dim"] == sketch_dims[0]]
    faster = first[first["smart_ms"] < first["dense_ms"]]["length"]
    crossover = int(faster.iloc[0]) if len(faster) else None
    if len(lengths) >= 2:
        dense_slope = loglog_slope(first["length"], first["dense_ms"])
        sparse_slope = loglog_slope(first["length"], first["sparse_ms"])
    else:
        dense_slope = sparse_slope = float("nan")
    logger.info(
        "dense slope %.2f, sparse slope %.2f, crossover length %s",
        dense_slope,
        sparse_slope,
        crossover,
    )
    return CrossoverReport(frame, dense_slope, sparse_slope, crossover)


##################################################
# Correlation
##################################################
def pearson(a: np.ndarray, b: np.ndarray, valid_len: int) -> float:
    """Pearson r between the flattened leading `valid_len`×`valid_len` blocks of `a` and `b`

    Raises
    ------
    ValueError
        If `valid_len` < 2
    UndefinedCorrelationError
        If either block has zero variance"""
    if valid_len < 2:
        raise ValueError("pearson needs valid_len >= 2, got {}".format(valid_len))
    x = np.asarray(a, dtype=np.float64)[:valid_len, :valid_len].reshape(-1)
    y = np.asarray(b, dtype=np.float64)[:valid_len, :valid_len].reshape(-1)
    if np.ptp(x) == 0 or np.ptp(y) == 0:
        raise UndefinedCorrelationError("correlation undefined: an input block is constant")
    # canonical argument order so r(a, b) and r(b, a) agree bit for bit
    if x.tobytes() > y.tobytes():
        x, y = y, x
    r = float(pearsonr(x, y)[0])
    return min(1.0, max(-1.0, r))


def shuffle_rows(matrix: np.ndarray, valid_len: int, rng: np.random.Generator) -> np.ndarray:
    """Permute the valid entries of every valid row independently. Rows stay stochastic"""
    shuffled = np.array(matrix, dtype=np.float64)
    for row in range(valid_len):
        shuffled[row, :valid_len] = rng.permutation(shuffled[row, :valid_len])
    return shuffled


def layer_mean_pearson(
    maps_a: Sequence[np.ndarray], maps_b: Sequence[np.ndarray], valid_len: int
) -> Optional[float]:
    """Mean r over layers, skipping layers where r is undefined (None if all are)"""
    values = []
    for a, b in zip(maps_a, maps_b):
        try:
            values.append(pearson(a, b, valid_len))
        except UndefinedCorrelationError:
            logger.debug("skipping layer with undefined correlation (valid_len %d)", valid_len)
    return float(np.mean(values)) if values else None


@dataclass
class CorrelationReport:
    """Per-example correlations of sketch attention with a large model's head-averaged
    attention, with a second-seed control and a row-shuffled control"""

    per_example: pd.DataFrame
    undefined: int

    def _stat(self, column: str, fn) -> float:
        values = self.per_example[column].dropna()
        return float(fn(values)) if len(values) else float("nan")

    @property
    def mean(self) -> float:
        return self._stat("small_vs_large", np.mean)

    @property
    def std(self) -> float:
        return self._stat("small_vs_large", np.std)

    @property
    def seed_control_mean(self) -> float:
        return self._stat("large_vs_large", np.mean)

    @property
    def shuffled_mean(self) -> float:
        return self._stat("shuffled", np.mean)

    def summary(self) -> pd.DataFrame:
        return pd.DataFrame(
            [
                {
                    "comparison": name,
                    "mean": self._stat(column, np.mean),
                    "std": self._stat(column, np.std),
                    "n": int(self.per_example[column].notna().sum()),
                }
                for name, column in (
                    ("small_vs_large", "small_vs_large"),
                    ("large_vs_large", "large_vs_large"),
                    ("shuffled", "shuffled"),
                )
            ]
        )


def _large_config(cfg: ModelConfig, d_large: int, seed: int) -> ModelConfig:
    """The dense reference sees every valid token, so its maps cover the sketch's block"""
    return cfg.replace(
        dense_max_len=None,
        model_dim=d_large,
        heads=math.gcd(cfg.heads, d_large),
        sketch_dim=min(cfg.sketch_dim, d_large),
        init_seed=seed,
        sampling_seed=seed,
    )


def correlation_study(
    dataset: Dataset,
    cfg: ModelConfig,
    d_small: int = 4,
    d_large: int = 32,
    seeds: Sequence[int] = (0,),
    show_progress: bool = False,
) -> CorrelationReport:
    """Train, per seed, a `d_small` sketch and two `d_large` dense models (seeds `s` and
    `s + 1000`) on the training split, then correlate their attention on the test split"""
    train_set, test_set = dataset.split(cfg.test_fraction, cfg.data_seed)
    rows, undefined = [], 0
    for seed in tqdm(seeds, desc="correlate", disable=not show_progress):
        small_cfg = cfg.replace(
            sketch_dim=d_small, model_dim=max(cfg.model_dim, d_small), init_seed=seed
        )
        sketch, _ = train_sketch(train_set, small_cfg)
        large, _ = train_dense_baseline(train_set, _large_config(cfg, d_large, seed))
        control, _ = train_dense_baseline(train_set, _large_config(cfg, d_large, seed + 1000))
        shuffle_rng = np.random.default_rng([seed, 7])
        for example in test_set:
            if example.attn_len < 2:
                undefined += 1
                continue
            small_maps = [a.weights for a in sketch.attention(example)]
            large_maps = large.attention_maps(example)
            row = {
                "seed": seed,
                "uid": example.uid,
                "small_vs_large": layer_mean_pearson(small_maps, large_maps, example.attn_len),
                "large_vs_large": layer_mean_pearson(
                    large_maps, control.attention_maps(example), example.attn_len
                ),
                "shuffled": layer_mean_pearson(
                    [shuffle_rows(m, example.attn_len, shuffle_rng) for m in small_maps],
                    large_maps,
                    example.attn_len,
                ),
            }
            if row["small_vs_large"] is None:
                undefined += 1
            rows.append(row)
    scores = ["small_vs_large", "large_vs_large", "shuffled"]
    frame = pd.DataFrame(rows, columns=["seed", "uid"] + scores)
    frame = frame.astype({c: float for c in scores})
    report = CorrelationReport(frame, undefined)
    logger.info(
        "mean r small/large %.3f, large/large %.3f, shuffled %.3f",
        report.mean,
        report.seed_control_mean,
        report.shuffled_mean,
    )
    return report


##################################################
# Score Distributions
##################################################
@dataclass
class HistogramReport:
    """Log-binned counts per series (`raw`, `invlog`, `sqinvlog`) plus summary statistics"""

    bins: pd.DataFrame
    stats: pd.DataFrame

    def stat(self, series: str, column: str) -> float:
        return float(self.stats.set_index("series").loc[series, column])


def _log_histogram(values: np.ndarray, n_bins: int) -> List[Tuple[float, float, int]]:
    low, high = float(values.min()), float(values.max())
    if low == high:
        return [(low, high, int(values.size))]
    edges = np.geomspace(low, high, n_bins + 1)
    counts, edges = np.histogram(values, bins=edges)
    return [(float(edges[i]), float(edges[i + 1]), int(c)) for i, c in enumerate(counts)]


HISTOGRAM_SERIES = ("raw", "invlog", "sqinvlog")


def score_histogram(
    alphas: Sequence[AttentionMatrix],
    n_bins: int = 20,
    strategies: Optional[Sequence[str]] = None,
) -> HistogramReport:
    """Histogram the valid attention weights of a batch and the inverse-log and squared
    inverse-log scores derived from them, on log-spaced bins

    Parameters
    ----------
    alphas: Sequence[AttentionMatrix]
        Sketch attention matrices of a batch
    n_bins: Integer, default=20
    strategies: Sequence[str], or None, default=None
        Subset of `raw`, `invlog` and `sqinvlog` to report, in that order. All three if None

    Raises
    ------
    ValueError
        If `alphas` is empty
    ConfigError
        If a strategy has no histogram series"""
    if not alphas:
        raise ValueError("score_histogram needs a non-empty batch")
    wanted = HISTOGRAM_SERIES
    if strategies is not None:
        chosen = {SamplingStrategy.parse(s).value for s in strategies}
        unsupported = sorted(chosen - set(HISTOGRAM_SERIES))
        if unsupported or not chosen:
            raise ConfigError(
                "score_histogram series must be among {}, got {}".format(
                    HISTOGRAM_SERIES, list(strategies)
                )
            )
        wanted = tuple(s for s in HISTOGRAM_SERIES if s in chosen)

    def _scores(strategy: SamplingStrategy) -> np.ndarray:
        return np.concatenate(
            [sampling_scores(a, strategy)[: a.valid_len, : a.valid_len].reshape(-1) for a in alphas]
        )

    builders = {
        "raw": lambda: np.concatenate(
            [np.clip(a.valid, ALPHA_MIN, None).reshape(-1) for a in alphas]
        ),
        "invlog": lambda: _scores(SamplingStrategy.INV_LOG),
        "sqinvlog": lambda: _scores(SamplingStrategy.SQUARED_INV_LOG),
    }
    series = {name: builders[name]() for name in wanted}
    bins, stats = [], []
    for name, values in series.items():
        for low, high, count in _log_histogram(values, n_bins):
            bins.append({"series": name, "bin_low": low, "bin_high": high, "count": count})
        mean = float(values.mean())
        stats.append(
            {
                "series": name,
                "median": float(np.median(values)),
                "mean": mean,
                "std": float(values.std()),
                "cv": float(values.std() / mean) if mean > 0 else float("nan"),
            }
        )
    return HistogramReport(pd.DataFrame(bins), pd.DataFrame(stats))


##################################################
# Training Studies
##################################################
def _summarize(frame: pd.DataFrame, keys: List[str]) -> pd.DataFrame:
    def _std(values):
        return float(np.std(values))

    return (
        frame.groupby(keys, sort=False)
        .agg(
            accuracy_mean=("accuracy", "mean"),
            accuracy_std=("accuracy", _std),
            macro_f_mean=("macro_f", "mean"),
            macro_f_std=("macro_f", _std),
            ms_per_iter_mean=("ms_per_iter", "mean"),
            n_seeds=("seed", "count"),
        )
        .reset_index()
    )


def _seeded(cfg: ModelConfig, seed: int) -> ModelConfig:
    return cfg.replace(init_seed=seed, sampling_seed=seed)


def _score(classifier, metrics, test_set: Dataset, cfg: ModelConfig, **labels) -> Dict:
    final = evaluate(classifier, test_set, cfg.sampling_seed, cfg.threads, Phase.TEST).final()
    timings = [r.ms_per_iter for r in metrics if r.ms_per_iter is not None]
    row = dict(labels)
    row.update(
        {
            "accuracy": final.accuracy,
            "macro_f": final.macro_f,
            "ms_per_iter": float(np.mean(timings)) if timings else float("nan"),
        }
    )
    return row


def ablation_run(
    dataset: Dataset,
    cfg: ModelConfig,
    strategies: Sequence[str] = tuple(s.value for s in SamplingStrategy),
    seeds: Sequence[int] = (0, 1, 2, 3, 4),
    include_window_random: bool = False,
    show_progress: bool = False,
) -> pd.DataFrame:
    """Train one Smart Bird per (strategy, seed) on the training split and score it on the
    test split. The sketch of each seed is shared by all strategies

    Returns
    -------
    pandas.DataFrame
        One row per strategy (plus `window_random` if requested) with mean and std over seeds"""
    train_set, test_set = dataset.split(cfg.test_fraction, cfg.data_seed)
    embeddings = default_embeddings(dataset, cfg)
    variants = [(s, cfg.replace(strategy=s)) for s in strategies]
    if include_window_random:
        variants.append(("window_random", cfg.replace(pattern="window_random")))
    rows = []
    for seed in tqdm(seeds, desc="ablate", disable=not show_progress):
        sketch, _ = train_sketch(train_set, _seeded(cfg, seed), embeddings)
        for name, variant in variants:
            variant = _seeded(variant, seed)
            model, metrics = train_smartbird(train_set, sketch, variant, embeddings)
            rows.append(_score(model, metrics, test_set, variant, strategy=name, seed=seed))
    return _summarize(pd.DataFrame(rows), ["strategy"])


def k_sweep(
    dataset: Dataset,
    cfg: ModelConfig,
    k_values: Sequence[int],
    seeds: Sequence[int] = (0, 1, 2, 3, 4),
    show_progress: bool = False,
) -> pd.DataFrame:
    """Accuracy and macro-F against the number of sampled keys K, with the cost model's
    total for each K

    Raises
    ------
    ConfigError
        If `k_values` is not ascending"""
    k_values = [int(k) for k in k_values]
    if k_values != sorted(k_values):
        raise ConfigError("k_values must be ascending")
    train_set, test_set = dataset.split(cfg.test_fraction, cfg.data_seed)
    embeddings = default_embeddings(dataset, cfg)
    rows = []
    for seed in tqdm(seeds, desc="ksweep", disable=not show_progress):
        sketch, _ = train_sketch(train_set, _seeded(cfg, seed), embeddings)
        for k in k_values:
            variant = _seeded(cfg.replace(k=k), seed)
            model, metrics = train_smartbird(train_set, sketch, variant, embeddings)
            rows.append(_score(model, metrics, test_set, variant, k=k, seed=seed))
    frame = _summarize(pd.DataFrame(rows), ["k"])
    frame["flops"] = [flops_model(cfg.replace(k=k), "smart").total for k in frame["k"]]
    return frame


def length_sweep(
    make_dataset: Callable[[int], Dataset],
    cfg: ModelConfig,
    lengths: Sequence[int],
    seeds: Sequence[int] = (0, 1, 2, 3, 4),
    show_progress: bool = False,
) -> pd.DataFrame:
    """Accuracy of the dense baseline and of Smart Bird as the sequence length grows.
    `make_dataset(length)` supplies the data padded/truncated to each length"""
    rows = []
    for length in tqdm(list(lengths), desc="lengths", disable=not show_progress):
        dataset = make_dataset(length)
        length_cfg = cfg.replace(max_len=length, dense_max_len=None)
        train_set, test_set = dataset.split(cfg.test_fraction, cfg.data_seed)
        embeddings = default_embeddings(dataset, length_cfg)
        for seed in seeds:
            seeded = _seeded(length_cfg, seed)
            dense, dense_metrics = train_dense_baseline(train_set, seeded, embeddings)
            labels = {"length": length, "seed": seed}
            rows.append(_score(dense, dense_metrics, test_set, seeded, model="dense", **labels))
            sketch, _ = train_sketch(train_set, seeded, embeddings)
            smart, smart_metrics = train_smartbird(train_set, sketch, seeded, embeddings)
            rows.append(_score(smart, smart_metrics, test_set, seeded, model="smart", **labels))
    return _summarize(pd.DataFrame(rows), ["length", "model"])
