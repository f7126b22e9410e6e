"""Tests for :mod:`smart_bird.analysis`"""
import itertools

import numpy as np
import pytest

from smart_bird.analysis import (
    ablation_run,
    correlation_study,
    flops_frame,
    flops_model,
    k_sweep,
    layer_mean_pearson,
    length_sweep,
    loglog_slope,
    measured_crossover,
    pearson,
    score_histogram,
    shuffle_rows,
)
from smart_bird.exceptions import ConfigError, UndefinedCorrelationError
from smart_bird.model_config import ModelConfig
from smart_bird.sketch import AttentionMatrix
from smart_bird.textpipe import synth_task
from smart_bird.trainer import train_sketch

TINY = ModelConfig(
    sketch_dim=2,
    model_dim=8,
    heads=2,
    k=3,
    layers=1,
    max_len=12,
    epochs=1,
    batch_size=8,
    lr=1e-2,
    test_fraction=0.25,
)


@pytest.fixture(scope="module")
def tiny_data():
    return synth_task(seed=2, n_examples=16, seq_len=12, vocab_size=12, pair_gap=3, n_classes=2)


def _softmax_alphas(seed: int, count: int, length: int):
    rng = np.random.default_rng(seed)
    alphas = []
    for _ in range(count):
        logits = 2.0 * rng.standard_normal((length, length))
        weights = np.exp(logits) / np.exp(logits).sum(axis=1, keepdims=True)
        alphas.append(AttentionMatrix(weights, length))
    return alphas


##################################################
# Cost Model
##################################################
def test_flops_dominant_terms():
    cfg = ModelConfig(sketch_dim=4, model_dim=256, heads=8, k=20, max_len=4096)
    smart = flops_model(cfg, "smart")
    assert smart.sketch_term == 67_108_864
    assert smart.sparse_term == 20_971_520
    assert smart.dominant_total == 67_108_864 + 20_971_520
    assert flops_model(cfg, "dense").dominant_total == 4096 * 4096 * 256


def test_flops_smart_cheaper_when_inequality_holds():
    """N²d + NKD < N²D implies a cheaper smart model, over a 200-point grid"""
    grid = itertools.product(
        [64, 128, 256, 512, 1024, 2048, 4096, 8192], [1, 2, 4, 8, 16], [1, 8, 20, 64, 256]
    )
    checked = 0
    for n, d, k in grid:
        cfg = ModelConfig(sketch_dim=d, model_dim=256, heads=8, k=k, max_len=n)
        smart, dense = flops_model(cfg, "smart"), flops_model(cfg, "dense")
        k_eff = min(k, n)
        holds = n * n * d + n * k_eff * 256 < n * n * 256
        assert (smart.dominant_total < dense.dominant_total) == holds
        checked += 1
    assert checked == 200


def test_flops_caps_k_and_counts_layers():
    cfg = ModelConfig(sketch_dim=2, model_dim=8, heads=2, k=100, layers=3)
    report = flops_model(cfg, "smart", length=50)
    assert report.k == 50
    assert report.components["sparse_attention"] == 3 * 2 * 50 * 50 * 8
    assert report.total == sum(report.components.values())


def test_flops_unknown_model():
    with pytest.raises(ConfigError):
        flops_model(TINY, "sparse")


def test_flops_frame_rows():
    frame = flops_frame(TINY, [16, 32])
    assert frame["model"].tolist() == ["dense", "smart", "dense", "smart"]
    assert {"dominant_total", "attention_total", "total"} <= set(frame.columns)


##################################################
# Timing Benchmark
##################################################
def test_loglog_slope():
    assert loglog_slope([1, 2, 4, 8], [3, 12, 48, 192]) == pytest.approx(2.0)


def test_measured_crossover_small_grid():
    report = measured_crossover(TINY, [8, 16], reps=1, sketch_dims=[2, 4])
    assert len(report.frame) == 4
    assert set(report.frame["sketch_dim"]) == {2, 4}
    assert np.isfinite(report.dense_slope) and np.isfinite(report.sparse_slope)
    assert report.crossover_length in (None, 8, 16)


def test_measured_crossover_requires_ascending():
    with pytest.raises(ConfigError, match="ascending"):
        measured_crossover(TINY, [16, 8], reps=1)


@pytest.mark.slow
def test_complexity_law():
    """Dense time grows quadratically in N and sparse attention linearly at fixed K"""
    cfg = ModelConfig(sketch_dim=4, model_dim=64, heads=4, k=20)
    report = measured_crossover(cfg, [128, 256, 512, 1024, 2048], reps=3)
    assert 1.7 <= report.dense_slope <= 2.3
    assert 0.8 <= report.sparse_slope <= 1.3


##################################################
# Correlation
##################################################
def test_pearson_bounds():
    a = np.random.default_rng(0).random((5, 5))
    assert pearson(a, a, 5) == pytest.approx(1.0)
    assert pearson(a, -a, 5) == pytest.approx(-1.0)


def test_pearson_uses_valid_block_only():
    a = np.random.default_rng(1).random((6, 6))
    b = a.copy()
    b[4:, :] = 0.0
    b[:, 4:] = 0.0
    assert pearson(a, b, 4) == pytest.approx(1.0)


def test_pearson_constant_input():
    with pytest.raises(UndefinedCorrelationError):
        pearson(np.full((3, 3), 1 / 3), np.random.default_rng(0).random((3, 3)), 3)


def test_pearson_needs_two_tokens():
    with pytest.raises(ValueError):
        pearson(np.ones((1, 1)), np.ones((1, 1)), 1)


@pytest.mark.parametrize("seed", range(20))
def test_pearson_is_symmetric(seed):
    rng = np.random.default_rng(seed)
    a, b = rng.random((6, 6)), rng.random((6, 6))
    assert pearson(a, b, 5) == pearson(b, a, 5)


def test_layer_mean_pearson_skips_undefined():
    a = np.random.default_rng(2).random((4, 4))
    constant = np.full((4, 4), 0.25)
    assert layer_mean_pearson([a, constant], [a, a], 4) == pytest.approx(1.0)
    assert layer_mean_pearson([constant], [a], 4) is None


def test_shuffle_rows_permutes_within_rows():
    matrix = np.zeros((5, 5))
    matrix[:3, :3] = np.random.default_rng(3).random((3, 3))
    shuffled = shuffle_rows(matrix, 3, np.random.default_rng(0))
    np.testing.assert_allclose(np.sort(shuffled, axis=1), np.sort(matrix, axis=1))
    assert not shuffled[3:].any() and not shuffled[:, 3:].any()


def test_correlation_study_tiny(tiny_data):
    report = correlation_study(tiny_data, TINY, d_small=2, d_large=8, seeds=(0,))
    assert len(report.per_example) == 4
    assert report.undefined == 0
    values = report.per_example[["small_vs_large", "large_vs_large", "shuffled"]].to_numpy()
    assert ((values >= -1.0) & (values <= 1.0)).all()
    comparisons = report.summary()["comparison"].tolist()
    assert comparisons == ["small_vs_large", "large_vs_large", "shuffled"]


def test_correlation_study_with_dense_truncation(tiny_data):
    """A truncated dense baseline config still yields full-length reference maps"""
    cfg = TINY.replace(dense_max_len=6)
    report = correlation_study(tiny_data, cfg, d_small=2, d_large=8, seeds=(0,))
    assert len(report.per_example) == 4
    assert report.per_example["small_vs_large"].between(-1.0, 1.0).all()


@pytest.mark.slow
def test_sketch_attention_tracks_large_model():
    """Trained small and large attention correlate well above the row-shuffled control"""
    data = synth_task(seed=0, n_examples=2000, seq_len=32, vocab_size=24, pair_gap=6)
    cfg = ModelConfig(
        sketch_dim=4,
        model_dim=32,
        heads=4,
        k=8,
        layers=1,
        max_len=32,
        epochs=3,
        lr=3e-3,
        batch_size=32,
        test_fraction=0.1,
    )
    report = correlation_study(data, cfg, d_small=4, d_large=32, seeds=(0,))
    assert len(report.per_example) >= 100
    assert report.mean - report.shuffled_mean >= 0.2


##################################################
# Score Distributions
##################################################
def test_score_histogram_counts_and_spread():
    alphas = _softmax_alphas(0, 3, 10)
    report = score_histogram(alphas, n_bins=8)
    for series in ("raw", "invlog", "sqinvlog"):
        assert report.bins[report.bins["series"] == series]["count"].sum() == 300
    assert report.stat("raw", "median") < report.stat("raw", "mean")
    assert report.stat("sqinvlog", "cv") > report.stat("invlog", "cv")


def test_score_histogram_empty():
    with pytest.raises(ValueError):
        score_histogram([])


def test_score_histogram_strategy_filter():
    report = score_histogram(_softmax_alphas(1, 2, 6), n_bins=4, strategies=["sqinvlog", "raw"])
    assert report.stats["series"].tolist() == ["raw", "sqinvlog"]
    assert set(report.bins["series"]) == {"raw", "sqinvlog"}


@pytest.mark.parametrize("strategies", [["topk"], ["nope"], []])
def test_score_histogram_rejects_strategies(strategies):
    with pytest.raises(ConfigError):
        score_histogram(_softmax_alphas(1, 1, 4), strategies=strategies)


@pytest.mark.slow
def test_trained_sketch_score_distribution():
    data = synth_task(seed=0, n_examples=1000, seq_len=32, vocab_size=24, pair_gap=6)
    cfg = ModelConfig(sketch_dim=4, model_dim=32, heads=4, layers=1, max_len=32, epochs=2)
    sketch, _ = train_sketch(data, cfg)
    alphas = [a for example in data.examples[:50] for a in sketch.attention(example)]
    report = score_histogram(alphas)
    assert report.stat("raw", "median") < report.stat("raw", "mean")
    assert report.stat("sqinvlog", "cv") > report.stat("invlog", "cv")


##################################################
# Training Studies
##################################################
def test_ablation_tiny(tiny_data):
    frame = ablation_run(
        tiny_data, TINY, strategies=("random", "sqinvlog"), seeds=(0,), include_window_random=True
    )
    assert frame["strategy"].tolist() == ["random", "sqinvlog", "window_random"]
    assert (frame["n_seeds"] == 1).all()
    assert frame["accuracy_mean"].between(0, 1).all()


def test_k_sweep_tiny(tiny_data):
    frame = k_sweep(tiny_data, TINY, [1, 4], seeds=(0,))
    assert frame["k"].tolist() == [1, 4]
    assert frame["flops"].iloc[0] < frame["flops"].iloc[1]


def test_k_sweep_requires_ascending(tiny_data):
    with pytest.raises(ConfigError):
        k_sweep(tiny_data, TINY, [4, 1], seeds=(0,))


def test_length_sweep_tiny(tiny_data):
    frame = length_sweep(tiny_data.truncated, TINY, [8, 12], seeds=(0,))
    assert list(zip(frame["length"], frame["model"])) == [
        (8, "dense"),
        (8, "smart"),
        (12, "dense"),
        (12, "smart"),
    ]


@pytest.mark.slow
def test_squared_inverse_log_not_worse_than_random():
    data = synth_task(seed=0, n_examples=3000, seq_len=64, vocab_size=40, pair_gap=8)
    cfg = ModelConfig(
        sketch_dim=4, model_dim=32, heads=4, k=8, max_len=64, epochs=3, lr=3e-3, batch_size=32
    )
    frame = ablation_run(data, cfg, strategies=("random", "sqinvlog"), seeds=range(5))
    means = dict(zip(frame["strategy"], frame["accuracy_mean"]))
    assert means["sqinvlog"] >= means["random"] - 0.01
