"""Tests for :mod:`smart_bird.checkpoint`"""
import os

import numpy as np
import pytest

from smart_bird.checkpoint import (
    MAGIC,
    MODEL_FILE,
    SKETCH_FILE,
    load_model,
    read_checkpoint,
    save_model,
)
from smart_bird.exceptions import ArtifactMismatchError, ConfigError
from smart_bird.model_config import ModelConfig
from smart_bird.textpipe import Vocab, synth_task
from smart_bird.trainer import DenseBaseline, SmartBird, predict_logits, train_pipeline

CFG = ModelConfig(
    sketch_dim=2,
    model_dim=8,
    heads=2,
    k=3,
    layers=1,
    max_len=12,
    epochs=1,
    batch_size=8,
    lr=1e-2,
    val_fraction=0.0,
)


@pytest.fixture(scope="module")
def data():
    return synth_task(seed=1, n_examples=16, seq_len=12, vocab_size=12, pair_gap=3, n_classes=2)


@pytest.fixture(scope="module")
def smart_model(data):
    return train_pipeline(data, CFG)[0]


def test_smart_round_trip_predictions(smart_model, data, tmpdir):
    """A reloaded model draws the same indices and produces the same logits"""
    path = save_model(smart_model, str(tmpdir), data.vocab)
    assert os.path.basename(path) == MODEL_FILE
    assert os.path.isfile(os.path.join(str(tmpdir), SKETCH_FILE))
    loaded = load_model(path, data.vocab)
    assert isinstance(loaded, SmartBird)
    assert loaded.sketch.frozen
    np.testing.assert_array_equal(
        predict_logits(loaded, data.examples, eval_seed=4),
        predict_logits(smart_model, data.examples, eval_seed=4),
    )


def test_dense_round_trip(data, tmpdir):
    model = train_pipeline(data, CFG, which="dense")[0]
    loaded = load_model(save_model(model, str(tmpdir), data.vocab), data.vocab)
    assert isinstance(loaded, DenseBaseline)
    assert loaded.cfg == model.cfg
    expected = model.network.state_dict()
    for name, values in loaded.network.state_dict().items():
        np.testing.assert_array_equal(values, expected[name], err_msg=name)


def test_header_contents(smart_model, data, tmpdir):
    header, arrays = read_checkpoint(save_model(smart_model, str(tmpdir), data.vocab))
    assert header["kind"] == "smart"
    assert header["companion"] == SKETCH_FILE
    assert header["vocab_fingerprint"] == data.vocab.fingerprint()
    assert [entry["name"] for entry in header["parameters"]] == list(arrays)


def test_vocabulary_mismatch(smart_model, data, tmpdir):
    path = save_model(smart_model, str(tmpdir), data.vocab)
    other = Vocab(list(reversed(data.vocab.itos[2:])))
    with pytest.raises(ArtifactMismatchError, match="different vocabulary"):
        load_model(path, other)


def test_bad_magic(data, tmpdir):
    path = os.path.join(str(tmpdir), "bogus.ckpt")
    with open(path, "wb") as f:
        f.write(b"NOPE" + bytes(16))
    with pytest.raises(ArtifactMismatchError, match="not a smart-bird checkpoint"):
        load_model(path, data.vocab)


def test_truncated_checkpoint(smart_model, data, tmpdir):
    path = save_model(smart_model, str(tmpdir), data.vocab)
    with open(path, "rb") as f:
        raw = f.read()
    assert raw.startswith(MAGIC)
    with open(path, "wb") as f:
        f.write(raw[:-10])
    with pytest.raises(ArtifactMismatchError, match="corrupt"):
        read_checkpoint(path)


def test_missing_checkpoint(data, tmpdir):
    with pytest.raises(ConfigError, match="not found"):
        load_model(os.path.join(str(tmpdir), "absent.ckpt"), data.vocab)


def test_missing_companion(smart_model, data, tmpdir):
    path = save_model(smart_model, str(tmpdir), data.vocab)
    os.remove(os.path.join(str(tmpdir), SKETCH_FILE))
    with pytest.raises(ConfigError):
        load_model(path, data.vocab)


def test_cannot_checkpoint_bare_objects(data, tmpdir):
    with pytest.raises(TypeError):
        save_model(object(), str(tmpdir), data.vocab)
