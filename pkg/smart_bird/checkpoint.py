"""Checkpoint files: `SBCK` magic, a little-endian u32 header length, a UTF-8 JSON header, then
one tensor dump per parameter in header order. A Smart Bird checkpoint names its sketch
model as a companion file in the same directory"""
import json
import logging
import os
from typing import Any, Dict, Optional, Tuple

import numpy as np

from smart_bird.exceptions import ArtifactMismatchError, ConfigError
from smart_bird.model_config import ModelConfig
from smart_bird.sketch import SketchModel
from smart_bird.tensor import Module, dump_tensor, load_tensor
from smart_bird.textpipe import Vocab
from smart_bird.trainer import DenseBaseline, SmartBird, build_network, build_sketch

logger = logging.getLogger(__name__)

MAGIC = b"SBCK"
MODEL_FILE = "model.ckpt"
SKETCH_FILE = "sketch.ckpt"


def save_checkpoint(
    path: str,
    module: Module,
    kind: str,
    cfg: ModelConfig,
    vocab: Vocab,
    n_classes: int,
    companion: Optional[str] = None,
) -> str:
    """Write the parameters of `module` with a header describing how to rebuild it"""
    params = list(module.named_parameters())
    header = {
        "kind": kind,
        "parameters": [{"name": name, "shape": list(p.shape)} for name, p in params],
        "config": cfg.to_dict(),
        "vocab_size": len(vocab),
        "vocab_fingerprint": vocab.fingerprint(),
        "n_classes": n_classes,
        "companion": companion,
    }
    encoded = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(np.array([len(encoded)], dtype="<u4").tobytes())
        f.write(encoded)
        for _, param in params:
            dump_tensor(param, f)
    logger.debug("wrote %s checkpoint with %d tensors to %s", kind, len(params), path)
    return path


def read_checkpoint(path: str) -> Tuple[Dict[str, Any], Dict[str, np.ndarray]]:
    """Parse a checkpoint into its header and a name → array mapping

    Raises
    ------
    ConfigError
        If `path` does not exist
    ArtifactMismatchError
        If the file is not a checkpoint or its tensors disagree with the header"""
    if not os.path.isfile(path):
        raise ConfigError("checkpoint not found: {}".format(path))
    with open(path, "rb") as f:
        if f.read(4) != MAGIC:
            raise ArtifactMismatchError("{} is not a smart-bird checkpoint".format(path))
        try:
            (length,) = np.frombuffer(f.read(4), dtype="<u4")
            header = json.loads(f.read(int(length)).decode("utf-8"))
            arrays = {}
            for entry in header["parameters"]:
                array = load_tensor(f)
                if list(array.shape) != list(entry["shape"]):
                    raise ArtifactMismatchError(
                        "{}: tensor {} has shape {}, header says {}".format(
                            path, entry["name"], array.shape, entry["shape"]
                        )
                    )
                arrays[entry["name"]] = array
        except (ValueError, KeyError) as err:
            raise ArtifactMismatchError("{} is corrupt: {}".format(path, err))
    return header, arrays


def _check_vocab(header: Dict[str, Any], vocab: Vocab, path: str) -> None:
    if header["vocab_size"] != len(vocab) or header["vocab_fingerprint"] != vocab.fingerprint():
        raise ArtifactMismatchError(
            "{} was trained with a different vocabulary ({} tokens, fingerprint {}) than the "
            "one supplied ({} tokens, fingerprint {})".format(
                path,
                header["vocab_size"],
                header["vocab_fingerprint"],
                len(vocab),
                vocab.fingerprint(),
            )
        )


def save_model(model, directory: str, vocab: Vocab) -> str:
    """Write `model` (Smart Bird, dense baseline or bare sketch) under `directory`

    Returns
    -------
    String
        Path of the main checkpoint"""
    os.makedirs(directory, exist_ok=True)
    target = os.path.join(directory, MODEL_FILE)
    if isinstance(model, SmartBird):
        n_classes = model.network.n_classes
        sketch_path = os.path.join(directory, SKETCH_FILE)
        save_checkpoint(sketch_path, model.sketch, "sketch", model.cfg, vocab, n_classes)
        return save_checkpoint(
            target, model.network, "smart", model.cfg, vocab, n_classes, companion=SKETCH_FILE
        )
    if isinstance(model, DenseBaseline):
        n_classes = model.network.n_classes
        return save_checkpoint(target, model.network, "dense", model.cfg, vocab, n_classes)
    raise TypeError("cannot checkpoint {}".format(type(model).__name__))


def load_sketch(path: str, vocab: Vocab) -> SketchModel:
    header, arrays = read_checkpoint(path)
    _check_vocab(header, vocab, path)
    if header["kind"] != "sketch":
        raise ArtifactMismatchError(
            "{} holds a {} model, not a sketch".format(path, header["kind"])
        )
    cfg = ModelConfig.from_mapping(header["config"])
    sketch = build_sketch(len(vocab), header["n_classes"], cfg)
    sketch.load_state_dict(arrays)
    return sketch.freeze()


def load_model(path: str, vocab: Vocab):
    """Rebuild the model stored at `path` (and its companion sketch, if any)

    Raises
    ------
    ArtifactMismatchError
        If the vocabulary fingerprint or parameter layout does not match"""
    header, arrays = read_checkpoint(path)
    _check_vocab(header, vocab, path)
    cfg = ModelConfig.from_mapping(header["config"])
    kind, n_classes = header["kind"], header["n_classes"]
    if kind == "sketch":
        return load_sketch(path, vocab)
    network = build_network(len(vocab), n_classes, cfg)
    network.load_state_dict(arrays)
    network.eval()
    if kind == "dense":
        return DenseBaseline(network, cfg)
    if kind == "smart":
        if not header.get("companion"):
            raise ArtifactMismatchError("{} has no companion sketch checkpoint".format(path))
        sketch = load_sketch(os.path.join(os.path.dirname(path), header["companion"]), vocab)
        return SmartBird(sketch, network, cfg)
    raise ArtifactMismatchError("{} holds an unknown model kind {!r}".format(path, kind))
