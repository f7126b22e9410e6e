"""Smart Bird: learnable sparse attention sampled from a tiny sketch Transformer"""
##################################################
# Set __all__
##################################################
from .exceptions import (
    ArtifactMismatchError,
    ConfigError,
    DivergenceError,
    EmptyVocabError,
    ShapeError,
    SmartBirdError,
    UndefinedCorrelationError,
)
from .model_config import ModelConfig, RunSpec
from .result_collection import RunMetrics
from .sampler import IndexMatrix, SamplingStrategy, build_head_indices, sampling_scores
from .sketch import AttentionMatrix, SketchModel, sketch_forward
from .sparse_attn import SparseLayer, sparse_layer_forward
from .textpipe import Dataset, Example, Vocab, build_vocab, encode, synth_task
from .trainer import (
    DenseBaseline,
    SmartBird,
    evaluate,
    train_dense_baseline,
    train_pipeline,
    train_sketch,
    train_smartbird,
)

__version__ = "0.1.0"

__all__ = [
    "ArtifactMismatchError",
    "AttentionMatrix",
    "ConfigError",
    "Dataset",
    "DenseBaseline",
    "DivergenceError",
    "EmptyVocabError",
    "Example",
    "IndexMatrix",
    "ModelConfig",
    "RunMetrics",
    "RunSpec",
    "SamplingStrategy",
    "ShapeError",
    "SketchModel",
    "SmartBird",
    "SmartBirdError",
    "SparseLayer",
    "UndefinedCorrelationError",
    "Vocab",
    "build_head_indices",
    "build_vocab",
    "encode",
    "evaluate",
    "sampling_scores",
    "sketch_forward",
    "sparse_layer_forward",
    "synth_task",
    "train_dense_baseline",
    "train_pipeline",
    "train_sketch",
    "train_smartbird",
]
