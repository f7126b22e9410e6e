"""Data classes holding every hyperparameter (`ModelConfig`) and everything a CLI run needs
(`RunSpec`)"""
import dataclasses
import os
from dataclasses import dataclass, field
from typing import Any, Dict, Mapping, Optional, Tuple

from smart_bird.exceptions import ConfigError
from smart_bird.sampler import SamplingStrategy

SEED_ENV_VAR = "SMARTBIRD_SEED"
PATTERNS = ("sampled", "window_random")
_SEED_KEYS = ("init_seed", "sampling_seed", "data_seed")


@dataclass(frozen=True)
class ModelConfig:
    """Model and training hyperparameters. Invalid combinations raise :class:`ConfigError`"""

    sketch_dim: int = 4
    model_dim: int = 256
    heads: int = 8
    k: int = 20
    layers: int = 2
    max_len: int = 512
    dense_max_len: Optional[int] = None
    min_freq: int = 3
    strategy: str = SamplingStrategy.SQUARED_INV_LOG.value
    pattern: str = "sampled"
    window: int = 3
    include_self: bool = False
    positional_encoding: bool = True
    lr: float = 1e-4
    batch_size: int = 64
    epochs: int = 2
    dropout: float = 0.2
    clip_norm: float = 1.0
    init_seed: int = 0
    sampling_seed: int = 0
    data_seed: int = 0
    cache_sketch: bool = False
    threads: int = 1
    record_timing: bool = False
    val_fraction: float = 0.1
    test_fraction: float = 0.2

    def __post_init__(self):
        checks = [
            (self.model_dim >= 1 and self.heads >= 1, "model_dim and heads must be >= 1"),
            (self.model_dim % max(self.heads, 1) == 0, "model_dim must be divisible by heads"),
            (1 <= self.sketch_dim <= self.model_dim, "sketch_dim must lie in [1, model_dim]"),
            (self.k >= 1, "k must be >= 1"),
            (self.layers >= 1, "layers must be >= 1"),
            (self.max_len >= 1, "max_len must be >= 1"),
            (self.dense_max_len is None or self.dense_max_len >= 1, "dense_max_len must be >= 1"),
            (self.min_freq >= 1, "min_freq must be >= 1"),
            (self.pattern in PATTERNS, "pattern must be one of {}".format(PATTERNS)),
            (self.window >= 0, "window must be >= 0"),
            (self.lr > 0, "lr must be > 0"),
            (self.batch_size >= 1, "batch_size must be >= 1"),
            (self.epochs >= 0, "epochs must be >= 0"),
            (0.0 <= self.dropout < 1.0, "dropout must lie in [0, 1)"),
            (self.clip_norm >= 0, "clip_norm must be >= 0"),
            (self.threads >= 1, "threads must be >= 1"),
            (0.0 <= self.val_fraction < 1.0, "val_fraction must lie in [0, 1)"),
            (0.0 <= self.test_fraction < 1.0, "test_fraction must lie in [0, 1)"),
        ]
        for ok, message in checks:
            if not ok:
                raise ConfigError(message)
        object.__setattr__(self, "strategy", SamplingStrategy.parse(self.strategy).value)

    @property
    def sampling_strategy(self) -> SamplingStrategy:
        return SamplingStrategy(self.strategy)

    @property
    def head_dim(self) -> int:
        return self.model_dim // self.heads

    def replace(self, **overrides) -> "ModelConfig":
        return dataclasses.replace(self, **overrides)

    def to_dict(self) -> Dict[str, Any]:
        return dataclasses.asdict(self)

    @classmethod
    def from_mapping(cls, mapping: Mapping[str, Any]) -> "ModelConfig":
        """Build from flat keys, rejecting any key that is not a field"""
        unknown = sorted(set(mapping) - set(cls.field_names()))
        if unknown:
            raise ConfigError("unknown config keys: {}".format(", ".join(unknown)))
        return cls(**mapping)

    @classmethod
    def field_names(cls) -> Tuple[str, ...]:
        return tuple(f.name for f in dataclasses.fields(cls))


@dataclass(frozen=True)
class RunSpec:
    """One CLI invocation: the model config plus data paths, output location, the synthetic
    task, the benchmark grid and study parameters"""

    model: ModelConfig = field(default_factory=ModelConfig)
    seed: int = 0
    train_path: Optional[str] = None
    test_path: Optional[str] = None
    vocab_path: Optional[str] = None
    embeddings_path: Optional[str] = None
    output_dir: str = "smart_bird_out"
    n_examples: int = 2000
    n_classes: int = 4
    synth_vocab_size: int = 64
    pair_gap: int = 16
    eval_seed: int = 0
    bench_lengths: Tuple[int, ...] = (128, 256, 512, 1024, 2048)
    bench_reps: int = 3
    bench_sketch_dims: Tuple[int, ...] = (4, 8)
    study_seeds: Tuple[int, ...] = (0, 1, 2, 3, 4)
    k_values: Tuple[int, ...] = (1, 4, 8, 20, 64)
    study_lengths: Tuple[int, ...] = (64, 128, 256, 512)
    strategies: Tuple[str, ...] = tuple(s.value for s in SamplingStrategy)
    d_large: int = 32

    def __post_init__(self):
        if list(self.bench_lengths) != sorted(self.bench_lengths):
            raise ConfigError("bench_lengths must be ascending")
        if list(self.k_values) != sorted(self.k_values):
            raise ConfigError("k_values must be ascending")
        if not self.study_lengths or list(self.study_lengths) != sorted(self.study_lengths):
            raise ConfigError("study_lengths must be non-empty and ascending")
        if self.n_examples < 1 or self.bench_reps < 1 or not self.study_seeds:
            raise ConfigError("n_examples, bench_reps and study_seeds must be non-empty/positive")
        for strategy in self.strategies:
            SamplingStrategy.parse(strategy)

    @property
    def input_paths(self) -> Dict[str, Optional[str]]:
        return {
            "train_path": self.train_path,
            "test_path": self.test_path,
            "vocab_path": self.vocab_path,
            "embeddings_path": self.embeddings_path,
        }

    def validate_paths(self) -> None:
        """Raise :class:`ConfigError` naming the first input path that is not a file"""
        for key, path in self.input_paths.items():
            if path is not None and not os.path.isfile(path):
                raise ConfigError("{} not found: {}".format(key, path))

    def to_dict(self) -> Dict[str, Any]:
        flat = {k: v for k, v in dataclasses.asdict(self).items() if k != "model"}
        flat.update(self.model.to_dict())
        return {k: list(v) if isinstance(v, tuple) else v for k, v in flat.items()}

    @classmethod
    def field_names(cls) -> Tuple[str, ...]:
        return tuple(f.name for f in dataclasses.fields(cls) if f.name != "model")

    @classmethod
    def known_keys(cls) -> Tuple[str, ...]:
        return cls.field_names() + ModelConfig.field_names()

    @classmethod
    def from_mapping(cls, mapping: Mapping[str, Any], seed: Optional[int] = None) -> "RunSpec":
        """Split flat config keys between `RunSpec` and `ModelConfig`

        The global seed is `seed` if given, else the `seed` key, else the `SMARTBIRD_SEED`
        environment variable, else 0. It fills `init_seed`, `sampling_seed` and `data_seed`
        unless those are set explicitly

        Raises
        ------
        ConfigError
            On unknown keys or invalid values"""
        mapping = dict(mapping or {})
        unknown = sorted(set(mapping) - set(cls.known_keys()))
        if unknown:
            raise ConfigError("unknown config keys: {}".format(", ".join(unknown)))
        resolved = resolve_seed(seed, mapping.pop("seed", None))
        model_keys = {k: mapping.pop(k) for k in ModelConfig.field_names() if k in mapping}
        for key in _SEED_KEYS:
            model_keys.setdefault(key, resolved)
        run_keys = {k: tuple(v) if isinstance(v, list) else v for k, v in mapping.items()}
        try:
            return cls(model=ModelConfig(**model_keys), seed=resolved, **run_keys)
        except TypeError as err:
            raise ConfigError(str(err))


def resolve_seed(flag: Optional[int], config_value: Optional[int] = None) -> int:
    """Apply the seed precedence: flag, then config, then `SMARTBIRD_SEED`, then 0"""
    for candidate in (flag, config_value, os.environ.get(SEED_ENV_VAR)):
        if candidate is None or candidate == "":
            continue
        try:
            return int(candidate)
        except (TypeError, ValueError):
            raise ConfigError("seed must be an integer, got {!r}".format(candidate))
    return 0
