"""This module is the CLI entry point for `smart-bird`. Subcommands build a `RunSpec` from the
config file and flags, then hand off to the trainer, checkpoint and analysis modules"""
import functools
import logging
import os
from typing import Any, Dict, List, Optional, Tuple

import click
import pandas as pd

from smart_bird import __version__
from smart_bird.analysis import (
    ablation_run,
    correlation_study,
    flops_frame,
    k_sweep,
    length_sweep,
    measured_crossover,
    score_histogram,
)
from smart_bird.checkpoint import MODEL_FILE, load_model, save_model
from smart_bird.config_file import set_config_defaults
from smart_bird.exceptions import ArtifactMismatchError, ConfigError, SmartBirdError
from smart_bird.model_config import ModelConfig, RunSpec
from smart_bird.printers import PRINTERS, write_report
from smart_bird.result_collection import Phase
from smart_bird.sampler import indices_frame
from smart_bird.sketch import SketchModel
from smart_bird.textpipe import Dataset, Vocab, load_dataset, synth_task
from smart_bird.trainer import (
    SmartBird,
    default_embeddings,
    evaluate,
    sampled_indices,
    train_pipeline,
    train_sketch,
)

logger = logging.getLogger(__name__)

METRICS_FILE = "metrics.csv"
EVAL_FILE = "eval.csv"
VOCAB_FILE = "vocab.txt"
INDICES_FILE = "indices.csv"
BENCH_FLOPS_FILE = "bench_flops.csv"
BENCH_TIMING_FILE = "bench_timing.csv"
STUDY_FILES = {
    "ablate": "ablation.csv",
    "ksweep": "ksweep.csv",
    "correlate": "correlation.csv",
    "histogram": "histogram.csv",
    "lengths": "lengths.csv",
}


def report_errors(fn):
    """Echo a :class:`SmartBirdError` in red and exit with its code"""

    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except SmartBirdError as err:
            click.secho(str(err), fg="red", err=True)
            raise SystemExit(err.exit_code)

    return wrapper


def run_options(fn):
    """Options shared by every subcommand"""
    options = [
        click.help_option("-h", "--help"),
        click.option(
            "-C",
            "--config",
            type=click.Path(exists=False, dir_okay=False),
            default=None,
            help="JSON or YAML file of flat config keys used as option defaults",
            is_eager=True,
            callback=set_config_defaults,
        ),
        click.option(
            "-s",
            "--seed",
            type=int,
            default=None,
            help="Global seed. Wins over the config `seed` key and SMARTBIRD_SEED",
        ),
        click.option(
            "-o",
            "--output-dir",
            type=click.Path(file_okay=False),
            default=None,
            help="Directory receiving every artifact  [default: smart_bird_out]",
        ),
        click.option(
            "-q", "--quiet", is_flag=True, help="Hide progress bars and informational logging"
        ),
    ]
    for option in reversed(options):
        fn = option(fn)
    return fn


def build_run_spec(ctx: click.Context, seed: Optional[int], **overrides) -> RunSpec:
    """Merge config file values with flags (flags win) and validate every input path

    Raises
    ------
    ConfigError
        On unknown keys, invalid values or missing input files"""
    mapping = dict(ctx.meta.get("config_data") or {})
    mapping.update({k: v for k, v in overrides.items() if v is not None})
    spec = RunSpec.from_mapping(mapping, seed=seed)
    spec.validate_paths()
    return spec


def _configure_logging(quiet: bool) -> None:
    logging.getLogger("smart_bird").setLevel(logging.WARNING if quiet else logging.INFO)


def _metadata(spec: RunSpec, command: str, **extra) -> Dict[str, Any]:
    metadata = spec.to_dict()
    metadata.update(command=command, **extra)
    return metadata


def _output_path(spec: RunSpec, name: str) -> str:
    os.makedirs(spec.output_dir, exist_ok=True)
    return os.path.join(spec.output_dir, name)


##################################################
# Data
##################################################
def source_dataset(spec: RunSpec, cfg: ModelConfig, vocab: Optional[Vocab] = None) -> Dataset:
    """The training corpus, or the synthetic long-range task when no `train_path` is set"""
    if spec.train_path:
        return load_dataset(spec.train_path, cfg.max_len, vocab, cfg.min_freq)
    try:
        dataset = synth_task(
            cfg.data_seed,
            spec.n_examples,
            cfg.max_len,
            spec.synth_vocab_size,
            spec.pair_gap,
            spec.n_classes,
        )
    except ValueError as err:
        raise ConfigError("synthetic task: {}".format(err))
    if vocab is not None and vocab != dataset.vocab:
        raise ArtifactMismatchError("the vocabulary does not match the synthetic task's")
    return dataset


def train_test_data(spec: RunSpec) -> Tuple[Dataset, Dataset]:
    """(training + validation data, held-out test data)"""
    cfg = spec.model
    vocab = Vocab.load(spec.vocab_path) if spec.vocab_path else None
    dataset = source_dataset(spec, cfg, vocab)
    if spec.test_path:
        test_set = load_dataset(
            spec.test_path, cfg.max_len, dataset.vocab, n_classes=dataset.n_classes
        )
        return dataset, test_set
    return dataset.split(cfg.test_fraction, cfg.data_seed)


def _n_classes(model) -> int:
    if isinstance(model, SketchModel):
        return model.n_classes
    return model.network.n_classes


def eval_data(spec: RunSpec, model, vocab: Vocab) -> Dataset:
    """The test split the checkpointed model was held out from, rebuilt with its config"""
    cfg = model.cfg if hasattr(model, "cfg") else spec.model
    if spec.test_path:
        return load_dataset(spec.test_path, cfg.max_len, vocab, n_classes=_n_classes(model))
    dataset = source_dataset(spec, cfg, vocab)
    return dataset.split(cfg.test_fraction, cfg.data_seed)[1]


def index_dump(model: SmartBird, dataset: Dataset, eval_seed: int, limit: int) -> pd.DataFrame:
    """Sampled indices of the first `limit` examples, as drawn during evaluation"""
    frames = [
        indices_frame(sampled_indices(model, example, eval_seed), example.uid)
        for example in dataset.examples[:limit]
    ]
    return pd.concat(frames or [indices_frame([])], ignore_index=True)


##################################################
# Commands
##################################################
@click.group()
@click.help_option("-h", "--help")
@click.version_option(__version__, "-V", "--version")
def cli():
    """Smart Bird: sketch attention with a tiny Transformer, sample the pairs that matter, and
    attend sparsely over them"""


@cli.command()
@run_options
@click.option(
    "-m",
    "--model",
    "which",
    type=click.Choice(["smart", "dense"]),
    default="smart",
    show_default=True,
    help="Train Smart Bird (sketch, then sparse model) or the dense baseline",
)
@click.option("--train", "train_path", type=click.Path(dir_okay=False), help="Training corpus")
@click.option("--test", "test_path", type=click.Path(dir_okay=False), help="Test corpus")
@click.option("--vocab", "vocab_path", type=click.Path(dir_okay=False), help="Fixed vocabulary")
@click.option(
    "--embeddings",
    "embeddings_path",
    type=click.Path(dir_okay=False),
    help="Word vectors (`token v1 ... vD` per line)",
)
@click.pass_context
@report_errors
def train(
    ctx, config, seed, output_dir, quiet, which, train_path, test_path, vocab_path, embeddings_path
):
    """Train a model and write its checkpoints, vocabulary and per-epoch metrics"""
    _configure_logging(quiet)
    spec = build_run_spec(
        ctx,
        seed,
        output_dir=output_dir,
        train_path=train_path,
        test_path=test_path,
        vocab_path=vocab_path,
        embeddings_path=embeddings_path,
    )
    cfg = spec.model
    dataset, test_set = train_test_data(spec)
    embeddings = default_embeddings(dataset, cfg, spec.embeddings_path)
    model, metrics = train_pipeline(dataset, cfg, which, embeddings, show_progress=not quiet)
    if len(test_set):
        last = metrics.final()
        step = last.step if last else 0
        metrics += evaluate(
            model, test_set, spec.eval_seed, cfg.threads, Phase.TEST, cfg.epochs, step
        )

    dataset.vocab.save(_output_path(spec, VOCAB_FILE))
    save_model(model, spec.output_dir, dataset.vocab)
    path = write_report(
        _output_path(spec, METRICS_FILE), metrics.to_frame(), _metadata(spec, "train", model=which)
    )
    if not quiet:
        PRINTERS["text"](metrics.to_frame(), title="{} metrics".format(which)).print_to_stdout()
        logger.info("metrics written to %s", path)


@cli.command(name="eval")
@run_options
@click.option("--checkpoint", type=click.Path(dir_okay=False), help="Model checkpoint to score")
@click.option("--vocab", "vocab_path", type=click.Path(dir_okay=False), help="Vocabulary file")
@click.option("--test", "test_path", type=click.Path(dir_okay=False), help="Test corpus")
@click.option("--train", "train_path", type=click.Path(dir_okay=False), help="Training corpus")
@click.option("--eval-seed", type=int, default=None, help="Seed of the index draws")
@click.option(
    "--dump-indices",
    type=click.Path(dir_okay=False),
    default=None,
    help="Also write the sampled indices of the test examples to this CSV",
)
@click.option(
    "-frm",
    "--format",
    "report_format",
    type=click.Choice(["text", "markdown"]),
    default="text",
    show_default=True,
    help="Format of the logged summary",
)
@click.pass_context
@report_errors
def evaluate_command(
    ctx,
    config,
    seed,
    output_dir,
    quiet,
    checkpoint,
    vocab_path,
    test_path,
    train_path,
    eval_seed,
    dump_indices,
    report_format,
):
    """Score a checkpoint on its held-out test split (or `--test`). `--quiet` prints only
    the accuracy"""
    _configure_logging(quiet)
    spec = build_run_spec(
        ctx,
        seed,
        output_dir=output_dir,
        vocab_path=vocab_path,
        test_path=test_path,
        train_path=train_path,
        eval_seed=eval_seed,
    )
    checkpoint = checkpoint or os.path.join(spec.output_dir, MODEL_FILE)
    vocab = Vocab.load(spec.vocab_path or os.path.join(spec.output_dir, VOCAB_FILE))
    model = load_model(checkpoint, vocab)
    test_set = eval_data(spec, model, vocab)
    if not len(test_set):
        raise ConfigError("the test split is empty; set test_fraction > 0 or pass --test")
    threads = model.cfg.threads if hasattr(model, "cfg") else 1
    metrics = evaluate(model, test_set, spec.eval_seed, threads)
    frame = metrics.to_frame()
    write_report(
        _output_path(spec, EVAL_FILE), frame, _metadata(spec, "eval", checkpoint=checkpoint)
    )
    if dump_indices:
        if not isinstance(model, SmartBird):
            raise ConfigError("only a smart model samples indices")
        frame_indices = index_dump(model, test_set, spec.eval_seed, len(test_set))
        write_report(dump_indices, frame_indices, _metadata(spec, "eval", checkpoint=checkpoint))

    row = metrics.final()
    if quiet:
        click.echo(row.accuracy)
    else:
        PRINTERS[report_format](frame, title="evaluation").print_to_stdout()


@cli.command(name="dump-indices")
@run_options
@click.option("--checkpoint", type=click.Path(dir_okay=False), help="Smart Bird checkpoint")
@click.option("--vocab", "vocab_path", type=click.Path(dir_okay=False), help="Vocabulary file")
@click.option("--test", "test_path", type=click.Path(dir_okay=False), help="Test corpus")
@click.option("--train", "train_path", type=click.Path(dir_okay=False), help="Training corpus")
@click.option("--eval-seed", type=int, default=None, help="Seed of the index draws")
@click.option(
    "-n", "--limit", type=click.IntRange(min=1), default=8, show_default=True, help="Examples"
)
@click.pass_context
@report_errors
def dump_indices_command(
    ctx,
    config,
    seed,
    output_dir,
    quiet,
    checkpoint,
    vocab_path,
    test_path,
    train_path,
    eval_seed,
    limit,
):
    """Write the per-layer, per-head key positions a Smart Bird checkpoint samples"""
    _configure_logging(quiet)
    spec = build_run_spec(
        ctx,
        seed,
        output_dir=output_dir,
        vocab_path=vocab_path,
        test_path=test_path,
        train_path=train_path,
        eval_seed=eval_seed,
    )
    checkpoint = checkpoint or os.path.join(spec.output_dir, MODEL_FILE)
    vocab = Vocab.load(spec.vocab_path or os.path.join(spec.output_dir, VOCAB_FILE))
    model = load_model(checkpoint, vocab)
    if not isinstance(model, SmartBird):
        raise ConfigError("{} is not a smart model; it samples no indices".format(checkpoint))
    frame = index_dump(model, eval_data(spec, model, vocab), spec.eval_seed, limit)
    metadata = _metadata(spec, "dump-indices", checkpoint=checkpoint)
    path = write_report(_output_path(spec, INDICES_FILE), frame, metadata)
    logger.info("%d index rows written to %s", len(frame), path)


@cli.command()
@run_options
@click.option(
    "--flops-only", is_flag=True, help="Write the cost-model table and skip the timing grid"
)
@click.pass_context
@report_errors
def bench(ctx, config, seed, output_dir, quiet, flops_only):
    """Cost-model table and measured per-layer timings over the `bench_lengths` grid"""
    _configure_logging(quiet)
    spec = build_run_spec(ctx, seed, output_dir=output_dir)
    cfg = spec.model
    metadata = _metadata(spec, "bench")
    flops = flops_frame(cfg, spec.bench_lengths)
    write_report(_output_path(spec, BENCH_FLOPS_FILE), flops, metadata)
    if flops_only:
        return
    report = measured_crossover(
        cfg,
        spec.bench_lengths,
        spec.bench_reps,
        spec.bench_sketch_dims,
        spec.seed,
        show_progress=not quiet,
    )
    metadata.update(
        dense_slope=report.dense_slope,
        sparse_slope=report.sparse_slope,
        crossover_length=report.crossover_length,
    )
    write_report(_output_path(spec, BENCH_TIMING_FILE), report.frame, metadata)
    if not quiet:
        PRINTERS["text"](report.frame, title="timings (ms)").print_to_stdout()


@cli.command()
@run_options
@click.argument("name", type=click.Choice(sorted(STUDY_FILES)))
@click.option("--train", "train_path", type=click.Path(dir_okay=False), help="Training corpus")
@click.option(
    "--window-random",
    is_flag=True,
    help="ablate: add a window+random pattern row after the sampling strategies",
)
@click.pass_context
@report_errors
def study(ctx, config, seed, output_dir, quiet, name, train_path, window_random):
    """Run the study NAME on the training data (or the synthetic task) and write its CSV"""
    _configure_logging(quiet)
    spec = build_run_spec(ctx, seed, output_dir=output_dir, train_path=train_path)
    cfg = spec.model
    show_progress = not quiet
    metadata = _metadata(spec, "study", study=name)
    extra: List[Tuple[str, pd.DataFrame]] = []

    if name == "lengths":
        base = source_dataset(spec, cfg.replace(max_len=max(spec.study_lengths)))
        frame = length_sweep(
            base.truncated, cfg, spec.study_lengths, spec.study_seeds, show_progress
        )
    else:
        dataset = source_dataset(spec, cfg)
        if name == "ablate":
            frame = ablation_run(
                dataset, cfg, spec.strategies, spec.study_seeds, window_random, show_progress
            )
        elif name == "ksweep":
            frame = k_sweep(dataset, cfg, spec.k_values, spec.study_seeds, show_progress)
        elif name == "correlate":
            report = correlation_study(
                dataset, cfg, cfg.sketch_dim, spec.d_large, spec.study_seeds, show_progress
            )
            frame = report.per_example
            metadata["undefined"] = report.undefined
            extra.append(("correlation_summary.csv", report.summary()))
        else:
            train_set, test_set = dataset.split(cfg.test_fraction, cfg.data_seed)
            embeddings = default_embeddings(dataset, cfg, spec.embeddings_path)
            sketch, _ = train_sketch(train_set, cfg, embeddings, show_progress=show_progress)
            alphas = [a for example in test_set for a in sketch.attention(example)]
            report = score_histogram(alphas)
            frame = report.bins
            extra.append(("histogram_stats.csv", report.stats))

    path = write_report(_output_path(spec, STUDY_FILES[name]), frame, metadata)
    for filename, table in extra:
        write_report(_output_path(spec, filename), table, metadata)
    if not quiet:
        PRINTERS["text"](frame, title=name).print_to_stdout()
        logger.info("%s written to %s", name, path)
