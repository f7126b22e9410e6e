"""This module is for the run configuration file (JSON or YAML, flat keys)"""
import os
from typing import Any, Dict

import click
import yaml

from smart_bird.model_config import RunSpec

PATH_KEYS = ("train_path", "test_path", "vocab_path", "embeddings_path", "output_dir")


def load_config(path: str) -> Dict[str, Any]:
    """Read a flat mapping of config keys. JSON is read through the YAML loader

    Raises
    ------
    ValueError
        If the file does not hold a mapping or names keys no run understands"""
    with open(path, encoding="utf-8") as f:
        config_data = yaml.safe_load(f) or {}
    if not isinstance(config_data, dict):
        raise ValueError("config file {} must contain a mapping of keys".format(path))
    unknown = sorted(set(config_data) - set(RunSpec.known_keys()))
    if unknown:
        raise ValueError("unknown config keys in {}: {}".format(path, ", ".join(unknown)))
    _resolve_paths(config_data, os.path.dirname(os.path.abspath(path)))
    return config_data


def set_config_defaults(ctx, param, value):
    """Update CLI option defaults in `ctx` to config file values

    Parameters
    ----------
    ctx: click.Context
        Click Context object
    param: click.Parameter
        Click Parameter object (assumed to be `config`)
    value: String
        Path to the configuration file

    Returns
    -------
    String
        Path to the configuration file"""
    if value is None:
        ctx.meta["config_data"] = {}
        return value
    if not os.path.isfile(value):
        raise click.BadParameter("config file not found: {}".format(value), ctx=ctx, param=param)
    try:
        config_data = load_config(value)
    except (ValueError, yaml.YAMLError) as err:
        raise click.BadParameter(str(err), ctx=ctx, param=param)
    ctx.meta["config_data"] = dict(config_data)
    ctx.meta["config_path"] = value
    ctx.default_map = dict(config_data)
    return value


def _resolve_paths(config_data: Dict[str, Any], base_dir: str) -> None:
    """Make relative path values relative to the config file's directory, like Click would
    with `click.Path(resolve_path=True)` relative to the working directory"""
    for field in PATH_KEYS:
        path = config_data.get(field)
        if isinstance(path, str) and path and not os.path.isabs(path):
            config_data[field] = os.path.realpath(os.path.join(base_dir, path))
