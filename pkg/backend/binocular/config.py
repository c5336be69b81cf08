"""
Run configuration documents: YAML files merged over defaults, dotted-path
overrides, validation into a RunConfig, canonical snapshots and their hash.
"""

import copy
import hashlib
import logging
from pathlib import Path
from typing import Any, Iterable, Optional, Union

import yaml

from .domain import RunConfig
from .exceptions import ConfigurationError
from .serializers import RunConfigSerializer

logger = logging.getLogger(__name__)

DEFAULT_DOCUMENT: dict[str, Any] = {
    "name": "bml",
    "source": "synthetic://classes=8,per=60,size=32,seed=7",
    "manifest": None,
    "output_dir": None,
    "seed": 0,
    "mode": "bml",
    "model": {
        "block_channels": [64, 160, 320, 640],
        "shared_depth": 3,
        "input_size": 84,
        "desk_scale": False,
        "dropblock_enabled": False,
        "dropblock_size": 5,
        "drop_rate": 0.1,
    },
    "train": {
        "epochs": 100,
        "lr_schedule": [[0, 0.1], [50, 0.006], [70, 0.00012]],
        "momentum": 0.9,
        "weight_decay": 0.0005,
        "nesterov": False,
        "episodes_per_epoch": None,
        "augment": True,
        "save_every": 0,
        "train_spec": {"n_way": 15, "k_shot": 1, "q_query": 6},
        "val_spec": {"n_way": 5, "k_shot": 5, "q_query": 15},
        "val_episodes": 200,
    },
    "losses": {
        "weights": {"alpha": 4.0, "beta": 2.0, "gamma": 1.0},
        "elastic": {"enabled": True, "alpha1": 5.5, "alpha2": 0.1},
        "squared_distance": True,
        "mutual_temperature": 1.0,
    },
    "evaluation": {
        "specs": [
            {"n_way": 5, "k_shot": 1, "q_query": 15},
            {"n_way": 5, "k_shot": 5, "q_query": 15},
        ],
        "n_episodes": 2000,
        "fusion": "sum",
        "degradations": [],
    },
}

# values replaced wholesale rather than merged key by key
OPAQUE_KEYS = {"lr_schedule"}


def _merge(base: dict[str, Any], update: dict[str, Any], path: str = "") -> dict[str, Any]:
    merged = copy.deepcopy(base)
    for key, value in update.items():
        dotted = f"{path}{key}"
        if key not in base:
            raise ConfigurationError(f"Unknown config key: {dotted}")
        if isinstance(base[key], dict) and key not in OPAQUE_KEYS:
            if not isinstance(value, dict):
                raise ConfigurationError(f"Config key {dotted} must be a mapping")
            merged[key] = _merge(base[key], value, f"{dotted}.")
        else:
            merged[key] = copy.deepcopy(value)
    return merged


def read_document(path: Union[str, Path]) -> dict[str, Any]:
    try:
        with open(path, encoding="utf-8") as handle:
            document = yaml.safe_load(handle) or {}
    except OSError as e:
        raise ConfigurationError(f"Cannot read config {path}: {e}") from e
    except yaml.YAMLError as e:
        raise ConfigurationError(f"Config {path} is not valid YAML: {e}") from e
    if not isinstance(document, dict):
        raise ConfigurationError(f"Config {path} must be a YAML mapping")
    return document


def parse_override(override: str) -> tuple[list[str], Any]:
    """`a.b.c=value` -> (["a", "b", "c"], value parsed as YAML)."""
    key, sep, raw = override.partition("=")
    if not sep or not key.strip():
        raise ConfigurationError(f"Override {override!r} is not of the form key.path=value")
    try:
        value = yaml.safe_load(raw) if raw.strip() else None
    except yaml.YAMLError as e:
        raise ConfigurationError(f"Override value in {override!r} is not valid YAML") from e
    return key.strip().split("."), value


def apply_overrides(document: dict[str, Any], overrides: Iterable[str]) -> dict[str, Any]:
    result = copy.deepcopy(document)
    for override in overrides:
        keys, value = parse_override(override)
        node = result
        for depth, key in enumerate(keys[:-1]):
            if not isinstance(node.get(key), dict):
                raise ConfigurationError(f"Unknown config key: {'.'.join(keys[: depth + 1])}")
            node = node[key]
        if keys[-1] not in node:
            raise ConfigurationError(f"Unknown config key: {'.'.join(keys)}")
        node[keys[-1]] = value
        logger.info(f"Config override {'.'.join(keys)} = {value!r}")
    return result


def build_config(document: dict[str, Any]) -> RunConfig:
    """Validate a document (already merged with defaults) into a RunConfig."""
    full = _merge(DEFAULT_DOCUMENT, document)
    serializer = RunConfigSerializer(data=full)
    if not serializer.is_valid():
        raise ConfigurationError(f"Invalid run config: {dict(serializer.errors)}")
    return RunConfigSerializer.build(serializer.validated_data, full)


def load_run_config(
    path: Optional[Union[str, Path]] = None, overrides: Iterable[str] = ()
) -> RunConfig:
    document = read_document(path) if path is not None else {}
    document = _merge(DEFAULT_DOCUMENT, document)
    return build_config(apply_overrides(document, overrides))


def dump_document(document: dict[str, Any]) -> str:
    return yaml.safe_dump(document, sort_keys=True, default_flow_style=False)


def config_hash(document: dict[str, Any]) -> str:
    return hashlib.sha256(dump_document(document).encode("utf-8")).hexdigest()


def config_from_snapshot(snapshot: str, overrides: Iterable[str] = ()) -> RunConfig:
    try:
        document = yaml.safe_load(snapshot) or {}
    except yaml.YAMLError as e:
        raise ConfigurationError(f"Stored config snapshot is not valid YAML: {e}") from e
    return build_config(apply_overrides(document, overrides))


def write_snapshot(config: RunConfig, run_dir: Path) -> Path:
    run_dir.mkdir(parents=True, exist_ok=True)
    path = run_dir / "config.snapshot"
    path.write_text(dump_document(config.document), encoding="utf-8")
    return path
