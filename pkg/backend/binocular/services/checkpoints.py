"""
Versioned checkpoint files.

A checkpoint is a torch-serialized dict of plain containers and tensors only,
so it loads with `weights_only=True`. It carries everything needed to continue
training bit-for-bit: parameters and buffers, optimizer state, the torch RNG
state, completed epochs, the best validation accuracy, the per-epoch history
and the YAML snapshot of the config that produced it.
"""

import logging
import os
import pickle
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional, Union

import torch

from ..exceptions import CheckpointError

logger = logging.getLogger(__name__)

FORMAT_VERSION = 1
REQUIRED_KEYS = (
    "format_version",
    "model_state",
    "epoch",
    "rng_state",
    "config_snapshot",
    "config_hash",
    "num_classes",
)


@dataclass
class Checkpoint:
    model_state: dict[str, torch.Tensor]
    optimizer_state: Optional[dict[str, Any]]
    epoch: int
    rng_state: torch.Tensor
    best_val: float
    config_snapshot: str
    config_hash: str
    num_classes: int
    history: list[dict[str, Any]] = field(default_factory=list)
    format_version: int = FORMAT_VERSION

    def to_dict(self) -> dict[str, Any]:
        return {
            "format_version": self.format_version,
            "model_state": self.model_state,
            "optimizer_state": self.optimizer_state,
            "epoch": self.epoch,
            "rng_state": self.rng_state,
            "best_val": self.best_val,
            "config_snapshot": self.config_snapshot,
            "config_hash": self.config_hash,
            "num_classes": self.num_classes,
            "history": self.history,
        }


def save_checkpoint(checkpoint: Checkpoint, path: Union[str, Path]) -> Path:
    """Write atomically: a partial file never replaces a good one."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    temp_path = path.with_name(path.name + ".tmp")
    try:
        torch.save(checkpoint.to_dict(), temp_path)
        os.replace(temp_path, path)
    except OSError as e:
        logger.error(f"Failed to save checkpoint to {path}: {e}")
        temp_path.unlink(missing_ok=True)
        raise CheckpointError(f"Cannot write checkpoint {path}: {e}") from e
    logger.info(f"Checkpoint saved to {path} (epoch {checkpoint.epoch})")
    return path


def load_checkpoint(path: Union[str, Path], map_location: str = "cpu") -> Checkpoint:
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"Checkpoint {path} does not exist")
    try:
        payload = torch.load(path, map_location=map_location, weights_only=True)
    except (OSError, RuntimeError, EOFError, ValueError, KeyError, pickle.UnpicklingError) as e:
        logger.error(f"Failed to load checkpoint {path}: {e}")
        raise CheckpointError(f"Checkpoint {path} is corrupt or unreadable: {e}") from e

    if not isinstance(payload, dict) or any(k not in payload for k in REQUIRED_KEYS):
        raise CheckpointError(f"{path} is not a binocular checkpoint")
    if payload["format_version"] != FORMAT_VERSION:
        raise CheckpointError(
            f"Checkpoint format {payload['format_version']} is not supported "
            f"(expected {FORMAT_VERSION})"
        )
    logger.info(f"Loaded checkpoint {path} (epoch {payload['epoch']})")
    return Checkpoint(
        model_state=payload["model_state"],
        optimizer_state=payload.get("optimizer_state"),
        epoch=int(payload["epoch"]),
        rng_state=payload["rng_state"],
        best_val=float(payload.get("best_val", float("-inf"))),
        config_snapshot=payload["config_snapshot"],
        config_hash=payload["config_hash"],
        num_classes=int(payload["num_classes"]),
        history=list(payload.get("history") or []),
        format_version=payload["format_version"],
    )


def check_config_hash(checkpoint: Checkpoint, current_hash: str, force: bool = False) -> bool:
    """
    True when the hashes agree. A mismatch is an error unless `force`, in
    which case it is logged and False is returned.
    """
    if checkpoint.config_hash == current_hash:
        return True
    if not force:
        raise CheckpointError(
            "Config differs from the checkpoint's config "
            f"({current_hash[:12]} vs {checkpoint.config_hash[:12]}); pass --force to continue"
        )
    logger.warning(
        f"Config hash {current_hash[:12]} differs from checkpoint {checkpoint.config_hash[:12]}; "
        "continuing with the new config"
    )
    return False
