"""Shared plumbing of the binocular management commands."""

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Optional

import torch
from django.conf import settings
from django.core.management.base import BaseCommand, CommandError, CommandParser

from ...config import config_from_snapshot
from ...domain import DatasetSplit, EpisodeSpec, RunConfig
from ...exceptions import BinocularError, DivergenceError
from ...services.backbone import BinocularNet, build_model
from ...services.checkpoints import Checkpoint, load_checkpoint
from ...services.datasets import resolve_source

logger = logging.getLogger(__name__)

EXIT_USER_ERROR = 2
EXIT_DIVERGED = 3


@dataclass
class TrainedRun:
    model: BinocularNet
    config: RunConfig
    checkpoint: Checkpoint
    checkpoint_path: Path

    @property
    def run_dir(self) -> Path:
        # checkpoints live in <run>/checkpoints/
        return self.checkpoint_path.resolve().parent.parent


class BinocularCommand(BaseCommand):
    """
    Subclasses implement `run`. Package errors become CommandError with exit
    code 2, divergence exits with 3.
    """

    def add_device_argument(self, parser: CommandParser) -> None:
        parser.add_argument("--device", default=None, help="torch device (default BML_DEVICE)")

    def handle(self, *args: Any, **options: Any) -> Optional[str]:
        try:
            self.run(**options)
        except DivergenceError as e:
            logger.error(f"Training diverged: {e}")
            raise CommandError(str(e), returncode=EXIT_DIVERGED) from e
        except BinocularError as e:
            logger.error(f"{type(e).__name__}: {e}")
            raise CommandError(str(e), returncode=EXIT_USER_ERROR) from e
        return None

    def run(self, **options: Any) -> None:
        raise NotImplementedError

    def device(self, options: dict[str, Any]) -> torch.device:
        return torch.device(options.get("device") or settings.BML_DEVICE)

    def load_trained(self, checkpoint_path: str, device: torch.device) -> TrainedRun:
        path = Path(checkpoint_path)
        checkpoint = load_checkpoint(path)
        config = config_from_snapshot(checkpoint.config_snapshot)
        model = build_model(config.model, checkpoint.num_classes)
        model.load_state_dict(checkpoint.model_state)
        model.to(device).eval()
        return TrainedRun(model, config, checkpoint, path)

    def load_splits(self, config: RunConfig) -> dict[str, DatasetSplit]:
        return resolve_source(config.source, config.manifest, config.model.input_size)

    def pick_split(self, splits: dict[str, DatasetSplit], role: str) -> DatasetSplit:
        if role not in splits:
            raise CommandError(
                f"Dataset has no {role!r} split (found {', '.join(sorted(splits))})",
                returncode=EXIT_USER_ERROR,
            )
        return splits[role]

    def spec_from_options(self, options: dict[str, Any], default: EpisodeSpec) -> EpisodeSpec:
        return EpisodeSpec(
            n_way=options.get("way") or default.n_way,
            k_shot=options.get("shot") or default.k_shot,
            q_query=options.get("query") or default.q_query,
        )
