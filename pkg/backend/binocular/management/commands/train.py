import logging
from pathlib import Path
from typing import Any

from django.core.management.base import CommandParser

from ...config import config_from_snapshot, load_run_config, write_snapshot
from ...exceptions import ConfigurationError
from ...services.checkpoints import load_checkpoint
from ...services.reports import plot_training_curves, write_json
from ...services.trainer import Trainer, run_directory
from ._base import BinocularCommand

logger = logging.getLogger(__name__)


class Command(BinocularCommand):
    help = "Train a binocular model from a YAML run config, or resume a run from a checkpoint."

    def add_arguments(self, parser: CommandParser) -> None:
        parser.add_argument("--config", help="YAML run config")
        parser.add_argument(
            "--set",
            dest="overrides",
            action="append",
            default=[],
            metavar="KEY.PATH=VALUE",
            help="Override a config value (repeatable), e.g. --set mode=baseline_local",
        )
        parser.add_argument("--resume", help="Checkpoint to continue from")
        parser.add_argument(
            "--force",
            action="store_true",
            help="Resume despite a config change, or overwrite an existing run",
        )
        parser.add_argument("--plot", action="store_true", help="Write reports/curves.png")
        self.add_device_argument(parser)

    def run(self, **options: Any) -> None:
        checkpoint = load_checkpoint(options["resume"]) if options["resume"] else None
        if options["config"]:
            config = load_run_config(options["config"], options["overrides"])
        elif checkpoint is not None:
            config = config_from_snapshot(checkpoint.config_snapshot, options["overrides"])
        else:
            raise ConfigurationError("train needs --config or --resume")

        if checkpoint is not None:
            # <run>/checkpoints/<file>.pt
            run_dir = Path(options["resume"]).resolve().parent.parent
        else:
            run_dir = run_directory(config)
        if checkpoint is None and (run_dir / "checkpoints" / "last.pt").exists() and not options["force"]:
            raise ConfigurationError(
                f"{run_dir} already holds a run; use --resume to continue it or --force to overwrite"
            )
        if not config.train.elastic.enabled:
            logger.info("Elastic constraint disabled for this run")

        write_snapshot(config, run_dir)
        splits = self.load_splits(config)
        trainer = Trainer(config, splits, run_dir, self.device(options))
        if checkpoint is not None:
            trainer.resume(checkpoint, force=options["force"])
        trainer.fit()

        reports = run_dir / "reports"
        write_json(trainer.history, reports / "history.json")
        if options["plot"]:
            plot_training_curves(trainer.history, reports / "curves.png")
        self.stdout.write(str(run_dir))
