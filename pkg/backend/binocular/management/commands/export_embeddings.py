from pathlib import Path
from typing import Any

from django.core.management.base import CommandParser

from ...services.evaluator import export_embeddings
from ._base import BinocularCommand


class Command(BinocularCommand):
    help = "Export flattened global and local embeddings of a split as CSV (for external t-SNE)."

    def add_arguments(self, parser: CommandParser) -> None:
        parser.add_argument("checkpoint")
        parser.add_argument("--split", default="novel", choices=["base", "val", "novel"])
        parser.add_argument("--max-per-class", type=int, default=20)
        parser.add_argument("--seed", type=int, default=0)
        parser.add_argument("--output", default=None, help="CSV path (default <run>/reports/embeddings_<split>.csv)")
        self.add_device_argument(parser)

    def run(self, **options: Any) -> None:
        device = self.device(options)
        trained = self.load_trained(options["checkpoint"], device)
        split = self.pick_split(self.load_splits(trained.config), options["split"])
        output = (
            Path(options["output"])
            if options["output"]
            else trained.run_dir / "reports" / f"embeddings_{options['split']}.csv"
        )
        path = export_embeddings(
            trained.model,
            split,
            options["max_per_class"],
            output,
            seed=options["seed"],
            device=device,
        )
        self.stdout.write(str(path))
