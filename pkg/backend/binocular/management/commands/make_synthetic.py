from typing import Any

from django.core.management.base import CommandParser

from ...services.datasets import resolve_source, write_dataset
from ._base import BinocularCommand


class Command(BinocularCommand):
    help = "Write the seeded synthetic texture dataset to disk as <root>/<split>/<class>/*.png."

    def add_arguments(self, parser: CommandParser) -> None:
        parser.add_argument("root")
        parser.add_argument("--classes", type=int, default=8, help="Base classes")
        parser.add_argument("--val", type=int, default=None, help="Val classes (default --classes)")
        parser.add_argument("--novel", type=int, default=None, help="Novel classes (default --classes)")
        parser.add_argument("--per", type=int, default=60, help="Images per class")
        parser.add_argument("--size", type=int, default=32)
        parser.add_argument("--seed", type=int, default=7)

    def run(self, **options: Any) -> None:
        parts = [
            f"classes={options['classes']}",
            f"per={options['per']}",
            f"size={options['size']}",
            f"seed={options['seed']}",
        ]
        for key in ("val", "novel"):
            if options[key] is not None:
                parts.append(f"{key}={options[key]}")
        splits = resolve_source("synthetic://" + ",".join(parts))
        root = write_dataset(splits, options["root"])
        self.stdout.write(str(root))
