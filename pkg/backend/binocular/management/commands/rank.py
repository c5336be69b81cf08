from pathlib import Path
from typing import Any

from django.core.management.base import CommandParser

from ...domain import EpisodeSpec
from ...services.evaluator import similarity_ranking
from ...services.reports import format_ranking, ranking_payload, write_json
from ...services.sampling import materialize, sample_episode
from ._base import BinocularCommand


class Command(BinocularCommand):
    help = "Rank the classes of one seeded episode by similarity (fused by default) for every query."

    def add_arguments(self, parser: CommandParser) -> None:
        parser.add_argument("checkpoint")
        parser.add_argument("--seed", type=int, default=0, help="Episode seed")
        parser.add_argument("--way", type=int, default=4)
        parser.add_argument("--shot", type=int, default=1)
        parser.add_argument("--query", type=int, default=1)
        parser.add_argument("--split", default="novel", choices=["val", "novel"])
        parser.add_argument("--branch", default="fused", choices=["fused", "global", "local"])
        parser.add_argument("--output", default=None, help="Report directory (default <run>/reports)")
        self.add_device_argument(parser)

    def run(self, **options: Any) -> None:
        device = self.device(options)
        trained = self.load_trained(options["checkpoint"], device)
        spec = EpisodeSpec(options["way"], options["shot"], options["query"])
        split = self.pick_split(self.load_splits(trained.config), options["split"])

        episode = sample_episode(split, spec, options["seed"])
        batch = materialize(episode, trained.config.model.input_size, seed=options["seed"])
        report = similarity_ranking(
            trained.model,
            batch.to(device),
            trained.config.evaluation.fusion,
            trained.config.train.squared_distance,
            options["branch"],
        )

        output = Path(options["output"]) if options["output"] else trained.run_dir / "reports"
        stem = f"rank_{spec.n_way}w{spec.k_shot}s_seed{options['seed']}"
        table = format_ranking(report)
        output.mkdir(parents=True, exist_ok=True)
        (output / f"{stem}.txt").write_text(table, encoding="utf-8")
        write_json(ranking_payload(report), output / f"{stem}.json")
        self.stdout.write(table)
