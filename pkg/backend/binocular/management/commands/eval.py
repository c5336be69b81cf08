from pathlib import Path
from typing import Any

from django.core.management.base import CommandParser

from ...services.degradations import PRESETS, preset
from ...services.evaluator import meta_test
from ...services.reports import (
    SUMMARY_COLUMNS,
    plot_accuracy_by_setting,
    summary_rows,
    write_csv,
    write_json,
)
from ._base import BinocularCommand


class Command(BinocularCommand):
    help = "Meta-test a checkpoint: fused, global and local accuracy with 95% confidence intervals."

    def add_arguments(self, parser: CommandParser) -> None:
        parser.add_argument("checkpoint")
        parser.add_argument("--n", type=int, default=None, help="Episodes (default from config)")
        parser.add_argument("--way", type=int, default=None)
        parser.add_argument("--shot", type=int, default=None)
        parser.add_argument("--query", type=int, default=None)
        parser.add_argument(
            "--degrade",
            action="append",
            default=None,
            choices=sorted(PRESETS),
            help="Degradation preset applied to every episode image (repeatable)",
        )
        parser.add_argument("--fusion", choices=["sum", "softmax"], default=None)
        parser.add_argument("--split", default="novel", choices=["val", "novel"])
        parser.add_argument("--seed", type=int, default=None, help="Episode seed (default: config seed)")
        parser.add_argument("--output", default=None, help="Report directory (default <run>/reports)")
        parser.add_argument("--plot", action="store_true")
        self.add_device_argument(parser)

    def run(self, **options: Any) -> None:
        device = self.device(options)
        trained = self.load_trained(options["checkpoint"], device)
        config = trained.config
        evaluation = config.evaluation

        if any(options.get(k) for k in ("way", "shot", "query")):
            specs = [self.spec_from_options(options, evaluation.specs[0])]
        else:
            specs = list(evaluation.specs)
        n_episodes = options["n"] or evaluation.n_episodes
        names = options["degrade"] if options["degrade"] is not None else list(evaluation.degradations)
        degradations = [preset(name) for name in names]
        fusion = options["fusion"] or evaluation.fusion
        seed = config.seed if options["seed"] is None else options["seed"]

        split = self.pick_split(self.load_splits(config), options["split"])
        results = []
        for spec in specs:
            by_branch = meta_test(
                trained.model,
                split,
                spec,
                n_episodes,
                seed,
                degradations=degradations,
                fusion=fusion,
                squared=config.train.squared_distance,
                device=device,
            )
            results.extend(by_branch.values())

        suffix = "".join(f" +{name}" for name in names)
        tag = "_".join(
            [f"{s.n_way}w{s.k_shot}s" for s in specs] + list(names) + [options["split"]]
        )
        output = Path(options["output"]) if options["output"] else trained.run_dir / "reports"
        rows = summary_rows(config.name, results, suffix)
        write_json(
            {
                "checkpoint_epoch": trained.checkpoint.epoch,
                "split": options["split"],
                "seed": seed,
                "fusion": fusion,
                "degradations": names,
                "results": [r.to_dict() for r in results],
            },
            output / f"eval_{tag}.json",
        )
        write_csv(rows, output / f"eval_{tag}.csv", SUMMARY_COLUMNS)
        if options["plot"]:
            plot_accuracy_by_setting(rows, output / f"eval_{tag}.png")

        for row in rows:
            self.stdout.write(
                f"{row['setting']:<28} {row['branch']:<7} {row['accuracy']:6.2f} +- {row['ci95']:.2f}"
            )
