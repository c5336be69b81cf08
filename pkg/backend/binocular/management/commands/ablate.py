import logging
from pathlib import Path
from typing import Any

import pandas as pd
from django.core.management.base import CommandParser

from ...config import load_run_config
from ...domain import TRAIN_MODES
from ...exceptions import ConfigurationError
from ...services.backbone import parameter_count
from ...services.checkpoints import load_checkpoint
from ...services.evaluator import meta_test
from ...services.reports import write_csv, write_json
from ...services.trainer import Trainer, run_directory
from ._base import BinocularCommand

logger = logging.getLogger(__name__)

# axis -> [(variant slug, config overrides)]
AXES: dict[str, list[tuple[str, list[str]]]] = {
    "mutual": [
        ("gamma0", ["losses.weights.gamma=0"]),
        ("gamma1", ["losses.weights.gamma=1"]),
    ],
    "elastic": [
        ("elastic_off", ["losses.elastic.enabled=false"]),
        ("elastic_on", ["losses.elastic.enabled=true"]),
    ],
    "shared_depth": [(f"S{k}I{4 - k}", [f"model.shared_depth={k}"]) for k in range(4)],
    "mode": [(mode, [f"mode={mode}"]) for mode in TRAIN_MODES],
    "elastic_scale": [
        (f"a1_{a1}_a2_{a2}", [f"losses.elastic.alpha1={a1}", f"losses.elastic.alpha2={a2}"])
        for a1 in (4.0, 5.5, 6.0)
        for a2 in (0.05, 0.1, 0.25)
    ],
    "train_way": [(f"N{n}", [f"train.train_spec.n_way={n}"]) for n in (5, 10, 15)],
}


class Command(BinocularCommand):
    help = "Train and meta-test a grid of config variants on shared seeds; writes a side-by-side CSV."

    def add_arguments(self, parser: CommandParser) -> None:
        parser.add_argument("--config", required=True)
        parser.add_argument("--axis", required=True, help=f"One of: {', '.join(AXES)}")
        parser.add_argument("--set", dest="overrides", action="append", default=[])
        parser.add_argument("--seeds", type=int, nargs="+", default=None)
        parser.add_argument("--n", type=int, default=None, help="Meta-test episodes per setting")
        self.add_device_argument(parser)

    def run(self, **options: Any) -> None:
        axis = options["axis"]
        if axis not in AXES:
            raise ConfigurationError(f"Unknown ablation axis {axis!r}; choose from {', '.join(AXES)}")
        device = self.device(options)
        base_config = load_run_config(options["config"], options["overrides"])
        seeds = options["seeds"] or [base_config.seed]
        root = run_directory(base_config) / f"ablate_{axis}"
        splits = self.load_splits(base_config)
        novel = self.pick_split(splits, "novel")

        rows = []
        for slug, variant_overrides in AXES[axis]:
            for seed in seeds:
                run_dir = root / f"{slug}-s{seed}"
                config = load_run_config(
                    options["config"],
                    [
                        *options["overrides"],
                        *variant_overrides,
                        f"seed={seed}",
                        f"name={base_config.name}-{axis}-{slug}-s{seed}",
                        f"output_dir={run_dir}",
                    ],
                )
                logger.info(f"Ablation {axis}: {slug} seed {seed}")
                trainer = Trainer(config, splits, run_dir, device)
                trainer.fit()
                best = load_checkpoint(run_dir / "checkpoints" / "best.pt")
                trainer.model.load_state_dict(best.model_state)
                params = parameter_count(config.model, len(splits["base"].classes))
                for spec in config.evaluation.specs:
                    results = meta_test(
                        trainer.model,
                        novel,
                        spec,
                        options["n"] or config.evaluation.n_episodes,
                        seed,
                        fusion=config.evaluation.fusion,
                        squared=config.train.squared_distance,
                        device=device,
                    )
                    rows.append(
                        {
                            "axis": axis,
                            "variant": slug,
                            "seed": seed,
                            "params": params,
                            "setting": spec.label(),
                            "fused": results["fused"].mean_accuracy,
                            "fused_ci95": results["fused"].ci95,
                            "global": results["global"].mean_accuracy,
                            "local": results["local"].mean_accuracy,
                        }
                    )

        write_csv(rows, root / f"ablation_{axis}.csv")
        write_json(rows, root / f"ablation_{axis}.json")
        summary = (
            pd.DataFrame(rows)
            .groupby(["variant", "setting"], sort=False)[["fused", "global", "local"]]
            .mean()
        )
        self.stdout.write(summary.to_string(float_format=lambda v: f"{v:.2f}"))
        self.stdout.write(str(Path(root)))
