"""
Joint optimization of the two views.

Every step samples one batch of `train_spec` episodes from the base split,
runs both views, and minimizes alpha * global + beta * local + gamma * mutual
with a single momentum-SGD optimizer. After every epoch the model is
meta-tested on the val split and the best fused accuracy is kept.
"""

import json
import logging
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Any, Optional, Union

import torch
from django.conf import settings
from torch.optim import SGD

from ..config import config_hash, dump_document, write_snapshot
from ..domain import DatasetSplit, LossReport, RunConfig
from ..exceptions import ConfigurationError
from .backbone import BinocularNet, build_model, classify_pointwise
from .checkpoints import Checkpoint, check_config_hash, save_checkpoint
from .evaluator import meta_test, prototype_dispersion
from .losses import (
    compute_prototypes,
    elastic_local_loss_with_terms,
    global_pointwise_loss,
    mutual_loss,
    total_loss,
)
from .sampling import EpisodeBatch, EpisodeDataset, episode_loader
from .schedules import EpochScheduler, lr_at, step_schedule

logger = logging.getLogger(__name__)

__all__ = ["Trainer", "train", "lr_at", "step_schedule", "run_directory"]

# seed streams kept apart from the evaluation seeds
TRAIN_STREAM = 1
VAL_STREAM = 2


def run_directory(config: RunConfig) -> Path:
    return Path(config.output_dir) if config.output_dir else Path(settings.BML_RUN_ROOT) / config.name


@dataclass
class EpochSummary:
    epoch: int
    lr: float
    global_loss: float
    local_loss: float
    mutual_loss: float
    total_loss: float
    mean_delta: float
    mean_d_el: float
    val_fused: Optional[float] = None
    val_global: Optional[float] = None
    val_local: Optional[float] = None
    dispersion: Optional[float] = None

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)


class Trainer:
    def __init__(
        self,
        config: RunConfig,
        splits: dict[str, DatasetSplit],
        run_dir: Optional[Path] = None,
        device: Optional[Union[str, torch.device]] = None,
        num_workers: Optional[int] = None,
    ) -> None:
        if "base" not in splits:
            raise ConfigurationError("Training needs a base split")
        self.config = config
        self.train_config = config.train
        self.base = splits["base"]
        self.val = splits.get("val")
        self.run_dir = Path(run_dir) if run_dir is not None else run_directory(config)
        self.device = torch.device(device or settings.BML_DEVICE)
        self.num_workers = num_workers

        self.model: BinocularNet = build_model(config.model, len(self.base.classes)).to(self.device)
        self.optimizer = SGD(
            self.model.parameters(),
            lr=lr_at(self.train_config.lr_schedule, 0),
            momentum=self.train_config.momentum,
            weight_decay=self.train_config.weight_decay,
            nesterov=self.train_config.nesterov,
        )
        self.scheduler = EpochScheduler(self.optimizer, self.train_config.lr_schedule)
        self.start_epoch = 0
        self.best_val = float("-inf")
        self.history: list[dict[str, Any]] = []
        self.config_hash = config_hash(config.document)
        torch.manual_seed(config.seed)

    @property
    def steps_per_epoch(self) -> int:
        if self.train_config.episodes_per_epoch:
            return self.train_config.episodes_per_epoch
        return max(1, math.ceil(self.base.num_images / self.train_config.train_spec.batch_images))

    def resume(self, checkpoint: Checkpoint, force: bool = False) -> None:
        """Restore model, optimizer, RNG and bookkeeping so training continues bit-for-bit."""
        same = check_config_hash(checkpoint, self.config_hash, force)
        if checkpoint.num_classes != len(self.base.classes):
            raise ConfigurationError(
                f"Checkpoint has {checkpoint.num_classes} base classes, data has {len(self.base.classes)}"
            )
        self.model.load_state_dict(checkpoint.model_state)
        if checkpoint.optimizer_state is not None:
            self.optimizer.load_state_dict(checkpoint.optimizer_state)
        # a forced resume runs with the new hyper-parameters
        for group in self.optimizer.param_groups:
            group["momentum"] = self.train_config.momentum
            group["weight_decay"] = self.train_config.weight_decay
            group["nesterov"] = self.train_config.nesterov
        torch.set_rng_state(checkpoint.rng_state)
        self.start_epoch = checkpoint.epoch
        self.best_val = checkpoint.best_val
        self.history = list(checkpoint.history)
        if not same:
            logger.warning(
                f"Resuming at epoch {self.start_epoch} with lr schedule {self.train_config.lr_schedule}"
            )
        logger.info(f"Resumed from epoch {self.start_epoch}")

    def checkpoint(self, epoch: int) -> Checkpoint:
        return Checkpoint(
            model_state={k: v.detach().cpu().clone() for k, v in self.model.state_dict().items()},
            optimizer_state=self.optimizer.state_dict(),
            epoch=epoch,
            rng_state=torch.get_rng_state(),
            best_val=self.best_val,
            config_snapshot=dump_document(self.config.document),
            config_hash=self.config_hash,
            num_classes=len(self.base.classes),
            history=list(self.history),
        )

    def compute_losses(self, batch: EpisodeBatch, epoch: int) -> tuple[torch.Tensor, LossReport]:
        """Forward both views and assemble the weighted objective for one batch."""
        tc = self.train_config
        mode = tc.mode
        images = batch.images
        zero = images.new_zeros(())
        global_map = local_map = None
        if mode == "bml":
            features = self.model(images)
            global_map, local_map = features.global_map, features.local_map
        elif mode == "baseline_global":
            global_map = self.model.embed(images, "global")
        else:
            local_map = self.model.embed(images, "local")

        global_loss = zero
        if global_map is not None:
            scores = classify_pointwise(global_map, self.model.classifier)
            global_loss = global_pointwise_loss(scores, batch.global_labels)

        local_loss, mean_delta, mean_d_el = zero, 0.0, 0.0
        if local_map is not None:
            n_support = batch.support_images.shape[0]
            prototypes = compute_prototypes(local_map[:n_support], batch.support_labels)
            local_loss, mean_delta, mean_d_el = elastic_local_loss_with_terms(
                local_map[n_support:],
                prototypes,
                batch.query_labels,
                tc.elastic.at_epoch(epoch, tc.epochs),
                tc.squared_distance,
            )

        mutual = zero
        if global_map is not None and local_map is not None:
            mutual = mutual_loss(global_map, local_map, tc.mutual_temperature)

        return total_loss(
            global_loss, local_loss, mutual, tc.effective_weights(), mean_delta, mean_d_el
        )

    def train_step(self, batch: EpisodeBatch, epoch: int) -> LossReport:
        self.model.train()
        total, report = self.compute_losses(batch.to(self.device), epoch)
        self.optimizer.zero_grad(set_to_none=True)
        total.backward()
        self.optimizer.step()
        return report

    def validate(self, summary: EpochSummary) -> None:
        if self.val is None:
            return
        tc = self.train_config
        results = meta_test(
            self.model,
            self.val,
            tc.val_spec,
            tc.val_episodes,
            seed=self.config.seed + VAL_STREAM,
            fusion=self.config.evaluation.fusion,
            squared=tc.squared_distance,
            device=self.device,
            num_workers=self.num_workers,
        )
        summary.val_fused = results["fused"].mean_accuracy
        summary.val_global = results["global"].mean_accuracy
        summary.val_local = results["local"].mean_accuracy
        summary.dispersion = prototype_dispersion(
            self.model,
            self.val,
            tc.val_spec,
            tc.val_episodes,
            seed=self.config.seed + VAL_STREAM,
            device=self.device,
        )

    def run_epoch(self, epoch: int, log_handle: Any) -> EpochSummary:
        tc = self.train_config
        lr = self.scheduler.apply(epoch)
        self.model.set_drop_progress(epoch / tc.epochs)
        dataset = EpisodeDataset(
            self.base,
            tc.train_spec,
            self.steps_per_epoch,
            base_seed=self.config.seed + TRAIN_STREAM,
            epoch=epoch,
            image_size=self.config.model.input_size,
            augment=tc.augment,
        )
        reports = []
        for step, batch in enumerate(episode_loader(dataset, self.num_workers)):
            report = self.train_step(batch, epoch)
            reports.append(report)
            log_handle.write(
                json.dumps({"epoch": epoch, "step": step, "lr": lr, **report.to_dict()}) + "\n"
            )
            logger.debug(f"epoch {epoch} step {step} total={report.total_loss:.4f}")
        log_handle.flush()

        def mean(attr: str) -> float:
            return math.fsum(getattr(r, attr) for r in reports) / len(reports)

        summary = EpochSummary(
            epoch=epoch,
            lr=lr,
            global_loss=mean("global_loss"),
            local_loss=mean("local_loss"),
            mutual_loss=mean("mutual_loss"),
            total_loss=mean("total_loss"),
            mean_delta=mean("mean_delta"),
            mean_d_el=mean("mean_d_el"),
        )
        self.validate(summary)
        return summary

    @staticmethod
    def _truncate_log(log_path: Path, epoch: int) -> None:
        """Drop step records of `epoch` and later, left by an earlier pass over the same run."""
        if not log_path.exists():
            return
        with open(log_path, encoding="utf-8") as handle:
            kept = [line for line in handle if line.strip() and json.loads(line)["epoch"] < epoch]
        with open(log_path, "w", encoding="utf-8") as handle:
            handle.writelines(kept)

    def fit(self) -> Checkpoint:
        tc = self.train_config
        write_snapshot(self.config, self.run_dir)
        checkpoint_dir = self.run_dir / "checkpoints"
        last: Optional[Checkpoint] = None
        logger.info(
            f"Training {self.config.name} ({tc.mode}) epochs {self.start_epoch}..{tc.epochs - 1}, "
            f"{self.steps_per_epoch} steps/epoch on {self.device}"
        )
        log_path = self.run_dir / "log.jsonl"
        # a resumed run keeps the steps of the epochs it continues from
        log_mode = "a" if self.start_epoch else "w"
        if self.start_epoch:
            self._truncate_log(log_path, self.start_epoch)
        with open(log_path, log_mode, encoding="utf-8") as log_handle:
            for epoch in range(self.start_epoch, tc.epochs):
                summary = self.run_epoch(epoch, log_handle)
                self.history.append(summary.to_dict())
                logger.info(
                    f"epoch {epoch} lr={summary.lr:g} total={summary.total_loss:.4f} "
                    f"global={summary.global_loss:.4f} local={summary.local_loss:.4f} "
                    f"mutual={summary.mutual_loss:.4f} val={summary.val_fused}"
                )
                improved = summary.val_fused is not None and summary.val_fused > self.best_val
                if improved:
                    self.best_val = summary.val_fused  # type: ignore[assignment]
                last = self.checkpoint(epoch + 1)
                save_checkpoint(last, checkpoint_dir / "last.pt")
                if improved or self.val is None:
                    save_checkpoint(last, checkpoint_dir / "best.pt")
                if tc.save_every and (epoch + 1) % tc.save_every == 0:
                    save_checkpoint(last, checkpoint_dir / f"epoch_{epoch + 1}.pt")
        if last is None:
            logger.warning(f"Nothing to train: already at epoch {self.start_epoch}")
            last = self.checkpoint(self.start_epoch)
        return last


def train(
    config: RunConfig,
    splits: dict[str, DatasetSplit],
    run_dir: Optional[Path] = None,
    resume_from: Optional[Checkpoint] = None,
    force: bool = False,
    device: Optional[Union[str, torch.device]] = None,
) -> Checkpoint:
    trainer = Trainer(config, splits, run_dir, device)
    if resume_from is not None:
        trainer.resume(resume_from, force)
    return trainer.fit()
