import json
import tempfile
from pathlib import Path
from unittest import mock

import pytest
import torch
from django.test import SimpleTestCase

from binocular.config import build_config, load_run_config
from binocular.exceptions import CheckpointError, ConfigurationError, DivergenceError
from binocular.services.checkpoints import load_checkpoint
from binocular.services.datasets import resolve_source
from binocular.services.sampling import materialize, sample_training_batch
from binocular.services.trainer import Trainer, run_directory, train

from .factories import tiny_document

DESK_CONFIG = Path(__file__).resolve().parents[3] / "configs" / "desk.yaml"


def _log_lines(run_dir: Path) -> list[dict]:
    with open(run_dir / "log.jsonl", encoding="utf-8") as handle:
        return [json.loads(line) for line in handle]


class TrainerTestCase(SimpleTestCase):
    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.root = Path(self.tmp.name)

    def tearDown(self):
        self.tmp.cleanup()

    def trainer(self, run_name: str = "run", **document):
        config = build_config(tiny_document(**document))
        splits = resolve_source(config.source, None, config.model.input_size)
        return Trainer(config, splits, self.root / run_name, device="cpu", num_workers=0)

    def batch(self, trainer: Trainer, seed: int = 0):
        episode = sample_training_batch(trainer.base, trainer.train_config.train_spec, seed)
        return materialize(episode, trainer.config.model.input_size, seed=seed)


class LossAssemblyTests(TrainerTestCase):
    def test_global_baseline_leaves_local_head_untouched(self):
        trainer = self.trainer(mode="baseline_global")
        total, report = trainer.compute_losses(self.batch(trainer), 0)
        total.backward()
        self.assertEqual(report.local_loss, 0.0)
        self.assertEqual(report.mutual_loss, 0.0)
        for p in trainer.model.local_head.parameters():
            self.assertTrue(p.grad is None or not p.grad.any())
        self.assertTrue(any(p.grad is not None and p.grad.any() for p in trainer.model.global_head.parameters()))

    def test_local_baseline_leaves_global_head_untouched(self):
        trainer = self.trainer(mode="baseline_local")
        total, report = trainer.compute_losses(self.batch(trainer), 0)
        total.backward()
        self.assertEqual(report.global_loss, 0.0)
        for p in [*trainer.model.global_head.parameters(), *trainer.model.classifier.parameters()]:
            self.assertTrue(p.grad is None or not p.grad.any())
        self.assertTrue(any(p.grad is not None and p.grad.any() for p in trainer.model.local_head.parameters()))

    def test_every_parameter_receives_gradient(self):
        for depth in (0, 3):
            trainer = self.trainer(model={"desk_scale": True, "input_size": 16, "shared_depth": depth})
            total, _ = trainer.compute_losses(self.batch(trainer), 1)
            total.backward()
            for name, p in trainer.model.named_parameters():
                self.assertIsNotNone(p.grad, f"{name} at shared_depth={depth}")
                self.assertTrue(bool(p.grad.any()), f"{name} at shared_depth={depth}")

    def test_zero_weights_step_is_pure_weight_decay(self):
        trainer = self.trainer(losses={"weights": {"alpha": 0.0, "beta": 0.0, "gamma": 0.0}})
        before = [p.detach().clone() for p in trainer.model.parameters()]
        trainer.train_step(self.batch(trainer), 0)
        shrink = 1.0 - 0.1 * 5e-4
        for old, new in zip(before, trainer.model.parameters()):
            torch.testing.assert_close(new.detach(), old * shrink, rtol=1e-6, atol=1e-7)

    def test_independent_views_without_mimicry(self):
        trainer = self.trainer(model={"desk_scale": True, "input_size": 16, "shared_depth": 0}, losses={"weights": {"gamma": 0.0}})
        trainer.model.eval()
        batch = self.batch(trainer)

        def global_grads():
            trainer.model.zero_grad(set_to_none=True)
            trainer.compute_losses(batch, 0)[0].backward()
            params = [*trainer.model.global_head.parameters(), *trainer.model.classifier.parameters()]
            return [p.grad.clone() for p in params]

        reference = global_grads()
        with torch.no_grad():
            for p in trainer.model.local_head.parameters():
                p.add_(0.05)
        for a, b in zip(reference, global_grads()):
            torch.testing.assert_close(a, b, rtol=0, atol=0)

    def test_elastic_push_grows_over_epochs(self):
        trainer = self.trainer(train={"epochs": 5})
        trainer.model.eval()
        batch = self.batch(trainer)
        with torch.no_grad():
            pushes = [trainer.compute_losses(batch, epoch)[1].mean_d_el for epoch in range(5)]
        self.assertEqual(pushes[0], 0.0)
        self.assertEqual(pushes, sorted(pushes))

    def test_elastic_disabled_reports_no_push(self):
        trainer = self.trainer(losses={"elastic": {"enabled": False}})
        _, report = trainer.compute_losses(self.batch(trainer), 1)
        self.assertEqual(report.mean_d_el, 0.0)

    def test_nan_loss_raises_divergence(self):
        trainer = self.trainer()
        with mock.patch(
            "binocular.services.trainer.global_pointwise_loss",
            return_value=torch.tensor(float("nan")),
        ):
            with self.assertRaises(DivergenceError) as cm:
                trainer.train_step(self.batch(trainer), 0)
        self.assertIsNotNone(cm.exception.report)

    def test_epoch_covers_every_base_image(self):
        # 60 base images in batches of 25
        trainer = self.trainer(
            train={"episodes_per_epoch": None, "train_spec": {"n_way": 5, "k_shot": 1, "q_query": 4}}
        )
        self.assertEqual(trainer.base.num_images, 60)
        self.assertEqual(trainer.steps_per_epoch, 3)

    def test_needs_base_split(self):
        config = build_config(tiny_document())
        splits = resolve_source(config.source, None, 16)
        del splits["base"]
        with self.assertRaises(ConfigurationError):
            Trainer(config, splits, self.root)


class FitTests(TrainerTestCase):
    def test_fit_writes_run_artifacts(self):
        trainer = self.trainer()
        last = trainer.fit()
        run_dir = self.root / "run"
        self.assertTrue((run_dir / "config.snapshot").is_file())
        self.assertTrue((run_dir / "checkpoints" / "last.pt").is_file())
        self.assertTrue((run_dir / "checkpoints" / "best.pt").is_file())
        self.assertFalse((run_dir / "checkpoints" / "last.pt.tmp").exists())
        self.assertEqual(last.epoch, 2)

        lines = _log_lines(run_dir)
        self.assertEqual(len(lines), 2 * 2)
        self.assertEqual([(l["epoch"], l["step"]) for l in lines], [(0, 0), (0, 1), (1, 0), (1, 1)])
        self.assertEqual({l["lr"] for l in lines if l["epoch"] == 1}, {0.01})
        for key in ("global_loss", "local_loss", "mutual_loss", "total_loss", "mean_delta", "mean_d_el"):
            self.assertIn(key, lines[0])

        self.assertEqual(len(trainer.history), 2)
        for summary in trainer.history:
            self.assertIsNotNone(summary["val_fused"])
            self.assertIsNotNone(summary["dispersion"])

    def test_periodic_checkpoints(self):
        trainer = self.trainer(train={"save_every": 1})
        trainer.fit()
        checkpoints = self.root / "run" / "checkpoints"
        self.assertEqual(load_checkpoint(checkpoints / "epoch_1.pt").epoch, 1)
        self.assertEqual(load_checkpoint(checkpoints / "epoch_2.pt").epoch, 2)

    def test_resume_continues_bit_for_bit(self):
        full = self.trainer("full", train={"save_every": 1})
        full.fit()
        checkpoint = load_checkpoint(self.root / "full" / "checkpoints" / "epoch_1.pt")

        resumed = self.trainer("resumed", train={"save_every": 1})
        resumed.resume(checkpoint)
        self.assertEqual(resumed.start_epoch, 1)
        resumed.fit()

        expected = [l for l in _log_lines(self.root / "full") if l["epoch"] == 1]
        self.assertEqual(_log_lines(self.root / "resumed"), expected)
        a = load_checkpoint(self.root / "full" / "checkpoints" / "last.pt").model_state
        b = load_checkpoint(self.root / "resumed" / "checkpoints" / "last.pt").model_state
        for key in a:
            self.assertTrue(torch.equal(a[key], b[key]), key)

    def test_resume_in_place_rewrites_later_epochs(self):
        self.trainer("run", train={"save_every": 1}).fit()
        original = _log_lines(self.root / "run")
        checkpoint = load_checkpoint(self.root / "run" / "checkpoints" / "epoch_1.pt")

        again = self.trainer("run", train={"save_every": 1})
        again.resume(checkpoint)
        again.fit()
        self.assertEqual(_log_lines(self.root / "run"), original)

    def test_resume_with_changed_config_needs_force(self):
        self.trainer("full", train={"save_every": 1}).fit()
        checkpoint = load_checkpoint(self.root / "full" / "checkpoints" / "epoch_1.pt")

        changed = {"save_every": 1, "lr_schedule": [[0, 0.1], [1, 0.05]]}
        with self.assertRaises(CheckpointError):
            self.trainer("changed", train=changed).resume(checkpoint)

        forced = self.trainer("forced", train=changed)
        forced.resume(checkpoint, force=True)
        forced.fit()
        self.assertEqual(forced.history[-1]["lr"], 0.05)
        self.assertEqual(len(forced.history), 2)

    def test_train_entry_point_resumes(self):
        config = build_config(tiny_document(train={"save_every": 1}))
        splits = resolve_source(config.source, None, config.model.input_size)
        first = train(config, splits, self.root / "a", device="cpu")
        self.assertEqual(first.epoch, 2)
        checkpoint = load_checkpoint(self.root / "a" / "checkpoints" / "epoch_1.pt")
        resumed = train(config, splits, self.root / "b", resume_from=checkpoint, device="cpu")
        self.assertEqual(resumed.epoch, 2)
        self.assertEqual(len(resumed.history), 2)

    def test_run_directory_defaults_to_run_root(self):
        config = build_config(tiny_document(name="named"))
        self.assertEqual(run_directory(config).name, "named")
        config = build_config(tiny_document(output_dir=str(self.root / "elsewhere")))
        self.assertEqual(run_directory(config), self.root / "elsewhere")


@pytest.mark.integration
class DeskTrainingTests(SimpleTestCase):
    def test_total_loss_trends_down(self):
        with tempfile.TemporaryDirectory() as tmp:
            config = load_run_config(DESK_CONFIG, [f"output_dir={tmp}"])
            splits = resolve_source(config.source, config.manifest, config.model.input_size)
            trainer = Trainer(config, splits, device="cpu")
            trainer.fit()
        losses = [summary["total_loss"] for summary in trainer.history]
        self.assertEqual(len(losses), 20)
        smoothed = [sum(losses[i : i + 3]) / 3 for i in range(len(losses) - 2)]
        self.assertLess(smoothed[-1], smoothed[0])
