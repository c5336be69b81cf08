import json
import shutil
import tempfile
from io import StringIO
from pathlib import Path
from unittest import mock

import pandas as pd
from django.core.management import call_command
from django.core.management.base import CommandError
from django.test import SimpleTestCase

from binocular.config import config_from_snapshot
from binocular.exceptions import DivergenceError
from binocular.services.datasets import load_dataset, resolve_source
from binocular.services.trainer import Trainer

from .factories import tiny_document, write_config


def run(name: str, *args, **options) -> str:
    out = StringIO()
    call_command(name, *args, stdout=out, stderr=StringIO(), **options)
    return out.getvalue()


class MakeSyntheticCommandTests(SimpleTestCase):
    def test_written_dataset_loads_back(self):
        with tempfile.TemporaryDirectory() as tmp:
            root = Path(tmp) / "data"
            run("make_synthetic", str(root), classes=3, per=4, size=16, seed=1)
            loaded = load_dataset(root, image_size=16)
            self.assertTrue((root / "manifest.yaml").is_file())
        expected = resolve_source("synthetic://classes=3,per=4,size=16,seed=1")
        self.assertEqual(set(loaded), {"base", "val", "novel"})
        for role, split in expected.items():
            self.assertEqual(loaded[role].classes, split.classes)
            self.assertEqual(loaded[role].num_images, 3 * 4)


class TrainedRunTestCase(SimpleTestCase):
    """Trains the tiny run once; tests read its checkpoint."""

    @classmethod
    def setUpClass(cls):
        super().setUpClass()
        cls.tmp = tempfile.mkdtemp()
        cls.run_dir = Path(cls.tmp) / "run"
        cls.config_path = write_config(Path(cls.tmp), tiny_document(output_dir=str(cls.run_dir)))
        run("train", config=str(cls.config_path))
        cls.checkpoint = str(cls.run_dir / "checkpoints" / "best.pt")

    @classmethod
    def tearDownClass(cls):
        shutil.rmtree(cls.tmp, ignore_errors=True)
        super().tearDownClass()


class TrainCommandTests(TrainedRunTestCase):
    def test_run_artifacts(self):
        for relative in (
            "config.snapshot",
            "log.jsonl",
            "checkpoints/last.pt",
            "checkpoints/best.pt",
            "reports/history.json",
        ):
            self.assertTrue((self.run_dir / relative).is_file(), relative)
        history = json.loads((self.run_dir / "reports" / "history.json").read_text(encoding="utf-8"))
        self.assertEqual([entry["epoch"] for entry in history], [0, 1])

    def test_existing_run_needs_force(self):
        with self.assertRaises(CommandError) as cm:
            run("train", config=str(self.config_path))
        self.assertEqual(cm.exception.returncode, 2)

    def test_missing_dataset_is_a_user_error(self):
        with tempfile.TemporaryDirectory() as tmp:
            path = write_config(Path(tmp), tiny_document(source=str(Path(tmp) / "nowhere")))
            with self.assertRaises(CommandError) as cm:
                run("train", config=str(path))
        self.assertEqual(cm.exception.returncode, 2)

    def test_snapshot_precedes_data_loading(self):
        with tempfile.TemporaryDirectory() as tmp:
            empty = Path(tmp) / "empty"
            empty.mkdir()
            run_dir = Path(tmp) / "run"
            path = write_config(Path(tmp), tiny_document(source=str(empty), output_dir=str(run_dir)))
            with self.assertRaises(CommandError) as cm:
                run("train", config=str(path))
            snapshot = run_dir / "config.snapshot"
            self.assertTrue(snapshot.is_file())
            self.assertEqual(config_from_snapshot(snapshot.read_text(encoding="utf-8")).source, str(empty))
        self.assertEqual(cm.exception.returncode, 2)

    def test_needs_config_or_checkpoint(self):
        with self.assertRaises(CommandError) as cm:
            run("train")
        self.assertEqual(cm.exception.returncode, 2)

    def test_divergence_exits_with_three(self):
        with tempfile.TemporaryDirectory() as tmp:
            path = write_config(Path(tmp), tiny_document(output_dir=str(Path(tmp) / "nan")))
            with mock.patch.object(Trainer, "fit", side_effect=DivergenceError("Total loss is nan")):
                with self.assertRaises(CommandError) as cm:
                    run("train", config=str(path))
        self.assertEqual(cm.exception.returncode, 3)

    def test_overrides_reach_the_snapshot(self):
        with tempfile.TemporaryDirectory() as tmp:
            path = write_config(Path(tmp), tiny_document(output_dir=str(Path(tmp) / "local")))
            run("train", config=str(path), overrides=["mode=baseline_local", "train.epochs=1"])
            snapshot = (Path(tmp) / "local" / "config.snapshot").read_text(encoding="utf-8")
        config = config_from_snapshot(snapshot)
        self.assertEqual(config.train.mode, "baseline_local")
        self.assertEqual(config.train.epochs, 1)


class EvalCommandTests(TrainedRunTestCase):
    def test_reports_are_reproducible(self):
        report = self.run_dir / "reports" / "eval_3w1s_novel.json"
        first = run("eval", self.checkpoint, n=4)
        payload = report.read_text(encoding="utf-8")
        second = run("eval", self.checkpoint, n=4)
        self.assertEqual(report.read_text(encoding="utf-8"), payload)
        self.assertEqual(first, second)

        document = json.loads(payload)
        self.assertEqual(document["split"], "novel")
        self.assertEqual({r["branch"] for r in document["results"]}, {"fused", "global", "local"})
        self.assertTrue(all(r["n_episodes"] == 4 for r in document["results"]))
        table = pd.read_csv(self.run_dir / "reports" / "eval_3w1s_novel.csv")
        self.assertEqual(len(table), 3)

    def test_degraded_evaluation(self):
        with tempfile.TemporaryDirectory() as tmp:
            run("eval", self.checkpoint, n=2, way=2, degrade=["pepper"], output=tmp, plot=True)
            document = json.loads((Path(tmp) / "eval_2w1s_pepper_novel.json").read_text(encoding="utf-8"))
            self.assertTrue((Path(tmp) / "eval_2w1s_pepper_novel.png").is_file())
        self.assertEqual(document["degradations"], ["pepper"])
        self.assertEqual(len(document["results"]), 3)

    def test_missing_checkpoint(self):
        with self.assertRaises(CommandError) as cm:
            run("eval", str(Path(self.tmp) / "absent.pt"))
        self.assertEqual(cm.exception.returncode, 2)

    def test_oversized_episode_is_a_user_error(self):
        with self.assertRaises(CommandError) as cm:
            run("eval", self.checkpoint, n=1, way=9)
        self.assertEqual(cm.exception.returncode, 2)


class RankCommandTests(TrainedRunTestCase):
    def test_same_seed_same_ranking(self):
        first = run("rank", self.checkpoint, seed=3)
        second = run("rank", self.checkpoint, seed=3)
        self.assertEqual(first, second)
        self.assertIn("mean ground-truth rank", first)

    def test_four_way_payload(self):
        with tempfile.TemporaryDirectory() as tmp:
            run("rank", self.checkpoint, seed=1, way=4, output=tmp)
            payload = json.loads((Path(tmp) / "rank_4w1s_seed1.json").read_text(encoding="utf-8"))
            self.assertTrue((Path(tmp) / "rank_4w1s_seed1.txt").is_file())
        self.assertEqual(len(payload["queries"]), 4)
        for query in payload["queries"]:
            self.assertEqual(sorted(c for c, _ in query["ranking"]), [0, 1, 2, 3])
            self.assertIn(query["true_rank"], (1, 2, 3, 4))

    def test_single_view_ranking(self):
        out = run("rank", self.checkpoint, seed=3, branch="local")
        self.assertIn("mean ground-truth rank", out)

    def test_missing_checkpoint(self):
        with self.assertRaises(CommandError) as cm:
            run("rank", str(Path(self.tmp) / "absent.pt"))
        self.assertEqual(cm.exception.returncode, 2)


class ExportEmbeddingsCommandTests(TrainedRunTestCase):
    def test_csv_rows(self):
        out = run("export_embeddings", self.checkpoint, max_per_class=2)
        table = pd.read_csv(out.strip())
        self.assertEqual(len(table), 5 * 2 * 2)
        self.assertEqual(len([c for c in table.columns if c.startswith("f")]), 128)

    def test_base_split(self):
        with tempfile.TemporaryDirectory() as tmp:
            path = Path(tmp) / "base.csv"
            run("export_embeddings", self.checkpoint, split="base", max_per_class=1, output=str(path))
            self.assertEqual(len(pd.read_csv(path)), 5 * 2)


class AblateCommandTests(SimpleTestCase):
    def test_unknown_axis(self):
        with tempfile.TemporaryDirectory() as tmp:
            path = write_config(Path(tmp))
            with self.assertRaises(CommandError) as cm:
                run("ablate", config=str(path), axis="temperature")
        self.assertEqual(cm.exception.returncode, 2)

    def test_mutual_axis_table(self):
        with tempfile.TemporaryDirectory() as tmp:
            path = write_config(Path(tmp), tiny_document(output_dir=str(Path(tmp) / "base")))
            run("ablate", config=str(path), axis="mutual", n=2)
            root = Path(tmp) / "base" / "ablate_mutual"
            table = pd.read_csv(root / "ablation_mutual.csv")
            self.assertTrue((root / "gamma0-s0" / "checkpoints" / "best.pt").is_file())
        self.assertEqual(list(table["variant"]), ["gamma0", "gamma1"])
        self.assertEqual(set(table["seed"]), {0})
        self.assertEqual(table["params"].nunique(), 1)
