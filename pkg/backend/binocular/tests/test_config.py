import tempfile
from pathlib import Path

from django.test import SimpleTestCase

from binocular.config import (
    DEFAULT_DOCUMENT,
    apply_overrides,
    build_config,
    config_from_snapshot,
    config_hash,
    dump_document,
    load_run_config,
    parse_override,
    write_snapshot,
)
from binocular.domain import DEFAULT_LR_SCHEDULE, EpisodeSpec
from binocular.exceptions import ConfigurationError

from .factories import tiny_document, write_config

CONFIG_DIR = Path(__file__).resolve().parents[3] / "configs"


class DefaultConfigTests(SimpleTestCase):
    def test_defaults(self):
        config = load_run_config()
        self.assertEqual(config.train.epochs, 100)
        self.assertEqual(config.train.lr_schedule, DEFAULT_LR_SCHEDULE)
        self.assertEqual(config.train.momentum, 0.9)
        self.assertEqual(config.train.weight_decay, 5e-4)
        self.assertFalse(config.train.nesterov)
        self.assertEqual(config.train.train_spec, EpisodeSpec(15, 1, 6))
        self.assertEqual((config.train.weights.alpha, config.train.weights.beta, config.train.weights.gamma), (4.0, 2.0, 1.0))
        self.assertEqual((config.train.elastic.alpha1, config.train.elastic.alpha2), (5.5, 0.1))
        self.assertEqual(config.train.elastic.total_epochs, 100)
        self.assertEqual(config.model.shared_depth, 3)
        self.assertEqual(config.model.block_channels, (64, 160, 320, 640))
        self.assertEqual(config.evaluation.n_episodes, 2000)
        self.assertEqual(config.evaluation.fusion, "sum")
        self.assertEqual(config.train.mode, "bml")

    def test_seed_reaches_model_and_trainer(self):
        config = build_config(tiny_document(seed=17))
        self.assertEqual(config.model.seed, 17)
        self.assertEqual(config.train.seed, 17)

    def test_shipped_configs_validate(self):
        desk = load_run_config(CONFIG_DIR / "desk.yaml")
        self.assertTrue(desk.model.desk_scale)
        self.assertEqual(desk.train.epochs, 20)
        self.assertEqual(desk.train.train_spec.n_way, 8)


class OverrideTests(SimpleTestCase):
    def test_values_parse_as_yaml(self):
        self.assertEqual(parse_override("losses.elastic.enabled=false"), (["losses", "elastic", "enabled"], False))
        self.assertEqual(parse_override("train.epochs=12"), (["train", "epochs"], 12))
        self.assertEqual(parse_override("mode=baseline_local"), (["mode"], "baseline_local"))
        self.assertEqual(parse_override("evaluation.degradations=[blur, pepper]")[1], ["blur", "pepper"])

    def test_malformed_override(self):
        with self.assertRaises(ConfigurationError):
            parse_override("train.epochs")
        with self.assertRaises(ConfigurationError):
            parse_override("=3")

    def test_unknown_path(self):
        with self.assertRaises(ConfigurationError):
            apply_overrides(DEFAULT_DOCUMENT, ["train.epoch=3"])
        with self.assertRaises(ConfigurationError):
            apply_overrides(DEFAULT_DOCUMENT, ["nothing.here=1"])

    def test_overrides_do_not_touch_defaults(self):
        apply_overrides(DEFAULT_DOCUMENT, ["train.epochs=3"])
        self.assertEqual(DEFAULT_DOCUMENT["train"]["epochs"], 100)

    def test_mode_and_elastic_overrides(self):
        config = load_run_config(None, ["mode=baseline_local", "losses.elastic.enabled=false"])
        self.assertEqual(config.train.mode, "baseline_local")
        self.assertFalse(config.train.elastic.enabled)
        self.assertEqual(config.train.effective_weights().alpha, 0.0)
        self.assertEqual(config.train.effective_weights().gamma, 0.0)


class ValidationTests(SimpleTestCase):
    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.root = Path(self.tmp.name)

    def tearDown(self):
        self.tmp.cleanup()

    def test_unknown_key_in_file(self):
        path = write_config(self.root, {"train": {"epochz": 3}})
        with self.assertRaises(ConfigurationError):
            load_run_config(path)

    def test_missing_file(self):
        with self.assertRaises(ConfigurationError):
            load_run_config(self.root / "absent.yaml")

    def test_not_a_mapping(self):
        path = self.root / "list.yaml"
        path.write_text("- 1\n- 2\n", encoding="utf-8")
        with self.assertRaises(ConfigurationError):
            load_run_config(path)

    def test_missing_dataset_directory(self):
        with self.assertRaises(ConfigurationError):
            build_config(tiny_document(source=str(self.root / "no-data")))

    def test_out_of_range_values(self):
        for document in (
            tiny_document(losses={"elastic": {"alpha1": 9.0}}),
            tiny_document(losses={"elastic": {"alpha2": 0.5}}),
            tiny_document(model={"shared_depth": 5}),
            tiny_document(train={"epochs": 0}),
            tiny_document(mode="stereo"),
            tiny_document(evaluation={"fusion": "max"}),
            tiny_document(evaluation={"degradations": ["fog"]}),
            tiny_document(evaluation={"specs": []}),
            tiny_document(name="has space"),
        ):
            with self.assertRaises(ConfigurationError):
                build_config(document)

    def test_bad_schedules(self):
        for schedule in ([[5, 0.1]], [[0, 0.1], [0, 0.01]], [[0, -1.0]], "fast", {"step": 0}):
            with self.assertRaises(ConfigurationError):
                build_config(tiny_document(train={"lr_schedule": schedule}))

    def test_step_schedule_expands_over_epochs(self):
        config = build_config(tiny_document(train={"epochs": 150, "lr_schedule": {"base_lr": 0.1, "step": 40, "gamma": 0.1}}))
        self.assertEqual([epoch for epoch, _ in config.train.lr_schedule], [0, 40, 80, 120])

    def test_desk_scale_needs_small_inputs(self):
        with self.assertRaises(ConfigurationError):
            build_config(tiny_document(source="synthetic://classes=5,size=84", model={"input_size": 84}))

    def test_missing_manifest(self):
        with self.assertRaises(ConfigurationError):
            build_config(tiny_document(manifest=str(self.root / "manifest.yaml")))


class SnapshotTests(SimpleTestCase):
    def test_snapshot_round_trip_keeps_hash(self):
        config = build_config(tiny_document())
        restored = config_from_snapshot(dump_document(config.document))
        self.assertEqual(config_hash(restored.document), config_hash(config.document))
        self.assertEqual(restored, config)

    def test_hash_follows_content(self):
        a = build_config(tiny_document())
        b = build_config(tiny_document(seed=1))
        self.assertNotEqual(config_hash(a.document), config_hash(b.document))
        self.assertEqual(len(config_hash(a.document)), 64)

    def test_snapshot_file(self):
        with tempfile.TemporaryDirectory() as tmp:
            path = write_snapshot(build_config(tiny_document()), Path(tmp) / "run")
            self.assertEqual(path.name, "config.snapshot")
            restored = config_from_snapshot(path.read_text(encoding="utf-8"))
        self.assertEqual(restored.name, "tiny")
