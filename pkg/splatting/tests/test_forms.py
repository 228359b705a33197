import tempfile
from pathlib import Path

from django.test import SimpleTestCase

from probability.pyramid import PyramidConfig
from splatting.forms import DESK, PUBLISHED, SECTIONS, RunConfig, RunConfigError, defaults, describe


class RunConfigTests(SimpleTestCase):
    def test_defaults_build_every_config(self):
        config = RunConfig()
        self.assertEqual(config.pyramid_config(), PyramidConfig())
        self.assertEqual(config.seed, 0)
        self.assertIsNone(config.threads)
        train = config.train_config()
        self.assertEqual(train.estimator, "control_variate")
        self.assertEqual(train.samples, 20000)
        self.assertIsNone(train.min_unique)
        self.assertAlmostEqual(config.loss_config().lambda_l1, 0.8)
        self.assertIsNone(config.render_options().render_cap)

    def test_unknown_key_rejected(self):
        with self.assertRaisesMessage(RunConfigError, "unknown key train.sampels"):
            RunConfig("[train]\nsampels = 5\n")

    def test_unknown_section_rejected(self):
        with self.assertRaisesMessage(RunConfigError, "unknown section [optimizer]"):
            RunConfig("[optimizer]\nlr = 1\n")
        with self.assertRaises(RunConfigError):
            RunConfig("", {"nonsense": {"x": 1}})

    def test_invalid_value_names_the_key(self):
        with self.assertRaisesMessage(RunConfigError, "pyramid.levels"):
            RunConfig("[pyramid]\nlevels = many\n")
        with self.assertRaisesMessage(RunConfigError, "train.rounding"):
            RunConfig("[train]\nestimator = pathwise\n")

    def test_malformed_file(self):
        with self.assertRaises(RunConfigError):
            RunConfig("levels = 3\n")

    def test_override_precedence(self):
        text = "[run]\nseed = 4\n[train]\nsamples = 100\niterations = 7\n"
        config = RunConfig(text, {"run": {"seed": 9}, "train": {"samples": None, "iterations": 3}})
        self.assertEqual(config.seed, 9)
        self.assertEqual(config.train_config().samples, 100)
        self.assertEqual(config.train_config().iterations, 3)
        self.assertEqual(config.train_config().seed, 9)

    def test_published_preset(self):
        config = RunConfig("[run]\npreset = published\n")
        self.assertEqual(config.pyramid_config(), PyramidConfig(dims=3, levels=12, base_resolution=2,
                                                                budget=2 ** 18))
        self.assertEqual(config.train_config().samples, 15_000_000)
        self.assertEqual(config.train_config().refine_iters, 5000)
        self.assertEqual(config.render_options().render_cap, 7_500_000)

    def test_file_overrides_preset(self):
        config = RunConfig("[run]\npreset = published\n[pyramid]\nlevels = 4\n")
        self.assertEqual(config.pyramid_config().levels, 4)
        self.assertEqual(config.pyramid_config().budget, 2 ** 18)

    def test_regulariser_switches(self):
        loss = RunConfig("[train]\nopacity_reg = false\n").loss_config()
        self.assertEqual(loss.lambda_opacity, 0.0)
        self.assertAlmostEqual(loss.lambda_scale, 0.02)

    def test_bench_lists(self):
        bench = RunConfig("[bench]\nestimators = joint_score, pathwise\nsample_counts = 8,32\n").section("bench")
        self.assertEqual(bench["estimators"], ["joint_score", "pathwise"])
        self.assertEqual(bench["sample_counts"], [8, 32])
        with self.assertRaises(RunConfigError):
            RunConfig("[bench]\nsample_counts = 8,x\n")
        with self.assertRaises(RunConfigError):
            RunConfig("[bench]\nrepeats = 10\n")

    def test_dataclass_errors_surface_as_config_errors(self):
        with self.assertRaises(RunConfigError):
            RunConfig("[pyramid]\nbase_resolution = 1\n").pyramid_config()

    def test_effective_text_round_trips(self):
        config = RunConfig("[train]\nsamples = 321\nrounding = false\nestimator = pathwise\n", {"run": {"seed": 5}})
        again = RunConfig(config.to_text())
        self.assertEqual(again.raw, config.raw)
        self.assertEqual(again.train_config(), config.train_config())

    def test_from_file(self):
        with tempfile.TemporaryDirectory() as tmp:
            path = Path(tmp) / "run.ini"
            path.write_text("[scene]\nprimitives = 12\n")
            self.assertEqual(RunConfig.from_file(path).scene_spec().primitives, 12)
            with self.assertRaises(RunConfigError):
                RunConfig.from_file(Path(tmp) / "missing.ini")


class DescribeTests(SimpleTestCase):
    def test_every_key_listed_with_provenance(self):
        text = describe()
        for section, form_class in SECTIONS.items():
            self.assertIn(f"[{section}]", text)
            for key, field in form_class.base_fields.items():
                self.assertIn(field.help_text, (PUBLISHED, DESK))
                self.assertIn(f"  {key} = ", text)

    def test_published_constants_are_tagged(self):
        lines = {line.split("=")[0].strip(): line for line in describe().splitlines() if "=" in line}
        self.assertIn("(published)", lines["lambda_l1"])
        self.assertIn("0.8", lines["lambda_l1"])
        self.assertIn("(published)", lines["background_max"])
        self.assertIn("(published)", lines["o0"])
        self.assertIn("(published)", lines["s0"])

    def test_defaults_cover_every_section(self):
        self.assertEqual(set(defaults()), set(SECTIONS))
