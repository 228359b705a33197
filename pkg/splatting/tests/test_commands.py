import csv
import tempfile
from io import StringIO
from pathlib import Path

import numpy as np
from django.core.management import call_command, load_command_class
from django.core.management.base import CommandError
from django.test import SimpleTestCase, TestCase

from splatting.models import TrainingRun
from splatting.scenes import load_dataset
from splatting.trainer import load_checkpoint, read_export

SMALL_RUN = """\
[pyramid]
levels = 3
budget = 0

[train]
samples = 200
iterations = 2
refine_iters = 2
eval_every = 0
checkpoint_every = 0

[run]
threads = 1
"""


def run(name, *args):
    out = StringIO()
    call_command(name, *args, stdout=out)
    return out.getvalue()


class CommandTestMixin:
    def setUp(self):
        super().setUp()
        self._tmp = tempfile.TemporaryDirectory()
        self.tmp = Path(self._tmp.name)
        self.config = self.tmp / "run.ini"
        self.config.write_text(SMALL_RUN)

    def tearDown(self):
        self._tmp.cleanup()
        super().tearDown()

    def synth(self, name="data", *extra):
        path = self.tmp / name
        run("hpp_synth", "--config", str(self.config), "--out", str(path), "--primitives", "15", "--cameras", "5",
            "--width", "12", "--height", "12", *extra)
        return path


class SynthCommandTests(CommandTestMixin, SimpleTestCase):
    def test_writes_dataset(self):
        path = self.synth()
        dataset = load_dataset(path)
        self.assertEqual(len(dataset), 5)
        self.assertEqual(dataset.images.shape, (5, 12, 12, 3))
        self.assertEqual(len(dataset.ground_truth), 15)
        self.assertIn("primitives = 15", (path / "run.ini").read_text())

    def test_same_seed_same_bytes(self):
        first = self.synth("a", "--seed", "3")
        second = self.synth("b", "--seed", "3")
        for name in ("cameras.txt", "ground_truth.txt", "images/000.ppm"):
            self.assertEqual((first / name).read_bytes(), (second / name).read_bytes())
        third = self.synth("c", "--seed", "4")
        self.assertNotEqual((first / "ground_truth.txt").read_bytes(), (third / "ground_truth.txt").read_bytes())

    def test_bad_config_is_one_line_error(self):
        self.config.write_text("[scene]\ncolour = red\n")
        with self.assertRaisesMessage(CommandError, "config: unknown key scene.colour"):
            self.synth()


class DumpCommandTests(CommandTestMixin, SimpleTestCase):
    def test_prints_uniform_pyramid(self):
        output = run("hpp_dump", "--config", str(self.config))
        self.assertIn("levels=3", output)
        self.assertIn("level 2 resolution=8", output)
        self.assertIn("0.125", output)

    def test_writes_sample_csv(self):
        path = self.tmp / "samples.csv"
        run("hpp_dump", "--config", str(self.config), "--samples", "25", "--csv", str(path), "--seed", "2")
        with open(path, newline="") as handle:
            rows = list(csv.reader(handle))
        self.assertEqual(rows[0][:3], ["bin_0", "bin_1", "bin_2"])
        self.assertEqual(len(rows), 26)

    def test_missing_snapshot(self):
        with self.assertRaises(CommandError):
            run("hpp_dump", str(self.tmp / "missing.hpp"))


class BenchCommandTests(CommandTestMixin, SimpleTestCase):
    def test_additive_bench_csv(self):
        out = self.tmp / "variance.csv"
        self.config.write_text(SMALL_RUN + "\n[bench]\nlevels = 3\n")
        output = run("hpp_bench", "--config", str(self.config), "--dims", "1", "--estimators",
                     "joint_score,marginal_1d", "--repeats", "30", "--M", "4,16", "--out", str(out))
        self.assertIn("joint_score slope=", output)
        self.assertIn("marginal_1d slope=", output)
        with open(out, newline="") as handle:
            rows = list(csv.DictReader(handle))
        self.assertEqual(len(rows), 2 * 2 * 14)
        self.assertEqual({r["M"] for r in rows}, {"4", "16"})

    def test_too_few_repeats(self):
        with self.assertRaisesMessage(CommandError, "bench.repeats"):
            run("hpp_bench", "--config", str(self.config), "--repeats", "5")

    def test_inapplicable_estimator(self):
        with self.assertRaisesMessage(CommandError, "control_variate is not applicable"):
            run("hpp_bench", "--config", str(self.config), "--dims", "1", "--estimators", "control_variate",
                "--repeats", "30", "--M", "4", "--out", str(self.tmp / "v.csv"))


class TrainCommandTests(CommandTestMixin, TestCase):
    def test_train_export_render(self):
        data = self.synth()
        out = self.tmp / "run"
        output = run("hpp_train", "--config", str(self.config), "--data", str(data), "--out", str(out))
        self.assertIn("2 iterations", output)
        for name in ("ckpt_2/pyramid.hpp", "ckpt_2/attributes.hpa", "ckpt_2/optimizer.npz", "metrics.csv",
                     "primitives.txt", "refine_metrics.csv", "run.ini"):
            self.assertTrue((out / name).exists(), name)
        job = TrainingRun.objects.get()
        self.assertEqual(job.status, "DONE")
        self.assertEqual(job.iteration, 2)
        self.assertEqual(job.config_json["train"]["samples"], 200)

        export = self.tmp / "export.txt"
        run("hpp_export", str(out / "ckpt_2"), "--out", str(export), "--seed", "1")
        self.assertGreater(len(read_export(export)), 0)

        renders = self.tmp / "renders"
        output = run("hpp_render", str(export), "--data", str(data), "--out", str(renders), "--views", "0,4",
                     "--format", "raw")
        self.assertIn("view 4 (test)", output)
        self.assertEqual(sorted(p.name for p in renders.iterdir()), ["000.raw", "004.raw"])

        output = run("hpp_render", str(out / "ckpt_2"), "--data", str(data), "--out", str(renders),
                     "--views", "1", "--format", "png")
        self.assertIn("psnr", output)
        self.assertTrue((renders / "001.png").exists())

    def test_zero_iterations(self):
        data = self.synth()
        out = self.tmp / "run"
        run("hpp_train", "--config", str(self.config), "--data", str(data), "--out", str(out), "--iters", "0",
            "--refine-iters", "0")
        state = load_checkpoint(out / "ckpt_0")
        self.assertEqual(state.iteration, 0)
        for array in state.pyramid.logits:
            np.testing.assert_array_equal(array, 0.0)
        self.assertFalse((out / "refine_metrics.csv").exists())
        self.assertEqual(TrainingRun.objects.get().status, "DONE")

    def test_resume_extends_run(self):
        data = self.synth()
        out = self.tmp / "run"
        run("hpp_train", "--config", str(self.config), "--data", str(data), "--out", str(out),
            "--refine-iters", "0")
        run("hpp_train", "--config", str(self.config), "--data", str(data), "--out", str(out),
            "--resume", str(out / "ckpt_2"), "--iters", "3", "--refine-iters", "0")
        self.assertEqual(load_checkpoint(out / "ckpt_3").iteration, 3)
        self.assertEqual(TrainingRun.objects.count(), 2)

    def test_pathwise_turns_rounding_off(self):
        data = self.synth()
        run("hpp_train", "--config", str(self.config), "--data", str(data), "--out", str(self.tmp / "run"),
            "--estimator", "pathwise", "--iters", "1", "--refine-iters", "0")
        job = TrainingRun.objects.get()
        self.assertEqual(job.estimator, "pathwise")
        self.assertFalse(job.config_json["train"]["rounding"])

    def test_missing_dataset(self):
        with self.assertRaisesMessage(CommandError, "dataset:"):
            run("hpp_train", "--config", str(self.config), "--data", str(self.tmp / "nowhere"),
                "--out", str(self.tmp / "run"))
        self.assertFalse(TrainingRun.objects.exists())


class HelpTests(SimpleTestCase):
    def help_text(self, name):
        command = load_command_class("splatting", name)
        return command.create_parser("manage.py", name).format_help()

    def test_config_commands_list_keys(self):
        for name in ("hpp_synth", "hpp_train", "hpp_bench", "hpp_dump"):
            text = self.help_text(name)
            self.assertIn("--config", text)
            self.assertIn("configuration keys", text)

    def test_checkpoint_commands_take_no_config(self):
        for name in ("hpp_render", "hpp_export"):
            text = self.help_text(name)
            self.assertNotIn("--config", text)
            self.assertNotIn("configuration keys", text)
            with self.assertRaises(TypeError):
                call_command(name, "somewhere", config="run.ini", out="x")


class ExportCommandTests(CommandTestMixin, SimpleTestCase):
    def test_not_a_checkpoint(self):
        with self.assertRaisesMessage(CommandError, "state.json missing"):
            run("hpp_export", str(self.tmp), "--out", str(self.tmp / "x.txt"))

    def test_render_rejects_bad_views(self):
        data = self.synth()
        export = self.tmp / "gt.txt"
        export.write_text(" ".join(["0.1"] * 17) + "\n")
        with self.assertRaisesMessage(CommandError, "view index out of range"):
            run("hpp_render", str(export), "--data", str(data), "--out", str(self.tmp / "r"), "--views", "9")
