from pathlib import Path

from probability.pyramid import HashedProbabilityPyramid, dof_count, parameter_count
from probability.sampler import sample_batch, write_batch_csv

from ._base import RunConfigCommand


class Command(RunConfigCommand):
    help = "Print a pyramid's per-level masses; optionally dump a batch of samples as CSV."

    def add_arguments(self, parser):
        parser.add_argument("pyramid", nargs="?", help="pyramid snapshot or checkpoint directory")
        super().add_arguments(parser)
        parser.add_argument("--samples", type=int, default=0, help="samples to write with --csv")
        parser.add_argument("--csv", help="sample CSV path")

    def run(self, options):
        if options.get("pyramid"):
            path = Path(options["pyramid"])
            pyramid = HashedProbabilityPyramid.load(path / "pyramid.hpp" if path.is_dir() else path)
        else:
            pyramid = HashedProbabilityPyramid(self.load_config(options).pyramid_config())
        self.stdout.write(pyramid.dump_text())
        self.stdout.write(f"dof {dof_count(pyramid.config)} parameters {parameter_count(pyramid.config)}")
        if options.get("csv") and options["samples"] > 0:
            batch = sample_batch(pyramid, options["samples"], options.get("seed") or 0, threads=options.get("threads"))
            write_batch_csv(batch, options["csv"])
            self.stdout.write(f"wrote {len(batch)} samples to {options['csv']}")
