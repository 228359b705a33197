from pathlib import Path

from tqdm import tqdm

from splatting.estimators import (
    AdditiveBenchSetup,
    SplatBenchSetup,
    summarize,
    variance_bench,
    write_variance_csv,
)

from ._base import RunConfigCommand


class Command(RunConfigCommand):
    help = "Measure per-parameter variance of the logit gradient estimators."

    def add_arguments(self, parser):
        super().add_arguments(parser)
        parser.add_argument("--dims", type=int, choices=[1, 3])
        parser.add_argument("--estimators", help="comma-separated: joint_score, marginal_1d, pathwise, "
                                                 "control_variate, exact")
        parser.add_argument("--repeats", type=int)
        parser.add_argument("--M", dest="sample_counts", help="comma-separated sample counts")
        parser.add_argument("--rounding", action="store_true", default=None, help="round additive-model samples")
        parser.add_argument("--out", help="CSV path (default: <output_dir>/variance.csv)")
        parser.add_argument("--progress", action="store_true")

    def overrides(self, options):
        values = super().overrides(options)
        values["bench"] = {k: options.get(k) for k in ("dims", "estimators", "repeats", "sample_counts", "rounding")}
        return values

    def setup(self, config):
        bench = config.section("bench")
        if bench["dims"] == 1:
            return AdditiveBenchSetup(levels=bench["levels"], rounding=bench["rounding"], seed=config.seed)
        return SplatBenchSetup.default(bench["resolution"], bench["image_size"], config.seed)

    def run(self, options):
        config = self.load_config(options)
        bench = config.section("bench")
        setup = self.setup(config)
        out = Path(options["out"]) if options.get("out") else self.output_dir(config) / "variance.csv"
        total = len(bench["estimators"]) * len(bench["sample_counts"])
        with tqdm(total=total, disable=not options.get("progress"), desc="bench") as bar:
            rows = variance_bench(setup, bench["estimators"], bench["repeats"], bench["sample_counts"],
                                  config.seed, config.threads, bar)
        write_variance_csv(rows, out)
        for estimator, by_m in summarize(rows).items():
            slope = next(r.slope for r in rows if r.estimator == estimator)
            cells = " ".join(f"M={m}:{v:.6g}" for m, v in sorted(by_m.items()))
            self.stdout.write(f"{estimator} slope={slope:.3f} {cells}")
        self.stdout.write(f"wrote {out}")
