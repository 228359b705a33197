import dataclasses
import logging
import math
from pathlib import Path

from django.utils import timezone

from splatting.models import TrainingRun
from splatting.scenes import load_dataset
from splatting.trainer import (
    TrainingDiverged,
    evaluate_primitives,
    extract_primitives,
    initial_state,
    load_checkpoint,
    refine,
    train,
    write_export,
    write_metrics,
)

from ._base import CommandError, RunConfigCommand

logger = logging.getLogger("splatting")


class Command(RunConfigCommand):
    help = "Train a pyramid and attribute table on a dataset directory, then refine the extracted primitives."

    def add_arguments(self, parser):
        super().add_arguments(parser)
        parser.add_argument("--data", required=True, help="dataset directory written by hpp_synth")
        parser.add_argument("--out", help="run directory (default: [run] output_dir)")
        parser.add_argument("--iters", type=int, dest="iterations", help="probabilistic iterations")
        parser.add_argument("--refine-iters", type=int, dest="refine_iters")
        parser.add_argument("--samples", type=int, help="samples per iteration")
        parser.add_argument("--estimator", choices=["control_variate", "joint_score", "pathwise"])
        parser.add_argument("--resume", help="checkpoint directory to continue from")
        parser.add_argument("--progress", action="store_true", help="show progress bars")

    def overrides(self, options):
        values = super().overrides(options)
        values["train"] = {k: options.get(k) for k in ("iterations", "refine_iters", "samples", "estimator")}
        if options.get("estimator") == "pathwise":
            values["train"]["rounding"] = False
        return values

    def run(self, options):
        config = self.load_config(options)
        out = self.output_dir(config, options.get("out"))
        try:
            dataset = load_dataset(options["data"])
        except (FileNotFoundError, ValueError) as exc:
            raise CommandError(f"dataset: {exc}")

        if options.get("resume"):
            state = load_checkpoint(options["resume"])
            extend = {k: options[k] for k in ("iterations", "refine_iters") if options.get(k) is not None}
            if extend:
                state.config = dataclasses.replace(state.config, **extend)
        else:
            state = initial_state(config.pyramid_config(), config.train_config(), config.loss_config(),
                                  config.activation_config(), config.contraction_config(), config.render_options())
        (out / "run.ini").write_text(config.to_text())

        job = TrainingRun.objects.create(
            dataset_dir=str(Path(options["data"]).resolve()),
            output_dir=str(out.resolve()),
            estimator=state.config.estimator,
            seed=state.config.seed,
            config_json={"train": state.config.to_dict(), "loss": state.loss_config.to_dict()},
            status="RUNNING",
            iteration=state.iteration,
        )
        progress = options.get("progress", False)
        try:
            train(state, dataset, out, progress)
            primitives = extract_primitives(state)
            before = evaluate_primitives(primitives, dataset, options=state.render_options)
            refined, refine_rows = refine(primitives, dataset, state.config, state.loss_config,
                                          options=state.render_options, progress=progress,
                                          activation=state.table.activation)
            after = evaluate_primitives(refined, dataset, options=state.render_options)
            write_export(out / "primitives.txt", refined)
            if refine_rows:
                write_metrics(refine_rows, out / "refine_metrics.csv")
        except TrainingDiverged as exc:
            job.status = "FAILED"
            job.error_message = f"{exc} (state dumped to {exc.dump_path})"
            job.iteration = state.iteration
            job.completed_at = timezone.now()
            job.save()
            logger.exception("training aborted", extra={"run": job.id, "dump": str(exc.dump_path)})
            raise CommandError(job.error_message)
        except Exception as exc:
            job.status = "FAILED"
            job.error_message = str(exc)
            job.completed_at = timezone.now()
            job.save()
            raise

        job.status = "DONE"
        job.iteration = state.iteration
        job.final_psnr = after["psnr"] if math.isfinite(after["psnr"]) else None
        job.completed_at = timezone.now()
        job.save()
        self.stdout.write(
            f"run {job.id}: {state.iteration} iterations, held-out psnr {before['psnr']:.2f} dB, "
            f"refined {after['psnr']:.2f} dB, {len(refined)} primitives in {out}"
        )
