from pathlib import Path

import numpy as np

from splatting.images import write_image, write_raw
from splatting.losses import metrics_psnr_ssim
from splatting.renderer import RenderOptions, render
from splatting.scenes import load_dataset
from splatting.trainer import extract_primitives, load_checkpoint, read_export

from ._base import CommandError, ToolkitCommand


class Command(ToolkitCommand):
    help = "Render a checkpoint or an exported primitive list from a dataset's cameras."

    def add_arguments(self, parser):
        parser.add_argument("source", help="checkpoint directory or primitive list")
        parser.add_argument("--data", required=True, help="dataset directory providing the cameras")
        parser.add_argument("--out", required=True, help="directory for rendered images")
        parser.add_argument("--views", help="comma-separated view indices (default: all)")
        parser.add_argument("--background", type=float, nargs=3, default=(0.0, 0.0, 0.0))
        parser.add_argument("--format", choices=["ppm", "png", "raw"], default="ppm")
        parser.add_argument("--samples", type=int, help="extraction samples for a checkpoint")
        parser.add_argument("--seed", type=int, help="extraction seed for a checkpoint")

    def run(self, options):
        source = Path(options["source"])
        if source.is_dir():
            state = load_checkpoint(source)
            primitives = extract_primitives(state, options.get("samples"), options.get("seed"))
            render_options = state.render_options
        else:
            primitives = read_export(source)
            render_options = RenderOptions()
        dataset = load_dataset(options["data"])
        if options.get("views"):
            try:
                views = [int(v) for v in options["views"].split(",")]
            except ValueError:
                raise CommandError("--views expects comma-separated integers")
        else:
            views = list(range(len(dataset)))
        if any(not 0 <= v < len(dataset) for v in views):
            raise CommandError(f"view index out of range (dataset has {len(dataset)} views)")

        out = Path(options["out"])
        out.mkdir(parents=True, exist_ok=True)
        background = np.asarray(options["background"], dtype=np.float64)
        for view in views:
            camera = dataset.cameras[view]
            image, _ = render(primitives.splats(camera), camera, background, render_options)
            path = out / f"{view:03d}.{options['format']}"
            if options["format"] == "raw":
                write_raw(path, image)
            else:
                write_image(path, np.clip(image, 0.0, 1.0))
            scores = metrics_psnr_ssim(image, dataset.composite(view, background))
            self.stdout.write(f"view {view} ({dataset.splits[view]}): psnr {scores['psnr']:.2f} dB "
                              f"ssim {scores['ssim']:.4f} -> {path}")
