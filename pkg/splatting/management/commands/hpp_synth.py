from splatting.scenes import save_dataset, synth_scene

from ._base import RunConfigCommand


class Command(RunConfigCommand):
    help = "Synthesise a ground-truth scene and write its dataset directory."

    def add_arguments(self, parser):
        super().add_arguments(parser)
        parser.add_argument("--out", help="dataset directory (default: [run] output_dir)")
        parser.add_argument("--primitives", type=int, help="ground-truth primitive count")
        parser.add_argument("--cameras", type=int, help="cameras on the ring")
        parser.add_argument("--width", type=int)
        parser.add_argument("--height", type=int)

    def overrides(self, options):
        values = super().overrides(options)
        values["scene"] = {k: options.get(k) for k in ("primitives", "cameras", "width", "height")}
        return values

    def run(self, options):
        config = self.load_config(options)
        out = self.output_dir(config, options.get("out"))
        _, dataset = synth_scene(config.scene_spec(), config.render_options())
        save_dataset(dataset, out)
        (out / "run.ini").write_text(config.to_text())
        self.stdout.write(
            f"wrote {len(dataset)} views ({len(dataset.heldout_views)} held out) to {out}"
        )
