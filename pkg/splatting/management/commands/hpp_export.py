from splatting.trainer import extract_primitives, load_checkpoint, write_export

from ._base import CommandError, ToolkitCommand


class Command(ToolkitCommand):
    help = "Extract primitives from a checkpoint into a flat text list."

    def add_arguments(self, parser):
        parser.add_argument("checkpoint", help="checkpoint directory (ckpt_<iteration>)")
        parser.add_argument("--out", required=True, help="primitive list to write")
        parser.add_argument("--samples", type=int, help="samples to draw (default: the run's)")
        parser.add_argument("--seed", type=int, help="sampling seed")

    def run(self, options):
        state = load_checkpoint(options["checkpoint"])
        primitives = extract_primitives(state, options.get("samples"), options.get("seed"))
        if len(primitives) == 0:
            raise CommandError("extraction produced no primitives")
        write_export(options["out"], primitives)
        self.stdout.write(f"wrote {len(primitives)} primitives to {options['out']}")
