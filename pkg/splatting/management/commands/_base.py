import argparse
import logging
from pathlib import Path

from django.conf import settings
from django.core.management.base import BaseCommand, CommandError, DjangoHelpFormatter

from probability.pyramid import PyramidError
from splatting.estimators import EstimatorConfigError
from splatting.forms import RunConfig, RunConfigError, describe

logger = logging.getLogger("splatting")


class _HelpFormatter(DjangoHelpFormatter, argparse.RawDescriptionHelpFormatter):
    pass


class ToolkitCommand(BaseCommand):
    """Maps toolkit errors to one-line CommandErrors."""

    def handle(self, *args, **options):
        try:
            return self.run(options)
        except CommandError:
            raise
        except (RunConfigError, EstimatorConfigError, PyramidError, ValueError, OSError) as exc:
            logger.warning("command failed: %s", exc, extra={"command": self.__class__.__module__})
            raise CommandError(" ".join(str(exc).split()))

    def run(self, options):
        raise NotImplementedError


class RunConfigCommand(ToolkitCommand):
    """Command reading a RunConfig file with flag overrides; lists every key in --help."""

    def create_parser(self, prog_name, subcommand, **kwargs):
        kwargs.setdefault("formatter_class", _HelpFormatter)
        kwargs.setdefault("epilog", "configuration keys (default, provenance):\n" + describe())
        return super().create_parser(prog_name, subcommand, **kwargs)

    def add_arguments(self, parser):
        parser.add_argument("--config", help="RunConfig file (INI sections, see below)")
        parser.add_argument("--seed", type=int, help="master seed")
        parser.add_argument("--threads", type=int, help="worker cap (default: HPP_THREADS)")

    def overrides(self, options) -> dict:
        """Section -> key -> value for flags given on the command line."""
        return {"run": {"seed": options.get("seed"), "threads": options.get("threads")}}

    def load_config(self, options) -> RunConfig:
        try:
            return RunConfig.from_file(options.get("config"), self.overrides(options))
        except RunConfigError as exc:
            raise CommandError(f"config: {exc}")

    def output_dir(self, config: RunConfig, flag=None) -> Path:
        path = Path(flag or config.section("run")["output_dir"] or settings.HPP_OUTPUT_DIR)
        try:
            path.mkdir(parents=True, exist_ok=True)
        except OSError as exc:
            raise CommandError(f"cannot create output directory {path}: {exc.strerror}")
        return path
