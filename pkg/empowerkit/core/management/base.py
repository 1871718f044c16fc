"""
Empowerkit - Command base

Shared handling for the run commands: config resolution, run directories,
run records and the mapping of errors onto exit codes (2 for configuration
and checkpoint problems, 1 for everything else).
"""
import logging

from django.core.management.base import BaseCommand, CommandError
from django.utils import timezone

from ..exceptions import CheckpointError, ConfigError, EmpowerkitError
from ..forms import echo_config, parse_config_file, parse_overrides, resolve_config
from ..runs import prepare_run_dir, record_run, run_id_for

logger = logging.getLogger(__name__)


class RunCommand(BaseCommand):
    """
    Subclasses set ``command_name``, declare dedicated flags in
    ``add_run_arguments`` (listing their dests in ``config_flags``) and
    implement ``run(form, run_dir, options)``, returning the text to print.
    """

    command_name = None
    config_flags = ()

    def add_arguments(self, parser):
        parser.add_argument('--config', help="Flat key = value config file")
        parser.add_argument(
            '--set', dest='overrides', action='append', default=[], metavar='KEY=VALUE',
            help="Override one config key; may be repeated",
        )
        parser.add_argument('--run-id', dest='run_id', help="Output directory name under EMPOWERKIT_OUT")
        self.add_run_arguments(parser)

    def add_run_arguments(self, parser):
        pass

    def flag_overrides(self, options):
        values = {}
        for name in self.config_flags:
            value = options.get(name)
            if value is None or value is False:
                continue
            values[name] = 'true' if value is True else str(value)
        return values

    def handle(self, *args, **options):
        try:
            file_values = parse_config_file(options['config']) if options.get('config') else {}
            overrides = {**self.flag_overrides(options), **parse_overrides(options.get('overrides'))}
            form = resolve_config(self.command_name, file_values, overrides)
        except ConfigError as exc:
            raise CommandError(str(exc), returncode=2) from exc

        echo = echo_config(form)
        run_id = options.get('run_id') or run_id_for(self.command_name, self.identity(echo, options))
        run_dir = prepare_run_dir(run_id, echo)
        started_at = timezone.now()
        logger.info("%s run %s writing to %s", self.command_name, run_id, run_dir)

        try:
            summary = self.run(form, run_dir, options)
        except (ConfigError, CheckpointError) as exc:
            record_run(self.command_name, run_id, run_dir, echo, 2, started_at, str(exc))
            raise CommandError(str(exc), returncode=2) from exc
        except CommandError as exc:
            record_run(self.command_name, run_id, run_dir, echo, exc.returncode, started_at, str(exc))
            raise
        except EmpowerkitError as exc:
            record_run(self.command_name, run_id, run_dir, echo, 1, started_at, str(exc))
            raise CommandError(str(exc), returncode=1) from exc

        record_run(self.command_name, run_id, run_dir, echo, 0, started_at)
        if summary:
            self.stdout.write(summary)

    def identity(self, echo, options):
        """Text hashed into the default run id."""
        return echo

    def run(self, form, run_dir, options):
        raise NotImplementedError
