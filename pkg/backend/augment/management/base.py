from pathlib import Path

from django.conf import settings
from django.core.management.base import BaseCommand, CommandError

from ..config import RunConfig, load_config
from ..exceptions import AugmentError


class AugmentCommand(BaseCommand):
    """BaseCommand that loads the run config and turns pipeline errors into CommandError."""

    def add_arguments(self, parser):
        parser.add_argument('--config', help='YAML run config (defaults apply when omitted)')

    def handle(self, *args, **options):
        try:
            config = load_config(options.get('config'))
            forwarded = {key: value for key, value in options.items() if key != 'config'}
            return self.run(config, **forwarded)
        except AugmentError as exc:
            raise CommandError(f'{type(exc).__name__}: {exc}') from exc

    def run(self, config: RunConfig, **options):
        raise NotImplementedError

    def step(self, message: str) -> None:
        self.stdout.write(f'   -> {message}')

    def workers(self, options) -> int:
        return options.get('workers') or settings.NIGHTSHIFT_WORKERS

    def run_dir(self, config: RunConfig, options) -> Path:
        return Path(options.get('run_dir') or settings.NIGHTSHIFT_RUNS_DIR / config.run.name)
