from django.core.management.base import BaseCommand, CommandError

from ...training import verify_run


class Command(BaseCommand):
    help = 'Check that every artifact in a run directory carries the run config hash'

    def add_arguments(self, parser):
        parser.add_argument('--run-dir', required=True)

    def handle(self, *args, **options):
        result = verify_run(options['run_dir'])
        for name, value in sorted(result.artifacts.items()):
            marker = 'ok' if name not in result.mismatches else 'MISMATCH'
            self.stdout.write(f'   -> {name}: {value} [{marker}]')
        if not result.ok:
            raise CommandError(f'{len(result.mismatches)} artifact(s) do not match config hash {result.expected}')
        self.stdout.write(self.style.SUCCESS(f'{len(result.artifacts)} artifacts match {result.expected}'))
