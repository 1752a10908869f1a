from ...persistence import read_loaded_manifest
from ...training import train
from ..base import AugmentCommand


class Command(AugmentCommand):
    help = 'Train the day-to-night generator (LoRA adapters, skip mixers, projection heads)'

    def add_arguments(self, parser):
        super().add_arguments(parser)
        parser.add_argument('--day', required=True, help='day manifest')
        parser.add_argument('--night', required=True, help='real night manifest')
        parser.add_argument('--run-dir', help='defaults to $NIGHTSHIFT_RUNS_DIR/<run.name>')
        parser.add_argument('--steps', type=int, help='override training.total_steps')
        parser.add_argument('--progress', action='store_true')

    def run(self, config, **options):
        run_dir = self.run_dir(config, options)
        self.stdout.write(self.style.WARNING(f'Training run {config.run.name} ({config.hash})'))

        # 1. Data
        day = read_loaded_manifest(options['day'])
        night = read_loaded_manifest(options['night'])
        self.step(f'{len(day)} day / {len(night)} night images')

        # 2. Loop
        result = train(config, day, night, run_dir=run_dir, steps=options['steps'], progress=options['progress'])

        last = result.reports[-1].total if result.reports else float('nan')
        self.step(f'{len(result.reports)} steps, final total loss {last:.6f}')
        self.stdout.write(self.style.SUCCESS(f'Checkpoints written to {run_dir / "checkpoints"}'))
