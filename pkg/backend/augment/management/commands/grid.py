from pathlib import Path

from ...persistence import read_loaded_manifest, read_manifest, resolve_paths
from ...training import PENDING, run_experiment_grid
from ..base import AugmentCommand


class Command(AugmentCommand):
    help = 'Detection results over real-night injection ratios, one row per ratio'

    def add_arguments(self, parser):
        super().add_arguments(parser)
        parser.add_argument('--synthetic', required=True, help='curated synthetic night manifest')
        parser.add_argument('--night', required=True, help='real night training manifest')
        parser.add_argument('--val-night', required=True)
        parser.add_argument('--day', help='day training manifest; adds a day-only baseline row')
        parser.add_argument('--target', action='store_true', help='add a real-night target row')
        parser.add_argument('--ratios', type=float, nargs='+', help='override mixing.ratios')
        parser.add_argument('--out-dir', required=True)
        parser.add_argument('--external', action='store_true',
                            help='write row manifests and read <label>.detections.jsonl instead of fitting the toy detector')
        parser.add_argument('--progress', action='store_true')

    def _manifest(self, path, external):
        if external:
            return resolve_paths(read_manifest(path), Path(path).parent)
        return read_loaded_manifest(path)

    def run(self, config, **options):
        external = options['external']
        ratios = options['ratios'] or list(config.mixing.ratios)
        self.stdout.write(self.style.WARNING(f'Experiment grid over ratios {ratios}'))

        synthetic = self._manifest(options['synthetic'], external)
        night = self._manifest(options['night'], external)
        val_night = read_loaded_manifest(options['val_night'])
        day = self._manifest(options['day'], external) if options.get('day') else None

        rows = run_experiment_grid(config, ratios, synthetic, night, val_night, day=day,
                                   include_target=options['target'], out_dir=options['out_dir'],
                                   external=external, progress=options['progress'])

        for row in rows:
            if row.status == PENDING:
                self.stdout.write(self.style.WARNING(f'   -> {row.label}: waiting for {row.label}.detections.jsonl'))
                continue
            scores = ', '.join(f'{k} {"n/a" if v is None else f"{100.0 * v:.2f}%"}' for k, v in row.lamr.items())
            self.step(f'{row.label} ({row.train_size} images): {scores}')
        self.stdout.write(self.style.SUCCESS(f"Grid report written to {Path(options['out_dir']) / 'grid_report.json'}"))
