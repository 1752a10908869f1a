from pathlib import Path

from ...mixing import MixSpec, build_mixed_set
from ...persistence import read_manifest, resolve_paths, write_manifest
from ..base import AugmentCommand


class Command(AugmentCommand):
    help = 'Add floor(ratio * |synthetic|) real night images to a synthetic manifest'

    def add_arguments(self, parser):
        super().add_arguments(parser)
        parser.add_argument('--synthetic', required=True)
        parser.add_argument('--night', required=True)
        parser.add_argument('--ratio', type=float, required=True, help='real night injection ratio, e.g. 0.05')
        parser.add_argument('--out', required=True)

    def run(self, config, **options):
        synthetic = resolve_paths(read_manifest(options['synthetic']), Path(options['synthetic']).parent)
        night = resolve_paths(read_manifest(options['night']), Path(options['night']).parent)

        spec = MixSpec(synthetic, night, options['ratio'], seed=config.mixing.seed)
        mixed = build_mixed_set(spec)
        write_manifest(mixed, options['out'], config_hash=config.hash)

        self.step(f'{len(synthetic)} synthetic + {spec.real_count} real night')
        self.stdout.write(self.style.SUCCESS(f"Mixed manifest written to {options['out']}"))
