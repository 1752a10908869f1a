from pathlib import Path

from django.conf import settings

from ...domain import DAY, NIGHT
from ...persistence import write_manifest
from ...toys.scenes import SCENE_SIZE, make_split, write_split
from ..base import AugmentCommand

SPLITS = (
    ('day', DAY, 'num_day'),
    ('night', NIGHT, 'num_night'),
    ('val_night', NIGHT, 'num_val'),
)


class Command(AugmentCommand):
    help = 'Write the procedural bright/dark toy scenes (day, night and night validation splits)'

    def add_arguments(self, parser):
        super().add_arguments(parser)
        parser.add_argument('--out-dir', help='defaults to $NIGHTSHIFT_DATA_DIR/toy')
        parser.add_argument('--num-day', type=int, default=32)
        parser.add_argument('--num-night', type=int, default=32)
        parser.add_argument('--num-val', type=int, default=16)
        parser.add_argument('--size', type=int, nargs=2, default=SCENE_SIZE, metavar=('HEIGHT', 'WIDTH'))

    def run(self, config, **options):
        out_dir = Path(options['out_dir'] or settings.NIGHTSHIFT_DATA_DIR / 'toy')
        self.stdout.write(self.style.WARNING(f'Writing toy scenes to {out_dir}'))
        for name, domain, count_key in SPLITS:
            manifest = make_split(name, domain, options[count_key], config.seed, tuple(options['size']))
            written = write_split(manifest, out_dir / name)
            write_manifest(written, out_dir / name / 'manifest.jsonl', config_hash=config.hash)
            self.step(f'{name}: {len(written)} scenes')
        self.stdout.write(self.style.SUCCESS('Toy dataset ready.'))
