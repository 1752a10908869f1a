from pathlib import Path

from ...domain import DAY, NIGHT
from ...ecp import PUBLISHED_SCALE, ingest_ecp
from ...persistence import write_manifest
from ..base import AugmentCommand


class Command(AugmentCommand):
    help = 'Convert an ECP labels/<city>/<name>.json tree into a dataset manifest'

    def add_arguments(self, parser):
        super().add_arguments(parser)
        parser.add_argument('--labels', required=True, help='ECP labels directory for one split')
        parser.add_argument('--images', required=True, help='matching ECP img directory')
        parser.add_argument('--domain', choices=(DAY, NIGHT), required=True)
        parser.add_argument('--out', required=True, help='manifest path (.jsonl)')
        parser.add_argument('--scale', type=float, nargs=2, metavar=('SX', 'SY'),
                            help=f'rescale boxes and images, e.g. {PUBLISHED_SCALE[0]} {PUBLISHED_SCALE[1]}')
        parser.add_argument('--limit', type=int)

    def run(self, config, **options):
        out = Path(options['out'])
        scale = tuple(options['scale']) if options['scale'] else None
        self.stdout.write(self.style.WARNING(f"Ingesting ECP {options['domain']} annotations..."))

        manifest = ingest_ecp(options['labels'], options['images'], options['domain'], scale=scale,
                              out_dir=out.parent if scale else None, limit=options['limit'])
        write_manifest(manifest, out, config_hash=config.hash)

        pedestrians = sum(len(s.pedestrians) for s in manifest)
        self.step(f'{len(manifest)} images, {pedestrians} pedestrians')
        self.stdout.write(self.style.SUCCESS(f'Manifest written to {out}'))
