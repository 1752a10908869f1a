from pathlib import Path

from ...persistence import read_loaded_manifest
from ...training import load_checkpoint, restore_translator, translate_pool
from ..base import AugmentCommand


class Command(AugmentCommand):
    help = 'Translate a day manifest with a trained checkpoint; annotations are inherited'

    def add_arguments(self, parser):
        super().add_arguments(parser)
        parser.add_argument('--checkpoint', required=True)
        parser.add_argument('--day', required=True, help='day manifest to translate')
        parser.add_argument('--out-dir', required=True)
        parser.add_argument('--workers', type=int)
        parser.add_argument('--progress', action='store_true')

    def run(self, config, **options):
        checkpoint = load_checkpoint(options['checkpoint'])
        self.stdout.write(self.style.WARNING(
            f'Translating with step {checkpoint.step} of run {checkpoint.config_hash}'))

        day = read_loaded_manifest(options['day'])
        translated = translate_pool(restore_translator(checkpoint), day, options['out_dir'],
                                    seed=checkpoint.config.seed, config_hash=checkpoint.config_hash,
                                    workers=self.workers(options), progress=options['progress'])

        self.step(f'{len(translated)} synthetic night images')
        self.stdout.write(self.style.SUCCESS(f"Manifest written to {Path(options['out_dir']) / 'manifest.jsonl'}"))
