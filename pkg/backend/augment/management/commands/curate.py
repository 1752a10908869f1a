from pathlib import Path

from ...curation import curate
from ...exceptions import ConfigError
from ...persistence import (read_loaded_manifest, read_manifest, resolve_paths, write_curation_report,
                             write_manifest)
from ...registry import build_encoder
from ...toys.classifier import ToyPatchClassifier, fit_patch_classifier
from ...utils import jsonl
from ...utils.seeding import derive_seed
from ..base import AugmentCommand


class Command(AugmentCommand):
    help = 'Two-stage curation: fidelity gate, then per-pedestrian patch classification'

    def add_arguments(self, parser):
        super().add_arguments(parser)
        parser.add_argument('--pool', required=True, help='translated manifest to curate')
        parser.add_argument('--sources', required=True, help='day manifest the pool was translated from')
        parser.add_argument('--night', required=True, help='real night manifest the patch classifier is fitted on')
        group = parser.add_mutually_exclusive_group()
        group.add_argument('--threshold', type=float, help='override curation.threshold')
        group.add_argument('--calibration', help='JSON written by calibrate_threshold')
        parser.add_argument('--out-dir', required=True)
        parser.add_argument('--workers', type=int)

    def _threshold(self, config, options) -> float:
        if options.get('threshold') is not None:
            return options['threshold']
        if options.get('calibration'):
            payload = jsonl.read_json(options['calibration'])
            if 'threshold' not in payload:
                raise ConfigError(f"{options['calibration']}: no threshold recorded")
            return float(payload['threshold'])
        return config.curation.threshold

    def run(self, config, **options):
        section = config.curation
        out_dir = Path(options['out_dir'])
        threshold = self._threshold(config, options)
        self.stdout.write(self.style.WARNING(f'Curating at fidelity threshold {threshold:.6f}'))

        # 1. Inputs
        # lazily loaded; curate quarantines unreadable images
        pool = resolve_paths(read_manifest(options['pool']), Path(options['pool']).parent)
        sources = resolve_paths(read_manifest(options['sources']), Path(options['sources']).parent)
        night = read_loaded_manifest(options['night'])
        self.step(f'{len(pool)} translations, {len(sources)} sources')

        # 2. Stage-2 classifier
        crop_size = (section.crop_width, section.crop_height)
        classifier = ToyPatchClassifier(input_size=(section.crop_height, section.crop_width),
                                        seed=derive_seed(config.seed, 'classifier'))
        fit_patch_classifier(classifier, night.entries, crop_size, negatives_per_image=section.negatives_per_image,
                             steps=section.classifier_steps, seed=config.seed,
                             attempt_budget=section.attempt_budget)
        self.step(f'patch classifier fitted on {len(night)} night images')

        # 3. Gates
        curated, report = curate(pool, sources, build_encoder(config.encoder), classifier, threshold,
                                 workers=self.workers(options))
        write_manifest(curated, out_dir / 'curated.jsonl', config_hash=config.hash)
        write_curation_report(report.records, out_dir / 'curation_report.jsonl', config_hash=config.hash)

        counts = report.counts
        self.step(f"kept {counts['kept']}, rejected {counts['rejected']}, quarantined {counts['quarantined']}")
        self.stdout.write(self.style.SUCCESS(f'Curated manifest written to {out_dir / "curated.jsonl"}'))
