from ...curation import CalibrationSet, calibrate_threshold, f1_at, fidelity_score
from ...exceptions import CalibrationError
from ...persistence import read_calibration_labels, read_loaded_manifest
from ...registry import build_encoder
from ...utils import jsonl
from ...utils.images import sample_tensor
from ..base import AugmentCommand


class Command(AugmentCommand):
    help = 'Pick the stage-1 fidelity threshold that maximises F1 on hand-labelled translations'

    def add_arguments(self, parser):
        super().add_arguments(parser)
        parser.add_argument('--synthetic', required=True, help='translated manifest (source_image_id set)')
        parser.add_argument('--sources', required=True, help='day manifest the translations came from')
        parser.add_argument('--labels', required=True, help='JSONL of {image_id, label: accepted|rejected}')
        parser.add_argument('--out', required=True, help='calibration result JSON')

    def run(self, config, **options):
        synthetic = read_loaded_manifest(options['synthetic'])
        sources = read_loaded_manifest(options['sources'])
        labels = read_calibration_labels(options['labels'])
        encoder = build_encoder(config.encoder)
        self.stdout.write(self.style.WARNING(f'Scoring {len(labels)} labelled translations with {encoder.encoder_id}'))

        pairs = []
        for image_id, label in sorted(labels.items()):
            entry = synthetic.get(image_id)
            if entry is None:
                raise CalibrationError(f'labelled image {image_id!r} is not in the synthetic manifest')
            source = sources.get(entry.source_image_id) if entry.source_image_id else None
            if source is None:
                raise CalibrationError(f'{image_id}: source image {entry.source_image_id!r} not found')
            score = fidelity_score(encoder, sample_tensor(source), sample_tensor(entry), source.image_id, image_id)
            pairs.append((score.value, label))

        calibration = CalibrationSet(tuple(pairs))
        threshold = calibrate_threshold(calibration)
        f1 = f1_at(calibration.scores, calibration.accepted, threshold)
        self.step(f'threshold {threshold:.6f} (F1 {f1:.4f})')

        jsonl.write_json(options['out'], {
            'header': {'config_hash': config.hash, 'extractor': encoder.encoder_id},
            'threshold': threshold,
            'f1': f1,
            'pairs': [{'image_id': image_id, 'score': score, 'label': label}
                      for image_id, (score, label) in zip(sorted(labels), calibration.pairs)],
        })
        self.stdout.write(self.style.SUCCESS(f"Calibration written to {options['out']}"))
