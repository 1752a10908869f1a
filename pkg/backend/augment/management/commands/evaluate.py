from pathlib import Path

from django.conf import settings
from django.core.management.base import CommandError

from ...detection import detect, fit_detector
from ...encoder import FeatureCache
from ...evaluation import (ReferenceSelection, emit_report, evaluate_subsets, extract_features, fit_gaussian,
                           frechet_distance, load_reference_table, reference_grid, wasserstein_distance)
from ...persistence import read_detections, read_loaded_manifest, write_detections
from ...registry import build_detector, build_encoder
from ...utils.seeding import derive_seed
from ..base import AugmentCommand

COMMENSURATE_ENCODERS = ('dinov2',)


class Command(AugmentCommand):
    help = 'LAMR per subset plus FID / sliced Wasserstein, reported beside the published references'

    def add_arguments(self, parser):
        super().add_arguments(parser)
        parser.add_argument('--val-night', help='night validation manifest (ground truth for LAMR)')
        parser.add_argument('--val-day', help='day validation manifest; scored too when --train is given')
        source = parser.add_mutually_exclusive_group()
        source.add_argument('--detections', help='detection dump on --val-night')
        source.add_argument('--train', help='manifest to fit the toy detector on before scoring')
        parser.add_argument('--real', help='real night manifest for FID / WD')
        parser.add_argument('--fake', help='translated manifest for FID / WD')
        parser.add_argument('--feature-cache', help='directory for cached pooled features')
        parser.add_argument('--translator', default='pipeline', help='reference row to compare against')
        parser.add_argument('--reference-detector', default='pedestron', choices=['pedestron', 'yolo'])
        parser.add_argument('--ratio', type=float, default=0.0, help='injection ratio of the reference row')
        parser.add_argument('--out', required=True, help='report JSON')

    def _quality(self, config, options):
        if not (options.get('real') and options.get('fake')):
            return None, None, None
        encoder = build_encoder(config.encoder)
        cache = FeatureCache(options['feature_cache'], encoder.encoder_id) if options.get('feature_cache') else None
        real = extract_features(encoder, read_loaded_manifest(options['real']).entries, cache)
        fake = extract_features(encoder, read_loaded_manifest(options['fake']).entries, cache)
        fid = frechet_distance(fit_gaussian(real), fit_gaussian(fake))
        wd = wasserstein_distance(real, fake, num_projections=config.evaluation.num_projections,
                                  seed=derive_seed(config.seed, 'projections'))
        self.step(f'FID {fid:.4f}, WD {wd:.4f} ({encoder.encoder_id}, {len(real)} real / {len(fake)} fake)')
        return fid, wd, encoder.encoder_id

    def _curves(self, config, detections, manifest):
        ev = config.evaluation
        gts = {s.image_id: s.annotations for s in manifest}
        return evaluate_subsets(detections, gts, ev.subsets, ev.iou_threshold,
                                reference_grid(ev.fppi_min, ev.fppi_max, ev.fppi_points))

    def run(self, config, **options):
        if not options.get('val_night') and not (options.get('real') and options.get('fake')):
            raise CommandError('nothing to evaluate: give --val-night and/or --real with --fake')
        if options.get('val_day') and not options.get('train'):
            raise CommandError('--val-day needs --train')
        out = Path(options['out'])
        table = load_reference_table(settings.NIGHTSHIFT_REFERENCE_TABLE)
        selection = ReferenceSelection(options['translator'], options['reference_detector'], options['ratio'])

        # 1. Image quality
        fid, wd, extractor = self._quality(config, options)

        # 2. Detection
        curves, day_curves = [], []
        if options.get('val_night'):
            val_night = read_loaded_manifest(options['val_night'])
            detector = None
            if options.get('train'):
                train_set = read_loaded_manifest(options['train'])
                detector = build_detector(config.detector, config.seed)
                fit_detector(detector, train_set.entries, config.weights, stages=config.detector.fit_steps,
                             lr=config.detector.fit_lr, seed=derive_seed(config.seed, 'evaluate'))
                detections = detect(detector, val_night.entries, score_threshold=config.detector.score_threshold)
                write_detections(detections, out.with_suffix('.detections.jsonl'), config_hash=config.hash)
                self.step(f'toy detector fitted on {len(train_set)} images')
            elif options.get('detections'):
                detections = read_detections(options['detections'])
            else:
                raise CommandError('--val-night needs --detections or --train')
            curves = self._curves(config, detections, val_night)
            for curve in curves:
                self.step(f'{curve.subset}: LAMR {100.0 * curve.lamr:.2f}% over {curve.num_ground_truth} pedestrians')

            if options.get('val_day'):
                val_day = read_loaded_manifest(options['val_day'])
                day_dets = detect(detector, val_day.entries, score_threshold=config.detector.score_threshold)
                day_curves = self._curves(config, day_dets, val_day)

        # 3. Report
        commensurate = config.encoder.kind in COMMENSURATE_ENCODERS
        emit_report(curves, fid, wd, table, path=out, config_hash=config.hash, extractor=extractor,
                    commensurate=commensurate, selection=selection)
        if day_curves:
            day_selection = ReferenceSelection('baseline_day', options['reference_detector'], None)
            day_out = out.with_name(f'{out.stem}_day{out.suffix}')
            emit_report(day_curves, None, None, table, path=day_out, config_hash=config.hash,
                        selection=day_selection)
            self.step(f'day split report written to {day_out}')

        if extractor is not None and not commensurate:
            self.stdout.write(self.style.WARNING(
                f'{extractor} features are not comparable with the published FID / WD'))
        self.stdout.write(self.style.SUCCESS(f'Report written to {out}'))
