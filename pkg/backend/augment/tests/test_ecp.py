from pathlib import Path
from tempfile import TemporaryDirectory

import numpy as np
from django.test import SimpleTestCase

from augment.domain import NIGHT, PEDESTRIAN
from augment.ecp import PUBLISHED_SCALE, ingest_ecp, occlusion_fraction, parse_objects, parse_record
from augment.exceptions import ConfigError, ManifestFormatError
from augment.utils import jsonl
from augment.utils.images import read_image, write_image


def record(width=1920, height=1024):
    return {
        'imagewidth': width,
        'imageheight': height,
        'children': [
            {'identity': 'pedestrian', 'x0': 100, 'y0': 200, 'x1': 300, 'y1': 400, 'tags': ['occluded>40'],
             'children': [
                 {'identity': 'rider', 'x0': 10, 'y0': 10, 'x1': 50, 'y1': 90},
             ]},
            {'identity': 'car', 'x0': 0, 'y0': 0, 'x1': 500, 'y1': 300},
            {'identity': 'pedestrian', 'x0': 1900, 'y0': 900, 'x1': 1950, 'y1': 1100,
             'tags': ['occluded>10', 'occluded>80']},
            {'identity': 'pedestrian', 'x0': 5, 'y0': 5, 'x1': 5, 'y1': 40},
        ],
    }


class ParseTests(SimpleTestCase):
    """ECP annotation mapping"""

    def test_identity_mapping(self):
        annotations = parse_objects(record(), 1920, 1024)
        self.assertEqual([(a.label, a.ignore) for a in annotations],
                         [(PEDESTRIAN, False), ('other', True), (PEDESTRIAN, False)])

    def test_boxes_are_clipped_and_degenerate_boxes_dropped(self):
        annotations = parse_objects(record(), 1920, 1024)
        self.assertEqual(annotations[2].box.as_tuple(), (1900, 900, 1920, 1024))
        self.assertEqual(len(annotations), 3)

    def test_largest_occlusion_tag_wins(self):
        self.assertEqual(occlusion_fraction(['occluded>10', 'occluded>80']), 0.9)
        self.assertEqual(occlusion_fraction(['truncated>10']), 0.0)
        annotations = parse_objects(record(), 1920, 1024)
        self.assertEqual([a.occlusion_fraction for a in annotations], [0.5, 0.0, 0.9])

    def test_published_downscale(self):
        sample = parse_record(record(), 'berlin_0001', '/data/berlin_0001.png', NIGHT, PUBLISHED_SCALE)
        self.assertEqual((sample.width, sample.height), (576, 320))
        np.testing.assert_allclose(sample.annotations[0].box.as_tuple(), (30.0, 62.5, 90.0, 125.0))

    def test_missing_size(self):
        with self.assertRaises(ManifestFormatError):
            parse_record({'children': []}, 'x', 'x.png', NIGHT)


class IngestTests(SimpleTestCase):

    def setUp(self):
        self.tmp = TemporaryDirectory()
        root = Path(self.tmp.name)
        self.labels, self.images, self.out = root / 'labels', root / 'images', root / 'out'
        for city, name in (('berlin', 'berlin_00001'), ('amsterdam', 'amsterdam_00002')):
            jsonl.write_json(self.labels / city / f'{name}.json', record(width=40, height=20) | {
                'children': [{'identity': 'pedestrian', 'x0': 4, 'y0': 2, 'x1': 12, 'y1': 18}]})
            write_image(np.full((20, 40, 3), 0.2, dtype=np.float32), self.images / city / f'{name}.png')

    def tearDown(self):
        self.tmp.cleanup()

    def test_ingest_in_file_order(self):
        manifest = ingest_ecp(self.labels, self.images, NIGHT)
        self.assertEqual(manifest.image_ids, ['amsterdam_00002', 'berlin_00001'])
        first = manifest[0]
        self.assertEqual(first.image_path, str((self.images / 'amsterdam' / 'amsterdam_00002.png').resolve()))
        self.assertEqual((first.width, first.height, first.domain), (40, 20, NIGHT))

    def test_rescaled_ingest_writes_images(self):
        manifest = ingest_ecp(self.labels, self.images, NIGHT, scale=(0.5, 0.5), out_dir=self.out, limit=1)
        sample = manifest[0]
        self.assertEqual((sample.width, sample.height), (20, 10))
        self.assertEqual(sample.annotations[0].box.as_tuple(), (2.0, 1.0, 6.0, 9.0))
        self.assertEqual(read_image(self.out / sample.image_path).shape, (10, 20, 3))

    def test_rescale_needs_output_directory(self):
        with self.assertRaises(ConfigError):
            ingest_ecp(self.labels, self.images, NIGHT, scale=(0.5, 0.5))

    def test_malformed_annotation_file(self):
        (self.labels / 'berlin' / 'berlin_00001.json').write_text('{not json', encoding='utf-8')
        with self.assertRaises(ManifestFormatError):
            ingest_ecp(self.labels, self.images, NIGHT)
