from django.test import SimpleTestCase

from augment.domain import DAY, NIGHT, SYNTHETIC_NIGHT, DatasetManifest, ImageSample
from augment.exceptions import AnnotationMismatch, AugmentError, ConfigError, InsufficientDataError
from augment.mixing import MixSpec, build_mixed_set


def synthetic_pool(count):
    return DatasetManifest(ImageSample(f'syn_{i:05d}', 64, 64, SYNTHETIC_NIGHT, source_image_id=f'day_{i:05d}')
                           for i in range(count))


def night_pool(count, domain=NIGHT):
    return DatasetManifest(ImageSample(f'night_{i:05d}', 64, 64, domain) for i in range(count))


class MixSpecTests(SimpleTestCase):

    def test_published_count(self):
        self.assertEqual(MixSpec(synthetic_pool(4266), night_pool(0), 0.05).real_count, 213)

    def test_decimal_floor(self):
        # 0.29 * 100 is 28.999... in binary floating point
        self.assertEqual(MixSpec(synthetic_pool(100), night_pool(0), 0.29).real_count, 29)
        self.assertEqual(MixSpec(synthetic_pool(7), night_pool(0), 0.5).real_count, 3)

    def test_ratio_must_be_non_negative(self):
        for bad in (-0.05, float('nan'), float('inf')):
            with self.subTest(ratio=bad), self.assertRaises(ConfigError) as ctx:
                MixSpec(synthetic_pool(1), night_pool(0), bad)
            self.assertIsInstance(ctx.exception, AugmentError)


class BuildMixedSetTests(SimpleTestCase):
    """Synthetic plus seeded real-night injection"""

    def setUp(self):
        self.synthetic = synthetic_pool(4266)
        self.night = night_pool(300)

    def test_published_ratio(self):
        mixed = build_mixed_set(MixSpec(self.synthetic, self.night, 0.05, seed=0))
        self.assertEqual(len(mixed), 4266 + 213)
        self.assertEqual(mixed.domain_counts, {DAY: 0, NIGHT: 213, SYNTHETIC_NIGHT: 4266})
        self.assertEqual(mixed.entries[:4266], self.synthetic.entries)

    def test_real_night_keeps_file_order(self):
        mixed = build_mixed_set(MixSpec(self.synthetic, self.night, 0.05, seed=3))
        picked = mixed.image_ids[4266:]
        self.assertEqual(picked, sorted(picked))
        self.assertEqual(len(set(picked)), 213)

    def test_zero_ratio_is_synthetic_only(self):
        self.assertEqual(build_mixed_set(MixSpec(self.synthetic, self.night, 0.0)), self.synthetic)

    def test_seeded(self):
        a = build_mixed_set(MixSpec(self.synthetic, self.night, 0.05, seed=1))
        b = build_mixed_set(MixSpec(self.synthetic, self.night, 0.05, seed=1))
        c = build_mixed_set(MixSpec(self.synthetic, self.night, 0.05, seed=2))
        self.assertEqual(a.image_ids, b.image_ids)
        self.assertNotEqual(a.image_ids, c.image_ids)

    def test_not_enough_real_night(self):
        with self.assertRaises(InsufficientDataError) as ctx:
            build_mixed_set(MixSpec(synthetic_pool(10), night_pool(5), 1.0))
        self.assertEqual((ctx.exception.required, ctx.exception.available), (10, 5))

    def test_domains_are_checked(self):
        with self.assertRaises(AnnotationMismatch):
            build_mixed_set(MixSpec(synthetic_pool(2), night_pool(2, domain=DAY), 0.5))
        with self.assertRaises(AnnotationMismatch):
            build_mixed_set(MixSpec(night_pool(2), night_pool(2), 0.5))
