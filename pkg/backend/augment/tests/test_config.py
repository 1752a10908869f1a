from pathlib import Path
from tempfile import TemporaryDirectory

from django.conf import settings
from django.test import SimpleTestCase

from augment.config import RunConfig, dump_config, load_config
from augment.exceptions import ConfigError
from augment.serializers import RunConfigSerializer

TOY_CONFIG = Path(settings.BASE_DIR) / 'configs' / 'toy.yaml'


class DefaultsTests(SimpleTestCase):
    """Defaults follow the published training recipe"""

    def setUp(self):
        self.config = RunConfig.from_dict({})

    def test_optimizer_and_schedule(self):
        self.assertEqual(self.config.optimizer.lr, 1e-5)
        self.assertEqual(self.config.optimizer.weight_decay, 1e-2)
        self.assertEqual(self.config.training.total_steps, 25000)
        self.assertEqual(self.config.training.batch_size, 1)
        self.assertEqual(self.config.contrastive.ramp_steps, 12000)

    def test_contrastive_and_weights(self):
        self.assertEqual(self.config.contrastive.num_patches, 128)
        self.assertEqual(self.config.contrastive.gamma, 0.5)
        w = self.config.weights
        self.assertEqual((w.src, w.hdce, w.det, w.idt, w.adv), (1.0, 1.0, 0.5, 0.1, 0.01))

    def test_every_field_has_provenance(self):
        """Test that each schema field is tagged [published] or [decision]"""
        for section_name, section in RunConfigSerializer().fields.items():
            for name, field in section.fields.items():
                with self.subTest(field=f'{section_name}.{name}'):
                    self.assertRegex(field.help_text or '', r'^\[(published|decision)\] ')


class ValidationTests(SimpleTestCase):

    def test_unknown_key_rejected(self):
        with self.assertRaises(ConfigError):
            RunConfig.from_dict({'optimizer': {'learning_rate': 1e-3}})

    def test_unknown_section_rejected(self):
        with self.assertRaises(ConfigError):
            RunConfig.from_dict({'optimiser': {}})

    def test_non_positive_tau_rejected(self):
        with self.assertRaises(ConfigError):
            RunConfig.from_dict({'contrastive': {'tau': 0.0}})

    def test_missing_file(self):
        with self.assertRaises(ConfigError):
            load_config('/nonexistent/run.yaml')


class HashTests(SimpleTestCase):
    """Config hash bookkeeping"""

    def test_hash_is_stable_and_short(self):
        a, b = RunConfig.from_dict({}), RunConfig.from_dict({'run': {}})
        self.assertEqual(a.hash, b.hash)
        self.assertEqual(len(a.hash), 16)

    def test_hash_tracks_values(self):
        self.assertNotEqual(RunConfig.from_dict({}).hash, RunConfig.from_dict({'run': {'seed': 1}}).hash)

    def test_dump_and_reload_keep_hash(self):
        config = RunConfig.from_dict({'lora': {'rank_overrides': {'unet.conv_out': 2}}, 'mixing': {'ratios': [0.2, 0]}})
        with TemporaryDirectory() as tmp:
            path = Path(tmp) / 'config.yaml'
            dump_config(config, path)
            self.assertEqual(load_config(path).hash, config.hash)

    def test_toy_config_loads(self):
        config = load_config(TOY_CONFIG)
        self.assertEqual(config.backbone.mode, 'darkening')
        self.assertEqual(config.lora.rank_for('unet.conv_out'), 2)
        self.assertEqual(config.lora.rank_for('vae_decoder.tone_in'), 1)
