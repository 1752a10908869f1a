from unittest import mock

import torch
from django.test import SimpleTestCase

from augment.config import RunConfig
from augment.exceptions import ConfigError, InvalidGeometry, TranslationError
from augment.generator import NoiseSchedule, Translator, inject_noise, translate
from augment.registry import build_translator
from augment.toys.backbone import ToyBackbone


def translator(mode='identity', alpha=1.0):
    return Translator(ToyBackbone(mode=mode, seed=0), NoiseSchedule.single_point(alpha=alpha), torch.zeros(16))


class ScheduleTests(SimpleTestCase):

    def test_variance_preserving(self):
        for schedule in (NoiseSchedule.single_point(alpha=0.7), NoiseSchedule.scaled_linear(timestep=500)):
            a, s = schedule.alpha(), schedule.sigma()
            self.assertAlmostEqual(a * a + s * s, 1.0, places=12)

    def test_timestep_outside_schedule(self):
        with self.assertRaises(ConfigError):
            NoiseSchedule((1.0, 0.5), timestep=2)

    def test_alpha_outside_unit_interval(self):
        with self.assertRaises(ConfigError):
            NoiseSchedule((1.0, 1.5), timestep=0)

    def test_noise_shape_must_match(self):
        with self.assertRaises(InvalidGeometry):
            inject_noise(torch.zeros(1, 12, 4, 4), NoiseSchedule.single_point(), 999, torch.zeros(1, 12, 4, 2))


class TranslateTests(SimpleTestCase):
    """One-step translation with the toy backbone"""

    def test_identity_prior_is_exact(self):
        """Test that a noise-free identity backbone returns its input"""
        x = torch.rand(2, 3, 16, 16)
        torch.testing.assert_close(translator()(x), x, rtol=0, atol=1e-6)

    def test_darkening_prior(self):
        x = torch.rand(1, 3, 16, 16)
        torch.testing.assert_close(translator('darkening')(x), 0.25 * x, rtol=0, atol=1e-6)

    def test_single_denoiser_call(self):
        model = translator(alpha=0.7)
        with mock.patch.object(model.backbone, 'predict_noise', wraps=model.backbone.predict_noise) as spy:
            model(torch.rand(1, 3, 8, 8), generator=torch.Generator().manual_seed(0))
        self.assertEqual(spy.call_count, 1)

    def test_seeded_noise_is_deterministic(self):
        model = translator(alpha=0.7)
        x = torch.rand(1, 3, 8, 8)
        a = model(x, generator=torch.Generator().manual_seed(5))
        b = model(x, generator=torch.Generator().manual_seed(5))
        self.assertTrue(torch.equal(a, b))

    def test_output_in_unit_range(self):
        out = translator(alpha=0.3)(torch.rand(1, 3, 8, 8), generator=torch.Generator().manual_seed(1))
        self.assertGreaterEqual(float(out.min()), 0.0)
        self.assertLessEqual(float(out.max()), 1.0)

    def test_size_must_divide_latent_factor(self):
        with self.assertRaises(InvalidGeometry):
            translator()(torch.rand(1, 3, 7, 8))

    def test_intensities_checked(self):
        with self.assertRaises(InvalidGeometry):
            translator()(torch.full((1, 3, 8, 8), 2.0))

    def test_stage_named_on_failure(self):
        model = translator()
        with mock.patch.object(model.backbone, 'decode', side_effect=RuntimeError('boom')):
            with self.assertRaises(TranslationError) as ctx:
                model(torch.rand(1, 3, 8, 8))
        self.assertEqual(ctx.exception.stage, 'decode')


class TrainableSetTests(SimpleTestCase):
    """Only adapters and skip mixers learn"""

    def test_gradients_reach_adapters_only(self):
        config = RunConfig.from_dict({'lora': {'rank': 1, 'targets': ['vae_decoder.tone_out', 'unet.conv_out']},
                                      'schedule': {'alpha': 0.9}})
        model = build_translator(config)
        for adapter_name in ('vae_decoder.tone_out', 'unet.conv_out'):
            with torch.no_grad():
                model.backbone.get_submodule(adapter_name).adapter.B.fill_(0.01)
        model(torch.rand(1, 3, 8, 8), generator=torch.Generator().manual_seed(0)).mean().backward()

        for name, p in model.backbone.named_parameters():
            with self.subTest(parameter=name):
                if '.adapter.' in f'.{name}' or name.startswith('skip_'):
                    self.assertTrue(p.requires_grad)
                else:
                    self.assertFalse(p.requires_grad)
                    self.assertIsNone(p.grad)
        self.assertGreater(float(model.backbone.get_submodule('unet.conv_out').adapter.A.grad.abs().sum()), 0.0)

    def test_trainable_parameters_listed(self):
        model = build_translator(RunConfig.from_dict({'lora': {'rank': 1, 'targets': ['vae_decoder.tone_in']}}))
        self.assertEqual(len(model.trainable_parameters()), 2 + 4)
