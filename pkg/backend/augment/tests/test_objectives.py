import math

import torch
from django.test import SimpleTestCase

from augment.contrastive import RampSchedule
from augment.exceptions import DiscriminatorRangeError, LossInputError, NonFiniteLossError
from augment.objectives import (COMPONENTS, Discriminator, LossWeights, discriminator_loss, effective_weights,
                                generator_adversarial_loss, identity_loss, total_loss)

from . import oracles


class FixedProbability:
    """Scorer returning a preset probability per image in the batch."""

    def __init__(self, probs):
        self.probs = torch.tensor(probs, dtype=torch.float64)

    def __call__(self, images):
        return self.probs[:images.shape[0]]


class LinearLogit(Discriminator):
    """One logit per image from a flat weight held as a plain tensor."""

    def __init__(self, weight):
        super().__init__()
        self.weight = weight

    def forward(self, images):
        return images.flatten(1) @ self.weight


def random_images(count, seed=0):
    """(x, shift) draws: 1-4 images of 3x[2,6]x[2,6] pixels and a per-pixel shift in [-0.5, 0.5)."""
    g = torch.Generator().manual_seed(seed)
    for _ in range(count):
        b = int(torch.randint(1, 5, (1,), generator=g))
        h, w = (int(v) for v in torch.randint(2, 7, (2,), generator=g))
        x = torch.rand(b, 3, h, w, generator=g, dtype=torch.float64)
        yield x, torch.rand(b, 3, h, w, generator=g, dtype=torch.float64) - 0.5


def random_probabilities(count, seed=0):
    """(real, fake) lists of 1-6 probabilities each, inside [0.01, 0.99]."""
    g = torch.Generator().manual_seed(seed)
    for _ in range(count):
        n, m = (int(v) for v in torch.randint(1, 7, (2,), generator=g))
        real = 0.01 + 0.98 * torch.rand(n, generator=g, dtype=torch.float64)
        fake = 0.01 + 0.98 * torch.rand(m, generator=g, dtype=torch.float64)
        yield real.tolist(), fake.tolist()


def random_logit_instances(count, seed=0):
    """(real, fake, weight) for a LinearLogit over 3x2x2 images."""
    g = torch.Generator().manual_seed(seed)
    for _ in range(count):
        n = int(torch.randint(1, 5, (1,), generator=g))
        real = torch.rand(n, 3, 2, 2, generator=g, dtype=torch.float64)
        fake = torch.rand(n, 3, 2, 2, generator=g, dtype=torch.float64)
        yield real, fake, 0.5 * torch.randn(12, generator=g, dtype=torch.float64)


class MeanLogit(Discriminator):

    def __init__(self):
        super().__init__()
        self.scale = torch.nn.Parameter(torch.tensor(2.0, dtype=torch.float64))

    def forward(self, images):
        return self.scale * (images.mean(dim=(1, 2, 3)) - 0.5)


class IdentityLossTests(SimpleTestCase):

    def test_matches_oracle(self):
        for x, shift in random_images(100, seed=0):
            value = identity_loss(lambda t: t + shift, x)
            self.assertAlmostEqual(float(value), oracles.identity((x + shift).tolist(), x.tolist()), places=10)

    def test_gradients(self):
        """Test gradients against finite differences; pixel changes stay clear of the kink at 0"""
        for x, shift in random_images(20, seed=1):
            offset = (torch.sign(shift) * (0.05 + shift.abs())).requires_grad_(True)
            x.requires_grad_(True)
            self.assertTrue(torch.autograd.gradcheck(lambda images, d: identity_loss(lambda t: t + d, images),
                                                     (x, offset), eps=1e-5, rtol=1e-4))

    def test_identity_generator_costs_nothing(self):
        x = torch.rand(1, 3, 8, 8)
        self.assertEqual(float(identity_loss(lambda t: t.clone(), x)), 0.0)

    def test_shape_change(self):
        with self.assertRaises(LossInputError):
            identity_loss(lambda t: t[..., :4], torch.rand(1, 3, 8, 8))


class AdversarialLossTests(SimpleTestCase):
    """Discriminator and generator adversarial terms"""

    def test_discriminator_oracle(self):
        for real, fake in random_probabilities(100, seed=0):
            real_t, fake_t = torch.tensor(real, dtype=torch.float64), torch.tensor(fake, dtype=torch.float64)

            # one scorer seeing both batches: real images carry a marker value
            def scorer(batch):
                return real_t if bool(batch[0, 0, 0, 0] > 0) else fake_t
            real_batch = torch.ones(len(real), 3, 2, 2, dtype=torch.float64)
            fake_batch = torch.zeros(len(fake), 3, 2, 2, dtype=torch.float64)
            self.assertAlmostEqual(float(discriminator_loss(scorer, real_batch, fake_batch)),
                                   oracles.discriminator(real, fake), places=12)

    def test_generator_oracle(self):
        for _, probs in random_probabilities(100, seed=1):
            images = torch.zeros(len(probs), 3, 2, 2, dtype=torch.float64)
            D = FixedProbability(probs)
            self.assertAlmostEqual(float(generator_adversarial_loss(D, images)),
                                   oracles.generator_adversarial(probs), places=12)
            self.assertAlmostEqual(float(generator_adversarial_loss(D, images, non_saturating=True)),
                                   oracles.generator_adversarial(probs, non_saturating=True), places=12)

    def test_discriminator_gradients(self):
        for real, fake, weight in random_logit_instances(20, seed=2):
            real.requires_grad_(True)
            weight.requires_grad_(True)
            self.assertTrue(torch.autograd.gradcheck(
                lambda r, w: discriminator_loss(LinearLogit(w), r, fake), (real, weight), eps=1e-5, rtol=1e-4))

    def test_generator_gradients(self):
        for _, fake, weight in random_logit_instances(20, seed=3):
            fake.requires_grad_(True)
            weight.requires_grad_(True)
            for non_saturating in (False, True):
                with self.subTest(non_saturating=non_saturating):
                    self.assertTrue(torch.autograd.gradcheck(
                        lambda f, w: generator_adversarial_loss(LinearLogit(w), f, non_saturating=non_saturating),
                        (fake, weight), eps=1e-5, rtol=1e-4))
                    # the same scorer handed over as plain probabilities
                    self.assertTrue(torch.autograd.gradcheck(
                        lambda f, w: generator_adversarial_loss(lambda b: torch.sigmoid(b.flatten(1) @ w), f,
                                                                non_saturating=non_saturating),
                        (fake, weight), eps=1e-5, rtol=1e-4))

    def test_probabilities_out_of_range(self):
        images = torch.zeros(2, 3, 2, 2, dtype=torch.float64)
        for probs in ([0.0, 0.5], [0.5, 1.0], [0.5, float('nan')]):
            with self.subTest(probs=probs), self.assertRaises(DiscriminatorRangeError):
                generator_adversarial_loss(FixedProbability(probs), images)

    def test_discriminator_step_leaves_generator_alone(self):
        """Test that the fake batch is detached for the discriminator update"""
        D = MeanLogit()
        source = torch.rand(2, 3, 4, 4, dtype=torch.float64, requires_grad=True)
        fake = source * 0.5
        discriminator_loss(D, torch.rand(2, 3, 4, 4, dtype=torch.float64), fake).backward()
        self.assertIsNone(source.grad)
        self.assertIsNotNone(D.scale.grad)

    def test_logit_discriminator_matches_probabilities(self):
        D = MeanLogit()
        fake = torch.rand(4, 3, 4, 4, dtype=torch.float64)
        probs = D.score(fake).tolist()
        self.assertAlmostEqual(float(generator_adversarial_loss(D, fake)),
                               oracles.generator_adversarial(probs), places=10)


class TotalLossTests(SimpleTestCase):

    def setUp(self):
        self.weights = LossWeights(src=1.0, hdce=2.0, det=0.5, idt=0.1, adv=0.01)
        self.components = {'src': 0.4, 'hdce': 1.3, 'det': 2.0, 'idt': 0.05, 'adv': -0.7}

    def test_matches_oracle_through_the_ramp(self):
        ramp = RampSchedule(ramp_steps=100)
        tensors = {k: torch.tensor(v, dtype=torch.float64) for k, v in self.components.items()}
        for step in (0, 1, 50, 100, 250):
            with self.subTest(step=step):
                total, report = total_loss(tensors, self.weights, step, ramp)
                expected = oracles.total(self.components, vars(self.weights), step, 100)
                self.assertAlmostEqual(float(total), expected, places=12)
                self.assertAlmostEqual(report.total, expected, places=12)
                self.assertEqual(report.step, step)
                self.assertEqual(report.raw, self.components)

    def test_matches_oracle_on_random_instances(self):
        g = torch.Generator().manual_seed(0)
        for _ in range(100):
            weights = LossWeights(**{name: float(3 * torch.rand(1, generator=g)) for name in COMPONENTS})
            components = {name: float(torch.randn(1, generator=g, dtype=torch.float64)) for name in COMPONENTS
                          if float(torch.rand(1, generator=g)) < 0.7}
            step = int(torch.randint(0, 300, (1,), generator=g))
            ramp_steps = int(torch.randint(0, 200, (1,), generator=g))
            tensors = {k: torch.tensor(v, dtype=torch.float64) for k, v in components.items()}
            total, report = total_loss(tensors, weights, step, RampSchedule(ramp_steps=ramp_steps))
            expected = oracles.total(components, vars(weights), step, ramp_steps)
            self.assertAlmostEqual(float(total), expected, places=10)
            self.assertAlmostEqual(report.total, expected, places=10)
            self.assertEqual(report.raw, components)

    def test_ramp_only_touches_contrastive_terms(self):
        weights = effective_weights(self.weights, 25, RampSchedule(ramp_steps=100))
        self.assertEqual(set(weights), set(COMPONENTS))
        self.assertAlmostEqual(weights['src'], 0.25)
        self.assertAlmostEqual(weights['hdce'], 0.5)
        self.assertEqual(weights['det'], 0.5)
        self.assertEqual(weights['adv'], 0.01)

    def test_zero_ramp_means_full_weight(self):
        weights = effective_weights(self.weights, 0, RampSchedule(ramp_steps=0))
        self.assertEqual(weights['hdce'], 2.0)

    def test_missing_components_are_skipped(self):
        total, report = total_loss({'idt': torch.tensor(0.5, dtype=torch.float64)}, self.weights, 10)
        self.assertAlmostEqual(float(total), 0.05)
        self.assertEqual(list(report.raw), ['idt'])

    def test_empty_components(self):
        total, report = total_loss({}, self.weights, 0)
        self.assertEqual(float(total), 0.0)
        self.assertEqual(report.raw, {})

    def test_non_finite_component_is_named(self):
        for bad in (float('nan'), float('inf')):
            components = dict(self.components, det=bad)
            with self.subTest(value=bad), self.assertRaises(NonFiniteLossError) as ctx:
                total_loss(components, self.weights, 5)
            self.assertEqual(ctx.exception.component, 'det')

    def test_unknown_component(self):
        with self.assertRaises(LossInputError):
            total_loss({'perceptual': 1.0}, self.weights, 0)

    def test_gradient_flows_through_weights(self):
        value = torch.tensor(3.0, dtype=torch.float64, requires_grad=True)
        total, _ = total_loss({'src': value}, self.weights, 50, RampSchedule(ramp_steps=100))
        total.backward()
        self.assertAlmostEqual(float(value.grad), 0.5)

    def test_weights_must_be_finite_and_non_negative(self):
        for bad in (-0.1, math.inf, math.nan):
            with self.subTest(value=bad), self.assertRaises(LossInputError):
                LossWeights(det=bad)
