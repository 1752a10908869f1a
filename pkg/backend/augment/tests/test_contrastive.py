import math

import torch
import torch.nn.functional as F
from django.test import SimpleTestCase

from augment.contrastive import (RampSchedule, hard_negative_weights, hdce_loss, jsd, ramp_weight,
                                 similarity_distribution, src_loss)
from augment.exceptions import ConfigError, LossInputError

from . import oracles


def unit_rows(n, d, generator):
    return F.normalize(torch.randn(n, d, generator=generator, dtype=torch.float64), dim=-1)


def random_instances(count, seed=0):
    """(N_p, d, f_S, f_T) draws with N_p in [2, 8] and d in [2, 16]."""
    g = torch.Generator().manual_seed(seed)
    for _ in range(count):
        n = int(torch.randint(2, 9, (1,), generator=g))
        d = int(torch.randint(2, 17, (1,), generator=g))
        yield n, d, unit_rows(n, d, g), unit_rows(n, d, g)


class JsdTests(SimpleTestCase):
    """Jensen-Shannon divergence"""

    def test_identical_is_zero(self):
        p = torch.tensor([0.2, 0.3, 0.5], dtype=torch.float64)
        self.assertEqual(float(jsd(p, p)), 0.0)

    def test_disjoint_support_is_log_two(self):
        p = torch.tensor([1.0, 0.0], dtype=torch.float64)
        q = torch.tensor([0.0, 1.0], dtype=torch.float64)
        self.assertAlmostEqual(float(jsd(p, q)), math.log(2), places=12)

    def test_symmetric_and_bounded(self):
        g = torch.Generator().manual_seed(0)
        for _ in range(20):
            p = torch.softmax(torch.randn(6, generator=g, dtype=torch.float64), 0)
            q = torch.softmax(torch.randn(6, generator=g, dtype=torch.float64), 0)
            self.assertAlmostEqual(float(jsd(p, q)), float(jsd(q, p)), places=14)
            self.assertLessEqual(float(jsd(p, q)), math.log(2))

    def test_negative_probabilities_rejected(self):
        with self.assertRaises(LossInputError):
            jsd(torch.tensor([1.5, -0.5]), torch.tensor([0.5, 0.5]))

    def test_matches_oracle(self):
        g = torch.Generator().manual_seed(1)
        for _ in range(100):
            n = int(torch.randint(2, 9, (1,), generator=g))
            p = torch.softmax(torch.randn(n, generator=g, dtype=torch.float64), 0)
            q = torch.softmax(torch.randn(n, generator=g, dtype=torch.float64), 0)
            self.assertAlmostEqual(float(jsd(p, q)), oracles.jsd(p.tolist(), q.tolist()), delta=1e-8)


class SrcTests(SimpleTestCase):
    """Similarity-distribution consistency"""

    def test_similarity_rows_are_distributions(self):
        z = unit_rows(5, 4, torch.Generator().manual_seed(0))
        S = similarity_distribution(z)
        torch.testing.assert_close(S.sum(dim=-1), torch.ones(5, dtype=torch.float64))

    def test_identical_embeddings_give_zero(self):
        z = unit_rows(6, 8, torch.Generator().manual_seed(0))
        self.assertEqual(float(src_loss(z, z.clone())), 0.0)

    def test_matches_oracle(self):
        """Test SRC against the loop implementation on 100 random instances"""
        for n, d, f_S, f_T in random_instances(100, seed=2):
            with self.subTest(n=n, d=d):
                self.assertAlmostEqual(float(src_loss(f_S, f_T)), oracles.src(f_S.tolist(), f_T.tolist()), delta=1e-8)

    def test_layers_sum_and_batches_average(self):
        g = torch.Generator().manual_seed(3)
        a, b = unit_rows(4, 3, g), unit_rows(4, 3, g)
        c, d = unit_rows(4, 3, g), unit_rows(4, 3, g)
        self.assertAlmostEqual(float(src_loss([a, c], [b, d])), float(src_loss(a, b) + src_loss(c, d)), places=12)
        batched = src_loss(torch.stack([a, c]), torch.stack([b, d]))
        self.assertAlmostEqual(float(batched), float((src_loss(a, b) + src_loss(c, d)) / 2), places=12)

    def test_gradients(self):
        for n, d, f_S, f_T in random_instances(20, seed=4):
            f_T = f_T.clone().requires_grad_(True)
            f_S = f_S.clone().requires_grad_(True)
            self.assertTrue(torch.autograd.gradcheck(src_loss, (f_S, f_T), eps=1e-5, rtol=1e-4))

    def test_shape_mismatch(self):
        with self.assertRaises(LossInputError):
            src_loss(torch.zeros(4, 3), torch.zeros(5, 3))
        with self.assertRaises(LossInputError):
            src_loss([torch.zeros(4, 3)], [])


class HardNegativeTests(SimpleTestCase):
    """Hard-negative weights and hDCE"""

    def test_weights_are_row_distributions_without_self(self):
        W = hard_negative_weights(unit_rows(5, 4, torch.Generator().manual_seed(0)), gamma=0.5).W
        torch.testing.assert_close(W.sum(dim=-1), torch.ones(5, dtype=torch.float64))
        self.assertTrue(torch.equal(torch.diagonal(W), torch.zeros(5, dtype=torch.float64)))

    def test_weights_match_oracle(self):
        for n, d, f_S, _ in random_instances(100, seed=5):
            W = hard_negative_weights(f_S, gamma=0.5).W
            expected = torch.tensor(oracles.hard_negative_weights(f_S.tolist(), 0.5), dtype=torch.float64)
            torch.testing.assert_close(W, expected, rtol=0, atol=1e-8)

    def test_hdce_matches_oracle(self):
        """Test hDCE against the loop implementation on 100 random instances"""
        for n, d, f_S, f_T in random_instances(100, seed=6):
            W = hard_negative_weights(f_S, gamma=0.5)
            expected = oracles.hdce(f_T.tolist(), f_S.tolist(), W.W.tolist(), 0.07)
            with self.subTest(n=n, d=d):
                self.assertAlmostEqual(float(hdce_loss(f_T, f_S, W, tau=0.07)), expected, delta=1e-8 * max(1.0, abs(expected)))

    def test_uniform_weights_reduce_to_infonce(self):
        """Test that with uniform W the loss is the plain InfoNCE over negatives"""
        g = torch.Generator().manual_seed(7)
        f_S, f_T = unit_rows(6, 4, g), unit_rows(6, 4, g)
        W = (torch.ones(6, 6, dtype=torch.float64) - torch.eye(6, dtype=torch.float64)) / 5
        logits = f_T @ f_S.T / 0.07
        masked = logits.masked_fill(torch.eye(6, dtype=torch.bool), float('-inf'))
        expected = (torch.logsumexp(masked, dim=-1) - torch.diagonal(logits)).mean()
        self.assertAlmostEqual(float(hdce_loss(f_T, f_S, W, tau=0.07)), float(expected), places=10)

    def test_weights_carry_no_gradient(self):
        g = torch.Generator().manual_seed(8)
        source = unit_rows(5, 4, g).requires_grad_(True)
        W = hard_negative_weights(source, gamma=0.5)
        f_T = unit_rows(5, 4, g).requires_grad_(True)
        hdce_loss(f_T, unit_rows(5, 4, g), W).backward()
        self.assertIsNone(source.grad)
        self.assertIsNotNone(f_T.grad)

    def test_gradients(self):
        for n, d, f_S, f_T in random_instances(20, seed=9):
            W = hard_negative_weights(f_S, gamma=0.5)
            inputs = (f_T.clone().requires_grad_(True), f_S.clone().requires_grad_(True))
            self.assertTrue(torch.autograd.gradcheck(lambda t, s: hdce_loss(t, s, W, tau=0.5), inputs,
                                                     eps=1e-5, rtol=1e-4))

    def test_invalid_arguments(self):
        z = unit_rows(4, 3, torch.Generator().manual_seed(0))
        W = hard_negative_weights(z, 0.5)
        with self.assertRaises(LossInputError):
            hard_negative_weights(z, 0.0)
        with self.assertRaises(LossInputError):
            hdce_loss(z, z, W, tau=0.0)
        with self.assertRaises(LossInputError):
            hdce_loss(z, z, torch.zeros(3, 3, dtype=torch.float64))
        with self.assertRaises(LossInputError):
            hard_negative_weights(z[:1], 0.5)


class RampTests(SimpleTestCase):

    def test_linear_ramp(self):
        ramp = RampSchedule(12000)
        self.assertEqual(ramp_weight(ramp, 0), 0.0)
        self.assertEqual(ramp_weight(ramp, 6000), 0.5)
        self.assertEqual(ramp_weight(ramp, 12000), 1.0)
        self.assertEqual(ramp_weight(ramp, 25000), 1.0)

    def test_no_ramp(self):
        self.assertEqual(RampSchedule(0).weight(0), 1.0)

    def test_negative_step(self):
        with self.assertRaises(ConfigError):
            RampSchedule(10).weight(-1)

    def test_negative_ramp_length(self):
        with self.assertRaises(ConfigError):
            RampSchedule(-5)
