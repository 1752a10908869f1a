import math

import torch
from django.test import SimpleTestCase

from augment.detection import ciou_loss, detect, detector_consistency_loss, dfl_loss, fit_detector
from augment.domain import DAY, PEDESTRIAN, BoundingBox, ObjectAnnotation
from augment.exceptions import DetectorStateError, InvalidGeometry, LossInputError
from augment.objectives import LossWeights
from augment.toys.detector import ToyDenseDetector, exact_predictions
from augment.toys.scenes import make_split

from . import oracles


def random_box(g, scale=20.0):
    x0, y0 = (torch.rand(2, generator=g, dtype=torch.float64) * scale).tolist()
    w, h = (torch.rand(2, generator=g, dtype=torch.float64) * scale + 0.5).tolist()
    return [x0, y0, x0 + w, y0 + h]


class CiouTests(SimpleTestCase):
    """Complete-IoU box loss"""

    def test_identical_boxes(self):
        box = BoundingBox(2, 3, 10, 20)
        self.assertEqual(ciou_loss(box, box), 0.0)

    def test_disjoint_boxes_exceed_one(self):
        self.assertGreater(ciou_loss(BoundingBox(0, 0, 4, 4), BoundingBox(10, 10, 14, 14)), 1.0)

    def test_degenerate_box(self):
        with self.assertRaises(InvalidGeometry):
            ciou_loss(torch.tensor([0.0, 0.0, 0.0, 4.0]), torch.tensor([0.0, 0.0, 4.0, 4.0]))

    def test_matches_oracle(self):
        g = torch.Generator().manual_seed(0)
        for _ in range(100):
            p, t = random_box(g), random_box(g)
            value = ciou_loss(torch.tensor(p, dtype=torch.float64), torch.tensor(t, dtype=torch.float64))
            self.assertAlmostEqual(float(value), oracles.ciou(p, t), delta=1e-8)

    def test_gradients(self):
        """Test CIoU gradients on overlapping boxes against finite differences"""
        g = torch.Generator().manual_seed(1)
        for _ in range(20):
            t = torch.tensor(random_box(g), dtype=torch.float64)
            p = (t + torch.randn(4, generator=g, dtype=torch.float64) * 0.5).requires_grad_(True)
            if not (p[2] > p[0] and p[3] > p[1]):
                continue
            self.assertTrue(torch.autograd.gradcheck(lambda b: ciou_loss(b, t), (p,), eps=1e-5, rtol=1e-4))


class DflTests(SimpleTestCase):
    """Distribution focal loss"""

    def test_integer_target_on_one_hot(self):
        logits = torch.full((9,), -1e4, dtype=torch.float64)
        logits[3] = 0.0
        self.assertEqual(float(dfl_loss(logits, torch.tensor(3.0, dtype=torch.float64))), 0.0)

    def test_target_out_of_range(self):
        with self.assertRaises(LossInputError):
            dfl_loss(torch.zeros(9), torch.tensor(8.5))
        with self.assertRaises(LossInputError):
            dfl_loss(torch.zeros(1), torch.tensor(0.0))

    def test_matches_oracle(self):
        g = torch.Generator().manual_seed(2)
        for _ in range(100):
            logits = torch.randn(9, generator=g, dtype=torch.float64)
            y = float(torch.rand(1, generator=g, dtype=torch.float64)) * 8
            value = dfl_loss(logits, torch.tensor(y, dtype=torch.float64))
            self.assertAlmostEqual(float(value), oracles.dfl(logits.tolist(), y), delta=1e-8)

    def test_top_bin(self):
        logits = torch.randn(9, generator=torch.Generator().manual_seed(3), dtype=torch.float64)
        self.assertAlmostEqual(float(dfl_loss(logits, torch.tensor(8.0, dtype=torch.float64))),
                               oracles.dfl(logits.tolist(), 8.0), delta=1e-10)

    def test_gradients(self):
        g = torch.Generator().manual_seed(4)
        for _ in range(20):
            logits = torch.randn(2, 9, generator=g, dtype=torch.float64).requires_grad_(True)
            y = torch.rand(2, generator=g, dtype=torch.float64) * 8
            self.assertTrue(torch.autograd.gradcheck(lambda l: dfl_loss(l, y), (logits,), eps=1e-5, rtol=1e-4))


class ToyDetectorTests(SimpleTestCase):
    """Dense toy detector and the consistency loss"""

    def setUp(self):
        # centred on cell (4, 3) with whole-stride side distances
        self.annotations = (ObjectAnnotation(PEDESTRIAN, BoundingBox(6, 2, 22, 38)),
                            ObjectAnnotation(PEDESTRIAN, BoundingBox(38, 10, 50, 42)))

    def test_exact_predictions_cost_nothing(self):
        """Test that predictions reproducing the ground truth have ~zero loss"""
        preds = exact_predictions(self.annotations, (64, 64))
        detector = ToyDenseDetector().double()
        components = detector.component_losses(preds, [self.annotations])
        for name, value in components.as_floats().items():
            with self.subTest(component=name):
                self.assertLess(value, 1e-9)

    def test_exact_predictions_decode_to_ground_truth(self):
        preds = exact_predictions(self.annotations, (64, 64))
        dets = ToyDenseDetector().decode(preds, ['a'], (64, 64))
        self.assertEqual(sorted(d.box.as_tuple() for d in dets[0]), sorted(a.box.as_tuple() for a in self.annotations))

    def test_consistency_needs_frozen_detector(self):
        with self.assertRaises(DetectorStateError):
            detector_consistency_loss(ToyDenseDetector(), torch.rand(1, 3, 64, 64), self.annotations, LossWeights())

    def test_gradient_reaches_image_only(self):
        detector = ToyDenseDetector().freeze()
        x_hat = torch.rand(1, 3, 64, 64, requires_grad=True)
        loss, components = detector_consistency_loss(detector, x_hat, self.annotations, LossWeights(),
                                                     return_components=True)
        loss.backward()
        self.assertGreater(float(x_hat.grad.abs().sum()), 0.0)
        self.assertTrue(all(p.grad is None for p in detector.parameters()))
        expected = 7.5 * float(components.box) + 0.5 * float(components.cls) + 1.5 * float(components.dfl)
        self.assertAlmostEqual(float(loss), expected, places=5)

    def test_batch_target_count(self):
        with self.assertRaises(LossInputError):
            detector_consistency_loss(ToyDenseDetector().freeze(), torch.rand(2, 3, 64, 64),
                                      [self.annotations], LossWeights())

    def test_empty_annotations_still_train_background(self):
        detector = ToyDenseDetector().freeze()
        loss = detector_consistency_loss(detector, torch.rand(1, 3, 64, 64), (), LossWeights())
        self.assertTrue(math.isfinite(float(loss)))
        self.assertGreater(float(loss), 0.0)


class FitDetectorTests(SimpleTestCase):

    def test_head_only_first_stage(self):
        """Test that the first stage leaves the body untouched and the result comes back frozen"""
        samples = make_split('day', DAY, 4, seed=0).entries
        detector = ToyDenseDetector(seed=0)
        body_before = [p.detach().clone() for p in detector.body.parameters()]
        head_before = detector.head.weight.detach().clone()
        fitted = fit_detector(detector, samples, LossWeights(), stages=(3, 0), lr=1e-2, seed=0)
        self.assertTrue(fitted.frozen)
        for before, after in zip(body_before, fitted.body.parameters()):
            self.assertTrue(torch.equal(before, after))
        self.assertFalse(torch.equal(head_before, fitted.head.weight))

    def test_fit_is_seeded(self):
        samples = make_split('day', DAY, 4, seed=1).entries
        a = fit_detector(ToyDenseDetector(seed=0), samples, LossWeights(), stages=(2, 2), seed=5)
        b = fit_detector(ToyDenseDetector(seed=0), samples, LossWeights(), stages=(2, 2), seed=5)
        for p, q in zip(a.parameters(), b.parameters()):
            self.assertTrue(torch.equal(p, q))

    def test_needs_samples(self):
        with self.assertRaises(LossInputError):
            fit_detector(ToyDenseDetector(), [], LossWeights())

    def test_detect_returns_scored_boxes_in_frame(self):
        samples = make_split('a', DAY, 1, seed=2).entries
        dets = detect(ToyDenseDetector(seed=0).freeze(), samples, score_threshold=0.0)
        for d in dets:
            self.assertEqual(d.image_id, 'a_0000')
            self.assertTrue(0.0 <= d.score <= 1.0)
            self.assertTrue(0.0 <= d.box.x0 < d.box.x1 <= 64.0)
