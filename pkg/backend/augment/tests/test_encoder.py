from tempfile import TemporaryDirectory

import torch
from django.test import SimpleTestCase

from augment.encoder import (FeatureCache, GeneratorFeatureEncoder, PatchIndexSet, ProjectionHeads, default_layer_ids,
                             extract_stack, pooled_features, project, sample_indices)
from augment.exceptions import EncoderError
from augment.toys.backbone import ToyBackbone
from augment.toys.encoder import ToyPatchEncoder


class StackTests(SimpleTestCase):
    """Multi-layer patch features"""

    def setUp(self):
        self.encoder = ToyPatchEncoder().freeze()
        self.x = torch.rand(2, 3, 32, 32)

    def test_special_tokens_dropped(self):
        stack = extract_stack(self.encoder, self.x)
        self.assertEqual(stack.layer_ids, (0, 1))
        self.assertEqual(stack.shape, (16, 16))
        self.assertEqual(stack.channels, (8, 8))
        self.assertEqual(tuple(stack.layers[0].features.shape), (2, 16, 8))

    def test_inputs_resized_to_encoder_size(self):
        stack = extract_stack(self.encoder, torch.rand(1, 3, 64, 48))
        self.assertEqual(stack.shape, (16, 16))

    def test_unfrozen_encoder_rejected(self):
        self.encoder.mixer.requires_grad_(True)
        with self.assertRaises(EncoderError):
            extract_stack(self.encoder, self.x)

    def test_layer_out_of_range(self):
        with self.assertRaises(EncoderError):
            extract_stack(self.encoder, self.x, layers=(2,))

    def test_intensity_mode_is_channel_constant(self):
        stack = extract_stack(ToyPatchEncoder(mode='intensity').freeze(), self.x, layers=(0,))
        features = stack.layers[0].features
        torch.testing.assert_close(features, features[..., :1].expand_as(features))

    def test_default_layers_of_a_deep_encoder(self):
        """Test the five blocks ending one before the final block"""
        self.assertEqual(default_layer_ids(40), (35, 36, 37, 38, 39))
        with self.assertRaises(EncoderError):
            default_layer_ids(5)


class SamplingAndProjectionTests(SimpleTestCase):

    def setUp(self):
        self.stack = extract_stack(ToyPatchEncoder().freeze(), torch.rand(1, 3, 32, 32))

    def test_sampling_without_replacement(self):
        indices = sample_indices(self.stack, 10, torch.Generator().manual_seed(0))
        self.assertEqual(len(indices), 2)
        for idx in indices.indices:
            self.assertEqual(len(set(idx.tolist())), 10)

    def test_sampling_is_seeded(self):
        a = sample_indices(self.stack, 8, torch.Generator().manual_seed(3))
        b = sample_indices(self.stack, 8, torch.Generator().manual_seed(3))
        for x, y in zip(a.indices, b.indices):
            self.assertTrue(torch.equal(x, y))

    def test_too_many_patches(self):
        with self.assertRaises(EncoderError):
            sample_indices(self.stack, 17)

    def test_projection_rows_are_unit_norm(self):
        heads = ProjectionHeads.for_stack(self.stack, out_dim=4, seed=0)
        embedded = project(self.stack, sample_indices(self.stack, 5, torch.Generator().manual_seed(0)), heads)
        self.assertEqual([tuple(e.shape) for e in embedded], [(1, 5, 4), (1, 5, 4)])
        for e in embedded:
            torch.testing.assert_close(e.norm(dim=-1), torch.ones(1, 5))

    def test_projection_index_checks(self):
        heads = ProjectionHeads.for_stack(self.stack, out_dim=4)
        bad = PatchIndexSet((torch.tensor([0, 16]), torch.tensor([0, 1])))
        with self.assertRaises(EncoderError):
            project(self.stack, bad, heads)
        with self.assertRaises(EncoderError):
            project(self.stack, PatchIndexSet((torch.tensor([0]),)), heads)

    def test_missing_head(self):
        heads = ProjectionHeads.for_stack(self.stack, out_dim=4)
        del heads['1']
        with self.assertRaises(EncoderError):
            project(self.stack, sample_indices(self.stack, 2), heads)


class PooledFeatureTests(SimpleTestCase):

    def test_pooled_shape(self):
        self.assertEqual(tuple(pooled_features(ToyPatchEncoder().freeze(), torch.rand(3, 3, 32, 32)).shape), (3, 8))

    def test_cache_reuses_features(self):
        encoder = ToyPatchEncoder().freeze()
        x = torch.rand(1, 3, 32, 32)
        with TemporaryDirectory() as tmp:
            cache = FeatureCache(tmp, encoder.encoder_id)
            first = cache.pooled(encoder, 'img', x)
            # a different image under the same id hits the cache
            second = cache.pooled(encoder, 'img', torch.zeros(1, 3, 32, 32))
            self.assertTrue(torch.equal(first, second))
            self.assertIsNone(FeatureCache(tmp, 'other-encoder').get('img', (1,)))


class GeneratorFeatureTests(SimpleTestCase):

    def test_generator_maps_as_tokens(self):
        backbone = ToyBackbone(seed=0)
        encoder = GeneratorFeatureEncoder(backbone, (16, 16))
        self.assertFalse(encoder.requires_frozen)
        stack = extract_stack(encoder, torch.rand(1, 3, 16, 16))
        self.assertEqual(stack.shape, (256, 64))
        self.assertEqual(stack.channels, (3, 12))
        self.assertEqual(list(encoder.parameters()), [])
