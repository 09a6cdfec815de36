from unittest import TestCase

import numpy as np

from pymemrecon.core.grids import TokenGrid
from pymemrecon.core.memory import (
    MemoryBank,
    MemoryConfig,
    working_insert,
)
from pymemrecon.core.model import (
    ModelConfig,
    ReconstructionModel,
    REFERENCE_SCALE,
)
from pymemrecon.core.tensor import (
    Tensor,
    no_grad,
)
from pymemrecon.exceptions import (
    ConfigError,
    DimensionError,
    PipelineOrderError,
)

from tests.helpers import (
    micro_config,
    micro_model,
    micro_scene,
)


class TestModelConfig(TestCase):

    def test__defaults__valid_toy_config(self):

        config = ModelConfig()

        self.assertEqual(config.validate(), [])
        self.assertEqual(config.num_patches, 16)
        self.assertEqual(REFERENCE_SCALE['image_size'], 224)

    def test__image_not_divisible_by_patch__diagnostic(self):

        self.assertTrue(ModelConfig(image_size=20).validate()[0].startswith('image_size:'))

    def test__width_not_divisible_by_heads__diagnostic(self):

        errors = ModelConfig(dec_dim=50).validate()

        self.assertTrue(any(error.startswith('dec_dim:') for error in errors))

    def test__invalid_config__model_construction_raises_config_error(self):

        with self.assertRaises(ConfigError):
            ReconstructionModel(ModelConfig(patch_size=0))


class TestReconstructionModel(TestCase):

    @classmethod
    def setUpClass(cls):
        cls.model = micro_model()
        cls.scene = micro_scene(n_frames=4)

    def test__same_seed__identical_parameters(self):

        other = micro_model(seed=0)
        different = micro_model(seed=1)

        for name, value in self.model.state_dict().items():
            np.testing.assert_array_equal(other.state_dict()[name], value)
        self.assertFalse(np.array_equal(
            different.state_dict()['encoder.patch_embed.weight'],
            self.model.state_dict()['encoder.patch_embed.weight'],
        ))

    def test__parameters__configured_dtype(self):

        self.assertTrue(all(param.dtype == np.float64 for param in self.model.parameters()))
        self.assertTrue(all(param.dtype == np.float32 for param in ReconstructionModel().parameters()))

    def test__encode_uint8_frame__one_token_per_patch(self):

        visual = self.model.encode_image(self.scene.frames[0], frame_index=3)

        self.assertEqual(visual.tokens.shape, (4, 16))
        self.assertEqual(visual.frame_index, 3)
        self.assertEqual(visual.kind, 'visual')

    def test__uint8_and_unit_float_frames__same_encoding(self):

        frame = self.scene.frames[0]

        from_uint8 = self.model.encode_image(frame).tokens.data
        from_float = self.model.encode_image(frame / 255.0).tokens.data

        np.testing.assert_allclose(from_uint8, from_float)

    def test__frame_of_wrong_size__config_error_raised(self):

        with self.assertRaises(ConfigError):
            self.model.encode_image(np.zeros((32, 32, 3), dtype=np.uint8))

    def test__decode_streams_with_different_token_counts__dimension_error_raised(self):

        visual = self.model.encode_image(self.scene.frames[0])
        short = TokenGrid(Tensor(np.zeros((3, 16))), 0, 'fused')

        with self.assertRaises(DimensionError):
            self.model.decode(visual, short)

    def test__initialize__predictions_and_memory_of_first_two_frames(self):

        with no_grad():
            output = self.model.initialize(self.scene.frames[0], self.scene.frames[1])

        pointmap, confidence = output.pred
        self.assertEqual(pointmap.shape, (16, 16))
        self.assertTrue(np.all(confidence.array > 1.0))
        self.assertEqual(output.frame_index, 0)
        self.assertEqual(output.target_frame_index, 1)
        self.assertEqual(output.next_query.frame_index, 1)
        self.assertEqual(output.new_key.tokens.shape, output.new_value.tokens.shape)
        self.assertEqual(output.new_key.tokens.shape, (4, 16))
        self.assertIsNone(output.record)

    def test__forward_step_without_query__two_view_initialisation(self):

        with no_grad():
            expected = self.model.initialize(self.scene.frames[0], self.scene.frames[1])
            output = self.model.forward_step(
                (self.scene.frames[0], self.scene.frames[1]), None, MemoryBank()
            )

        np.testing.assert_array_equal(output.pred[0].array, expected.pred[0].array)

    def test__forward_step_with_empty_bank__pipeline_order_error_raised(self):

        with no_grad():
            init = self.model.initialize(self.scene.frames[0], self.scene.frames[1])

            with self.assertRaises(PipelineOrderError):
                self.model.forward_step(self.scene.frames[2], init.next_query, MemoryBank(), init.visual)

    def test__forward_step_without_previous_visual__pipeline_order_error_raised(self):

        with no_grad():
            init = self.model.initialize(self.scene.frames[0], self.scene.frames[1])
            bank = MemoryBank(MemoryConfig(gating_enabled=False))
            working_insert(bank, init.new_key, init.new_value)

            with self.assertRaises(PipelineOrderError):
                self.model.forward_step(self.scene.frames[2], init.next_query, bank)

    def test__forward_steps__reference_stream_lags_one_frame(self):

        bank = MemoryBank(MemoryConfig(gating_enabled=False))
        with no_grad():
            output = self.model.initialize(self.scene.frames[0], self.scene.frames[1])
            working_insert(bank, output.new_key, output.new_value)
            for t in (2, 3):
                output = self.model.forward_step(
                    self.scene.frames[t], output.next_query, bank, prev_visual=output.visual
                )
                working_insert(bank, output.new_key, output.new_value)

                self.assertEqual(output.frame_index, t - 1)
                self.assertEqual(output.target_frame_index, t)
                self.assertEqual(output.record.weights.shape, (4, 4 * (t - 1)))
                np.testing.assert_allclose(output.record.weights.sum(axis=-1), 1.0, atol=1e-6)

    def test__micro_config_overrides__respected(self):

        config = micro_config(enc_depth=2)

        self.assertEqual(len(ReconstructionModel(config).encoder.blocks), 2)
