import json

from dataclasses import replace
from pathlib import Path
from tempfile import TemporaryDirectory
from unittest import TestCase

from pymemrecon.config import (
    RunConfig,
    CONFIG_SCHEMA_VERSION,
)
from pymemrecon.core.memory import MemoryConfig
from pymemrecon.core.model import ModelConfig
from pymemrecon.core.objective import CurriculumConfig
from pymemrecon.core.optim import OptimizerConfig
from pymemrecon.core.scenes import DataConfig
from pymemrecon.exceptions import ConfigError


class TestRunConfig(TestCase):

    def test__defaults__valid_with_documented_values(self):

        config = RunConfig()

        self.assertEqual(config.validate(), [])
        self.assertEqual(config.model.image_size, 32)
        self.assertEqual(config.memory.w_max, 5)
        self.assertEqual(config.memory.clip, 5e-4)
        self.assertEqual(config.memory.keep_tokens, 2000)
        self.assertEqual(config.loss.alpha, 0.4)
        self.assertEqual(config.optimizer.betas, (0.9, 0.95))
        self.assertEqual(config.total_steps, 200)

    def test__default_config__serialise_then_parse__equal_config(self):

        config = RunConfig()

        self.assertEqual(RunConfig.from_json(config.to_json()), config)

    def test__customised_config__serialise_then_parse__equal_config(self):

        config = RunConfig(
            model=ModelConfig(image_size=16, enc_dim=32, dec_dim=32, mem_enc_dim=32, dtype='float64'),
            memory=MemoryConfig(lt_max_tokens=256, topk_keep=100, clip_enabled=False),
            optimizer=OptimizerConfig(lr=1e-3, betas=(0.8, 0.9)),
            data=DataConfig(n_scenes=2, trajectory='random_walk', sky=True),
            seed=11,
            epochs=3,
            steps_per_epoch=4,
        )

        parsed = RunConfig.from_json(config.to_json())

        self.assertEqual(parsed, config)
        self.assertIsInstance(parsed.optimizer.betas, tuple)

    def test__serialised_config__tuples_written_as_lists_with_schema_version(self):

        document = json.loads(RunConfig().to_json())

        self.assertEqual(document['schema_version'], CONFIG_SCHEMA_VERSION)
        self.assertEqual(document['optimizer']['betas'], [0.9, 0.95])

    def test__steps_per_epoch_zero__validation_diagnostic(self):

        config = RunConfig(steps_per_epoch=0)

        diagnostics = config.validate()

        self.assertEqual(len(diagnostics), 1)
        self.assertTrue(diagnostics[0].startswith('steps_per_epoch:'))
        with self.assertRaises(ConfigError):
            config.check()

    def test__invalid_section_values__dotted_path_diagnostics(self):

        config = RunConfig(
            model=ModelConfig(image_size=30),
            memory=MemoryConfig(sim_gate=2.0),
        )

        diagnostics = config.validate()

        self.assertTrue(any(d.startswith('model.image_size:') for d in diagnostics))
        self.assertTrue(any(d.startswith('memory.sim_gate:') for d in diagnostics))

    def test__scene_too_short_for_clip__data_n_frames_diagnostic(self):

        config = RunConfig(
            data=DataConfig(n_frames=4),
            curriculum=CurriculumConfig(n_frames=5),
        )

        diagnostics = config.validate()

        self.assertEqual(len(diagnostics), 1)
        self.assertTrue(diagnostics[0].startswith('data.n_frames:'))

    def test__unknown_keys__config_error_lists_each(self):

        document = RunConfig().to_dict()
        document['colour'] = 'blue'
        document['memory']['w_min'] = 1

        with self.assertRaises(ConfigError) as ctx:
            RunConfig.from_dict(document)

        self.assertIn('colour: unknown key', ctx.exception.diagnostics)
        self.assertIn('memory.w_min: unknown key', ctx.exception.diagnostics)

    def test__wrong_schema_version__config_error_raised(self):

        document = RunConfig().to_dict()
        document['schema_version'] = 99

        with self.assertRaises(ConfigError) as ctx:
            RunConfig.from_dict(document)

        self.assertTrue(ctx.exception.diagnostics[0].startswith('schema_version:'))

    def test__missing_keys__defaults_used(self):

        config = RunConfig.from_dict({'memory': {'w_max': 3}, 'seed': 5})

        self.assertEqual(config, replace(RunConfig(), memory=MemoryConfig(w_max=3), seed=5))

    def test__not_json__config_error_raised(self):

        with self.assertRaises(ConfigError):
            RunConfig.from_json('{not json')

    def test__wrong_value_type__config_error_not_type_error(self):

        with self.assertRaises(ConfigError):
            RunConfig.from_dict({'model': {'mlp_ratio': 'wide'}})

    def test__dump_then_load__equal_config(self):

        config = RunConfig(seed=3)

        with TemporaryDirectory() as tmp_dir:
            path = Path(tmp_dir) / 'config.json'
            config.dump(path)

            self.assertEqual(RunConfig.load(path), config)

    def test__load_missing_file__config_error_raised(self):

        with TemporaryDirectory() as tmp_dir:
            with self.assertRaises(ConfigError):
                RunConfig.load(Path(tmp_dir) / 'missing.json')
